#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgt/graph.hpp"
#include "mgt/rng.hpp"
#include "mgt/sketch.hpp"
#include "mgt/tape.hpp"

namespace mgt {

enum class MaskMode { kPreSoftmax, kPostSoftmax };
enum class Variant { kMgt, kFfOnly };

MaskMode mask_mode_from_str(const std::string& s);
std::string mask_mode_str(MaskMode m);
Variant variant_from_str(const std::string& s);
std::string variant_str(Variant v);

struct MGTConfig {
    int64_t seq_len = 100;        // S
    int64_t d_hat = 128;          // base embedding width
    int64_t layers = 4;           // L
    int64_t heads_per_graph = 8;  // I per graph
    double dropout = 0.1;
    std::vector<GraphSpec> graphs;
    MaskMode mask_mode = MaskMode::kPreSoftmax;
    bool self_loops = true;
    int64_t num_classes = 345;
    double coord_scale = 256.0;
    Variant variant = Variant::kMgt;

    int64_t d() const { return 3 * d_hat; }
    int64_t num_graphs() const { return static_cast<int64_t>(graphs.size()); }
    int64_t heads_total() const { return num_graphs() * heads_per_graph; }
    int64_t head_dim() const { return d() / heads_per_graph; }
    int64_t embed_rows() const { return seq_len + 3; }

    void validate() const;
    nlohmann::json to_json() const;
    static MGTConfig from_json(const nlohmann::json& j);
};

// Exact count of trainable scalars (batch-norm gamma/beta included, running
// statistics not).
int64_t count_parameters(const MGTConfig& cfg);

struct ParamBlockCount {
    std::string block;
    int64_t count = 0;
};
std::vector<ParamBlockCount> parameter_breakdown(const MGTConfig& cfg);

// ---------------------------------------------------------------------------

template <class T>
struct LinearParams {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out] when has_bias
    bool has_bias = true;

    static LinearParams make(int64_t in, int64_t out, bool bias, Rng& rng) {
        LinearParams p;
        p.has_bias = bias;
        p.w = Tensor<T>({in, out});
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : p.w.data) v = static_cast<T>(rng.uniform(-bound, bound));
        if (bias) {
            p.b = Tensor<T>({out});
            for (auto& v : p.b.data) v = static_cast<T>(rng.uniform(-bound, bound));
        }
        return p;
    }
};

template <class T>
struct BatchNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormState<T> state;

    static BatchNormParams make(int64_t d) {
        BatchNormParams p;
        p.gamma = Tensor<T>::full({d}, T(1));
        p.beta = Tensor<T>::zeros({d});
        p.state.running_mean = Tensor<T>::zeros({d});
        p.state.running_var = Tensor<T>::full({d}, T(1));
        return p;
    }
};

// Fused per-graph attention projections, all [d, d], bias-free; heads are
// split from the fused output.
template <class T>
struct GraphAttnParams {
    Tensor<T> wq, wk, wv, wo;
};

template <class T>
struct LayerParams {
    std::vector<GraphAttnParams<T>> graphs;
    LinearParams<T> wo_tilde;  // [G*d, d], bias
    LinearParams<T> ff;        // [d, d], bias
    BatchNormParams<T> bn1;    // after attention sub-layer (or the only BN for ff_only)
    BatchNormParams<T> bn2;    // after FF sub-layer (unused for ff_only)
};

template <class T>
struct ModelParams {
    MGTConfig cfg;
    LinearParams<T> e1;  // [2, d_hat], no bias
    Tensor<T> e2;        // [(S+3), d_hat]; rows 0..S-1 positions, S..S+2 flags
    std::vector<LayerParams<T>> layers;
    LinearParams<T> c1, c2, c3;

    static ModelParams init(const MGTConfig& cfg, Rng& rng);

    // Trainable tensors in canonical (checkpoint) order.
    void visit(const std::function<void(const std::string&, Tensor<T>&)>& fn);
    // Non-trainable state (batch-norm running statistics).
    void visit_state(const std::function<void(const std::string&, Tensor<T>&)>& fn);

    int64_t total_scalars();
};

// ---------------------------------------------------------------------------

template <class T>
struct Batch {
    int64_t b = 0;
    int64_t s = 0;
    Tensor<T> coords;               // [B, S, 2], already divided by coord_scale
    std::vector<int32_t> flag_idx;  // B*S, values S + flag
    std::vector<int32_t> pos_idx;   // B*S
    std::vector<uint8_t> valid;     // B*S
    std::vector<int32_t> labels;    // B
    std::vector<std::vector<uint8_t>> masks;  // per graph, B*S*S

    MaskView mask_view(int64_t g) const { return MaskView{masks[static_cast<size_t>(g)].data(), b, s}; }
};

// Builds every graph in cfg.graphs for one sketch. rng is consumed only by
// random graph specs.
std::vector<AdjacencyMatrix> build_graphs(const MGTConfig& cfg, const SketchTensor& sketch, Rng rng);

template <class T>
Batch<T> make_batch(const MGTConfig& cfg, std::span<const SketchTensor> sketches,
                    std::span<const std::vector<AdjacencyMatrix>> graphs);

// Activations captured during a forward pass: effective attention weights
// (post-masking, per mask mode) and raw scaled scores as one [B, H, S, S]
// tensor per (layer, graph), node features per layer, and the readout.
template <class T>
struct AttentionCapture {
    int64_t layers = 0, graphs = 0, heads = 0, s = 0, b = 0;
    std::vector<Tensor<T>> weights;
    std::vector<Tensor<T>> scores;
    std::vector<Tensor<T>> node_features;  // [B,S,d]; index 0 = input embedding, l = after layer l
    Tensor<T> readout;                     // [B, d]

    const Tensor<T>& weight(int64_t l, int64_t g) const {
        return weights[static_cast<size_t>(l * graphs + g)];
    }
    const Tensor<T>& score(int64_t l, int64_t g) const {
        return scores[static_cast<size_t>(l * graphs + g)];
    }
};

// Model tensors leased onto a tape as gradient leaves, in visit order.
template <class T>
struct BoundParams {
    std::vector<Val> vals;
    std::vector<std::string> names;
    std::unordered_map<std::string, size_t> by_name;

    Val at(const std::string& name) const {
        auto it = by_name.find(name);
        check(it != by_name.end(), "BoundParams: unknown parameter `" + name + "`");
        return vals[it->second];
    }
};

template <class T>
BoundParams<T> bind_params(Tape<T>& tape, ModelParams<T>& params, bool requires_grad = true);

// Masked scaled dot-product attention (Q, K, V may carry a leading head/batch
// dim). Returns the output and the effective weights.
template <class T>
struct GraphAttentionOut {
    Val output;
    Val weights;
    Val scores;
};

template <class T>
GraphAttentionOut<T> graph_attention(Tape<T>& tape, Val q, Val k, Val v, MaskView a, MaskMode mode);

// Full network forward pass. `bound` must have been produced by bind_params
// on the same tape and params.
template <class T>
Val forward(Tape<T>& tape, ModelParams<T>& params, const BoundParams<T>& bound, const Batch<T>& batch,
            RunMode mode, Rng& rng, AttentionCapture<T>* capture = nullptr);

// Convenience: unrecorded eval-mode logits.
template <class T>
Tensor<T> eval_logits(ModelParams<T>& params, const Batch<T>& batch, AttentionCapture<T>* capture = nullptr);

}  // namespace mgt

#include "mgt/model_impl.hpp"
