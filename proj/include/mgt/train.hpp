#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgt/model.hpp"

namespace mgt {

struct TrainConfig {
    double initial_lr = 5e-5;
    double decay_factor = 0.7;
    int64_t decay_every = 10;  // epochs
    int64_t max_epochs = 100;
    int64_t patience = 10;
    int64_t batch_size = 128;
    uint64_t seed = 0;
    std::string precision = "f32";  // f32 | f64

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// initial_lr * decay_factor^floor(epoch / decay_every)
double lr_at_epoch(const TrainConfig& cfg, int64_t epoch);

// Tracks the best validation accuracy; stop once `patience` consecutive
// epochs pass without strict improvement.
class EarlyStopper {
public:
    explicit EarlyStopper(int64_t patience) : patience_(patience) {}

    // Returns true when training should stop after this epoch.
    bool offer(int64_t epoch, double acc) {
        if (acc > best_) {
            best_ = acc;
            best_epoch_ = epoch;
            return false;
        }
        return epoch - best_epoch_ >= patience_;
    }

    double best() const { return best_; }
    int64_t best_epoch() const { return best_epoch_; }

private:
    int64_t patience_;
    double best_ = -1.0;
    int64_t best_epoch_ = -1;
};

template <class T>
struct AdamState {
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Tensor<T>> m;  // aligned with ModelParams visit order
    std::vector<Tensor<T>> v;

    static AdamState make(ModelParams<T>& params) {
        AdamState s;
        params.visit([&](const std::string&, Tensor<T>& t) {
            s.m.push_back(Tensor<T>::zeros(t.shape));
            s.v.push_back(Tensor<T>::zeros(t.shape));
        });
        return s;
    }
};

// Bias-corrected Adam update of a single tensor; step is the post-increment
// step counter (1 on the first update).
template <class T>
void adam_update_tensor(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, int64_t step,
                        double lr, double beta1, double beta2, double eps);

// One optimizer step over all parameters; grads aligned with visit order.
template <class T>
void adam_step(ModelParams<T>& params, std::span<const Tensor<T>* const> grads, AdamState<T>& state,
               double lr);

// Fraction of rows whose true label is among the k largest logits; ties are
// broken in favour of the lower class index.
template <class T>
std::vector<double> top_k_accuracy(const Tensor<T>& logits, std::span<const int32_t> labels,
                                   std::span<const int64_t> ks);

struct EpochMetrics {
    int64_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double acc1 = 0, acc5 = 0, acc10 = 0;
    double seconds = 0;
};

void write_metrics_csv(const std::string& path, std::span<const EpochMetrics> history);
std::vector<EpochMetrics> read_metrics_csv(const std::string& path);

struct EvalMetrics {
    double acc1 = 0, acc5 = 0, acc10 = 0;
    int64_t count = 0;
};

// Deterministic per-sample graph construction for a whole set; `set_tag`
// separates the train/val/test random streams.
std::vector<std::vector<AdjacencyMatrix>> build_graphs_for(const MGTConfig& cfg,
                                                           std::span<const SketchTensor> data,
                                                           uint64_t seed, uint64_t set_tag);

template <class T>
EvalMetrics evaluate(ModelParams<T>& params, std::span<const SketchTensor> data,
                     std::span<const std::vector<AdjacencyMatrix>> graphs, int64_t batch_size);

template <class T>
struct Checkpoint {
    MGTConfig model_cfg;
    TrainConfig train_cfg;
    ModelParams<T> params;
    AdamState<T> adam;
    std::string rng_state;
    int64_t epoch = -1;
    double best_val_acc1 = 0;
};

inline constexpr uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, Checkpoint<T>& ckpt);
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path);
// Peeks the stored precision tag ("f32"/"f64") without loading tensors.
std::string checkpoint_precision(const std::string& path);

struct TrainHooks {
    // Called after each epoch; return false to stop training.
    std::function<bool(const EpochMetrics&)> on_epoch;
    // Receives progress lines (timestamped logging stays out of primary outputs).
    std::function<void(const std::string&)> log;
};

template <class T>
struct TrainResult {
    std::vector<EpochMetrics> history;
    Checkpoint<T> best;
    int64_t best_epoch = -1;
};

// Full optimization loop: seeded shuffling, Adam with the step-decay
// schedule, per-epoch validation, best-checkpoint tracking and early
// stopping. A non-finite loss aborts with a diagnostic.
template <class T>
TrainResult<T> train_model(const MGTConfig& mcfg, const TrainConfig& tcfg,
                           std::span<const SketchTensor> train_set, std::span<const SketchTensor> val_set,
                           const TrainHooks& hooks = {}, std::optional<Checkpoint<T>> resume = {});

}  // namespace mgt

#include "mgt/train_impl.hpp"
