#pragma once

// Template implementation for model.hpp; include model.hpp instead.

#include <cmath>

namespace mgt {

template <class T>
ModelParams<T> ModelParams<T>::init(const MGTConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams<T> p;
    p.cfg = cfg;
    int64_t d = cfg.d(), dh = cfg.d_hat;

    p.e1 = LinearParams<T>::make(2, dh, /*bias=*/false, rng);
    p.e2 = Tensor<T>({cfg.embed_rows(), dh});
    for (auto& v : p.e2.data) v = static_cast<T>(rng.normal());

    p.layers.resize(static_cast<size_t>(cfg.layers));
    for (auto& layer : p.layers) {
        if (cfg.variant == Variant::kMgt) {
            layer.graphs.resize(static_cast<size_t>(cfg.num_graphs()));
            for (auto& g : layer.graphs) {
                double bound = 1.0 / std::sqrt(static_cast<double>(d));
                for (Tensor<T>* w : {&g.wq, &g.wk, &g.wv, &g.wo}) {
                    *w = Tensor<T>({d, d});
                    for (auto& v : w->data) v = static_cast<T>(rng.uniform(-bound, bound));
                }
            }
            layer.wo_tilde = LinearParams<T>::make(cfg.num_graphs() * d, d, /*bias=*/true, rng);
            layer.bn2 = BatchNormParams<T>::make(d);
        }
        layer.ff = LinearParams<T>::make(d, d, /*bias=*/true, rng);
        layer.bn1 = BatchNormParams<T>::make(d);
    }

    p.c1 = LinearParams<T>::make(d, 4 * dh, /*bias=*/true, rng);
    p.c2 = LinearParams<T>::make(4 * dh, 4 * dh, /*bias=*/true, rng);
    p.c3 = LinearParams<T>::make(4 * dh, cfg.num_classes, /*bias=*/true, rng);
    return p;
}

template <class T>
void ModelParams<T>::visit(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("e1.w", e1.w);
    fn("e2", e2);
    for (size_t l = 0; l < layers.size(); ++l) {
        std::string lp = "layer" + std::to_string(l) + ".";
        LayerParams<T>& layer = layers[l];
        for (size_t g = 0; g < layer.graphs.size(); ++g) {
            std::string gp = lp + "graph" + std::to_string(g) + ".";
            fn(gp + "wq", layer.graphs[g].wq);
            fn(gp + "wk", layer.graphs[g].wk);
            fn(gp + "wv", layer.graphs[g].wv);
            fn(gp + "wo", layer.graphs[g].wo);
        }
        if (cfg.variant == Variant::kMgt) {
            fn(lp + "wo_tilde.w", layer.wo_tilde.w);
            fn(lp + "wo_tilde.b", layer.wo_tilde.b);
        }
        fn(lp + "ff.w", layer.ff.w);
        fn(lp + "ff.b", layer.ff.b);
        fn(lp + "bn1.gamma", layer.bn1.gamma);
        fn(lp + "bn1.beta", layer.bn1.beta);
        if (cfg.variant == Variant::kMgt) {
            fn(lp + "bn2.gamma", layer.bn2.gamma);
            fn(lp + "bn2.beta", layer.bn2.beta);
        }
    }
    fn("classifier.fc1.w", c1.w);
    fn("classifier.fc1.b", c1.b);
    fn("classifier.fc2.w", c2.w);
    fn("classifier.fc2.b", c2.b);
    fn("classifier.fc3.w", c3.w);
    fn("classifier.fc3.b", c3.b);
}

template <class T>
void ModelParams<T>::visit_state(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (size_t l = 0; l < layers.size(); ++l) {
        std::string lp = "layer" + std::to_string(l) + ".";
        fn(lp + "bn1.running_mean", layers[l].bn1.state.running_mean);
        fn(lp + "bn1.running_var", layers[l].bn1.state.running_var);
        if (cfg.variant == Variant::kMgt) {
            fn(lp + "bn2.running_mean", layers[l].bn2.state.running_mean);
            fn(lp + "bn2.running_var", layers[l].bn2.state.running_var);
        }
    }
}

template <class T>
int64_t ModelParams<T>::total_scalars() {
    int64_t n = 0;
    visit([&](const std::string&, Tensor<T>& t) { n += t.size(); });
    return n;
}

inline std::vector<AdjacencyMatrix> build_graphs(const MGTConfig& cfg, const SketchTensor& sketch, Rng rng) {
    std::vector<AdjacencyMatrix> out;
    out.reserve(static_cast<size_t>(cfg.num_graphs()));
    for (const GraphSpec& spec : cfg.graphs) out.push_back(build_graph(sketch, spec, cfg.self_loops, &rng));
    return out;
}

template <class T>
Batch<T> make_batch(const MGTConfig& cfg, std::span<const SketchTensor> sketches,
                    std::span<const std::vector<AdjacencyMatrix>> graphs) {
    check_arg(!sketches.empty(), "make_batch: empty batch");
    check_arg(graphs.size() == sketches.size(), "make_batch: graphs/sketches size mismatch");
    int64_t b = static_cast<int64_t>(sketches.size());
    int64_t s = cfg.seq_len;
    Batch<T> batch;
    batch.b = b;
    batch.s = s;
    batch.coords = Tensor<T>({b, s, 2});
    batch.flag_idx.resize(static_cast<size_t>(b * s));
    batch.pos_idx.resize(static_cast<size_t>(b * s));
    batch.valid.resize(static_cast<size_t>(b * s));
    batch.labels.resize(static_cast<size_t>(b));
    batch.masks.assign(static_cast<size_t>(cfg.num_graphs()),
                       std::vector<uint8_t>(static_cast<size_t>(b * s * s)));

    T inv_scale = static_cast<T>(1.0 / cfg.coord_scale);
    for (int64_t n = 0; n < b; ++n) {
        const SketchTensor& sk = sketches[static_cast<size_t>(n)];
        check_arg(sk.seq_len == s, "make_batch: sketch S " + std::to_string(sk.seq_len) +
                                       " does not match config S " + std::to_string(s));
        batch.labels[static_cast<size_t>(n)] = sk.label;
        for (int64_t i = 0; i < s; ++i) {
            batch.coords.data[static_cast<size_t>((n * s + i) * 2)] = static_cast<T>(sk.x(i)) * inv_scale;
            batch.coords.data[static_cast<size_t>((n * s + i) * 2 + 1)] = static_cast<T>(sk.y(i)) * inv_scale;
            batch.flag_idx[static_cast<size_t>(n * s + i)] =
                static_cast<int32_t>(s) + sk.flags[static_cast<size_t>(i)];
            batch.pos_idx[static_cast<size_t>(n * s + i)] = static_cast<int32_t>(i);
            batch.valid[static_cast<size_t>(n * s + i)] = i < sk.true_len;
        }
        const auto& gs = graphs[static_cast<size_t>(n)];
        check_arg(static_cast<int64_t>(gs.size()) == cfg.num_graphs(), "make_batch: wrong graph count for sample");
        for (int64_t g = 0; g < cfg.num_graphs(); ++g) {
            check_arg(gs[static_cast<size_t>(g)].s == s, "make_batch: adjacency S mismatch");
            std::copy(gs[static_cast<size_t>(g)].data.begin(), gs[static_cast<size_t>(g)].data.end(),
                      batch.masks[static_cast<size_t>(g)].begin() + n * s * s);
        }
    }
    return batch;
}

template <class T>
BoundParams<T> bind_params(Tape<T>& tape, ModelParams<T>& params, bool requires_grad) {
    BoundParams<T> bound;
    params.visit([&](const std::string& name, Tensor<T>& t) {
        bound.names.push_back(name);
        bound.by_name[name] = bound.vals.size();
        bound.vals.push_back(tape.leaf(t, requires_grad));
    });
    return bound;
}

template <class T>
GraphAttentionOut<T> graph_attention(Tape<T>& tape, Val q, Val k, Val v, MaskView a, MaskMode mode) {
    int64_t dk = tape.value(k).dim(-1);
    Val scores = tape.scale(tape.matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
    GraphAttentionOut<T> out;
    out.scores = scores;
    if (mode == MaskMode::kPreSoftmax) {
        out.weights = tape.softmax_lastdim(tape.masked_fill_neg_inf(scores, a));
    } else {
        out.weights = tape.hadamard_mask(tape.softmax_lastdim(scores), a);
    }
    out.output = tape.matmul(out.weights, v);
    return out;
}

namespace detail {

template <class T>
Val linear(Tape<T>& tape, Val x, const BoundParams<T>& bound, const std::string& prefix, bool bias) {
    Val y = tape.matmul(x, bound.at(prefix + ".w"));
    if (bias) y = tape.add_bias(y, bound.at(prefix + ".b"));
    return y;
}

// BN over (batch x node) positions of non-padding nodes; padding rows pass
// through the affine transform but do not shift the statistics.
template <class T>
Val batch_norm_nodes(Tape<T>& tape, Val x, const BoundParams<T>& bound, const std::string& prefix,
                     BatchNormState<T>& state, RunMode mode, const Batch<T>& batch) {
    int64_t d = tape.value(x).dim(-1);
    Val flat = tape.reshape(x, {batch.b * batch.s, d});
    Val normed = tape.batch_norm(flat, bound.at(prefix + ".gamma"), bound.at(prefix + ".beta"), state, mode,
                                 std::span<const uint8_t>(batch.valid));
    return tape.reshape(normed, {batch.b, batch.s, d});
}

// One multi-head attention block for a single graph (Eq. 3-4): dropout on the
// shared input, fused Q/K/V projections split head-wise, masked attention,
// heads merged and projected by W^O.
template <class T>
Val multi_head(Tape<T>& tape, Val h, const BoundParams<T>& bound, const std::string& gp, MaskView mask,
               const MGTConfig& cfg, RunMode mode, Rng& rng, Tensor<T>* capture_weights,
               Tensor<T>* capture_scores) {
    Val hd = tape.dropout(h, cfg.dropout, mode, rng);
    Val q = tape.split_heads(tape.matmul(hd, bound.at(gp + "wq")), cfg.heads_per_graph);
    Val k = tape.split_heads(tape.matmul(hd, bound.at(gp + "wk")), cfg.heads_per_graph);
    Val v = tape.split_heads(tape.matmul(hd, bound.at(gp + "wv")), cfg.heads_per_graph);
    GraphAttentionOut<T> att = graph_attention(tape, q, k, v, mask, cfg.mask_mode);
    if (capture_weights) *capture_weights = tape.value(att.weights);
    if (capture_scores) *capture_scores = tape.value(att.scores);
    return tape.matmul(tape.merge_heads(att.output), bound.at(gp + "wo"));
}

// Multi-graph multi-head attention (Eq. 5-6): per-graph heads concatenated,
// projected by W^O-tilde, rectified.
template <class T>
Val mgmha(Tape<T>& tape, Val h, const BoundParams<T>& bound, const std::string& lp, const Batch<T>& batch,
          const MGTConfig& cfg, RunMode mode, Rng& rng, AttentionCapture<T>* capture, int64_t layer) {
    std::vector<Val> gheads;
    gheads.reserve(static_cast<size_t>(cfg.num_graphs()));
    for (int64_t g = 0; g < cfg.num_graphs(); ++g) {
        Tensor<T>* cw = nullptr;
        Tensor<T>* cs = nullptr;
        if (capture) {
            cw = &capture->weights[static_cast<size_t>(layer * cfg.num_graphs() + g)];
            cs = &capture->scores[static_cast<size_t>(layer * cfg.num_graphs() + g)];
        }
        gheads.push_back(multi_head(tape, h, bound, lp + "graph" + std::to_string(g) + ".", batch.mask_view(g),
                                    cfg, mode, rng, cw, cs));
    }
    Val cat = tape.concat_lastdim(std::span<const Val>(gheads));
    return tape.relu(linear(tape, cat, bound, lp + "wo_tilde", /*bias=*/true));
}

template <class T>
Val feed_forward(Tape<T>& tape, Val h, const BoundParams<T>& bound, const std::string& lp,
                 const MGTConfig& cfg, RunMode mode, Rng& rng) {
    return tape.dropout(tape.relu(linear(tape, h, bound, lp + "ff", /*bias=*/true)), cfg.dropout, mode, rng);
}

}  // namespace detail

template <class T>
Val forward(Tape<T>& tape, ModelParams<T>& params, const BoundParams<T>& bound, const Batch<T>& batch,
            RunMode mode, Rng& rng, AttentionCapture<T>* capture) {
    const MGTConfig& cfg = params.cfg;
    check_arg(batch.s == cfg.seq_len, "forward: batch S " + std::to_string(batch.s) +
                                          " does not match config S " + std::to_string(cfg.seq_len));
    if (capture) {
        capture->layers = cfg.layers;
        capture->graphs = cfg.num_graphs();
        capture->heads = cfg.heads_per_graph;
        capture->s = batch.s;
        capture->b = batch.b;
        capture->weights.assign(static_cast<size_t>(cfg.layers * cfg.num_graphs()), Tensor<T>{});
        capture->scores.assign(static_cast<size_t>(cfg.layers * cfg.num_graphs()), Tensor<T>{});
        capture->node_features.clear();
    }

    // Multi-modal input (Eq. 1): coordinate block first, then flag and
    // position lookups from the shared table.
    Val coords = tape.leaf(batch.coords);
    Val ce = tape.matmul(coords, bound.at("e1.w"));
    Val fe = tape.embedding_lookup(bound.at("e2"), batch.flag_idx, {batch.b, batch.s});
    Val pe = tape.embedding_lookup(bound.at("e2"), batch.pos_idx, {batch.b, batch.s});
    Val h = tape.concat_lastdim({ce, fe, pe});
    if (capture) capture->node_features.push_back(tape.value(h));

    for (int64_t l = 0; l < cfg.layers; ++l) {
        std::string lp = "layer" + std::to_string(l) + ".";
        LayerParams<T>& lparams = params.layers[static_cast<size_t>(l)];
        if (cfg.variant == Variant::kMgt) {
            Val att = detail::mgmha(tape, h, bound, lp, batch, cfg, mode, rng, capture, l);
            Val h_hat = detail::batch_norm_nodes(tape, tape.add(h, att), bound, lp + "bn1", lparams.bn1.state,
                                                 mode, batch);
            Val ff = detail::feed_forward(tape, h_hat, bound, lp, cfg, mode, rng);
            h = detail::batch_norm_nodes(tape, tape.add(h_hat, ff), bound, lp + "bn2", lparams.bn2.state, mode,
                                         batch);
        } else {
            Val ff = detail::feed_forward(tape, h, bound, lp, cfg, mode, rng);
            h = detail::batch_norm_nodes(tape, tape.add(h, ff), bound, lp + "bn1", lparams.bn1.state, mode,
                                         batch);
        }
        if (capture) capture->node_features.push_back(tape.value(h));
    }

    // Readout (Eq. 9) and MLP classifier.
    Val pooled = tape.sum_rows_masked(h, batch.valid);
    if (capture) capture->readout = tape.value(pooled);
    Val z = tape.dropout(tape.relu(detail::linear(tape, pooled, bound, "classifier.fc1", true)), cfg.dropout,
                         mode, rng);
    z = tape.dropout(tape.relu(detail::linear(tape, z, bound, "classifier.fc2", true)), cfg.dropout, mode, rng);
    return detail::linear(tape, z, bound, "classifier.fc3", true);
}

template <class T>
Tensor<T> eval_logits(ModelParams<T>& params, const Batch<T>& batch, AttentionCapture<T>* capture) {
    Tape<T> tape(/*recording=*/false);
    BoundParams<T> bound = bind_params(tape, params, /*requires_grad=*/false);
    Rng rng(0);  // eval mode draws nothing
    Val logits = forward(tape, params, bound, batch, RunMode::kEval, rng, capture);
    return tape.value(logits);
}

}  // namespace mgt
