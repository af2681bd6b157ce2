#include "mgt/gradcheck.hpp"

#include <algorithm>

namespace mgt {

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

// Values kept away from zero so ReLU-style kinks do not sit inside the
// finite-difference stencil.
Tensor<double> rand_tensor_off_zero(Shape shape, Rng& rng) {
    Tensor<double> t = rand_tensor(std::move(shape), rng);
    for (auto& v : t.data)
        if (std::fabs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
    return t;
}

std::vector<uint8_t> rand_mask(int64_t batch, int64_t s, Rng& rng, double density = 0.5) {
    std::vector<uint8_t> m(static_cast<size_t>(batch * s * s), 0);
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j)
                m[static_cast<size_t>((b * s + i) * s + j)] = (i == j || rng.uniform() < density) ? 1 : 0;
    return m;
}

// loss = sum(out * w) with a fixed random weighting, so the cotangent is
// non-uniform.
template <class OutFn>
auto weighted(OutFn fn, Tensor<double> w) {
    return [fn, w = std::move(w)](Tape<double>& tape, std::span<const Val> ins) {
        Val out = fn(tape, ins);
        Val wv = tape.leaf(w);
        return tape.reduce_sum(tape.mul(out, wv));
    };
}

}  // namespace

GradCheckReport op_gradcheck_suite(uint64_t seed) {
    GradCheckReport report;
    Rng rng(seed);
    auto run = [&](const std::string& name, auto loss_fn, std::vector<Tensor<double>> inputs) {
        report.entries.push_back({name, check_gradients(loss_fn, inputs)});
    };

    // Three shapes per op, per the contract.
    for (auto [m, k, n] : {std::array<int64_t, 3>{2, 3, 4}, {1, 5, 2}, {4, 4, 4}}) {
        Tensor<double> w({m, n});
        for (auto& v : w.data) v = rng.normal();
        run("matmul", weighted([](Tape<double>& t, std::span<const Val> i) { return t.matmul(i[0], i[1]); }, w),
            {rand_tensor({m, k}, rng), rand_tensor({k, n}, rng)});
        run("matmul_nt",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.matmul_nt(i[0], i[1]); }, w),
            {rand_tensor({m, k}, rng), rand_tensor({n, k}, rng)});
    }
    // Batched and broadcast forms.
    {
        Tensor<double> w({2, 3, 4});
        for (auto& v : w.data) v = rng.normal();
        run("matmul.batched",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.matmul(i[0], i[1]); }, w),
            {rand_tensor({2, 3, 5}, rng), rand_tensor({2, 5, 4}, rng)});
        run("matmul.broadcast_b",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.matmul(i[0], i[1]); }, w),
            {rand_tensor({2, 3, 5}, rng), rand_tensor({5, 4}, rng)});
        run("matmul_nt.batched",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.matmul_nt(i[0], i[1]); }, w),
            {rand_tensor({2, 3, 5}, rng), rand_tensor({2, 4, 5}, rng)});
    }

    for (int64_t n : {3, 7, 12}) {
        Tensor<double> w({2, n});
        for (auto& v : w.data) v = rng.normal();
        run("add", weighted([](Tape<double>& t, std::span<const Val> i) { return t.add(i[0], i[1]); }, w),
            {rand_tensor({2, n}, rng), rand_tensor({2, n}, rng)});
        run("add_bias",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.add_bias(i[0], i[1]); }, w),
            {rand_tensor({2, n}, rng), rand_tensor({n}, rng)});
        run("scale",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.scale(i[0], 0.37); }, w),
            {rand_tensor({2, n}, rng)});
        run("relu", weighted([](Tape<double>& t, std::span<const Val> i) { return t.relu(i[0]); }, w),
            {rand_tensor_off_zero({2, n}, rng)});
        run("mul", weighted([](Tape<double>& t, std::span<const Val> i) { return t.mul(i[0], i[1]); }, w),
            {rand_tensor({2, n}, rng), rand_tensor({2, n}, rng)});
        run("softmax_lastdim",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.softmax_lastdim(i[0]); }, w),
            {rand_tensor({2, n}, rng)});
    }

    for (auto [rows, a, b] : {std::array<int64_t, 3>{2, 3, 4}, {1, 1, 5}, {3, 2, 2}}) {
        Tensor<double> w({rows, a + b});
        for (auto& v : w.data) v = rng.normal();
        run("concat_lastdim",
            weighted(
                [](Tape<double>& t, std::span<const Val> i) {
                    return t.concat_lastdim({i[0], i[1]});
                },
                w),
            {rand_tensor({rows, a}, rng), rand_tensor({rows, b}, rng)});
    }

    for (auto [bsz, s, heads, dh] : {std::array<int64_t, 4>{2, 3, 2, 2}, {1, 4, 4, 1}, {2, 2, 1, 5}}) {
        Tensor<double> w({bsz, heads, s, dh});
        for (auto& v : w.data) v = rng.normal();
        run("split_heads",
            weighted(
                [heads = heads](Tape<double>& t, std::span<const Val> i) { return t.split_heads(i[0], heads); },
                w),
            {rand_tensor({bsz, s, heads * dh}, rng)});
        Tensor<double> w2({bsz, s, heads * dh});
        for (auto& v : w2.data) v = rng.normal();
        run("merge_heads",
            weighted([](Tape<double>& t, std::span<const Val> i) { return t.merge_heads(i[0]); }, w2),
            {rand_tensor({bsz, heads, s, dh}, rng)});
    }

    for (auto [bsz, s] : {std::array<int64_t, 2>{1, 4}, {2, 3}, {3, 5}}) {
        auto mask = rand_mask(bsz, s, rng);
        MaskView mv{mask.data(), bsz, s};
        Tensor<double> w({bsz, s, s});
        for (auto& v : w.data) v = rng.normal();
        run("masked_fill_neg_inf+softmax",
            weighted(
                [mv](Tape<double>& t, std::span<const Val> i) {
                    return t.softmax_lastdim(t.masked_fill_neg_inf(i[0], mv));
                },
                w),
            {rand_tensor({bsz, s, s}, rng)});
        run("hadamard_mask",
            weighted([mv](Tape<double>& t, std::span<const Val> i) { return t.hadamard_mask(i[0], mv); }, w),
            {rand_tensor({bsz, s, s}, rng)});
    }

    for (auto [v, e, cnt] : {std::array<int64_t, 3>{5, 3, 4}, {3, 2, 6}, {8, 4, 3}}) {
        std::vector<int32_t> idx(static_cast<size_t>(cnt));
        for (auto& x : idx) x = static_cast<int32_t>(rng.uniform_int(0, v - 1));
        idx[0] = idx[static_cast<size_t>(cnt - 1)];  // force a repeated row
        Tensor<double> w({cnt, e});
        for (auto& x : w.data) x = rng.normal();
        run("embedding_lookup",
            weighted(
                [idx, cnt = cnt](Tape<double>& t, std::span<const Val> i) {
                    return t.embedding_lookup(i[0], idx, {cnt});
                },
                w),
            {rand_tensor({v, e}, rng)});
    }

    for (auto [bsz, s, d] : {std::array<int64_t, 3>{2, 3, 4}, {1, 5, 2}, {3, 2, 3}}) {
        std::vector<uint8_t> valid(static_cast<size_t>(bsz * s), 0);
        for (int64_t b = 0; b < bsz; ++b) {
            int64_t t = rng.uniform_int(1, s);
            for (int64_t i = 0; i < t; ++i) valid[static_cast<size_t>(b * s + i)] = 1;
        }
        Tensor<double> w({bsz, d});
        for (auto& x : w.data) x = rng.normal();
        run("sum_rows_masked",
            weighted(
                [valid](Tape<double>& t, std::span<const Val> i) {
                    return t.sum_rows_masked(i[0], valid);
                },
                w),
            {rand_tensor({bsz, s, d}, rng)});
    }

    for (uint64_t dseed : {11ULL, 12ULL, 13ULL}) {
        Tensor<double> w({4, 6});
        for (auto& x : w.data) x = rng.normal();
        // A fresh identically-seeded rng per call keeps the mask fixed across
        // the finite-difference evaluations.
        run("dropout",
            weighted(
                [dseed](Tape<double>& t, std::span<const Val> i) {
                    Rng r(dseed);
                    return t.dropout(i[0], 0.4, RunMode::kTrain, r);
                },
                w),
            {rand_tensor({4, 6}, rng)});
    }

    for (auto [n, d] : {std::array<int64_t, 2>{8, 4}, {4, 2}, {6, 3}}) {
        Tensor<double> w({n, d});
        for (auto& x : w.data) x = rng.normal();
        run("batch_norm",
            weighted(
                [n = n, d = d](Tape<double>& t, std::span<const Val> i) {
                    BatchNormState<double> state{Tensor<double>::zeros({d}), Tensor<double>::full({d}, 1.0)};
                    return t.batch_norm(i[0], i[1], i[2], state, RunMode::kTrain);
                },
                w),
            {rand_tensor({n, d}, rng), rand_tensor({d}, rng), rand_tensor({d}, rng)});
        std::vector<uint8_t> valid(static_cast<size_t>(n), 1);
        valid[0] = 0;
        valid[static_cast<size_t>(n / 2)] = 0;
        run("batch_norm.masked",
            weighted(
                [n = n, d = d, valid](Tape<double>& t, std::span<const Val> i) {
                    BatchNormState<double> state{Tensor<double>::zeros({d}), Tensor<double>::full({d}, 1.0)};
                    return t.batch_norm(i[0], i[1], i[2], state, RunMode::kTrain, valid);
                },
                w),
            {rand_tensor({n, d}, rng), rand_tensor({d}, rng), rand_tensor({d}, rng)});
        run("batch_norm.eval",
            weighted(
                [n = n, d = d](Tape<double>& t, std::span<const Val> i) {
                    BatchNormState<double> state{Tensor<double>::full({d}, 0.3), Tensor<double>::full({d}, 2.0)};
                    return t.batch_norm(i[0], i[1], i[2], state, RunMode::kEval);
                },
                w),
            {rand_tensor({n, d}, rng), rand_tensor({d}, rng), rand_tensor({d}, rng)});
    }

    for (auto [n, c] : {std::array<int64_t, 2>{3, 4}, {1, 6}, {5, 2}}) {
        std::vector<int32_t> labels(static_cast<size_t>(n));
        for (auto& l : labels) l = static_cast<int32_t>(rng.uniform_int(0, c - 1));
        run("cross_entropy_logits",
            [labels](Tape<double>& t, std::span<const Val> i) {
                return t.cross_entropy_logits(i[0], labels);
            },
            {rand_tensor({n, c}, rng)});
    }

    for (int64_t n : {4, 9, 2}) {
        run("reduce_sum",
            [](Tape<double>& t, std::span<const Val> i) { return t.reduce_sum(i[0]); },
            {rand_tensor({n}, rng)});
    }

    return report;
}

MGTConfig tiny_gradcheck_config(MaskMode mode) {
    MGTConfig cfg;
    cfg.seq_len = 8;
    cfg.d_hat = 6;
    cfg.layers = 2;
    cfg.heads_per_graph = 3;
    cfg.dropout = 0.0;  // finite differences need a deterministic loss
    cfg.graphs = parse_graph_list("khop:1,global");
    cfg.mask_mode = mode;
    cfg.num_classes = 5;
    return cfg;
}

namespace {

GradCheckReport model_gradcheck(const MGTConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    Rng init_rng = rng.split(1);
    ModelParams<double> params = ModelParams<double>::init(cfg, init_rng);

    // Two synthetic sketches, one shorter than S so padding is exercised.
    std::vector<SketchTensor> sketches;
    Rng sketch_rng = rng.split(2);
    for (int i = 0; i < 2; ++i) {
        RawDrawing d = synthesize_sketch(sketch_rng, 2, 2, i == 0 ? 3 : 4);
        auto seq = flatten(d);
        SketchTensor t = pad_truncate(seq, cfg.seq_len);
        t.label = static_cast<int32_t>(sketch_rng.uniform_int(0, cfg.num_classes - 1));
        sketches.push_back(std::move(t));
    }
    std::vector<std::vector<AdjacencyMatrix>> graphs;
    for (const auto& s : sketches) graphs.push_back(build_graphs(cfg, s, rng.split(3)));
    Batch<double> batch = make_batch<double>(cfg, sketches, graphs);

    auto loss_of = [&](bool record) {
        // Returns (loss val, bound) on a fresh tape.
        struct Out {
            Tape<double> tape;
            BoundParams<double> bound;
            Val loss;
            Out(bool rec) : tape(rec) {}
        };
        auto out = std::make_unique<Out>(record);
        out->bound = bind_params(out->tape, params, record);
        Rng fwd_rng(0);
        Val logits = forward(out->tape, params, out->bound, batch, RunMode::kTrain, fwd_rng);
        out->loss = out->tape.cross_entropy_logits(logits, batch.labels);
        return out;
    };

    auto analytic = loss_of(true);
    analytic->tape.backward(analytic->loss);

    auto eval = [&]() {
        auto o = loss_of(false);
        return o->tape.value(o->loss).data[0];
    };

    GradCheckReport report;
    const double h = 1e-5;
    size_t idx = 0;
    params.visit([&](const std::string& name, Tensor<double>& t) {
        const Tensor<double>& g = analytic->tape.grad(analytic->bound.vals[idx]);
        double worst = 0;
        for (int64_t i = 0; i < t.size(); ++i) {
            double orig = t.data[i];
            t.data[i] = orig + h;
            double lp = eval();
            t.data[i] = orig - h;
            double lm = eval();
            t.data[i] = orig;
            double fd = (lp - lm) / (2 * h);
            worst = std::max(worst, grad_rel_err(g.data[i], fd));
        }
        report.entries.push_back({name, worst});
        ++idx;
    });
    return report;
}

}  // namespace

GradCheckReport mgt_gradcheck(MaskMode mode, uint64_t seed) {
    return model_gradcheck(tiny_gradcheck_config(mode), seed);
}

GradCheckReport ff_only_gradcheck(uint64_t seed) {
    MGTConfig cfg = tiny_gradcheck_config(MaskMode::kPreSoftmax);
    cfg.variant = Variant::kFfOnly;
    return model_gradcheck(cfg, seed);
}

}  // namespace mgt
