#pragma once

// Template implementation for train.hpp; include train.hpp instead.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "mgt/error.hpp"

namespace mgt {

template <class T>
void adam_update_tensor(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, int64_t step,
                        double lr, double beta1, double beta2, double eps) {
    check_arg(same_shape(p.shape, g.shape) && same_shape(p.shape, m.shape) && same_shape(p.shape, v.shape),
              "adam_update_tensor: shape mismatch " + shape_str(p.shape) + " vs " + shape_str(g.shape));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T corr1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(step)));
    const T corr2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(step)));
    const T alpha = static_cast<T>(lr);
    const T e = static_cast<T>(eps);
    for (int64_t i = 0; i < p.size(); ++i) {
        T gi = g.data[i];
        m.data[i] = b1 * m.data[i] + (T(1) - b1) * gi;
        v.data[i] = b2 * v.data[i] + (T(1) - b2) * gi * gi;
        T mhat = m.data[i] / corr1;
        T vhat = v.data[i] / corr2;
        p.data[i] -= alpha * mhat / (std::sqrt(vhat) + e);
    }
}

template <class T>
void adam_step(ModelParams<T>& params, std::span<const Tensor<T>* const> grads, AdamState<T>& state,
               double lr) {
    ++state.step;
    size_t i = 0;
    params.visit([&](const std::string& name, Tensor<T>& p) {
        check(i < grads.size(), "adam_step: missing gradient for `" + name + "`");
        adam_update_tensor(p, *grads[i], state.m[i], state.v[i], state.step, lr, state.beta1, state.beta2,
                           state.eps);
        ++i;
    });
    check(i == grads.size(), "adam_step: gradient count mismatch");
}

template <class T>
std::vector<double> top_k_accuracy(const Tensor<T>& logits, std::span<const int32_t> labels,
                                   std::span<const int64_t> ks) {
    check_arg(logits.rank() == 2, "top_k_accuracy: logits must be rank 2");
    int64_t n = logits.dim(0), c = logits.dim(1);
    check_arg(static_cast<int64_t>(labels.size()) == n, "top_k_accuracy: label count mismatch");
    for (int64_t k : ks) check_arg(k >= 1 && k <= c, "top_k_accuracy: k out of range");

    std::vector<int64_t> hits(ks.size(), 0);
    for (int64_t r = 0; r < n; ++r) {
        const T* row = logits.ptr() + r * c;
        int32_t lbl = labels[static_cast<size_t>(r)];
        check_arg(lbl >= 0 && lbl < c, "top_k_accuracy: label out of range");
        T lv = row[lbl];
        // Rank of the true class under "ties go to the lower index".
        int64_t rank = 0;
        for (int64_t j = 0; j < c; ++j) {
            if (row[j] > lv || (row[j] == lv && j < lbl)) ++rank;
        }
        for (size_t ki = 0; ki < ks.size(); ++ki)
            if (rank < ks[ki]) ++hits[ki];
    }
    std::vector<double> out(ks.size());
    for (size_t ki = 0; ki < ks.size(); ++ki) out[ki] = static_cast<double>(hits[ki]) / static_cast<double>(n);
    return out;
}

inline std::vector<std::vector<AdjacencyMatrix>> build_graphs_for(const MGTConfig& cfg,
                                                                  std::span<const SketchTensor> data,
                                                                  uint64_t seed, uint64_t set_tag) {
    Rng base = Rng(seed).split(set_tag);
    std::vector<std::vector<AdjacencyMatrix>> out;
    out.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i)
        out.push_back(build_graphs(cfg, data[i], base.split(static_cast<uint64_t>(i))));
    return out;
}

template <class T>
EvalMetrics evaluate(ModelParams<T>& params, std::span<const SketchTensor> data,
                     std::span<const std::vector<AdjacencyMatrix>> graphs, int64_t batch_size) {
    check_arg(!data.empty(), "evaluate: empty dataset");
    check_arg(batch_size >= 1, "evaluate: batch_size must be >= 1");
    const int64_t ks_arr[] = {1, 5, 10};
    std::span<const int64_t> ks(ks_arr, 3);
    double sums[3] = {0, 0, 0};
    int64_t total = 0;
    for (size_t start = 0; start < data.size(); start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(data.size(), start + static_cast<size_t>(batch_size));
        Batch<T> batch = make_batch<T>(params.cfg, data.subspan(start, end - start),
                                       graphs.subspan(start, end - start));
        Tensor<T> logits = eval_logits(params, batch);
        // Clamp k to the class count for tiny test configs.
        int64_t c = logits.dim(1);
        std::vector<int64_t> ks_eff(ks.begin(), ks.end());
        for (int64_t& k : ks_eff) k = std::min(k, c);
        std::vector<double> accs = top_k_accuracy(logits, batch.labels, ks_eff);
        int64_t bsz = static_cast<int64_t>(end - start);
        for (int i = 0; i < 3; ++i) sums[i] += accs[static_cast<size_t>(i)] * static_cast<double>(bsz);
        total += bsz;
    }
    EvalMetrics m;
    m.acc1 = sums[0] / static_cast<double>(total);
    m.acc5 = sums[1] / static_cast<double>(total);
    m.acc10 = sums[2] / static_cast<double>(total);
    m.count = total;
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: little-endian binary with a JSON header.

namespace detail {

inline void write_bytes(std::ofstream& f, const void* p, size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void read_bytes(std::ifstream& f, void* p, size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    check(f.good(), "checkpoint: unexpected end of file");
}

template <class T>
void write_tensor_entry(std::ofstream& f, uint8_t section, const std::string& name, const Tensor<T>& t) {
    write_bytes(f, &section, 1);
    uint16_t nl = static_cast<uint16_t>(name.size());
    write_bytes(f, &nl, 2);
    write_bytes(f, name.data(), name.size());
    uint8_t rank = static_cast<uint8_t>(t.rank());
    write_bytes(f, &rank, 1);
    for (int64_t d : t.shape) write_bytes(f, &d, 8);
    write_bytes(f, t.ptr(), sizeof(T) * t.data.size());
}

template <class T>
struct TensorEntry {
    uint8_t section;
    std::string name;
    Tensor<T> tensor;
};

template <class T>
TensorEntry<T> read_tensor_entry(std::ifstream& f) {
    TensorEntry<T> e;
    read_bytes(f, &e.section, 1);
    uint16_t nl = 0;
    read_bytes(f, &nl, 2);
    e.name.resize(nl);
    read_bytes(f, e.name.data(), nl);
    uint8_t rank = 0;
    read_bytes(f, &rank, 1);
    Shape shape(rank);
    for (auto& d : shape) read_bytes(f, &d, 8);
    e.tensor = Tensor<T>(shape);
    read_bytes(f, e.tensor.ptr(), sizeof(T) * e.tensor.data.size());
    return e;
}

inline constexpr char kCkptMagic[8] = {'M', 'G', 'T', 'C', 'K', 'P', 'T', '\n'};

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, Checkpoint<T>& ckpt) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_checkpoint: cannot write " + path);
    detail::write_bytes(f, detail::kCkptMagic, 8);
    uint32_t version = kCheckpointVersion;
    detail::write_bytes(f, &version, 4);
    uint8_t scalar = sizeof(T);
    detail::write_bytes(f, &scalar, 1);

    nlohmann::json header;
    header["model"] = ckpt.model_cfg.to_json();
    header["train"] = ckpt.train_cfg.to_json();
    header["epoch"] = ckpt.epoch;
    header["best_val_acc1"] = ckpt.best_val_acc1;
    header["rng"] = ckpt.rng_state;
    header["adam_step"] = ckpt.adam.step;
    std::string hs = header.dump();
    uint64_t hl = hs.size();
    detail::write_bytes(f, &hl, 8);
    detail::write_bytes(f, hs.data(), hs.size());

    uint32_t n_entries = 0;
    ckpt.params.visit([&](const std::string&, Tensor<T>&) { n_entries += 3; });  // param + adam m/v
    ckpt.params.visit_state([&](const std::string&, Tensor<T>&) { ++n_entries; });
    detail::write_bytes(f, &n_entries, 4);

    size_t idx = 0;
    ckpt.params.visit([&](const std::string& name, Tensor<T>& t) {
        detail::write_tensor_entry(f, 0, name, t);
        detail::write_tensor_entry(f, 1, name, ckpt.adam.m[idx]);
        detail::write_tensor_entry(f, 2, name, ckpt.adam.v[idx]);
        ++idx;
    });
    ckpt.params.visit_state([&](const std::string& name, Tensor<T>& t) { detail::write_tensor_entry(f, 3, name, t); });
    check(f.good(), "save_checkpoint: write failed for " + path);
}

inline std::string checkpoint_precision(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "checkpoint_precision: cannot read " + path);
    char magic[8];
    detail::read_bytes(f, magic, 8);
    check(std::memcmp(magic, detail::kCkptMagic, 8) == 0, "checkpoint: bad magic in " + path);
    uint32_t version = 0;
    detail::read_bytes(f, &version, 4);
    check(version == kCheckpointVersion, "checkpoint: unsupported version " + std::to_string(version));
    uint8_t scalar = 0;
    detail::read_bytes(f, &scalar, 1);
    check(scalar == 4 || scalar == 8, "checkpoint: unknown scalar width");
    return scalar == 4 ? "f32" : "f64";
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_checkpoint: cannot read " + path);
    char magic[8];
    detail::read_bytes(f, magic, 8);
    check(std::memcmp(magic, detail::kCkptMagic, 8) == 0, "load_checkpoint: bad magic in " + path);
    uint32_t version = 0;
    detail::read_bytes(f, &version, 4);
    check(version == kCheckpointVersion,
          "load_checkpoint: version mismatch (file " + std::to_string(version) + ", expected " +
              std::to_string(kCheckpointVersion) + ")");
    uint8_t scalar = 0;
    detail::read_bytes(f, &scalar, 1);
    check(scalar == sizeof(T), "load_checkpoint: precision mismatch (file holds " +
                                   std::string(scalar == 4 ? "f32" : "f64") + ", requested " +
                                   std::string(sizeof(T) == 4 ? "f32" : "f64") + ")");
    uint64_t hl = 0;
    detail::read_bytes(f, &hl, 8);
    std::string hs(hl, '\0');
    detail::read_bytes(f, hs.data(), hl);
    nlohmann::json header = nlohmann::json::parse(hs);

    Checkpoint<T> ckpt;
    ckpt.model_cfg = MGTConfig::from_json(header.at("model"));
    ckpt.train_cfg = TrainConfig::from_json(header.at("train"));
    ckpt.epoch = header.at("epoch").get<int64_t>();
    ckpt.best_val_acc1 = header.at("best_val_acc1").get<double>();
    ckpt.rng_state = header.at("rng").get<std::string>();

    Rng shape_rng(0);
    ckpt.params = ModelParams<T>::init(ckpt.model_cfg, shape_rng);
    ckpt.adam = AdamState<T>::make(ckpt.params);
    ckpt.adam.step = header.at("adam_step").get<int64_t>();

    std::unordered_map<std::string, Tensor<T>*> slots[4];
    size_t idx = 0;
    std::vector<size_t> order_index;
    ckpt.params.visit([&](const std::string& name, Tensor<T>& t) {
        slots[0][name] = &t;
        slots[1][name] = &ckpt.adam.m[idx];
        slots[2][name] = &ckpt.adam.v[idx];
        ++idx;
    });
    ckpt.params.visit_state([&](const std::string& name, Tensor<T>& t) { slots[3][name] = &t; });

    uint32_t n_entries = 0;
    detail::read_bytes(f, &n_entries, 4);
    for (uint32_t i = 0; i < n_entries; ++i) {
        auto entry = detail::read_tensor_entry<T>(f);
        check(entry.section < 4, "load_checkpoint: corrupt section tag");
        auto it = slots[entry.section].find(entry.name);
        check(it != slots[entry.section].end(),
              "load_checkpoint: tensor `" + entry.name + "` does not exist in the configured model");
        check(same_shape(it->second->shape, entry.tensor.shape),
              "load_checkpoint: shape mismatch for `" + entry.name + "`: file " +
                  shape_str(entry.tensor.shape) + " vs model " + shape_str(it->second->shape));
        *it->second = std::move(entry.tensor);
    }
    return ckpt;
}

// ---------------------------------------------------------------------------

namespace detail {

// Consecutive index chunks of batch_size; a trailing chunk of one sample is
// merged into the previous batch (batch-norm wants >= 2 rows).
inline std::vector<std::pair<size_t, size_t>> batch_ranges(size_t n, int64_t batch_size) {
    std::vector<std::pair<size_t, size_t>> out;
    size_t bs = static_cast<size_t>(batch_size);
    for (size_t start = 0; start < n; start += bs) out.emplace_back(start, std::min(n, start + bs));
    if (out.size() >= 2 && out.back().second - out.back().first == 1) {
        out[out.size() - 2].second = out.back().second;
        out.pop_back();
    }
    return out;
}

}  // namespace detail

template <class T>
TrainResult<T> train_model(const MGTConfig& mcfg, const TrainConfig& tcfg,
                           std::span<const SketchTensor> train_set, std::span<const SketchTensor> val_set,
                           const TrainHooks& hooks, std::optional<Checkpoint<T>> resume) {
    mcfg.validate();
    tcfg.validate();
    check_arg(!train_set.empty(), "train_model: empty training set");
    check_arg(!val_set.empty(), "train_model: empty validation set");
    auto log = [&](const std::string& s) {
        if (hooks.log) hooks.log(s);
    };

    auto train_graphs = build_graphs_for(mcfg, train_set, tcfg.seed, /*set_tag=*/1);
    auto val_graphs = build_graphs_for(mcfg, val_set, tcfg.seed, /*set_tag=*/2);

    Rng rng(tcfg.seed);
    ModelParams<T> params;
    AdamState<T> adam;
    int64_t start_epoch = 0;
    EarlyStopper stopper(tcfg.patience);
    TrainResult<T> result;

    if (resume) {
        params = std::move(resume->params);
        adam = std::move(resume->adam);
        start_epoch = resume->epoch + 1;
        rng = Rng::deserialize(resume->rng_state);
        // Seed the stopper with the stored best.
        stopper.offer(resume->epoch, resume->best_val_acc1);
        result.best = Checkpoint<T>{mcfg, tcfg, params, adam, rng.serialize(), resume->epoch,
                                    resume->best_val_acc1};
        result.best_epoch = resume->epoch;
        log("resumed at epoch " + std::to_string(start_epoch));
    } else {
        Rng init_rng = rng.split(0x1217);
        params = ModelParams<T>::init(mcfg, init_rng);
        adam = AdamState<T>::make(params);
    }

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int64_t epoch = start_epoch; epoch < tcfg.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        double lr = lr_at_epoch(tcfg, epoch);

        // Per-epoch derived seeds keep resumed runs bit-identical.
        Rng epoch_rng(tcfg.seed + static_cast<uint64_t>(epoch));
        epoch_rng.shuffle(order);
        Rng dropout_rng = epoch_rng.split(0xD0);

        double loss_sum = 0;
        int64_t seen = 0;
        for (auto [start, end] : detail::batch_ranges(order.size(), tcfg.batch_size)) {
            std::vector<SketchTensor> sketches;
            std::vector<std::vector<AdjacencyMatrix>> graphs;
            sketches.reserve(end - start);
            graphs.reserve(end - start);
            for (size_t i = start; i < end; ++i) {
                sketches.push_back(train_set[order[i]]);
                graphs.push_back(train_graphs[order[i]]);
            }
            Batch<T> batch = make_batch<T>(mcfg, sketches, graphs);

            Tape<T> tape;
            BoundParams<T> bound = bind_params(tape, params);
            Val logits = forward(tape, params, bound, batch, RunMode::kTrain, dropout_rng);
            Val loss = tape.cross_entropy_logits(logits, batch.labels);
            double loss_v = static_cast<double>(tape.value(loss).data[0]);
            if (!std::isfinite(loss_v))
                throw std::runtime_error("train_model: non-finite loss " + std::to_string(loss_v) +
                                         " at epoch " + std::to_string(epoch) + ", batch starting at sample " +
                                         std::to_string(start) + "; lower the learning rate");
            tape.backward(loss);

            std::vector<const Tensor<T>*> grads;
            grads.reserve(bound.vals.size());
            for (Val v : bound.vals) grads.push_back(&tape.grad(v));
            adam_step(params, std::span<const Tensor<T>* const>(grads), adam, lr);

            loss_sum += loss_v * static_cast<double>(end - start);
            seen += static_cast<int64_t>(end - start);
        }

        EvalMetrics val = evaluate(params, val_set, val_graphs, tcfg.batch_size);
        auto t1 = std::chrono::steady_clock::now();

        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr;
        em.train_loss = loss_sum / static_cast<double>(seen);
        em.acc1 = val.acc1;
        em.acc5 = val.acc5;
        em.acc10 = val.acc10;
        em.seconds = std::chrono::duration<double>(t1 - t0).count();
        result.history.push_back(em);
        log("epoch " + std::to_string(epoch) + " lr " + std::to_string(lr) + " loss " +
            std::to_string(em.train_loss) + " val acc@1 " + std::to_string(val.acc1));

        bool improved = val.acc1 > result.best.best_val_acc1 || result.best_epoch < 0;
        if (improved) {
            result.best = Checkpoint<T>{mcfg, tcfg, params, adam, rng.serialize(), epoch, val.acc1};
            result.best_epoch = epoch;
        }
        bool stop = stopper.offer(epoch, val.acc1);
        if (hooks.on_epoch && !hooks.on_epoch(em)) {
            log("stopped by hook after epoch " + std::to_string(epoch));
            break;
        }
        if (stop) {
            log("early stop after epoch " + std::to_string(epoch) + " (best epoch " +
                std::to_string(stopper.best_epoch()) + ")");
            break;
        }
    }
    check(result.best_epoch >= 0, "train_model: no epochs were run");
    return result;
}

}  // namespace mgt
