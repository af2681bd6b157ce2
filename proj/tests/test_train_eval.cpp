#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mgt/train.hpp"

using namespace mgt;

namespace {

MGTConfig tiny_model() {
    MGTConfig cfg;
    cfg.seq_len = 12;
    cfg.d_hat = 4;
    cfg.layers = 1;
    cfg.heads_per_graph = 2;
    cfg.dropout = 0.0;
    cfg.graphs = parse_graph_list("khop:1,global");
    cfg.num_classes = 2;
    return cfg;
}

// Two trivially separable classes: class 0 lives in the left half of the
// canvas, class 1 in the right half.
std::vector<SketchTensor> toy_set(int64_t per_class, int64_t s, uint64_t seed) {
    Rng rng(seed);
    std::vector<SketchTensor> out;
    for (int32_t cls = 0; cls < 2; ++cls)
        for (int64_t i = 0; i < per_class; ++i) {
            RawDrawing d;
            d.label = cls ? "right" : "left";
            int base = cls ? 180 : 20;
            std::vector<std::array<int, 2>> stroke;
            int64_t n = rng.uniform_int(3, 6);
            for (int64_t p = 0; p < n; ++p)
                stroke.push_back({base + static_cast<int>(rng.uniform_int(0, 50)),
                                  base + static_cast<int>(rng.uniform_int(0, 50))});
            d.strokes.push_back(stroke);
            SketchTensor t = pad_truncate(flatten(d), s);
            t.label = cls;
            out.push_back(std::move(t));
        }
    return out;
}

TrainConfig fast_train(int64_t epochs) {
    TrainConfig t;
    t.initial_lr = 3e-3;
    t.max_epochs = epochs;
    t.patience = std::min<int64_t>(10, epochs);
    t.batch_size = 8;
    t.seed = 5;
    return t;
}

}  // namespace

TEST_SUITE("train_eval") {

TEST_CASE("lr schedule reproduces the published values") {
    TrainConfig cfg;  // defaults: 5e-5, x0.7 every 10
    CHECK(lr_at_epoch(cfg, 0) == 5e-5);
    CHECK(lr_at_epoch(cfg, 9) == 5e-5);
    CHECK(lr_at_epoch(cfg, 10) == doctest::Approx(3.5e-5).epsilon(1e-15));
    CHECK(lr_at_epoch(cfg, 25) == doctest::Approx(2.45e-5).epsilon(1e-15));

    double prev = lr_at_epoch(cfg, 0);
    for (int64_t e = 1; e < 100; ++e) {
        double cur = lr_at_epoch(cfg, e);
        CHECK(cur <= prev);
        prev = cur;
    }
    CHECK_THROWS_AS(lr_at_epoch(cfg, -1), std::invalid_argument);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged from a fresh state") {
    Tensor<double> p({3}, {1.0, -2.0, 0.5});
    Tensor<double> p0 = p;
    Tensor<double> g = Tensor<double>::zeros({3});
    Tensor<double> m = Tensor<double>::zeros({3});
    Tensor<double> v = Tensor<double>::zeros({3});
    adam_update_tensor(p, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8);
    CHECK(p.data == p0.data);
    CHECK(m.data == std::vector<double>(3, 0.0));
}

TEST_CASE("adam first step moves by roughly -lr * sign(gradient)") {
    Tensor<double> p({2}, {0.0, 0.0});
    Tensor<double> g({2}, {0.5, -3.0});
    Tensor<double> m = Tensor<double>::zeros({2});
    Tensor<double> v = Tensor<double>::zeros({2});
    adam_update_tensor(p, g, m, v, 1, 0.01, 0.9, 0.999, 1e-8);
    CHECK(p.data[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(p.data[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("adam matches an independent scalar oracle to 1e-12 over 100 steps") {
    // Standalone scalar Adam, written from the published update rule.
    double theta = 1.3, om = 0, ov = 0;
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;

    Tensor<double> p({1}, {1.3});
    Tensor<double> m = Tensor<double>::zeros({1});
    Tensor<double> v = Tensor<double>::zeros({1});
    for (int64_t step = 1; step <= 100; ++step) {
        double grad = 2.0 * (theta - 0.25) + std::sin(static_cast<double>(step));
        om = b1 * om + (1 - b1) * grad;
        ov = b2 * ov + (1 - b2) * grad * grad;
        double mhat = om / (1 - std::pow(b1, static_cast<double>(step)));
        double vhat = ov / (1 - std::pow(b2, static_cast<double>(step)));
        theta -= lr * mhat / (std::sqrt(vhat) + eps);

        // Same gradient stream fed to the library implementation; the oracle
        // uses the pre-update parameter, so compute grad from its own state.
        Tensor<double> g({1}, {grad});
        adam_update_tensor(p, g, m, v, step, lr, b1, b2, eps);
        REQUIRE(std::fabs(p.data[0] - theta) < 1e-12);
    }
}

TEST_CASE("adam is bitwise deterministic") {
    auto run = [] {
        Rng rng(3);
        Tensor<double> p({16});
        for (auto& x : p.data) x = rng.normal();
        Tensor<double> m = Tensor<double>::zeros({16});
        Tensor<double> v = Tensor<double>::zeros({16});
        for (int64_t step = 1; step <= 20; ++step) {
            Tensor<double> g({16});
            for (auto& x : g.data) x = rng.normal();
            adam_update_tensor(p, g, m, v, step, 0.01, 0.9, 0.999, 1e-8);
        }
        return p.data;
    };
    CHECK(run() == run());
}

TEST_CASE("top-k accuracy with tie-break by lower index") {
    Tensor<double> onehot({2, 4}, {9, 0, 0, 0, 0, 0, 9, 0});
    std::vector<int32_t> labels = {0, 2};
    std::vector<int64_t> ks = {1, 2};
    auto acc = top_k_accuracy(onehot, labels, ks);
    CHECK(acc[0] == 1.0);

    // True class always ranked third.
    Tensor<double> third({2, 6}, {5, 4, 3, 0, 0, 0, 5, 4, 3, 0, 0, 0});
    std::vector<int32_t> l3 = {2, 2};
    std::vector<int64_t> k15 = {1, 5};
    auto acc3 = top_k_accuracy(third, l3, k15);
    CHECK(acc3[0] == 0.0);
    CHECK(acc3[1] == 1.0);

    // Exact ties: the lower class index outranks the true one.
    Tensor<double> tied({1, 3}, {1, 1, 1});
    std::vector<int32_t> lt = {1};
    std::vector<int64_t> k1 = {1};
    CHECK(top_k_accuracy(tied, lt, k1)[0] == 0.0);
    std::vector<int32_t> lt0 = {0};
    CHECK(top_k_accuracy(tied, lt0, k1)[0] == 1.0);
}

TEST_CASE("top-k accuracy on random logits approaches k/C") {
    Rng rng(77);
    int64_t n = 10000, c = 345;
    Tensor<double> logits({n, c});
    for (auto& v : logits.data) v = rng.normal();
    std::vector<int32_t> labels(static_cast<size_t>(n));
    for (auto& l : labels) l = static_cast<int32_t>(rng.uniform_int(0, c - 1));
    std::vector<int64_t> ks = {1, 5, 10};
    auto acc = top_k_accuracy(logits, labels, ks);
    CHECK(std::fabs(acc[0] - 1.0 / 345.0) < 0.005);
    CHECK(acc[0] <= acc[1]);
    CHECK(acc[1] <= acc[2]);
}

TEST_CASE("early stopper: best at epoch 7 with patience 10 stops after epoch 17") {
    EarlyStopper stopper(10);
    int64_t stopped_at = -1;
    for (int64_t epoch = 0; epoch < 100; ++epoch) {
        double acc = epoch <= 7 ? 0.1 * static_cast<double>(epoch) : 0.5;  // improves through epoch 7
        if (stopper.offer(epoch, acc)) {
            stopped_at = epoch;
            break;
        }
    }
    CHECK(stopped_at == 17);
    CHECK(stopper.best_epoch() == 7);

    EarlyStopper fresh(3);
    CHECK_FALSE(fresh.offer(0, 0.5));
    CHECK_FALSE(fresh.offer(1, 0.4));
    CHECK_FALSE(fresh.offer(2, 0.6));  // improvement resets the window
    CHECK_FALSE(fresh.offer(3, 0.1));
    CHECK_FALSE(fresh.offer(4, 0.1));
    CHECK(fresh.offer(5, 0.1));
}

TEST_CASE("train runs exactly one epoch when max_epochs is 1") {
    auto data = toy_set(6, 12, 1);
    TrainConfig tcfg = fast_train(1);
    auto result = train_model<float>(tiny_model(), tcfg, data, data);
    CHECK(result.history.size() == 1);
}

TEST_CASE("training is fully reproducible for a fixed seed") {
    auto data = toy_set(8, 12, 2);
    TrainConfig tcfg = fast_train(4);
    auto r1 = train_model<float>(tiny_model(), tcfg, data, data);
    auto r2 = train_model<float>(tiny_model(), tcfg, data, data);
    REQUIRE(r1.history.size() == r2.history.size());
    for (size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
        CHECK(r1.history[i].acc1 == r2.history[i].acc1);
        CHECK(r1.history[i].lr == r2.history[i].lr);
    }
    // Identical best parameters, bitwise.
    size_t idx = 0;
    std::vector<Tensor<float>*> p2;
    r2.best.params.visit([&](const std::string&, Tensor<float>& t) { p2.push_back(&t); });
    r1.best.params.visit([&](const std::string&, Tensor<float>& t) {
        CHECK(t.data == p2[idx]->data);
        ++idx;
    });
}

TEST_CASE("best checkpoint never has lower validation accuracy than any epoch") {
    auto data = toy_set(8, 12, 3);
    TrainConfig tcfg = fast_train(6);
    auto result = train_model<float>(tiny_model(), tcfg, data, data);
    double max_seen = 0;
    for (const auto& m : result.history) max_seen = std::max(max_seen, m.acc1);
    CHECK(result.best.best_val_acc1 == max_seen);
}

TEST_CASE("divergence guard aborts with a diagnostic") {
    auto data = toy_set(6, 12, 4);
    TrainConfig tcfg = fast_train(5);
    tcfg.initial_lr = 1e30;  // overflow the attention scores
    CHECK_THROWS_WITH_AS(train_model<float>(tiny_model(), tcfg, data, data),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("evaluate is pure and nested") {
    auto data = toy_set(10, 12, 5);
    MGTConfig mcfg = tiny_model();
    Rng rng(6);
    ModelParams<float> params = ModelParams<float>::init(mcfg, rng);
    auto graphs = build_graphs_for(mcfg, data, 7, 2);
    EvalMetrics a = evaluate(params, data, graphs, 8);
    EvalMetrics b = evaluate(params, data, graphs, 8);
    CHECK(a.acc1 == b.acc1);
    CHECK(a.acc5 == b.acc5);
    CHECK(a.acc10 == b.acc10);
    CHECK(a.acc1 <= a.acc5);
    CHECK(a.acc5 <= a.acc10);
    CHECK(a.count == static_cast<int64_t>(data.size()));
}

TEST_CASE("checkpoint round trip is bit-exact and resume continues the schedule") {
    namespace fs = std::filesystem;
    auto data = toy_set(8, 12, 8);
    TrainConfig tcfg = fast_train(3);
    MGTConfig mcfg = tiny_model();
    auto result = train_model<float>(mcfg, tcfg, data, data);

    std::string path = (fs::temp_directory_path() / "mgt_ckpt_test.bin").string();
    save_checkpoint(path, result.best);
    CHECK(checkpoint_precision(path) == "f32");
    Checkpoint<float> loaded = load_checkpoint<float>(path);
    CHECK(loaded.epoch == result.best.epoch);
    CHECK(loaded.best_val_acc1 == result.best.best_val_acc1);
    CHECK(loaded.adam.step == result.best.adam.step);
    CHECK(loaded.rng_state == result.best.rng_state);

    size_t idx = 0;
    std::vector<Tensor<float>*> orig;
    result.best.params.visit([&](const std::string&, Tensor<float>& t) { orig.push_back(&t); });
    loaded.params.visit([&](const std::string&, Tensor<float>& t) {
        CHECK(t.data == orig[idx]->data);
        ++idx;
    });
    for (size_t i = 0; i < loaded.adam.m.size(); ++i) {
        CHECK(loaded.adam.m[i].data == result.best.adam.m[i].data);
        CHECK(loaded.adam.v[i].data == result.best.adam.v[i].data);
    }

    // Evaluation before and after the round trip is identical.
    auto graphs = build_graphs_for(mcfg, data, tcfg.seed, 2);
    EvalMetrics before = evaluate(result.best.params, data, graphs, 8);
    EvalMetrics after = evaluate(loaded.params, data, graphs, 8);
    CHECK(before.acc1 == after.acc1);
    CHECK(before.acc5 == after.acc5);
    CHECK(before.acc10 == after.acc10);

    // Saving the loaded checkpoint again reproduces the file byte-for-byte.
    std::string path2 = (fs::temp_directory_path() / "mgt_ckpt_test2.bin").string();
    save_checkpoint(path2, loaded);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    // Loading at the wrong precision is a descriptive error.
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(path), doctest::Contains("precision"), std::runtime_error);

    // Resume: the next epoch keeps the stateless schedule.
    TrainConfig longer = tcfg;
    longer.max_epochs = 5;
    auto resumed = train_model<float>(mcfg, longer, data, data, {}, std::move(loaded));
    REQUIRE(!resumed.history.empty());
    CHECK(resumed.history.front().epoch == result.best.epoch + 1);
    CHECK(resumed.history.front().lr == lr_at_epoch(longer, resumed.history.front().epoch));

    fs::remove(path);
    fs::remove(path2);

    // Corrupt files are rejected.
    std::string bad = (fs::temp_directory_path() / "mgt_ckpt_bad.bin").string();
    std::ofstream bf(bad, std::ios::binary);
    bf << "MGTCKPT\n!!!!";
    bf.close();
    CHECK_THROWS_AS(load_checkpoint<float>(bad), std::runtime_error);
    fs::remove(bad);
}

TEST_CASE("metrics csv round trip") {
    namespace fs = std::filesystem;
    std::vector<EpochMetrics> hist;
    for (int64_t e = 0; e < 3; ++e)
        hist.push_back({e, 5e-5 * std::pow(0.7, static_cast<double>(e)), 1.23 / (1 + static_cast<double>(e)),
                        0.5, 0.8, 0.9, 1.5});
    std::string path = (fs::temp_directory_path() / "mgt_metrics_test.csv").string();
    write_metrics_csv(path, hist);
    auto loaded = read_metrics_csv(path);
    REQUIRE(loaded.size() == hist.size());
    for (size_t i = 0; i < hist.size(); ++i) {
        CHECK(loaded[i].epoch == hist[i].epoch);
        CHECK(loaded[i].lr == hist[i].lr);  // %.17g round-trips exactly
        CHECK(loaded[i].train_loss == hist[i].train_loss);
        CHECK(loaded[i].acc1 == hist[i].acc1);
    }
    fs::remove(path);
}

}  // TEST_SUITE
