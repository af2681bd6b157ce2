#include <doctest.h>

#include "mgt/experiment.hpp"

using namespace mgt;

TEST_SUITE("experiment") {

TEST_CASE("defaults follow the published base setup") {
    ExperimentConfig c = ExperimentConfig::defaults();
    CHECK(c.model.seq_len == 100);
    CHECK(c.model.d_hat == 128);
    CHECK(c.model.layers == 4);
    CHECK(c.model.heads_per_graph == 8);
    CHECK(graph_list_str(c.model.graphs) == "khop:1,khop:2,global");
    CHECK(c.train.initial_lr == 5e-5);
    CHECK(c.train.decay_factor == 0.7);
    CHECK(c.train.decay_every == 10);
    CHECK(c.train.max_epochs == 100);
    CHECK(c.train.patience == 10);
    CHECK(c.train.batch_size == 128);
}

TEST_CASE("parse handles comments, spacing and overrides") {
    std::string text = R"(
# a comment
d_hat = 32   # trailing comment
layers=2
graphs = khop:1 , union(khop:2,global)
dropout = 0.25
precision = f64
seed = 42
)";
    ExperimentConfig c = ExperimentConfig::parse(text, "test");
    CHECK(c.model.d_hat == 32);
    CHECK(c.model.layers == 2);
    CHECK(c.model.graphs.size() == 2);
    CHECK(c.model.graphs[1].kind == GraphSpec::Kind::kUnion);
    CHECK(c.model.dropout == 0.25);
    CHECK(c.train.precision == "f64");
    CHECK(c.train.seed == 42);
}

TEST_CASE("unknown keys are errors that name the key") {
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse("learning_rate = 3", "test"),
                         doctest::Contains("learning_rate"), UsageError);
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse("d_hat = banana", "test"), doctest::Contains("d_hat"),
                         UsageError);
    CHECK_THROWS_AS(ExperimentConfig::parse("just a line", "test"), UsageError);
    CHECK_THROWS_AS(ExperimentConfig::parse("precision = f16", "test"), UsageError);
    CHECK_THROWS_AS(ExperimentConfig::parse("mask_mode = maybe", "test"), UsageError);
    CHECK_THROWS_AS(ExperimentConfig::parse("graphs = khop:0", "test"), std::exception);
}

TEST_CASE("render/parse round trip is exact") {
    std::string text = R"(
d_hat = 24
layers = 3
heads_per_graph = 4
dropout = 0.15
graphs = khop:3,random:0.2,union(khop:1,global)
mask_mode = post_softmax
self_loops = false
num_classes = 17
initial_lr = 7.5e-4
decay_factor = 0.55
batch_size = 33
seed = 9
out_dir = /tmp/xyz
)";
    ExperimentConfig c = ExperimentConfig::parse(text, "test");
    ExperimentConfig back = ExperimentConfig::parse(c.render(), "rendered");
    CHECK(back.render() == c.render());
    CHECK(back.model.to_json() == c.model.to_json());
    CHECK(back.train.to_json() == c.train.to_json());
    CHECK(back.out_dir == c.out_dir);
    CHECK_FALSE(back.num_classes_auto);
    CHECK(back.model.num_classes == 17);
}

TEST_CASE("num_classes auto is preserved as a resolvable flag") {
    ExperimentConfig c = ExperimentConfig::parse("num_classes = auto", "test");
    CHECK(c.num_classes_auto);
    ExperimentConfig c2 = ExperimentConfig::parse("num_classes = 7", "test");
    CHECK_FALSE(c2.num_classes_auto);
    CHECK(c2.model.num_classes == 7);
}

TEST_CASE("every documented key parses") {
    for (const auto& doc : ExperimentConfig::key_docs()) {
        if (doc[1][0] == '$') continue;  // environment-backed default
        std::string line = doc[0] + " = " + doc[1];
        CHECK_NOTHROW(ExperimentConfig::parse(line, "docs"));
    }
    CHECK(ExperimentConfig::key_docs().size() == 21);
}

}  // TEST_SUITE
