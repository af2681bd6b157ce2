// Command-line entry point: dataset preparation, training, evaluation,
// attention export, parameter counting and gradient checking.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>

#include "mgt/error.hpp"
#include "mgt/experiment.hpp"
#include "mgt/gradcheck.hpp"
#include "mgt/graph.hpp"
#include "mgt/model.hpp"
#include "mgt/sketch.hpp"
#include "mgt/train.hpp"

namespace fs = std::filesystem;
using namespace mgt;

namespace {

std::string env_data_dir() {
    const char* env = std::getenv("SKETCHMGT_DATA_DIR");
    return env ? env : "";
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
    std::vector<std::string> inputs;
    std::string out_dir;
    std::string classes = "all";
    std::string per_class = "1000,100,100";
    uint64_t seed = 0;
    int64_t seq_len = 100;
    double max_bad_ratio = 0.0;
};

int cmd_prepare(const PrepareArgs& args) {
    PerClassCounts counts;
    {
        auto parts = split_csv(args.per_class);
        if (parts.size() != 3) throw UsageError("--per-class expects `train,val,test` counts");
        counts.train = std::stoll(parts[0]);
        counts.val = std::stoll(parts[1]);
        counts.test = std::stoll(parts[2]);
    }

    std::vector<RawDrawing> drawings;
    QuickdrawLoadReport report;
    for (const std::string& path : args.inputs) {
        if (!fs::exists(path)) throw UsageError("prepare: input path does not exist: " + path);
        auto batch = load_quickdraw_file(path, report);
        drawings.insert(drawings.end(), std::make_move_iterator(batch.begin()),
                        std::make_move_iterator(batch.end()));
    }
    int64_t total_lines = report.parsed + report.malformed;
    std::cerr << "parsed " << report.parsed << " drawings, " << report.malformed << " malformed lines\n";
    for (const auto& e : report.first_errors) std::cerr << "  " << e << "\n";
    if (total_lines == 0) throw std::runtime_error("prepare: no input records");
    double bad_ratio = static_cast<double>(report.malformed) / static_cast<double>(total_lines);
    if (bad_ratio > args.max_bad_ratio)
        throw std::runtime_error("prepare: malformed ratio " + std::to_string(bad_ratio) +
                                 " exceeds --max-bad-ratio " + std::to_string(args.max_bad_ratio));

    std::set<std::string> wanted;
    bool all_classes = args.classes == "all";
    if (!all_classes)
        for (const std::string& c : split_csv(args.classes)) wanted.insert(c);

    std::set<std::string> present;
    for (const RawDrawing& d : drawings) present.insert(d.label);
    if (!all_classes)
        for (const std::string& c : wanted)
            if (!present.count(c)) throw std::runtime_error("prepare: class `" + c + "` not found in input");

    std::vector<std::string> class_names;
    for (const std::string& c : present)
        if (all_classes || wanted.count(c)) class_names.push_back(c);
    LabelVocabulary vocab(class_names);

    std::vector<SketchTensor> samples;
    samples.reserve(drawings.size());
    for (const RawDrawing& d : drawings) {
        if (!all_classes && !wanted.count(d.label)) continue;
        auto seq = flatten(d);
        SketchTensor t = pad_truncate(seq, args.seq_len);
        t.label = vocab.index_of(d.label);
        samples.push_back(std::move(t));
    }

    DatasetSplit split = split_dataset(samples, vocab, counts, args.seed);

    fs::create_directories(args.out_dir);
    write_dataset((fs::path(args.out_dir) / "train.ndjson").string(), split.train);
    write_dataset((fs::path(args.out_dir) / "val.ndjson").string(), split.val);
    write_dataset((fs::path(args.out_dir) / "test.ndjson").string(), split.test);
    vocab.save((fs::path(args.out_dir) / "labels.json").string());

    std::string stats = format_stats_table(dataset_stats(split.train),
                                           counts.val > 0 ? dataset_stats(split.val) : SetStats{},
                                           counts.test > 0 ? dataset_stats(split.test) : SetStats{});
    std::ofstream sf(fs::path(args.out_dir) / "stats.txt");
    sf << stats;
    std::cout << stats;
    std::cout << "wrote " << split.train.size() << "/" << split.val.size() << "/" << split.test.size()
              << " samples for " << vocab.size() << " classes to " << args.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string resume_path;
    std::string data_dir_override;
    std::string out_dir_override;
};

template <class T>
int run_train(ExperimentConfig cfg, const TrainArgs& args) {
    fs::path data_dir(cfg.data_dir);
    auto train_set = read_dataset((data_dir / "train.ndjson").string());
    auto val_set = read_dataset((data_dir / "val.ndjson").string());
    LabelVocabulary vocab = LabelVocabulary::load((data_dir / "labels.json").string());
    if (cfg.num_classes_auto) cfg.model.num_classes = vocab.size();
    cfg.model.validate();

    fs::create_directories(cfg.out_dir);
    {
        std::ofstream rf(fs::path(cfg.out_dir) / "resolved.cfg");
        rf << cfg.render();
    }

    std::optional<Checkpoint<T>> resume;
    if (!args.resume_path.empty()) {
        resume = load_checkpoint<T>(args.resume_path);
        check(resume->model_cfg.to_json() == cfg.model.to_json(),
              "train: checkpoint model config does not match the experiment config");
    }

    TrainHooks hooks;
    hooks.log = [](const std::string& s) { std::cerr << "[train] " << s << "\n"; };
    TrainResult<T> result = train_model<T>(cfg.model, cfg.train, train_set, val_set, hooks, std::move(resume));

    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), result.history);
    save_checkpoint((fs::path(cfg.out_dir) / "best.ckpt").string(), result.best);
    std::cout << "best epoch " << result.best_epoch << " val acc@1 " << result.best.best_val_acc1 << "\n";
    std::cout << "outputs in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_train(const TrainArgs& args) {
    ExperimentConfig cfg = ExperimentConfig::load(args.config_path);
    if (!args.data_dir_override.empty()) cfg.data_dir = args.data_dir_override;
    if (!args.out_dir_override.empty()) cfg.out_dir = args.out_dir_override;
    if (cfg.data_dir.empty())
        throw UsageError("train: no data_dir configured (set data_dir in the config, --data-dir, or SKETCHMGT_DATA_DIR)");
    if (cfg.train.precision == "f64") return run_train<double>(std::move(cfg), args);
    return run_train<float>(std::move(cfg), args);
}

// ---------------------------------------------------------------------------

template <class T>
int run_eval(const std::string& ckpt_path, const std::string& data_path, int64_t batch_size) {
    Checkpoint<T> ckpt = load_checkpoint<T>(ckpt_path);
    auto data = read_dataset(data_path);
    auto graphs = build_graphs_for(ckpt.model_cfg, data, ckpt.train_cfg.seed, /*set_tag=*/3);
    EvalMetrics m = evaluate(ckpt.params, data, graphs, batch_size);
    std::printf("samples %lld\n", static_cast<long long>(m.count));
    std::printf("acc@1 %.6f\n", m.acc1);
    std::printf("acc@5 %.6f\n", m.acc5);
    std::printf("acc@10 %.6f\n", m.acc10);
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, int64_t batch_size) {
    if (checkpoint_precision(ckpt_path) == "f64") return run_eval<double>(ckpt_path, data_path, batch_size);
    return run_eval<float>(ckpt_path, data_path, batch_size);
}

// ---------------------------------------------------------------------------

template <class T>
int run_attn(const std::string& ckpt_path, const std::string& data_path, int64_t sample_index,
             const std::string& out_dir) {
    Checkpoint<T> ckpt = load_checkpoint<T>(ckpt_path);
    auto data = read_dataset(data_path);
    check_arg(sample_index >= 0 && sample_index < static_cast<int64_t>(data.size()),
              "attn: --sample-index " + std::to_string(sample_index) + " out of range (dataset has " +
                  std::to_string(data.size()) + " samples)");
    const SketchTensor& sample = data[static_cast<size_t>(sample_index)];

    const MGTConfig& mcfg = ckpt.model_cfg;
    std::vector<std::vector<AdjacencyMatrix>> graphs{
        build_graphs(mcfg, sample, Rng(ckpt.train_cfg.seed).split(3).split(static_cast<uint64_t>(sample_index)))};
    std::vector<SketchTensor> one{sample};
    Batch<T> batch = make_batch<T>(mcfg, one, graphs);

    AttentionCapture<T> capture;
    Tensor<T> logits = eval_logits(ckpt.params, batch, &capture);
    int32_t predicted = 0;
    for (int64_t c = 1; c < logits.dim(1); ++c)
        if (logits.data[static_cast<size_t>(c)] > logits.data[static_cast<size_t>(predicted)])
            predicted = static_cast<int32_t>(c);

    fs::create_directories(out_dir);
    int64_t s = mcfg.seq_len;
    for (int64_t l = 0; l < capture.layers; ++l)
        for (int64_t g = 0; g < capture.graphs; ++g) {
            const Tensor<T>& w = capture.weight(l, g);  // [1, H, S, S]
            for (int64_t h = 0; h < capture.heads; ++h) {
                char name[64];
                std::snprintf(name, sizeof(name), "layer%lld_graph%lld_head%lld.csv",
                              static_cast<long long>(l), static_cast<long long>(g), static_cast<long long>(h));
                std::ofstream f(fs::path(out_dir) / name);
                for (int64_t i = 0; i < s; ++i) {
                    for (int64_t j = 0; j < s; ++j) {
                        if (j) f << ",";
                        char buf[32];
                        std::snprintf(buf, sizeof(buf), "%.9g",
                                      static_cast<double>(w.data[static_cast<size_t>((h * s + i) * s + j)]));
                        f << buf;
                    }
                    f << "\n";
                }
            }
        }

    nlohmann::json manifest;
    std::vector<std::array<double, 2>> coords(static_cast<size_t>(s));
    for (int64_t i = 0; i < s; ++i) coords[static_cast<size_t>(i)] = {sample.x(i), sample.y(i)};
    manifest["coords"] = coords;
    manifest["flags"] = sample.flags;
    manifest["true_len"] = sample.true_len;
    manifest["true_label"] = sample.label;
    manifest["predicted_label"] = predicted;
    fs::path labels_path = fs::path(data_path).parent_path() / "labels.json";
    if (fs::exists(labels_path)) {
        LabelVocabulary vocab = LabelVocabulary::load(labels_path.string());
        manifest["true_label_name"] = vocab.name_of(sample.label);
        manifest["predicted_label_name"] = vocab.name_of(predicted);
    }
    manifest["layers"] = capture.layers;
    manifest["graphs"] = graph_list_str(mcfg.graphs);
    manifest["heads_per_graph"] = capture.heads;
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";

    std::cout << "wrote " << capture.layers * capture.graphs * capture.heads << " attention maps to " << out_dir
              << "\n";
    return 0;
}

int cmd_attn(const std::string& ckpt_path, const std::string& data_path, int64_t sample_index,
             const std::string& out_dir) {
    if (checkpoint_precision(ckpt_path) == "f64")
        return run_attn<double>(ckpt_path, data_path, sample_index, out_dir);
    return run_attn<float>(ckpt_path, data_path, sample_index, out_dir);
}

// ---------------------------------------------------------------------------

int cmd_params(const std::string& config_path) {
    ExperimentConfig cfg =
        config_path.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load(config_path);
    int64_t total = count_parameters(cfg.model);
    std::printf("total trainable parameters: %lld\n", static_cast<long long>(total));
    for (const ParamBlockCount& b : parameter_breakdown(cfg.model))
        std::printf("  %-48s %12lld\n", b.block.c_str(), static_cast<long long>(b.count));
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    const double threshold = 1e-4;
    double worst_all = 0;
    auto show = [&](const char* title, const GradCheckReport& r) {
        std::printf("%s: max rel err %.3g over %zu checks\n", title, r.worst(), r.entries.size());
        for (const auto& e : r.entries)
            if (e.max_rel_err >= threshold)
                std::printf("  FAILED %s: %.3g\n", e.name.c_str(), e.max_rel_err);
        worst_all = std::max(worst_all, r.worst());
    };
    show("op suite", op_gradcheck_suite(seed));
    show("mgt end-to-end (pre_softmax)", mgt_gradcheck(MaskMode::kPreSoftmax, seed));
    show("mgt end-to-end (post_softmax)", mgt_gradcheck(MaskMode::kPostSoftmax, seed));
    show("ff_only end-to-end", ff_only_gradcheck(seed));
    std::printf("max relative error: %.3g (threshold %g)\n", worst_all, threshold);
    if (worst_all >= threshold) {
        std::printf("GRADCHECK FAILED\n");
        return 1;
    }
    std::printf("GRADCHECK OK\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sketchmgt: multi-graph transformer for free-hand sketch recognition"};
    app.require_subcommand(1);

    PrepareArgs prep;
    auto* prepare = app.add_subcommand("prepare", "parse raw QuickDraw NDJSON into dataset splits");
    prepare->add_option("--input", prep.inputs, "raw NDJSON file(s)")->required()->expected(-1);
    prepare->add_option("--out", prep.out_dir, "output dataset directory")->required();
    prepare->add_option("--classes", prep.classes, "comma-separated class names, or `all`");
    prepare->add_option("--per-class", prep.per_class, "train,val,test counts per class (default 1000,100,100)");
    prepare->add_option("--seed", prep.seed, "split seed");
    prepare->add_option("--seq-len", prep.seq_len, "padded sequence length S (default 100)");
    prepare->add_option("--max-bad-ratio", prep.max_bad_ratio, "tolerated fraction of malformed lines");

    TrainArgs targs;
    auto* train = app.add_subcommand("train", "train a model from an experiment config");
    train->add_option("--config", targs.config_path, "experiment config file (key = value)")->required();
    train->add_option("--resume", targs.resume_path, "checkpoint to resume from");
    train->add_option("--data-dir", targs.data_dir_override, "override data_dir");
    train->add_option("--out-dir", targs.out_dir_override, "override out_dir");

    std::string eval_ckpt, eval_data = env_data_dir().empty() ? "" : env_data_dir() + "/test.ndjson";
    int64_t eval_batch = 128;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset file");
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset file (default $SKETCHMGT_DATA_DIR/test.ndjson)");
    eval_cmd->add_option("--batch-size", eval_batch, "evaluation batch size");

    std::string attn_ckpt, attn_data = eval_data, attn_out;
    int64_t attn_index = 0;
    auto* attn = app.add_subcommand("attn", "export attention maps for one sample");
    attn->add_option("--ckpt", attn_ckpt, "checkpoint file")->required();
    attn->add_option("--data", attn_data, "dataset file (default $SKETCHMGT_DATA_DIR/test.ndjson)");
    attn->add_option("--sample-index", attn_index, "sample index in the dataset file");
    attn->add_option("--out", attn_out, "output directory")->required();

    std::string params_config;
    auto* params = app.add_subcommand("params", "print the exact trainable-parameter count");
    params->add_option("--config", params_config, "experiment config (defaults to built-in defaults)");

    uint64_t gradcheck_seed = 7;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check suite (f64)");
    gradcheck->add_option("--seed", gradcheck_seed, "random seed for the suite");

    try {
        app.parse(argc, argv);
        if (prepare->parsed()) return cmd_prepare(prep);
        if (train->parsed()) return cmd_train(targs);
        if (eval_cmd->parsed()) {
            if (eval_data.empty()) throw UsageError("eval: --data required (or set SKETCHMGT_DATA_DIR)");
            return cmd_eval(eval_ckpt, eval_data, eval_batch);
        }
        if (attn->parsed()) {
            if (attn_data.empty()) throw UsageError("attn: --data required (or set SKETCHMGT_DATA_DIR)");
            return cmd_attn(attn_ckpt, attn_data, attn_index, attn_out);
        }
        if (params->parsed()) return cmd_params(params_config);
        if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_seed);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
