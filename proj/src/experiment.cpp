#include "mgt/experiment.hpp"

#include <array>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mgt/error.hpp"

namespace mgt {

namespace {

// Shortest decimal form that round-trips exactly, so a resolved config
// reloads to identical values.
std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw UsageError("config: key `" + key + "` expects a boolean, got `" + v + "`");
}

int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw UsageError("config: key `" + key + "` expects an integer, got `" + v + "`");
    }
}

double parse_real(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw UsageError("config: key `" + key + "` expects a number, got `" + v + "`");
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    c.model.graphs = parse_graph_list("khop:1,khop:2,global");
    const char* env = std::getenv("SKETCHMGT_DATA_DIR");
    if (env) c.data_dir = env;
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw UsageError("config: cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
    ExperimentConfig c = defaults();
    std::istringstream in(text);
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trimmed(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: " + origin + " line " + std::to_string(line_no) +
                             ": expected `key = value`, got `" + line + "`");
        std::string key = trimmed(line.substr(0, eq));
        std::string value = trimmed(line.substr(eq + 1));

        try {
            if (key == "seq_len") c.model.seq_len = parse_int(value, key);
            else if (key == "d_hat") c.model.d_hat = parse_int(value, key);
            else if (key == "layers") c.model.layers = parse_int(value, key);
            else if (key == "heads_per_graph") c.model.heads_per_graph = parse_int(value, key);
            else if (key == "dropout") c.model.dropout = parse_real(value, key);
            else if (key == "graphs") c.model.graphs = parse_graph_list(value);
            else if (key == "mask_mode") c.model.mask_mode = mask_mode_from_str(value);
            else if (key == "self_loops") c.model.self_loops = parse_bool(value, key);
            else if (key == "num_classes") {
                if (value == "auto") {
                    c.num_classes_auto = true;
                } else {
                    c.num_classes_auto = false;
                    c.model.num_classes = parse_int(value, key);
                }
            }
            else if (key == "coord_scale") c.model.coord_scale = parse_real(value, key);
            else if (key == "variant") c.model.variant = variant_from_str(value);
            else if (key == "initial_lr") c.train.initial_lr = parse_real(value, key);
            else if (key == "decay_factor") c.train.decay_factor = parse_real(value, key);
            else if (key == "decay_every") c.train.decay_every = parse_int(value, key);
            else if (key == "max_epochs") c.train.max_epochs = parse_int(value, key);
            else if (key == "patience") c.train.patience = parse_int(value, key);
            else if (key == "batch_size") c.train.batch_size = parse_int(value, key);
            else if (key == "seed") c.train.seed = static_cast<uint64_t>(parse_int(value, key));
            else if (key == "precision") c.train.precision = value;
            else if (key == "data_dir") c.data_dir = value;
            else if (key == "out_dir") c.out_dir = value;
            else
                throw UsageError("config: " + origin + " line " + std::to_string(line_no) +
                                 ": unknown key `" + key + "`");
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception& e) {
            throw UsageError("config: " + origin + " line " + std::to_string(line_no) + ": key `" + key +
                             "`: " + e.what());
        }
    }
    try {
        c.model.validate();
        c.train.validate();
    } catch (const std::exception& e) {
        throw UsageError("config: " + origin + ": " + e.what());
    }
    return c;
}

std::string ExperimentConfig::render() const {
    std::ostringstream os;
    os << "# model\n";
    os << "seq_len = " << model.seq_len << "\n";
    os << "d_hat = " << model.d_hat << "\n";
    os << "layers = " << model.layers << "\n";
    os << "heads_per_graph = " << model.heads_per_graph << "\n";
    os << "dropout = " << fmt_double(model.dropout) << "\n";
    os << "graphs = " << graph_list_str(model.graphs) << "\n";
    os << "mask_mode = " << mask_mode_str(model.mask_mode) << "\n";
    os << "self_loops = " << (model.self_loops ? "true" : "false") << "\n";
    os << "num_classes = " << model.num_classes << "\n";
    os << "coord_scale = " << fmt_double(model.coord_scale) << "\n";
    os << "variant = " << variant_str(model.variant) << "\n";
    os << "# training\n";
    os << "initial_lr = " << fmt_double(train.initial_lr) << "\n";
    os << "decay_factor = " << fmt_double(train.decay_factor) << "\n";
    os << "decay_every = " << train.decay_every << "\n";
    os << "max_epochs = " << train.max_epochs << "\n";
    os << "patience = " << train.patience << "\n";
    os << "batch_size = " << train.batch_size << "\n";
    os << "seed = " << train.seed << "\n";
    os << "precision = " << train.precision << "\n";
    os << "# data\n";
    os << "data_dir = " << data_dir << "\n";
    os << "out_dir = " << out_dir << "\n";
    return os.str();
}

std::vector<std::array<std::string, 3>> ExperimentConfig::key_docs() {
    return {
        {"seq_len", "100", "padded sequence length S"},
        {"d_hat", "128", "base embedding width (d = 3*d_hat)"},
        {"layers", "4", "number of MGT layers L"},
        {"heads_per_graph", "8", "attention heads per graph"},
        {"dropout", "0.1", "dropout rate"},
        {"graphs", "khop:1,khop:2,global", "ordered graph specs: khop:K|global|full|intra_full|random:p|knn:k|union(...)"},
        {"mask_mode", "pre_softmax", "attention masking: pre_softmax or post_softmax"},
        {"self_loops", "true", "force diagonal 1 in every adjacency"},
        {"num_classes", "auto", "class count, or auto to read the dataset vocabulary"},
        {"coord_scale", "256", "divisor applied to input coordinates"},
        {"variant", "mgt", "mgt or ff_only (position-wise feed-forward baseline)"},
        {"initial_lr", "5e-5", "Adam initial learning rate"},
        {"decay_factor", "0.7", "learning-rate multiplier"},
        {"decay_every", "10", "epochs between decays"},
        {"max_epochs", "100", "maximum training epochs"},
        {"patience", "10", "early-stopping patience (epochs)"},
        {"batch_size", "128", "mini-batch size"},
        {"seed", "0", "global random seed"},
        {"precision", "f32", "f32 or f64"},
        {"data_dir", "$SKETCHMGT_DATA_DIR", "dataset directory from `prepare`"},
        {"out_dir", "out", "output directory"},
    };
}

}  // namespace mgt
