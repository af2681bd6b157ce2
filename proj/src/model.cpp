#include "mgt/model.hpp"

#include "mgt/error.hpp"

namespace mgt {

MaskMode mask_mode_from_str(const std::string& s) {
    if (s == "pre_softmax") return MaskMode::kPreSoftmax;
    if (s == "post_softmax") return MaskMode::kPostSoftmax;
    throw UsageError("unknown mask_mode `" + s + "` (expected pre_softmax or post_softmax)");
}

std::string mask_mode_str(MaskMode m) { return m == MaskMode::kPreSoftmax ? "pre_softmax" : "post_softmax"; }

Variant variant_from_str(const std::string& s) {
    if (s == "mgt") return Variant::kMgt;
    if (s == "ff_only") return Variant::kFfOnly;
    throw UsageError("unknown variant `" + s + "` (expected mgt or ff_only)");
}

std::string variant_str(Variant v) { return v == Variant::kMgt ? "mgt" : "ff_only"; }

void MGTConfig::validate() const {
    check_arg(seq_len >= 1, "MGTConfig: seq_len must be >= 1");
    check_arg(d_hat >= 1, "MGTConfig: d_hat must be >= 1");
    check_arg(layers >= 1, "MGTConfig: layers must be >= 1");
    check_arg(num_classes >= 1, "MGTConfig: num_classes must be >= 1");
    check_arg(dropout >= 0.0 && dropout < 1.0, "MGTConfig: dropout must be in [0, 1)");
    check_arg(coord_scale > 0.0, "MGTConfig: coord_scale must be positive");
    if (variant == Variant::kMgt) {
        check_arg(!graphs.empty(), "MGTConfig: at least one graph is required");
        check_arg(heads_per_graph >= 1, "MGTConfig: heads_per_graph must be >= 1");
        check_arg(d() % heads_per_graph == 0, "MGTConfig: d = " + std::to_string(d()) +
                                                  " not divisible by heads_per_graph = " +
                                                  std::to_string(heads_per_graph));
    }
}

nlohmann::json MGTConfig::to_json() const {
    nlohmann::json j;
    j["seq_len"] = seq_len;
    j["d_hat"] = d_hat;
    j["layers"] = layers;
    j["heads_per_graph"] = heads_per_graph;
    j["dropout"] = dropout;
    j["graphs"] = graph_list_str(graphs);
    j["mask_mode"] = mask_mode_str(mask_mode);
    j["self_loops"] = self_loops;
    j["num_classes"] = num_classes;
    j["coord_scale"] = coord_scale;
    j["variant"] = variant_str(variant);
    return j;
}

MGTConfig MGTConfig::from_json(const nlohmann::json& j) {
    MGTConfig c;
    c.seq_len = j.at("seq_len").get<int64_t>();
    c.d_hat = j.at("d_hat").get<int64_t>();
    c.layers = j.at("layers").get<int64_t>();
    c.heads_per_graph = j.at("heads_per_graph").get<int64_t>();
    c.dropout = j.at("dropout").get<double>();
    c.graphs = parse_graph_list(j.at("graphs").get<std::string>());
    c.mask_mode = mask_mode_from_str(j.at("mask_mode").get<std::string>());
    c.self_loops = j.at("self_loops").get<bool>();
    c.num_classes = j.at("num_classes").get<int64_t>();
    c.coord_scale = j.at("coord_scale").get<double>();
    c.variant = variant_from_str(j.at("variant").get<std::string>());
    c.validate();
    return c;
}

std::vector<ParamBlockCount> parameter_breakdown(const MGTConfig& cfg) {
    cfg.validate();
    int64_t d = cfg.d(), dh = cfg.d_hat, g = cfg.num_graphs(), c = cfg.num_classes;
    std::vector<ParamBlockCount> blocks;
    blocks.push_back({"input.e1 (2 -> d_hat, no bias)", 2 * dh});
    blocks.push_back({"input.e2 ((S+3) x d_hat table)", cfg.embed_rows() * dh});
    for (int64_t l = 0; l < cfg.layers; ++l) {
        std::string lp = "layer" + std::to_string(l);
        if (cfg.variant == Variant::kMgt) {
            blocks.push_back({lp + ".attention (G x {Wq,Wk,Wv,Wo}, no bias)", g * 4 * d * d});
            blocks.push_back({lp + ".wo_tilde (G*d -> d, bias)", g * d * d + d});
            blocks.push_back({lp + ".ff (d -> d, bias)", d * d + d});
            blocks.push_back({lp + ".batch_norm (2 sites, gamma+beta)", 4 * d});
        } else {
            blocks.push_back({lp + ".ff (d -> d, bias)", d * d + d});
            blocks.push_back({lp + ".batch_norm (gamma+beta)", 2 * d});
        }
    }
    blocks.push_back({"classifier.fc1 (d -> 4*d_hat, bias)", d * 4 * dh + 4 * dh});
    blocks.push_back({"classifier.fc2 (4*d_hat -> 4*d_hat, bias)", 16 * dh * dh + 4 * dh});
    blocks.push_back({"classifier.fc3 (4*d_hat -> classes, bias)", 4 * dh * c + c});
    return blocks;
}

int64_t count_parameters(const MGTConfig& cfg) {
    int64_t total = 0;
    for (const ParamBlockCount& b : parameter_breakdown(cfg)) total += b.count;
    return total;
}

}  // namespace mgt
