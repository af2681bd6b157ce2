#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mgt/model.hpp"
#include "mgt/train.hpp"

namespace mgt {

// Flat key=value experiment file unioning model, training and data settings.
// Unknown keys are errors; every key has a documented default; a resolved
// copy is written into the output directory.
struct ExperimentConfig {
    MGTConfig model;
    TrainConfig train;
    bool num_classes_auto = true;  // resolve from the dataset vocabulary
    std::string data_dir;          // default: $SKETCHMGT_DATA_DIR
    std::string out_dir = "out";

    static ExperimentConfig defaults();
    static ExperimentConfig load(const std::string& path);
    static ExperimentConfig parse(const std::string& text, const std::string& origin);

    // Canonical key=value rendering of the fully-resolved config.
    std::string render() const;

    // (key, default, doc) triples for --help and the README.
    static std::vector<std::array<std::string, 3>> key_docs();
};

}  // namespace mgt
