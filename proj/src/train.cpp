#include "mgt/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mgt/error.hpp"

namespace mgt {

void TrainConfig::validate() const {
    check_arg(initial_lr > 0, "TrainConfig: initial_lr must be positive");
    check_arg(decay_factor > 0, "TrainConfig: decay_factor must be positive");
    check_arg(decay_every >= 1, "TrainConfig: decay_every must be >= 1");
    check_arg(max_epochs >= 1, "TrainConfig: max_epochs must be >= 1");
    check_arg(patience >= 1, "TrainConfig: patience must be >= 1");
    check_arg(patience <= max_epochs, "TrainConfig: patience must not exceed max_epochs");
    check_arg(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    check_arg(precision == "f32" || precision == "f64",
              "TrainConfig: precision must be f32 or f64, got `" + precision + "`");
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["initial_lr"] = initial_lr;
    j["decay_factor"] = decay_factor;
    j["decay_every"] = decay_every;
    j["max_epochs"] = max_epochs;
    j["patience"] = patience;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["precision"] = precision;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.initial_lr = j.at("initial_lr").get<double>();
    c.decay_factor = j.at("decay_factor").get<double>();
    c.decay_every = j.at("decay_every").get<int64_t>();
    c.max_epochs = j.at("max_epochs").get<int64_t>();
    c.patience = j.at("patience").get<int64_t>();
    c.batch_size = j.at("batch_size").get<int64_t>();
    c.seed = j.at("seed").get<uint64_t>();
    c.precision = j.at("precision").get<std::string>();
    c.validate();
    return c;
}

double lr_at_epoch(const TrainConfig& cfg, int64_t epoch) {
    check_arg(epoch >= 0, "lr_at_epoch: epoch must be >= 0");
    return cfg.initial_lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

void write_metrics_csv(const std::string& path, std::span<const EpochMetrics> history) {
    std::ofstream f(path);
    check(f.good(), "write_metrics_csv: cannot write " + path);
    f << "epoch,lr,train_loss,val_acc1,val_acc5,val_acc10,seconds\n";
    char buf[256];
    for (const EpochMetrics& m : history) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n",
                      static_cast<long long>(m.epoch), m.lr, m.train_loss, m.acc1, m.acc5, m.acc10, m.seconds);
        f << buf;
    }
    check(f.good(), "write_metrics_csv: write failed for " + path);
}

std::vector<EpochMetrics> read_metrics_csv(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_metrics_csv: cannot read " + path);
    std::vector<EpochMetrics> out;
    std::string line;
    std::getline(f, line);  // header
    check(line.rfind("epoch,", 0) == 0, "read_metrics_csv: bad header in " + path);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        EpochMetrics m;
        long long epoch = 0;
        int got = std::sscanf(line.c_str(), "%lld,%lg,%lg,%lg,%lg,%lg,%lg", &epoch, &m.lr, &m.train_loss,
                              &m.acc1, &m.acc5, &m.acc10, &m.seconds);
        check(got == 7, "read_metrics_csv: malformed row `" + line + "`");
        m.epoch = epoch;
        out.push_back(m);
    }
    return out;
}

}  // namespace mgt
