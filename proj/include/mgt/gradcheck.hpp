#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mgt/model.hpp"
#include "mgt/train.hpp"

namespace mgt {

// |a - b| / max(1, |a|, |b|)
inline double grad_rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Checks analytic gradients of an arbitrary scalar-valued tape computation
// against central finite differences. `loss_fn` must be a pure function of
// the inputs (seed any internal randomness identically on every call).
// Returns the maximum relative error over all input entries.
template <class LossFn>
double check_gradients(LossFn&& loss_fn, std::vector<Tensor<double>>& inputs, double h = 1e-5) {
    // Analytic pass.
    Tape<double> tape;
    std::vector<Val> vals;
    vals.reserve(inputs.size());
    for (auto& t : inputs) vals.push_back(tape.leaf(t, /*requires_grad=*/true));
    Val loss = loss_fn(tape, vals);
    tape.backward(loss);
    std::vector<Tensor<double>> analytic;
    analytic.reserve(inputs.size());
    for (Val v : vals) analytic.push_back(tape.grad(v));

    auto eval = [&]() {
        Tape<double> t2(/*recording=*/false);
        std::vector<Val> v2;
        v2.reserve(inputs.size());
        for (auto& t : inputs) v2.push_back(t2.leaf(t));
        return t2.value(loss_fn(t2, v2)).data[0];
    };

    double worst = 0;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        for (int64_t i = 0; i < inputs[ti].size(); ++i) {
            double orig = inputs[ti].data[i];
            inputs[ti].data[i] = orig + h;
            double lp = eval();
            inputs[ti].data[i] = orig - h;
            double lm = eval();
            inputs[ti].data[i] = orig;
            double fd = (lp - lm) / (2 * h);
            worst = std::max(worst, grad_rel_err(analytic[ti].data[i], fd));
        }
    }
    return worst;
}

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double threshold = 1e-4;

    double worst() const {
        double w = 0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
    bool ok() const { return worst() < threshold; }
};

// Tiny configuration used by the end-to-end check: d_hat=6, S=8, L=2, G=2.
MGTConfig tiny_gradcheck_config(MaskMode mode = MaskMode::kPreSoftmax);

// Finite-difference checks of every tape operation on several random shapes.
GradCheckReport op_gradcheck_suite(uint64_t seed = 7);

// End-to-end check of the full network (batch of 2 synthetic sketches,
// padding present, train-mode batch norm, dropout disabled); one entry per
// parameter block.
GradCheckReport mgt_gradcheck(MaskMode mode, uint64_t seed = 7);

// ff_only variant end-to-end check.
GradCheckReport ff_only_gradcheck(uint64_t seed = 7);

}  // namespace mgt
