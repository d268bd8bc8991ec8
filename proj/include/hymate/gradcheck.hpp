// Finite-difference gradient oracle.
//
// Compares analytic gradients (one tape backward) against central finite
// differences of the loss, coordinate by coordinate. Relative error uses a
// max(|analytic|, |numeric|, 1e-8) denominator. Coordinates may be sampled
// for large fragments; the report records exactly which were checked.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hymate/param_store.hpp"
#include "hymate/rng.hpp"
#include "hymate/tape.hpp"

namespace hymate {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_name;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
    std::size_t coords_total = 0;
    bool nonfinite = false;
    std::string nonfinite_name;

    bool passes(double tolerance) const { return !nonfinite && max_rel_err < tolerance; }
};

struct GradCheckOptions {
    double step = 1e-5;            // scaled per coordinate by max(1, |theta|)
    std::size_t max_coords_per_tensor = 0;  // 0 = all
    int stencil = 2;               // 2- or 4-point central differences
    std::uint64_t sample_seed = 0x9e3779b9;
};

// fragment: forward pass returning the scalar loss. For the analytic side it
// is called once with a recording tape; for the numeric side it is re-run with
// recording=false around perturbed parameter values.
inline GradCheckReport check_gradients(
    ParameterStore& store,
    const std::function<Var(Tape&, TapeBinding&)>& fragment,
    const GradCheckOptions& opt = {}) {
    GradCheckReport rep;

    // Analytic pass.
    store.zero_grads();
    {
        Tape tape(true);
        TapeBinding bind(tape, store);
        Var loss = fragment(tape, bind);
        tape.backward(loss);
        bind.flush_grads();
        if (tape.saw_nonfinite()) {
            rep.nonfinite = true;
            rep.nonfinite_name = tape.nonfinite_where();
        }
    }

    auto eval_loss = [&]() {
        Tape tape(false);
        TapeBinding bind(tape, store);
        return tape.val(fragment(tape, bind)).item();
    };

    Rng sample_rng(opt.sample_seed);
    for (auto& [name, entry] : store) {
        const std::size_t n = entry.value.numel();
        rep.coords_total += n;
        std::vector<std::size_t> coords;
        if (opt.max_coords_per_tensor == 0 || n <= opt.max_coords_per_tensor) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i)
                coords.push_back(sample_rng.index(n));
        }
        for (std::size_t i : coords) {
            const double theta = entry.value[i];
            const double h = opt.step * std::max(1.0, std::abs(theta));
            double numeric;
            if (opt.stencil == 4) {
                entry.value[i] = theta + h;
                const double f1 = eval_loss();
                entry.value[i] = theta - h;
                const double fm1 = eval_loss();
                entry.value[i] = theta + 2.0 * h;
                const double f2 = eval_loss();
                entry.value[i] = theta - 2.0 * h;
                const double fm2 = eval_loss();
                numeric = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
            } else {
                entry.value[i] = theta + h;
                const double fp = eval_loss();
                entry.value[i] = theta - h;
                const double fm = eval_loss();
                numeric = (fp - fm) / (2.0 * h);
            }
            entry.value[i] = theta;
            const double analytic = entry.grad[i];
            if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
                rep.nonfinite = true;
                if (rep.nonfinite_name.empty()) rep.nonfinite_name = name;
                continue;
            }
            const double denom =
                std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_name = name;
                rep.worst_index = i;
                rep.worst_analytic = analytic;
                rep.worst_numeric = numeric;
            }
        }
    }
    store.zero_grads();
    return rep;
}

}  // namespace hymate
