#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "recsys/nn.hpp"
#include "recsys/rng.hpp"

namespace recsys {

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t probes = 0;
    std::string worst_block;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central-difference check of analytic gradients on probe_count randomly
// chosen coordinates per parameter block. loss_fn() recomputes the loss from
// the parameters the block pointers alias; the effective step is measured
// after rounding the perturbed weight to the working precision.
// Error metric per coordinate: |analytic - numeric| / max(|numeric|, 1e-6).
template <typename LossFn>
FdReport finite_diff_check(LossFn&& loss_fn, std::vector<std::pair<std::string, Tensor*>> blocks,
                           std::vector<std::pair<std::string, Tensor*>> analytic, std::size_t probe_count,
                           double h, std::uint64_t seed) {
    if (blocks.size() != analytic.size())
        throw ShapeError("finite_diff_check: block/gradient count mismatch");
    if (h <= 0.0) throw ConfigError("finite_diff_check: h must be > 0");
    Rng rng(seed);
    FdReport rep;
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        Tensor& t = *blocks[bi].second;
        const Tensor& g = *analytic[bi].second;
        if (!t.same_shape(g)) throw ShapeError("finite_diff_check: shape mismatch in " + blocks[bi].first);
        if (t.size() == 0) continue;

        std::vector<std::size_t> coords;
        if (probe_count >= t.size()) {
            coords.resize(t.size());
            for (std::size_t i = 0; i < t.size(); ++i) coords[i] = i;
        } else {
            std::unordered_set<std::size_t> chosen;
            while (chosen.size() < probe_count) chosen.insert(rng.uniform_index(t.size()));
            coords.assign(chosen.begin(), chosen.end());
            std::sort(coords.begin(), coords.end());
        }

        for (std::size_t c : coords) {
            const Real w0 = t.v[c];
            const Real wp = static_cast<Real>(static_cast<double>(w0) + h);
            const Real wm = static_cast<Real>(static_cast<double>(w0) - h);
            t.v[c] = wp;
            const double fp = loss_fn();
            t.v[c] = wm;
            const double fm = loss_fn();
            t.v[c] = w0;
            const double h_eff = static_cast<double>(wp) - static_cast<double>(wm);
            const double numeric = (fp - fm) / h_eff;
            const double analytic_v = static_cast<double>(g.v[c]);
            const double rel = std::abs(analytic_v - numeric) / std::max(std::abs(numeric), 1e-6);
            ++rep.probes;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_block = blocks[bi].first;
                rep.worst_coord = c;
                rep.worst_analytic = analytic_v;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace recsys
