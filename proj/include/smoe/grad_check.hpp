#pragma once

#include <algorithm>
#include <functional>
#include <string>

#include "smoe/param.hpp"
#include "smoe/rng.hpp"

namespace smoe {

// Loss evaluations feed a central difference, so the harness asks for long
// double: terms that do not depend on the perturbed coordinate then cancel
// bitwise instead of quantizing the difference away.
using LossFn = std::function<long double()>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    Index worst_coord = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    Index coords_checked = 0;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

// Distinct flat coordinates into the concatenated parameter space.
inline std::vector<Index> sample_flat_coords(Index total, Index want, Rng& rng) {
    want = std::min(total, want);
    std::vector<Index> pool(static_cast<std::size_t>(total));
    for (Index i = 0; i < total; ++i) pool[std::size_t(i)] = i;
    if (want < total) rng.shuffle(pool.begin(), pool.end());
    pool.resize(std::size_t(want));
    std::sort(pool.begin(), pool.end());
    return pool;
}

// Visit sampled coordinates in order; fn(param, local_index, flat_index).
template <typename S, typename Fn>
void for_each_coord(const ParamRefs<S>& params, const std::vector<Index>& coords, Fn&& fn) {
    std::size_t pi = 0;
    Index base = 0;
    for (Index flat : coords) {
        while (flat >= base + params[pi]->size()) base += params[pi++]->size();
        fn(*params[pi], flat - base, flat);
    }
}

template <typename S>
double central_difference(Param<S>& p, Index k, double epsilon, const LossFn& loss) {
    const S saved = p.value[k];
    p.value[k] = S(double(saved) + epsilon);
    const long double lp = loss();
    p.value[k] = S(double(saved) - epsilon);
    const long double lm = loss();
    p.value[k] = saved;
    return double((lp - lm) / (2.0L * (long double)(epsilon)));
}

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Compare analytic gradients against central differences on a random subset
// of at least min_coords coordinates. compute_loss must be deterministic
// (checked by evaluating twice) and must not touch the grads; compute_grads
// fills them.
template <typename S>
GradCheckReport grad_check(const LossFn& compute_loss, const std::function<void()>& compute_grads,
                           const ParamRefs<S>& params, double epsilon, Rng& rng,
                           Index min_coords = 100) {
    if (epsilon <= 0) throw ParameterError("grad_check: epsilon must be positive");

    const long double l0 = compute_loss();
    if (compute_loss() != l0)
        throw DeterminismError("grad_check: loss function is not deterministic across evaluations");

    zero_grads(params);
    compute_grads();

    const Index total = total_size(params);
    auto coords = sample_flat_coords(total, std::max<Index>(min_coords, 100), rng);

    GradCheckReport report;
    report.coords_checked = Index(coords.size());
    for_each_coord(params, coords, [&](Param<S>& p, Index k, Index) {
        const double numeric = central_difference(p, k, epsilon, compute_loss);
        const double analytic = double(p.grad[k]);
        const double rel = relative_error(analytic, numeric);
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = p.name;
            report.worst_coord = k;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    });
    return report;
}

} // namespace smoe
