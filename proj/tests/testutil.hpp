#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lacoste/autodiff.hpp"
#include "lacoste/nn.hpp"

namespace lacoste::testutil {

// Central finite-difference gradient check of a re-runnable scalar loss
// against reverse-mode gradients, on a sampled subset of coordinates per
// checked leaf. Returns the worst relative error seen.
struct GradCheckResult {
    double worst_rel = 0.0;
    std::string worst_where;
    int64_t coords_checked = 0;
};

inline GradCheckResult check_gradients(const std::vector<std::pair<std::string, ad::Var>>& leaves,
                                       const std::function<ad::Var()>& loss_fn, Rng& rng,
                                       int coords_per_leaf = 8, double step = 1e-4) {
    GradCheckResult res;
    ad::GradMap grads = ad::backward(loss_fn());
    for (const auto& [name, leaf] : leaves) {
        auto it = grads.find(leaf.get());
        const int64_t n = leaf->val.numel();
        for (int k = 0; k < coords_per_leaf; ++k) {
            const int64_t i = uniform_int(rng, 0, n - 1);
            const double saved = leaf->val[i];
            leaf->val[i] = saved + step;
            const double fp = loss_fn()->val[0];
            leaf->val[i] = saved - step;
            const double fm = loss_fn()->val[0];
            leaf->val[i] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = (it != grads.end()) ? it->second[i] : 0.0;
            const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
            ++res.coords_checked;
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.worst_where = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

inline GradCheckResult check_param_gradients(nn::ParamStore& ps,
                                             const std::function<ad::Var()>& loss_fn, Rng& rng,
                                             int coords_per_leaf = 6, double step = 1e-4) {
    std::vector<std::pair<std::string, ad::Var>> leaves;
    for (const auto& name : ps.names()) leaves.emplace_back(name, ps.get(name));
    return check_gradients(leaves, loss_fn, rng, coords_per_leaf, step);
}

inline bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace lacoste::testutil
