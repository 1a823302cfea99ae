#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "lacoste/nn.hpp"

namespace lacoste::optim {

using GradByName = std::unordered_map<std::string, Tensor>;

// Collects parameter gradients out of a backward() result, keyed by name.
// Missing parameters (not touched by this graph) simply stay absent.
inline void accumulate_grads(const nn::ParamStore& params, const ad::GradMap& grads,
                             GradByName& acc) {
    for (const auto& name : params.names()) {
        const ad::Var& p = params.get(name);
        auto it = grads.find(p.get());
        if (it == grads.end()) continue;
        auto slot = acc.find(name);
        if (slot == acc.end())
            acc.emplace(name, it->second);
        else
            slot->second.add_(it->second);
    }
}

// AdamW: decoupled weight decay, no decay on 1-D parameters (biases, norms).
class AdamW {
  public:
    explicit AdamW(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8, double weight_decay = 0.01)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return t_; }

    void step(nn::ParamStore& params, const GradByName& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& name : params.names()) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            Tensor& p = params.get(name)->val;
            const Tensor& g = git->second;
            auto& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
            auto& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
            const bool decay = p.ndim() > 1;
            for (int64_t i = 0; i < p.numel(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + (decay ? wd_ * p[i] : 0.0));
            }
        }
    }

  private:
    double lr_, beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
    std::unordered_map<std::string, Tensor> m_, v_;
};

// Polynomial decay: base * (1 - step/total)^power, floored at zero.
inline double poly_lr(double base, int64_t step, int64_t total_steps, double power = 0.9) {
    if (total_steps <= 0) return base;
    const double frac =
        1.0 - std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return base * std::pow(frac, power);
}

}  // namespace lacoste::optim
