#pragma once

#include <cmath>

#include "smoe/param.hpp"

namespace smoe {

// Adam with bias correction. Moments are stored per parameter in manifest
// order; step() reads grads and leaves them untouched for the caller to zero.
template <typename S>
class AdamState {
public:
    AdamState() = default;

    AdamState(const ParamRefs<S>& params, S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto* p : params) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void step(const ParamRefs<S>& params) {
        if (m_.size() != params.size())
            throw StateError("adam_step: moments not initialized for this parameter set");
        ++step_count_;
        const S bc1 = S(1) - S(std::pow(double(beta1_), double(step_count_)));
        const S bc2 = S(1) - S(std::pow(double(beta2_), double(step_count_)));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto g = params[i]->grad.array();
            auto m = m_[i].array();
            auto v = v_[i].array();
            m = beta1_ * m + (S(1) - beta1_) * g;
            v = beta2_ * v + (S(1) - beta2_) * g.square();
            params[i]->value.array() -= lr_ * (m / bc1) / ((v / bc2).sqrt() + eps_);
        }
    }

    S lr() const { return lr_; }
    S beta1() const { return beta1_; }
    S beta2() const { return beta2_; }
    S eps() const { return eps_; }
    std::int64_t step_count() const { return step_count_; }
    void set_step_count(std::int64_t n) { step_count_ = n; }

    std::vector<Tensor<S>>& first_moments() { return m_; }
    std::vector<Tensor<S>>& second_moments() { return v_; }
    const std::vector<Tensor<S>>& first_moments() const { return m_; }
    const std::vector<Tensor<S>>& second_moments() const { return v_; }

private:
    S lr_ = S(1e-4);
    S beta1_ = S(0.9);
    S beta2_ = S(0.999);
    S eps_ = S(1e-8);
    std::int64_t step_count_ = 0;
    std::vector<Tensor<S>> m_, v_;
};

} // namespace smoe
