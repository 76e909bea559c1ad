#pragma once

#include <cmath>

#include "smoe/tensor.hpp"

namespace smoe {

struct LossConfig {
    double beta = 0.1;
    double alpha = 1.0;
    double lambda_balance = 200.0;
    double lambda_entropy = 400.0;
    double eps = 1e-8;
};

// Per-batch values of the objective and its terms, plus the batch-mean
// gating probabilities the balance term is built from.
struct LossBreakdown {
    double recon = 0.0;
    double kl = 0.0;
    double balance = 0.0;
    double entropy = 0.0;
    double gating = 0.0;
    double total = 0.0;
    std::vector<double> mean_probs;
};

// Per-sample sum of squared pixel errors, averaged over the batch.
template <typename S>
double recon_mse(const Tensor<S>& x, const Tensor<S>& x_hat) {
    if (!x.same_shape(x_hat))
        throw DimensionError("recon_mse: x " + x.shape_string() + " vs x_hat " + x_hat.shape_string());
    const Index n = x.dim(0);
    const S sq = (x.array() - x_hat.array()).square().sum();
    return double(sq) / double(n);
}

// Gaussian posterior vs standard normal prior: mean over the batch of
// -1/2 * sum_d (1 + logvar - mu^2 - exp(logvar)).
template <typename S>
double kl_divergence(const Tensor<S>& mu, const Tensor<S>& logvar) {
    if (!mu.same_shape(logvar))
        throw DimensionError("kl_divergence: mu " + mu.shape_string() + " vs logvar " + logvar.shape_string());
    const Index n = mu.dim(0);
    const S acc = (S(-0.5) * (S(1) + logvar.array() - mu.array().square() - logvar.array().exp())).sum();
    return double(acc) / double(n);
}

// E * MSE(batch-mean probs, uniform) == sum_e (pbar_e - 1/E)^2.
template <typename S>
double balance_loss(const Tensor<S>& probs) {
    const Index e = probs.dim(1);
    VectorX<S> pbar = probs.mat().colwise().mean().transpose();
    const S u = S(1) / S(e);
    S acc = 0;
    for (Index i = 0; i < e; ++i) acc += (pbar[i] - u) * (pbar[i] - u);
    return double(acc);
}

// Mean per-sample entropy, -sum_e p * log(p + eps).
template <typename S>
double entropy_loss(const Tensor<S>& probs, double eps = 1e-8) {
    const Index n = probs.dim(0);
    const S acc = (-probs.array() * (probs.array() + S(eps)).log()).sum();
    return double(acc) / double(n);
}

template <typename S>
LossBreakdown total_loss_terms(const Tensor<S>& x, const Tensor<S>& x_hat, const Tensor<S>& probs,
                               const Tensor<S>& mu, const Tensor<S>& logvar, const LossConfig& cfg) {
    LossBreakdown b;
    b.recon = recon_mse(x, x_hat);
    b.kl = kl_divergence(mu, logvar);
    b.balance = balance_loss(probs);
    b.entropy = entropy_loss(probs, cfg.eps);
    b.gating = cfg.lambda_balance * b.balance + cfg.lambda_entropy * b.entropy;
    b.total = b.recon + cfg.beta * b.kl + cfg.alpha * b.gating;
    VectorX<S> pbar = probs.mat().colwise().mean().transpose();
    b.mean_probs.resize(std::size_t(pbar.size()));
    for (Index i = 0; i < pbar.size(); ++i) b.mean_probs[std::size_t(i)] = double(pbar[i]);
    return b;
}

// Recompose the total from its terms in extended precision. Gradient checks
// difference this form so terms untouched by a perturbation cancel exactly.
inline long double compose_total(const LossBreakdown& b, const LossConfig& cfg) {
    return (long double)(b.recon) + (long double)(cfg.beta) * (long double)(b.kl) +
           (long double)(cfg.alpha) * ((long double)(cfg.lambda_balance) * (long double)(b.balance) +
                                       (long double)(cfg.lambda_entropy) * (long double)(b.entropy));
}

// ---- partial derivatives of the terms, used by the model backward ----------

template <typename S>
Tensor<S> d_recon_d_xhat(const Tensor<S>& x, const Tensor<S>& x_hat) {
    Tensor<S> g(x.shape());
    g.array() = S(2) / S(x.dim(0)) * (x_hat.array() - x.array());
    return g;
}

template <typename S>
void add_d_kl(const Tensor<S>& mu, const Tensor<S>& logvar, double weight,
              Tensor<S>& dmu, Tensor<S>& dlogvar) {
    const S w = S(weight) / S(mu.dim(0));
    dmu.array() += w * mu.array();
    dlogvar.array() += w * S(0.5) * (logvar.array().exp() - S(1));
}

template <typename S>
void add_d_balance(const Tensor<S>& probs, double weight, Tensor<S>& dprobs) {
    const Index n = probs.dim(0), e = probs.dim(1);
    VectorX<S> pbar = probs.mat().colwise().mean().transpose();
    const S u = S(1) / S(e);
    VectorX<S> row = S(2) * S(weight) / S(n) * (pbar.array() - u).matrix();
    dprobs.mat().rowwise() += row.transpose();
}

template <typename S>
void add_d_entropy(const Tensor<S>& probs, double weight, double eps, Tensor<S>& dprobs) {
    const S w = S(weight) / S(probs.dim(0));
    dprobs.array() += -w * ((probs.array() + S(eps)).log() +
                            probs.array() / (probs.array() + S(eps)));
}

} // namespace smoe
