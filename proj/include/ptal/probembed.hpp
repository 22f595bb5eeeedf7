#pragma once

// Probabilistic embedding: per-snippet diagonal Gaussians estimated from
// the fused feature, reparameterized sampling, and the probabilistic class
// activation sequence built from Monte-Carlo cosine similarity against the
// text bank. Also the text orthogonality loss and the VLP knowledge
// distillation loss.

#include <string>
#include <utility>
#include <vector>

#include "ptal/rng.hpp"
#include "ptal/tensor.hpp"

namespace ptal {

struct ProbEmbedConfig {
  int in_dim = 32;   // 2D, width of the fused feature
  int vlp_dim = 16;  // D_v
  int samples = 20;  // K; 0 selects the deterministic CAS
  double tau = 0.07;
  double sigma_floor = 1e-4;
  double log_eps = 1e-6;
  double norm_eps = 1e-8;
};

// The scale field holds per-dimension standard deviations; the diagonal
// covariance is its square.
struct GaussianSequence {
  Tensor mu;     // T x D_v
  Tensor scale;  // T x D_v, strictly positive
};

struct ProbAdapterParams {
  Tensor mu_w, mu_b;        // {D_v, 2D}, {D_v}
  Tensor sigma_w, sigma_b;  // {D_v, 2D}, {D_v}

  static ProbAdapterParams init(const ProbEmbedConfig& cfg, Rng& rng) {
    ProbAdapterParams p;
    const float std = std::sqrt(2.0f / static_cast<float>(cfg.in_dim));
    p.mu_w = Tensor::randn({cfg.vlp_dim, cfg.in_dim}, rng, std, true);
    p.mu_b = Tensor::zeros({cfg.vlp_dim}, true);
    p.sigma_w = Tensor::randn({cfg.vlp_dim, cfg.in_dim}, rng, std, true);
    p.sigma_b = Tensor::zeros({cfg.vlp_dim}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"prob.mu_w", mu_w},
            {"prob.mu_b", mu_b},
            {"prob.sigma_w", sigma_w},
            {"prob.sigma_b", sigma_b}};
  }
};

// mu = g_mu(x), scale = max(relu(g_sigma(x)), sigma_floor).
inline GaussianSequence estimate_gaussian(const Tensor& x_fused, const ProbAdapterParams& p,
                                          double sigma_floor = 1e-4) {
  GaussianSequence g;
  g.mu = add_rowvec(matmul_nt(x_fused, p.mu_w), p.mu_b);
  g.scale = clamp_min(relu(add_rowvec(matmul_nt(x_fused, p.sigma_w), p.sigma_b)), sigma_floor);
  return g;
}

// K reparameterized draws per snippet, stacked as (T*K) x D_v with the K
// draws of snippet t in rows [t*K, (t+1)*K). The noise is a constant on
// the tape; gradients flow into mu and scale only.
inline Tensor sample_embeddings(const GaussianSequence& g, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("sample_embeddings: K must be >= 1");
  const int t_len = g.mu.rows(), d = g.mu.cols();
  Tensor eps = Tensor::zeros({t_len * k, d});
  for (auto& v : eps.vals()) v = static_cast<float>(rng.normal());
  return add(repeat_rows(g.mu, k), mul(eps, repeat_rows(g.scale, k)));
}

struct PCas {
  Tensor scores;  // T x (C+1)
  int samples = 0;
  double tau = 0.07;
};

// Monte-Carlo P-CAS from pre-drawn samples: s(t,c) is the mean cosine
// similarity of snippet t's K samples against bank row c, divided by tau.
inline PCas pcas_from_samples(const Tensor& samples, int k, const Tensor& bank_embeddings,
                              double tau, double norm_eps = 1e-8) {
  if (tau <= 0.0) throw std::invalid_argument("pcas: tau must be positive");
  PCas out;
  out.samples = k;
  out.tau = tau;
  out.scores =
      mul_scalar(group_mean_rows(cosine_matrix(samples, bank_embeddings, norm_eps), k), 1.0 / tau);
  return out;
}

// pcas with K=0 falls back to the deterministic CAS cos(mu, x_c)/tau.
inline PCas pcas(const GaussianSequence& g, const Tensor& bank_embeddings,
                 const ProbEmbedConfig& cfg, Rng& rng) {
  if (cfg.samples == 0) {
    PCas out;
    out.samples = 0;
    out.tau = cfg.tau;
    out.scores = mul_scalar(cosine_matrix(g.mu, bank_embeddings, cfg.norm_eps), 1.0 / cfg.tau);
    return out;
  }
  Tensor samples = sample_embeddings(g, cfg.samples, rng);
  return pcas_from_samples(samples, cfg.samples, bank_embeddings, cfg.tau, cfg.norm_eps);
}

// || X X^T - I ||_F^2 over the bank rows.
inline Tensor loss_ortho(const Tensor& bank_embeddings) {
  const int rows = bank_embeddings.rows();
  Tensor gram = matmul_nt(bank_embeddings, bank_embeddings);
  Tensor eye = Tensor::zeros({rows, rows});
  for (int i = 0; i < rows; ++i) eye.at(i, i) = 1.0f;
  return sum(square(sub(gram, eye)));
}

// -(1/T) sum_t log((cos(mu_t, x_t^i) + 1)/2 + log_eps). The image features
// are treated as constants; gradients flow into mu only.
inline Tensor loss_kd(const Tensor& mu, const Tensor& vlp_image, double log_eps = 1e-6,
                      double norm_eps = 1e-8) {
  detail::require_same_shape(mu, vlp_image, "loss_kd");
  Tensor cos = cosine_pairs(mu, detach(vlp_image), norm_eps);
  Tensor rescaled = add_scalar(mul_scalar(add_scalar(cos, 1.0), 0.5), log_eps);
  return neg(mean(log(rescaled)));
}

}  // namespace ptal
