#pragma once

// Distribution contrastive learning: statistical distances between
// diagonal Gaussians, snippet mining via binary morphology on the
// binarized actionness, the intra-video contrastive loss, video-level
// Gaussian mixtures and the inter-video contrastive loss.
//
// Match probabilities use exp(-D) with D the symmetrized KL divergence
// (or a symmetric alternative metric); p equals 1 iff the distributions
// coincide and both sides of every contrastive pair see the same value.

#include <cstdint>
#include <string>
#include <vector>

#include "ptal/probembed.hpp"
#include "ptal/rng.hpp"
#include "ptal/tensor.hpp"

namespace ptal {

// ---------------------------------------------------------------------------
// Closed forms on plain diagonal Gaussians (double precision, no autodiff;
// these also serve as oracles for the differentiable path below)

struct DiagGaussian {
  std::vector<double> mu;
  std::vector<double> var;
};

inline void require_valid(const DiagGaussian& g) {
  if (g.mu.size() != g.var.size()) throw std::invalid_argument("diag gaussian: size mismatch");
  for (double v : g.var)
    if (!(v > 0.0)) throw std::invalid_argument("diag gaussian: variance must be positive");
}

// KL(P || Q) for diagonal covariances.
inline double kl_gaussian(const DiagGaussian& p, const DiagGaussian& q) {
  require_valid(p);
  require_valid(q);
  if (p.mu.size() != q.mu.size()) throw std::invalid_argument("kl_gaussian: dimension mismatch");
  double acc = 0.0;
  for (std::size_t d = 0; d < p.mu.size(); ++d) {
    const double diff = q.mu[d] - p.mu[d];
    acc += p.var[d] / q.var[d] + diff * diff / q.var[d] + std::log(q.var[d] / p.var[d]);
  }
  return 0.5 * acc - 0.5 * static_cast<double>(p.mu.size());
}

enum class DistanceMetric { kKL, kMahalanobis, kBhattacharyya };

inline DistanceMetric parse_metric(const std::string& name) {
  if (name == "kl") return DistanceMetric::kKL;
  if (name == "mahalanobis") return DistanceMetric::kMahalanobis;
  if (name == "bhattacharyya") return DistanceMetric::kBhattacharyya;
  throw std::invalid_argument("unknown distance metric: " + name);
}

inline std::string metric_name(DistanceMetric m) {
  switch (m) {
    case DistanceMetric::kKL: return "kl";
    case DistanceMetric::kMahalanobis: return "mahalanobis";
    case DistanceMetric::kBhattacharyya: return "bhattacharyya";
  }
  return "?";
}

// Alternative distances on the averaged variance (closed forms for
// diagonal Gaussians). Both are symmetric in (P, Q).
inline double alt_distance(const DiagGaussian& p, const DiagGaussian& q, DistanceMetric metric) {
  require_valid(p);
  require_valid(q);
  if (p.mu.size() != q.mu.size()) throw std::invalid_argument("alt_distance: dimension mismatch");
  double maha = 0.0, bhat = 0.0;
  for (std::size_t d = 0; d < p.mu.size(); ++d) {
    const double vbar = 0.5 * (p.var[d] + q.var[d]);
    const double diff = p.mu[d] - q.mu[d];
    maha += diff * diff / vbar;
    bhat += 0.125 * diff * diff / vbar +
            0.5 * (std::log(vbar) - 0.5 * (std::log(p.var[d]) + std::log(q.var[d])));
  }
  switch (metric) {
    case DistanceMetric::kMahalanobis: return std::sqrt(maha);
    case DistanceMetric::kBhattacharyya: return bhat;
    case DistanceMetric::kKL: break;
  }
  throw std::invalid_argument("alt_distance: use kl_gaussian for the KL metric");
}

// Symmetric divergence used inside match probabilities.
inline double sym_distance(const DiagGaussian& p, const DiagGaussian& q, DistanceMetric metric) {
  if (metric == DistanceMetric::kKL) return 0.5 * (kl_gaussian(p, q) + kl_gaussian(q, p));
  return alt_distance(p, q, metric);
}

// p(N) = exp(-D_sym); 1 iff P == Q, symmetric, decreasing in separation.
inline double match_probability(const DiagGaussian& p, const DiagGaussian& q,
                                DistanceMetric metric = DistanceMetric::kKL) {
  return std::exp(-sym_distance(p, q, metric));
}

// ---------------------------------------------------------------------------
// Binary morphology on 1-D masks

// Erosion with a centered odd mask: 1 where every covered position is 1.
// Positions outside the sequence read as `pad`.
inline std::vector<std::uint8_t> binary_erode(const std::vector<std::uint8_t>& b, int mask,
                                              std::uint8_t pad = 0) {
  if (mask < 1 || mask % 2 == 0) throw std::invalid_argument("binary_erode: mask must be odd");
  const int n = static_cast<int>(b.size()), r = mask / 2;
  std::vector<std::uint8_t> out(b.size(), 1);
  for (int i = 0; i < n; ++i)
    for (int j = -r; j <= r; ++j) {
      const int s = i + j;
      const std::uint8_t v = (s < 0 || s >= n) ? pad : b[static_cast<std::size_t>(s)];
      if (!v) {
        out[static_cast<std::size_t>(i)] = 0;
        break;
      }
    }
  return out;
}

// Dilation with a centered odd mask: 1 where any covered position is 1.
inline std::vector<std::uint8_t> binary_dilate(const std::vector<std::uint8_t>& b, int mask,
                                               std::uint8_t pad = 0) {
  if (mask < 1 || mask % 2 == 0) throw std::invalid_argument("binary_dilate: mask must be odd");
  const int n = static_cast<int>(b.size()), r = mask / 2;
  std::vector<std::uint8_t> out(b.size(), 0);
  for (int i = 0; i < n; ++i)
    for (int j = -r; j <= r; ++j) {
      const int s = i + j;
      const std::uint8_t v = (s < 0 || s >= n) ? pad : b[static_cast<std::size_t>(s)];
      if (v) {
        out[static_cast<std::size_t>(i)] = 1;
        break;
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Snippet mining

struct MinedSets {
  std::vector<int> easy_act;  // top-k attention among b=1
  std::vector<int> easy_bkg;  // bottom-k attention among b=0
  std::vector<int> hard_act;  // inner boundary region
  std::vector<int> hard_bkg;  // outer boundary region
};

// Binarize the attention at theta_b, erode/dilate with the small and large
// masks, and read the inner/outer boundary regions as hard snippets. Easy
// snippets are attention extremes on each side of the threshold. Degenerate
// masks leave the corresponding sets empty; this never throws on content.
inline MinedSets mine_snippets(const std::vector<float>& attention, double theta_b, int m,
                               int big_m, int k_easy) {
  if (!(theta_b > 0.0 && theta_b < 1.0)) throw std::invalid_argument("mine_snippets: theta_b in (0,1)");
  if (m >= big_m || m % 2 == 0 || big_m % 2 == 0 || m < 1)
    throw std::invalid_argument("mine_snippets: masks must be odd with m < M");
  if (k_easy < 1) throw std::invalid_argument("mine_snippets: k_easy must be >= 1");

  const int t_len = static_cast<int>(attention.size());
  std::vector<std::uint8_t> b(attention.size());
  for (int t = 0; t < t_len; ++t)
    b[static_cast<std::size_t>(t)] = attention[static_cast<std::size_t>(t)] > theta_b ? 1 : 0;

  const auto inner_small = binary_erode(b, m);
  const auto inner_large = binary_erode(b, big_m);
  const auto outer_small = binary_dilate(b, m);
  const auto outer_large = binary_dilate(b, big_m);

  MinedSets sets;
  for (int t = 0; t < t_len; ++t) {
    const auto i = static_cast<std::size_t>(t);
    if (inner_small[i] && !inner_large[i]) sets.hard_act.push_back(t);
    if (outer_large[i] && !outer_small[i]) sets.hard_bkg.push_back(t);
  }

  std::vector<int> act_idx, bkg_idx;
  for (int t = 0; t < t_len; ++t)
    (b[static_cast<std::size_t>(t)] ? act_idx : bkg_idx).push_back(t);
  auto by_attention = [&](bool descending) {
    return [&attention, descending](int x, int y) {
      const float ax = attention[static_cast<std::size_t>(x)];
      const float ay = attention[static_cast<std::size_t>(y)];
      if (ax != ay) return descending ? ax > ay : ax < ay;
      return x < y;
    };
  };
  std::sort(act_idx.begin(), act_idx.end(), by_attention(true));
  std::sort(bkg_idx.begin(), bkg_idx.end(), by_attention(false));
  act_idx.resize(std::min<std::size_t>(act_idx.size(), static_cast<std::size_t>(k_easy)));
  bkg_idx.resize(std::min<std::size_t>(bkg_idx.size(), static_cast<std::size_t>(k_easy)));
  sets.easy_act = std::move(act_idx);
  sets.easy_bkg = std::move(bkg_idx);
  return sets;
}

// ---------------------------------------------------------------------------
// Differentiable pairwise distances
//
// Row i of (muA, varA) pairs with row i of (muB, varB); the output is the
// {P} vector of symmetric distances under the chosen metric. Backward is
// analytic; the closed forms above serve as its oracle in tests.

inline Tensor gauss_distance_rows(const Tensor& mu_a, const Tensor& var_a, const Tensor& mu_b,
                                  const Tensor& var_b, DistanceMetric metric) {
  detail::require_same_shape(mu_a, var_a, "gauss_distance_rows");
  detail::require_same_shape(mu_a, mu_b, "gauss_distance_rows");
  detail::require_same_shape(mu_b, var_b, "gauss_distance_rows");
  const int n = mu_a.rows(), d = mu_a.cols();
  for (float v : var_a.vals())
    if (!(v > 0.0f)) throw std::invalid_argument("gauss_distance_rows: non-positive variance");
  for (float v : var_b.vals())
    if (!(v > 0.0f)) throw std::invalid_argument("gauss_distance_rows: non-positive variance");

  Tensor out = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      const double va = var_a.at(i, j), vb = var_b.at(i, j);
      const double diff = static_cast<double>(mu_a.at(i, j)) - mu_b.at(i, j);
      switch (metric) {
        case DistanceMetric::kKL:
          acc += 0.25 * (va / vb + vb / va - 2.0 + diff * diff * (1.0 / va + 1.0 / vb));
          break;
        case DistanceMetric::kMahalanobis:
          acc += diff * diff / (0.5 * (va + vb));
          break;
        case DistanceMetric::kBhattacharyya: {
          const double vbar = 0.5 * (va + vb);
          acc += 0.125 * diff * diff / vbar +
                 0.5 * (std::log(vbar) - 0.5 * (std::log(va) + std::log(vb)));
          break;
        }
      }
    }
    if (metric == DistanceMetric::kMahalanobis) acc = std::sqrt(std::max(acc, 1e-24));
    out.at(i) = static_cast<float>(acc);
  }

  auto ma = mu_a.impl(), va_i = var_a.impl(), mb = mu_b.impl(), vb_i = var_b.impl(),
       oi = out.impl();
  return detail::make_op(
      "gauss_distance_rows", {mu_a, var_a, mu_b, var_b}, out, [ma, va_i, mb, vb_i, oi, n, d, metric] {
        for (int i = 0; i < n; ++i) {
          const double g = oi->grad[static_cast<std::size_t>(i)];
          if (g == 0.0) continue;
          // Mahalanobis output is sqrt(s); chain through 1/(2 sqrt(s)).
          double chain = g;
          if (metric == DistanceMetric::kMahalanobis) {
            const double dist = oi->data[static_cast<std::size_t>(i)];
            chain = g / (2.0 * std::max(static_cast<double>(dist), 1e-12));
          }
          for (int j = 0; j < d; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * d + j;
            const double va = va_i->data[idx], vb = vb_i->data[idx];
            const double diff = static_cast<double>(ma->data[idx]) - mb->data[idx];
            double dmu_a = 0.0, dva = 0.0, dmu_b = 0.0, dvb = 0.0;
            switch (metric) {
              case DistanceMetric::kKL:
                dmu_a = 0.5 * diff * (1.0 / va + 1.0 / vb);
                dmu_b = -dmu_a;
                dva = 0.25 * (1.0 / vb - vb / (va * va) - diff * diff / (va * va));
                dvb = 0.25 * (1.0 / va - va / (vb * vb) - diff * diff / (vb * vb));
                break;
              case DistanceMetric::kMahalanobis: {
                const double vbar = 0.5 * (va + vb);
                dmu_a = 2.0 * diff / vbar;
                dmu_b = -dmu_a;
                dva = dvb = -0.5 * diff * diff / (vbar * vbar);
                break;
              }
              case DistanceMetric::kBhattacharyya: {
                const double vbar = 0.5 * (va + vb);
                dmu_a = 0.25 * diff / vbar;
                dmu_b = -dmu_a;
                const double common = -0.125 * diff * diff / (vbar * vbar) * 0.5 + 0.25 / vbar;
                dva = common - 0.25 / va;
                dvb = common - 0.25 / vb;
                break;
              }
            }
            ma->grad[idx] += chain * dmu_a;
            mb->grad[idx] += chain * dmu_b;
            va_i->grad[idx] += chain * dva;
            vb_i->grad[idx] += chain * dvb;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Intra-video contrastive loss
//
// Positive pairs tie hard snippets to the easy snippets of the same
// content (action-action and background-background); negative pairs cross
// the contents. Positives maximize the match probability, negatives
// minimize it. Pairs are capped at n_pair_max, keeping the ones whose hard
// snippet has the most confident attention.

struct IntraLossConfig {
  DistanceMetric metric = DistanceMetric::kKL;
  int n_pair_max = 64;
  double log_eps = 1e-6;
};

struct IntraLoss {
  Tensor value;
  bool has_pairs = false;
  int positives = 0;
  int negatives = 0;
};

namespace detail {

struct MinedPair {
  int hard = 0;
  int easy = 0;
  bool positive = false;
  double priority = 0.0;
};

inline std::vector<MinedPair> build_pairs(const MinedSets& sets,
                                          const std::vector<float>& attention, int n_pair_max) {
  std::vector<MinedPair> pairs;
  auto emit = [&](const std::vector<int>& hard, const std::vector<int>& easy, bool positive,
                  bool hard_is_action) {
    for (int h : hard)
      for (int e : easy) {
        const double a = attention[static_cast<std::size_t>(h)];
        pairs.push_back({h, e, positive, hard_is_action ? a : 1.0 - a});
      }
  };
  emit(sets.hard_act, sets.easy_act, true, true);
  emit(sets.hard_bkg, sets.easy_bkg, true, false);
  emit(sets.hard_act, sets.easy_bkg, false, true);
  emit(sets.hard_bkg, sets.easy_act, false, false);
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const MinedPair& a, const MinedPair& b) { return a.priority > b.priority; });
  if (static_cast<int>(pairs.size()) > n_pair_max) pairs.resize(static_cast<std::size_t>(n_pair_max));
  return pairs;
}

}  // namespace detail

inline IntraLoss loss_intra(const GaussianSequence& g, const MinedSets& sets,
                            const std::vector<float>& attention,
                            const IntraLossConfig& cfg = {}) {
  IntraLoss out;
  const auto pairs = detail::build_pairs(sets, attention, cfg.n_pair_max);
  bool any_pos = false, any_neg = false;
  for (const auto& p : pairs) (p.positive ? any_pos : any_neg) = true;
  if (!any_pos || !any_neg) {
    out.value = Tensor::scalar(0.0f);
    out.has_pairs = false;
    return out;
  }

  std::vector<int> hard_idx, easy_idx;
  for (const auto& p : pairs) {
    hard_idx.push_back(p.hard);
    easy_idx.push_back(p.easy);
  }
  Tensor var = square(g.scale);
  Tensor dist = gauss_distance_rows(gather_rows(g.mu, hard_idx), gather_rows(var, hard_idx),
                                    gather_rows(g.mu, easy_idx), gather_rows(var, easy_idx),
                                    cfg.metric);
  Tensor p_match = ptal::exp(neg(dist));  // in (0, 1]

  // Split by pair sign to apply -log p to positives, -log(1-p) to negatives.
  std::vector<int> pos_rows, neg_rows;
  for (int i = 0; i < static_cast<int>(pairs.size()); ++i)
    (pairs[static_cast<std::size_t>(i)].positive ? pos_rows : neg_rows).push_back(i);
  Tensor p_col = reshape(p_match, {static_cast<int>(pairs.size()), 1});
  Tensor pos_terms = neg(log(clamp_min(gather_rows(p_col, pos_rows), cfg.log_eps)));
  Tensor one_minus = add_scalar(neg(gather_rows(p_col, neg_rows)), 1.0);
  Tensor neg_terms = neg(log(clamp_min(one_minus, cfg.log_eps)));
  out.value = mul_scalar(add(sum(pos_terms), sum(neg_terms)), 1.0 / static_cast<double>(pairs.size()));
  out.has_pairs = true;
  out.positives = static_cast<int>(pos_rows.size());
  out.negatives = static_cast<int>(neg_rows.size());
  return out;
}

// ---------------------------------------------------------------------------
// Video-level Gaussian mixture

struct VideoMixture {
  Tensor mu;       // T x D_v
  Tensor scale;    // T x D_v
  Tensor weights;  // {T}, positive, sums to 1
};

inline VideoMixture video_gmm(const GaussianSequence& g, const Tensor& attention) {
  if (attention.numel() != static_cast<std::size_t>(g.mu.rows()))
    throw std::invalid_argument("video_gmm: attention length mismatch");
  double total = 0.0;
  for (float v : attention.vals()) total += static_cast<double>(v);
  if (!(total > 0.0)) throw std::invalid_argument("video_gmm: attention sums to zero");
  VideoMixture v;
  v.mu = g.mu;
  v.scale = g.scale;
  v.weights = divide_by_scalar(attention, sum(attention));
  return v;
}

// ---------------------------------------------------------------------------
// Mixture log density (fused autodiff op)
//
// logdensity(z_s) = logsumexp_t [ log w_t - 0.5 sum_d (log(2 pi v_td) +
// (z_sd - mu_td)^2 / v_td) ]. All inputs may carry gradients; z rows are
// reparameterized samples.

inline Tensor mixture_log_density(const Tensor& mu, const Tensor& var, const Tensor& log_w,
                                  const Tensor& z) {
  detail::require_same_shape(mu, var, "mixture_log_density");
  if (log_w.numel() != static_cast<std::size_t>(mu.rows()) || z.cols() != mu.cols())
    throw std::invalid_argument("mixture_log_density: shape mismatch");
  const int t_len = mu.rows(), d = mu.cols(), s_len = z.rows();
  constexpr double kLog2Pi = 1.8378770664093454836;

  // Per-component normalization constants.
  std::vector<double> comp_const(static_cast<std::size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    double acc = static_cast<double>(log_w.vals()[static_cast<std::size_t>(t)]);
    for (int j = 0; j < d; ++j)
      acc -= 0.5 * (kLog2Pi + std::log(static_cast<double>(var.at(t, j))));
    comp_const[static_cast<std::size_t>(t)] = acc;
  }

  Tensor out = Tensor::zeros({s_len});
  for (int s = 0; s < s_len; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(static_cast<std::size_t>(t_len));
    for (int t = 0; t < t_len; ++t) {
      double quad = 0.0;
      for (int j = 0; j < d; ++j) {
        const double diff = static_cast<double>(z.at(s, j)) - mu.at(t, j);
        quad += diff * diff / var.at(t, j);
      }
      terms[static_cast<std::size_t>(t)] = comp_const[static_cast<std::size_t>(t)] - 0.5 * quad;
      mx = std::max(mx, terms[static_cast<std::size_t>(t)]);
    }
    double denom = 0.0;
    for (double term : terms) denom += std::exp(term - mx);
    out.at(s) = static_cast<float>(mx + std::log(denom));
  }

  auto mi = mu.impl(), vi = var.impl(), wi = log_w.impl(), zi = z.impl(), oi = out.impl();
  return detail::make_op(
      "mixture_log_density", {mu, var, log_w, z}, out, [mi, vi, wi, zi, oi, t_len, d, s_len] {
        constexpr double kLog2PiB = 1.8378770664093454836;
        std::vector<double> comp_const(static_cast<std::size_t>(t_len));
        for (int t = 0; t < t_len; ++t) {
          double acc = static_cast<double>(wi->data[static_cast<std::size_t>(t)]);
          for (int j = 0; j < d; ++j)
            acc -= 0.5 * (kLog2PiB + std::log(static_cast<double>(vi->data[static_cast<std::size_t>(t) * d + j])));
          comp_const[static_cast<std::size_t>(t)] = acc;
        }
        std::vector<double> terms(static_cast<std::size_t>(t_len));
        for (int s = 0; s < s_len; ++s) {
          const double g = oi->grad[static_cast<std::size_t>(s)];
          if (g == 0.0) continue;
          const double ld = oi->data[static_cast<std::size_t>(s)];
          for (int t = 0; t < t_len; ++t) {
            double quad = 0.0;
            for (int j = 0; j < d; ++j) {
              const double diff = static_cast<double>(zi->data[static_cast<std::size_t>(s) * d + j]) -
                                  mi->data[static_cast<std::size_t>(t) * d + j];
              quad += diff * diff / vi->data[static_cast<std::size_t>(t) * d + j];
            }
            terms[static_cast<std::size_t>(t)] = comp_const[static_cast<std::size_t>(t)] - 0.5 * quad;
          }
          for (int t = 0; t < t_len; ++t) {
            const double resp = std::exp(terms[static_cast<std::size_t>(t)] - ld);
            if (resp == 0.0) continue;
            wi->grad[static_cast<std::size_t>(t)] += g * resp;
            for (int j = 0; j < d; ++j) {
              const std::size_t tj = static_cast<std::size_t>(t) * d + j;
              const std::size_t sj = static_cast<std::size_t>(s) * d + j;
              const double v = vi->data[tj];
              const double diff = static_cast<double>(zi->data[sj]) - mi->data[tj];
              mi->grad[tj] += g * resp * diff / v;
              vi->grad[tj] += g * resp * 0.5 * (diff * diff / (v * v) - 1.0 / v);
              zi->grad[sj] -= g * resp * diff / v;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Mixture match probability via Monte-Carlo symmetrized KL

// Frozen draws for one direction: which component each sample comes from
// plus its unit-normal noise.
struct MixtureDraws {
  std::vector<int> comps_a;  // components drawn from mixture A
  std::vector<int> comps_b;
  Tensor eps_a;  // S x D
  Tensor eps_b;
};

inline std::vector<int> draw_components(const std::vector<float>& weights, int count, Rng& rng) {
  std::vector<double> cdf(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += static_cast<double>(weights[i]);
    cdf[i] = acc;
  }
  std::vector<int> out(static_cast<std::size_t>(count));
  for (auto& c : out) {
    const double u = rng.uniform() * acc;
    c = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    if (c >= static_cast<int>(weights.size())) c = static_cast<int>(weights.size()) - 1;
  }
  return out;
}

inline MixtureDraws draw_mixture_samples(const VideoMixture& a, const VideoMixture& b, int count,
                                         Rng& rng) {
  MixtureDraws d;
  d.comps_a = draw_components(a.weights.vals(), count, rng);
  d.comps_b = draw_components(b.weights.vals(), count, rng);
  d.eps_a = Tensor::zeros({count, a.mu.cols()});
  for (auto& v : d.eps_a.vals()) v = static_cast<float>(rng.normal());
  d.eps_b = Tensor::zeros({count, b.mu.cols()});
  for (auto& v : d.eps_b.vals()) v = static_cast<float>(rng.normal());
  return d;
}

// exp(-max(D_sym, 0)) with D_sym the sample estimate of the symmetrized KL
// between the two mixtures. The component choices and noise are constants
// on the tape; densities and reparameterized samples carry the gradient.
inline Tensor mixture_match_probability(const VideoMixture& a, const VideoMixture& b,
                                        const MixtureDraws& draws) {
  Tensor var_a = square(a.scale);
  Tensor var_b = square(b.scale);
  Tensor logw_a = log(a.weights);
  Tensor logw_b = log(b.weights);

  Tensor z_a = add(gather_rows(a.mu, draws.comps_a), mul(draws.eps_a, gather_rows(a.scale, draws.comps_a)));
  Tensor z_b = add(gather_rows(b.mu, draws.comps_b), mul(draws.eps_b, gather_rows(b.scale, draws.comps_b)));

  Tensor d_ab = mean(sub(mixture_log_density(a.mu, var_a, logw_a, z_a),
                         mixture_log_density(b.mu, var_b, logw_b, z_a)));
  Tensor d_ba = mean(sub(mixture_log_density(b.mu, var_b, logw_b, z_b),
                         mixture_log_density(a.mu, var_a, logw_a, z_b)));
  Tensor d_sym = mul_scalar(add(d_ab, d_ba), 0.5);
  return ptal::exp(neg(clamp_min(d_sym, 0.0)));
}

inline Tensor mixture_match_probability(const VideoMixture& a, const VideoMixture& b, int samples,
                                        Rng& rng) {
  if (samples < 1) throw std::invalid_argument("mixture_match_probability: S must be >= 1");
  return mixture_match_probability(a, b, draw_mixture_samples(a, b, samples, rng));
}

// ---------------------------------------------------------------------------
// Inter-video contrastive loss

// H(i,j) = 1 iff videos i and j share at least one action class.
inline std::vector<std::vector<std::uint8_t>> similarity_map(
    const std::vector<std::vector<float>>& labels) {
  const std::size_t n = labels.size();
  std::vector<std::vector<std::uint8_t>> h(n, std::vector<std::uint8_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) {
        h[i][j] = 1;
        continue;
      }
      for (std::size_t c = 0; c < labels[i].size(); ++c)
        if (labels[i][c] > 0.5f && labels[j][c] > 0.5f) {
          h[i][j] = 1;
          break;
        }
    }
  return h;
}

// BCE between the self-similarity map and pairwise mixture match
// probabilities, averaged over all N^2 pairs. The diagonal compares a
// video with itself (p = 1 exactly) and contributes zero.
inline Tensor loss_inter(const std::vector<VideoMixture>& mixtures,
                         const std::vector<std::vector<std::uint8_t>>& h, int samples, Rng& rng,
                         double log_eps = 1e-6) {
  const int n = static_cast<int>(mixtures.size());
  if (n < 2) throw std::invalid_argument("loss_inter: needs at least two videos");
  Tensor total = Tensor::scalar(0.0f);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      Tensor p = mixture_match_probability(mixtures[static_cast<std::size_t>(i)],
                                           mixtures[static_cast<std::size_t>(j)], samples, rng);
      Tensor term = h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]
                        ? neg(log(clamp_min(p, log_eps)))
                        : neg(log(clamp_min(add_scalar(neg(p), 1.0), log_eps)));
      total = add(total, term);
    }
  // Each unordered pair appears twice in the N^2 sum.
  return mul_scalar(total, 2.0 / (static_cast<double>(n) * n));
}

}  // namespace ptal
