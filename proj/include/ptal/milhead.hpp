#pragma once

// Base MIL head: cross-modal feature fusion, actionness attention, class
// activation sequence, top-k video-level prediction and the video-level
// losses. The attention branch is evaluated with both modality orders and
// averaged, so it is exactly symmetric under swapping RGB and flow.

#include <string>
#include <utility>
#include <vector>

#include "ptal/rng.hpp"
#include "ptal/tensor.hpp"

namespace ptal {

struct BaseHeadConfig {
  int feat_dim = 16;     // D; fused features are 2D wide
  int num_classes = 4;   // C; the CAS has C+1 columns
  int attn_hidden = 16;
  double dropout = 0.5;
  int topk_denominator = 8;  // k = max(1, T / denominator)

  int fused_dim() const { return 2 * feat_dim; }
  int cas_cols() const { return num_classes + 1; }
  int topk(int t_len) const { return std::max(1, t_len / topk_denominator); }
};

struct BaseHeadParams {
  Tensor fuse_w1, fuse_b1;  // {2D, 2D, 3}, {2D}
  Tensor fuse_w2, fuse_b2;  // {2D, 2D, 3}, {2D}
  Tensor attn_w1, attn_b1;  // {H, 2D, 3}, {H}
  Tensor attn_w2, attn_b2;  // {1, H, 1}, {1}
  Tensor cls_w, cls_b;      // {C+1, 2D, 1}, {C+1}

  static BaseHeadParams init(const BaseHeadConfig& cfg, Rng& rng) {
    const int d2 = cfg.fused_dim(), h = cfg.attn_hidden, c1 = cfg.cas_cols();
    auto he = [&](std::vector<int> shape, int fan_in) {
      return Tensor::randn(std::move(shape), rng, std::sqrt(2.0f / static_cast<float>(fan_in)),
                           true);
    };
    BaseHeadParams p;
    p.fuse_w1 = he({d2, d2, 3}, d2 * 3);
    p.fuse_b1 = Tensor::zeros({d2}, true);
    p.fuse_w2 = he({d2, d2, 3}, d2 * 3);
    p.fuse_b2 = Tensor::zeros({d2}, true);
    p.attn_w1 = he({h, d2, 3}, d2 * 3);
    p.attn_b1 = Tensor::zeros({h}, true);
    p.attn_w2 = he({1, h, 1}, h);
    p.attn_b2 = Tensor::zeros({1}, true);
    p.cls_w = he({c1, d2, 1}, d2);
    p.cls_b = Tensor::zeros({c1}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"base.fuse_w1", fuse_w1}, {"base.fuse_b1", fuse_b1}, {"base.fuse_w2", fuse_w2},
            {"base.fuse_b2", fuse_b2}, {"base.attn_w1", attn_w1}, {"base.attn_b1", attn_b1},
            {"base.attn_w2", attn_w2}, {"base.attn_b2", attn_b2}, {"base.cls_w", cls_w},
            {"base.cls_b", cls_b}};
  }
};

// Fused base feature: [X^R; X^O] through two temporal convolutions with
// ReLU; dropout between them at train time.
inline Tensor fuse_base(const Tensor& x_rgb, const Tensor& x_flow, const BaseHeadParams& p,
                        const BaseHeadConfig& cfg, Rng* dropout_rng = nullptr) {
  if (x_rgb.rows() != x_flow.rows())
    throw std::invalid_argument("fuse_base: temporal length mismatch");
  Tensor h = relu(conv1d(concat_cols(x_rgb, x_flow), p.fuse_w1, p.fuse_b1));
  if (dropout_rng && cfg.dropout > 0.0) h = dropout(h, cfg.dropout, *dropout_rng);
  return relu(conv1d(h, p.fuse_w2, p.fuse_b2));
}

namespace detail {
inline Tensor attention_branch(const Tensor& first, const Tensor& second, const BaseHeadParams& p) {
  Tensor h = relu(conv1d(concat_cols(first, second), p.attn_w1, p.attn_b1));
  return sigmoid(conv1d(h, p.attn_w2, p.attn_b2));  // T x 1
}
}  // namespace detail

// Actionness attention, averaged over both modality orders. Output {T}.
inline Tensor actionness(const Tensor& x_rgb, const Tensor& x_flow, const BaseHeadParams& p) {
  if (x_rgb.rows() != x_flow.rows())
    throw std::invalid_argument("actionness: temporal length mismatch");
  Tensor both = add(detail::attention_branch(x_rgb, x_flow, p),
                    detail::attention_branch(x_flow, x_rgb, p));
  return reshape(mul_scalar(both, 0.5), {x_rgb.rows()});
}

// Per-snippet class logits, background in the last column.
inline Tensor base_cas(const Tensor& x_fused, const BaseHeadParams& p) {
  return conv1d(x_fused, p.cls_w, p.cls_b);
}

struct VideoPrediction {
  Tensor pooled;  // {C+1} pre-softmax top-k means
  Tensor probs;   // {C+1}
};

inline VideoPrediction video_predict(const Tensor& cas, int topk_denominator = 8) {
  const int k = std::max(1, cas.rows() / topk_denominator);
  VideoPrediction out;
  out.pooled = topk_mean_cols(cas, k);
  out.probs = softmax(out.pooled);
  return out;
}

// Video label with background bit appended and normalized to sum 1.
inline std::vector<float> label_with_background(const std::vector<float>& y, float background_bit) {
  double total = background_bit;
  for (float v : y) total += v;
  if (total <= 0.0) throw std::invalid_argument("label_with_background: zero-label video");
  std::vector<float> out(y.size() + 1);
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i] / total);
  out[y.size()] = static_cast<float>(background_bit / total);
  return out;
}

// L_cls: cross entropy of the base prediction against [y, 1] plus cross
// entropy of the suppressed prediction against [y, 0].
inline Tensor loss_cls(const Tensor& pooled_base, const Tensor& pooled_supp,
                       const std::vector<float>& y) {
  return add(cross_entropy(label_with_background(y, 1.0f), pooled_base),
             cross_entropy(label_with_background(y, 0.0f), pooled_supp));
}

struct AuxLosses {
  Tensor oppo;   // complement-attended video should classify as background
  Tensor norm;   // attention sparsity
  Tensor guide;  // background posterior tracks inverted attention
};

inline AuxLosses aux_losses(const Tensor& s_base, const Tensor& attention, int topk_denominator) {
  const int t_len = s_base.rows();
  const int bg = s_base.cols() - 1;

  AuxLosses out;
  out.norm = mean(attention);

  Tensor bg_posterior = reshape(slice_cols(softmax(s_base, 1), bg, bg + 1), {t_len});
  Tensor inverted = add_scalar(neg(attention), 1.0);  // 1 - a
  out.guide = mean(square(sub(bg_posterior, inverted)));

  std::vector<float> bg_label(static_cast<std::size_t>(s_base.cols()), 0.0f);
  bg_label.back() = 1.0f;
  VideoPrediction oppo_pred = video_predict(scale_rows(s_base, inverted), topk_denominator);
  out.oppo = cross_entropy(bg_label, oppo_pred.pooled);
  return out;
}

struct VidLossWeights {
  double cls = 1.0;
  double oppo = 1.0;
  double norm = 0.1;
  double guide = 1.0;
};

inline Tensor loss_vid(const Tensor& cls, const AuxLosses& aux, const VidLossWeights& w) {
  if (w.cls < 0 || w.oppo < 0 || w.norm < 0 || w.guide < 0)
    throw std::invalid_argument("loss_vid: weights must be non-negative");
  return add(add(mul_scalar(cls, w.cls), mul_scalar(aux.oppo, w.oppo)),
             add(mul_scalar(aux.norm, w.norm), mul_scalar(aux.guide, w.guide)));
}

struct HeadOutputs {
  Tensor x_fused;      // T x 2D
  Tensor attention;    // {T}
  Tensor s_base;       // T x (C+1)
  Tensor s_supp;       // T x (C+1)
  Tensor pooled_base;  // {C+1}
  Tensor pooled_supp;  // {C+1}
  Tensor p_base;       // {C+1}
  Tensor p_supp;       // {C+1}
};

inline HeadOutputs forward_base_head(const Tensor& x_rgb, const Tensor& x_flow,
                                     const BaseHeadParams& p, const BaseHeadConfig& cfg,
                                     Rng* dropout_rng = nullptr) {
  HeadOutputs out;
  out.x_fused = fuse_base(x_rgb, x_flow, p, cfg, dropout_rng);
  out.attention = actionness(x_rgb, x_flow, p);
  out.s_base = base_cas(out.x_fused, p);
  out.s_supp = scale_rows(out.s_base, out.attention);
  VideoPrediction base = video_predict(out.s_base, cfg.topk_denominator);
  VideoPrediction supp = video_predict(out.s_supp, cfg.topk_denominator);
  out.pooled_base = base.pooled;
  out.p_base = base.probs;
  out.pooled_supp = supp.pooled;
  out.p_supp = supp.probs;
  return out;
}

}  // namespace ptal
