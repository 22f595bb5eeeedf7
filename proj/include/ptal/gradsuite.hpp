#pragma once

// Finite-difference verification of every loss term on tiny random
// instances. Each entry substitutes one parameter tensor into the forward
// expression and compares the analytic gradient against central
// differences. Monte-Carlo paths run with frozen draws and a wider
// tolerance. Perturbation targets are chosen so no discrete choice
// (binarization, top-k membership, component draws) can flip under the
// finite-difference step.

#include <functional>
#include <string>
#include <vector>

#include "ptal/distlearn.hpp"
#include "ptal/gradcheck.hpp"
#include "ptal/trainer.hpp"

namespace ptal {

struct GradSuiteEntry {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 5) {
  TrainConfig cfg;
  cfg.t_sample = 8;
  cfg.feat_dim = 4;
  cfg.vlp_dim = 6;
  cfg.num_classes = 3;
  cfg.attn_hidden = 4;
  cfg.mc_samples = 4;
  cfg.batch_size = 2;
  cfg.mixture_samples = 32;
  cfg.n_pair_max = 16;
  cfg.mask_small = 1;
  cfg.mask_large = 3;

  Rng rng(derive_seed(seed, {77}));
  TextBank bank;
  for (int c = 0; c < cfg.num_classes; ++c) bank.class_names.push_back("c" + std::to_string(c));
  {
    std::vector<float> rows;
    for (int c = 0; c <= cfg.num_classes; ++c) {
      const auto u = detail::unit_vector(cfg.vlp_dim, rng);
      rows.insert(rows.end(), u.begin(), u.end());
    }
    bank.embeddings = Tensor::from({cfg.num_classes + 1, cfg.vlp_dim}, std::move(rows));
  }
  Model model = Model::init(cfg, bank, seed);

  std::vector<BatchVideo> batch;
  for (int v = 0; v < cfg.batch_size; ++v) {
    BatchVideo bv;
    bv.rgb = Tensor::randn({cfg.t_sample, cfg.feat_dim}, rng);
    bv.flow = Tensor::randn({cfg.t_sample, cfg.feat_dim}, rng);
    bv.vlp = Tensor::randn({cfg.t_sample, cfg.vlp_dim}, rng);
    bv.label.assign(static_cast<std::size_t>(cfg.num_classes), 0.0f);
    bv.label[static_cast<std::size_t>(v % cfg.num_classes)] = 1.0f;
    bv.label[static_cast<std::size_t>((v + 1) % cfg.num_classes)] = 1.0f;
    batch.push_back(std::move(bv));
  }
  const std::uint64_t step_seed = derive_seed(seed, {31});

  std::vector<GradSuiteEntry> results;
  auto check = [&](const std::string& name, double tolerance, const Tensor& target,
                   const std::function<Tensor(const Model&)>& loss_of,
                   Tensor Model::*bank_slot = nullptr, Tensor BaseHeadParams::*head_slot = nullptr,
                   Tensor ProbAdapterParams::*adapter_slot = nullptr) {
    auto f = [&, bank_slot, head_slot, adapter_slot](const Tensor& t) {
      Model probe = model;
      if (bank_slot) probe.*bank_slot = t;
      if (head_slot) probe.head.*head_slot = t;
      if (adapter_slot) probe.adapter.*adapter_slot = t;
      return loss_of(probe);
    };
    const double err = grad_check(f, target, 1e-3);
    results.push_back({name, err, tolerance, err < tolerance});
  };

  const BatchVideo& v0 = batch[0];
  auto head_out = [&](const Model& m) {
    Rng drop(derive_seed(step_seed, {detail::kPurposeDropout, 0}));
    return forward_base_head(v0.rgb, v0.flow, m.head, m.head_cfg, &drop);
  };

  // Eq. 4: base cross entropy
  check("L_base wrt cls_w", 1e-3, model.head.cls_w,
        [&](const Model& m) {
          return cross_entropy(label_with_background(v0.label, 1.0f), head_out(m).pooled_base);
        },
        nullptr, &BaseHeadParams::cls_w);
  check("L_base wrt fuse_w1", 1e-3, model.head.fuse_w1,
        [&](const Model& m) {
          return cross_entropy(label_with_background(v0.label, 1.0f), head_out(m).pooled_base);
        },
        nullptr, &BaseHeadParams::fuse_w1);

  // Eq. 5: suppressed cross entropy, gradient through the attention branch
  check("L_supp wrt attn_w1", 1e-3, model.head.attn_w1,
        [&](const Model& m) {
          return cross_entropy(label_with_background(v0.label, 0.0f), head_out(m).pooled_supp);
        },
        nullptr, &BaseHeadParams::attn_w1);

  // Auxiliary video-level losses
  check("L_oppo wrt attn_w1", 1e-3, model.head.attn_w1,
        [&](const Model& m) {
          HeadOutputs h = head_out(m);
          return aux_losses(h.s_base, h.attention, cfg.topk_denominator).oppo;
        },
        nullptr, &BaseHeadParams::attn_w1);
  check("L_norm wrt attn_w1", 1e-3, model.head.attn_w1,
        [&](const Model& m) {
          HeadOutputs h = head_out(m);
          return aux_losses(h.s_base, h.attention, cfg.topk_denominator).norm;
        },
        nullptr, &BaseHeadParams::attn_w1);
  check("L_guide wrt cls_w", 1e-3, model.head.cls_w,
        [&](const Model& m) {
          HeadOutputs h = head_out(m);
          return aux_losses(h.s_base, h.attention, cfg.topk_denominator).guide;
        },
        nullptr, &BaseHeadParams::cls_w);

  // Eq. 6: combined video loss
  check("L_vid wrt fuse_w2", 1e-3, model.head.fuse_w2,
        [&](const Model& m) {
          HeadOutputs h = head_out(m);
          Tensor cls = loss_cls(h.pooled_base, h.pooled_supp, v0.label);
          AuxLosses aux = aux_losses(h.s_base, h.attention, cfg.topk_denominator);
          return loss_vid(cls, aux, {cfg.lambda_cls, cfg.lambda_oppo, cfg.lambda_norm, cfg.lambda_guide});
        },
        nullptr, &BaseHeadParams::fuse_w2);

  // Eq. 11: text orthogonality wrt the trainable background row
  check("L_ortho wrt bank_bg", 1e-3, model.bank_bg,
        [&](const Model& m) { return loss_ortho(m.bank()); }, &Model::bank_bg);

  // Eq. 12: distillation
  check("L_kd wrt mu_w", 1e-3, model.adapter.mu_w,
        [&](const Model& m) {
          GaussianSequence g = estimate_gaussian(head_out(m).x_fused, m.adapter, cfg.sigma_floor);
          return loss_kd(g.mu, v0.vlp, cfg.log_eps, cfg.norm_eps);
        },
        nullptr, nullptr, &ProbAdapterParams::mu_w);
  check("L_kd wrt fuse_w2", 1e-3, model.head.fuse_w2,
        [&](const Model& m) {
          GaussianSequence g = estimate_gaussian(head_out(m).x_fused, m.adapter, cfg.sigma_floor);
          return loss_kd(g.mu, v0.vlp, cfg.log_eps, cfg.norm_eps);
        },
        nullptr, &BaseHeadParams::fuse_w2);

  // Eq. 17: intra loss on a fixed mined instance (sets frozen so the
  // perturbation cannot change pair membership)
  const MinedSets sets = mine_snippets(head_out(model).attention.vals(), cfg.theta_b,
                                       cfg.mask_small, cfg.mask_large, cfg.effective_k_easy());
  const std::vector<float> attn_fixed = head_out(model).attention.vals();
  IntraLossConfig icfg;
  icfg.n_pair_max = cfg.n_pair_max;
  icfg.log_eps = cfg.log_eps;
  auto intra_of = [&](const Model& m) {
    GaussianSequence g = estimate_gaussian(head_out(m).x_fused, m.adapter, cfg.sigma_floor);
    return loss_intra(g, sets, attn_fixed, icfg).value;
  };
  check("L_intra wrt mu_w", 1e-3, model.adapter.mu_w, intra_of, nullptr, nullptr,
        &ProbAdapterParams::mu_w);
  check("L_intra wrt sigma_w", 1e-3, model.adapter.sigma_w, intra_of, nullptr, nullptr,
        &ProbAdapterParams::sigma_w);

  // Eq. 19: inter loss with frozen mixture draws
  auto mixtures_of = [&](const Model& m) {
    std::vector<VideoMixture> mix;
    for (const BatchVideo& bv : batch) {
      Rng drop(derive_seed(step_seed, {detail::kPurposeDropout, 0}));
      HeadOutputs h = forward_base_head(bv.rgb, bv.flow, m.head, m.head_cfg, &drop);
      GaussianSequence g = estimate_gaussian(h.x_fused, m.adapter, cfg.sigma_floor);
      mix.push_back(video_gmm(g, h.attention));
    }
    return mix;
  };
  const auto base_mixtures = mixtures_of(model);
  Rng draw_rng(derive_seed(step_seed, {detail::kPurposeInter}));
  const MixtureDraws draws =
      draw_mixture_samples(base_mixtures[0], base_mixtures[1], cfg.mixture_samples, draw_rng);
  std::vector<std::vector<float>> labels;
  for (const BatchVideo& bv : batch) labels.push_back(bv.label);
  const auto h_map = similarity_map(labels);
  auto inter_of = [&](const Model& m) {
    const auto mix = mixtures_of(m);
    Tensor p = mixture_match_probability(mix[0], mix[1], draws);
    Tensor term = h_map[0][1] ? neg(log(clamp_min(p, cfg.log_eps)))
                              : neg(log(clamp_min(add_scalar(neg(p), 1.0), cfg.log_eps)));
    return mul_scalar(term, 0.5);  // 2 / N^2 with N = 2
  };
  check("L_inter wrt mu_w", 5e-3, model.adapter.mu_w, inter_of, nullptr, nullptr,
        &ProbAdapterParams::mu_w);
  check("L_inter wrt sigma_w", 5e-3, model.adapter.sigma_w, inter_of, nullptr, nullptr,
        &ProbAdapterParams::sigma_w);
  check("L_inter wrt attn_w1", 5e-3, model.head.attn_w1, inter_of, nullptr,
        &BaseHeadParams::attn_w1);

  // Eq. 20: full objective (frozen step seed, dropout active). Perturbation
  // targets avoid the attention branch so mining stays fixed.
  auto total_of = [&](const Model& m) { return total_loss(m, batch, cfg, step_seed).total; };
  check("L_total wrt fuse_w1", 5e-3, model.head.fuse_w1, total_of, nullptr,
        &BaseHeadParams::fuse_w1);
  check("L_total wrt mu_w", 5e-3, model.adapter.mu_w, total_of, nullptr, nullptr,
        &ProbAdapterParams::mu_w);
  check("L_total wrt bank_bg", 5e-3, model.bank_bg, total_of, &Model::bank_bg);

  return results;
}

inline bool gradient_suite_passed(const std::vector<GradSuiteEntry>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return !results.empty();
}

}  // namespace ptal
