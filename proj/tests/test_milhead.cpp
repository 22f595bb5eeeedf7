#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ptal/features.hpp"
#include "ptal/gradcheck.hpp"
#include "ptal/milhead.hpp"
#include "ptal/trainer.hpp"

using namespace ptal;

namespace {

// Head params whose convolutions are 1-wide identities with zero bias.
BaseHeadParams identity_params(int feat_dim, int num_classes, int hidden) {
  const int d2 = 2 * feat_dim;
  BaseHeadParams p;
  auto eye3 = [&](int n) {
    Tensor w = Tensor::zeros({n, n, 1}, true);
    for (int i = 0; i < n; ++i) w.vals()[static_cast<std::size_t>(i) * n + i] = 1.0f;
    return w;
  };
  p.fuse_w1 = eye3(d2);
  p.fuse_b1 = Tensor::zeros({d2}, true);
  p.fuse_w2 = eye3(d2);
  p.fuse_b2 = Tensor::zeros({d2}, true);
  p.attn_w1 = Tensor::zeros({hidden, d2, 3}, true);
  p.attn_b1 = Tensor::zeros({hidden}, true);
  p.attn_w2 = Tensor::zeros({1, hidden, 1}, true);
  p.attn_b2 = Tensor::zeros({1}, true);
  p.cls_w = Tensor::zeros({num_classes + 1, d2, 1}, true);
  p.cls_b = Tensor::zeros({num_classes + 1}, true);
  return p;
}

BaseHeadConfig config(int feat_dim = 4, int classes = 3) {
  BaseHeadConfig cfg;
  cfg.feat_dim = feat_dim;
  cfg.num_classes = classes;
  cfg.attn_hidden = 4;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("identity-initialized fusion reproduces the concatenated input", "[milhead]") {
  Rng rng(3);
  const BaseHeadConfig cfg = config();
  const BaseHeadParams p = identity_params(cfg.feat_dim, cfg.num_classes, cfg.attn_hidden);
  Tensor xr = relu(Tensor::randn({6, cfg.feat_dim}, rng));  // identity needs non-negative input
  Tensor xo = relu(Tensor::randn({6, cfg.feat_dim}, rng));
  Tensor fused = fuse_base(xr, xo, p, cfg);
  Tensor expect = concat_cols(xr, xo);
  CHECK(fused.vals() == expect.vals());
}

TEST_CASE("zero input with zero bias fuses to zero", "[milhead]") {
  const BaseHeadConfig cfg = config();
  const BaseHeadParams p = identity_params(cfg.feat_dim, cfg.num_classes, cfg.attn_hidden);
  Tensor z = Tensor::zeros({5, cfg.feat_dim});
  Tensor fused = fuse_base(z, z, p, cfg);
  for (float v : fused.vals()) CHECK(v == 0.0f);
}

TEST_CASE("fusion output shape is T x 2D", "[milhead]") {
  Rng rng(5);
  BaseHeadConfig cfg = config(8, 2);
  const BaseHeadParams p = BaseHeadParams::init(cfg, rng);
  Tensor fused = fuse_base(Tensor::randn({12, 8}, rng), Tensor::randn({12, 8}, rng), p, cfg);
  CHECK(fused.shape() == std::vector<int>{12, 16});
}

TEST_CASE("actionness is symmetric under modality swap and lives in (0,1)", "[milhead]") {
  Rng rng(7);
  const BaseHeadConfig cfg = config();
  const BaseHeadParams p = BaseHeadParams::init(cfg, rng);
  Tensor xr = Tensor::randn({10, cfg.feat_dim}, rng);
  Tensor xo = Tensor::randn({10, cfg.feat_dim}, rng);
  Tensor a1 = actionness(xr, xo, p);
  Tensor a2 = actionness(xo, xr, p);
  CHECK(a1.vals() == a2.vals());  // exact, not approximate
  for (float v : a1.vals()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  // identical modalities collapse Eq. 2 to a single branch
  Tensor same = actionness(xr, xr, p);
  Tensor branch = sigmoid(conv1d(relu(conv1d(concat_cols(xr, xr), p.attn_w1, p.attn_b1)),
                                 p.attn_w2, p.attn_b2));
  for (int t = 0; t < 10; ++t)
    CHECK(same.at(t) == Catch::Approx(branch.at(t, 0)).margin(1e-7));
}

TEST_CASE("zero classifier weights give uniform per-snippet posteriors", "[milhead]") {
  Rng rng(9);
  const BaseHeadConfig cfg = config();
  BaseHeadParams p = BaseHeadParams::init(cfg, rng);
  p.cls_w = Tensor::zeros(p.cls_w.shape(), true);
  p.cls_b = Tensor::zeros(p.cls_b.shape(), true);
  Tensor xb = Tensor::randn({7, cfg.fused_dim()}, rng);
  Tensor cas = base_cas(xb, p);
  CHECK(cas.shape() == std::vector<int>{7, cfg.cas_cols()});
  Tensor post = softmax(cas, 1);
  for (float v : post.vals()) CHECK(v == Catch::Approx(1.0 / cfg.cas_cols()).margin(1e-6));
}

TEST_CASE("video prediction pools top-k then softmaxes", "[milhead]") {
  Tensor one_row = Tensor::from({1, 3}, {1.0f, 2.0f, 0.0f});
  VideoPrediction vp = video_predict(one_row, 8);
  Tensor direct = softmax(Tensor::from({3}, {1.0f, 2.0f, 0.0f}));
  for (int c = 0; c < 3; ++c) CHECK(vp.probs.at(c) == Catch::Approx(direct.at(c)).margin(1e-7));

  Tensor col = Tensor::from({4, 1}, {1.0f, 2.0f, 3.0f, 4.0f});
  CHECK(video_predict(col, 2).pooled.at(0) == Catch::Approx(3.5));  // k = max(1, 4/2) = 2

  Rng rng(11);
  Tensor s = Tensor::randn({8, 3}, rng);
  std::vector<float> rotated(s.vals());
  std::rotate(rotated.begin(), rotated.begin() + 9, rotated.end());
  VideoPrediction a = video_predict(s, 4);
  VideoPrediction b = video_predict(Tensor::from({8, 3}, rotated), 4);
  for (int c = 0; c < 3; ++c) CHECK(a.probs.at(c) == Catch::Approx(b.probs.at(c)).margin(1e-6));
}

TEST_CASE("classification loss reaches the entropy lower bound at the target", "[milhead]") {
  // Both classes present: y_base = [1/3,1/3,1/3], y_supp = [1/2,1/2,~0].
  const std::vector<float> y = {1.0f, 1.0f};
  Tensor pooled_base = Tensor::from({3}, {0.0f, 0.0f, 0.0f});
  Tensor pooled_supp = Tensor::from({3}, {0.0f, 0.0f, -40.0f});
  const double h_base = std::log(3.0);
  const double h_supp = std::log(2.0);
  Tensor loss = loss_cls(pooled_base, pooled_supp, y);
  CHECK(loss.item64() == Catch::Approx(h_base + h_supp).margin(1e-5));

  // any other prediction is at least the entropy
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor pb = Tensor::randn({3}, rng);
    Tensor ps = Tensor::randn({3}, rng);
    CHECK(loss_cls(pb, ps, y).item64() >= h_base + h_supp - 1e-9);
  }
}

TEST_CASE("single-class video yields a finite positive loss", "[milhead]") {
  Tensor pb = Tensor::from({3}, {5.0f, -5.0f, 0.0f});
  Tensor ps = Tensor::from({3}, {5.0f, -5.0f, -5.0f});
  const double v = loss_cls(pb, ps, {1.0f, 0.0f}).item64();
  CHECK(std::isfinite(v));
  CHECK(v > 0.0);
  CHECK_THROWS_AS(loss_cls(pb, ps, {0.0f, 0.0f}), std::invalid_argument);
}

TEST_CASE("classification loss through the CAS matches finite differences", "[milhead]") {
  Rng rng(15);
  const BaseHeadConfig cfg = config();
  const BaseHeadParams p = BaseHeadParams::init(cfg, rng);
  Tensor xr = Tensor::randn({8, cfg.feat_dim}, rng);
  Tensor xo = Tensor::randn({8, cfg.feat_dim}, rng);
  const std::vector<float> y = {1.0f, 0.0f, 1.0f};
  auto f = [&](const Tensor& w) {
    BaseHeadParams probe = p;
    probe.cls_w = w;
    HeadOutputs h = forward_base_head(xr, xo, probe, cfg);
    return loss_cls(h.pooled_base, h.pooled_supp, y);
  };
  CHECK(grad_check(f, p.cls_w, 1e-3) < 1e-3);
}

TEST_CASE("auxiliary losses hit their closed-form anchors", "[milhead]") {
  Rng rng(17);
  Tensor s = Tensor::randn({6, 3}, rng);

  Tensor ones = Tensor::full({6}, 1.0f);
  CHECK(aux_losses(s, ones, 8).norm.item64() == Catch::Approx(1.0));

  // background posterior exactly equal to 1 - a makes the guide loss vanish
  std::vector<float> a_vals = {0.2f, 0.4f, 0.6f, 0.8f, 0.3f, 0.7f};
  Tensor logits = Tensor::zeros({6, 2});
  for (int t = 0; t < 6; ++t) {
    logits.at(t, 0) = std::log(a_vals[static_cast<std::size_t>(t)]);
    logits.at(t, 1) = std::log(1.0f - a_vals[static_cast<std::size_t>(t)]);
  }
  CHECK(aux_losses(logits, Tensor::from({6}, a_vals), 8).guide.item64() ==
        Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("auxiliary losses match finite differences", "[milhead]") {
  Rng rng(19);
  const BaseHeadConfig cfg = config();
  const BaseHeadParams p = BaseHeadParams::init(cfg, rng);
  Tensor xr = Tensor::randn({8, cfg.feat_dim}, rng);
  Tensor xo = Tensor::randn({8, cfg.feat_dim}, rng);
  auto through_attention = [&](auto pick) {
    return [&, pick](const Tensor& w) {
      BaseHeadParams probe = p;
      probe.attn_w1 = w;
      HeadOutputs h = forward_base_head(xr, xo, probe, cfg);
      return pick(aux_losses(h.s_base, h.attention, cfg.topk_denominator));
    };
  };
  CHECK(grad_check(through_attention([](const AuxLosses& l) { return l.oppo; }), p.attn_w1) < 1e-3);
  CHECK(grad_check(through_attention([](const AuxLosses& l) { return l.norm; }), p.attn_w1) < 1e-3);
  CHECK(grad_check(through_attention([](const AuxLosses& l) { return l.guide; }), p.attn_w1) < 1e-3);
}

TEST_CASE("video loss is linear in its weights", "[milhead]") {
  Tensor cls = Tensor::scalar(0.8f);
  AuxLosses aux{Tensor::scalar(0.6f), Tensor::scalar(0.4f), Tensor::scalar(0.2f)};
  CHECK(loss_vid(cls, aux, {1.0, 0.0, 0.0, 0.0}).item64() == Catch::Approx(0.8));
  CHECK(loss_vid(cls, aux, {0.0, 0.0, 0.0, 0.0}).item64() == 0.0);
  CHECK(loss_vid(cls, aux, {2.0, 3.0, 4.0, 5.0}).item64() ==
        Catch::Approx(2 * 0.8 + 3 * 0.6 + 4 * 0.4 + 5 * 0.2).margin(1e-6));
  CHECK_THROWS_AS(loss_vid(cls, aux, {-1.0, 0.0, 0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("suppressed CAS never exceeds a non-negative base CAS", "[milhead]") {
  Rng rng(21);
  Tensor s = relu(Tensor::randn({10, 4}, rng));
  Tensor a = Tensor::zeros({10});
  for (auto& v : a.vals()) v = static_cast<float>(1.0 / (1.0 + std::exp(-rng.normal())));
  Tensor supp = scale_rows(s, a);
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(supp.vals()[i] <= s.vals()[i] + 1e-7f);
}

TEST_CASE("classification loss alone learns a zero-noise video", "[milhead]") {
  SynthConfig scfg;
  scfg.classes = 3;
  scfg.dim = 8;
  scfg.vlp_dim = 8;
  scfg.videos = 1;
  scfg.min_snippets = 32;
  scfg.max_snippets = 32;
  scfg.feature_noise = 0.0;
  scfg.vlp_noise = 0.0;
  const Dataset ds = synthesize_dataset(scfg, 23);

  TrainConfig cfg;
  cfg.t_sample = 32;
  cfg.feat_dim = 8;
  cfg.vlp_dim = 8;
  cfg.num_classes = 3;
  cfg.attn_hidden = 8;
  cfg.dropout = 0.0;
  cfg.lambda_oppo = 0.0;
  cfg.lambda_norm = 0.0;
  cfg.lambda_guide = 0.0;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  cfg.gamma = 0.0;
  cfg.batch_size = 1;
  cfg.learning_rate = 1e-2;
  cfg.steps = 200;
  cfg.eval_every = 0;
  cfg.seed = 4;

  const TrainResult result = train(cfg, ds, nullptr);
  const SampledSnippets s = sample_snippets(ds.videos[0], cfg.t_sample, SampleMode::kInference);
  HeadOutputs h = forward_base_head(s.rgb, s.flow, result.checkpoint.model.head,
                                    result.checkpoint.model.head_cfg);
  double best = 0.0;
  for (int c = 0; c < cfg.num_classes; ++c)
    if (ds.truth[0].label[static_cast<std::size_t>(c)] > 0.5f)
      best = std::max(best, static_cast<double>(h.p_supp.at(c)));
  CHECK(best > 0.9);
}
