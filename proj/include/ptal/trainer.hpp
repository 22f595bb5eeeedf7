#pragma once

// Training orchestration: the total objective, Adam updates, seeded
// determinism, checkpointing and dataset-level inference. Every stochastic
// choice in a step (batch assembly, snippet sampling, dropout, Monte-Carlo
// draws) derives from (seed, step), so an interrupted run resumed from a
// checkpoint is bit-identical to an uninterrupted one.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ptal/distlearn.hpp"
#include "ptal/evaluate.hpp"
#include "ptal/features.hpp"
#include "ptal/localize.hpp"
#include "ptal/milhead.hpp"
#include "ptal/probembed.hpp"
#include "ptal/tensor.hpp"

namespace ptal {

// ---------------------------------------------------------------------------
// Config

struct TrainConfig {
  // model dimensions
  int t_sample = 64;   // T
  int feat_dim = 16;   // D
  int vlp_dim = 16;    // D_v
  int num_classes = 4; // C
  int attn_hidden = 16;
  double dropout = 0.5;
  int topk_denominator = 8;
  // probabilistic embedding
  int mc_samples = 20;  // K; 0 = deterministic CAS
  double tau = 0.07;
  double sigma_floor = 1e-4;
  double log_eps = 1e-6;
  double norm_eps = 1e-8;
  // video-level loss weights
  double lambda_cls = 1.0;
  double lambda_oppo = 1.0;
  double lambda_norm = 0.1;
  double lambda_guide = 1.0;
  // total objective weights
  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 0.5;
  // snippet mining
  double theta_b = 0.5;
  int mask_small = 3;
  int mask_large = 7;
  int k_easy = 0;  // 0 = max(1, T / 8)
  int n_pair_max = 64;
  // inter-video contrastive
  int mixture_samples = 256;  // S
  std::string metric = "kl";
  // optimization
  int batch_size = 8;
  double learning_rate = 4e-4;
  int steps = 1500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int eval_every = 500;
  std::uint64_t seed = 1;
  // inference
  double fusion_weight = 0.5;
  double class_threshold = 0.2;
  double soft_nms_sigma = 0.3;
  double boundary_inflation = 0.25;

  int effective_k_easy() const { return k_easy > 0 ? k_easy : std::max(1, t_sample / 8); }

  BaseHeadConfig head_config() const {
    BaseHeadConfig h;
    h.feat_dim = feat_dim;
    h.num_classes = num_classes;
    h.attn_hidden = attn_hidden;
    h.dropout = dropout;
    h.topk_denominator = topk_denominator;
    return h;
  }

  ProbEmbedConfig prob_config() const {
    ProbEmbedConfig p;
    p.in_dim = 2 * feat_dim;
    p.vlp_dim = vlp_dim;
    p.samples = mc_samples;
    p.tau = tau;
    p.sigma_floor = sigma_floor;
    p.log_eps = log_eps;
    p.norm_eps = norm_eps;
    return p;
  }

  LocalizeConfig localize_config() const {
    LocalizeConfig l;
    l.fusion_weight = fusion_weight;
    l.class_threshold = class_threshold;
    l.soft_nms_sigma = soft_nms_sigma;
    l.boundary_inflation = boundary_inflation;
    return l;
  }
};

namespace detail {

template <typename Fn>
inline void visit_config(TrainConfig& c, Fn&& f) {
  f("t_sample", c.t_sample);
  f("feat_dim", c.feat_dim);
  f("vlp_dim", c.vlp_dim);
  f("num_classes", c.num_classes);
  f("attn_hidden", c.attn_hidden);
  f("dropout", c.dropout);
  f("topk_denominator", c.topk_denominator);
  f("mc_samples", c.mc_samples);
  f("tau", c.tau);
  f("sigma_floor", c.sigma_floor);
  f("log_eps", c.log_eps);
  f("norm_eps", c.norm_eps);
  f("lambda_cls", c.lambda_cls);
  f("lambda_oppo", c.lambda_oppo);
  f("lambda_norm", c.lambda_norm);
  f("lambda_guide", c.lambda_guide);
  f("alpha", c.alpha);
  f("beta", c.beta);
  f("gamma", c.gamma);
  f("theta_b", c.theta_b);
  f("mask_small", c.mask_small);
  f("mask_large", c.mask_large);
  f("k_easy", c.k_easy);
  f("n_pair_max", c.n_pair_max);
  f("mixture_samples", c.mixture_samples);
  f("metric", c.metric);
  f("batch_size", c.batch_size);
  f("learning_rate", c.learning_rate);
  f("steps", c.steps);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("eval_every", c.eval_every);
  f("seed", c.seed);
  f("fusion_weight", c.fusion_weight);
  f("class_threshold", c.class_threshold);
  f("soft_nms_sigma", c.soft_nms_sigma);
  f("boundary_inflation", c.boundary_inflation);
}

inline void assign_config_field(int& slot, const std::string& v) { slot = std::stoi(v); }
inline void assign_config_field(double& slot, const std::string& v) { slot = std::stod(v); }
inline void assign_config_field(std::string& slot, const std::string& v) { slot = v; }
inline void assign_config_field(std::uint64_t& slot, const std::string& v) { slot = std::stoull(v); }

inline std::string format_config_field(int v) { return std::to_string(v); }
inline std::string format_config_field(std::uint64_t v) { return std::to_string(v); }
inline std::string format_config_field(const std::string& v) { return v; }
inline std::string format_config_field(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline std::string serialize_train_config(const TrainConfig& cfg) {
  std::ostringstream os;
  detail::visit_config(const_cast<TrainConfig&>(cfg), [&os](const char* key, auto& slot) {
    os << key << " = " << detail::format_config_field(slot) << "\n";
  });
  return os.str();
}

inline void set_config_field(TrainConfig& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  detail::visit_config(cfg, [&](const char* name, auto& slot) {
    if (key == name) {
      detail::assign_config_field(slot, value);
      found = true;
    }
  });
  if (!found) throw std::invalid_argument("unknown config key: " + key);
}

// Flat "key = value" text; '#' starts a comment.
inline TrainConfig parse_train_config_text(const std::string& text, TrainConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    if (strip(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_field(base, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_train_config_text(buf.str(), std::move(base));
}

inline std::uint64_t config_hash(const TrainConfig& cfg) {
  return hash_str(serialize_train_config(cfg));
}

// ---------------------------------------------------------------------------
// Model

struct Model {
  BaseHeadConfig head_cfg;
  ProbEmbedConfig prob_cfg;
  BaseHeadParams head;
  ProbAdapterParams adapter;
  Tensor bank_actions;  // C x D_v, frozen
  Tensor bank_bg;       // 1 x D_v, trainable

  static Model init(const TrainConfig& cfg, const TextBank& bank, std::uint64_t seed) {
    if (bank.num_classes() != cfg.num_classes)
      throw std::invalid_argument("model: config classes do not match text bank");
    if (bank.embeddings.cols() != cfg.vlp_dim)
      throw std::invalid_argument("model: config vlp_dim does not match text bank");
    Model m;
    m.head_cfg = cfg.head_config();
    m.prob_cfg = cfg.prob_config();
    Rng rng(derive_seed(seed, {11}));
    m.head = BaseHeadParams::init(m.head_cfg, rng);
    m.adapter = ProbAdapterParams::init(m.prob_cfg, rng);

    const int c = bank.num_classes(), dv = bank.embeddings.cols();
    std::vector<float> actions(static_cast<std::size_t>(c) * dv);
    std::vector<float> bg(static_cast<std::size_t>(dv));
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < dv; ++j) actions[static_cast<std::size_t>(i) * dv + j] = bank.embeddings.at(i, j);
    for (int j = 0; j < dv; ++j) bg[static_cast<std::size_t>(j)] = bank.embeddings.at(c, j);
    m.bank_actions = Tensor::from({c, dv}, std::move(actions));
    m.bank_bg = Tensor::from({1, dv}, std::move(bg), true);
    return m;
  }

  // Full bank with the trainable background row attached to the graph.
  Tensor bank() const { return concat_rows(bank_actions, bank_bg); }

  std::vector<std::pair<std::string, Tensor>> trainable() const {
    auto out = head.named();
    for (auto& p : adapter.named()) out.push_back(p);
    out.emplace_back("bank.bg", bank_bg);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Total objective

struct BatchVideo {
  Tensor rgb;   // T x D
  Tensor flow;  // T x D
  Tensor vlp;   // T x D_v
  std::vector<float> label;
};

struct LossBreakdown {
  Tensor total;
  double cls = 0, oppo = 0, norm = 0, guide = 0, vid = 0;
  double kd = 0, ortho = 0, intra = 0, inter = 0;
  double total_value = 0;
};

namespace detail {

enum RngPurpose : std::uint64_t {
  kPurposeBatch = 1,
  kPurposeSampling = 2,
  kPurposeDropout = 3,
  kPurposeInter = 4,
  kPurposePCas = 5,
};

}  // namespace detail

// L_total = L_vid + alpha L_kd + beta L_ortho + gamma (L_intra + L_inter),
// each term also reported separately. Per-video terms average over the
// batch. Randomness (dropout masks, mixture draws) derives from step_seed.
inline LossBreakdown total_loss(const Model& model, const std::vector<BatchVideo>& batch,
                                const TrainConfig& cfg, std::uint64_t step_seed) {
  const int n = static_cast<int>(batch.size());
  if (n < 1) throw std::invalid_argument("total_loss: empty batch");
  if (cfg.gamma > 0.0 && n < 2)
    throw std::invalid_argument("total_loss: inter-video loss needs a batch of at least 2");
  const DistanceMetric metric = parse_metric(cfg.metric);

  Tensor cls_sum = Tensor::scalar(0.0f);
  Tensor oppo_sum = Tensor::scalar(0.0f);
  Tensor norm_sum = Tensor::scalar(0.0f);
  Tensor guide_sum = Tensor::scalar(0.0f);
  Tensor kd_sum = Tensor::scalar(0.0f);
  Tensor intra_sum = Tensor::scalar(0.0f);
  std::vector<VideoMixture> mixtures;
  std::vector<std::vector<float>> labels;

  for (int v = 0; v < n; ++v) {
    const BatchVideo& bv = batch[static_cast<std::size_t>(v)];
    Rng dropout_rng(derive_seed(step_seed, {detail::kPurposeDropout, static_cast<std::uint64_t>(v)}));
    Rng* drop = cfg.dropout > 0.0 ? &dropout_rng : nullptr;
    HeadOutputs head = forward_base_head(bv.rgb, bv.flow, model.head, model.head_cfg, drop);

    cls_sum = add(cls_sum, loss_cls(head.pooled_base, head.pooled_supp, bv.label));
    AuxLosses aux = aux_losses(head.s_base, head.attention, cfg.topk_denominator);
    oppo_sum = add(oppo_sum, aux.oppo);
    norm_sum = add(norm_sum, aux.norm);
    guide_sum = add(guide_sum, aux.guide);

    GaussianSequence g = estimate_gaussian(head.x_fused, model.adapter, cfg.sigma_floor);
    kd_sum = add(kd_sum, loss_kd(g.mu, bv.vlp, cfg.log_eps, cfg.norm_eps));

    if (cfg.gamma > 0.0) {
      const MinedSets sets = mine_snippets(head.attention.vals(), cfg.theta_b, cfg.mask_small,
                                           cfg.mask_large, cfg.effective_k_easy());
      IntraLossConfig icfg;
      icfg.metric = metric;
      icfg.n_pair_max = cfg.n_pair_max;
      icfg.log_eps = cfg.log_eps;
      intra_sum = add(intra_sum, loss_intra(g, sets, head.attention.vals(), icfg).value);
      mixtures.push_back(video_gmm(g, head.attention));
      labels.push_back(bv.label);
    }
  }

  const double inv_n = 1.0 / n;
  Tensor cls = mul_scalar(cls_sum, inv_n);
  Tensor oppo = mul_scalar(oppo_sum, inv_n);
  Tensor norm = mul_scalar(norm_sum, inv_n);
  Tensor guide = mul_scalar(guide_sum, inv_n);
  Tensor kd = mul_scalar(kd_sum, inv_n);
  Tensor intra = mul_scalar(intra_sum, inv_n);

  VidLossWeights vw{cfg.lambda_cls, cfg.lambda_oppo, cfg.lambda_norm, cfg.lambda_guide};
  AuxLosses aux_avg{oppo, norm, guide};
  Tensor vid = loss_vid(cls, aux_avg, vw);

  Tensor ortho = loss_ortho(model.bank());

  Tensor inter = Tensor::scalar(0.0f);
  if (cfg.gamma > 0.0) {
    Rng inter_rng(derive_seed(step_seed, {detail::kPurposeInter}));
    inter = loss_inter(mixtures, similarity_map(labels), cfg.mixture_samples, inter_rng, cfg.log_eps);
  }

  LossBreakdown out;
  out.total = add(add(vid, mul_scalar(kd, cfg.alpha)),
                  add(mul_scalar(ortho, cfg.beta), mul_scalar(add(intra, inter), cfg.gamma)));
  out.cls = cls.item64();
  out.oppo = oppo.item64();
  out.norm = norm.item64();
  out.guide = guide.item64();
  out.vid = vid.item64();
  out.kd = kd.item64();
  out.ortho = ortho.item64();
  out.intra = intra.item64();
  out.inter = inter.item64();
  out.total_value = out.total.item64();
  return out;
}

// ---------------------------------------------------------------------------
// Adam

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<std::pair<std::string, Tensor>>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& [name, p] : params) {
      auto impl = p.impl();
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(impl->data.size(), 0.0);
        st.v.assign(impl->data.size(), 0.0);
      }
      const bool has_grad = impl->grad.size() == impl->data.size();
      for (std::size_t i = 0; i < impl->data.size(); ++i) {
        const double g = has_grad ? impl->grad[i] : 0.0;
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
        const double update = lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
        impl->data[i] = static_cast<float>(static_cast<double>(impl->data[i]) - update);
      }
    }
  }

  struct State {
    std::vector<double> m, v;
  };
  std::int64_t step_count() const { return t_; }
  std::map<std::string, State>& state() { return state_; }
  const std::map<std::string, State>& state() const { return state_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  TrainConfig config;
  std::uint64_t step = 0;
  Model model;
  std::map<std::string, Adam::State> adam_state;
  std::int64_t adam_steps = 0;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
  std::string s(read_u32(is), '\0');
  is.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}
inline void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.vals().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}
inline Tensor read_tensor(std::istream& is, bool requires_grad) {
  const auto nd = read_u32(is);
  std::vector<int> shape(nd);
  for (auto& d : shape) d = static_cast<int>(read_u32(is));
  std::vector<float> data(shape_numel(shape));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}
inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}
inline std::vector<double> read_doubles(std::istream& is) {
  std::vector<double> v(read_u64(is));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os.write("PTALCKP1", 8);
  detail::write_str(os, serialize_train_config(ckpt.config));
  detail::write_u64(os, config_hash(ckpt.config));
  detail::write_u64(os, ckpt.step);
  detail::write_u64(os, static_cast<std::uint64_t>(ckpt.adam_steps));

  detail::write_str(os, "bank.actions");
  detail::write_tensor(os, ckpt.model.bank_actions);

  const auto params = ckpt.model.trainable();
  detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_str(os, name);
    detail::write_tensor(os, t);
    const auto it = ckpt.adam_state.find(name);
    detail::write_doubles(os, it == ckpt.adam_state.end() ? std::vector<double>{} : it->second.m);
    detail::write_doubles(os, it == ckpt.adam_state.end() ? std::vector<double>{} : it->second.v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (std::string(magic, 8) != "PTALCKP1")
    throw std::runtime_error("not a checkpoint file: " + path.string());

  Checkpoint ckpt;
  const std::string config_text = detail::read_str(is);
  ckpt.config = parse_train_config_text(config_text);
  const std::uint64_t stored_hash = detail::read_u64(is);
  if (stored_hash != config_hash(ckpt.config))
    throw std::runtime_error("checkpoint config hash mismatch");
  ckpt.step = detail::read_u64(is);
  ckpt.adam_steps = static_cast<std::int64_t>(detail::read_u64(is));

  ckpt.model.head_cfg = ckpt.config.head_config();
  ckpt.model.prob_cfg = ckpt.config.prob_config();
  if (detail::read_str(is) != "bank.actions")
    throw std::runtime_error("checkpoint layout error");
  ckpt.model.bank_actions = detail::read_tensor(is, false);

  const auto count = detail::read_u32(is);
  std::map<std::string, Tensor> by_name;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = detail::read_str(is);
    Tensor t = detail::read_tensor(is, true);
    auto m = detail::read_doubles(is);
    auto v = detail::read_doubles(is);
    if (!m.empty()) ckpt.adam_state[name] = {std::move(m), std::move(v)};
    by_name.emplace(name, std::move(t));
  }
  auto take = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint missing tensor: " + name);
    return it->second;
  };
  Model& m = ckpt.model;
  m.head.fuse_w1 = take("base.fuse_w1");
  m.head.fuse_b1 = take("base.fuse_b1");
  m.head.fuse_w2 = take("base.fuse_w2");
  m.head.fuse_b2 = take("base.fuse_b2");
  m.head.attn_w1 = take("base.attn_w1");
  m.head.attn_b1 = take("base.attn_b1");
  m.head.attn_w2 = take("base.attn_w2");
  m.head.attn_b2 = take("base.attn_b2");
  m.head.cls_w = take("base.cls_w");
  m.head.cls_b = take("base.cls_b");
  m.adapter.mu_w = take("prob.mu_w");
  m.adapter.mu_b = take("prob.mu_b");
  m.adapter.sigma_w = take("prob.sigma_w");
  m.adapter.sigma_b = take("prob.sigma_b");
  m.bank_bg = take("bank.bg");
  if (!is) throw std::runtime_error("truncated checkpoint: " + path.string());
  return ckpt;
}

// ---------------------------------------------------------------------------
// Inference over a dataset

inline ProposalSet localize_dataset(const Model& model, const TrainConfig& cfg, const Dataset& ds) {
  const LocalizeConfig lcfg = cfg.localize_config();
  ProposalSet all;
  for (int v = 0; v < ds.num_videos(); ++v) {
    const SnippetFeatureBundle& bundle = ds.videos[static_cast<std::size_t>(v)];
    const SampledSnippets s = sample_snippets(bundle, cfg.t_sample, SampleMode::kInference);

    HeadOutputs head = forward_base_head(s.rgb, s.flow, model.head, model.head_cfg, nullptr);
    GaussianSequence g = estimate_gaussian(head.x_fused, model.adapter, cfg.sigma_floor);
    Rng pcas_rng(derive_seed(cfg.seed, {detail::kPurposePCas, hash_str(bundle.video_id)}));
    PCas prob = pcas(g, model.bank(), cfg.prob_config(), pcas_rng);

    Tensor fused = fuse_scores(head.s_supp, prob.scores, cfg.fusion_weight);
    ProposalSet props = generate_proposals(fused, head.attention.vals(), head.p_supp.vals(), lcfg,
                                           s.index_map, bundle.video_id);
    all.insert(all.end(), props.begin(), props.end());
  }
  return soft_nms(all, lcfg.soft_nms_sigma, lcfg.min_score);
}

// ---------------------------------------------------------------------------
// Training

struct MetricRow {
  std::uint64_t step = 0;
  LossBreakdown losses;
  bool has_eval = false;
  double eval_map_avg = 0.0;  // mean over 0.1:0.7
  double eval_map_50 = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricRow> log;
};

inline std::vector<BatchVideo> assemble_batch(const Dataset& ds, const TrainConfig& cfg,
                                              std::uint64_t step) {
  Rng batch_rng(derive_seed(cfg.seed, {detail::kPurposeBatch, step}));
  const int n = std::min(cfg.batch_size, ds.num_videos());
  std::vector<int> order(static_cast<std::size_t>(ds.num_videos()));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < n; ++i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(batch_rng.uniform_int(i, ds.num_videos() - 1))]);

  std::vector<BatchVideo> batch;
  for (int i = 0; i < n; ++i) {
    const int v = order[static_cast<std::size_t>(i)];
    Rng sample_rng(derive_seed(cfg.seed, {detail::kPurposeSampling, step, static_cast<std::uint64_t>(v)}));
    const SampledSnippets s = sample_snippets(ds.videos[static_cast<std::size_t>(v)], cfg.t_sample,
                                              SampleMode::kTrain, &sample_rng);
    batch.push_back({s.rgb, s.flow, s.vlp_image, ds.truth[static_cast<std::size_t>(v)].label});
  }
  return batch;
}

inline double eval_dataset_map(const Model& model, const TrainConfig& cfg, const Dataset& ds,
                               double* map_50 = nullptr) {
  const ProposalSet props = localize_dataset(model, cfg, ds);
  ResultsMap results;
  for (const Proposal& p : props)
    results[p.video_id].emplace_back(ds.bank.class_names.at(static_cast<std::size_t>(p.class_id)),
                                     p.score, p.start_s, p.end_s);
  GroundTruthMap gt;
  for (int v = 0; v < ds.num_videos(); ++v)
    for (const Segment& seg : ds.truth[static_cast<std::size_t>(v)].segments)
      gt[ds.videos[static_cast<std::size_t>(v)].video_id].emplace_back(
          ds.bank.class_names.at(static_cast<std::size_t>(seg.class_id)), seg.start_s, seg.end_s);
  const EvalReport report =
      evaluate_results(results, gt, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7});
  if (map_50) *map_50 = report.map_for(0.5);
  return report.averages.at("0.1:0.7");
}

// Runs (or resumes) training. Deterministic in (config, dataset): resuming
// from a checkpoint at step s produces the same final state as a single
// uninterrupted run.
inline TrainResult train(const TrainConfig& cfg, const Dataset& train_ds, const Dataset* eval_ds,
                         const Checkpoint* resume = nullptr) {
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (cfg.gamma > 0.0 && cfg.batch_size < 2)
    throw std::invalid_argument("train: inter loss needs batch_size >= 2");
  if (train_ds.bank.num_classes() != cfg.num_classes)
    throw std::invalid_argument("train: dataset classes do not match config");

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  if (resume) {
    if (config_hash(resume->config) != config_hash(cfg))
      throw std::invalid_argument("train: resume config mismatch");
    ckpt = *resume;
  } else {
    ckpt.config = cfg;
    ckpt.model = Model::init(cfg, train_ds.bank, cfg.seed);
    ckpt.step = 0;
  }

  Adam adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  adam.state() = ckpt.adam_state;
  adam.set_step_count(ckpt.adam_steps);

  const auto params = ckpt.model.trainable();
  for (std::uint64_t step = ckpt.step; step < static_cast<std::uint64_t>(cfg.steps); ++step) {
    const std::vector<BatchVideo> batch = assemble_batch(train_ds, cfg, step);
    const std::uint64_t step_seed = derive_seed(cfg.seed, {101, step});

    for (const auto& [name, p] : params) p.impl()->grad.assign(p.numel(), 0.0);

    MetricRow row;
    row.step = step + 1;
    try {
      GradientTape tape;
      row.losses = total_loss(ckpt.model, batch, cfg, step_seed);
      tape.backward(row.losses.total);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("training diverged at step " + std::to_string(step + 1) + ": " +
                               e.what());
    }
    adam.step(params);

    const bool last = step + 1 == static_cast<std::uint64_t>(cfg.steps);
    if (eval_ds && cfg.eval_every > 0 &&
        ((step + 1) % static_cast<std::uint64_t>(cfg.eval_every) == 0 || last)) {
      row.has_eval = true;
      row.eval_map_avg = eval_dataset_map(ckpt.model, cfg, *eval_ds, &row.eval_map_50);
    }
    result.log.push_back(row);
    ckpt.step = step + 1;
  }

  ckpt.adam_state = adam.state();
  ckpt.adam_steps = adam.step_count();
  return result;
}

inline void write_metric_csv(const std::vector<MetricRow>& log, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << "step,total,cls,oppo,norm,guide,vid,kd,ortho,intra,inter,eval_map_avg,eval_map_50\n";
  os << std::setprecision(10);
  for (const MetricRow& r : log) {
    os << r.step << ',' << r.losses.total_value << ',' << r.losses.cls << ',' << r.losses.oppo
       << ',' << r.losses.norm << ',' << r.losses.guide << ',' << r.losses.vid << ','
       << r.losses.kd << ',' << r.losses.ortho << ',' << r.losses.intra << ',' << r.losses.inter;
    if (r.has_eval)
      os << ',' << r.eval_map_avg << ',' << r.eval_map_50;
    else
      os << ",,";
    os << '\n';
  }
}

}  // namespace ptal
