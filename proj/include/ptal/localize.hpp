#pragma once

// Inference-time localization: fuse the suppressed CAS with the
// probabilistic CAS, extract class-wise temporal proposals from the
// actionness signal, score them by outer-inner contrast, and run soft
// non-maximum suppression.
//
// Results JSON: {"version": "1.0", "results": {video_id: [{"label",
// "score", "segment": [start_s, end_s]}]}}

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ptal/features.hpp"
#include "ptal/tensor.hpp"

namespace ptal {

struct Proposal {
  std::string video_id;
  int class_id = -1;
  double start_s = 0.0;
  double end_s = 0.0;
  double score = 0.0;
};

using ProposalSet = std::vector<Proposal>;

struct LocalizeConfig {
  double fusion_weight = 0.5;  // w: share of the suppressed CAS in the fused score
  std::vector<double> act_thresholds = [] {
    std::vector<double> t;
    for (int i = 0; i <= 16; ++i) t.push_back(0.1 + 0.05 * i);
    return t;
  }();
  double class_threshold = 0.2;     // video-level class selection
  double soft_nms_sigma = 0.3;
  double boundary_inflation = 0.25; // outer region size as a fraction of the run
  double min_score = 1e-4;
};

// Softmax-normalizes both score matrices along classes and blends them.
inline Tensor fuse_scores(const Tensor& s_supp, const Tensor& s_prob, double w) {
  detail::require_same_shape(s_supp, s_prob, "fuse_scores");
  if (w < 0.0 || w > 1.0) throw std::invalid_argument("fuse_scores: w must be in [0,1]");
  return add(mul_scalar(softmax(s_supp, 1), w), mul_scalar(softmax(s_prob, 1), 1.0 - w));
}

namespace detail {

struct Run {
  int begin = 0;  // inclusive snippet slot
  int end = 0;    // inclusive snippet slot
};

// Maximal consecutive runs where the actionness exceeds the threshold and
// the class is the argmax among the selected classes.
inline std::vector<Run> runs_at_threshold(const Tensor& s_final, const std::vector<float>& a,
                                          const std::vector<int>& selected, int cls, double thr) {
  const int t_len = s_final.rows();
  std::vector<Run> runs;
  int begin = -1;
  for (int t = 0; t <= t_len; ++t) {
    bool active = false;
    if (t < t_len && a[static_cast<std::size_t>(t)] > thr) {
      int best = selected.front();
      for (int c : selected)
        if (s_final.at(t, c) > s_final.at(t, best)) best = c;
      active = best == cls;
    }
    if (active && begin < 0) begin = t;
    if (!active && begin >= 0) {
      runs.push_back({begin, t - 1});
      begin = -1;
    }
  }
  return runs;
}

}  // namespace detail

// Proposal candidates for one video. p_supp selects the classes to localize;
// the per-candidate score is the inner mean of the fused score minus the
// mean over the inflated boundary region, plus the video-level confidence.
inline ProposalSet generate_proposals(const Tensor& s_final, const std::vector<float>& actionness,
                                      const std::vector<float>& p_supp, const LocalizeConfig& cfg,
                                      const IndexMap& index_map, const std::string& video_id) {
  if (s_final.ndim() != 2 || static_cast<int>(actionness.size()) != s_final.rows())
    throw std::invalid_argument("generate_proposals: shape mismatch");
  const int t_len = s_final.rows();
  const int num_classes = s_final.cols() - 1;  // last column is background

  std::vector<int> selected;
  for (int c = 0; c < num_classes; ++c)
    if (p_supp[static_cast<std::size_t>(c)] > cfg.class_threshold) selected.push_back(c);
  if (selected.empty()) return {};

  std::map<std::tuple<int, int, int>, double> best;  // (class, begin, end) -> score
  for (double thr : cfg.act_thresholds)
    for (int cls : selected)
      for (const detail::Run& run : detail::runs_at_threshold(s_final, actionness, selected, cls, thr)) {
        const int len = run.end - run.begin + 1;
        double inner = 0.0;
        for (int t = run.begin; t <= run.end; ++t) inner += static_cast<double>(s_final.at(t, cls));
        inner /= len;

        const int inflate = std::max(1, static_cast<int>(std::lround(cfg.boundary_inflation * len)));
        double outer = 0.0;
        int outer_n = 0;
        for (int t = run.begin - inflate; t < run.begin; ++t)
          if (t >= 0) {
            outer += static_cast<double>(s_final.at(t, cls));
            ++outer_n;
          }
        for (int t = run.end + 1; t <= run.end + inflate; ++t)
          if (t < t_len) {
            outer += static_cast<double>(s_final.at(t, cls));
            ++outer_n;
          }
        if (outer_n > 0) outer /= outer_n;

        const double score = inner - outer + p_supp[static_cast<std::size_t>(cls)];
        const auto key = std::make_tuple(cls, run.begin, run.end);
        auto it = best.find(key);
        if (it == best.end() || score > it->second) best[key] = score;
      }

  ProposalSet out;
  for (const auto& [key, score] : best) {
    const auto& [cls, begin, end] = key;
    Proposal p;
    p.video_id = video_id;
    p.class_id = cls;
    p.start_s = index_map.seconds_begin(begin);
    p.end_s = index_map.seconds_end(end);
    p.score = score;
    out.push_back(p);
  }
  return out;
}

inline double temporal_iou(double a0, double a1, double b0, double b1) {
  if (!(a0 < a1) || !(b0 < b1)) throw std::invalid_argument("temporal_iou: zero-length segment");
  const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
  const double uni = (a1 - a0) + (b1 - b0) - inter;
  return inter / uni;
}

// Soft non-maximum suppression. Scores of overlapping same-class proposals
// decay by exp(-iou^2 / sigma); boundaries never change and scores never
// increase. Proposals below min_score are dropped from the final set.
inline ProposalSet soft_nms(ProposalSet proposals, double sigma, double min_score = 1e-4) {
  if (sigma <= 0.0) throw std::invalid_argument("soft_nms: sigma must be positive");
  ProposalSet out;
  std::vector<bool> taken(proposals.size(), false);
  for (std::size_t round = 0; round < proposals.size(); ++round) {
    int pick = -1;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (taken[i]) continue;
      if (pick < 0 || proposals[i].score > proposals[static_cast<std::size_t>(pick)].score)
        pick = static_cast<int>(i);
    }
    if (pick < 0) break;
    taken[static_cast<std::size_t>(pick)] = true;
    const Proposal& p = proposals[static_cast<std::size_t>(pick)];
    out.push_back(p);
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (taken[i]) continue;
      Proposal& q = proposals[i];
      if (q.video_id != p.video_id || q.class_id != p.class_id) continue;
      const double iou = temporal_iou(p.start_s, p.end_s, q.start_s, q.end_s);
      if (iou > 0.0) q.score *= std::exp(-(iou * iou) / sigma);
    }
  }
  ProposalSet kept;
  for (const Proposal& p : out)
    if (p.score >= min_score) kept.push_back(p);
  return kept;
}

// ---------------------------------------------------------------------------
// Results file

inline void write_results(const ProposalSet& proposals, const std::vector<std::string>& class_names,
                          const std::filesystem::path& path) {
  ProposalSet sorted = proposals;
  std::sort(sorted.begin(), sorted.end(), [](const Proposal& a, const Proposal& b) {
    if (a.video_id != b.video_id) return a.video_id < b.video_id;
    if (a.score != b.score) return a.score > b.score;
    if (a.start_s != b.start_s) return a.start_s < b.start_s;
    return a.class_id < b.class_id;
  });
  nlohmann::json results = nlohmann::json::object();
  for (const Proposal& p : sorted) {
    results[p.video_id].push_back(
        {{"label", class_names.at(static_cast<std::size_t>(p.class_id))},
         {"score", p.score},
         {"segment", {p.start_s, p.end_s}}});
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << nlohmann::json({{"version", "1.0"}, {"results", results}}).dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

// video_id -> list of (label, score, start, end).
using ResultsMap = std::map<std::string, std::vector<std::tuple<std::string, double, double, double>>>;

inline ResultsMap load_results(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  nlohmann::json j = nlohmann::json::parse(is);
  ResultsMap out;
  for (const auto& [vid, entries] : j.at("results").items()) {
    auto& list = out[vid];
    for (const auto& e : entries) {
      const auto& seg = e.at("segment");
      list.emplace_back(e.at("label").get<std::string>(), e.at("score").get<double>(),
                        seg.at(0).get<double>(), seg.at(1).get<double>());
    }
  }
  return out;
}

}  // namespace ptal
