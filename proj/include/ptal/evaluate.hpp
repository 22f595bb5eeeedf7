#pragma once

// mAP@IoU evaluation for temporal proposals. Per class, proposals are
// ranked by score and matched greedily to at most one ground-truth segment
// each; AP is the delta-recall weighted precision sum (no 11-point
// interpolation). mAP at a threshold averages AP over the classes that
// have ground truth; classes without ground truth are recorded as skipped.

#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptal/features.hpp"
#include "ptal/localize.hpp"

namespace ptal {

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<double> map_at;  // parallel to thresholds
  std::map<std::string, double> averages;
  std::vector<std::string> skipped_classes;

  double map_for(double thr) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::abs(thresholds[i] - thr) < 1e-9) return map_at[i];
    throw std::invalid_argument("map_for: threshold not evaluated");
  }

  nlohmann::json to_json() const {
    nlohmann::json per;
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      std::ostringstream key;
      key << std::setprecision(2) << std::fixed << thresholds[i];
      per[key.str()] = map_at[i];
    }
    return {{"mAP", per}, {"averages", averages}, {"skipped_classes", skipped_classes}};
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "  IoU    mAP\n";
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      os << "  " << std::setw(4) << std::setprecision(2) << thresholds[i] << "  "
         << std::setprecision(4) << map_at[i] << "\n";
    for (const auto& [name, v] : averages) os << "  avg " << name << "  " << v << "\n";
    return os.str();
  }
};

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 7; ++i) t.push_back(i / 10.0);
  for (int i = 11; i <= 19; ++i) t.push_back(i / 20.0);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end(), [](double a, double b) { return std::abs(a - b) < 1e-9; }),
          t.end());
  return t;
}

namespace detail {

struct RankedProposal {
  std::string video_id;
  double start = 0.0, end = 0.0, score = 0.0;
};

// AP for a single class at one IoU threshold. gts maps video id to that
// class's ground-truth segments.
inline double class_average_precision(
    std::vector<RankedProposal> proposals,
    const std::map<std::string, std::vector<std::pair<double, double>>>& gts, double iou_thr) {
  std::size_t npos = 0;
  for (const auto& [vid, segs] : gts) npos += segs.size();
  if (npos == 0) throw std::logic_error("class_average_precision: no ground truth");
  if (proposals.empty()) return 0.0;

  std::sort(proposals.begin(), proposals.end(), [](const RankedProposal& a, const RankedProposal& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.video_id != b.video_id) return a.video_id < b.video_id;
    if (a.start != b.start) return a.start < b.start;
    return a.end < b.end;
  });

  std::map<std::string, std::vector<bool>> matched;
  for (const auto& [vid, segs] : gts) matched[vid].assign(segs.size(), false);

  double ap = 0.0;
  std::size_t tp = 0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < proposals.size(); ++k) {
    const RankedProposal& p = proposals[k];
    bool hit = false;
    auto it = gts.find(p.video_id);
    if (it != gts.end()) {
      // Candidates ordered by IoU; take the best unmatched one above the
      // threshold.
      std::vector<std::pair<double, std::size_t>> by_iou;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        const auto& [gs, ge] = it->second[g];
        by_iou.emplace_back(temporal_iou(p.start, p.end, gs, ge), g);
      }
      std::sort(by_iou.begin(), by_iou.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (const auto& [iou, g] : by_iou) {
        if (iou < iou_thr) break;
        if (!matched[p.video_id][g]) {
          matched[p.video_id][g] = true;
          hit = true;
          break;
        }
      }
    }
    if (hit) {
      ++tp;
      const double recall = static_cast<double>(tp) / static_cast<double>(npos);
      const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
      ap += (recall - prev_recall) * precision;
      prev_recall = recall;
    }
  }
  return ap;
}

}  // namespace detail

// Evaluates parsed results against parsed ground truth.
inline EvalReport evaluate_results(const ResultsMap& results, const GroundTruthMap& gt,
                                   std::vector<double> thresholds = default_iou_thresholds()) {
  // Regroup by class label.
  std::set<std::string> classes;
  std::map<std::string, std::map<std::string, std::vector<std::pair<double, double>>>> gt_by_class;
  for (const auto& [vid, anns] : gt)
    for (const auto& [label, s, e] : anns) {
      classes.insert(label);
      gt_by_class[label][vid].emplace_back(s, e);
    }

  std::map<std::string, std::vector<detail::RankedProposal>> props_by_class;
  std::set<std::string> result_classes;
  for (const auto& [vid, entries] : results)
    for (const auto& [label, score, s, e] : entries) {
      result_classes.insert(label);
      props_by_class[label].push_back({vid, s, e, score});
    }

  EvalReport report;
  report.thresholds = std::move(thresholds);
  for (const std::string& label : result_classes)
    if (!classes.count(label)) report.skipped_classes.push_back(label);

  for (double thr : report.thresholds) {
    double sum = 0.0;
    for (const std::string& label : classes) {
      auto it = props_by_class.find(label);
      std::vector<detail::RankedProposal> props =
          it == props_by_class.end() ? std::vector<detail::RankedProposal>{} : it->second;
      sum += detail::class_average_precision(std::move(props), gt_by_class[label], thr);
    }
    report.map_at.push_back(classes.empty() ? 0.0 : sum / static_cast<double>(classes.size()));
  }

  // Average bands, emitted only when every member threshold was evaluated.
  const std::vector<std::tuple<std::string, double, double, double>> bands = {
      {"0.1:0.7", 0.1, 0.7, 0.1},
      {"0.1:0.5", 0.1, 0.5, 0.1},
      {"0.3:0.7", 0.3, 0.7, 0.1},
      {"0.5:0.95", 0.5, 0.95, 0.05}};
  for (const auto& [name, lo, hi, step] : bands) {
    double sum = 0.0;
    int n = 0;
    bool complete = true;
    for (double thr = lo; thr <= hi + 1e-9; thr += step) {
      bool found = false;
      for (std::size_t i = 0; i < report.thresholds.size(); ++i)
        if (std::abs(report.thresholds[i] - thr) < 1e-9) {
          sum += report.map_at[i];
          ++n;
          found = true;
          break;
        }
      complete = complete && found;
    }
    if (complete && n > 0) report.averages[name] = sum / n;
  }
  return report;
}

// File-based entry point matching the CLI.
inline EvalReport evaluate(const std::filesystem::path& results_path,
                           const std::filesystem::path& gt_path,
                           std::vector<double> thresholds = default_iou_thresholds()) {
  return evaluate_results(load_results(results_path), load_ground_truth_json(gt_path),
                          std::move(thresholds));
}

}  // namespace ptal
