#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ptal/evaluate.hpp"

using namespace ptal;
namespace fs = std::filesystem;

namespace {

ResultsMap one_class_results(const std::vector<std::tuple<std::string, double, double, double>>& v) {
  ResultsMap r;
  for (const auto& [vid, score, s, e] : v) r[vid].emplace_back("c", score, s, e);
  return r;
}

GroundTruthMap one_class_gt(const std::vector<std::tuple<std::string, double, double>>& v) {
  GroundTruthMap g;
  for (const auto& [vid, s, e] : v) g[vid].emplace_back("c", s, e);
  return g;
}

}  // namespace

TEST_CASE("temporal IoU basics", "[evaluate]") {
  CHECK(temporal_iou(0, 10, 5, 15) == Catch::Approx(1.0 / 3.0));
  CHECK(temporal_iou(2, 4, 2, 4) == 1.0);
  CHECK(temporal_iou(0, 1, 5, 6) == 0.0);
  CHECK_THROWS_AS(temporal_iou(3, 3, 0, 1), std::invalid_argument);
}

TEST_CASE("single exact proposal has AP 1 at any threshold", "[evaluate]") {
  const auto results = one_class_results({{"v", 0.9, 0.0, 5.0}});
  const auto gt = one_class_gt({{"v", 0.0, 5.0}});
  const EvalReport rep = evaluate_results(results, gt, {0.1, 0.5, 0.7, 1.0});
  for (double m : rep.map_at) CHECK(m == 1.0);
}

TEST_CASE("hit-then-miss gives AP 1, miss-then-hit gives AP 0.5", "[evaluate]") {
  const auto gt = one_class_gt({{"v", 0.0, 5.0}});
  const auto hit_miss = one_class_results({{"v", 0.9, 0.0, 5.0}, {"v", 0.5, 20.0, 30.0}});
  const auto miss_hit = one_class_results({{"v", 0.9, 20.0, 30.0}, {"v", 0.5, 0.0, 5.0}});
  CHECK(evaluate_results(hit_miss, gt, {0.5}).map_at[0] == Catch::Approx(1.0));
  CHECK(evaluate_results(miss_hit, gt, {0.5}).map_at[0] == Catch::Approx(0.5));
}

TEST_CASE("empty proposal list has AP 0", "[evaluate]") {
  const auto gt = one_class_gt({{"v", 0.0, 5.0}});
  CHECK(evaluate_results({}, gt, {0.5}).map_at[0] == 0.0);
}

TEST_CASE("hand-computed three-video fixture", "[evaluate]") {
  const fs::path dir = fs::temp_directory_path() / "ptal_test_fixture";
  fs::create_directories(dir);

  const nlohmann::json gt = {
      {"version", "1.0"},
      {"database",
       {{"vidA",
         {{"annotations",
           {{{"label", "jump"}, {"segment", {0.0, 10.0}}},
            {{"label", "run"}, {"segment", {20.0, 30.0}}}}}}},
        {"vidB", {{"annotations", {{{"label", "jump"}, {"segment", {5.0, 15.0}}}}}}},
        {"vidC", {{"annotations", {{{"label", "run"}, {"segment", {0.0, 8.0}}}}}}}}}};
  std::ofstream(dir / "gt.json") << gt.dump(2);

  const nlohmann::json results = {
      {"version", "1.0"},
      {"results",
       {{"vidA",
         {{{"label", "jump"}, {"score", 0.9}, {"segment", {0.0, 10.0}}},
          {{"label", "jump"}, {"score", 0.7}, {"segment", {0.0, 10.0}}},
          {{"label", "run"}, {"score", 0.6}, {"segment", {20.0, 25.0}}}}},
        {"vidB", {{{"label", "jump"}, {"score", 0.8}, {"segment", {10.0, 20.0}}}}},
        {"vidC", {{{"label", "run"}, {"score", 0.95}, {"segment", {0.0, 4.0}}}}}}}};
  std::ofstream(dir / "results.json") << results.dump(2);

  // Hand trace. jump: 2 GT. Ranked: [A 0,10 IoU 1 -> TP], [B 10,20 vs 5,15
  // IoU 5/15 = 1/3], [A dup -> FP]. AP = 1.0 while 1/3 clears the
  // threshold, else 0.5. run: 2 GT, both proposals at IoU 0.5, ranked
  // clean: AP = 1.0 up to 0.5, then 0.
  const std::vector<double> thresholds = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  const std::vector<double> expected = {1.0, 1.0, 1.0, 0.75, 0.75, 0.25, 0.25};

  const EvalReport rep = evaluate(dir / "results.json", dir / "gt.json", thresholds);
  REQUIRE(rep.map_at.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i)
    CHECK(rep.map_at[i] == Catch::Approx(expected[i]).margin(1e-12));

  CHECK(rep.averages.at("0.1:0.7") == Catch::Approx(5.0 / 7.0).margin(1e-12));
  CHECK(rep.averages.at("0.1:0.5") == Catch::Approx(0.9).margin(1e-12));
  CHECK(rep.averages.at("0.3:0.7") == Catch::Approx(0.6).margin(1e-12));
  CHECK(rep.averages.count("0.5:0.95") == 0);  // 0.75..0.95 not evaluated
}

TEST_CASE("report is invariant to video order in the files", "[evaluate]") {
  const auto gt = one_class_gt({{"v1", 0.0, 5.0}, {"v2", 1.0, 4.0}});
  ResultsMap a;
  a["v1"].emplace_back("c", 0.9, 0.0, 5.0);
  a["v2"].emplace_back("c", 0.8, 1.0, 4.0);
  ResultsMap b;
  b["v2"].emplace_back("c", 0.8, 1.0, 4.0);
  b["v1"].emplace_back("c", 0.9, 0.0, 5.0);
  const EvalReport ra = evaluate_results(a, gt);
  const EvalReport rb = evaluate_results(b, gt);
  CHECK(ra.map_at == rb.map_at);
}

TEST_CASE("mAP is non-increasing in the IoU threshold", "[evaluate]") {
  Rng rng(3);
  GroundTruthMap gt;
  ResultsMap results;
  for (int v = 0; v < 6; ++v) {
    const std::string vid = "v" + std::to_string(v);
    for (int g = 0; g < 3; ++g) {
      const double s = rng.uniform() * 40.0;
      gt[vid].emplace_back(g % 2 ? "a" : "b", s, s + 2.0 + rng.uniform() * 6.0);
    }
    for (int p = 0; p < 8; ++p) {
      const double s = rng.uniform() * 40.0;
      results[vid].emplace_back(p % 2 ? "a" : "b", rng.uniform(), s, s + 1.0 + rng.uniform() * 8.0);
    }
  }
  const EvalReport rep = evaluate_results(results, gt);
  for (std::size_t i = 1; i < rep.map_at.size(); ++i) CHECK(rep.map_at[i] <= rep.map_at[i - 1] + 1e-12);
}

TEST_CASE("duplicating proposals at lower scores never raises AP", "[evaluate]") {
  Rng rng(5);
  GroundTruthMap gt;
  ResultsMap results;
  for (int v = 0; v < 4; ++v) {
    const std::string vid = "v" + std::to_string(v);
    const double s = rng.uniform() * 10.0;
    gt[vid].emplace_back("c", s, s + 5.0);
    for (int p = 0; p < 4; ++p) {
      const double ps = rng.uniform() * 12.0;
      results[vid].emplace_back("c", 0.5 + 0.5 * rng.uniform(), ps, ps + 2.0 + rng.uniform() * 5.0);
    }
  }
  ResultsMap doubled = results;
  for (auto& [vid, entries] : doubled) {
    const auto original = entries;
    for (const auto& [label, score, s, e] : original)
      entries.emplace_back(label, score * 0.25, s, e);
  }
  const EvalReport base = evaluate_results(results, gt);
  const EvalReport dup = evaluate_results(doubled, gt);
  for (std::size_t i = 0; i < base.map_at.size(); ++i) CHECK(dup.map_at[i] <= base.map_at[i] + 1e-12);
}

TEST_CASE("evaluation is pure", "[evaluate]") {
  Rng rng(7);
  GroundTruthMap gt;
  ResultsMap results;
  for (int v = 0; v < 5; ++v) {
    const std::string vid = "v" + std::to_string(v);
    gt[vid].emplace_back("c", 1.0, 6.0);
    for (int p = 0; p < 5; ++p) {
      const double s = rng.uniform() * 8.0;
      results[vid].emplace_back("c", rng.uniform(), s, s + 3.0);
    }
  }
  const EvalReport a = evaluate_results(results, gt);
  const EvalReport b = evaluate_results(results, gt);
  CHECK(a.map_at == b.map_at);
  CHECK(a.averages == b.averages);
}

TEST_CASE("classes absent from ground truth are recorded as skipped", "[evaluate]") {
  const auto gt = one_class_gt({{"v", 0.0, 5.0}});
  ResultsMap results;
  results["v"].emplace_back("c", 0.9, 0.0, 5.0);
  results["v"].emplace_back("ghost", 0.8, 1.0, 2.0);
  const EvalReport rep = evaluate_results(results, gt, {0.5});
  CHECK(rep.map_at[0] == 1.0);
  REQUIRE(rep.skipped_classes.size() == 1);
  CHECK(rep.skipped_classes[0] == "ghost");
}
