#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ptal/localize.hpp"

using namespace ptal;
namespace fs = std::filesystem;

namespace {

IndexMap identity_map(int t_len, double fps = 25.0, int snippet_len = 16) {
  IndexMap m;
  m.raw.resize(static_cast<std::size_t>(t_len));
  std::iota(m.raw.begin(), m.raw.end(), 0);
  m.fps = fps;
  m.snippet_len = snippet_len;
  m.duration_s = t_len * snippet_len / fps;
  return m;
}

}  // namespace

TEST_CASE("fused scores reduce to either side at w extremes and rows sum to 1", "[localize]") {
  Rng rng(5);
  Tensor supp = Tensor::randn({6, 4}, rng);
  Tensor prob = Tensor::randn({6, 4}, rng);
  Tensor only_supp = fuse_scores(supp, prob, 1.0);
  Tensor only_prob = fuse_scores(supp, prob, 0.0);
  Tensor blend = fuse_scores(supp, prob, 0.35);
  Tensor norm_supp = softmax(supp, 1);
  Tensor norm_prob = softmax(prob, 1);
  for (int t = 0; t < 6; ++t) {
    double row = 0.0;
    for (int c = 0; c < 4; ++c) {
      CHECK(only_supp.at(t, c) == Catch::Approx(norm_supp.at(t, c)).margin(1e-7));
      CHECK(only_prob.at(t, c) == Catch::Approx(norm_prob.at(t, c)).margin(1e-7));
      row += blend.at(t, c);
    }
    CHECK(row == Catch::Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("zero actionness yields no proposals", "[localize]") {
  Tensor s = Tensor::full({8, 3}, 0.5f);
  std::vector<float> a(8, 0.0f);
  std::vector<float> p_supp = {0.9f, 0.05f, 0.05f};
  LocalizeConfig cfg;
  CHECK(generate_proposals(s, a, p_supp, cfg, identity_map(8), "v").empty());
}

TEST_CASE("a single clean run produces one deduplicated proposal", "[localize]") {
  const int t_len = 12;
  Tensor s = Tensor::zeros({t_len, 2});
  std::vector<float> a(t_len, 0.0f);
  for (int t = 3; t <= 7; ++t) {
    a[static_cast<std::size_t>(t)] = 0.95f;
    s.at(t, 0) = 1.0f;
  }
  std::vector<float> p_supp = {0.8f, 0.2f};
  LocalizeConfig cfg;
  const ProposalSet props = generate_proposals(s, a, p_supp, cfg, identity_map(t_len), "v");
  REQUIRE(props.size() == 1);
  CHECK(props[0].class_id == 0);
  CHECK(props[0].start_s == Catch::Approx(3 * 16 / 25.0));
  CHECK(props[0].end_s == Catch::Approx(8 * 16 / 25.0));
  CHECK(props[0].start_s >= 0.0);
  CHECK(props[0].end_s <= identity_map(t_len).duration_s + 1e-9);
}

TEST_CASE("runs shrink monotonically as the threshold rises", "[localize]") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int t_len = 16;
    Tensor s = Tensor::randn({t_len, 2}, rng);
    std::vector<float> a(static_cast<std::size_t>(t_len));
    for (auto& v : a) v = static_cast<float>(rng.uniform());
    const std::vector<int> selected = {0};
    const double lo = 0.3, hi = 0.6;
    const auto runs_lo = detail::runs_at_threshold(s, a, selected, 0, lo);
    const auto runs_hi = detail::runs_at_threshold(s, a, selected, 0, hi);
    for (const auto& rh : runs_hi) {
      bool contained = false;
      for (const auto& rl : runs_lo)
        contained = contained || (rl.begin <= rh.begin && rh.end <= rl.end);
      CHECK(contained);
    }
  }
}

TEST_CASE("soft-NMS leaves a single proposal untouched", "[localize]") {
  ProposalSet props = {{"v", 0, 1.0, 2.0, 0.7}};
  const ProposalSet out = soft_nms(props, 0.3);
  REQUIRE(out.size() == 1);
  CHECK(out[0].score == 0.7);
}

TEST_CASE("soft-NMS decays an identical segment by exp(-iou^2/sigma)", "[localize]") {
  ProposalSet props = {{"v", 0, 1.0, 2.0, 0.9}, {"v", 0, 1.0, 2.0, 0.8}};
  const ProposalSet out = soft_nms(props, 0.3);
  REQUIRE(out.size() == 2);
  CHECK(out[0].score == Catch::Approx(0.9));
  CHECK(out[1].score == Catch::Approx(0.8 * std::exp(-1.0 / 0.3)).margin(1e-12));
}

TEST_CASE("soft-NMS does not touch disjoint proposals", "[localize]") {
  ProposalSet props = {{"v", 0, 1.0, 2.0, 0.9}, {"v", 0, 5.0, 6.0, 0.8}};
  const ProposalSet out = soft_nms(props, 0.3);
  REQUIRE(out.size() == 2);
  CHECK(out[0].score == 0.9);
  CHECK(out[1].score == 0.8);
}

TEST_CASE("soft-NMS never raises scores or moves boundaries", "[localize]") {
  Rng rng(23);
  ProposalSet props;
  for (int i = 0; i < 40; ++i) {
    const double start = rng.uniform() * 50.0;
    props.push_back({"v", static_cast<int>(rng.uniform_int(0, 1)), start,
                     start + 0.5 + rng.uniform() * 10.0, 0.05 + rng.uniform()});
  }
  const ProposalSet out = soft_nms(props, 0.3);
  for (const Proposal& q : out) {
    bool found = false;
    for (const Proposal& p : props)
      if (p.start_s == q.start_s && p.end_s == q.end_s && p.class_id == q.class_id) {
        found = true;
        CHECK(q.score <= p.score + 1e-12);
      }
    CHECK(found);
  }
}

TEST_CASE("results file round-trips and serializes empty sets", "[localize]") {
  const fs::path dir = fs::temp_directory_path() / "ptal_test_results";
  fs::create_directories(dir);

  write_results({}, {"a", "b"}, dir / "empty.json");
  {
    std::ifstream is(dir / "empty.json");
    nlohmann::json j = nlohmann::json::parse(is);
    CHECK(j.at("results").is_object());
    CHECK(j.at("results").empty());
  }

  ProposalSet props = {{"v2", 1, 0.123456789, 7.25, 0.0313725490196},
                       {"v1", 0, 1.0, 2.0, 0.5},
                       {"v1", 1, 3.0, 4.5, 0.75}};
  write_results(props, {"a", "b"}, dir / "round.json");
  const ResultsMap back = load_results(dir / "round.json");
  REQUIRE(back.size() == 2);
  REQUIRE(back.at("v1").size() == 2);
  // ordering within a video is by descending score
  CHECK(std::get<0>(back.at("v1")[0]) == "b");
  CHECK(std::get<1>(back.at("v1")[0]) == 0.75);
  CHECK(std::get<0>(back.at("v2")[0]) == "b");
  CHECK(std::get<1>(back.at("v2")[0]) == 0.0313725490196);
  CHECK(std::get<2>(back.at("v2")[0]) == 0.123456789);
  CHECK(std::get<3>(back.at("v2")[0]) == 7.25);
}
