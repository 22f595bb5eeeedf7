#pragma once

// Snippet feature ingestion and synthesis.
//
// On-disk layout of a dataset directory:
//   manifest.json   {"dim", "vlp_dim", "classes", "videos": [{"id",
//                    "num_snippets", "fps", "duration_s", "rgb", "flow",
//                    "vlp"}]} ; feature paths are relative to the manifest
//   <video>_*.f32   row-major little-endian float32 [num_snippets x dim]
//   textbank.f32    row-major little-endian float32 [(C+1) x vlp_dim]
//   gt.json         {"version": "1.0", "database": {video_id:
//                    {"annotations": [{"label", "segment": [s, e]}]}}}

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptal/rng.hpp"
#include "ptal/tensor.hpp"

namespace ptal {

struct SnippetFeatureBundle {
  std::string video_id;
  Tensor rgb;        // T_raw x D
  Tensor flow;       // T_raw x D
  Tensor vlp_image;  // T_raw x D_v
  double fps = 25.0;
  double duration_s = 0.0;
  int snippet_len = 16;

  int num_snippets() const { return rgb.rows(); }
};

struct TextBank {
  Tensor embeddings;  // (C+1) x D_v; row C is the background row
  std::vector<std::string> class_names;
  bool background_row_trainable = true;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

struct Segment {
  int class_id = -1;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct VideoGroundTruth {
  std::vector<Segment> segments;
  std::vector<float> label;  // multi-hot over C classes
};

struct Dataset {
  std::vector<SnippetFeatureBundle> videos;
  std::vector<VideoGroundTruth> truth;  // parallel to videos
  TextBank bank;
  int dim = 0;
  int vlp_dim = 0;

  int num_videos() const { return static_cast<int>(videos.size()); }
};

// ---------------------------------------------------------------------------
// Raw float32 files

inline void write_f32_file(const std::filesystem::path& path, const std::vector<float>& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path,
                                        std::size_t expected_count) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != expected_count * sizeof(float))
    throw std::runtime_error("shape mismatch: " + path.string() + " holds " +
                             std::to_string(bytes) + " bytes, expected " +
                             std::to_string(expected_count * sizeof(float)));
  std::vector<float> data(expected_count);
  is.seekg(0);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw std::runtime_error("read failed: " + path.string());
  return data;
}

// ---------------------------------------------------------------------------
// Ground truth JSON

inline nlohmann::json ground_truth_to_json(const Dataset& ds) {
  nlohmann::json db = nlohmann::json::object();
  for (int v = 0; v < ds.num_videos(); ++v) {
    nlohmann::json anns = nlohmann::json::array();
    for (const Segment& seg : ds.truth[static_cast<std::size_t>(v)].segments)
      anns.push_back({{"label", ds.bank.class_names[static_cast<std::size_t>(seg.class_id)]},
                      {"segment", {seg.start_s, seg.end_s}}});
    db[ds.videos[static_cast<std::size_t>(v)].video_id] = {{"annotations", anns}};
  }
  return {{"version", "1.0"}, {"database", db}};
}

// video_id -> list of (label, start, end), ordered by video id.
using GroundTruthMap = std::map<std::string, std::vector<std::tuple<std::string, double, double>>>;

inline GroundTruthMap load_ground_truth_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  nlohmann::json j = nlohmann::json::parse(is);
  GroundTruthMap gt;
  for (const auto& [vid, entry] : j.at("database").items()) {
    auto& list = gt[vid];
    for (const auto& ann : entry.at("annotations")) {
      const auto& seg = ann.at("segment");
      list.emplace_back(ann.at("label").get<std::string>(), seg.at(0).get<double>(),
                        seg.at(1).get<double>());
    }
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Dataset write / load

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json videos = nlohmann::json::array();
  for (const SnippetFeatureBundle& b : ds.videos) {
    const std::string rgb_name = b.video_id + "_rgb.f32";
    const std::string flow_name = b.video_id + "_flow.f32";
    const std::string vlp_name = b.video_id + "_vlp.f32";
    write_f32_file(dir / rgb_name, b.rgb.vals());
    write_f32_file(dir / flow_name, b.flow.vals());
    write_f32_file(dir / vlp_name, b.vlp_image.vals());
    videos.push_back({{"id", b.video_id},
                      {"num_snippets", b.num_snippets()},
                      {"fps", b.fps},
                      {"duration_s", b.duration_s},
                      {"rgb", rgb_name},
                      {"flow", flow_name},
                      {"vlp", vlp_name}});
  }
  nlohmann::json manifest = {{"dim", ds.dim},
                             {"vlp_dim", ds.vlp_dim},
                             {"classes", ds.bank.class_names},
                             {"videos", videos}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  write_f32_file(dir / "textbank.f32", ds.bank.embeddings.vals());
  std::ofstream(dir / "gt.json") << ground_truth_to_json(ds).dump(2) << "\n";
}

namespace detail {

inline void validate_bundle(const SnippetFeatureBundle& b, int dim, int vlp_dim) {
  if (b.rgb.rows() != b.flow.rows())
    throw std::runtime_error(b.video_id + ": rgb/flow row count mismatch");
  if (b.rgb.cols() != dim || b.flow.cols() != dim || b.vlp_image.cols() != vlp_dim)
    throw std::runtime_error(b.video_id + ": feature dimension mismatch");
  if (b.vlp_image.rows() != b.rgb.rows())
    throw std::runtime_error(b.video_id + ": vlp row count mismatch");
  for (float v : b.rgb.vals())
    if (!std::isfinite(v)) throw std::runtime_error(b.video_id + ": non-finite rgb feature");
  for (float v : b.flow.vals())
    if (!std::isfinite(v)) throw std::runtime_error(b.video_id + ": non-finite flow feature");
  for (float v : b.vlp_image.vals())
    if (!std::isfinite(v)) throw std::runtime_error(b.video_id + ": non-finite vlp feature");
  const double snippet_s = b.snippet_len / b.fps;
  const double expect = b.num_snippets() * snippet_s;
  if (std::abs(b.duration_s - expect) > snippet_s + 1e-9)
    throw std::runtime_error(b.video_id + ": duration inconsistent with snippet count");
}

inline void validate_bank(const TextBank& bank) {
  const int c = bank.num_classes();
  if (bank.embeddings.rows() != c + 1)
    throw std::runtime_error("text bank must have C+1 rows");
  for (int i = 0; i < c; ++i) {
    double norm = 0.0;
    for (int j = 0; j < bank.embeddings.cols(); ++j)
      norm += static_cast<double>(bank.embeddings.at(i, j)) * bank.embeddings.at(i, j);
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-3)
      throw std::runtime_error("text bank action row " + std::to_string(i) + " is not unit-norm");
  }
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const std::filesystem::path dir = manifest_path.parent_path();
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open: " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(is);

  Dataset ds;
  ds.dim = manifest.at("dim").get<int>();
  ds.vlp_dim = manifest.at("vlp_dim").get<int>();
  ds.bank.class_names = manifest.at("classes").get<std::vector<std::string>>();
  const int c = ds.bank.num_classes();

  ds.bank.embeddings = Tensor::from(
      {c + 1, ds.vlp_dim},
      read_f32_file(dir / "textbank.f32", static_cast<std::size_t>(c + 1) * ds.vlp_dim));
  detail::validate_bank(ds.bank);

  for (const auto& v : manifest.at("videos")) {
    SnippetFeatureBundle b;
    b.video_id = v.at("id").get<std::string>();
    const int t_raw = v.at("num_snippets").get<int>();
    b.fps = v.at("fps").get<double>();
    b.duration_s = v.at("duration_s").get<double>();
    const auto n = static_cast<std::size_t>(t_raw);
    b.rgb = Tensor::from({t_raw, ds.dim},
                         read_f32_file(dir / v.at("rgb").get<std::string>(), n * ds.dim));
    b.flow = Tensor::from({t_raw, ds.dim},
                          read_f32_file(dir / v.at("flow").get<std::string>(), n * ds.dim));
    b.vlp_image = Tensor::from({t_raw, ds.vlp_dim},
                               read_f32_file(dir / v.at("vlp").get<std::string>(), n * ds.vlp_dim));
    detail::validate_bundle(b, ds.dim, ds.vlp_dim);
    ds.videos.push_back(std::move(b));
  }

  // Video-level labels and segments come from gt.json when present.
  ds.truth.assign(ds.videos.size(), VideoGroundTruth{});
  for (auto& t : ds.truth) t.label.assign(static_cast<std::size_t>(c), 0.0f);
  const std::filesystem::path gt_path = dir / "gt.json";
  if (std::filesystem::exists(gt_path)) {
    GroundTruthMap gt = load_ground_truth_json(gt_path);
    for (std::size_t v = 0; v < ds.videos.size(); ++v) {
      auto it = gt.find(ds.videos[v].video_id);
      if (it == gt.end()) continue;
      for (const auto& [label, start, end] : it->second) {
        const auto ci = std::find(ds.bank.class_names.begin(), ds.bank.class_names.end(), label);
        if (ci == ds.bank.class_names.end())
          throw std::runtime_error("ground truth references unknown class: " + label);
        const int class_id = static_cast<int>(ci - ds.bank.class_names.begin());
        if (!(start < end) || end > ds.videos[v].duration_s + 1e-6)
          throw std::runtime_error(ds.videos[v].video_id + ": invalid ground-truth segment");
        ds.truth[v].segments.push_back({class_id, start, end});
        ds.truth[v].label[static_cast<std::size_t>(class_id)] = 1.0f;
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic datasets
//
// Action snippets are a class prototype plus Gaussian noise; background
// snippets use a dedicated background prototype. Flow carries the same
// prototypes with independent noise, and the VLP image rows follow
// per-class VLP-space prototypes. The text bank holds exactly those VLP
// prototypes for the action rows; the background row is an unrelated
// random unit vector, mirroring a randomly initialized learnable row.

struct SynthConfig {
  int classes = 4;
  int dim = 16;
  int vlp_dim = 16;
  int videos = 20;
  int min_snippets = 64;
  int max_snippets = 96;
  int min_segments = 1;
  int max_segments = 3;
  double min_segment_frac = 0.08;
  double max_segment_frac = 0.25;
  double feature_noise = 0.15;
  double vlp_noise = 0.10;
  double fps = 25.0;
  int snippet_len = 16;
  int max_classes_per_video = 2;
  std::string id_prefix = "video";
};

namespace detail {

inline std::vector<float> unit_vector(int dim, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    norm += static_cast<double>(x) * x;
  }
  norm = std::sqrt(std::max(norm, 1e-12));
  for (auto& x : v) x = static_cast<float>(x / norm);
  return v;
}

}  // namespace detail

inline Dataset synthesize_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.classes < 1 || cfg.dim < 1 || cfg.vlp_dim < 1 || cfg.videos < 1 ||
      cfg.min_snippets < 1 || cfg.max_snippets < cfg.min_snippets)
    throw std::invalid_argument("synthesize_dataset: invalid config");

  Rng proto_rng(derive_seed(seed, {0}));
  std::vector<std::vector<float>> feat_protos, vlp_protos;
  for (int c = 0; c <= cfg.classes; ++c) {  // index classes = background prototype
    feat_protos.push_back(detail::unit_vector(cfg.dim, proto_rng));
    vlp_protos.push_back(detail::unit_vector(cfg.vlp_dim, proto_rng));
  }

  Dataset ds;
  ds.dim = cfg.dim;
  ds.vlp_dim = cfg.vlp_dim;
  for (int c = 0; c < cfg.classes; ++c) ds.bank.class_names.push_back("class_" + std::to_string(c));

  std::vector<float> bank(static_cast<std::size_t>(cfg.classes + 1) * cfg.vlp_dim);
  for (int c = 0; c < cfg.classes; ++c)
    std::copy(vlp_protos[static_cast<std::size_t>(c)].begin(),
              vlp_protos[static_cast<std::size_t>(c)].end(),
              bank.begin() + static_cast<std::size_t>(c) * cfg.vlp_dim);
  // Background text row: random, deliberately not the background prototype.
  Rng bg_rng(derive_seed(seed, {1}));
  const auto bg_row = detail::unit_vector(cfg.vlp_dim, bg_rng);
  std::copy(bg_row.begin(), bg_row.end(),
            bank.begin() + static_cast<std::size_t>(cfg.classes) * cfg.vlp_dim);
  ds.bank.embeddings = Tensor::from({cfg.classes + 1, cfg.vlp_dim}, std::move(bank));

  for (int v = 0; v < cfg.videos; ++v) {
    Rng rng(derive_seed(seed, {2, static_cast<std::uint64_t>(v)}));
    const int t_raw = static_cast<int>(rng.uniform_int(cfg.min_snippets, cfg.max_snippets));

    const int max_cls = std::min(cfg.max_classes_per_video, cfg.classes);
    const int n_cls = static_cast<int>(rng.uniform_int(1, max_cls));
    std::vector<int> pool(static_cast<std::size_t>(cfg.classes));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < n_cls; ++i)
      std::swap(pool[static_cast<std::size_t>(i)],
                pool[static_cast<std::size_t>(rng.uniform_int(i, cfg.classes - 1))]);
    pool.resize(static_cast<std::size_t>(n_cls));

    const int n_seg = static_cast<int>(rng.uniform_int(cfg.min_segments, cfg.max_segments));
    std::vector<int> seg_len(static_cast<std::size_t>(n_seg));
    int total = 0;
    for (auto& l : seg_len) {
      const double frac =
          cfg.min_segment_frac + rng.uniform() * (cfg.max_segment_frac - cfg.min_segment_frac);
      l = std::max(1, static_cast<int>(frac * t_raw));
      total += l;
    }
    if (total > t_raw)
      throw std::invalid_argument("synthesize_dataset: segments exceed video length");

    // Distribute the leftover snippets into n_seg+1 gaps.
    std::vector<double> cuts(static_cast<std::size_t>(n_seg));
    for (auto& c : cuts) c = rng.uniform();
    std::sort(cuts.begin(), cuts.end());
    const int free_len = t_raw - total;
    std::vector<int> gaps(static_cast<std::size_t>(n_seg) + 1, 0);
    int used = 0;
    for (int g = 0; g < n_seg; ++g) {
      gaps[static_cast<std::size_t>(g)] = static_cast<int>(cuts[static_cast<std::size_t>(g)] * free_len) - used;
      used += gaps[static_cast<std::size_t>(g)];
    }
    gaps[static_cast<std::size_t>(n_seg)] = free_len - used;

    std::vector<int> snippet_class(static_cast<std::size_t>(t_raw), cfg.classes);  // background
    VideoGroundTruth truth;
    truth.label.assign(static_cast<std::size_t>(cfg.classes), 0.0f);
    int cursor = 0;
    const double snippet_s = cfg.snippet_len / cfg.fps;
    for (int s = 0; s < n_seg; ++s) {
      cursor += gaps[static_cast<std::size_t>(s)];
      const int cls = pool[static_cast<std::size_t>(rng.uniform_int(0, n_cls - 1))];
      const int len = seg_len[static_cast<std::size_t>(s)];
      for (int t = cursor; t < cursor + len; ++t) snippet_class[static_cast<std::size_t>(t)] = cls;
      truth.segments.push_back({cls, cursor * snippet_s, (cursor + len) * snippet_s});
      truth.label[static_cast<std::size_t>(cls)] = 1.0f;
      cursor += len;
    }

    SnippetFeatureBundle b;
    b.video_id = cfg.id_prefix + "_" + std::to_string(v);
    b.fps = cfg.fps;
    b.snippet_len = cfg.snippet_len;
    b.duration_s = t_raw * snippet_s;
    std::vector<float> rgb(static_cast<std::size_t>(t_raw) * cfg.dim);
    std::vector<float> flow(static_cast<std::size_t>(t_raw) * cfg.dim);
    std::vector<float> vlp(static_cast<std::size_t>(t_raw) * cfg.vlp_dim);
    for (int t = 0; t < t_raw; ++t) {
      const auto cls = static_cast<std::size_t>(snippet_class[static_cast<std::size_t>(t)]);
      for (int j = 0; j < cfg.dim; ++j) {
        rgb[static_cast<std::size_t>(t) * cfg.dim + j] = static_cast<float>(
            feat_protos[cls][static_cast<std::size_t>(j)] + rng.normal() * cfg.feature_noise);
        flow[static_cast<std::size_t>(t) * cfg.dim + j] = static_cast<float>(
            feat_protos[cls][static_cast<std::size_t>(j)] + rng.normal() * cfg.feature_noise);
      }
      for (int j = 0; j < cfg.vlp_dim; ++j)
        vlp[static_cast<std::size_t>(t) * cfg.vlp_dim + j] = static_cast<float>(
            vlp_protos[cls][static_cast<std::size_t>(j)] + rng.normal() * cfg.vlp_noise);
    }
    b.rgb = Tensor::from({t_raw, cfg.dim}, std::move(rgb));
    b.flow = Tensor::from({t_raw, cfg.dim}, std::move(flow));
    b.vlp_image = Tensor::from({t_raw, cfg.vlp_dim}, std::move(vlp));
    ds.videos.push_back(std::move(b));
    ds.truth.push_back(std::move(truth));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Temporal sampling to a fixed number of snippets

struct IndexMap {
  std::vector<int> raw;  // sampled slot -> raw snippet index
  double fps = 25.0;
  int snippet_len = 16;
  double duration_s = 0.0;

  double seconds_begin(int slot) const {
    return raw[static_cast<std::size_t>(slot)] * snippet_len / fps;
  }
  double seconds_end(int slot) const {
    return (raw[static_cast<std::size_t>(slot)] + 1) * snippet_len / fps;
  }
  // Inverse of seconds_begin over raw indices.
  int raw_index_at(double seconds) const {
    return static_cast<int>(std::lround(seconds * fps / snippet_len));
  }
};

struct SampledSnippets {
  Tensor rgb;
  Tensor flow;
  Tensor vlp_image;
  IndexMap index_map;
};

enum class SampleMode { kTrain, kInference };

// Stratified temporal sampling: stratum k covers raw indices
// [floor(k*T_raw/T), floor((k+1)*T_raw/T)). Training picks uniformly inside
// each stratum, inference picks the stratum midpoint. When T_raw >= T the
// sampled indices strictly increase; shorter videos repeat indices.
inline SampledSnippets sample_snippets(const SnippetFeatureBundle& b, int t_out, SampleMode mode,
                                       Rng* rng = nullptr) {
  if (t_out < 1) throw std::invalid_argument("sample_snippets: T must be >= 1");
  const int t_raw = b.num_snippets();
  if (t_raw < 1) throw std::invalid_argument("sample_snippets: empty bundle");
  if (mode == SampleMode::kTrain && rng == nullptr)
    throw std::invalid_argument("sample_snippets: training mode needs an rng");

  std::vector<int> idx(static_cast<std::size_t>(t_out));
  for (int k = 0; k < t_out; ++k) {
    const auto lo = static_cast<int>((static_cast<std::int64_t>(k) * t_raw) / t_out);
    const auto next = static_cast<int>((static_cast<std::int64_t>(k + 1) * t_raw) / t_out);
    const int hi = std::max(lo, next - 1);
    if (mode == SampleMode::kInference) {
      idx[static_cast<std::size_t>(k)] =
          std::min(t_raw - 1, static_cast<int>(((2 * static_cast<std::int64_t>(k) + 1) * t_raw) / (2 * t_out)));
    } else {
      idx[static_cast<std::size_t>(k)] = static_cast<int>(rng->uniform_int(lo, hi));
    }
  }

  SampledSnippets out;
  out.rgb = Tensor::zeros({t_out, b.rgb.cols()});
  out.flow = Tensor::zeros({t_out, b.flow.cols()});
  out.vlp_image = Tensor::zeros({t_out, b.vlp_image.cols()});
  for (int k = 0; k < t_out; ++k) {
    const int r = idx[static_cast<std::size_t>(k)];
    for (int j = 0; j < b.rgb.cols(); ++j) out.rgb.at(k, j) = b.rgb.at(r, j);
    for (int j = 0; j < b.flow.cols(); ++j) out.flow.at(k, j) = b.flow.at(r, j);
    for (int j = 0; j < b.vlp_image.cols(); ++j) out.vlp_image.at(k, j) = b.vlp_image.at(r, j);
  }
  out.index_map.raw = std::move(idx);
  out.index_map.fps = b.fps;
  out.index_map.snippet_len = b.snippet_len;
  out.index_map.duration_s = b.duration_s;
  return out;
}

}  // namespace ptal
