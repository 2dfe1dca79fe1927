#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsp/attention.hpp"
#include "fsp/error.hpp"
#include "fsp/geom.hpp"
#include "fsp/io.hpp"
#include "fsp/matching.hpp"
#include "fsp/metrics.hpp"
#include "fsp/rgbd.hpp"
#include "fsp/synth.hpp"

namespace fsp {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------
struct EvalConfig {
  std::size_t support_k = 16;
  int patch_size = 255;
  int patch_padding = 4;
  FeatureParams features;  // n_points = 512

  std::string attention_weights;  ///< weights file; empty = seeded random init
  std::uint64_t attention_seed = 0;
  double attention_gain = 1.0;    ///< init sigma = gain / sqrt(d)

  double temperature = 0.1;
  SinkhornParams sinkhorn;        // 50 iterations, dustbin on, dustbin score 0
  double match_threshold = 0.2;
  RansacParams ransac;            // 512 iterations, 0.01 m, auto min inliers

  bool icp = false;
  IcpParams icp_params;
  std::size_t icp_max_points = 4000;

  double auc_max = 0.1;
  double auc_step = 0.001;
  double recall_fraction = 0.1;
  std::size_t min_visible_pixels = 200;
  std::size_t baseline_samples = 1000;

  std::uint64_t seed = 0;
  bool oracle_correspondences = false;
  bool oracle_pose = false;
  int threads = 1;

  void validate() const {
    if (support_k < 1) throw Error(Errc::InvalidK, "support_k must be >= 1");
    if (patch_size < 8) throw Error(Errc::InvalidParams, "patch_size too small");
    if (features.n_points < 3) throw Error(Errc::InvalidN, "n_points must be >= 3");
    if (!(temperature > 0.0)) throw Error(Errc::InvalidParams, "temperature must be positive");
    if (sinkhorn.iterations < 1) throw Error(Errc::InvalidParams, "sinkhorn iterations must be >= 1");
    if (ransac.iterations < 1 || !(ransac.inlier_threshold > 0.0))
      throw Error(Errc::InvalidParams, "invalid RANSAC parameters");
    if (!(auc_max > 0.0) || !(auc_step > 0.0)) throw Error(Errc::InvalidThreshold, "invalid AUC thresholds");
    if (!(recall_fraction > 0.0)) throw Error(Errc::InvalidThreshold, "recall fraction must be positive");
  }
};

inline nlohmann::json config_to_json(const EvalConfig& c) {
  return {
      {"support_k", c.support_k},
      {"patch_size", c.patch_size},
      {"patch_padding", c.patch_padding},
      {"features",
       {{"n_points", c.features.n_points},
        {"geometry_radius", c.features.geometry_radius},
        {"normal_neighbors", c.features.normal_neighbors},
        {"color_window", c.features.color_window},
        {"color_weight", c.features.color_weight},
        {"geometry_weight", c.features.geometry_weight}}},
      {"attention", {{"weights", c.attention_weights}, {"seed", c.attention_seed}, {"gain", c.attention_gain}}},
      {"matching",
       {{"temperature", c.temperature},
        {"sinkhorn_iterations", c.sinkhorn.iterations},
        {"dustbin", c.sinkhorn.use_dustbin},
        {"dustbin_score", c.sinkhorn.dustbin_score},
        {"anderson_memory", c.sinkhorn.anderson_memory},
        {"match_threshold", c.match_threshold}}},
      {"ransac",
       {{"iterations", c.ransac.iterations},
        {"inlier_threshold", c.ransac.inlier_threshold},
        {"min_inliers", c.ransac.min_inliers},
        {"threads", c.ransac.threads}}},
      {"icp",
       {{"enabled", c.icp},
        {"max_iterations", c.icp_params.max_iterations},
        {"convergence_eps", c.icp_params.convergence_eps},
        {"max_corr_dist", c.icp_params.max_corr_dist},
        {"max_points", c.icp_max_points}}},
      {"metrics",
       {{"auc_max", c.auc_max},
        {"auc_step", c.auc_step},
        {"recall_fraction", c.recall_fraction},
        {"min_visible_pixels", c.min_visible_pixels},
        {"baseline_samples", c.baseline_samples}}},
      {"seed", c.seed},
      {"oracle_correspondences", c.oracle_correspondences},
      {"oracle_pose", c.oracle_pose},
      {"threads", c.threads},
  };
}

/// Missing keys keep their defaults.
inline EvalConfig config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  try {
    const auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
      if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
    };
    get(j, "support_k", c.support_k);
    get(j, "patch_size", c.patch_size);
    get(j, "patch_padding", c.patch_padding);
    if (j.contains("features")) {
      const auto& f = j.at("features");
      get(f, "n_points", c.features.n_points);
      get(f, "geometry_radius", c.features.geometry_radius);
      get(f, "normal_neighbors", c.features.normal_neighbors);
      get(f, "color_window", c.features.color_window);
      get(f, "color_weight", c.features.color_weight);
      get(f, "geometry_weight", c.features.geometry_weight);
    }
    if (j.contains("attention")) {
      const auto& a = j.at("attention");
      get(a, "weights", c.attention_weights);
      get(a, "seed", c.attention_seed);
      get(a, "gain", c.attention_gain);
    }
    if (j.contains("matching")) {
      const auto& m = j.at("matching");
      get(m, "temperature", c.temperature);
      get(m, "sinkhorn_iterations", c.sinkhorn.iterations);
      get(m, "dustbin", c.sinkhorn.use_dustbin);
      get(m, "dustbin_score", c.sinkhorn.dustbin_score);
      get(m, "anderson_memory", c.sinkhorn.anderson_memory);
      get(m, "match_threshold", c.match_threshold);
    }
    if (j.contains("ransac")) {
      const auto& r = j.at("ransac");
      get(r, "iterations", c.ransac.iterations);
      get(r, "inlier_threshold", c.ransac.inlier_threshold);
      get(r, "min_inliers", c.ransac.min_inliers);
      get(r, "threads", c.ransac.threads);
    }
    if (j.contains("icp")) {
      const auto& i = j.at("icp");
      get(i, "enabled", c.icp);
      get(i, "max_iterations", c.icp_params.max_iterations);
      get(i, "convergence_eps", c.icp_params.convergence_eps);
      get(i, "max_corr_dist", c.icp_params.max_corr_dist);
      get(i, "max_points", c.icp_max_points);
    }
    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      get(m, "auc_max", c.auc_max);
      get(m, "auc_step", c.auc_step);
      get(m, "recall_fraction", c.recall_fraction);
      get(m, "min_visible_pixels", c.min_visible_pixels);
      get(m, "baseline_samples", c.baseline_samples);
    }
    get(j, "seed", c.seed);
    get(j, "oracle_correspondences", c.oracle_correspondences);
    get(j, "oracle_pose", c.oracle_pose);
    get(j, "threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::DatasetFormatError, std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline AttentionWeights weights_for(const EvalConfig& c) {
  if (!c.attention_weights.empty()) return load_weights(c.attention_weights);
  return AttentionWeights::random(c.attention_seed, kDescriptorDim, c.attention_gain);
}

// ---------------------------------------------------------------------------
// Support sets
// ---------------------------------------------------------------------------
struct SupportSet {
  std::string object_id;
  std::vector<RgbdPatch> views;      ///< each carries its pose (object -> camera)
  std::vector<std::string> sources;  ///< where each view came from, for reports

  void validate() const {
    if (views.empty()) throw Error(Errc::InvalidK, "support set is empty");
    for (const auto& v : views)
      if (!v.pose) throw Error(Errc::InvalidParams, "support view without a pose");
  }
};

struct EstimateResult {
  Pose pose;
  std::size_t chosen_view = 0;
  std::vector<double> per_view_losses;  ///< m²; +inf for failed views
  std::vector<std::size_t> match_count;
  bool refined = false;
};

namespace detail {

inline PointCloud stride_subsample(const PointCloud& cloud, std::size_t max_points) {
  if (cloud.size() <= max_points || max_points == 0) return cloud;
  PointCloud out;
  const double step = static_cast<double>(cloud.size()) / static_cast<double>(max_points);
  for (std::size_t i = 0; i < max_points; ++i)
    out.points.push_back(cloud.points[static_cast<std::size_t>(static_cast<double>(i) * step)]);
  return out;
}

struct ViewOutcome {
  std::optional<AlignmentResult> alignment;
  std::size_t matches = 0;
};

}  // namespace detail

/// Features of one support view, extracted once and reused for every query.
struct PreparedView {
  FeatureCloud features;  ///< camera frame of the view
  Pose to_object;         ///< inverse of the view's pose
};

inline std::vector<PreparedView> prepare_support(const SupportSet& support, const EvalConfig& cfg) {
  support.validate();
  std::vector<PreparedView> out;
  for (const auto& view : support.views)
    out.push_back({extract_toy_features(crop_resize(view, cfg.patch_size, cfg.patch_padding), cfg.seed, cfg.features),
                   view.pose->inverse()});
  return out;
}

namespace detail {

inline ViewOutcome estimate_from_view(const PreparedView& view, std::size_t view_index, const FeatureCloud& query_fc,
                                      const RgbdPatch& query, const EvalConfig& cfg,
                                      const AttentionWeights& weights) {
  ViewOutcome out;
  const FeatureCloud& support_fc = view.features;
  CorrespondenceSet corr;
  if (cfg.oracle_correspondences) {
    if (!query.pose) throw Error(Errc::InvalidParams, "oracle correspondences need a query ground-truth pose");
    for (const auto& s : support_fc.points) {
      const Vec3 p = view.to_object.apply(s);
      corr.add(p, query.pose->apply(p));
    }
    out.matches = corr.size();
  } else {
    const auto enhanced = enhance(support_fc, query_fc, weights);
    const auto scores = score_matrix(enhanced.prototypes, enhanced.query_features, cfg.temperature);
    const auto assignment = sinkhorn(scores, cfg.sinkhorn);
    const auto matches = extract_matches(assignment, cfg.match_threshold);
    for (const auto& m : matches)
      corr.add(view.to_object.apply(support_fc.points[m.prototype]), query_fc.points[m.query], m.confidence);
    out.matches = matches.size();
  }
  if (corr.size() < 3) return out;
  RansacParams rp = cfg.ransac;
  rp.seed = stream_seed(cfg.seed, view_index);
  try {
    out.alignment = ransac_align(corr, rp);
  } catch (const Error& e) {
    if (e.code() != Errc::NoConsensus && e.code() != Errc::InsufficientCorrespondences &&
        e.code() != Errc::DegenerateConfiguration)
      throw;
  }
  return out;
}

}  // namespace detail

/// Per-view matching and robust alignment; the view with the smallest mean
/// squared inlier residual wins. Optional ICP against the query cloud.
inline EstimateResult estimate_pose(const SupportSet& support, const std::vector<PreparedView>& prepared,
                                    const RgbdPatch& query, const EvalConfig& cfg, const AttentionWeights& weights) {
  support.validate();
  if (prepared.size() != support.views.size()) throw Error(Errc::ShapeMismatch, "prepared views do not match support");
  if (query.mask_count() == 0) throw Error(Errc::EmptyQuery, "query mask has no valid pixels");
  const RgbdPatch prepared_query = crop_resize(query, cfg.patch_size, cfg.patch_padding);
  const FeatureCloud query_fc = extract_toy_features(prepared_query, cfg.seed, cfg.features);

  const std::size_t k = support.views.size();
  std::vector<detail::ViewOutcome> outcomes(k);
  const auto run = [&](std::size_t v) {
    outcomes[v] = detail::estimate_from_view(prepared[v], v, query_fc, query, cfg, weights);
  };
  const int workers = std::clamp(cfg.threads, 1, static_cast<int>(k));
  if (workers == 1) {
    for (std::size_t v = 0; v < k; ++v) run(v);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t v = static_cast<std::size_t>(w); v < k; v += static_cast<std::size_t>(workers)) run(v);
      });
    for (auto& t : pool) t.join();
  }

  EstimateResult result;
  result.per_view_losses.assign(k, std::numeric_limits<double>::infinity());
  result.match_count.assign(k, 0);
  std::optional<std::size_t> best;
  for (std::size_t v = 0; v < k; ++v) {
    result.match_count[v] = outcomes[v].matches;
    if (!outcomes[v].alignment) continue;
    result.per_view_losses[v] = outcomes[v].alignment->residual;
    if (!best || result.per_view_losses[v] < result.per_view_losses[*best]) best = v;
  }
  if (!best) throw Error(Errc::PoseEstimationFailed, "no support view produced a consensus pose");
  result.chosen_view = *best;
  result.pose = outcomes[*best].alignment->pose;

  if (cfg.icp) {
    // Query points onto every support view merged in the object frame. A
    // single support view rarely covers what the query sees, and partial to
    // partial ICP slides.
    PointCloud model;
    for (std::size_t v = 0; v < k; ++v) {
      const auto part = transform_points(backproject(support.views[v]).cloud, prepared[v].to_object);
      model.points.insert(model.points.end(), part.points.begin(), part.points.end());
    }
    model = detail::stride_subsample(model, 4 * cfg.icp_max_points);
    const PointCloud scene = detail::stride_subsample(backproject(query).cloud, cfg.icp_max_points);
    result.pose = icp_refine(scene, model, result.pose.inverse(), cfg.icp_params).pose.inverse();
    result.refined = true;
  }
  return result;
}

inline EstimateResult estimate_pose(const SupportSet& support, const RgbdPatch& query, const EvalConfig& cfg,
                                    const AttentionWeights& weights) {
  return estimate_pose(support, prepare_support(support, cfg), query, cfg, weights);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------
struct DatasetObject {
  std::string id;
  fs::path model;
  bool symmetric = false;
};

struct DatasetIndex {
  fs::path root;
  std::vector<DatasetObject> objects;
  std::vector<std::size_t> support_scenes;
  std::vector<std::size_t> query_scenes;

  fs::path scene(std::size_t id) const { return root / scene_dir_name(id); }

  const DatasetObject& object(const std::string& id) const {
    for (const auto& o : objects)
      if (o.id == id) return o;
    throw Error(Errc::DatasetFormatError, "unknown object id " + id);
  }
};

inline nlohmann::json dataset_index_to_json(const DatasetIndex& d) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : d.objects)
    objs.push_back({{"id", o.id}, {"model", o.model.string()}, {"symmetric", o.symmetric}});
  return {{"version", 1}, {"objects", objs}, {"support_scenes", d.support_scenes}, {"query_scenes", d.query_scenes}};
}

inline DatasetIndex load_dataset_index(const fs::path& root) {
  const auto j = read_json(require_file(root / "dataset.json"));
  DatasetIndex d;
  d.root = root;
  try {
    for (const auto& o : j.at("objects"))
      d.objects.push_back({o.at("id").get<std::string>(), o.at("model").get<std::string>(), o.value("symmetric", false)});
    d.support_scenes = j.at("support_scenes").get<std::vector<std::size_t>>();
    d.query_scenes = j.at("query_scenes").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::DatasetFormatError, std::string("malformed dataset.json: ") + e.what());
  }
  return d;
}

inline ObjectModel load_object_model(const DatasetIndex& d, const std::string& object_id) {
  const auto& o = d.object(object_id);
  auto loaded = load_mesh(require_file(d.root / o.model));
  return ObjectModel::from_vertices(std::move(loaded.mesh.vertices), o.symmetric || loaded.symmetric);
}

/// Frames of `object_id` in `scenes` whose mask holds at least `min_pixels`.
inline std::vector<std::size_t> visible_frames(const DatasetIndex& d, const std::vector<std::size_t>& scenes,
                                               const std::string& object_id, std::size_t min_pixels) {
  std::vector<std::size_t> out;
  for (auto s : scenes) {
    const auto mask = png_to_mask(read_png(require_file(d.scene(s) / ("mask_" + object_id + ".png"))));
    const auto count = static_cast<std::size_t>(std::count(mask.data.begin(), mask.data.end(), 1));
    if (count >= min_pixels) out.push_back(s);
  }
  return out;
}

/// Farthest-rotation selection over the object's support-split frames,
/// seeded at the first visible frame.
inline SupportSet build_support_set(const fs::path& dataset_dir, const std::string& object_id, std::size_t k,
                                    std::size_t min_visible_pixels = 200) {
  const auto index = load_dataset_index(dataset_dir);
  index.object(object_id);
  const auto frames = visible_frames(index, index.support_scenes, object_id, min_visible_pixels);
  if (frames.size() < k || k == 0)
    throw Error(Errc::NotEnoughFrames, "object " + object_id + " has " + std::to_string(frames.size()) +
                                           " support frames, need " + std::to_string(k));
  std::vector<Quaternion> rotations;
  for (auto s : frames)
    rotations.push_back(pose_from_json(read_json(require_file(index.scene(s) / ("gt_" + object_id + ".json")))).quaternion());
  const auto picked = farthest_rotation_sample(rotations, k, 0);
  SupportSet set;
  set.object_id = object_id;
  for (auto i : picked) {
    set.views.push_back(load_object_patch(index.scene(frames[i]), object_id, true));
    set.sources.push_back(fs::absolute(index.scene(frames[i])).string());
  }
  return set;
}

// support.json: {"object_id", "views": [{"path", "mask", "pose"}]}
inline nlohmann::json support_to_json(const SupportSet& s, const std::vector<std::string>& mask_names) {
  nlohmann::json views = nlohmann::json::array();
  for (std::size_t i = 0; i < s.views.size(); ++i)
    views.push_back({{"path", s.sources.at(i)}, {"mask", mask_names.at(i)}, {"pose", pose_to_json(*s.views[i].pose)}});
  return {{"object_id", s.object_id}, {"views", views}};
}

inline SupportSet load_support(const fs::path& support_json) {
  const auto j = read_json(require_file(support_json));
  SupportSet s;
  try {
    s.object_id = j.at("object_id").get<std::string>();
    for (const auto& v : j.at("views")) {
      fs::path dir = v.at("path").get<std::string>();
      if (dir.is_relative()) dir = support_json.parent_path() / dir;
      RgbdPatch p = load_patch(dir, v.value("mask", std::string{}), false);
      p.pose = pose_from_json(v.at("pose"));
      s.views.push_back(std::move(p));
      s.sources.push_back(dir.string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::DatasetFormatError, std::string("malformed support file: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------
struct FrameRecord {
  std::size_t frame_id = 0;
  Pose gt;
  std::optional<Pose> pred;  ///< empty when estimation failed
  double add_error = 0.0;
  double adds_error = 0.0;
};

struct ObjectEvaluation {
  std::string object_id;
  double diameter = 0.0;
  std::vector<FrameRecord> frames;  ///< sorted by frame id
  MetricReport add, adds;
  double random_pose_add_recall = 0.0;
};

struct EvalReport {
  std::vector<ObjectEvaluation> objects;
};

/// Recall of uniformly random rotations placed at the ground-truth
/// translation: the chance level for the ADD-0.1d criterion.
inline double random_pose_recall(const ObjectModel& model, const std::vector<Pose>& gts, std::size_t samples,
                                 double fraction, std::uint64_t seed) {
  if (gts.empty() || samples == 0) return 0.0;
  Rng rng(splitmix64(seed ^ 0xba5e1111ULL));
  std::vector<double> errors;
  errors.reserve(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    const Pose& gt = gts[i % gts.size()];
    const Pose guess{random_quaternion(rng).to_rotation(), gt.translation};
    errors.push_back(add(model, guess, gt));
  }
  return add_recall_at(errors, model.diameter, fraction);
}

inline ObjectEvaluation evaluate_frames(const std::string& object_id, const ObjectModel& model,
                                        std::vector<FrameRecord> frames, const EvalConfig& cfg) {
  ObjectEvaluation ev;
  ev.object_id = object_id;
  ev.diameter = model.diameter;
  std::sort(frames.begin(), frames.end(), [](const auto& a, const auto& b) { return a.frame_id < b.frame_id; });
  std::vector<double> add_err, adds_err;
  std::vector<Pose> gts;
  for (auto& f : frames) {
    if (f.pred) {
      f.add_error = add(model, *f.pred, f.gt);
      f.adds_error = adds(model, *f.pred, f.gt);
    } else {
      f.add_error = f.adds_error = std::numeric_limits<double>::infinity();
    }
    add_err.push_back(f.add_error);
    adds_err.push_back(f.adds_error);
    gts.push_back(f.gt);
  }
  ev.frames = std::move(frames);
  ev.add = summarize(MetricKind::ADD, add_err, model.diameter, cfg.auc_max, cfg.auc_step, cfg.recall_fraction);
  ev.adds = summarize(MetricKind::ADDS, adds_err, model.diameter, cfg.auc_max, cfg.auc_step, cfg.recall_fraction);
  ev.random_pose_add_recall = random_pose_recall(model, gts, cfg.baseline_samples, cfg.recall_fraction, cfg.seed);
  return ev;
}

inline std::string format_error(double e) {
  if (!std::isfinite(e)) return "inf";
  std::ostringstream s;
  s << std::setprecision(17) << e;
  return s.str();
}

/// per_frame.csv, summary.csv and baseline.csv under out_dir.
inline void write_report(const fs::path& out_dir, const EvalReport& report) {
  fs::create_directories(out_dir);
  std::ofstream per(out_dir / "per_frame.csv"), sum(out_dir / "summary.csv"), base(out_dir / "baseline.csv");
  if (!per || !sum || !base) throw Error(Errc::IoError, "cannot write report files in " + out_dir.string());
  per << "object_id,frame_id,metric_kind,error_m\n";
  sum << "object_id,adds_auc,add_auc,add_recall_0p1d\n" << std::setprecision(17);
  base << "object_id,diameter_m,random_pose_add_recall_0p1d,frames\n" << std::setprecision(17);
  for (const auto& o : report.objects) {
    for (const auto& f : o.frames) {
      per << o.object_id << ',' << f.frame_id << ",ADD," << format_error(f.add_error) << '\n';
      per << o.object_id << ',' << f.frame_id << ",ADDS," << format_error(f.adds_error) << '\n';
    }
    sum << o.object_id << ',' << o.adds.auc << ',' << o.add.auc << ',' << o.add.recall_at_0p1d << '\n';
    base << o.object_id << ',' << o.diameter << ',' << o.random_pose_add_recall << ',' << o.frames.size() << '\n';
  }
}

inline void write_predictions(const fs::path& out_dir, const EvalReport& report) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& o : report.objects)
    for (const auto& f : o.frames)
      j.push_back({{"object_id", o.object_id},
                   {"frame_id", f.frame_id},
                   {"gt", pose_to_json(f.gt)},
                   {"pred", f.pred ? pose_to_json(*f.pred) : nlohmann::json(nullptr)}});
  write_json(out_dir / "predictions.json", j);
}

/// For every object: support set from the support split, estimation on each
/// visible query frame, ADD/ADDS per frame, AUC and recall per object.
inline EvalReport run_eval(const fs::path& dataset_dir, const EvalConfig& cfg) {
  cfg.validate();
  const auto index = load_dataset_index(dataset_dir);
  const AttentionWeights weights = weights_for(cfg);
  EvalReport report;
  for (const auto& obj : index.objects) {
    const ObjectModel model = load_object_model(index, obj.id);
    std::optional<SupportSet> support;
    std::vector<PreparedView> prepared;
    if (!cfg.oracle_pose) {
      support = build_support_set(dataset_dir, obj.id, cfg.support_k, cfg.min_visible_pixels);
      prepared = prepare_support(*support, cfg);
    }
    std::vector<FrameRecord> frames;
    for (auto s : visible_frames(index, index.query_scenes, obj.id, cfg.min_visible_pixels)) {
      const RgbdPatch query = load_object_patch(index.scene(s), obj.id, true);
      FrameRecord rec{s, *query.pose, std::nullopt, 0.0, 0.0};
      if (cfg.oracle_pose) {
        rec.pred = *query.pose;
      } else {
        try {
          rec.pred = estimate_pose(*support, prepared, query, cfg, weights).pose;
        } catch (const Error& e) {
          if (e.code() != Errc::PoseEstimationFailed && e.code() != Errc::EmptyQuery &&
              e.code() != Errc::EmptyMask)
            throw;
        }
      }
      frames.push_back(std::move(rec));
    }
    report.objects.push_back(evaluate_frames(obj.id, model, std::move(frames), cfg));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Video registration
// ---------------------------------------------------------------------------
struct RegistrationParams {
  std::size_t k = 16;
  /// Adjacent-frame ICP; a second pass with `fine_gate` drops surface that
  /// is visible in only one of the two frames (0 disables it).
  IcpParams icp{40, 1e-14, 0.01, IcpMetric::PointToPlane, 16};
  double fine_gate = 0.002;
  std::size_t max_source_points = 3000;
  double max_residual = 1e-4;       ///< m², truncated mean ICP residual per step
  double plane_threshold = 0.006;   ///< metres
  int plane_iterations = 300;
  bool use_masks = true;            ///< use supplied masks when present
  std::uint64_t seed = 0;
};

struct RegistrationResult {
  SupportSet support;
  std::vector<Pose> frame_poses;   ///< object -> camera, per input frame
  std::vector<double> step_residuals;
  std::vector<std::size_t> selected;  ///< frame indices of the support views
};

struct Plane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;  ///< normal · x = offset
  double distance(const Vec3& p) const { return normal.dot(p) - offset; }
};

/// Dominant plane: seeded 3-point consensus, then a least-squares refit on
/// the consensus inliers (smallest principal direction of their scatter).
inline Plane fit_dominant_plane(const PointCloud& cloud, double threshold, int iterations, std::uint64_t seed) {
  if (cloud.size() < 3) throw Error(Errc::TooFewPoints, "plane fit needs 3 points");
  const auto& pts = cloud.points;
  std::size_t best_count = 0;
  Plane best;
  const std::size_t stride = std::max<std::size_t>(1, pts.size() / 20000);
  for (int it = 0; it < iterations; ++it) {
    Rng rng(stream_seed(seed, static_cast<std::uint64_t>(it)));
    const Vec3& a = pts[uniform_index(rng, pts.size())];
    const Vec3& b = pts[uniform_index(rng, pts.size())];
    const Vec3& c = pts[uniform_index(rng, pts.size())];
    Vec3 n = (b - a).cross(c - a);
    if (n.norm() < 1e-12) continue;
    n.normalize();
    const Plane cand{n, n.dot(a)};
    std::size_t count = 0;
    for (std::size_t i = 0; i < pts.size(); i += stride) count += std::abs(cand.distance(pts[i])) <= threshold;
    if (count > best_count) {
      best_count = count;
      best = cand;
    }
  }
  if (best_count < 3) throw Error(Errc::DegenerateConfiguration, "no plane found");
  std::vector<std::size_t> inliers;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (std::abs(best.distance(pts[i])) <= threshold) inliers.push_back(i);
  const Vec3 n = detail::pca_normal(pts, inliers);
  Vec3 mu = Vec3::Zero();
  for (auto i : inliers) mu += pts[i];
  mu /= static_cast<double>(inliers.size());
  Plane refit{n, n.dot(mu)};
  if (refit.offset < 0) refit = {-refit.normal, -refit.offset};  // camera origin on the negative side
  return refit;
}

/// Keeps pixels strictly between the camera and the dominant plane.
inline MaskImage remove_dominant_plane(const RgbdPatch& frame, const RegistrationParams& params) {
  RgbdPatch all = frame;
  all.mask = MaskImage(frame.width(), frame.height(), 1, 1);
  const auto bp = backproject(all);
  const Plane plane = fit_dominant_plane(bp.cloud, params.plane_threshold, params.plane_iterations, params.seed);
  MaskImage mask(frame.width(), frame.height(), 1, 0);
  for (std::size_t i = 0; i < bp.cloud.size(); ++i)
    if (plane.distance(bp.cloud.points[i]) < -params.plane_threshold) mask.at(bp.pixels[i].row, bp.pixels[i].col) = 1;
  return mask;
}

/// Adjacent-frame ICP from identity, chained to frame 0, then farthest
/// rotation sampling of k views. The object frame is camera frame 0
/// translated to the centroid of the first object cloud.
inline RegistrationResult register_from_video(std::vector<RgbdPatch> frames, const RegistrationParams& params) {
  if (frames.size() < 2) throw Error(Errc::TooFewFrames, "video registration needs at least 2 frames");
  if (params.k < 1 || params.k > frames.size()) throw Error(Errc::InvalidK, "k must be in [1, frame count]");

  std::vector<PointCloud> clouds;
  for (auto& f : frames) {
    const bool has_mask = params.use_masks && !f.mask.empty() &&
                          std::any_of(f.mask.data.begin(), f.mask.data.end(), [](auto v) { return v != 0; });
    if (!has_mask) f.mask = remove_dominant_plane(f, params);
    clouds.push_back(backproject(f).cloud);
    if (clouds.back().size() < 3) throw Error(Errc::EmptyCloud, "frame has no object points");
  }

  RegistrationResult out;
  std::vector<Pose> relative;  // relative[i-1] maps frame i into frame i-1
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const PointCloud src = detail::stride_subsample(clouds[i], params.max_source_points);
    auto icp = icp_refine(src, clouds[i - 1], Pose::identity(), params.icp);
    if (params.fine_gate > 0.0) {
      IcpParams fine = params.icp;
      fine.max_corr_dist = params.fine_gate;
      icp.pose = icp_refine(src, clouds[i - 1], icp.pose, fine).pose;
    }
    if (icp.residual > params.max_residual)
      throw Error(Errc::RegistrationDiverged, "ICP residual " + std::to_string(icp.residual) + " m² between frames " +
                                                  std::to_string(i - 1) + " and " + std::to_string(i));
    relative.push_back(icp.pose);
    out.step_residuals.push_back(icp.residual);
  }
  const auto cam0_from_cam = chain_poses(relative, Pose::identity());
  const Pose object_in_cam0{Mat3::Identity(), clouds[0].centroid()};
  std::vector<Quaternion> rotations;
  for (const auto& c : cam0_from_cam) {
    out.frame_poses.push_back(c.inverse() * object_in_cam0);
    rotations.push_back(out.frame_poses.back().quaternion());
  }
  out.selected = farthest_rotation_sample(rotations, params.k, 0);
  for (auto i : out.selected) {
    RgbdPatch v = frames[i];
    v.pose = out.frame_poses[i];
    out.support.views.push_back(std::move(v));
    out.support.sources.push_back("frame_" + std::to_string(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------
struct DatasetSpec {
  std::size_t scenes = 40;
  std::size_t objects_per_scene = 2;
  std::uint64_t seed = 0;
  fs::path textures;  ///< optional directory of PNG textures, used in name order
  Intrinsics intrinsics;
  bool background = true;
};

struct GeneratedObject {
  std::string id;
  TexturedMesh mesh;
  bool symmetric = false;
};

inline std::string object_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "obj_%02zu", i);
  return buf;
}

inline std::vector<RgbImage> load_texture_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw Error(Errc::DatasetFormatError, "texture directory not found: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(Errc::DatasetFormatError, "no PNG textures in " + dir.string());
  std::vector<RgbImage> out;
  for (const auto& f : files) {
    const auto png = read_png(f);
    if (png.channels < 3) throw Error(Errc::DatasetFormatError, f.string() + ": texture must be RGB");
    out.push_back(png_to_rgb(png));
  }
  return out;
}

/// Kinds cycle composite, box, cylinder, sphere; the last two are flagged
/// symmetric for ADD-S.
inline std::vector<GeneratedObject> make_objects(std::size_t n, std::uint64_t seed,
                                                 const std::vector<RgbImage>& textures = {}) {
  static constexpr MeshKind kinds[] = {MeshKind::Composite, MeshKind::Box, MeshKind::Cylinder, MeshKind::Sphere};
  std::vector<GeneratedObject> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = stream_seed(seed, 1000 + i);
    Rng rng(s);
    MeshParams mp;
    const MeshKind kind = kinds[i % 4];
    switch (kind) {
      case MeshKind::Composite: mp.dims = Vec3(uniform(rng, 0.1, 0.14), uniform(rng, 0.08, 0.12), uniform(rng, 0.1, 0.14)); break;
      case MeshKind::Box: mp.dims = Vec3(uniform(rng, 0.08, 0.14), uniform(rng, 0.06, 0.1), uniform(rng, 0.04, 0.08)); break;
      case MeshKind::Cylinder: mp.dims = Vec3(uniform(rng, 0.03, 0.045), 0.0, uniform(rng, 0.08, 0.13)); mp.dims.y() = mp.dims.x(); break;
      case MeshKind::Sphere: mp.dims = Vec3::Constant(uniform(rng, 0.04, 0.06)); break;
    }
    GeneratedObject o{object_id(i), gen_procedural_mesh(kind, mp, s), kind == MeshKind::Cylinder || kind == MeshKind::Sphere};
    if (!textures.empty()) o.mesh.texture = textures[i % textures.size()];
    out.push_back(std::move(o));
  }
  return out;
}

/// Writes dataset.json, models/ and one directory per scene. Every scene
/// holds every object at a fresh random placement; the first half of the
/// scenes is the support split.
inline DatasetIndex generate_dataset(const fs::path& out, const DatasetSpec& spec) {
  if (spec.scenes < 2 || spec.objects_per_scene < 1)
    throw Error(Errc::InvalidParams, "need at least 2 scenes and 1 object per scene");
  std::vector<RgbImage> textures;
  if (!spec.textures.empty()) textures = load_texture_dir(spec.textures);
  const auto objects = make_objects(spec.objects_per_scene, spec.seed, textures);

  DatasetIndex index;
  index.root = out;
  fs::create_directories(out / "models");
  std::vector<double> radii;
  std::vector<std::string> ids;
  for (const auto& o : objects) {
    const fs::path rel = fs::path("models") / (o.id + ".json");
    save_mesh(out / rel, o.mesh, o.symmetric);
    index.objects.push_back({o.id, rel, o.symmetric});
    radii.push_back(o.mesh.bounding_radius());
    ids.push_back(o.id);
  }
  for (std::size_t s = 0; s < spec.scenes; ++s) {
    const std::uint64_t scene_seed = stream_seed(spec.seed, s);
    SceneSpec ss;
    ss.intrinsics = spec.intrinsics;
    if (spec.background) ss.background = BackgroundPlane{};
    const auto poses = sample_placements(radii, spec.intrinsics, scene_seed);
    for (std::size_t i = 0; i < objects.size(); ++i) ss.objects.push_back({objects[i].mesh, poses[i]});
    write_scene(index.scene(s), compose_scene(ss, scene_seed), ids, scene_seed);
    (s < (spec.scenes + 1) / 2 ? index.support_scenes : index.query_scenes).push_back(s);
  }
  write_json(out / "dataset.json", dataset_index_to_json(index));
  return index;
}

struct TurntableSpec {
  std::size_t frames = 72;
  double step_deg = 5.0;
  double distance = 0.7;        ///< camera to object centre, metres
  double elevation_deg = 30.0;  ///< camera above the table plane
  bool table = true;            ///< render the supporting plane
  std::uint64_t seed = 0;
  Intrinsics intrinsics;
};

struct TurntableVideo {
  TexturedMesh mesh;
  std::vector<RgbdPatch> frames;  ///< object masks and ground-truth poses set
};

/// Object spinning about its own z axis on a table, seen from a fixed camera.
inline TurntableVideo render_turntable(const TurntableSpec& spec) {
  MeshParams mp;
  mp.dims = Vec3(0.12, 0.1, 0.12);
  TurntableVideo out;
  out.mesh = gen_procedural_mesh(MeshKind::Composite, mp, spec.seed);
  double zmin = 0.0;
  for (const auto& v : out.mesh.vertices) zmin = std::min(zmin, v.z());
  const Mat3 tilt = rot_x(deg2rad(90.0 + spec.elevation_deg));
  const Vec3 t(0.0, 0.0, spec.distance);
  std::optional<BackgroundPlane> table;
  if (spec.table) {
    const Vec3 n = tilt * Vec3::UnitZ();
    const Vec3 on_plane = t + tilt * Vec3(0.0, 0.0, zmin);
    table = BackgroundPlane{n, n.dot(on_plane), Vec3(0.45, 0.45, 0.45)};
  }
  for (std::size_t i = 0; i < spec.frames; ++i) {
    SceneSpec ss;
    ss.intrinsics = spec.intrinsics;
    ss.background = table;
    ss.objects.push_back({out.mesh, Pose{tilt * rot_z(deg2rad(spec.step_deg * static_cast<double>(i))), t}});
    const auto render = compose_scene(ss, stream_seed(spec.seed, i));
    out.frames.push_back(object_patch(render, 0));
  }
  return out;
}

/// frame_XXXX/{rgb,depth,mask}.png, intrinsics.json and gt.json.
inline void write_video(const fs::path& dir, const std::vector<RgbdPatch>& frames, bool with_masks) {
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu", i);
    const fs::path d = dir / name;
    fs::create_directories(d);
    const auto& f = frames[i];
    write_png(d / "rgb.png", rgb_to_png(f.rgb));
    write_png(d / "depth.png", depth_to_png(f.depth));
    if (with_masks) write_png(d / "mask.png", mask_to_png(f.mask));
    write_json(d / "intrinsics.json", intrinsics_to_json(f.intrinsics));
    if (f.pose) write_json(d / "gt.json", pose_to_json(*f.pose));
  }
}

inline std::vector<fs::path> video_frame_dirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(Errc::DatasetFormatError, "video directory not found: " + dir.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

/// Frame directories in name order; mask.png is used when present.
inline std::vector<RgbdPatch> load_video(const fs::path& dir) {
  std::vector<RgbdPatch> frames;
  for (const auto& d : video_frame_dirs(dir)) {
    RgbdPatch p = load_patch(d, fs::exists(d / "mask.png") ? "mask.png" : "", false);
    if (!fs::exists(d / "mask.png")) p.mask = MaskImage();
    frames.push_back(std::move(p));
  }
  return frames;
}

}  // namespace fsp
