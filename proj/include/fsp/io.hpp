#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsp/attention.hpp"
#include "fsp/error.hpp"
#include "fsp/geom.hpp"
#include "fsp/image.hpp"
#include "fsp/matching.hpp"
#include "fsp/rgbd.hpp"
#include "fsp/synth.hpp"

namespace fsp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Pose / quaternion / intrinsics
// ---------------------------------------------------------------------------
inline json pose_to_json(const Pose& p) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
  return {{"rotation", rot},
          {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}},
          {"units", "m"}};
}

inline Pose pose_from_json(const json& j) {
  try {
    const auto& rot = j.at("rotation");
    const auto& tr = j.at("translation");
    if (rot.size() != 9 || tr.size() != 3) throw Error(Errc::DatasetFormatError, "pose needs 9 + 3 numbers");
    if (j.contains("units") && j.at("units") != "m") throw Error(Errc::DatasetFormatError, "pose units must be m");
    Pose p;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot.at(static_cast<std::size_t>(r * 3 + c)).get<double>();
    for (int i = 0; i < 3; ++i) p.translation[i] = tr.at(static_cast<std::size_t>(i)).get<double>();
    return p;
  } catch (const json::exception& e) {
    throw Error(Errc::DatasetFormatError, std::string("malformed pose: ") + e.what());
  }
}

inline json quaternion_to_json(const Quaternion& q) { return {q.w, q.x, q.y, q.z}; }
inline Quaternion quaternion_from_json(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

inline json intrinsics_to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline Intrinsics intrinsics_from_json(const json& j) {
  try {
    Intrinsics k{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                 j.at("cy").get<double>(), j.at("width").get<int>(), j.at("height").get<int>()};
    if (!k.valid()) throw Error(Errc::DatasetFormatError, "intrinsics out of range");
    return k;
  } catch (const json::exception& e) {
    throw Error(Errc::DatasetFormatError, std::string("malformed intrinsics: ") + e.what());
  }
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::DatasetFormatError, "missing file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::DatasetFormatError, path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Attention weights: {"header": {descriptor_dim, seed, version},
//                     "matrices": {name: {"wq": [d*d row-major], ...}}}
// Doubles are printed in shortest round-trip form, so reload is bit-exact.
// ---------------------------------------------------------------------------
inline json weights_to_json(const AttentionWeights& w) {
  json mats = json::object();
  const auto blocks = w.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    json entry = json::object();
    const char* names[] = {"wq", "wk", "wv", "wo"};
    const Eigen::MatrixXd* ms[] = {&blocks[b]->wq, &blocks[b]->wk, &blocks[b]->wv, &blocks[b]->wo};
    for (int m = 0; m < 4; ++m) {
      json flat = json::array();
      for (Eigen::Index r = 0; r < ms[m]->rows(); ++r)
        for (Eigen::Index c = 0; c < ms[m]->cols(); ++c) flat.push_back((*ms[m])(r, c));
      entry[names[m]] = std::move(flat);
    }
    mats[AttentionWeights::kBlockNames[b]] = std::move(entry);
  }
  return {{"header", {{"descriptor_dim", w.descriptor_dim}, {"seed", w.seed}, {"version", AttentionWeights::kVersion}}},
          {"matrices", mats}};
}

inline AttentionWeights weights_from_json(const json& j) {
  try {
    const auto& h = j.at("header");
    if (h.at("version").get<int>() != AttentionWeights::kVersion)
      throw Error(Errc::DatasetFormatError, "unsupported weights version");
    const auto d = h.at("descriptor_dim").get<Eigen::Index>();
    AttentionWeights w = AttentionWeights::zeros(d);
    w.seed = h.at("seed").get<std::uint64_t>();
    auto blocks = w.blocks();
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& entry = j.at("matrices").at(AttentionWeights::kBlockNames[b]);
      const char* names[] = {"wq", "wk", "wv", "wo"};
      Eigen::MatrixXd* ms[] = {&blocks[b]->wq, &blocks[b]->wk, &blocks[b]->wv, &blocks[b]->wo};
      for (int m = 0; m < 4; ++m) {
        const auto& flat = entry.at(names[m]);
        if (flat.size() != static_cast<std::size_t>(d * d))
          throw Error(Errc::ShapeMismatch, std::string("matrix ") + names[m] + " is not d x d");
        for (Eigen::Index r = 0; r < d; ++r)
          for (Eigen::Index c = 0; c < d; ++c) (*ms[m])(r, c) = flat.at(static_cast<std::size_t>(r * d + c)).get<double>();
      }
    }
    return w;
  } catch (const json::exception& e) {
    throw Error(Errc::DatasetFormatError, std::string("malformed weights: ") + e.what());
  }
}

inline void save_weights(const fs::path& path, const AttentionWeights& w) { write_json(path, weights_to_json(w)); }
inline AttentionWeights load_weights(const fs::path& path) { return weights_from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// MatchSet CSV: i,j,confidence
// ---------------------------------------------------------------------------
inline std::string matches_to_csv(const MatchSet& matches) {
  std::ostringstream out;
  out << "i,j,confidence\n" << std::setprecision(17);
  for (const auto& m : matches) out << m.prototype << ',' << m.query << ',' << m.confidence << '\n';
  return out.str();
}

inline MatchSet matches_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  MatchSet out;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Match m;
    char c1 = 0, c2 = 0;
    std::istringstream row(line);
    if (!(row >> m.prototype >> c1 >> m.query >> c2 >> m.confidence) || c1 != ',' || c2 != ',')
      throw Error(Errc::DatasetFormatError, "malformed match row: " + line);
    out.push_back(m);
  }
  return out;
}

/// Debug dump: int64 rows, int64 cols, then row-major float64 values (little-endian host order).
inline void dump_assignment(const fs::path& path, const Assignment& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  const std::int64_t shape[2] = {a.prob.rows(), a.prob.cols()};
  out.write(reinterpret_cast<const char*>(shape), sizeof(shape));
  for (Eigen::Index r = 0; r < a.prob.rows(); ++r)
    for (Eigen::Index c = 0; c < a.prob.cols(); ++c) {
      const double v = a.prob(r, c);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

// ---------------------------------------------------------------------------
// Meshes and object models
// ---------------------------------------------------------------------------
inline void save_mesh(const fs::path& json_path, const TexturedMesh& mesh, bool symmetric) {
  const fs::path tex_path = fs::path(json_path).replace_extension("").string() + "_texture.png";
  json v = json::array(), t = json::array(), uv = json::array();
  for (const auto& p : mesh.vertices) v.push_back({p.x(), p.y(), p.z()});
  for (const auto& tr : mesh.triangles) t.push_back({tr[0], tr[1], tr[2]});
  for (const auto& q : mesh.uvs) uv.push_back({q.x(), q.y()});
  write_json(json_path, {{"vertices", v}, {"triangles", t}, {"uvs", uv},
                         {"texture", tex_path.filename().string()}, {"symmetric", symmetric}, {"units", "m"}});
  write_png(tex_path, rgb_to_png(mesh.texture));
}

struct LoadedMesh {
  TexturedMesh mesh;
  bool symmetric = false;
};

inline LoadedMesh load_mesh(const fs::path& json_path) {
  const json j = read_json(json_path);
  LoadedMesh out;
  try {
    for (const auto& p : j.at("vertices")) out.mesh.vertices.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
    for (const auto& t : j.at("triangles")) out.mesh.triangles.push_back({t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()});
    for (const auto& q : j.at("uvs")) out.mesh.uvs.emplace_back(q.at(0).get<double>(), q.at(1).get<double>());
    out.symmetric = j.value("symmetric", false);
    const fs::path tex = json_path.parent_path() / j.at("texture").get<std::string>();
    if (!fs::exists(tex)) throw Error(Errc::DatasetFormatError, "missing file " + tex.string());
    out.mesh.texture = png_to_rgb(read_png(tex));
  } catch (const json::exception& e) {
    throw Error(Errc::DatasetFormatError, json_path.string() + ": " + e.what());
  }
  out.mesh.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Scene directories:
//   scene_<id>/rgb.png  depth.png (16-bit mm)  mask_<obj>.png  gt_<obj>.json
//              intrinsics.json  meta.json (seed, spec digest)
// ---------------------------------------------------------------------------
inline std::string scene_dir_name(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06zu", id);
  return buf;
}

/// 64-bit FNV-1a over arbitrary bytes, printed as hex.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string spec_digest(const std::vector<std::string>& object_ids, const std::vector<Pose>& poses,
                               const Intrinsics& k) {
  json j = {{"objects", object_ids}, {"intrinsics", intrinsics_to_json(k)}};
  for (const auto& p : poses) j["poses"].push_back(pose_to_json(p));
  return fnv1a_hex(j.dump());
}

struct ScenePayload {
  std::vector<std::uint8_t> rgb_png, depth_png;
  std::vector<std::vector<std::uint8_t>> mask_pngs;
};

inline ScenePayload encode_scene(const SceneRender& render) {
  ScenePayload p;
  p.rgb_png = encode_png(rgb_to_png(render.scene.rgb));
  p.depth_png = encode_png(depth_to_png(render.scene.depth));
  for (const auto& m : render.object_masks) p.mask_pngs.push_back(encode_png(mask_to_png(m)));
  return p;
}

inline void write_scene(const fs::path& dir, const SceneRender& render, const std::vector<std::string>& object_ids,
                        std::uint64_t seed) {
  fs::create_directories(dir);
  const auto payload = encode_scene(render);
  write_file_bytes(dir / "rgb.png", payload.rgb_png);
  write_file_bytes(dir / "depth.png", payload.depth_png);
  for (std::size_t i = 0; i < object_ids.size(); ++i) {
    write_file_bytes(dir / ("mask_" + object_ids[i] + ".png"), payload.mask_pngs[i]);
    write_json(dir / ("gt_" + object_ids[i] + ".json"), pose_to_json(render.gt_poses[i]));
  }
  write_json(dir / "intrinsics.json", intrinsics_to_json(render.scene.intrinsics));
  write_json(dir / "meta.json", {{"seed", seed},
                                 {"spec_digest", spec_digest(object_ids, render.gt_poses, render.scene.intrinsics)},
                                 {"objects", object_ids}});
}

inline fs::path require_file(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::DatasetFormatError, "missing file " + path.string());
  return path;
}

/// Loads one object's view from a scene (or frame) directory. `mask_name`
/// selects the mask file; an empty name means the whole valid-depth region.
inline RgbdPatch load_patch(const fs::path& dir, const std::string& mask_name, bool with_gt_pose,
                            const std::string& gt_name = "") {
  RgbdPatch p;
  p.intrinsics = intrinsics_from_json(read_json(require_file(dir / "intrinsics.json")));
  p.rgb = png_to_rgb(read_png(require_file(dir / "rgb.png")));
  p.depth = png_to_depth(read_png(require_file(dir / "depth.png")));
  if (!mask_name.empty()) {
    p.mask = png_to_mask(read_png(require_file(dir / mask_name)));
  } else {
    p.mask = MaskImage(p.depth.width, p.depth.height, 1, 1);
  }
  const int w = p.intrinsics.width, h = p.intrinsics.height;
  if (!p.rgb.same_shape(w, h) || !p.depth.same_shape(w, h) || !p.mask.same_shape(w, h))
    throw Error(Errc::DatasetFormatError, dir.string() + ": image sizes disagree with intrinsics.json");
  if (with_gt_pose) p.pose = pose_from_json(read_json(require_file(dir / gt_name)));
  p.validate();
  return p;
}

inline RgbdPatch load_object_patch(const fs::path& scene_dir, const std::string& object_id, bool with_gt_pose = true) {
  return load_patch(scene_dir, "mask_" + object_id + ".png", with_gt_pose, "gt_" + object_id + ".json");
}

}  // namespace fsp
