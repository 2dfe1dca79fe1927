#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fsp/error.hpp"
#include "fsp/geom.hpp"
#include "fsp/image.hpp"
#include "fsp/random.hpp"
#include "fsp/rgbd.hpp"

namespace fsp {

using Vec2 = Eigen::Vector2d;
using Triangle = std::array<int, 3>;

struct TexturedMesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  std::vector<Vec2> uvs;  ///< per vertex, in [0,1]²
  RgbImage texture;

  void validate() const {
    if (uvs.size() != vertices.size()) throw Error(Errc::InvalidParams, "uv count differs from vertex count");
    const int n = static_cast<int>(vertices.size());
    for (const auto& t : triangles) {
      for (int i : t)
        if (i < 0 || i >= n) throw Error(Errc::IndexOutOfRange, "triangle index out of range");
      if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
        throw Error(Errc::InvalidParams, "triangle repeats a vertex");
    }
    for (const auto& uv : uvs)
      if (uv.x() < 0.0 || uv.x() > 1.0 || uv.y() < 0.0 || uv.y() > 1.0)
        throw Error(Errc::InvalidParams, "uv outside [0,1]²");
    if (texture.empty() || texture.channels != 3) throw Error(Errc::InvalidParams, "mesh needs an RGB texture");
  }

  /// Divergence-theorem volume; positive for closed outward-oriented meshes.
  double signed_volume() const {
    double v = 0.0;
    for (const auto& t : triangles)
      v += vertices[t[0]].dot(vertices[t[1]].cross(vertices[t[2]])) / 6.0;
    return v;
  }

  double bounding_radius() const {
    double r = 0.0;
    for (const auto& p : vertices) r = std::max(r, p.norm());
    return r;
  }
};

// ---------------------------------------------------------------------------
// Textures
// ---------------------------------------------------------------------------
enum class TextureKind { Checker, Gradient, Noise };

inline RgbImage procedural_texture(TextureKind kind, int size, std::uint64_t seed) {
  if (size < 2) throw Error(Errc::InvalidParams, "texture size must be >= 2");
  RgbImage tex(size, size, 3);
  Rng rng(splitmix64(seed ^ 0x7e87ULL));
  switch (kind) {
    case TextureKind::Checker: {
      const Vec3 a(uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1));
      const Vec3 b = Vec3::Ones() - a;
      const int cells = 8;
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const bool odd = ((r * cells / size) + (c * cells / size)) % 2;
          for (int ch = 0; ch < 3; ++ch) tex.at(r, c, ch) = static_cast<float>(odd ? a[ch] : b[ch]);
        }
      break;
    }
    case TextureKind::Gradient: {
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const double u = c / double(size - 1), v = r / double(size - 1);
          tex.at(r, c, 0) = static_cast<float>(u);
          tex.at(r, c, 1) = static_cast<float>(v);
          tex.at(r, c, 2) = static_cast<float>(1.0 - 0.5 * (u + v));
        }
      break;
    }
    case TextureKind::Noise: {
      // Sum of random oriented sinusoids per channel plus colour blobs.
      constexpr int kWaves = 6;
      std::array<std::array<double, 4>, kWaves * 3> waves{};
      for (auto& w : waves) {
        const double ang = uniform(rng, 0, 6.283185307179586);
        const double freq = uniform(rng, 2.0, 14.0);
        w = {freq * std::cos(ang), freq * std::sin(ang), uniform(rng, 0, 6.283185307179586),
             uniform(rng, 0.3, 1.0)};
      }
      constexpr int kBlobs = 24;
      std::array<std::array<double, 6>, kBlobs> blobs{};
      for (auto& b : blobs)
        b = {uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0.03, 0.12), uniform(rng, 0, 1),
             uniform(rng, 0, 1), uniform(rng, 0, 1)};
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const double u = c / double(size - 1), v = r / double(size - 1);
          Vec3 col = Vec3::Zero();
          for (int ch = 0; ch < 3; ++ch) {
            double s = 0.0, wsum = 0.0;
            for (int k = 0; k < kWaves; ++k) {
              const auto& w = waves[static_cast<std::size_t>(ch * kWaves + k)];
              s += w[3] * std::sin(6.283185307179586 * (w[0] * u + w[1] * v) + w[2]);
              wsum += w[3];
            }
            col[ch] = 0.5 + 0.35 * s / wsum;
          }
          for (const auto& b : blobs) {
            const double d2 = (u - b[0]) * (u - b[0]) + (v - b[1]) * (v - b[1]);
            const double a = std::exp(-d2 / (2 * b[2] * b[2]));
            col = (1 - a) * col + a * Vec3(b[3], b[4], b[5]);
          }
          for (int ch = 0; ch < 3; ++ch) tex.at(r, c, ch) = static_cast<float>(std::clamp(col[ch], 0.0, 1.0));
        }
      break;
    }
  }
  return tex;
}

/// Bilinear lookup with clamp-to-edge; uv (0,0) is the first texel centre
/// and (1,1) the last.
inline Vec3 sample_bilinear(const RgbImage& tex, const Vec2& uv) {
  const double x = std::clamp(uv.x(), 0.0, 1.0) * (tex.width - 1);
  const double y = std::clamp(uv.y(), 0.0, 1.0) * (tex.height - 1);
  const int x0 = std::min(static_cast<int>(std::floor(x)), tex.width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), tex.height - 1);
  const int x1 = std::min(x0 + 1, tex.width - 1), y1 = std::min(y0 + 1, tex.height - 1);
  const double fx = x - x0, fy = y - y0;
  Vec3 out;
  for (int ch = 0; ch < 3; ++ch) {
    const double top = (1 - fx) * tex.at(y0, x0, ch) + fx * tex.at(y0, x1, ch);
    const double bot = (1 - fx) * tex.at(y1, x0, ch) + fx * tex.at(y1, x1, ch);
    out[ch] = (1 - fy) * top + fy * bot;
  }
  return out;
}

/// Barycentric UV interpolation on one triangle followed by a texture lookup.
inline Vec3 blend_texture_color(const TexturedMesh& mesh, std::size_t triangle, const Vec3& bary) {
  if (triangle >= mesh.triangles.size()) throw Error(Errc::IndexOutOfRange, "triangle index out of range");
  if (bary.minCoeff() < 0.0 || std::abs(bary.sum() - 1.0) > 1e-9)
    throw Error(Errc::InvalidBarycentric, "barycentric coordinates must be >= 0 and sum to 1");
  const auto& t = mesh.triangles[triangle];
  const Vec2 uv = bary[0] * mesh.uvs[t[0]] + bary[1] * mesh.uvs[t[1]] + bary[2] * mesh.uvs[t[2]];
  return sample_bilinear(mesh.texture, uv);
}

// ---------------------------------------------------------------------------
// Procedural meshes
// ---------------------------------------------------------------------------
enum class MeshKind { Box, Cylinder, Sphere, Composite };

struct MeshParams {
  /// Box: side lengths. Cylinder: x = radius, z = height. Sphere: x = radius.
  /// Composite: overall scale of the part layout.
  Vec3 dims = Vec3(0.1, 0.08, 0.06);
  int segments = 32;  ///< cylinder / sphere slices
  int stacks = 16;    ///< sphere stacks
  TextureKind texture = TextureKind::Noise;
  int texture_size = 128;
};

namespace detail {

inline TexturedMesh make_box(const Vec3& dims) {
  TexturedMesh m;
  const Vec3 h = dims / 2;
  for (int bz = 0; bz < 2; ++bz)
    for (int by = 0; by < 2; ++by)
      for (int bx = 0; bx < 2; ++bx) {
        m.vertices.emplace_back(bx ? h.x() : -h.x(), by ? h.y() : -h.y(), bz ? h.z() : -h.z());
        // Every face maps to a non-degenerate parallelogram of the texture.
        m.uvs.emplace_back(0.1 + 0.8 * (0.5 * bx + 0.25 * bz), 0.1 + 0.8 * (0.5 * by + 0.25 * bx));
      }
  const auto id = [](int x, int y, int z) { return x + 2 * y + 4 * z; };
  const auto quad = [&](int a, int b, int c, int d) {
    m.triangles.push_back({a, b, c});
    m.triangles.push_back({a, c, d});
  };
  quad(id(0, 0, 0), id(0, 1, 0), id(1, 1, 0), id(1, 0, 0));  // -z
  quad(id(0, 0, 1), id(1, 0, 1), id(1, 1, 1), id(0, 1, 1));  // +z
  quad(id(0, 0, 0), id(1, 0, 0), id(1, 0, 1), id(0, 0, 1));  // -y
  quad(id(0, 1, 0), id(0, 1, 1), id(1, 1, 1), id(1, 1, 0));  // +y
  quad(id(0, 0, 0), id(0, 0, 1), id(0, 1, 1), id(0, 1, 0));  // -x
  quad(id(1, 0, 0), id(1, 1, 0), id(1, 1, 1), id(1, 0, 1));  // +x
  return m;
}

inline TexturedMesh make_cylinder(double radius, double height, int segments) {
  TexturedMesh m;
  const double h = height / 2;
  const int s = segments;
  // Side: two rings with a duplicated seam column; v in [0, 0.5].
  for (int ring = 0; ring < 2; ++ring)
    for (int k = 0; k <= s; ++k) {
      const double a = 2 * std::numbers::pi * (k % s) / s;
      m.vertices.emplace_back(radius * std::cos(a), radius * std::sin(a), ring ? h : -h);
      m.uvs.emplace_back(static_cast<double>(k) / s, ring ? 0.5 : 0.0);
    }
  for (int k = 0; k < s; ++k) {
    const int b0 = k, b1 = k + 1, t0 = s + 1 + k, t1 = s + 2 + k;
    m.triangles.push_back({b0, b1, t1});
    m.triangles.push_back({b0, t1, t0});
  }
  // Caps: separate vertices so they own the lower half of the texture.
  for (int cap = 0; cap < 2; ++cap) {
    const double z = cap ? h : -h;
    const double uc = cap ? 0.75 : 0.25;
    const int centre = static_cast<int>(m.vertices.size());
    m.vertices.emplace_back(0.0, 0.0, z);
    m.uvs.emplace_back(uc, 0.75);
    for (int k = 0; k < s; ++k) {
      const double a = 2 * std::numbers::pi * k / s;
      m.vertices.emplace_back(radius * std::cos(a), radius * std::sin(a), z);
      m.uvs.emplace_back(uc + 0.2 * std::cos(a), 0.75 + 0.2 * std::sin(a));
    }
    for (int k = 0; k < s; ++k) {
      const int a = centre + 1 + k, b = centre + 1 + (k + 1) % s;
      if (cap) {
        m.triangles.push_back({centre, a, b});
      } else {
        m.triangles.push_back({centre, b, a});
      }
    }
  }
  return m;
}

inline TexturedMesh make_sphere(double radius, int slices, int stacks) {
  TexturedMesh m;
  for (int t = 0; t <= stacks; ++t) {
    const double theta = std::numbers::pi * t / stacks;
    for (int s = 0; s <= slices; ++s) {
      const double phi = 2 * std::numbers::pi * (s % slices) / slices;
      m.vertices.emplace_back(radius * std::sin(theta) * std::cos(phi),
                              radius * std::sin(theta) * std::sin(phi), radius * std::cos(theta));
      m.uvs.emplace_back(static_cast<double>(s) / slices, static_cast<double>(t) / stacks);
    }
  }
  const auto id = [&](int t, int s) { return t * (slices + 1) + s; };
  for (int t = 0; t < stacks; ++t)
    for (int s = 0; s < slices; ++s) {
      const int a = id(t, s), b = id(t + 1, s), c = id(t + 1, s + 1), d = id(t, s + 1);
      if (t == 0) {
        m.triangles.push_back({a, b, c});
      } else if (t == stacks - 1) {
        m.triangles.push_back({a, b, d});
      } else {
        m.triangles.push_back({a, b, c});
        m.triangles.push_back({a, c, d});
      }
    }
  return m;
}

/// Appends `part`, translated, with its UVs squeezed into horizontal band
/// `band` of `bands`.
inline void append_part(TexturedMesh& dst, const TexturedMesh& part, const Vec3& offset, int band, int bands) {
  const int base = static_cast<int>(dst.vertices.size());
  for (std::size_t i = 0; i < part.vertices.size(); ++i) {
    dst.vertices.push_back(part.vertices[i] + offset);
    const Vec2& uv = part.uvs[i];
    dst.uvs.emplace_back(uv.x(), (band + uv.y()) / bands);
  }
  for (const auto& t : part.triangles) dst.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
}

}  // namespace detail

inline TexturedMesh gen_procedural_mesh(MeshKind kind, const MeshParams& params, std::uint64_t seed) {
  if (params.dims.minCoeff() <= 0.0 || params.segments < 3 || params.stacks < 2 || params.texture_size < 2)
    throw Error(Errc::InvalidParams, "mesh dimensions and tessellation must be positive");
  TexturedMesh m;
  switch (kind) {
    case MeshKind::Box: m = detail::make_box(params.dims); break;
    case MeshKind::Cylinder: m = detail::make_cylinder(params.dims.x(), params.dims.z(), params.segments); break;
    case MeshKind::Sphere: m = detail::make_sphere(params.dims.x(), params.segments, params.stacks); break;
    case MeshKind::Composite: {
      Rng rng(splitmix64(seed ^ 0xc0ffeeULL));
      const Vec3 s = params.dims;
      const Vec3 base_dims(s.x() * uniform(rng, 0.8, 1.0), s.y() * uniform(rng, 0.6, 0.9), s.z() * uniform(rng, 0.35, 0.5));
      const double cyl_r = std::min(base_dims.x(), base_dims.y()) * uniform(rng, 0.2, 0.35);
      const double cyl_h = s.z() * uniform(rng, 0.4, 0.6);
      const double sph_r = cyl_r * uniform(rng, 0.9, 1.3);
      detail::append_part(m, detail::make_box(base_dims), Vec3::Zero(), 0, 3);
      const Vec3 cyl_at(base_dims.x() * uniform(rng, -0.25, 0.25), base_dims.y() * uniform(rng, -0.2, 0.2),
                        base_dims.z() / 2 + cyl_h / 2 - 1e-3);
      detail::append_part(m, detail::make_cylinder(cyl_r, cyl_h, params.segments), cyl_at, 1, 3);
      const Vec3 sph_at(-cyl_at.x(), -cyl_at.y(), base_dims.z() / 2 + sph_r * 0.6);
      detail::append_part(m, detail::make_sphere(sph_r, params.segments, params.stacks), sph_at, 2, 3);
      // Centre the composite on its vertex bounding box.
      Vec3 mn = m.vertices.front(), mx = mn;
      for (const auto& v : m.vertices) {
        mn = mn.cwiseMin(v);
        mx = mx.cwiseMax(v);
      }
      const Vec3 c = (mn + mx) / 2;
      for (auto& v : m.vertices) v -= c;
      break;
    }
  }
  m.texture = procedural_texture(params.texture, params.texture_size, seed);
  return m;
}

/// Per-axis scale factors drawn uniformly from [lo, hi].
inline TexturedMesh deform_mesh(const TexturedMesh& mesh, const Vec3& lo, const Vec3& hi, std::uint64_t seed) {
  if (lo.minCoeff() <= 0.0 || (hi - lo).minCoeff() < 0.0)
    throw Error(Errc::InvalidRange, "scale ranges must satisfy 0 < lo <= hi");
  Rng rng(splitmix64(seed ^ 0xdef0ULL));
  Vec3 scale;
  for (int a = 0; a < 3; ++a) scale[a] = lo[a] == hi[a] ? lo[a] : uniform(rng, lo[a], hi[a]);
  TexturedMesh out = mesh;
  for (auto& v : out.vertices) v = v.cwiseProduct(scale);
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Camera-frame plane n·x = offset, drawn wherever no object is nearer.
struct BackgroundPlane {
  Vec3 normal = Vec3(0, 0, -1);
  double offset = -1.5;
  Vec3 color = Vec3(0.45, 0.45, 0.45);
};

struct RenderTarget {
  Intrinsics intrinsics;
  DepthImage depth;                 ///< +inf where empty
  Image<int> owner;                 ///< object index, -1 = empty
  Image<int> tri;                   ///< triangle index within the owner
  std::vector<Vec3> bary;           ///< per pixel, perspective-correct

  explicit RenderTarget(const Intrinsics& k)
      : intrinsics(k),
        depth(k.width, k.height, 1, std::numeric_limits<double>::infinity()),
        owner(k.width, k.height, 1, -1),
        tri(k.width, k.height, 1, -1),
        bary(static_cast<std::size_t>(k.width) * k.height, Vec3::Zero()) {}
};

namespace detail {

struct ClipVertex {
  Vec3 cam;
  Vec3 bary;  ///< w.r.t. the source triangle
};

inline constexpr double kNearPlane = 1e-3;

inline std::vector<ClipVertex> clip_near(const std::array<ClipVertex, 3>& in) {
  std::vector<ClipVertex> out;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& a = in[i];
    const auto& b = in[(i + 1) % 3];
    const bool ain = a.cam.z() >= kNearPlane, bin = b.cam.z() >= kNearPlane;
    if (ain) out.push_back(a);
    if (ain != bin) {
      const double t = (kNearPlane - a.cam.z()) / (b.cam.z() - a.cam.z());
      out.push_back({a.cam + t * (b.cam - a.cam), a.bary + t * (b.bary - a.bary)});
      out.back().cam.z() = kNearPlane;
    }
  }
  return out;
}

inline void raster_triangle(RenderTarget& rt, int object, int triangle, const ClipVertex& v0,
                            const ClipVertex& v1, const ClipVertex& v2) {
  const auto& k = rt.intrinsics;
  const ClipVertex* vs[3] = {&v0, &v1, &v2};
  double sx[3], sy[3], inv_z[3];
  for (int i = 0; i < 3; ++i) {
    const Vec3& c = vs[i]->cam;
    inv_z[i] = 1.0 / c.z();
    sx[i] = k.fx * c.x() * inv_z[i] + k.cx;
    sy[i] = k.fy * c.y() * inv_z[i] + k.cy;
  }
  const double area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0]);
  if (area == 0.0 || !std::isfinite(area)) return;
  const double minx = std::min({sx[0], sx[1], sx[2]}), maxx = std::max({sx[0], sx[1], sx[2]});
  const double miny = std::min({sy[0], sy[1], sy[2]}), maxy = std::max({sy[0], sy[1], sy[2]});
  const int c0 = std::max(0, static_cast<int>(std::ceil(minx)));
  const int c1 = std::min(k.width - 1, static_cast<int>(std::floor(maxx)));
  const int r0 = std::max(0, static_cast<int>(std::ceil(miny)));
  const int r1 = std::min(k.height - 1, static_cast<int>(std::floor(maxy)));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      // Screen-space barycentrics of the pixel centre (c, r).
      const double w0 = ((sx[1] - c) * (sy[2] - r) - (sy[1] - r) * (sx[2] - c)) / area;
      const double w1 = ((sx[2] - c) * (sy[0] - r) - (sy[2] - r) * (sx[0] - c)) / area;
      const double w2 = 1.0 - w0 - w1;
      if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
      const double iz = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
      const double z = 1.0 / iz;
      if (!(z < rt.depth.at(r, c))) continue;
      Vec3 b = z * (w0 * inv_z[0] * v0.bary + w1 * inv_z[1] * v1.bary + w2 * inv_z[2] * v2.bary);
      b = b.cwiseMax(0.0);
      b /= b.sum();
      rt.depth.at(r, c) = z;
      rt.owner.at(r, c) = object;
      rt.tri.at(r, c) = triangle;
      rt.bary[static_cast<std::size_t>(r) * k.width + c] = b;
    }
  }
}

}  // namespace detail

/// Z-buffered draw of one posed mesh into a shared target.
inline void draw_mesh(RenderTarget& rt, const TexturedMesh& mesh, const Pose& pose, int object) {
  std::vector<Vec3> cam;
  cam.reserve(mesh.vertices.size());
  for (const auto& v : mesh.vertices) cam.push_back(pose.apply(v));
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tr = mesh.triangles[t];
    const std::array<detail::ClipVertex, 3> in = {detail::ClipVertex{cam[tr[0]], Vec3::UnitX()},
                                                  detail::ClipVertex{cam[tr[1]], Vec3::UnitY()},
                                                  detail::ClipVertex{cam[tr[2]], Vec3::UnitZ()}};
    if (in[0].cam.z() < detail::kNearPlane && in[1].cam.z() < detail::kNearPlane &&
        in[2].cam.z() < detail::kNearPlane)
      continue;
    const auto poly = detail::clip_near(in);
    for (std::size_t i = 1; i + 1 < poly.size(); ++i)
      detail::raster_triangle(rt, object, static_cast<int>(t), poly[0], poly[i], poly[i + 1]);
  }
}

struct SceneObject {
  TexturedMesh mesh;
  Pose pose;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  Intrinsics intrinsics;
  std::optional<BackgroundPlane> background;
  double depth_noise_std = 0.0;  ///< metres; additive Gaussian, off by default
};

struct SceneRender {
  RgbdPatch scene;                      ///< mask = union of object masks
  std::vector<MaskImage> object_masks;
  std::vector<Pose> gt_poses;
};

namespace detail {

inline SceneRender shade(const RenderTarget& rt, const std::vector<const TexturedMesh*>& meshes,
                         const std::vector<Pose>& poses, const std::optional<BackgroundPlane>& background,
                         double depth_noise_std, std::uint64_t seed) {
  const auto& k = rt.intrinsics;
  SceneRender out;
  out.gt_poses = poses;
  out.scene.intrinsics = k;
  out.scene.rgb = RgbImage(k.width, k.height, 3);
  out.scene.depth = DepthImage(k.width, k.height, 1);
  out.scene.mask = MaskImage(k.width, k.height, 1);
  out.object_masks.assign(meshes.size(), MaskImage(k.width, k.height, 1));
  Rng rng(splitmix64(seed ^ 0x5eedULL));
  for (int r = 0; r < k.height; ++r) {
    for (int c = 0; c < k.width; ++c) {
      double z = rt.depth.at(r, c);
      int owner = rt.owner.at(r, c);
      Vec3 color = Vec3::Zero();
      if (background) {
        const Vec3 ray((c - k.cx) / k.fx, (r - k.cy) / k.fy, 1.0);
        const double denom = background->normal.dot(ray);
        if (denom != 0.0) {
          const double t = background->offset / denom;
          if (t > 0.0 && t < z) {
            z = t;
            owner = -1;
            color = background->color;
          }
        }
      }
      if (!std::isfinite(z)) continue;
      if (owner >= 0) {
        const auto& mesh = *meshes[static_cast<std::size_t>(owner)];
        color = blend_texture_color(mesh, static_cast<std::size_t>(rt.tri.at(r, c)),
                                    rt.bary[static_cast<std::size_t>(r) * k.width + c]);
        out.object_masks[static_cast<std::size_t>(owner)].at(r, c) = 1;
        out.scene.mask.at(r, c) = 1;
      }
      if (depth_noise_std > 0.0) z = std::max(0.0, z + depth_noise_std * normal01(rng));
      out.scene.depth.at(r, c) = z;
      for (int ch = 0; ch < 3; ++ch) out.scene.rgb.at(r, c, ch) = static_cast<float>(color[ch]);
    }
  }
  return out;
}

}  // namespace detail

/// Single-object render: colour from texture blending (no shading), depth =
/// camera-frame z of the nearest surface, mask = covered pixels.
inline RgbdPatch rasterize(const TexturedMesh& mesh, const Pose& pose, const Intrinsics& k) {
  RenderTarget rt(k);
  draw_mesh(rt, mesh, pose, 0);
  auto render = detail::shade(rt, {&mesh}, {pose}, std::nullopt, 0.0, 0);
  render.scene.pose = pose;
  return std::move(render.scene);
}

/// All objects share one z-buffer, so each object's mask holds exactly the
/// pixels where it is the nearest surface.
inline SceneRender compose_scene(const SceneSpec& spec, std::uint64_t seed) {
  RenderTarget rt(spec.intrinsics);
  std::vector<const TexturedMesh*> meshes;
  std::vector<Pose> poses;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    draw_mesh(rt, spec.objects[i].mesh, spec.objects[i].pose, static_cast<int>(i));
    meshes.push_back(&spec.objects[i].mesh);
    poses.push_back(spec.objects[i].pose);
  }
  return detail::shade(rt, meshes, poses, spec.background, spec.depth_noise_std, seed);
}

/// Patch view of one object in a composed scene (its mask, the scene pixels).
inline RgbdPatch object_patch(const SceneRender& render, std::size_t object) {
  RgbdPatch p = render.scene;
  p.mask = render.object_masks.at(object);
  p.pose = render.gt_poses.at(object);
  return p;
}

/// Rejection-sampled placement: random rotations, centres inside the view
/// frustum at depth [z_min, z_max], bounding spheres pairwise disjoint.
inline std::vector<Pose> sample_placements(const std::vector<double>& radii, const Intrinsics& k,
                                           std::uint64_t seed, double z_min = 0.55, double z_max = 0.9,
                                           int max_attempts = 10000) {
  Rng rng(splitmix64(seed ^ 0x91ace5ULL));
  std::vector<Pose> poses;
  for (std::size_t i = 0; i < radii.size(); ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < max_attempts && !placed; ++attempt) {
      const double z = uniform(rng, z_min, z_max);
      const double margin = 0.15;
      const double u = uniform(rng, margin, 1 - margin) * (k.width - 1);
      const double v = uniform(rng, margin, 1 - margin) * (k.height - 1);
      const Vec3 t = backproject_pixel(u, v, z, k);
      bool ok = true;
      for (std::size_t j = 0; j < poses.size() && ok; ++j)
        ok = (poses[j].translation - t).norm() > radii[i] + radii[j];
      if (!ok) continue;
      poses.push_back(Pose::from(random_quaternion(rng), t));
      placed = true;
    }
    if (!placed) throw Error(Errc::InvalidParams, "could not place object " + std::to_string(i));
  }
  return poses;
}

}  // namespace fsp
