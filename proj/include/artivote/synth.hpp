#pragma once

// Procedural articulated objects, single-view raycast rendering with part
// labels, and the distortion/outlier noise protocol.

#include "artivote/geometry.hpp"
#include "artivote/parallel.hpp"
#include "artivote/rng.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace artivote {

enum class Category { door_cabinet, drawer_cabinet, microwave_like };

inline const char* to_string(Category c) {
  switch (c) {
    case Category::door_cabinet: return "door-cabinet";
    case Category::drawer_cabinet: return "drawer-cabinet";
    case Category::microwave_like: return "microwave-like";
  }
  return "?";
}

inline Category category_from_string(const std::string& s) {
  if (s == "door-cabinet") return Category::door_cabinet;
  if (s == "drawer-cabinet") return Category::drawer_cabinet;
  if (s == "microwave-like") return Category::microwave_like;
  throw std::invalid_argument("unknown category: " + s);
}

/// Axis-aligned box in the rest frame of its part.
struct Box {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
  int part = 0;
};

struct Joint {
  JointParams params;
  double lower = 0.0;
  double upper = 0.0;
  double state = 0.0;
};

/// Base is part 0; joint j (0-based) moves part j + 1. Boxes and affordable
/// points are stored in the rest pose (state 0).
struct ArticulatedModel {
  Category category = Category::door_cabinet;
  double scale = 1.0;
  std::vector<Box> boxes;
  std::vector<Joint> joints;
  std::vector<Vec3> affordable_rest;

  int num_parts() const { return static_cast<int>(joints.size()) + 1; }

  RigidTransform part_pose(int part) const {
    if (part == 0) return RigidTransform::identity();
    const Joint& j = joints.at(static_cast<std::size_t>(part - 1));
    return rigid_from_joint(j.params, j.state);
  }

  /// Affordable point of joint j at the current state.
  Vec3 affordable_point(std::size_t j) const {
    return part_pose(static_cast<int>(j) + 1).apply(affordable_rest.at(j));
  }

  void set_state(std::size_t j, double s) {
    Joint& jt = joints.at(j);
    if (s < jt.lower - 1e-12 || s > jt.upper + 1e-12) {
      throw std::invalid_argument("joint state outside limits");
    }
    jt.state = std::clamp(s, jt.lower, jt.upper);
  }

  /// Center of the bounding box of all parts in the current state. Cameras
  /// look here; aiming at the base alone crops the tip of a wide-open door
  /// out of the image in about one view in ten.
  Vec3 center() const {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const Box& b : boxes) {
      const RigidTransform pose = part_pose(b.part);
      for (int c = 0; c < 8; ++c) {
        const Vec3 corner((c & 1) ? b.hi.x() : b.lo.x(), (c & 2) ? b.hi.y() : b.lo.y(), (c & 4) ? b.hi.z() : b.lo.z());
        const Vec3 p = pose.apply(corner);
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
    }
    return 0.5 * (lo + hi);
  }
};

namespace detail {

inline double box_surface_distance(const Box& b, const Vec3& p) {
  const Vec3 outside = (b.lo - p).cwiseMax(p - b.hi).cwiseMax(0.0);
  if (outside.squaredNorm() > 0.0) return outside.norm();
  return std::min((p - b.lo).minCoeff(), (b.hi - p).minCoeff());
}

}  // namespace detail

/// Distance from world point p to the surface of `part` at the current state.
inline double part_surface_distance(const ArticulatedModel& m, int part, const Vec3& p) {
  const Vec3 local = m.part_pose(part).inverse().apply(p);
  double best = std::numeric_limits<double>::infinity();
  for (const Box& b : m.boxes) {
    if (b.part == part) best = std::min(best, detail::box_surface_distance(b, local));
  }
  return best;
}

/// Builds one object of the category. Dimensions, scale and hinge geometry are
/// drawn from `seed`; every joint starts at its rest state 0.
inline ArticulatedModel build_object(Category category, std::uint64_t seed) {
  Rng rng(seed);
  ArticulatedModel m;
  m.category = category;
  m.scale = rng.uniform(0.8, 1.1);
  const double s = m.scale;
  const double t = 0.02 * s;

  switch (category) {
    case Category::door_cabinet:
    case Category::microwave_like: {
      const bool microwave = category == Category::microwave_like;
      const double W = s * (microwave ? rng.uniform(0.40, 0.55) : rng.uniform(0.30, 0.45));
      const double H = s * (microwave ? rng.uniform(0.25, 0.35) : rng.uniform(0.40, 0.60));
      const double D = s * (microwave ? rng.uniform(0.30, 0.40) : rng.uniform(0.30, 0.40));
      const double door_w = microwave ? W * rng.uniform(0.65, 0.75) : W;
      m.boxes.push_back({Vec3(-D / 2, -W / 2, 0.0), Vec3(D / 2, W / 2, H), 0});
      m.boxes.push_back({Vec3(D / 2, -W / 2, 0.0), Vec3(D / 2 + t, -W / 2 + door_w, H), 1});
      Joint j;
      j.params.kind = JointKind::revolute;
      // Hinge on the front-left edge of the door; positive angles swing it out.
      j.params.direction = UnitVec3(0.0, 0.0, -1.0);
      j.params.origin = Vec3(D / 2 + t, -W / 2, H / 2);
      j.lower = 0.0;
      j.upper = deg2rad(90.0);
      m.joints.push_back(j);
      m.affordable_rest.push_back(Vec3(D / 2 + t, -W / 2 + door_w, H / 2));
      break;
    }
    case Category::drawer_cabinet: {
      const double W = s * rng.uniform(0.35, 0.50);
      const double H = s * rng.uniform(0.40, 0.60);
      const double D = s * rng.uniform(0.35, 0.45);
      const double margin = 0.01 * s;
      const double drawer_h = H * rng.uniform(0.25, 0.40);
      const double z1 = H - margin;
      const double z0 = z1 - drawer_h;
      m.boxes.push_back({Vec3(-D / 2, -W / 2, 0.0), Vec3(D / 2, W / 2, H), 0});
      m.boxes.push_back({Vec3(D / 2, -W / 2 + margin, z0), Vec3(D / 2 + t, W / 2 - margin, z1), 1});
      m.boxes.push_back({Vec3(D / 2 - 0.8 * D, -W / 2 + 2 * margin, z0 + margin),
                         Vec3(D / 2, W / 2 - 2 * margin, z1 - margin), 1});
      Joint j;
      j.params.kind = JointKind::prismatic;
      j.params.direction = UnitVec3(1.0, 0.0, 0.0);
      j.params.origin = Vec3(D / 2 + t, 0.0, 0.5 * (z0 + z1));
      j.lower = 0.0;
      j.upper = 0.3 * D;
      m.joints.push_back(j);
      m.affordable_rest.push_back(j.params.origin);
      break;
    }
  }
  return m;
}

struct CameraPose {
  double azimuth = 0.0;    // degrees
  double elevation = 0.0;  // degrees
  double distance = 1.0;   // meters
  Vec3 look_at = Vec3::Zero();

  Vec3 position() const {
    const double az = deg2rad(azimuth);
    const double el = deg2rad(elevation);
    return look_at + distance * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  }
};

inline constexpr double kAzimuthMin = -60.0, kAzimuthMax = 60.0;
inline constexpr double kElevationMin = 0.0, kElevationMax = 60.0;
inline constexpr double kDistanceMin = 0.6, kDistanceMax = 1.2;

/// Viewpoint in front of the object looking at `look_at`.
inline CameraPose sample_view(Rng& rng, const Vec3& look_at = Vec3::Zero()) {
  CameraPose c;
  c.azimuth = rng.uniform(kAzimuthMin, kAzimuthMax);
  c.elevation = rng.uniform(kElevationMin, kElevationMax);
  c.distance = rng.uniform(kDistanceMin, kDistanceMax);
  c.look_at = look_at;
  return c;
}

/// Points with normals and part labels. Label -1 marks injected outliers.
struct LabeledCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<int> labels;
  Vec3 viewpoint = Vec3::Zero();
  double diag = 0.0;

  std::size_t size() const { return points.size(); }
};

inline std::pair<Vec3, Vec3> bounding_box(const std::vector<Vec3>& pts) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const Vec3& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

inline double bounding_diagonal(const std::vector<Vec3>& pts) {
  if (pts.empty()) return 0.0;
  const auto [lo, hi] = bounding_box(pts);
  return (hi - lo).norm();
}

inline constexpr int kImageWidth = 640;
inline constexpr int kImageHeight = 480;
inline constexpr double kVerticalFovDeg = 60.0;

namespace detail {

struct PosedBox {
  RigidTransform to_local;  // world -> part rest frame
  RigidTransform to_world;
  Vec3 lo, hi;
  int part;
  std::array<std::array<Vec3, 3>, 12> tris;  // world-space vertices
};

inline std::array<std::array<Vec3, 3>, 12> box_triangles(const Vec3& lo, const Vec3& hi) {
  std::array<Vec3, 8> c;
  for (int i = 0; i < 8; ++i) {
    c[static_cast<std::size_t>(i)] = Vec3((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(), (i & 4) ? hi.z() : lo.z());
  }
  // Two triangles per face.
  static constexpr int faces[6][4] = {{0, 2, 6, 4}, {1, 5, 7, 3}, {0, 4, 5, 1},
                                      {2, 3, 7, 6}, {0, 1, 3, 2}, {4, 6, 7, 5}};
  std::array<std::array<Vec3, 3>, 12> tris;
  for (int f = 0; f < 6; ++f) {
    const auto& q = faces[f];
    tris[static_cast<std::size_t>(2 * f)] = {c[q[0]], c[q[1]], c[q[2]]};
    tris[static_cast<std::size_t>(2 * f + 1)] = {c[q[0]], c[q[2]], c[q[3]]};
  }
  return tris;
}

/// Slab test in the box frame; returns entry distance or nullopt.
inline std::optional<double> ray_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1 + 1e-12) return std::nullopt;
  }
  return t0;
}

/// Moller-Trumbore; returns hit distance along a unit-speed ray.
inline std::optional<double> ray_triangle(const Vec3& o, const Vec3& d, const std::array<Vec3, 3>& tri) {
  const Vec3 e1 = tri[1] - tri[0];
  const Vec3 e2 = tri[2] - tri[0];
  const Vec3 pv = d.cross(e2);
  const double det = e1.dot(pv);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 tv = o - tri[0];
  const double u = tv.dot(pv) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 qv = tv.cross(e1);
  const double v = d.dot(qv) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(qv) * inv;
  if (t <= 1e-9) return std::nullopt;
  return t;
}

}  // namespace detail

/// Renders the object from `camera` with a pinhole camera (60 degree vertical
/// field of view); one point per pixel whose ray hits a triangle. Points are
/// expressed in the world (object) frame.
inline LabeledCloud render_cloud(const ArticulatedModel& model, const CameraPose& camera,
                                 int width = kImageWidth, int height = kImageHeight) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("image size must be positive");
  if (model.boxes.empty()) throw std::invalid_argument("model has no geometry");

  std::vector<detail::PosedBox> boxes;
  boxes.reserve(model.boxes.size());
  for (const Box& b : model.boxes) {
    detail::PosedBox pb;
    pb.to_world = model.part_pose(b.part);
    pb.to_local = pb.to_world.inverse();
    pb.lo = b.lo;
    pb.hi = b.hi;
    pb.part = b.part;
    pb.tris = detail::box_triangles(b.lo, b.hi);
    for (auto& tri : pb.tris) {
      for (auto& v : tri) v = pb.to_world.apply(v);
    }
    boxes.push_back(pb);
  }

  const Vec3 eye = camera.position();
  const Vec3 forward = (camera.look_at - eye).normalized();
  Vec3 right = forward.cross(Vec3::UnitZ());
  if (right.norm() < 1e-9) right = Vec3::UnitY();
  right.normalize();
  const Vec3 up = right.cross(forward);
  const double fy = 0.5 * height / std::tan(deg2rad(kVerticalFovDeg / 2.0));
  const double fx = fy;
  const double cx = 0.5 * width, cy = 0.5 * height;

  const std::size_t shards = static_cast<std::size_t>(height);
  std::vector<LabeledCloud> rows(shards);
  parallel_shards(shards, [&](std::size_t row) {
    LabeledCloud& out = rows[row];
    const double py = static_cast<double>(row) + 0.5;
    for (int px = 0; px < width; ++px) {
      const Vec3 dir = (forward + ((px + 0.5 - cx) / fx) * right - ((py - cy) / fy) * up).normalized();
      double best = std::numeric_limits<double>::infinity();
      int best_part = -1;
      Vec3 best_normal = Vec3::Zero();
      for (const detail::PosedBox& pb : boxes) {
        const Vec3 lo_o = pb.to_local.apply(eye);
        const Vec3 lo_d = pb.to_local.apply_vector(dir);
        const auto enter = detail::ray_box(lo_o, lo_d, pb.lo, pb.hi);
        if (!enter || *enter >= best) continue;
        for (const auto& tri : pb.tris) {
          const auto t = detail::ray_triangle(eye, dir, tri);
          if (t && *t < best) {
            best = *t;
            best_part = pb.part;
            best_normal = (tri[1] - tri[0]).cross(tri[2] - tri[0]).normalized();
          }
        }
      }
      if (best_part < 0) continue;
      if (best_normal.dot(dir) > 0.0) best_normal = -best_normal;
      out.points.push_back(eye + best * dir);
      out.normals.push_back(best_normal);
      out.labels.push_back(best_part);
    }
  });

  LabeledCloud cloud;
  for (auto& r : rows) {
    cloud.points.insert(cloud.points.end(), r.points.begin(), r.points.end());
    cloud.normals.insert(cloud.normals.end(), r.normals.begin(), r.normals.end());
    cloud.labels.insert(cloud.labels.end(), r.labels.begin(), r.labels.end());
  }
  if (cloud.points.empty()) throw std::runtime_error("empty cloud: camera sees nothing");
  cloud.viewpoint = eye;
  cloud.diag = bounding_diagonal(cloud.points);
  return cloud;
}

/// Distortion (rho_d, sigma_d) and outlier (rho_o, sigma_o) parameters.
struct NoiseSpec {
  double rho_d = 0.0;
  double sigma_d = 0.0;
  double rho_o = 0.0;
  double sigma_o = 0.0;

  void validate() const {
    if (rho_d < 0 || sigma_d < 0 || rho_o < 0 || sigma_o < 0 || rho_d > 1 || rho_o > 1 ||
        rho_d + rho_o > 1) {
      throw std::invalid_argument("invalid noise specification");
    }
  }
};

inline constexpr int kNoiseLevels = 5;

inline NoiseSpec noise_level(int level) {
  static constexpr std::array<NoiseSpec, kNoiseLevels> table{{
      {0.0, 0.0, 0.0, 0.0},
      {0.1, 0.01, 0.001, 1.0},
      {0.2, 0.01, 0.002, 1.0},
      {0.1, 0.02, 0.001, 2.0},
      {0.2, 0.02, 0.002, 2.0},
  }};
  if (level < 0 || level >= kNoiseLevels) throw std::invalid_argument("noise level must be in 0..4");
  return table[static_cast<std::size_t>(level)];
}

/// Perturbs round(rho_d*N) points with isotropic Gaussian noise of std
/// sigma_d*diag and replaces a disjoint set of round(rho_o*N) points by
/// uniform samples of the bounding box scaled by sigma_o about its center.
/// `diag` is kept as the nominal object scale.
inline LabeledCloud apply_noise(const LabeledCloud& cloud, const NoiseSpec& spec, Rng& rng) {
  spec.validate();
  LabeledCloud out = cloud;
  const std::size_t n = cloud.size();
  const auto n_distort = static_cast<std::size_t>(std::llround(spec.rho_d * static_cast<double>(n)));
  const auto n_outlier = static_cast<std::size_t>(std::llround(spec.rho_o * static_cast<double>(n)));
  if (n_distort + n_outlier == 0) return out;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates: only the prefix we need is shuffled.
  const std::size_t take = std::min(n, n_distort + n_outlier);
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(order[i], order[i + rng.index(n - i)]);
  }

  const double sd = spec.sigma_d * cloud.diag;
  for (std::size_t i = 0; i < n_distort; ++i) {
    Vec3& p = out.points[order[i]];
    for (int a = 0; a < 3; ++a) p[a] += rng.normal(0.0, sd);
  }

  const auto [lo, hi] = bounding_box(cloud.points);
  const Vec3 center = 0.5 * (lo + hi);
  const Vec3 half = 0.5 * spec.sigma_o * (hi - lo);
  for (std::size_t i = n_distort; i < take; ++i) {
    const std::size_t k = order[i];
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = center[a] + rng.uniform(-half[a], half[a]);
    out.points[k] = p;
    const Vec3 to_view = cloud.viewpoint - p;
    out.normals[k] = to_view.norm() > 1e-12 ? Vec3(to_view.normalized()) : Vec3(Vec3::UnitZ());
    out.labels[k] = -1;
  }
  return out;
}

/// Voting targets of a tuple for every joint of the model. The score of joint
/// j is 1 iff the two major points lie one on the base and one on part j+1.
inline std::vector<VoteTargets> tuple_targets(const ArticulatedModel& model, const LabeledCloud& cloud,
                                              const std::vector<std::size_t>& tuple) {
  if (tuple.size() < 2) throw std::invalid_argument("tuple needs two major points");
  for (std::size_t i : tuple) {
    if (i >= cloud.size()) throw std::out_of_range("tuple index out of range");
  }
  const Vec3& p1 = cloud.points[tuple[0]];
  const Vec3& p2 = cloud.points[tuple[1]];
  const int l1 = cloud.labels[tuple[0]];
  const int l2 = cloud.labels[tuple[1]];
  std::vector<VoteTargets> out;
  out.reserve(model.joints.size());
  for (std::size_t j = 0; j < model.joints.size(); ++j) {
    const Joint& jt = model.joints[j];
    const auto o = joint_offsets(p1, p2, jt.params.origin, jt.params.direction);
    const auto a = afford_offsets(p1, p2, model.affordable_point(j));
    VoteTargets t;
    t.mu = o.mu;
    t.nu = o.nu;
    t.theta = o.theta;
    t.mu_a = a.mu_a;
    t.nu_a = a.nu_a;
    t.scores.resize(model.joints.size(), 0);
    out.push_back(t);
  }
  for (std::size_t j = 0; j < model.joints.size(); ++j) {
    const int part = static_cast<int>(j) + 1;
    const int c = ((l1 == 0 && l2 == part) || (l1 == part && l2 == 0)) ? 1 : 0;
    for (auto& t : out) t.scores[j] = c;
  }
  return out;
}

/// Score of joint j carried by a target list.
inline int articulation_score(const std::vector<VoteTargets>& targets, std::size_t j) {
  return targets.at(j).scores.at(j);
}

}  // namespace artivote
