#pragma once

// Geometric primitives for point-tuple voting: voting targets relative to a
// tuple baseline, candidate enumeration on circles and cones, joint motion
// transforms and the distance measures used for evaluation.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace artivote {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// A direction with unit L2 norm. Construction normalizes; a zero vector is
/// rejected.
class UnitVec3 {
 public:
  UnitVec3() : v_(0.0, 0.0, 1.0) {}
  explicit UnitVec3(const Vec3& v) {
    const double n = v.norm();
    if (!(n > 1e-12) || !std::isfinite(n)) {
      throw std::invalid_argument("cannot normalize a zero-length direction");
    }
    v_ = v / n;
  }
  UnitVec3(double x, double y, double z) : UnitVec3(Vec3(x, y, z)) {}

  const Vec3& vec() const { return v_; }
  operator const Vec3&() const { return v_; }  // NOLINT(google-explicit-constructor)
  double x() const { return v_.x(); }
  double y() const { return v_.y(); }
  double z() const { return v_.z(); }
  double dot(const Vec3& o) const { return v_.dot(o); }
  UnitVec3 operator-() const { return UnitVec3(-v_); }

  friend bool operator==(const UnitVec3& a, const UnitVec3& b) { return a.v_ == b.v_; }

 private:
  Vec3 v_;
};

enum class JointKind { revolute, prismatic };

inline const char* to_string(JointKind k) {
  return k == JointKind::revolute ? "revolute" : "prismatic";
}

inline JointKind joint_kind_from_string(const std::string& s) {
  if (s == "revolute") return JointKind::revolute;
  if (s == "prismatic") return JointKind::prismatic;
  throw std::invalid_argument("unknown joint kind: " + s);
}

/// Axis of a one-degree-of-freedom joint. For prismatic joints the origin is
/// the center of the moving part's front surface in its rest state.
struct JointParams {
  JointKind kind = JointKind::revolute;
  UnitVec3 direction;
  Vec3 origin = Vec3::Zero();
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_matrix(const Mat4& m) {
    RigidTransform t;
    t.rotation = m.topLeftCorner<3, 3>();
    t.translation = m.topRightCorner<3, 1>();
    return t;
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_vector(const Vec3& v) const { return rotation * v; }

  RigidTransform inverse() const {
    RigidTransform t;
    t.rotation = rotation.transpose();
    t.translation = -(t.rotation * translation);
    return t;
  }

  /// Orthonormal with det +1 within `tol`.
  bool is_valid(double tol = 1e-9) const {
    return (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }

  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform t;
    t.rotation = a.rotation * b.rotation;
    t.translation = a.rotation * b.translation + a.translation;
    return t;
  }
};

/// Rotation angle of `a^T b` in degrees.
inline double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return rad2deg(std::acos(c));
}

struct JointOffsets {
  double mu = 0.0;
  double nu = 0.0;
  double theta = 0.0;
};

struct AffordOffsets {
  double mu_a = 0.0;
  double nu_a = 0.0;
};

/// Ground-truth voting targets of one tuple for one joint, plus the
/// articulation scores of the tuple for every joint of the object.
struct VoteTargets {
  double mu = 0.0;
  double nu = 0.0;
  double theta = 0.0;
  double mu_a = 0.0;
  double nu_a = 0.0;
  std::vector<int> scores;
};

inline constexpr double kMinBaseline = 1e-9;

/// Unit vector from p1 to p2.
inline Vec3 baseline_direction(const Vec3& p1, const Vec3& p2) {
  const Vec3 d = p2 - p1;
  const double n = d.norm();
  if (!(n > kMinBaseline)) throw std::invalid_argument("degenerate tuple baseline");
  return d / n;
}

inline JointOffsets joint_offsets(const Vec3& p1, const Vec3& p2, const Vec3& q, const UnitVec3& u) {
  const Vec3 dir = baseline_direction(p1, p2);
  JointOffsets o;
  o.mu = (q - p1).dot(dir);
  o.nu = (q - (p1 + o.mu * dir)).norm();
  o.theta = std::clamp(u.dot(dir), -1.0, 1.0);
  return o;
}

inline AffordOffsets afford_offsets(const Vec3& p1, const Vec3& p2, const Vec3& a) {
  const Vec3 dir = baseline_direction(p1, p2);
  AffordOffsets o;
  o.mu_a = (a - p1).dot(dir);
  o.nu_a = (a - (p1 + o.mu_a * dir)).norm();
  return o;
}

/// First in-plane reference direction for candidate enumeration: the part of
/// +z orthogonal to `dir`, or of +x when `dir` is (nearly) vertical.
inline Vec3 reference_perpendicular(const Vec3& dir) {
  Vec3 ref = Vec3::UnitZ() - dir.z() * dir;
  if (ref.norm() < 1e-6) ref = Vec3::UnitX() - dir.x() * dir;
  return ref.normalized();
}

inline std::size_t candidate_count(double step_deg) {
  if (!(step_deg > 0.0)) throw std::invalid_argument("candidate step must be positive");
  return static_cast<std::size_t>(std::ceil(360.0 / step_deg));
}

/// Points on the circle of radius `nu` around p1 + mu*dir, in the plane
/// orthogonal to the baseline, spaced `step_deg` apart.
inline std::vector<Vec3> circle_candidates(const Vec3& p1, const Vec3& p2, double mu, double nu,
                                           double step_deg) {
  if (nu < 0.0) throw std::invalid_argument("circle radius must be nonnegative");
  const std::size_t n = candidate_count(step_deg);
  const Vec3 dir = baseline_direction(p1, p2);
  const Vec3 e1 = reference_perpendicular(dir);
  const Vec3 e2 = dir.cross(e1);
  const Vec3 foot = p1 + mu * dir;
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double phi = deg2rad(step_deg * static_cast<double>(k));
    out.push_back(foot + nu * (std::cos(phi) * e1 + std::sin(phi) * e2));
  }
  return out;
}

/// Unit vectors making cosine `theta` with the baseline.
inline std::vector<Vec3> cone_candidates(const Vec3& p1, const Vec3& p2, double theta,
                                         double step_deg) {
  if (!(std::abs(theta) <= 1.0)) throw std::invalid_argument("cone cosine outside [-1, 1]");
  const std::size_t n = candidate_count(step_deg);
  const Vec3 dir = baseline_direction(p1, p2);
  const Vec3 e1 = reference_perpendicular(dir);
  const Vec3 e2 = dir.cross(e1);
  const double s = std::sqrt(std::max(0.0, 1.0 - theta * theta));
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double phi = deg2rad(step_deg * static_cast<double>(k));
    out.push_back((theta * dir + s * (std::cos(phi) * e1 + std::sin(phi) * e2)).normalized());
  }
  return out;
}

/// Motion of a part attached to the joint: rotation by `delta` radians about
/// the line (u, q), or translation by `delta` meters along u.
inline RigidTransform rigid_from_joint(JointKind kind, double delta, const UnitVec3& u, const Vec3& q) {
  RigidTransform t;
  if (kind == JointKind::revolute) {
    t.rotation = Eigen::AngleAxisd(delta, u.vec()).toRotationMatrix();
    t.translation = q - t.rotation * q;
  } else {
    t.translation = delta * u.vec();
  }
  return t;
}

inline RigidTransform rigid_from_joint(const JointParams& j, double delta) {
  return rigid_from_joint(j.kind, delta, j.direction, j.origin);
}

/// Distance of point p from the line (u, q), meters.
inline double point_line_distance(const Vec3& p, const UnitVec3& u, const Vec3& q) {
  const Vec3 d = p - q;
  return (d - d.dot(u.vec()) * u.vec()).norm();
}

/// Minimum distance between two lines, in centimeters.
inline double line_line_distance(const UnitVec3& u1, const Vec3& q1, const UnitVec3& u2, const Vec3& q2) {
  const Vec3 c = u1.vec().cross(u2.vec());
  const double cn = c.norm();
  double d;
  if (cn < 1e-9) {
    d = point_line_distance(q2, u1, q1);
  } else {
    d = std::abs((q1 - q2).dot(c)) / cn;
  }
  return 100.0 * d;
}

/// Angle between two directions in degrees; opposite directions are 180.
inline double direction_angle(const UnitVec3& u1, const UnitVec3& u2) {
  return rad2deg(std::acos(std::clamp(u1.dot(u2.vec()), -1.0, 1.0)));
}

}  // namespace artivote
