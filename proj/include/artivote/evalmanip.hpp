#pragma once

// Perception metrics, affordance-based grasp selection, joint-constrained
// planning and an ideal-kinematic executor that stands in for physics.

#include "artivote/geometry.hpp"
#include "artivote/rng.hpp"
#include "artivote/synth.hpp"
#include "artivote/voting.hpp"

#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace artivote {

struct PerceptionRecord {
  double origin_cm = 0.0;
  double direction_deg = 0.0;
  double afford_cm = 0.0;
  int noise_level = 0;
  std::string category;
  std::uint64_t seed = 0;
  JointKind kind = JointKind::revolute;
};

/// Ground truth of one joint in the observed state.
struct JointTruth {
  JointParams params;
  Vec3 afford = Vec3::Zero();
};

inline JointTruth joint_truth(const ArticulatedModel& m, std::size_t j) {
  return {m.joints.at(j).params, m.affordable_point(j)};
}

/// Revolute origins are compared as lines, prismatic ones as points.
inline PerceptionRecord evaluate(const JointEstimate& est, const JointTruth& truth) {
  if (est.kind != truth.params.kind) throw std::invalid_argument("joint kind mismatch");
  PerceptionRecord r;
  r.kind = est.kind;
  if (est.kind == JointKind::revolute) {
    r.origin_cm = line_line_distance(est.direction, est.origin, truth.params.direction, truth.params.origin);
  } else {
    r.origin_cm = 100.0 * (est.origin - truth.params.origin).norm();
  }
  r.direction_deg = direction_angle(est.direction, truth.params.direction);
  r.afford_cm = 100.0 * (est.afford - truth.afford).norm();
  return r;
}

struct Grasp {
  RigidTransform pose;
  double score = 0.0;
};

using GraspSet = std::vector<Grasp>;

/// Grasp whose position is closest to a_hat; ties prefer the higher score,
/// then the lower index.
inline std::size_t select_grasp_index(const GraspSet& grasps, const Vec3& a_hat) {
  if (grasps.empty()) throw std::invalid_argument("empty grasp set");
  std::size_t best = 0;
  double best_d = (grasps[0].pose.translation - a_hat).norm();
  for (std::size_t i = 1; i < grasps.size(); ++i) {
    const double d = (grasps[i].pose.translation - a_hat).norm();
    if (d < best_d || (d == best_d && grasps[i].score > grasps[best].score)) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

inline RigidTransform select_grasp(const GraspSet& grasps, const Vec3& a_hat) {
  return grasps[select_grasp_index(grasps, a_hat)].pose;
}

/// Pose at `point` approaching along -normal (gripper z axis into the surface).
inline RigidTransform approach_pose(const Vec3& point, const Vec3& normal) {
  const Vec3 z = -normal.normalized();
  Vec3 x = Vec3::UnitZ() - Vec3::UnitZ().dot(z) * z;
  if (x.norm() < 1e-6) x = Vec3::UnitX() - Vec3::UnitX().dot(z) * z;
  x.normalize();
  RigidTransform t;
  t.rotation.col(0) = x;
  t.rotation.col(1) = z.cross(x);
  t.rotation.col(2) = z;
  t.translation = point;
  return t;
}

/// Stand-in grasp proposer: `count` poses at random cloud points (without
/// replacement), approaching along the surface normal, with random scores.
inline GraspSet stub_grasps(const LabeledCloud& cloud, std::size_t count, Rng& rng) {
  if (cloud.size() == 0) throw std::invalid_argument("empty cloud");
  count = std::min(count, cloud.size());
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) std::swap(order[i], order[i + rng.index(cloud.size() - i)]);
  GraspSet out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t k = order[i];
    out.push_back({approach_pose(cloud.points[k], cloud.normals[k]), rng.uniform(0.0, 1.0)});
  }
  return out;
}

struct TrajectoryPlan {
  std::vector<RigidTransform> waypoints;
  double delta = 0.0;
  JointParams joint;
};

/// Open-loop plan: n_steps equal joint increments applied from T0.
inline TrajectoryPlan plan(const RigidTransform& T0, const JointParams& joint, double total_delta, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("n_steps must be at least 1");
  TrajectoryPlan p;
  p.delta = total_delta / n_steps;
  p.joint = joint;
  const RigidTransform step = rigid_from_joint(joint, p.delta);
  p.waypoints.reserve(static_cast<std::size_t>(n_steps) + 1);
  p.waypoints.push_back(T0);
  for (int i = 0; i < n_steps; ++i) p.waypoints.push_back(step * p.waypoints.back());
  return p;
}

/// One step of the joint motion applied to the current gripper pose.
inline RigidTransform plan_tracked(const RigidTransform& T_t, const JointParams& joint, double delta) {
  return rigid_from_joint(joint, delta) * T_t;
}

struct AttachTolerance {
  double position = 0.02;  // meters
  double angle_deg = 10.0;
};

enum class Outcome { success, half_success, failure };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::success: return "success";
    case Outcome::half_success: return "half-success";
    case Outcome::failure: return "failure";
  }
  return "?";
}

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "success") return Outcome::success;
  if (s == "half-success") return Outcome::half_success;
  if (s == "failure") return Outcome::failure;
  throw std::invalid_argument("unknown outcome: " + s);
}

inline constexpr double kSuccessRatio = 0.85;
inline constexpr double kHalfSuccessRatio = 0.5;

struct ManipOutcome {
  double achieved = 0.0;  // joint-state change, rad or m
  double target = 0.0;
  Outcome outcome = Outcome::failure;
  std::optional<int> detach_step;
  double max_position_residual = 0.0;
  double max_angle_residual_deg = 0.0;
};

inline Outcome classify(double achieved, double target, bool detached) {
  if (achieved >= kSuccessRatio * target) return Outcome::success;
  if (detached && achieved >= kHalfSuccessRatio * target) return Outcome::half_success;
  return Outcome::failure;
}

/// Gripper poses reachable while rigidly attached to a part driven by a joint:
/// M(s) = motion(s - s0) * G0.
class JointManifold {
 public:
  JointManifold(const Joint& joint, const RigidTransform& grasp) : joint_(joint), g0_(grasp) {}

  RigidTransform at(double s) const { return rigid_from_joint(joint_.params, s - joint_.state) * g0_; }

  /// Joint state whose pose is closest to `cmd` in position (orientation for
  /// grasps on a revolute axis), clamped to the joint limits.
  double project(const RigidTransform& cmd) const {
    const Vec3& u = joint_.params.direction;
    double change = 0.0;
    if (joint_.params.kind == JointKind::prismatic) {
      change = (cmd.translation - g0_.translation).dot(u);
    } else {
      const Vec3& q = joint_.params.origin;
      Vec3 r = g0_.translation - q;
      Vec3 d = cmd.translation - q;
      r -= r.dot(u) * u;
      d -= d.dot(u) * u;
      if (r.norm() > 1e-6 && d.norm() > 1e-12) {
        change = std::atan2(u.dot(r.cross(d)), r.dot(d));
      } else {
        const Eigen::AngleAxisd aa(cmd.rotation * g0_.rotation.transpose());
        change = aa.angle() * aa.axis().dot(u);
      }
    }
    return std::clamp(joint_.state + change, joint_.lower, joint_.upper);
  }

  const Joint& joint() const { return joint_; }

 private:
  Joint joint_;
  RigidTransform g0_;
};

enum class Policy { tracked, open_loop };

inline const char* to_string(Policy p) { return p == Policy::tracked ? "tracked" : "open-loop"; }

/// Executes `n_steps` increments of `target` along the estimated joint. The
/// true part follows the projection of each commanded pose; a residual above
/// the tolerance detaches the gripper.
inline ManipOutcome simulate_kinematic(Policy policy, const JointParams& estimate, const ArticulatedModel& model,
                                       std::size_t joint, const RigidTransform& grasp, double target, int n_steps = 50,
                                       const AttachTolerance& tol = {}) {
  if (n_steps < 1) throw std::invalid_argument("n_steps must be at least 1");
  const int part = static_cast<int>(joint) + 1;
  if (part_surface_distance(model, part, grasp.translation) > tol.position) {
    throw std::invalid_argument("grasp not attached at start");
  }
  const Joint& truth = model.joints.at(joint);
  const JointManifold manifold(truth, grasp);
  const TrajectoryPlan open = policy == Policy::open_loop ? plan(grasp, estimate, target, n_steps) : TrajectoryPlan{};
  const double delta = target / n_steps;

  ManipOutcome out;
  out.target = target;
  double s = truth.state;
  RigidTransform current = grasp;
  for (int k = 1; k <= n_steps; ++k) {
    const RigidTransform cmd =
        policy == Policy::tracked ? plan_tracked(current, estimate, delta) : open.waypoints[static_cast<std::size_t>(k)];
    const double s_next = manifold.project(cmd);
    const RigidTransform reached = manifold.at(s_next);
    const double pos_res = (cmd.translation - reached.translation).norm();
    const double ang_res = rotation_angle_deg(cmd.rotation, reached.rotation);
    out.max_position_residual = std::max(out.max_position_residual, pos_res);
    out.max_angle_residual_deg = std::max(out.max_angle_residual_deg, ang_res);
    if (pos_res > tol.position || ang_res > tol.angle_deg) {
      out.detach_step = k;
      break;
    }
    s = s_next;
    current = reached;
  }
  out.achieved = s - truth.state;
  out.outcome = classify(out.achieved, target, out.detach_step.has_value());
  return out;
}

struct TrialConfig {
  int n_steps = 50;
  double rate_lo = 0.1;
  double rate_hi = 0.7;
  std::size_t grasp_count = 2048;
  AttachTolerance tol;
};

/// A randomized manipulation task: object, observed state, view and target.
struct TrialSetup {
  ArticulatedModel model;
  CameraPose camera;
  LabeledCloud cloud;
  double target = 0.0;
  std::uint64_t seed = 0;
};

inline TrialSetup make_trial(Category category, std::uint64_t seed, const TrialConfig& cfg = {}) {
  Rng rng(seed);
  TrialSetup t;
  t.seed = seed;
  t.model = build_object(category, rng.split(1).seed());
  Rng task = rng.split(2);
  const Joint& j = t.model.joints.front();
  const double range = j.upper - j.lower;
  t.target = task.uniform(cfg.rate_lo, cfg.rate_hi) * range;
  t.model.set_state(0, task.uniform(j.lower, j.upper - t.target));
  Rng view = rng.split(3);
  t.camera = sample_view(view, t.model.center());
  t.cloud = render_cloud(t.model, t.camera);
  return t;
}

/// Selects a grasp near the estimated affordable point and executes the pull.
/// A grasp that is not on the movable part counts as a failure.
inline ManipOutcome run_trial(const TrialSetup& setup, const JointEstimate& estimate, Policy policy,
                              const TrialConfig& cfg = {}) {
  Rng rng = Rng(setup.seed).split(4);
  const GraspSet grasps = stub_grasps(setup.cloud, cfg.grasp_count, rng);
  const RigidTransform g = select_grasp(grasps, estimate.afford);
  try {
    return simulate_kinematic(policy, estimate.params(), setup.model, 0, g, setup.target, cfg.n_steps, cfg.tol);
  } catch (const std::invalid_argument&) {
    ManipOutcome o;
    o.target = setup.target;
    o.detach_step = 0;
    return o;
  }
}

/// Estimate equal to the ground truth of the observed state.
inline JointEstimate perfect_estimate(const ArticulatedModel& m, std::size_t j = 0) {
  JointEstimate e;
  e.kind = m.joints.at(j).params.kind;
  e.direction = m.joints.at(j).params.direction;
  e.origin = m.joints.at(j).params.origin;
  e.afford = m.affordable_point(j);
  return e;
}

}  // namespace artivote
