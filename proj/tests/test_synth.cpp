#include "artivote/synth.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace artivote;

namespace {

bool same_model(const ArticulatedModel& a, const ArticulatedModel& b) {
  if (a.scale != b.scale || a.boxes.size() != b.boxes.size() || a.joints.size() != b.joints.size()) return false;
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    if (a.boxes[i].lo != b.boxes[i].lo || a.boxes[i].hi != b.boxes[i].hi || a.boxes[i].part != b.boxes[i].part) return false;
  }
  for (std::size_t j = 0; j < a.joints.size(); ++j) {
    const auto &x = a.joints[j], &y = b.joints[j];
    if (x.params.kind != y.params.kind || !(x.params.direction == y.params.direction) ||
        x.params.origin != y.params.origin || x.lower != y.lower || x.upper != y.upper || x.state != y.state) {
      return false;
    }
    if (a.affordable_rest[j] != b.affordable_rest[j]) return false;
  }
  return true;
}

LabeledCloud unit_box_front_view() {
  ArticulatedModel m;
  m.boxes.push_back({Vec3(-0.5, -0.5, -0.5), Vec3(0.5, 0.5, 0.5), 0});
  CameraPose cam;
  cam.distance = 1.5;  // 1 m in front of the x = 0.5 face
  return render_cloud(m, cam, 160, 120);
}

}  // namespace

TEST(BuildObject, Deterministic) {
  for (auto c : {Category::door_cabinet, Category::drawer_cabinet, Category::microwave_like}) {
    EXPECT_TRUE(same_model(build_object(c, 1), build_object(c, 1)));
    EXPECT_FALSE(same_model(build_object(c, 1), build_object(c, 2)));
  }
}

TEST(BuildObject, CategoryNames) {
  EXPECT_EQ(category_from_string("door-cabinet"), Category::door_cabinet);
  EXPECT_EQ(category_from_string("drawer-cabinet"), Category::drawer_cabinet);
  EXPECT_EQ(category_from_string("microwave-like"), Category::microwave_like);
  EXPECT_STREQ(to_string(Category::drawer_cabinet), "drawer-cabinet");
  EXPECT_THROW(category_from_string("fridge"), std::invalid_argument);
}

TEST(BuildObject, DrawerSlidesAlongFrontNormal) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = build_object(Category::drawer_cabinet, seed);
    ASSERT_EQ(m.joints.size(), 1u);
    const auto& j = m.joints[0];
    EXPECT_EQ(j.params.kind, JointKind::prismatic);
    // The drawer front is the box face at maximum x; its normal is +x.
    EXPECT_NEAR((j.params.direction.vec() - Vec3::UnitX()).norm(), 0.0, 1e-15);
    double depth = 0.0;
    for (const auto& b : m.boxes) {
      if (b.part == 0) depth = b.hi.x() - b.lo.x();
    }
    EXPECT_NEAR(j.upper, 0.3 * depth, 1e-12);
    EXPECT_EQ(j.lower, 0.0);
    // Origin and affordable point: center of the front face at rest.
    EXPECT_NEAR(part_surface_distance(m, 1, j.params.origin), 0.0, 1e-12);
    EXPECT_EQ(m.affordable_rest[0], j.params.origin);
  }
}

TEST(BuildObject, DoorAffordancePointOppositeHinge) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = build_object(Category::door_cabinet, seed);
    const auto& j = m.joints[0];
    EXPECT_EQ(j.params.kind, JointKind::revolute);
    EXPECT_NEAR(j.upper, kPi / 2, 1e-15);
    double width = 0.0;
    for (const auto& b : m.boxes) {
      if (b.part == 1) width = b.hi.y() - b.lo.y();
    }
    EXPECT_NEAR(point_line_distance(m.affordable_point(0), j.params.direction, j.params.origin), width, 1e-9);
    EXPECT_NEAR(part_surface_distance(m, 1, m.affordable_point(0)), 0.0, 1e-12);
    EXPECT_GE(m.scale, 0.8);
    EXPECT_LE(m.scale, 1.1);
  }
}

TEST(BuildObject, StateLimitsEnforced) {
  auto m = build_object(Category::door_cabinet, 3);
  EXPECT_THROW(m.set_state(0, -0.1), std::invalid_argument);
  EXPECT_THROW(m.set_state(0, 2.0), std::invalid_argument);
  m.set_state(0, 1.0);
  EXPECT_EQ(m.joints[0].state, 1.0);
}

TEST(SampleView, WithinRanges) {
  Rng rng(1);
  double az_sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto c = sample_view(rng);
    EXPECT_GE(c.azimuth, -60.0);
    EXPECT_LE(c.azimuth, 60.0);
    EXPECT_GE(c.elevation, 0.0);
    EXPECT_LE(c.elevation, 60.0);
    EXPECT_GE(c.distance, 0.6);
    EXPECT_LE(c.distance, 1.2);
    az_sum += c.azimuth;
  }
  EXPECT_NEAR(az_sum / n, 0.0, 3.0);
}

TEST(SampleView, Reproducible) {
  Rng a(77), b(77);
  for (int i = 0; i < 10; ++i) {
    const auto x = sample_view(a), y = sample_view(b);
    EXPECT_EQ(x.azimuth, y.azimuth);
    EXPECT_EQ(x.elevation, y.elevation);
    EXPECT_EQ(x.distance, y.distance);
  }
}

TEST(RenderCloud, FrontFaceNormalsFaceCamera) {
  const auto cloud = unit_box_front_view();
  ASSERT_GT(cloud.size(), 1000u);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    EXPECT_NEAR((cloud.normals[i] - Vec3::UnitX()).norm(), 0.0, 1e-12);
    EXPECT_NEAR(cloud.points[i].x(), 0.5, 1e-9);
  }
  EXPECT_GT(cloud.diag, 0.0);
}

TEST(RenderCloud, LabelsAndDeterminism) {
  auto m = build_object(Category::door_cabinet, 4);
  m.set_state(0, 0.6);
  Rng rng(2);
  const auto cam = sample_view(rng, m.center());
  const auto a = render_cloud(m, cam);
  const auto b = render_cloud(m, cam);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.labels, b.labels);
  std::set<int> labels(a.labels.begin(), a.labels.end());
  EXPECT_EQ(labels, (std::set<int>{0, 1}));
  for (const auto& n : a.normals) EXPECT_NEAR(n.norm(), 1.0, 1e-12);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(a.normals[i].dot(a.points[i] - a.viewpoint), 0.0);
}

TEST(RenderCloud, OpenDoorShowsLessOfItsFace) {
  auto m = build_object(Category::door_cabinet, 5);
  CameraPose cam;
  cam.elevation = 20.0;
  cam.distance = 1.0;
  cam.look_at = m.center();
  auto count_door = [](const LabeledCloud& c) {
    return std::count(c.labels.begin(), c.labels.end(), 1);
  };
  const auto closed = count_door(render_cloud(m, cam));
  m.set_state(0, kPi / 2);
  const auto open = count_door(render_cloud(m, cam));
  EXPECT_LT(open, closed);
}

TEST(RenderCloud, EmptyViewThrows) {
  ArticulatedModel m;
  m.boxes.push_back({Vec3(-0.1, -0.1, -0.1), Vec3(0.1, 0.1, 0.1), 0});
  CameraPose cam;
  cam.look_at = Vec3(0, 0, 50);  // looking far above the box
  cam.distance = 1.0;
  cam.elevation = 60.0;
  try {
    render_cloud(m, cam, 64, 48);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "empty cloud: camera sees nothing");
  }
}

TEST(RenderCloud, MovingPartPointsFollowJoint) {
  for (auto c : {Category::door_cabinet, Category::drawer_cabinet}) {
    auto m = build_object(c, 6);
    const auto& j = m.joints[0];
    const double s = 0.3 * j.upper, s2 = 0.8 * j.upper;
    m.set_state(0, s);
    Rng rng(3);
    const auto cloud = render_cloud(m, sample_view(rng, m.center()));
    const auto motion = rigid_from_joint(j.params, s2 - s);
    m.set_state(0, s2);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (cloud.labels[i] != 1) continue;
      EXPECT_LT(part_surface_distance(m, 1, motion.apply(cloud.points[i])), 1e-6);
      ++checked;
    }
    EXPECT_GT(checked, 100u);
  }
}

TEST(NoiseLevel, TableValues) {
  const auto l0 = noise_level(0);
  EXPECT_EQ(l0.rho_d, 0.0);
  EXPECT_EQ(l0.sigma_d, 0.0);
  EXPECT_EQ(l0.rho_o, 0.0);
  EXPECT_EQ(l0.sigma_o, 0.0);
  const auto l2 = noise_level(2);
  EXPECT_EQ(l2.rho_d, 0.2);
  EXPECT_EQ(l2.sigma_d, 0.01);
  EXPECT_EQ(l2.rho_o, 0.002);
  EXPECT_EQ(l2.sigma_o, 1.0);
  const auto l4 = noise_level(4);
  EXPECT_EQ(l4.rho_d, 0.2);
  EXPECT_EQ(l4.sigma_d, 0.02);
  EXPECT_EQ(l4.rho_o, 0.002);
  EXPECT_EQ(l4.sigma_o, 2.0);
  const auto l1 = noise_level(1), l3 = noise_level(3);
  EXPECT_EQ(l1.rho_d, 0.1);
  EXPECT_EQ(l1.sigma_o, 1.0);
  EXPECT_EQ(l3.sigma_d, 0.02);
  EXPECT_EQ(l3.rho_o, 0.001);
  EXPECT_THROW(noise_level(5), std::invalid_argument);
  EXPECT_THROW(noise_level(-1), std::invalid_argument);
}

namespace {

LabeledCloud grid_cloud(std::size_t n) {
  LabeledCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.points.emplace_back(static_cast<double>(i % 100) * 0.01, static_cast<double>(i / 100 % 100) * 0.01,
                          static_cast<double>(i / 10000) * 0.01);
    c.normals.emplace_back(0, 0, 1);
    c.labels.push_back(static_cast<int>(i % 2));
  }
  c.viewpoint = Vec3(0, 0, 5);
  c.diag = bounding_diagonal(c.points);
  return c;
}

}  // namespace

TEST(ApplyNoise, LevelZeroIsIdentity) {
  const auto c = grid_cloud(5000);
  Rng rng(1);
  const auto n = apply_noise(c, noise_level(0), rng);
  EXPECT_EQ(n.points, c.points);
  EXPECT_EQ(n.labels, c.labels);
  EXPECT_EQ(n.normals, c.normals);
}

TEST(ApplyNoise, LevelFourCounts) {
  const auto c = grid_cloud(10000);
  Rng rng(2);
  const auto n = apply_noise(c, noise_level(4), rng);
  std::size_t moved = 0, replaced = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (n.labels[i] == -1) {
      ++replaced;
    } else if (n.points[i] != c.points[i]) {
      ++moved;
      EXPECT_EQ(n.labels[i], c.labels[i]);
    }
  }
  EXPECT_EQ(moved, 2000u);
  EXPECT_EQ(replaced, 20u);
  EXPECT_EQ(n.diag, c.diag);
}

TEST(ApplyNoise, OutliersInsideScaledBox) {
  const auto c = grid_cloud(10000);
  Rng rng(3);
  const auto n = apply_noise(c, NoiseSpec{0.0, 0.0, 0.05, 2.0}, rng);
  const auto [lo, hi] = bounding_box(c.points);
  const Vec3 center = 0.5 * (lo + hi), half = hi - lo;
  std::size_t outside = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (n.labels[i] != -1) continue;
    EXPECT_TRUE(((n.points[i] - center).cwiseAbs().array() <= half.array() + 1e-12).all());
    if (((n.points[i] - center).cwiseAbs().array() > 0.5 * (hi - lo).array()).any()) ++outside;
  }
  EXPECT_GT(outside, 0u);
}

TEST(ApplyNoise, DistortionStdMatchesSigma) {
  const auto c = grid_cloud(100000);
  Rng rng(4);
  const NoiseSpec spec{1.0, 0.01, 0.0, 0.0};
  const auto n = apply_noise(c, spec, rng);
  double ss = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) ss += (n.points[i] - c.points[i]).squaredNorm();
  const double sd = std::sqrt(ss / (3.0 * static_cast<double>(c.size())));
  EXPECT_NEAR(sd / (0.01 * c.diag), 1.0, 0.05);
}

TEST(ApplyNoise, RejectsInvalidSpec) {
  const auto c = grid_cloud(100);
  Rng rng(1);
  EXPECT_THROW(apply_noise(c, NoiseSpec{-0.1, 0, 0, 0}, rng), std::invalid_argument);
  EXPECT_THROW(apply_noise(c, NoiseSpec{0.8, 0.01, 0.5, 1.0}, rng), std::invalid_argument);
}

TEST(TupleTargets, ArticulationScores) {
  const auto m = build_object(Category::door_cabinet, 1);
  LabeledCloud c;
  c.points = {Vec3(0, 0, 0.1), Vec3(0.3, 0.1, 0.2), Vec3(0.05, -0.05, 0.3), Vec3(0.1, 0.1, 0.1)};
  c.normals.assign(4, Vec3::UnitX());
  c.labels = {0, 1, 0, -1};
  c.diag = 1.0;
  EXPECT_EQ(tuple_targets(m, c, {0, 1})[0].scores[0], 1);
  EXPECT_EQ(tuple_targets(m, c, {1, 0})[0].scores[0], 1);
  EXPECT_EQ(tuple_targets(m, c, {0, 2})[0].scores[0], 0);
  EXPECT_EQ(tuple_targets(m, c, {3, 1})[0].scores[0], 0);
  const auto t = tuple_targets(m, c, {0, 1, 2});
  const auto o = joint_offsets(c.points[0], c.points[1], m.joints[0].params.origin, m.joints[0].params.direction);
  const auto a = afford_offsets(c.points[0], c.points[1], m.affordable_point(0));
  EXPECT_EQ(t[0].mu, o.mu);
  EXPECT_EQ(t[0].nu, o.nu);
  EXPECT_EQ(t[0].theta, o.theta);
  EXPECT_EQ(t[0].mu_a, a.mu_a);
  EXPECT_EQ(t[0].nu_a, a.nu_a);
  EXPECT_THROW(tuple_targets(m, c, {0, 9}), std::out_of_range);
}
