#include "artivote/model.hpp"
#include "artivote/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numeric>

using namespace artivote;

namespace {

NetConfig small_config(int joints = 1) {
  NetConfig c;
  c.tuple_size = 3;
  c.shot_dim = 8;
  c.embed_hidden = 6;
  c.embed_out = 4;
  c.width = 10;
  c.blocks = 2;
  c.joints = joints;
  c.theta_bins = 7;
  return c;
}

TupleSample random_sample(const NetConfig& cfg, Rng& rng) {
  TupleSample s;
  for (int i = 0; i < 3 * cfg.pairs(); ++i) s.f1.push_back(static_cast<float>(rng.uniform(-0.5, 0.5)));
  for (int i = 0; i < cfg.pairs(); ++i) s.f2.push_back(static_cast<float>(rng.uniform(0.0, 1.0)));
  for (int i = 0; i < cfg.tuple_size * cfg.shot_dim; ++i) s.shot.push_back(static_cast<float>(rng.uniform(0.0, 0.5)));
  return s;
}

TupleTargets random_targets(int joints, Rng& rng) {
  TupleTargets t(static_cast<std::size_t>(joints));
  std::vector<int> scores(static_cast<std::size_t>(joints));
  for (auto& c : scores) c = rng.uniform() < 0.6 ? 1 : 0;
  for (auto& v : t) {
    v.mu = rng.uniform(-0.3, 0.3);
    v.nu = rng.uniform(0.0, 0.3);
    v.theta = rng.uniform(-1.0, 1.0);
    v.mu_a = rng.uniform(-0.3, 0.3);
    v.nu_a = rng.uniform(0.0, 0.3);
    v.scores = scores;
  }
  return t;
}

struct Problem {
  std::vector<TupleSample> samples;
  std::vector<TupleTargets> targets;
};

Problem random_problem(const NetConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Problem p;
  for (std::size_t i = 0; i < n; ++i) {
    p.samples.push_back(random_sample(cfg, rng));
    p.targets.push_back(random_targets(cfg.joints, rng));
  }
  return p;
}

JointPrediction make_pred(double mu, double nu, std::vector<double> dist, double mu_a, double nu_a, double c_hat) {
  JointPrediction p;
  p.mu = mu;
  p.nu = nu;
  p.theta_dist = std::move(dist);
  p.mu_a = mu_a;
  p.nu_a = nu_a;
  p.c_hat = c_hat;
  return p;
}

VoteTargets make_target(double mu, double nu, double theta, double mu_a, double nu_a, int c) {
  VoteTargets t;
  t.mu = mu;
  t.nu = nu;
  t.theta = theta;
  t.mu_a = mu_a;
  t.nu_a = nu_a;
  t.scores = {c};
  return t;
}

}  // namespace

TEST(NetConfig, DefaultShapes) {
  const NetConfig c;
  EXPECT_EQ(c.geo_dim(), 40);
  EXPECT_EQ(c.input_dim(), 200);
  EXPECT_EQ(c.output_dim(), 65);
  ArticulationNet<float> net(c);
  ASSERT_EQ(net.layers().size(), 1u + 1u + 1u + 8u + 1u);
  EXPECT_EQ(net.layers()[0].in, 352);
  EXPECT_EQ(net.layers()[0].out, 64);
  EXPECT_EQ(net.layers()[1].out, 32);
  EXPECT_EQ(net.layers()[2].in, 200);
  EXPECT_EQ(net.layers()[2].out, 256);
  EXPECT_EQ(net.layers().back().out, 65);
}

TEST(Forward, DeterministicAndNormalized) {
  const NetConfig cfg = small_config(2);
  ArticulationNet<float> net(cfg);
  net.initialize(3);
  Rng rng(1);
  const auto s = random_sample(cfg, rng);
  const auto a = forward(net, s), b = forward(net, s);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(a[j].mu, b[j].mu);
    EXPECT_EQ(a[j].theta_dist, b[j].theta_dist);
    EXPECT_EQ(a[j].c_hat, b[j].c_hat);
    EXPECT_NEAR(std::accumulate(a[j].theta_dist.begin(), a[j].theta_dist.end(), 0.0), 1.0, 1e-6);
    for (double v : a[j].theta_dist) EXPECT_GE(v, 0.0);
    EXPECT_GT(a[j].c_hat, 0.0);
    EXPECT_LT(a[j].c_hat, 1.0);
  }
}

TEST(Forward, ZeroWeightsGiveUniformAndHalf) {
  const NetConfig cfg = small_config();
  ArticulationNet<double> net(cfg);
  Rng rng(2);
  const auto p = forward(net, random_sample(cfg, rng));
  for (double v : p[0].theta_dist) EXPECT_DOUBLE_EQ(v, 1.0 / cfg.theta_bins);
  EXPECT_DOUBLE_EQ(p[0].c_hat, 0.5);
  EXPECT_EQ(p[0].mu, 0.0);
}

TEST(Forward, InferenceClampsRadii) {
  const NetConfig cfg = small_config();
  ArticulationNet<double> net(cfg);
  const auto& head = net.layers().back();
  net.params()[head.bias_offset() + 1] = -0.25;                                        // nu
  net.params()[head.bias_offset() + 3 + static_cast<std::size_t>(cfg.theta_bins)] = -0.5;  // nu_a
  Rng rng(3);
  const auto s = random_sample(cfg, rng);
  const auto train = forward(net, s, Mode::train)[0];
  const auto infer = forward(net, s, Mode::inference)[0];
  EXPECT_DOUBLE_EQ(train.nu, -0.25);
  EXPECT_DOUBLE_EQ(train.nu_a, -0.5);
  EXPECT_EQ(infer.nu, 0.0);
  EXPECT_EQ(infer.nu_a, 0.0);
}

TEST(Forward, ShapeMismatchThrows) {
  const NetConfig cfg = small_config();
  ArticulationNet<float> net(cfg);
  Rng rng(4);
  auto s = random_sample(cfg, rng);
  s.f2.pop_back();
  EXPECT_THROW(forward(net, s), std::invalid_argument);
}

TEST(SoftTarget, ArgmaxSumAndMirror) {
  for (double theta : {-1.0, -0.73, -0.21, 0.013, 0.05, 0.51, 0.99, 1.0}) {
    const auto t = soft_target(theta);
    ASSERT_EQ(t.size(), 60u);
    EXPECT_NEAR(std::accumulate(t.begin(), t.end(), 0.0), 1.0, 1e-12);
    const auto arg = std::max_element(t.begin(), t.end()) - t.begin();
    const auto expected = std::min<long>(59, static_cast<long>(std::floor((theta + 1.0) / 2.0 * 60)));
    EXPECT_EQ(arg, expected) << theta;
  }
  const auto lo = soft_target(-1.0), hi = soft_target(1.0);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_NEAR(lo[i], hi[59 - i], 1e-15);
  EXPECT_THROW(soft_target(1.5), std::invalid_argument);
}

TEST(TupleVoteLoss, PerfectAndArithmetic) {
  const auto target = make_target(0.1, 0.2, 0.3, -0.1, 0.05, 1);
  const auto perfect = make_pred(0.1, 0.2, soft_target(0.3), -0.1, 0.05, 0.9);
  EXPECT_NEAR(tuple_vote_loss(perfect, target), 0.0, 1e-9);

  // l_orig alone: prediction (0, 0) against (1, 2).
  const auto t2 = make_target(1.0, 2.0, 0.0, 0.0, 0.0, 1);
  const auto p2 = make_pred(0.0, 0.0, soft_target(0.0), 0.0, 0.0, 0.5);
  EXPECT_NEAR(tuple_vote_loss(p2, t2), 2.5, 1e-12);
}

TEST(TupleVoteLoss, KlNonnegative) {
  Rng rng(5);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> p(60);
    double s = 0.0;
    for (auto& v : p) s += (v = rng.uniform(0.0, 1.0));
    for (auto& v : p) v /= s;
    const auto t = soft_target(rng.uniform(-1.0, 1.0));
    EXPECT_GE(kl_divergence(t, p), 0.0);
  }
}

TEST(BatchLoss, AllNegativeIsScoreTermOnly) {
  std::vector<Prediction> preds{{make_pred(5, 5, soft_target(0.9), 5, 5, 0.3)}, {make_pred(-1, 2, soft_target(-0.9), 3, 1, 0.6)}};
  std::vector<TupleTargets> targets{{make_target(0, 0, 0, 0, 0, 0)}, {make_target(0, 0, 0, 0, 0, 0)}};
  const LossWeights w;
  const auto l = batch_loss(preds, targets, w);
  EXPECT_EQ(l.vote, 0.0);
  EXPECT_EQ(l.positives, 0u);
  EXPECT_DOUBLE_EQ(l.total, w.lambda_aa * l.art);
  EXPECT_NEAR(l.art, (-std::log(0.7) - std::log(0.4)) / 2.0, 1e-12);
}

TEST(BatchLoss, PerfectScoresNearZero) {
  std::vector<Prediction> preds{{make_pred(0, 0, soft_target(0), 0, 0, 1.0)}, {make_pred(0, 0, soft_target(0), 0, 0, 0.0)}};
  std::vector<TupleTargets> targets{{make_target(0, 0, 0, 0, 0, 1)}, {make_target(0, 0, 0, 0, 0, 0)}};
  EXPECT_LE(batch_loss(preds, targets).art, 2e-7);
  EXPECT_NEAR(clamped_bce(1, 1.0), -std::log(1.0 - 1e-7), 1e-15);
}

TEST(BatchLoss, HandComputedTwoTuples) {
  const std::vector<double> dist{0.1, 0.2, 0.3, 0.4};
  std::vector<Prediction> preds{{make_pred(0.1, 0.2, dist, 0.0, 0.5, 0.8)}, {make_pred(0.7, 0.1, dist, 0.2, 0.2, 0.3)}};
  std::vector<TupleTargets> targets{{make_target(0.0, 0.4, 0.0, 0.1, 0.5, 1)}, {make_target(0.3, 0.3, 0.5, 0.3, 0.3, 0)}};
  // Soft target for theta = 0 over 4 bins: centers 0.5..3.5, mean 2, sigma 1.
  const double a = std::exp(-1.125), b = std::exp(-0.125);
  const double t[4] = {a / (2 * a + 2 * b), b / (2 * a + 2 * b), b / (2 * a + 2 * b), a / (2 * a + 2 * b)};
  double kl = 0.0;
  for (int i = 0; i < 4; ++i) kl += t[i] * std::log(t[i] / dist[static_cast<std::size_t>(i)]);
  const double vote = 0.5 * (0.01 + 0.04) + 0.1 * kl + 1.0 * 0.5 * (0.01 + 0.0);
  const double art = (-std::log(0.8) - std::log(0.7)) / 2.0;
  const auto l = batch_loss(preds, targets);
  EXPECT_NEAR(l.vote, vote, 1e-12);
  EXPECT_NEAR(l.art, art, 1e-12);
  EXPECT_NEAR(l.total, vote + 0.5 * art, 1e-12);
}

TEST(BatchLoss, PermutationInvariantAndIgnoresNegatives) {
  const NetConfig cfg = small_config(2);
  ArticulationNet<double> net(cfg);
  net.initialize(7);
  auto prob = random_problem(cfg, 16, 8);
  const auto preds = forward_batch(net, std::span<const TupleSample>(prob.samples), Mode::train);
  const auto base = batch_loss(preds, prob.targets);

  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::reverse(perm.begin(), perm.end());
  std::vector<Prediction> pp;
  std::vector<TupleTargets> tp;
  for (auto i : perm) {
    pp.push_back(preds[i]);
    tp.push_back(prob.targets[i]);
  }
  EXPECT_NEAR(batch_loss(pp, tp).total, base.total, 1e-12);

  auto changed = prob.targets;
  for (auto& tt : changed) {
    for (std::size_t j = 0; j < tt.size(); ++j) {
      if (tt[j].scores[j] == 0) {
        tt[j].mu += 3.0;
        tt[j].theta = -tt[j].theta;
        tt[j].nu_a += 1.0;
      }
    }
  }
  EXPECT_EQ(batch_loss(preds, changed).vote, base.vote);
}

TEST(LossGradient, MatchesDecodedBatchLoss) {
  const NetConfig cfg = small_config(2);
  ArticulationNet<double> net(cfg);
  net.initialize(9);
  const auto prob = random_problem(cfg, 12, 10);
  const auto batch = make_batch<double>(cfg, std::span<const TupleSample>(prob.samples));
  const auto l = loss_with_gradient(net, batch, std::span<const TupleTargets>(prob.targets), LossWeights{},
                                    static_cast<std::vector<double>*>(nullptr));
  const auto preds = forward_batch(net, std::span<const TupleSample>(prob.samples), Mode::train);
  EXPECT_NEAR(l.total, batch_loss(preds, prob.targets).total, 1e-12);
}

TEST(GradCheck, SmallNet) {
  const NetConfig cfg = small_config(2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ArticulationNet<double> net(cfg);
    net.initialize(100 + seed);
    const auto prob = random_problem(cfg, 6, 200 + seed);
    const auto batch = make_batch<double>(cfg, std::span<const TupleSample>(prob.samples));
    const auto r = grad_check(net, batch, std::span<const TupleTargets>(prob.targets), LossWeights{}, seed);
    EXPECT_EQ(r.checked, 200u);
    EXPECT_LE(r.max_relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(GradCheck, LinearNet) {
  NetConfig cfg = small_config();
  cfg.activation = Activation::identity;
  ArticulationNet<double> net(cfg);
  net.initialize(11);
  const auto prob = random_problem(cfg, 6, 12);
  const auto batch = make_batch<double>(cfg, std::span<const TupleSample>(prob.samples));
  // Only the quadratic offset terms remain, so central differences are exact
  // up to rounding.
  LossWeights w;
  w.lambda_d = 0.0;
  w.lambda_aa = 0.0;
  const auto r = grad_check(net, batch, std::span<const TupleTargets>(prob.targets), w, 1);
  EXPECT_LE(r.max_relative_error, 1e-7);
}

TEST(GradCheck, ZeroLossIsStationary) {
  const NetConfig cfg = small_config();
  ArticulationNet<double> net(cfg);
  const auto& head = net.layers().back();
  const double theta = 0.3;
  const auto st = soft_target(theta, cfg.theta_bins);
  auto bias = [&](int i) -> double& { return net.params()[head.bias_offset() + static_cast<std::size_t>(i)]; };
  bias(0) = 0.12;
  bias(1) = 0.2;
  for (int i = 0; i < cfg.theta_bins; ++i) bias(2 + i) = std::log(st[static_cast<std::size_t>(i)]);
  bias(2 + cfg.theta_bins) = -0.05;
  bias(3 + cfg.theta_bins) = 0.07;
  bias(4 + cfg.theta_bins) = 40.0;  // score saturates at the clamp
  Rng rng(13);
  std::vector<TupleSample> samples{random_sample(cfg, rng), random_sample(cfg, rng)};
  const VoteTargets t = make_target(0.12, 0.2, theta, -0.05, 0.07, 1);
  const std::vector<TupleTargets> targets{{t}, {t}};
  const auto batch = make_batch<double>(cfg, std::span<const TupleSample>(samples));
  const auto r = grad_check(net, batch, std::span<const TupleTargets>(targets), LossWeights{}, 2);
  EXPECT_LE(r.gradient_norm, 1e-6);
}

namespace {

TrainingSet toy_training_set(const NetConfig& net) {
  DatasetConfig d;
  d.states = 2;
  d.views = 2;
  d.tuples_per_cloud = 32;
  d.features.max_points = 512;
  TrainingSet a = build_training_set(Category::door_cabinet, 1, 0, 2, d, net);
  return a;
}

NetConfig toy_net() {
  NetConfig c;
  c.width = 32;
  c.blocks = 1;
  c.embed_hidden = 16;
  c.embed_out = 8;
  return c;
}

}  // namespace

TEST(Train, LossDecreasesOnToySet) {
  const NetConfig net = toy_net();
  const auto data = toy_training_set(net);
  ASSERT_EQ(data.size(), 2u * 2u * 2u * 32u);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.seed = 5;
  ArticulationNet<float> init(net);
  init.initialize(cfg.seed);
  const double before = dataset_loss(init, data, cfg.weights);
  const auto result = train(data, cfg);
  ASSERT_EQ(result.epoch_loss.size(), 1u);
  EXPECT_LT(dataset_loss(result.net, data, cfg.weights), before);
}

TEST(Train, SameSeedSameCurveAcrossWorkerCounts) {
  const NetConfig net = toy_net();
  const auto data = toy_training_set(net);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.seed = 6;
  setenv("ARTIVOTE_THREADS", "1", 1);
  const auto a = train(data, cfg);
  setenv("ARTIVOTE_THREADS", "4", 1);
  const auto b = train(data, cfg);
  unsetenv("ARTIVOTE_THREADS");
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(a.net.params(), b.net.params());
}

TEST(Train, WithoutScoreSupervision) {
  const NetConfig net = toy_net();
  const auto data = toy_training_set(net);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.weights.lambda_aa = 0.0;
  const auto r = train(data, cfg);
  EXPECT_TRUE(std::isfinite(r.epoch_loss[0]));
}

TEST(Train, RejectsBadInput) {
  TrainingSet empty;
  EXPECT_THROW(train(empty, TrainConfig{}), std::invalid_argument);
  const auto data = toy_training_set(toy_net());
  TrainConfig cfg;
  cfg.weights.lambda_d = -1.0;
  EXPECT_THROW(train(data, cfg), std::invalid_argument);
}

TEST(TrainingSet, BatchMatchesMakeBatch) {
  const NetConfig cfg = small_config();
  const auto prob = random_problem(cfg, 5, 14);
  TrainingSet data;
  data.net = cfg;
  for (std::size_t i = 0; i < 5; ++i) data.add(prob.samples[i], prob.targets[i]);
  const std::vector<std::size_t> rows{0, 1, 2, 3, 4};
  const auto a = data.batch<float>(rows);
  const auto b = make_batch<float>(cfg, std::span<const TupleSample>(prob.samples));
  EXPECT_EQ(a.geo, b.geo);
  EXPECT_EQ(a.shot, b.shot);
  auto bad = prob.samples[0];
  bad.shot.pop_back();
  EXPECT_THROW(data.add(bad, prob.targets[0]), std::invalid_argument);
}

TEST(ArticulationNet, CastRoundTrip) {
  ArticulationNet<float> net(small_config());
  net.initialize(15);
  const auto back = net.cast<double>().cast<float>();
  EXPECT_EQ(back.params(), net.params());
}
