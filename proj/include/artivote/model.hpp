#pragma once

// Residual MLP that maps tuple features to per-joint voting targets, the
// vote / articulation losses, analytic backpropagation and SGD training.

#include "artivote/features.hpp"
#include "artivote/geometry.hpp"
#include "artivote/parallel.hpp"
#include "artivote/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace artivote {

enum class Activation { silu, identity };

struct NetConfig {
  int tuple_size = 5;
  int shot_dim = kShotDim;
  int embed_hidden = 64;
  int embed_out = 32;
  int width = 256;
  int blocks = 4;
  int joints = 1;
  int theta_bins = 60;
  Activation activation = Activation::silu;

  int pairs() const { return tuple_size * (tuple_size - 1) / 2; }
  int geo_dim() const { return 4 * pairs(); }  // F1 (3 per pair) + F2 (1 per pair)
  int input_dim() const { return geo_dim() + tuple_size * embed_out; }
  int head_stride() const { return theta_bins + 5; }
  int output_dim() const { return joints * head_stride(); }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Loss weights of the vote and articulation-awareness terms.
struct LossWeights {
  double lambda_d = 0.1;
  double lambda_a = 1.0;
  double lambda_aa = 0.5;
};

inline constexpr double kScoreClamp = 1e-7;

/// Per-joint network output. `theta_dist` is a distribution over bins that
/// evenly split [-1, 1].
struct JointPrediction {
  double mu = 0.0;
  double nu = 0.0;
  std::vector<double> theta_dist;
  double mu_a = 0.0;
  double nu_a = 0.0;
  double c_hat = 0.5;

  /// Center of the most probable bin (lowest index on ties).
  double theta_star() const {
    const auto it = std::max_element(theta_dist.begin(), theta_dist.end());
    const auto i = static_cast<double>(it - theta_dist.begin());
    return -1.0 + (i + 0.5) * 2.0 / static_cast<double>(theta_dist.size());
  }
};

using Prediction = std::vector<JointPrediction>;

/// Gaussian bump over `bins` cells centered at theta's continuous bin
/// coordinate (theta+1)/2*bins, std `sigma_bins`, normalized to sum 1.
inline std::vector<double> soft_target(double theta, int bins = 60, double sigma_bins = 1.0) {
  if (!(std::abs(theta) <= 1.0)) throw std::invalid_argument("theta outside [-1, 1]");
  if (bins < 1 || !(sigma_bins > 0.0)) throw std::invalid_argument("invalid soft target parameters");
  const double x = (theta + 1.0) / 2.0 * bins;
  std::vector<double> t(static_cast<std::size_t>(bins));
  double sum = 0.0;
  for (int i = 0; i < bins; ++i) {
    const double d = (i + 0.5) - x;
    t[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma_bins * sigma_bins));
    sum += t[static_cast<std::size_t>(i)];
  }
  for (double& v : t) v /= sum;
  return t;
}

/// KL(target || pred), with 0 log 0 = 0.
inline double kl_divergence(std::span<const double> target, std::span<const double> pred) {
  double kl = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] > 0.0) kl += target[i] * (std::log(target[i]) - std::log(std::max(pred[i], 1e-300)));
  }
  return kl;
}

inline double clamped_bce(double c, double c_hat) {
  const double p = std::clamp(c_hat, kScoreClamp, 1.0 - kScoreClamp);
  return -(c * std::log(p) + (1.0 - c) * std::log(1.0 - p));
}

/// l_orig + lambda_d * l_dir + lambda_a * l_afford for one (tuple, joint).
inline double tuple_vote_loss(const JointPrediction& pred, const VoteTargets& target, const LossWeights& w = {},
                              double sigma_bins = 1.0) {
  const double l_orig = 0.5 * ((pred.mu - target.mu) * (pred.mu - target.mu) + (pred.nu - target.nu) * (pred.nu - target.nu));
  const double l_afford = 0.5 * ((pred.mu_a - target.mu_a) * (pred.mu_a - target.mu_a) +
                                 (pred.nu_a - target.nu_a) * (pred.nu_a - target.nu_a));
  const auto t = soft_target(target.theta, static_cast<int>(pred.theta_dist.size()), sigma_bins);
  const double l_dir = kl_divergence(t, pred.theta_dist);
  return l_orig + w.lambda_d * l_dir + w.lambda_a * l_afford;
}

struct LossTerms {
  double total = 0.0;
  double vote = 0.0;
  double art = 0.0;
  std::size_t positives = 0;  // (tuple, joint) pairs with c = 1
};

/// Per-tuple targets: one VoteTargets per joint.
using TupleTargets = std::vector<VoteTargets>;

/// L_vote (mean vote loss over c = 1 pairs) + lambda_aa * L_art (mean BCE over
/// all tuple-joint pairs).
inline LossTerms batch_loss(const std::vector<Prediction>& preds, const std::vector<TupleTargets>& targets,
                            const LossWeights& w = {}, double sigma_bins = 1.0) {
  if (preds.size() != targets.size()) throw std::invalid_argument("predictions and targets are not aligned");
  LossTerms out;
  double vote_sum = 0.0, art_sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    if (preds[k].size() != targets[k].size()) throw std::invalid_argument("joint count mismatch");
    for (std::size_t j = 0; j < preds[k].size(); ++j) {
      const int c = targets[k][j].scores.at(j);
      art_sum += clamped_bce(c, preds[k][j].c_hat);
      ++pairs;
      if (c == 1) {
        vote_sum += tuple_vote_loss(preds[k][j], targets[k][j], w, sigma_bins);
        ++out.positives;
      }
    }
  }
  out.art = pairs ? art_sum / static_cast<double>(pairs) : 0.0;
  out.vote = out.positives ? vote_sum / static_cast<double>(out.positives) : 0.0;
  out.total = out.vote + w.lambda_aa * out.art;
  return out;
}

/// Column-major batch of network inputs: `geo` is geo_dim x B (F1 then F2),
/// `shot` is shot_dim x (M*B) with the M descriptors of tuple b in columns
/// b*M .. b*M+M-1.
template <typename Scalar>
struct Batch {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Matrix geo;
  Matrix shot;
  Eigen::Index size() const { return geo.cols(); }
};

template <typename Scalar>
Batch<Scalar> make_batch(const NetConfig& cfg, std::span<const TupleSample> samples) {
  Batch<Scalar> b;
  const auto n = static_cast<Eigen::Index>(samples.size());
  b.geo.resize(cfg.geo_dim(), n);
  b.shot.resize(cfg.shot_dim, n * cfg.tuple_size);
  for (Eigen::Index k = 0; k < n; ++k) {
    const TupleSample& s = samples[static_cast<std::size_t>(k)];
    if (static_cast<int>(s.f1.size()) != 3 * cfg.pairs() || static_cast<int>(s.f2.size()) != cfg.pairs() ||
        static_cast<int>(s.shot.size()) != cfg.tuple_size * cfg.shot_dim) {
      throw std::invalid_argument("tuple feature shape does not match network");
    }
    for (std::size_t i = 0; i < s.f1.size(); ++i) b.geo(static_cast<Eigen::Index>(i), k) = static_cast<Scalar>(s.f1[i]);
    for (std::size_t i = 0; i < s.f2.size(); ++i)
      b.geo(static_cast<Eigen::Index>(s.f1.size() + i), k) = static_cast<Scalar>(s.f2[i]);
    for (int m = 0; m < cfg.tuple_size; ++m) {
      for (int i = 0; i < cfg.shot_dim; ++i) {
        b.shot(i, k * cfg.tuple_size + m) = static_cast<Scalar>(s.shot[static_cast<std::size_t>(m * cfg.shot_dim + i)]);
      }
    }
  }
  return b;
}

/// Network parameters in one flat buffer; each layer is a column-major
/// (out x in) weight matrix followed by its bias.
template <typename Scalar>
class ArticulationNet {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<Matrix>;
  using ConstMatMap = Eigen::Map<const Matrix>;
  using VecMap = Eigen::Map<Vector>;
  using ConstVecMap = Eigen::Map<const Vector>;
  // Aligned base address, so vectorized kernels over the weights round the
  // same way for every copy of a network.
  using ParamVector = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

  struct Layer {
    int out, in;
    std::size_t offset;
    std::size_t weight_size() const { return static_cast<std::size_t>(out) * static_cast<std::size_t>(in); }
    std::size_t bias_offset() const { return offset + weight_size(); }
    std::size_t end() const { return bias_offset() + static_cast<std::size_t>(out); }
  };

  ArticulationNet() : ArticulationNet(NetConfig{}) {}

  explicit ArticulationNet(const NetConfig& cfg) : cfg_(cfg) {
    if (cfg.tuple_size < 2 || cfg.width < 1 || cfg.blocks < 0 || cfg.joints < 1 || cfg.theta_bins < 2 ||
        cfg.embed_hidden < 1 || cfg.embed_out < 1 || cfg.shot_dim < 1) {
      throw std::invalid_argument("invalid network configuration");
    }
    add_layer(cfg.embed_hidden, cfg.shot_dim);
    add_layer(cfg.embed_out, cfg.embed_hidden);
    add_layer(cfg.width, cfg.input_dim());
    for (int b = 0; b < cfg.blocks; ++b) {
      add_layer(cfg.width, cfg.width);
      add_layer(cfg.width, cfg.width);
    }
    add_layer(cfg.output_dim(), cfg.width);
    params_.assign(layers_.back().end(), Scalar(0));
  }

  const NetConfig& config() const { return cfg_; }
  const std::vector<Layer>& layers() const { return layers_; }
  ParamVector& params() { return params_; }
  const ParamVector& params() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  /// He-style Gaussian initialization; the second layer of every residual
  /// block and the output head start small.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      double stddev = std::sqrt(2.0 / L.in);
      const bool block_out = l >= 3 && l + 1 < layers_.size() && (l - 3) % 2 == 1;
      if (block_out) stddev *= 0.1;
      if (l + 1 == layers_.size()) stddev = 0.1 / std::sqrt(static_cast<double>(L.in));
      for (std::size_t i = 0; i < L.weight_size(); ++i) params_[L.offset + i] = static_cast<Scalar>(rng.normal(0.0, stddev));
      for (int i = 0; i < L.out; ++i) params_[L.bias_offset() + static_cast<std::size_t>(i)] = Scalar(0);
    }
  }

  template <typename Other>
  ArticulationNet<Other> cast() const {
    ArticulationNet<Other> o(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) o.params()[i] = static_cast<Other>(params_[i]);
    return o;
  }

  MatMap weight(std::size_t l) { return MatMap(params_.data() + layers_[l].offset, layers_[l].out, layers_[l].in); }
  ConstMatMap weight(std::size_t l) const {
    return ConstMatMap(params_.data() + layers_[l].offset, layers_[l].out, layers_[l].in);
  }
  VecMap bias(std::size_t l) { return VecMap(params_.data() + layers_[l].bias_offset(), layers_[l].out); }
  ConstVecMap bias(std::size_t l) const { return ConstVecMap(params_.data() + layers_[l].bias_offset(), layers_[l].out); }

  /// Intermediate values kept for backpropagation.
  struct Cache {
    Matrix e1, a1, e2, a2, x, z0;
    std::vector<Matrix> h, u, v;
    Matrix out;
  };

  /// Raw outputs (output_dim x B): per joint [mu, nu, theta logits..., mu_a,
  /// nu_a, score logit].
  Matrix forward_raw(const Batch<Scalar>& in, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    const Eigen::Index B = in.size();
    const int M = cfg_.tuple_size;
    if (in.geo.rows() != cfg_.geo_dim() || in.shot.rows() != cfg_.shot_dim || in.shot.cols() != B * M) {
      throw std::invalid_argument("batch shape does not match network");
    }
    c.e1 = (weight(0) * in.shot).colwise() + bias(0);
    c.a1 = activate(c.e1);
    c.e2 = (weight(1) * c.a1).colwise() + bias(1);
    c.a2 = activate(c.e2);
    c.x.resize(cfg_.input_dim(), B);
    c.x.topRows(cfg_.geo_dim()) = in.geo;
    c.x.bottomRows(static_cast<Eigen::Index>(M) * cfg_.embed_out) =
        Eigen::Map<const Matrix>(c.a2.data(), static_cast<Eigen::Index>(M) * cfg_.embed_out, B);
    c.z0 = (weight(2) * c.x).colwise() + bias(2);
    c.h.assign(static_cast<std::size_t>(cfg_.blocks) + 1, Matrix());
    c.u.assign(static_cast<std::size_t>(cfg_.blocks), Matrix());
    c.v.assign(static_cast<std::size_t>(cfg_.blocks), Matrix());
    c.h[0] = activate(c.z0);
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::size_t l1 = 3 + 2 * static_cast<std::size_t>(b);
      const auto bi = static_cast<std::size_t>(b);
      c.u[bi] = (weight(l1) * c.h[bi]).colwise() + bias(l1);
      c.v[bi] = activate(c.u[bi]);
      c.h[bi + 1] = c.h[bi] + ((weight(l1 + 1) * c.v[bi]).colwise() + bias(l1 + 1));
    }
    c.out = (weight(layers_.size() - 1) * c.h.back()).colwise() + bias(layers_.size() - 1);
    return c.out;
  }

  /// Gradient of the loss w.r.t. all parameters given d(loss)/d(out).
  std::vector<Scalar> backward(const Batch<Scalar>& in, const Cache& c, const Matrix& d_out) const {
    std::vector<Scalar> grad(params_.size(), Scalar(0));
    // Products are evaluated into aligned temporaries before the copy into
    // `grad`, whose address alignment varies between threads and would change
    // the vectorized rounding.
    auto gw = [&](std::size_t l) { return MatMap(grad.data() + layers_[l].offset, layers_[l].out, layers_[l].in); };
    auto gb = [&](std::size_t l) { return VecMap(grad.data() + layers_[l].bias_offset(), layers_[l].out); };
    const std::size_t head = layers_.size() - 1;
    const int M = cfg_.tuple_size;
    const Eigen::Index B = in.size();

    gw(head) = Matrix(d_out * c.h.back().transpose());
    gb(head) = Vector(d_out.rowwise().sum());
    Matrix dh = weight(head).transpose() * d_out;
    for (int b = cfg_.blocks - 1; b >= 0; --b) {
      const std::size_t l1 = 3 + 2 * static_cast<std::size_t>(b);
      const auto bi = static_cast<std::size_t>(b);
      gw(l1 + 1) = Matrix(dh * c.v[bi].transpose());
      gb(l1 + 1) = Vector(dh.rowwise().sum());
      Matrix du = (weight(l1 + 1).transpose() * dh).cwiseProduct(activate_grad(c.u[bi]));
      gw(l1) = Matrix(du * c.h[bi].transpose());
      gb(l1) = Vector(du.rowwise().sum());
      dh.noalias() += weight(l1).transpose() * du;
    }
    const Matrix dz0 = dh.cwiseProduct(activate_grad(c.z0));
    gw(2) = Matrix(dz0 * c.x.transpose());
    gb(2) = Vector(dz0.rowwise().sum());
    const Matrix dx = weight(2).transpose() * dz0;
    // Embedding rows of dx, reshaped back to embed_out x (M*B).
    Matrix da2_cols(cfg_.embed_out, B * M);
    for (Eigen::Index k = 0; k < B; ++k) {
      for (int m = 0; m < M; ++m) {
        da2_cols.col(k * M + m) =
            dx.col(k).segment(cfg_.geo_dim() + static_cast<Eigen::Index>(m) * cfg_.embed_out, cfg_.embed_out);
      }
    }
    const Matrix de2 = da2_cols.cwiseProduct(activate_grad(c.e2));
    gw(1) = Matrix(de2 * c.a1.transpose());
    gb(1) = Vector(de2.rowwise().sum());
    const Matrix de1 = (weight(1).transpose() * de2).cwiseProduct(activate_grad(c.e1));
    gw(0) = Matrix(de1 * in.shot.transpose());
    gb(0) = Vector(de1.rowwise().sum());
    return grad;
  }

  /// Decodes raw outputs into predictions. With `clamp_offsets`, nu and nu_a
  /// are clamped to be nonnegative.
  std::vector<Prediction> decode(const Matrix& out, bool clamp_offsets) const {
    std::vector<Prediction> preds(static_cast<std::size_t>(out.cols()));
    const int S = cfg_.head_stride();
    const int nb = cfg_.theta_bins;
    for (Eigen::Index k = 0; k < out.cols(); ++k) {
      Prediction& p = preds[static_cast<std::size_t>(k)];
      p.resize(static_cast<std::size_t>(cfg_.joints));
      for (int j = 0; j < cfg_.joints; ++j) {
        const Eigen::Index o = static_cast<Eigen::Index>(j) * S;
        JointPrediction& jp = p[static_cast<std::size_t>(j)];
        jp.mu = static_cast<double>(out(o, k));
        jp.nu = static_cast<double>(out(o + 1, k));
        jp.theta_dist.resize(static_cast<std::size_t>(nb));
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < nb; ++i) mx = std::max(mx, static_cast<double>(out(o + 2 + i, k)));
        double sum = 0.0;
        for (int i = 0; i < nb; ++i) {
          const double e = std::exp(static_cast<double>(out(o + 2 + i, k)) - mx);
          jp.theta_dist[static_cast<std::size_t>(i)] = e;
          sum += e;
        }
        for (double& v : jp.theta_dist) v /= sum;
        jp.mu_a = static_cast<double>(out(o + 2 + nb, k));
        jp.nu_a = static_cast<double>(out(o + 3 + nb, k));
        jp.c_hat = 1.0 / (1.0 + std::exp(-static_cast<double>(out(o + 4 + nb, k))));
        if (clamp_offsets) {
          jp.nu = std::max(jp.nu, 0.0);
          jp.nu_a = std::max(jp.nu_a, 0.0);
        }
      }
    }
    return preds;
  }

 private:
  void add_layer(int out, int in) {
    const std::size_t off = layers_.empty() ? 0 : layers_.back().end();
    layers_.push_back(Layer{out, in, off});
  }

  Matrix activate(const Matrix& z) const {
    if (cfg_.activation == Activation::identity) return z;
    return z.unaryExpr([](Scalar x) { return x / (Scalar(1) + std::exp(-x)); });
  }

  Matrix activate_grad(const Matrix& z) const {
    if (cfg_.activation == Activation::identity) return Matrix::Ones(z.rows(), z.cols());
    return z.unaryExpr([](Scalar x) {
      const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
      return s + x * s * (Scalar(1) - s);
    });
  }

  NetConfig cfg_;
  std::vector<Layer> layers_;
  ParamVector params_;
};

enum class Mode { train, inference };

/// Prediction for a single tuple; offsets are clamped in inference mode.
template <typename Scalar>
Prediction forward(const ArticulationNet<Scalar>& net, const TupleSample& sample, Mode mode = Mode::inference) {
  const auto batch = make_batch<Scalar>(net.config(), std::span<const TupleSample>(&sample, 1));
  return net.decode(net.forward_raw(batch), mode == Mode::inference).front();
}

template <typename Scalar>
std::vector<Prediction> forward_batch(const ArticulationNet<Scalar>& net, std::span<const TupleSample> samples,
                                      Mode mode = Mode::inference) {
  return net.decode(net.forward_raw(make_batch<Scalar>(net.config(), samples)), mode == Mode::inference);
}

/// Batch normalizers: L_vote divides by the number of c = 1 pairs and L_art
/// by the number of tuple-joint pairs, both counted over the whole batch.
struct LossNormalizer {
  double positives = 0.0;
  double pairs = 0.0;

  static LossNormalizer of(std::span<const TupleTargets> targets) {
    LossNormalizer n;
    for (const auto& t : targets) {
      for (std::size_t j = 0; j < t.size(); ++j) {
        n.pairs += 1.0;
        if (t[j].scores.at(j) == 1) n.positives += 1.0;
      }
    }
    return n;
  }
};

/// Loss of raw outputs and its gradient d(loss)/d(out), consistent with
/// batch_loss on the decoded (unclamped) predictions.
template <typename Scalar>
LossTerms loss_and_gradient(const NetConfig& cfg, const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& out,
                            std::span<const TupleTargets> targets, const LossWeights& w, const LossNormalizer& norm,
                            Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>* d_out, double sigma_bins = 1.0) {
  if (static_cast<std::size_t>(out.cols()) != targets.size()) throw std::invalid_argument("targets not aligned");
  const int S = cfg.head_stride();
  const int nb = cfg.theta_bins;
  if (d_out) d_out->setZero(out.rows(), out.cols());
  LossTerms terms;
  double vote_sum = 0.0, art_sum = 0.0;
  std::vector<double> logp(static_cast<std::size_t>(nb));
  for (Eigen::Index k = 0; k < out.cols(); ++k) {
    const TupleTargets& tt = targets[static_cast<std::size_t>(k)];
    if (static_cast<int>(tt.size()) != cfg.joints) throw std::invalid_argument("joint count mismatch");
    for (int j = 0; j < cfg.joints; ++j) {
      const VoteTargets& t = tt[static_cast<std::size_t>(j)];
      const Eigen::Index o = static_cast<Eigen::Index>(j) * S;
      const int c = t.scores.at(static_cast<std::size_t>(j));

      const double logit = static_cast<double>(out(o + 4 + nb, k));
      const double c_hat = 1.0 / (1.0 + std::exp(-logit));
      art_sum += clamped_bce(c, c_hat);
      if (d_out && c_hat > kScoreClamp && c_hat < 1.0 - kScoreClamp) {
        (*d_out)(o + 4 + nb, k) = static_cast<Scalar>(w.lambda_aa * (c_hat - c) / norm.pairs);
      }
      if (c != 1) continue;
      ++terms.positives;

      const double mu = static_cast<double>(out(o, k)), nu = static_cast<double>(out(o + 1, k));
      const double mu_a = static_cast<double>(out(o + 2 + nb, k)), nu_a = static_cast<double>(out(o + 3 + nb, k));
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < nb; ++i) mx = std::max(mx, static_cast<double>(out(o + 2 + i, k)));
      double z = 0.0;
      for (int i = 0; i < nb; ++i) z += std::exp(static_cast<double>(out(o + 2 + i, k)) - mx);
      const double lz = std::log(z) + mx;
      for (int i = 0; i < nb; ++i) logp[static_cast<std::size_t>(i)] = static_cast<double>(out(o + 2 + i, k)) - lz;
      const auto target = soft_target(t.theta, nb, sigma_bins);
      double kl = 0.0;
      for (int i = 0; i < nb; ++i) {
        const double ti = target[static_cast<std::size_t>(i)];
        if (ti > 0.0) kl += ti * (std::log(ti) - logp[static_cast<std::size_t>(i)]);
      }
      const double l_orig = 0.5 * ((mu - t.mu) * (mu - t.mu) + (nu - t.nu) * (nu - t.nu));
      const double l_aff = 0.5 * ((mu_a - t.mu_a) * (mu_a - t.mu_a) + (nu_a - t.nu_a) * (nu_a - t.nu_a));
      vote_sum += l_orig + w.lambda_d * kl + w.lambda_a * l_aff;

      if (d_out) {
        const double s = 1.0 / norm.positives;
        (*d_out)(o, k) = static_cast<Scalar>(s * (mu - t.mu));
        (*d_out)(o + 1, k) = static_cast<Scalar>(s * (nu - t.nu));
        for (int i = 0; i < nb; ++i) {
          (*d_out)(o + 2 + i, k) = static_cast<Scalar>(
              s * w.lambda_d * (std::exp(logp[static_cast<std::size_t>(i)]) - target[static_cast<std::size_t>(i)]));
        }
        (*d_out)(o + 2 + nb, k) = static_cast<Scalar>(s * w.lambda_a * (mu_a - t.mu_a));
        (*d_out)(o + 3 + nb, k) = static_cast<Scalar>(s * w.lambda_a * (nu_a - t.nu_a));
      }
    }
  }
  terms.vote = norm.positives > 0 ? vote_sum / norm.positives : 0.0;
  terms.art = norm.pairs > 0 ? art_sum / norm.pairs : 0.0;
  terms.total = terms.vote + w.lambda_aa * terms.art;
  return terms;
}

/// Loss and full parameter gradient of a batch.
template <typename Scalar>
LossTerms loss_with_gradient(const ArticulationNet<Scalar>& net, const Batch<Scalar>& batch,
                             std::span<const TupleTargets> targets, const LossWeights& w, std::vector<Scalar>* grad,
                             const LossNormalizer* norm = nullptr) {
  using Matrix = typename ArticulationNet<Scalar>::Matrix;
  typename ArticulationNet<Scalar>::Cache cache;
  const Matrix out = net.forward_raw(batch, &cache);
  const LossNormalizer n = norm ? *norm : LossNormalizer::of(targets);
  Matrix d_out;
  const LossTerms terms = loss_and_gradient(net.config(), out, targets, w, n, grad ? &d_out : nullptr);
  if (grad) *grad = net.backward(batch, cache, d_out);
  return terms;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  double gradient_norm = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences on `count`
/// randomly chosen parameters. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult grad_check(const ArticulationNet<double>& net, const Batch<double>& batch,
                                  std::span<const TupleTargets> targets, const LossWeights& w, std::uint64_t seed,
                                  std::size_t count = 200, double eps = 1e-5, double floor = 1e-6) {
  std::vector<double> grad;
  loss_with_gradient(net, batch, targets, w, &grad);
  GradCheckResult r;
  double g2 = 0.0;
  for (double g : grad) g2 += g * g;
  r.gradient_norm = std::sqrt(g2);
  ArticulationNet<double> probe = net;
  Rng rng(seed);
  count = std::min(count, grad.size());
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t i = rng.index(grad.size());
    const double orig = probe.params()[i];
    probe.params()[i] = orig + eps;
    const double lp = loss_with_gradient(probe, batch, targets, w, static_cast<std::vector<double>*>(nullptr)).total;
    probe.params()[i] = orig - eps;
    const double lm = loss_with_gradient(probe, batch, targets, w, static_cast<std::vector<double>*>(nullptr)).total;
    probe.params()[i] = orig;
    const double numeric = (lp - lm) / (2.0 * eps);
    const double denom = std::max({std::abs(grad[i]), std::abs(numeric), floor});
    r.max_relative_error = std::max(r.max_relative_error, std::abs(grad[i] - numeric) / denom);
    ++r.checked;
  }
  return r;
}

/// Flat training examples: features stored as floats, targets per joint.
struct TrainingSet {
  NetConfig net;
  std::vector<float> geo;   // geo_dim per example
  std::vector<float> shot;  // tuple_size * shot_dim per example
  std::vector<TupleTargets> targets;

  std::size_t size() const { return targets.size(); }

  void add(const TupleSample& s, TupleTargets t) {
    if (static_cast<int>(s.f1.size() + s.f2.size()) != net.geo_dim() ||
        static_cast<int>(s.shot.size()) != net.tuple_size * net.shot_dim || static_cast<int>(t.size()) != net.joints) {
      throw std::invalid_argument("example shape does not match network");
    }
    geo.insert(geo.end(), s.f1.begin(), s.f1.end());
    geo.insert(geo.end(), s.f2.begin(), s.f2.end());
    shot.insert(shot.end(), s.shot.begin(), s.shot.end());
    targets.push_back(std::move(t));
  }

  template <typename Scalar>
  Batch<Scalar> batch(std::span<const std::size_t> rows) const {
    Batch<Scalar> b;
    const int gd = net.geo_dim();
    const int sd = net.tuple_size * net.shot_dim;
    const auto n = static_cast<Eigen::Index>(rows.size());
    b.geo.resize(gd, n);
    b.shot.resize(net.shot_dim, n * net.tuple_size);
    for (Eigen::Index k = 0; k < n; ++k) {
      const std::size_t r = rows[static_cast<std::size_t>(k)];
      for (int i = 0; i < gd; ++i) b.geo(i, k) = static_cast<Scalar>(geo[r * static_cast<std::size_t>(gd) + static_cast<std::size_t>(i)]);
      const float* src = shot.data() + r * static_cast<std::size_t>(sd);
      for (int m = 0; m < net.tuple_size; ++m) {
        for (int i = 0; i < net.shot_dim; ++i) b.shot(i, k * net.tuple_size + m) = static_cast<Scalar>(src[m * net.shot_dim + i]);
      }
    }
    return b;
  }

  std::vector<TupleTargets> targets_of(std::span<const std::size_t> rows) const {
    std::vector<TupleTargets> t;
    t.reserve(rows.size());
    for (std::size_t r : rows) t.push_back(targets[r]);
    return t;
  }
};

struct TrainConfig {
  LossWeights weights;
  double learning_rate = 0.02;
  double momentum = 0.9;
  int epochs = 10;
  int batch_size = 128;
  double grad_clip = 5.0;  // global-norm clip; 0 disables
  std::size_t grad_shards = 4;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ArticulationNet<float> net;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

/// Mean loss of the whole set (evaluated in chunks, each normalized on its
/// own), used for monitoring.
template <typename Scalar>
double dataset_loss(const ArticulationNet<Scalar>& net, const TrainingSet& data, const LossWeights& w,
                    std::size_t chunk = 512) {
  double sum = 0.0;
  std::size_t chunks = 0;
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    rows.clear();
    for (std::size_t r = b; r < std::min(data.size(), b + chunk); ++r) rows.push_back(r);
    const auto batch = data.batch<Scalar>(rows);
    const auto t = data.targets_of(rows);
    sum += loss_with_gradient(net, batch, std::span<const TupleTargets>(t), w,
                              static_cast<std::vector<Scalar>*>(nullptr))
               .total;
    ++chunks;
  }
  return chunks ? sum / static_cast<double>(chunks) : 0.0;
}

/// Minibatch SGD with momentum and a cosine-decayed learning rate. Each
/// minibatch gradient is computed over a fixed number of shards and summed in
/// shard order, so results do not depend on the worker count.
inline TrainResult train(const TrainingSet& data, const TrainConfig& cfg,
                         const ArticulationNet<float>* init = nullptr) {
  if (data.size() == 0) throw std::invalid_argument("empty training set");
  if (cfg.batch_size < 1 || cfg.epochs < 0 || cfg.grad_shards < 1) throw std::invalid_argument("invalid training configuration");
  if (cfg.weights.lambda_d < 0 || cfg.weights.lambda_a < 0 || cfg.weights.lambda_aa < 0) {
    throw std::invalid_argument("loss weights must be nonnegative");
  }
  TrainResult result{init ? *init : ArticulationNet<float>(data.net), {}};
  ArticulationNet<float>& net = result.net;
  if (!init) net.initialize(cfg.seed);
  if (!(net.config() == data.net)) throw std::invalid_argument("network does not match training set");

  Rng rng(cfg.seed ^ 0x5EEDULL);
  std::vector<float> velocity(net.parameter_count(), 0.0f);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (data.size() + bs - 1) / bs;
  const double total_steps = static_cast<double>(steps_per_epoch) * std::max(cfg.epochs, 1);
  std::size_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < data.size(); b += bs) {
      const std::span<const std::size_t> rows(order.data() + b, std::min(bs, data.size() - b));
      const auto all_targets = data.targets_of(rows);
      const LossNormalizer norm = LossNormalizer::of(all_targets);
      const std::size_t shards = std::min(cfg.grad_shards, rows.size());
      std::vector<std::vector<float>> grads(shards);
      std::vector<double> losses(shards, 0.0);
      parallel_shards(shards, [&](std::size_t s) {
        const auto [lo, hi] = shard_range(rows.size(), shards, s);
        const auto sub = rows.subspan(lo, hi - lo);
        const auto batch = data.batch<float>(sub);
        const std::span<const TupleTargets> tt(all_targets.data() + lo, hi - lo);
        losses[s] = loss_with_gradient(net, batch, tt, cfg.weights, &grads[s], &norm).total;
      });
      std::vector<float> g = std::move(grads[0]);
      for (std::size_t s = 1; s < shards; ++s) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += grads[s][i];
      }
      double batch_loss_value = 0.0;
      for (double l : losses) batch_loss_value += l;
      loss_sum += batch_loss_value;

      double scale = 1.0;
      if (cfg.grad_clip > 0.0) {
        double n2 = 0.0;
        for (float v : g) n2 += static_cast<double>(v) * v;
        const double n = std::sqrt(n2);
        if (n > cfg.grad_clip) scale = cfg.grad_clip / n;
      }
      const double lr = cfg.learning_rate * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(step) / total_steps));
      auto& p = net.params();
      for (std::size_t i = 0; i < p.size(); ++i) {
        velocity[i] = static_cast<float>(cfg.momentum * velocity[i] + scale * g[i]);
        p[i] -= static_cast<float>(lr * velocity[i]);
      }
      ++step;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(steps_per_epoch));
  }
  return result;
}

}  // namespace artivote
