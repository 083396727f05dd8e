#pragma once

// Per-point normals and SHOT descriptors, tuple sampling, and the geometric
// tuple features fed to the network (pairwise offsets, normal agreement and
// raw SHOT signatures).

#include "artivote/geometry.hpp"
#include "artivote/kdtree.hpp"
#include "artivote/parallel.hpp"
#include "artivote/rng.hpp"
#include "artivote/synth.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace artivote {

inline constexpr int kShotAzimuthBins = 8;
inline constexpr int kShotElevationBins = 2;
inline constexpr int kShotRadialBins = 2;
inline constexpr int kShotCosineBins = 11;
inline constexpr int kShotDim = kShotAzimuthBins * kShotElevationBins * kShotRadialBins * kShotCosineBins;
static_assert(kShotDim == 352);

using ShotDescriptor = std::array<float, kShotDim>;

struct FeatureConfig {
  int tuple_size = 5;
  int normal_k = 30;
  double shot_radius_frac = 0.15;  // of the cloud diagonal
  double d_min_frac = 0.01;        // of the cloud diagonal
  std::size_t max_points = 2048;   // subsampling cap before feature extraction; 0 keeps all
};

inline constexpr std::size_t pair_count(int m) { return static_cast<std::size_t>(m * (m - 1) / 2); }

/// Pair enumeration used by every per-pair feature: (0,1), (0,2), ...,
/// (0,M-1), (1,2), ... i.e. lexicographic with i < j.
inline std::vector<std::pair<int, int>> tuple_pairs(int m) {
  std::vector<std::pair<int, int>> out;
  out.reserve(pair_count(m));
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) out.emplace_back(i, j);
  }
  return out;
}

/// PCA normals over the k nearest neighbors (point included), flipped to
/// face `viewpoint`.
inline std::vector<Vec3> estimate_normals(const KdTree& tree, int k, const Vec3& viewpoint) {
  const auto& pts = tree.points();
  if (k < 3) throw std::invalid_argument("normal estimation needs k >= 3");
  if (pts.size() <= static_cast<std::size_t>(k)) {
    throw std::invalid_argument("normal estimation needs more than k points");
  }
  std::vector<Vec3> normals(pts.size());
  const std::size_t shards = std::min<std::size_t>(64, pts.size());
  parallel_shards(shards, [&](std::size_t s) {
    const auto [begin, end] = shard_range(pts.size(), shards, s);
    for (std::size_t i = begin; i < end; ++i) {
      const auto nb = tree.knn(pts[i], static_cast<std::size_t>(k));
      Vec3 mean = Vec3::Zero();
      for (const auto& n : nb) mean += pts[n.index];
      mean /= static_cast<double>(nb.size());
      Mat3 cov = Mat3::Zero();
      for (const auto& n : nb) {
        const Vec3 d = pts[n.index] - mean;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
      Vec3 nrm = es.eigenvectors().col(0);
      if (nrm.dot(viewpoint - pts[i]) < 0.0) nrm = -nrm;
      normals[i] = nrm.normalized();
    }
  });
  return normals;
}

inline std::vector<Vec3> estimate_normals(const std::vector<Vec3>& points, int k, const Vec3& viewpoint) {
  return estimate_normals(KdTree(points), k, viewpoint);
}

/// SHOT local reference frame: rows are the x, y, z axes. Returns false when
/// the support has no neighbors.
inline bool shot_reference_frame(const std::vector<Vec3>& pts, const std::vector<Neighbor>& nb,
                                 const Vec3& center, double radius, Mat3& frame) {
  Mat3 cov = Mat3::Zero();
  double wsum = 0.0;
  for (const auto& n : nb) {
    const Vec3 d = pts[n.index] - center;
    const double w = radius - std::sqrt(n.dist2);
    cov += w * d * d.transpose();
    wsum += w;
  }
  if (nb.empty() || !(wsum > 0.0)) return false;
  cov /= wsum;
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  Vec3 x = es.eigenvectors().col(2);
  Vec3 z = es.eigenvectors().col(0);
  // Sign disambiguation: point each axis toward the majority of neighbors.
  auto disambiguate = [&](Vec3& axis) {
    int pos = 0, neg = 0;
    double weighted = 0.0;
    for (const auto& n : nb) {
      const double p = (pts[n.index] - center).dot(axis);
      if (p >= 0.0) ++pos; else ++neg;
      weighted += p * (radius - std::sqrt(n.dist2));
    }
    if (neg > pos || (neg == pos && weighted < 0.0)) axis = -axis;
  };
  disambiguate(x);
  disambiguate(z);
  const Vec3 y = z.cross(x);
  frame.row(0) = x.transpose();
  frame.row(1) = y.transpose();
  frame.row(2) = z.transpose();
  return true;
}

namespace detail {

/// Linear split of a continuous bin coordinate between two clamped bins.
struct Split {
  int lo, hi;
  double w_lo, w_hi;
};

inline Split clamped_split(double c, int bins) {
  if (c <= 0.0) return {0, 0, 1.0, 0.0};
  if (c >= bins - 1) return {bins - 1, bins - 1, 1.0, 0.0};
  const int lo = static_cast<int>(std::floor(c));
  const double f = c - lo;
  return {lo, lo + 1, 1.0 - f, f};
}

inline Split circular_split(double c, int bins) {
  const double fl = std::floor(c);
  const double f = c - fl;
  int lo = static_cast<int>(fl) % bins;
  if (lo < 0) lo += bins;
  return {lo, (lo + 1) % bins, 1.0 - f, f};
}

}  // namespace detail

/// SHOT signature of point `index` over neighbors within `radius`: 8 azimuth
/// x 2 elevation x 2 radial volumes in the local reference frame, each holding
/// an 11-bin histogram of the cosine between the neighbor normal and the
/// frame's z axis. Quadrilinear interpolation, L2-normalized; all zero when
/// the support is empty.
inline ShotDescriptor shot_descriptor(const KdTree& tree, const std::vector<Vec3>& normals, std::size_t index,
                                      double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("SHOT radius must be positive");
  const auto& pts = tree.points();
  const Vec3& center = pts.at(index);
  std::vector<Neighbor> nb;
  for (const auto& n : tree.radius(center, radius)) {
    if (n.index != index && n.dist2 > 0.0) nb.push_back(n);
  }
  ShotDescriptor out{};
  Mat3 frame;
  if (!shot_reference_frame(pts, nb, center, radius, frame)) return out;

  std::array<double, kShotDim> hist{};
  const Vec3 z = frame.row(2).transpose();
  for (const auto& n : nb) {
    const Vec3 local = frame * (pts[n.index] - center);
    const double dist = std::sqrt(n.dist2);
    const double cosine = std::clamp(normals[n.index].dot(z), -1.0, 1.0);

    double azimuth = std::atan2(local.y(), local.x());
    if (azimuth < 0.0) azimuth += 2.0 * kPi;
    const double inclination = std::acos(std::clamp(local.z() / dist, -1.0, 1.0));

    const auto az = detail::circular_split(azimuth / (2.0 * kPi / kShotAzimuthBins) - 0.5, kShotAzimuthBins);
    const auto el = detail::clamped_split(inclination / (kPi / kShotElevationBins) - 0.5, kShotElevationBins);
    const auto rd = detail::clamped_split(dist / radius * kShotRadialBins - 0.5, kShotRadialBins);
    const auto cs = detail::clamped_split((1.0 + cosine) * 0.5 * (kShotCosineBins - 1), kShotCosineBins);

    const int az_b[2] = {az.lo, az.hi};
    const double az_w[2] = {az.w_lo, az.w_hi};
    const int el_b[2] = {el.lo, el.hi};
    const double el_w[2] = {el.w_lo, el.w_hi};
    const int rd_b[2] = {rd.lo, rd.hi};
    const double rd_w[2] = {rd.w_lo, rd.w_hi};
    const int cs_b[2] = {cs.lo, cs.hi};
    const double cs_w[2] = {cs.w_lo, cs.w_hi};
    for (int a = 0; a < 2; ++a) {
      if (az_w[a] == 0.0) continue;
      for (int e = 0; e < 2; ++e) {
        if (el_w[e] == 0.0) continue;
        for (int r = 0; r < 2; ++r) {
          if (rd_w[r] == 0.0) continue;
          const int volume = (az_b[a] * kShotElevationBins + el_b[e]) * kShotRadialBins + rd_b[r];
          const double w = az_w[a] * el_w[e] * rd_w[r];
          for (int c = 0; c < 2; ++c) {
            if (cs_w[c] == 0.0) continue;
            hist[static_cast<std::size_t>(volume * kShotCosineBins + cs_b[c])] += w * cs_w[c];
          }
        }
      }
    }
  }
  double norm2 = 0.0;
  for (double v : hist) norm2 += v * v;
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t i = 0; i < hist.size(); ++i) out[i] = static_cast<float>(hist[i] * inv);
  }
  return out;
}

using Tuple = std::vector<std::size_t>;

/// K tuples of M distinct indices. The major-point baseline is resampled
/// until it reaches d_min, accepting the 100th attempt regardless.
inline std::vector<Tuple> sample_tuples(const std::vector<Vec3>& points, std::size_t K, int M, double d_min,
                                        Rng& rng) {
  if (M < 2) throw std::invalid_argument("tuple size must be at least 2");
  if (points.size() < static_cast<std::size_t>(M)) throw std::invalid_argument("cloud has fewer points than tuple size");
  const std::size_t n = points.size();
  std::vector<Tuple> out;
  out.reserve(K);
  Tuple t(static_cast<std::size_t>(M));
  for (std::size_t k = 0; k < K; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (int i = 0; i < M; ++i) {
        std::size_t idx;
        do {
          idx = rng.index(n);
        } while (std::find(t.begin(), t.begin() + i, idx) != t.begin() + i);
        t[static_cast<std::size_t>(i)] = idx;
      }
      if ((points[t[0]] - points[t[1]]).norm() >= d_min) break;
    }
    out.push_back(t);
  }
  return out;
}

/// Network input of one tuple. `f1` holds p_i - p_j and `f2` the unsigned
/// normal agreement for each pair in tuple_pairs() order; `shot` holds the M
/// raw descriptors back to back.
struct TupleSample {
  Tuple indices;
  std::vector<float> f1;
  std::vector<float> f2;
  std::vector<float> shot;
};

/// Feature extraction state for one cloud: a k-d tree and a SHOT cache.
class CloudFeatures {
 public:
  CloudFeatures(const LabeledCloud& cloud, const FeatureConfig& cfg)
      : cloud_(cloud), cfg_(cfg), tree_(cloud.points), shot_(cloud.size()), have_(cloud.size(), 0) {
    if (!(cloud.diag > 0.0)) throw std::invalid_argument("cloud diagonal must be positive");
  }

  const LabeledCloud& cloud() const { return cloud_; }
  const KdTree& tree() const { return tree_; }
  double shot_radius() const { return cfg_.shot_radius_frac * cloud_.diag; }
  double d_min() const { return cfg_.d_min_frac * cloud_.diag; }

  /// Computes the descriptors needed by `tuples` in parallel.
  void prepare(const std::vector<Tuple>& tuples) {
    std::vector<std::size_t> need;
    for (const auto& t : tuples) {
      for (std::size_t i : t) {
        if (!have_[i]) {
          have_[i] = 2;
          need.push_back(i);
        }
      }
    }
    const double r = shot_radius();
    const std::size_t shards = std::min<std::size_t>(64, std::max<std::size_t>(1, need.size()));
    parallel_shards(shards, [&](std::size_t s) {
      const auto [b, e] = shard_range(need.size(), shards, s);
      for (std::size_t i = b; i < e; ++i) shot_[need[i]] = shot_descriptor(tree_, cloud_.normals, need[i], r);
    });
    for (std::size_t i : need) have_[i] = 1;
  }

  const ShotDescriptor& shot(std::size_t i) {
    if (have_[i] != 1) {
      shot_[i] = shot_descriptor(tree_, cloud_.normals, i, shot_radius());
      have_[i] = 1;
    }
    return shot_[i];
  }

  /// Features of a tuple; call prepare() first when running concurrently.
  TupleSample tuple_features(const Tuple& idx) const {
    for (std::size_t i : idx) {
      if (i >= cloud_.size()) throw std::out_of_range("tuple index out of range");
      if (have_[i] != 1) throw std::logic_error("SHOT descriptor not prepared");
    }
    return assemble(idx);
  }

  TupleSample tuple_features(const Tuple& idx) {
    for (std::size_t i : idx) {
      if (i >= cloud_.size()) throw std::out_of_range("tuple index out of range");
      shot(i);
    }
    return assemble(idx);
  }

 private:
  TupleSample assemble(const Tuple& idx) const {
    const int m = static_cast<int>(idx.size());
    TupleSample s;
    s.indices = idx;
    s.f1.reserve(3 * pair_count(m));
    s.f2.reserve(pair_count(m));
    for (const auto& [i, j] : tuple_pairs(m)) {
      const Vec3 d = cloud_.points[idx[static_cast<std::size_t>(i)]] - cloud_.points[idx[static_cast<std::size_t>(j)]];
      for (int a = 0; a < 3; ++a) s.f1.push_back(static_cast<float>(d[a]));
      const double c = cloud_.normals[idx[static_cast<std::size_t>(i)]].dot(cloud_.normals[idx[static_cast<std::size_t>(j)]]);
      s.f2.push_back(static_cast<float>(std::clamp(std::max(c, -c), 0.0, 1.0)));
    }
    s.shot.reserve(static_cast<std::size_t>(m) * kShotDim);
    for (std::size_t i : idx) s.shot.insert(s.shot.end(), shot_[i].begin(), shot_[i].end());
    return s;
  }

  const LabeledCloud& cloud_;
  FeatureConfig cfg_;
  KdTree tree_;
  std::vector<ShotDescriptor> shot_;
  std::vector<char> have_;
};

/// Subsamples to at most `cfg.max_points` points and re-estimates normals
/// toward the viewpoint. Labels and `diag` are carried over.
inline LabeledCloud prepare_cloud(const LabeledCloud& cloud, const FeatureConfig& cfg, Rng& rng) {
  LabeledCloud out;
  out.viewpoint = cloud.viewpoint;
  out.diag = cloud.diag;
  const std::size_t n = cloud.size();
  std::vector<std::size_t> keep(n);
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  if (cfg.max_points > 0 && n > cfg.max_points) {
    for (std::size_t i = 0; i < cfg.max_points; ++i) std::swap(keep[i], keep[i + rng.index(n - i)]);
    keep.resize(cfg.max_points);
    std::sort(keep.begin(), keep.end());
  }
  out.points.reserve(keep.size());
  out.labels.reserve(keep.size());
  for (std::size_t i : keep) {
    out.points.push_back(cloud.points[i]);
    out.labels.push_back(cloud.labels[i]);
  }
  out.normals = estimate_normals(out.points, cfg.normal_k, out.viewpoint);
  return out;
}

}  // namespace artivote
