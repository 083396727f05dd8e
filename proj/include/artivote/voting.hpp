#pragma once

// Hough-style vote accumulation: every surviving tuple spreads candidates on
// its circle (origin, affordable point) and cone (direction); the peaks are the
// estimates.

#include "artivote/features.hpp"
#include "artivote/geometry.hpp"
#include "artivote/model.hpp"
#include "artivote/parallel.hpp"
#include "artivote/rng.hpp"
#include "artivote/synth.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace artivote {

struct VoteConfig {
  double step_deg = 2.0;
  double voxel = 0.01;  // meters
  double score_threshold = 0.5;
  std::size_t candidate_cap = 720;
  bool use_score_filter = true;
  double bounds_inflation = 0.2;

  void validate() const {
    if (!(step_deg > 0.0) || !(voxel > 0.0) || !(score_threshold > 0.0 && score_threshold < 1.0) ||
        candidate_cap == 0 || bounds_inflation < 0.0) {
      throw std::invalid_argument("invalid vote configuration");
    }
  }

  /// Candidate spacing after applying the per-tuple cap.
  double effective_step() const {
    return std::max(step_deg, 360.0 / static_cast<double>(candidate_cap));
  }
};

class InsufficientEvidence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sparse voxel vote counts over an axis-aligned region.
class OriginAccumulator {
 public:
  using Cell = std::array<int, 3>;

  OriginAccumulator() = default;
  OriginAccumulator(double voxel, const Vec3& lo, const Vec3& hi) : voxel_(voxel), lo_(lo), hi_(hi) {
    if (!(voxel > 0.0)) throw std::invalid_argument("voxel size must be positive");
  }

  /// Bounds of the cloud's bounding box grown by `inflation` of its extent.
  static OriginAccumulator for_cloud(const std::vector<Vec3>& points, double voxel, double inflation) {
    const auto [lo, hi] = bounding_box(points);
    const Vec3 pad = 0.5 * inflation * (hi - lo);
    return OriginAccumulator(voxel, lo - pad, hi + pad);
  }

  double voxel() const { return voxel_; }
  const Vec3& lower() const { return lo_; }
  const Vec3& upper() const { return hi_; }
  bool empty() const { return counts_.empty(); }
  std::size_t cells() const { return counts_.size(); }
  std::uint64_t total() const { return total_; }

  Cell cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x() / voxel_)), static_cast<int>(std::floor(p.y() / voxel_)),
            static_cast<int>(std::floor(p.z() / voxel_))};
  }

  Vec3 cell_center(const Cell& c) const {
    return Vec3((c[0] + 0.5) * voxel_, (c[1] + 0.5) * voxel_, (c[2] + 0.5) * voxel_);
  }

  /// Adds one vote; returns false (and drops it) outside the bounds.
  bool add(const Vec3& p, std::uint32_t n = 1) {
    if ((p.array() < lo_.array()).any() || (p.array() > hi_.array()).any()) return false;
    counts_[key(cell_of(p))] += n;
    total_ += n;
    return true;
  }

  std::uint32_t count(const Cell& c) const {
    const auto it = counts_.find(key(c));
    return it == counts_.end() ? 0 : it->second;
  }

  bool same_config(const OriginAccumulator& o) const { return voxel_ == o.voxel_ && lo_ == o.lo_ && hi_ == o.hi_; }

  void merge_from(const OriginAccumulator& o) {
    if (!same_config(o)) throw std::invalid_argument("accumulator configuration mismatch");
    for (const auto& [k, v] : o.counts_) counts_[k] += v;
    total_ += o.total_;
  }

  /// Cell with the most votes; ties go to the lexicographically smallest cell.
  Cell peak() const {
    if (counts_.empty()) throw std::runtime_error("empty accumulator");
    Cell best{};
    std::uint32_t best_n = 0;
    bool first = true;
    for (const auto& [k, v] : counts_) {
      const Cell c = unkey(k);
      if (first || v > best_n || (v == best_n && c < best)) {
        best = c;
        best_n = v;
        first = false;
      }
    }
    return best;
  }

  friend bool operator==(const OriginAccumulator& a, const OriginAccumulator& b) {
    return a.same_config(b) && a.total_ == b.total_ && a.counts_ == b.counts_;
  }

 private:
  static constexpr std::int64_t kOffset = 1 << 20;
  static std::int64_t key(const Cell& c) {
    return ((static_cast<std::int64_t>(c[0]) + kOffset) << 42) | ((static_cast<std::int64_t>(c[1]) + kOffset) << 21) |
           (static_cast<std::int64_t>(c[2]) + kOffset);
  }
  static Cell unkey(std::int64_t k) {
    const std::int64_t mask = (std::int64_t{1} << 21) - 1;
    return {static_cast<int>(((k >> 42) & mask) - kOffset), static_cast<int>(((k >> 21) & mask) - kOffset),
            static_cast<int>((k & mask) - kOffset)};
  }

  double voxel_ = 0.01;
  Vec3 lo_ = Vec3::Zero();
  Vec3 hi_ = Vec3::Zero();
  std::unordered_map<std::int64_t, std::uint32_t> counts_;
  std::uint64_t total_ = 0;
};

inline OriginAccumulator merge(const OriginAccumulator& a, const OriginAccumulator& b) {
  OriginAccumulator out = a;
  out.merge_from(b);
  return out;
}

/// Weighted centroid of the 3x3x3 neighborhood around the peak cell.
inline Vec3 extract_origin(const OriginAccumulator& acc) {
  const auto peak = acc.peak();
  Vec3 sum = Vec3::Zero();
  double w = 0.0;
  for (int dx = -1; dx <= 1; ++dx) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dz = -1; dz <= 1; ++dz) {
        const OriginAccumulator::Cell c{peak[0] + dx, peak[1] + dy, peak[2] + dz};
        const double n = acc.count(c);
        if (n > 0) {
          sum += n * acc.cell_center(c);
          w += n;
        }
      }
    }
  }
  return sum / w;
}

/// Vote counts on an azimuth x elevation grid of the unit sphere. The first
/// and last elevation rows are polar caps: each collapses into a single cell
/// stored at azimuth index 0.
class DirectionAccumulator {
 public:
  using Cell = std::array<int, 2>;  // (elevation row, azimuth column)

  explicit DirectionAccumulator(int azimuth_bins = 360, int elevation_bins = 180)
      : az_bins_(azimuth_bins), el_bins_(elevation_bins),
        counts_(static_cast<std::size_t>(azimuth_bins) * static_cast<std::size_t>(elevation_bins), 0) {
    if (azimuth_bins < 3 || elevation_bins < 3) throw std::invalid_argument("direction grid too coarse");
  }

  int azimuth_bins() const { return az_bins_; }
  int elevation_bins() const { return el_bins_; }
  std::uint64_t total() const { return total_; }
  bool empty() const { return total_ == 0; }

  Cell cell_of(const Vec3& v) const {
    const double el = std::asin(std::clamp(v.z() / v.norm(), -1.0, 1.0));
    int row = static_cast<int>(std::floor((el + kPi / 2) / kPi * el_bins_));
    row = std::clamp(row, 0, el_bins_ - 1);
    if (row == 0 || row == el_bins_ - 1) return {row, 0};
    double az = std::atan2(v.y(), v.x());
    int col = static_cast<int>(std::floor((az + kPi) / (2 * kPi) * az_bins_));
    col = ((col % az_bins_) + az_bins_) % az_bins_;
    return {row, col};
  }

  Vec3 cell_center(const Cell& c) const {
    if (c[0] == 0) return -Vec3::UnitZ();
    if (c[0] == el_bins_ - 1) return Vec3::UnitZ();
    const double el = -kPi / 2 + (c[0] + 0.5) * kPi / el_bins_;
    const double az = -kPi + (c[1] + 0.5) * 2 * kPi / az_bins_;
    return Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  }

  void add(const Vec3& v, std::uint32_t n = 1) {
    counts_[index(cell_of(v))] += n;
    total_ += n;
  }

  std::uint32_t count(const Cell& c) const { return counts_[index(c)]; }

  void merge_from(const DirectionAccumulator& o) {
    if (o.az_bins_ != az_bins_ || o.el_bins_ != el_bins_) throw std::invalid_argument("accumulator configuration mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    total_ += o.total_;
  }

  Cell peak() const {
    if (total_ == 0) throw std::runtime_error("empty accumulator");
    Cell best{0, 0};
    std::uint32_t best_n = 0;
    for (int r = 0; r < el_bins_; ++r) {
      for (int c = 0; c < az_bins_; ++c) {
        const std::uint32_t n = counts_[index({r, c})];
        if (n > best_n) {
          best_n = n;
          best = {r, c};
        }
      }
    }
    return best;
  }

  /// Cells adjacent to `c` (including c), with azimuth wraparound; a polar
  /// cap neighbors the whole adjacent ring.
  std::vector<Cell> neighborhood(const Cell& c) const {
    std::vector<Cell> out;
    auto push_row = [&](int row, int center_col, bool whole) {
      if (row < 0 || row >= el_bins_) return;
      if (row == 0 || row == el_bins_ - 1) {
        out.push_back({row, 0});
        return;
      }
      if (whole) {
        for (int col = 0; col < az_bins_; ++col) out.push_back({row, col});
        return;
      }
      for (int d = -1; d <= 1; ++d) out.push_back({row, ((center_col + d) % az_bins_ + az_bins_) % az_bins_});
    };
    const bool cap = c[0] == 0 || c[0] == el_bins_ - 1;
    if (cap) {
      out.push_back(c);
      push_row(c[0] == 0 ? 1 : el_bins_ - 2, 0, true);
      return out;
    }
    push_row(c[0] - 1, c[1], false);
    push_row(c[0], c[1], false);
    push_row(c[0] + 1, c[1], false);
    return out;
  }

  friend bool operator==(const DirectionAccumulator& a, const DirectionAccumulator& b) {
    return a.az_bins_ == b.az_bins_ && a.el_bins_ == b.el_bins_ && a.total_ == b.total_ && a.counts_ == b.counts_;
  }

 private:
  std::size_t index(const Cell& c) const {
    return static_cast<std::size_t>(c[0]) * static_cast<std::size_t>(az_bins_) + static_cast<std::size_t>(c[1]);
  }

  int az_bins_, el_bins_;
  std::vector<std::uint32_t> counts_;
  std::uint64_t total_ = 0;
};

inline DirectionAccumulator merge(const DirectionAccumulator& a, const DirectionAccumulator& b) {
  DirectionAccumulator out = a;
  out.merge_from(b);
  return out;
}

/// Vote-weighted mean direction over the peak cell's neighborhood.
inline UnitVec3 extract_direction(const DirectionAccumulator& acc) {
  const auto peak = acc.peak();
  Vec3 sum = Vec3::Zero();
  for (const auto& c : acc.neighborhood(peak)) sum += static_cast<double>(acc.count(c)) * acc.cell_center(c);
  if (sum.norm() < 1e-12) return UnitVec3(acc.cell_center(peak));
  return UnitVec3(sum);
}

/// What one tuple contributes for one joint.
struct TupleVote {
  Vec3 p1, p2;
  double mu = 0.0, nu = 0.0, theta = 0.0, mu_a = 0.0, nu_a = 0.0;
  double score = 1.0;
};

inline TupleVote vote_from_prediction(const Vec3& p1, const Vec3& p2, const JointPrediction& p) {
  return {p1, p2, p.mu, std::max(p.nu, 0.0), p.theta_star(), p.mu_a, std::max(p.nu_a, 0.0), p.c_hat};
}

/// Ground-truth targets used as predictions (score = c_j).
inline TupleVote vote_from_targets(const Vec3& p1, const Vec3& p2, const VoteTargets& t, std::size_t joint) {
  return {p1, p2, t.mu, t.nu, t.theta, t.mu_a, t.nu_a, static_cast<double>(t.scores.at(joint))};
}

struct VoteAccumulators {
  OriginAccumulator origin;
  DirectionAccumulator direction;
  OriginAccumulator afford;
  std::size_t surviving = 0;

  void merge_from(const VoteAccumulators& o) {
    origin.merge_from(o.origin);
    direction.merge_from(o.direction);
    afford.merge_from(o.afford);
    surviving += o.surviving;
  }

  friend bool operator==(const VoteAccumulators&, const VoteAccumulators&) = default;
};

inline VoteAccumulators merge(const VoteAccumulators& a, const VoteAccumulators& b) {
  VoteAccumulators out = a;
  out.merge_from(b);
  return out;
}

inline VoteAccumulators empty_accumulators(const std::vector<Vec3>& points, const VoteConfig& cfg) {
  VoteAccumulators acc{OriginAccumulator::for_cloud(points, cfg.voxel, cfg.bounds_inflation), DirectionAccumulator(),
                       OriginAccumulator::for_cloud(points, cfg.voxel, cfg.bounds_inflation), 0};
  return acc;
}

/// Accumulates candidates of every tuple whose score exceeds the threshold
/// (or of every tuple with the filter disabled). Work is split into `shards`
/// partial accumulators that are merged in order.
inline VoteAccumulators cast_votes(const std::vector<Vec3>& points, std::span<const TupleVote> votes,
                                   const VoteConfig& cfg, std::size_t shards = 8) {
  cfg.validate();
  const double step = cfg.effective_step();
  shards = std::max<std::size_t>(1, std::min(shards, std::max<std::size_t>(1, votes.size())));
  std::vector<VoteAccumulators> parts(shards, empty_accumulators(points, cfg));
  parallel_shards(shards, [&](std::size_t s) {
    VoteAccumulators& acc = parts[s];
    const auto [b, e] = shard_range(votes.size(), shards, s);
    for (std::size_t i = b; i < e; ++i) {
      const TupleVote& v = votes[i];
      if (cfg.use_score_filter && !(v.score > cfg.score_threshold)) continue;
      if (!((v.p2 - v.p1).norm() > kMinBaseline)) continue;
      ++acc.surviving;
      for (const Vec3& c : circle_candidates(v.p1, v.p2, v.mu, std::max(v.nu, 0.0), step)) acc.origin.add(c);
      for (const Vec3& c : cone_candidates(v.p1, v.p2, std::clamp(v.theta, -1.0, 1.0), step)) acc.direction.add(c);
      for (const Vec3& c : circle_candidates(v.p1, v.p2, v.mu_a, std::max(v.nu_a, 0.0), step)) acc.afford.add(c);
    }
  });
  VoteAccumulators out = std::move(parts[0]);
  for (std::size_t s = 1; s < shards; ++s) out.merge_from(parts[s]);
  return out;
}

/// Votes for joint `joint` from network predictions aligned with `tuples`.
inline VoteAccumulators cast_votes(const LabeledCloud& cloud, const std::vector<Tuple>& tuples,
                                   const std::vector<Prediction>& predictions, const VoteConfig& cfg,
                                   std::size_t joint, std::size_t shards = 8) {
  if (tuples.size() != predictions.size()) throw std::invalid_argument("predictions not aligned with tuples");
  std::vector<TupleVote> votes;
  votes.reserve(tuples.size());
  for (std::size_t k = 0; k < tuples.size(); ++k) {
    votes.push_back(vote_from_prediction(cloud.points[tuples[k][0]], cloud.points[tuples[k][1]],
                                         predictions[k].at(joint)));
  }
  return cast_votes(cloud.points, votes, cfg, shards);
}

struct JointEstimate {
  JointKind kind = JointKind::revolute;
  UnitVec3 direction;
  Vec3 origin = Vec3::Zero();
  Vec3 afford = Vec3::Zero();
  std::uint64_t votes = 0;  // votes in the origin peak cell
  std::size_t surviving = 0;

  JointParams params() const { return {kind, direction, origin}; }
};

inline constexpr std::size_t kMinSurvivingTuples = 10;

inline JointEstimate extract_estimate(const VoteAccumulators& acc, JointKind kind) {
  if (acc.surviving < kMinSurvivingTuples) throw InsufficientEvidence("insufficient articulation evidence");
  if (acc.origin.empty() || acc.afford.empty() || acc.direction.empty()) {
    throw InsufficientEvidence("insufficient articulation evidence: no in-bounds votes");
  }
  JointEstimate e;
  e.kind = kind;
  e.origin = extract_origin(acc.origin);
  e.direction = extract_direction(acc.direction);
  e.afford = extract_origin(acc.afford);
  e.votes = acc.origin.count(acc.origin.peak());
  e.surviving = acc.surviving;
  return e;
}

/// A trained network together with the joint kinds it predicts for.
struct TrainedModel {
  ArticulationNet<float> net;
  std::vector<JointKind> kinds;
  FeatureConfig features;
};

struct InferOptions {
  std::size_t tuples = 100000;
  std::size_t chunk = 2048;
  std::uint64_t seed = 0;
};

/// Full perception pipeline: subsample and re-estimate normals, sample tuples,
/// extract features, predict, vote and read off the peaks per joint.
inline std::vector<JointEstimate> infer(const LabeledCloud& cloud, const TrainedModel& model, const VoteConfig& vcfg,
                                        const InferOptions& opt) {
  vcfg.validate();
  const NetConfig& ncfg = model.net.config();
  if (static_cast<int>(model.kinds.size()) != ncfg.joints) throw std::invalid_argument("joint kinds do not match network");
  Rng rng(opt.seed);
  Rng prep_rng = rng.split(1);
  const LabeledCloud prepared = prepare_cloud(cloud, model.features, prep_rng);
  Rng tuple_rng = rng.split(2);
  CloudFeatures feats(prepared, model.features);
  const auto tuples = sample_tuples(prepared.points, opt.tuples, ncfg.tuple_size, feats.d_min(), tuple_rng);

  std::vector<std::vector<TupleVote>> votes(static_cast<std::size_t>(ncfg.joints));
  for (auto& v : votes) v.reserve(tuples.size());
  const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
  for (std::size_t b = 0; b < tuples.size(); b += chunk) {
    const std::size_t e = std::min(tuples.size(), b + chunk);
    const std::vector<Tuple> part(tuples.begin() + static_cast<std::ptrdiff_t>(b), tuples.begin() + static_cast<std::ptrdiff_t>(e));
    feats.prepare(part);
    std::vector<TupleSample> samples(part.size());
    const CloudFeatures& cf = feats;
    const std::size_t shards = std::min<std::size_t>(16, part.size());
    parallel_shards(shards, [&](std::size_t s) {
      const auto [lo, hi] = shard_range(part.size(), shards, s);
      for (std::size_t i = lo; i < hi; ++i) samples[i] = cf.tuple_features(part[i]);
    });
    const auto preds = forward_batch(model.net, std::span<const TupleSample>(samples), Mode::inference);
    for (std::size_t i = 0; i < part.size(); ++i) {
      for (int j = 0; j < ncfg.joints; ++j) {
        votes[static_cast<std::size_t>(j)].push_back(vote_from_prediction(
            prepared.points[part[i][0]], prepared.points[part[i][1]], preds[i][static_cast<std::size_t>(j)]));
      }
    }
  }

  std::vector<JointEstimate> out;
  for (int j = 0; j < ncfg.joints; ++j) {
    const auto acc = cast_votes(prepared.points, votes[static_cast<std::size_t>(j)], vcfg, worker_count());
    out.push_back(extract_estimate(acc, model.kinds[static_cast<std::size_t>(j)]));
  }
  return out;
}

}  // namespace artivote
