#pragma once

// Dataset generation and training-set assembly shared by the command-line
// tool and the acceptance harness.

#include "artivote/features.hpp"
#include "artivote/model.hpp"
#include "artivote/rng.hpp"
#include "artivote/synth.hpp"
#include "artivote/voting.hpp"

#include <cstdint>
#include <vector>

namespace artivote {

struct DatasetConfig {
  int states = 40;
  int views = 5;
  std::size_t tuples_per_cloud = 32;
  std::vector<int> noise_levels{0};  // each training cloud draws one of these
  FeatureConfig features;
};

/// One rendered observation: the object in a sampled state seen from a view.
struct ViewSpec {
  ArticulatedModel model;
  CameraPose camera;
  std::uint64_t seed = 0;  // per-view stream for noise and feature sampling
};

/// Seed of instance `index` of a category under a run seed.
inline std::uint64_t instance_seed(std::uint64_t run_seed, Category c, int index) {
  return Rng(run_seed).split(static_cast<std::uint64_t>(c) * 1000003ULL + static_cast<std::uint64_t>(index)).seed();
}

/// `states` uniformly drawn joint states, each seen from `views` cameras.
inline std::vector<ViewSpec> instance_views(Category category, std::uint64_t seed, int states, int views) {
  Rng rng(seed);
  const ArticulatedModel base = build_object(category, rng.split(0).seed());
  std::vector<ViewSpec> out;
  out.reserve(static_cast<std::size_t>(states * views));
  Rng state_rng = rng.split(1);
  Rng view_rng = rng.split(2);
  for (int s = 0; s < states; ++s) {
    ArticulatedModel m = base;
    for (std::size_t j = 0; j < m.joints.size(); ++j) m.set_state(j, state_rng.uniform(m.joints[j].lower, m.joints[j].upper));
    for (int v = 0; v < views; ++v) {
      out.push_back({m, sample_view(view_rng, m.center()), rng.split(100 + static_cast<std::uint64_t>(out.size())).seed()});
    }
  }
  return out;
}

/// Samples tuples on a prepared cloud and appends their features and targets.
inline std::size_t add_cloud_examples(TrainingSet& data, const ArticulatedModel& model, const LabeledCloud& prepared,
                                      const FeatureConfig& fcfg, std::size_t tuples, Rng& rng) {
  CloudFeatures feats(prepared, fcfg);
  const auto sampled = sample_tuples(prepared.points, tuples, fcfg.tuple_size, feats.d_min(), rng);
  feats.prepare(sampled);
  const CloudFeatures& cf = feats;
  for (const auto& t : sampled) data.add(cf.tuple_features(t), tuple_targets(model, prepared, t));
  return sampled.size();
}

/// Renders, optionally corrupts, prepares and samples one view.
inline LabeledCloud observe(const ViewSpec& view, int noise, const FeatureConfig& fcfg) {
  Rng rng(view.seed);
  LabeledCloud cloud = render_cloud(view.model, view.camera);
  if (noise > 0) {
    Rng nr = rng.split(1);
    cloud = apply_noise(cloud, noise_level(noise), nr);
  }
  Rng pr = rng.split(2);
  return prepare_cloud(cloud, fcfg, pr);
}

/// Training examples from `instances` procedural objects of a category.
inline TrainingSet build_training_set(Category category, std::uint64_t run_seed, int first_instance, int instances,
                                      const DatasetConfig& cfg, const NetConfig& net) {
  TrainingSet data;
  data.net = net;
  for (int i = first_instance; i < first_instance + instances; ++i) {
    const auto views = instance_views(category, instance_seed(run_seed, category, i), cfg.states, cfg.views);
    for (const ViewSpec& v : views) {
      Rng rng(v.seed);
      const int noise = cfg.noise_levels.at(rng.split(3).index(cfg.noise_levels.size()));
      const LabeledCloud prepared = observe(v, noise, cfg.features);
      Rng tr = rng.split(4);
      add_cloud_examples(data, v.model, prepared, cfg.features, cfg.tuples_per_cloud, tr);
    }
  }
  return data;
}

inline std::vector<JointKind> joint_kinds(Category c) {
  const auto m = build_object(c, 0);
  std::vector<JointKind> k;
  for (const auto& j : m.joints) k.push_back(j.params.kind);
  return k;
}

}  // namespace artivote
