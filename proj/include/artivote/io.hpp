#pragma once

// File formats: ASCII PLY clouds, JSON object models and estimates, the AVW1
// weights container, JSON-lines result records and CSV reports.

#include "artivote/evalmanip.hpp"
#include "artivote/features.hpp"
#include "artivote/model.hpp"
#include "artivote/synth.hpp"
#include "artivote/voting.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace artivote {

using json = nlohmann::ordered_json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- vectors and transforms

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline json to_json(const RigidTransform& t) {
  json rows = json::array();
  const Mat4 m = t.matrix();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) rows.push_back(m(r, c));
  }
  return rows;
}

/// 4x4 row-major, 16 numbers.
inline RigidTransform transform_from_json(const json& j) {
  if (!j.is_array() || j.size() != 16) throw FormatError("expected a 4x4 row-major pose");
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = j[static_cast<std::size_t>(r * 4 + c)].get<double>();
  }
  return RigidTransform::from_matrix(m);
}

// ---- PLY

inline void write_ply(std::ostream& os, const LabeledCloud& cloud) {
  os << "ply\nformat ascii 1.0\n";
  os << std::setprecision(17);
  os << "comment viewpoint " << cloud.viewpoint.x() << ' ' << cloud.viewpoint.y() << ' ' << cloud.viewpoint.z() << '\n';
  os << "comment diag " << cloud.diag << '\n';
  os << "element vertex " << cloud.size() << '\n';
  for (const char* p : {"x", "y", "z", "nx", "ny", "nz"}) os << "property double " << p << '\n';
  os << "property int label\nend_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    const Vec3& n = cloud.normals[i];
    os << p.x() << ' ' << p.y() << ' ' << p.z() << ' ' << n.x() << ' ' << n.y() << ' ' << n.z() << ' '
       << cloud.labels[i] << '\n';
  }
}

inline LabeledCloud read_ply(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "ply") throw FormatError("not a PLY file");
  LabeledCloud cloud;
  std::size_t count = 0;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (key == "comment") {
      std::string what;
      ls >> what;
      if (what == "viewpoint") {
        ls >> cloud.viewpoint.x() >> cloud.viewpoint.y() >> cloud.viewpoint.z();
      } else if (what == "diag") {
        ls >> cloud.diag;
      }
    } else if (key == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw FormatError("unsupported PLY element: " + name);
    } else if (key == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (key == "end_header") {
      break;
    }
  }
  if (!ascii) throw FormatError("only ASCII PLY is supported");
  const std::vector<std::string> expected{"x", "y", "z", "nx", "ny", "nz", "label"};
  if (props != expected) throw FormatError("PLY vertex properties must be x y z nx ny nz label");
  cloud.points.resize(count);
  cloud.normals.resize(count);
  cloud.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Vec3& p = cloud.points[i];
    Vec3& n = cloud.normals[i];
    if (!(is >> p.x() >> p.y() >> p.z() >> n.x() >> n.y() >> n.z() >> cloud.labels[i])) {
      throw FormatError("truncated PLY vertex data");
    }
  }
  return cloud;
}

inline void save_ply(const std::filesystem::path& path, const LabeledCloud& cloud) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_ply(os, cloud);
}

inline LabeledCloud load_ply(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_ply(is);
}

// ---- object models

inline json to_json(const ArticulatedModel& m) {
  json j;
  j["category"] = to_string(m.category);
  j["scale"] = m.scale;
  json parts = json::array();
  for (const Box& b : m.boxes) {
    parts.push_back({{"part", b.part}, {"lo", to_json(b.lo)}, {"hi", to_json(b.hi)},
                     {"pose", to_json(m.part_pose(b.part))}});
  }
  j["parts"] = parts;
  json joints = json::array();
  for (std::size_t i = 0; i < m.joints.size(); ++i) {
    const Joint& jt = m.joints[i];
    joints.push_back({{"kind", to_string(jt.params.kind)},
                      {"u", to_json(jt.params.direction)},
                      {"q", to_json(jt.params.origin)},
                      {"lower", jt.lower},
                      {"upper", jt.upper},
                      {"state", jt.state},
                      {"afford_rest", to_json(m.affordable_rest[i])},
                      {"afford", to_json(m.affordable_point(i))}});
  }
  j["joints"] = joints;
  return j;
}

/// Inverse of to_json; part poses are recomputed from the joint states.
inline ArticulatedModel model_from_json(const json& j) {
  try {
    ArticulatedModel m;
    m.category = category_from_string(j.at("category").get<std::string>());
    m.scale = j.at("scale").get<double>();
    for (const auto& p : j.at("parts")) {
      m.boxes.push_back({vec3_from_json(p.at("lo")), vec3_from_json(p.at("hi")), p.at("part").get<int>()});
    }
    for (const auto& jj : j.at("joints")) {
      Joint jt;
      jt.params.kind = joint_kind_from_string(jj.at("kind").get<std::string>());
      jt.params.direction = UnitVec3(vec3_from_json(jj.at("u")));
      jt.params.origin = vec3_from_json(jj.at("q"));
      jt.lower = jj.at("lower").get<double>();
      jt.upper = jj.at("upper").get<double>();
      jt.state = jj.at("state").get<double>();
      m.joints.push_back(jt);
      m.affordable_rest.push_back(vec3_from_json(jj.at("afford_rest")));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad model JSON: ") + e.what());
  }
}

// ---- configurations

inline json to_json(const NetConfig& c) {
  return {{"tuple_size", c.tuple_size}, {"shot_dim", c.shot_dim}, {"embed_hidden", c.embed_hidden},
          {"embed_out", c.embed_out},   {"width", c.width},       {"blocks", c.blocks},
          {"joints", c.joints},         {"theta_bins", c.theta_bins},
          {"activation", c.activation == Activation::silu ? "silu" : "identity"}};
}

inline NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  c.tuple_size = j.at("tuple_size").get<int>();
  c.shot_dim = j.at("shot_dim").get<int>();
  c.embed_hidden = j.at("embed_hidden").get<int>();
  c.embed_out = j.at("embed_out").get<int>();
  c.width = j.at("width").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.joints = j.at("joints").get<int>();
  c.theta_bins = j.at("theta_bins").get<int>();
  const auto act = j.at("activation").get<std::string>();
  if (act == "silu") {
    c.activation = Activation::silu;
  } else if (act == "identity") {
    c.activation = Activation::identity;
  } else {
    throw FormatError("unknown activation: " + act);
  }
  return c;
}

inline json to_json(const FeatureConfig& c) {
  return {{"tuple_size", c.tuple_size},
          {"normal_k", c.normal_k},
          {"shot_radius_frac", c.shot_radius_frac},
          {"d_min_frac", c.d_min_frac},
          {"max_points", c.max_points}};
}

inline FeatureConfig feature_config_from_json(const json& j) {
  FeatureConfig c;
  c.tuple_size = j.at("tuple_size").get<int>();
  c.normal_k = j.at("normal_k").get<int>();
  c.shot_radius_frac = j.at("shot_radius_frac").get<double>();
  c.d_min_frac = j.at("d_min_frac").get<double>();
  c.max_points = j.at("max_points").get<std::size_t>();
  return c;
}

inline json to_json(const VoteConfig& c) {
  return {{"step_deg", c.step_deg},
          {"voxel", c.voxel},
          {"score_threshold", c.score_threshold},
          {"candidate_cap", c.candidate_cap},
          {"use_score_filter", c.use_score_filter},
          {"bounds_inflation", c.bounds_inflation}};
}

// ---- weights

inline constexpr char kWeightsMagic[4] = {'A', 'V', 'W', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated weights file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
  auto p = weights;
  p += ".json";
  return p;
}

}  // namespace detail

/// Binary layout: "AVW1", u32 layer count, (u32 out, u32 in) per layer, then
/// the float32 parameters (weights row-major, then biases, layer by layer),
/// all little-endian. Hyperparameters go to `<path>.json`.
inline void save_weights(const std::filesystem::path& path, const TrainedModel& model, const json& extra = json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kWeightsMagic, 4);
  const auto& layers = model.net.layers();
  detail::put_u32(os, static_cast<std::uint32_t>(layers.size()));
  for (const auto& L : layers) {
    detail::put_u32(os, static_cast<std::uint32_t>(L.out));
    detail::put_u32(os, static_cast<std::uint32_t>(L.in));
  }
  for (float v : model.net.params()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::put_u32(os, bits);
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());

  json side;
  side["format"] = "AVW1";
  side["net"] = to_json(model.net.config());
  json kinds = json::array();
  for (JointKind k : model.kinds) kinds.push_back(to_string(k));
  side["joint_kinds"] = kinds;
  side["features"] = to_json(model.features);
  side["parameters"] = model.net.parameter_count();
  side["extra"] = extra;
  std::ofstream js(detail::sidecar_path(path));
  js << side.dump(2) << '\n';
}

inline TrainedModel load_weights(const std::filesystem::path& path) {
  std::ifstream js(detail::sidecar_path(path));
  if (!js) throw std::runtime_error("missing weights sidecar " + detail::sidecar_path(path).string());
  json side;
  try {
    side = json::parse(js);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad weights sidecar: ") + e.what());
  }
  TrainedModel model{ArticulationNet<float>(net_config_from_json(side.at("net"))), {},
                     feature_config_from_json(side.at("features"))};
  for (const auto& k : side.at("joint_kinds")) model.kinds.push_back(joint_kind_from_string(k.get<std::string>()));

  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kWeightsMagic, 4) != 0) throw FormatError("bad weights magic");
  const auto& layers = model.net.layers();
  if (detail::get_u32(is) != layers.size()) throw FormatError("weights layer count does not match sidecar");
  for (const auto& L : layers) {
    const auto out = detail::get_u32(is);
    const auto in = detail::get_u32(is);
    if (out != static_cast<std::uint32_t>(L.out) || in != static_cast<std::uint32_t>(L.in)) {
      throw FormatError("weights shape does not match sidecar");
    }
  }
  for (float& v : model.net.params()) {
    const std::uint32_t bits = detail::get_u32(is);
    std::memcpy(&v, &bits, 4);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in weights file");
  return model;
}

// ---- estimates and records

inline json to_json(const JointEstimate& e) {
  return {{"kind", to_string(e.kind)},
          {"u", to_json(e.direction)},
          {"q", to_json(e.origin)},
          {"a", to_json(e.afford)},
          {"votes", e.votes},
          {"surviving_tuples", e.surviving}};
}

inline JointEstimate estimate_from_json(const json& j) {
  JointEstimate e;
  e.kind = joint_kind_from_string(j.at("kind").get<std::string>());
  e.direction = UnitVec3(vec3_from_json(j.at("u")));
  e.origin = vec3_from_json(j.at("q"));
  e.afford = vec3_from_json(j.at("a"));
  e.votes = j.at("votes").get<std::uint64_t>();
  e.surviving = j.at("surviving_tuples").get<std::size_t>();
  return e;
}

inline json to_json(const PerceptionRecord& r) {
  return {{"type", "perception"},      {"category", r.category},       {"noise_level", r.noise_level},
          {"seed", r.seed},            {"kind", to_string(r.kind)},     {"origin_cm", r.origin_cm},
          {"direction_deg", r.direction_deg}, {"afford_cm", r.afford_cm}};
}

inline PerceptionRecord perception_from_json(const json& j) {
  PerceptionRecord r;
  r.category = j.at("category").get<std::string>();
  r.noise_level = j.at("noise_level").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.kind = joint_kind_from_string(j.at("kind").get<std::string>());
  r.origin_cm = j.at("origin_cm").get<double>();
  r.direction_deg = j.at("direction_deg").get<double>();
  r.afford_cm = j.at("afford_cm").get<double>();
  return r;
}

/// One manipulation trial with its context.
struct TrialRecord {
  std::string category;
  std::string policy;
  std::string estimator;
  int noise_level = 0;
  std::uint64_t seed = 0;
  ManipOutcome outcome;
};

inline json to_json(const TrialRecord& r) {
  json j{{"type", "trial"},
         {"category", r.category},
         {"policy", r.policy},
         {"estimator", r.estimator},
         {"noise_level", r.noise_level},
         {"seed", r.seed},
         {"achieved", r.outcome.achieved},
         {"target", r.outcome.target},
         {"outcome", to_string(r.outcome.outcome)}};
  j["detach_step"] = r.outcome.detach_step ? json(*r.outcome.detach_step) : json(nullptr);
  return j;
}

inline TrialRecord trial_from_json(const json& j) {
  TrialRecord r;
  r.category = j.at("category").get<std::string>();
  r.policy = j.at("policy").get<std::string>();
  r.estimator = j.at("estimator").get<std::string>();
  r.noise_level = j.at("noise_level").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.outcome.achieved = j.at("achieved").get<double>();
  r.outcome.target = j.at("target").get<double>();
  r.outcome.outcome = outcome_from_string(j.at("outcome").get<std::string>());
  if (!j.at("detach_step").is_null()) r.outcome.detach_step = j.at("detach_step").get<int>();
  return r;
}

// ---- report

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(v.size()));
  return r;
}

struct Report {
  std::size_t perception_records = 0;
  std::size_t trial_records = 0;
  std::string csv;
};

/// Aggregates JSON-lines records: perception errors per (category, noise
/// level) and trial outcomes per (category, estimator, policy, noise level).
inline Report aggregate_report(std::istream& lines) {
  struct PerceptionGroup {
    std::vector<double> origin, direction, afford;
  };
  struct TrialGroup {
    std::size_t success = 0, half = 0, failure = 0;
    std::vector<double> ratio;
  };
  std::map<std::pair<std::string, int>, PerceptionGroup> perception;
  std::map<std::tuple<std::string, std::string, std::string, int>, TrialGroup> trials;
  Report rep;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw FormatError("bad record on line " + std::to_string(lineno));
    }
    const auto type = j.value("type", std::string());
    if (type == "perception") {
      const auto r = perception_from_json(j);
      auto& g = perception[{r.category, r.noise_level}];
      g.origin.push_back(r.origin_cm);
      g.direction.push_back(r.direction_deg);
      g.afford.push_back(r.afford_cm);
      ++rep.perception_records;
    } else if (type == "trial") {
      const auto r = trial_from_json(j);
      auto& g = trials[{r.category, r.estimator, r.policy, r.noise_level}];
      switch (r.outcome.outcome) {
        case Outcome::success: ++g.success; break;
        case Outcome::half_success: ++g.half; break;
        case Outcome::failure: ++g.failure; break;
      }
      g.ratio.push_back(r.outcome.target > 0 ? r.outcome.achieved / r.outcome.target : 0.0);
      ++rep.trial_records;
    } else {
      throw FormatError("unknown record type on line " + std::to_string(lineno));
    }
  }

  std::ostringstream os;
  os << std::setprecision(6);
  if (!perception.empty()) {
    os << "category,noise_level,count,origin_cm_mean,origin_cm_std,direction_deg_mean,direction_deg_std,afford_cm_mean,"
          "afford_cm_std\n";
    for (const auto& [key, g] : perception) {
      const auto o = mean_std(g.origin), d = mean_std(g.direction), a = mean_std(g.afford);
      os << key.first << ',' << key.second << ',' << g.origin.size() << ',' << o.mean << ',' << o.std << ',' << d.mean
         << ',' << d.std << ',' << a.mean << ',' << a.std << '\n';
    }
  }
  if (!trials.empty()) {
    if (!perception.empty()) os << '\n';
    os << "category,estimator,policy,noise_level,count,success,half_success,failure,success_rate,ratio_mean\n";
    for (const auto& [key, g] : trials) {
      const std::size_t n = g.success + g.half + g.failure;
      os << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << std::get<3>(key) << ','
         << n << ',' << g.success << ',' << g.half << ',' << g.failure << ','
         << static_cast<double>(g.success) / static_cast<double>(n) << ',' << mean_std(g.ratio).mean << '\n';
    }
  }
  rep.csv = os.str();
  return rep;
}

}  // namespace artivote
