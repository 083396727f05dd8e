// Command-line front end: data generation, training, inference, perception
// evaluation, manipulation trials and report aggregation.

#include "artivote/artivote.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace artivote;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Options of one subcommand, shared between command-line parsing, --config
/// files and the resolved-config dump.
class OptionTable {
 public:
  explicit OptionTable(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + name, var, help)->capture_default_str();
    entries_.push_back({name, opt, [&var] { return json(var); }, [&var](const json& j) { assign(var, j); }});
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    CLI::Option* opt = app_->add_flag("--" + name, var, help);
    entries_.push_back({name, opt, [&var] { return json(var); }, [&var](const json& j) { var = j.get<bool>(); }});
    return opt;
  }

  void add_config_option() { app_->add_option("--config", config_path_, "JSON file with option values"); }

  /// Fills options that were not given on the command line from --config.
  void apply_config() {
    if (config_path_.empty()) return;
    std::ifstream is(config_path_);
    if (!is) throw UsageError("cannot read config " + config_path_);
    json cfg;
    try {
      cfg = json::parse(is);
    } catch (const json::exception& e) {
      throw UsageError("bad config " + config_path_ + ": " + e.what());
    }
    if (!cfg.is_object()) throw UsageError("config must be a JSON object");
    for (const auto& [key, value] : cfg.items()) {
      const auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == key; });
      if (it == entries_.end()) throw UsageError("unknown config key: " + key);
      if (it->option->count() > 0) continue;
      try {
        it->set(value);
      } catch (const json::exception&) {
        throw UsageError("bad value for config key: " + key);
      }
    }
  }

  json resolved(const std::string& command) const {
    json j;
    j["command"] = command;
    for (const auto& e : entries_) j[e.name] = e.get();
    return j;
  }

 private:
  template <typename T>
  static void assign(T& var, const json& j) {
    var = j.get<T>();
  }
  static void assign(std::vector<std::string>& var, const json& j) {
    var = j.is_string() ? split_list(j.get<std::string>()) : j.get<std::vector<std::string>>();
  }

  struct Entry {
    std::string name;
    CLI::Option* option;
    std::function<json()> get;
    std::function<void(const json&)> set;
  };

  CLI::App* app_;
  std::vector<Entry> entries_;
  std::string config_path_;
};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

fs::path config_beside(const fs::path& out) {
  fs::path p = out;
  p += ".config.json";
  return p;
}

std::vector<Category> parse_categories(const std::vector<std::string>& names) {
  std::vector<Category> out;
  for (const auto& n : names) {
    try {
      out.push_back(category_from_string(n));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("no category given");
  return out;
}

Category parse_category(const std::string& name) { return parse_categories({name}).front(); }

/// Random subset of at most `max_points` points; normals are kept.
LabeledCloud subsample(const LabeledCloud& cloud, std::size_t max_points, Rng& rng) {
  if (max_points == 0 || cloud.size() <= max_points) return cloud;
  std::vector<std::size_t> keep(cloud.size());
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  for (std::size_t i = 0; i < max_points; ++i) std::swap(keep[i], keep[i + rng.index(cloud.size() - i)]);
  keep.resize(max_points);
  std::sort(keep.begin(), keep.end());
  LabeledCloud out;
  out.viewpoint = cloud.viewpoint;
  out.diag = cloud.diag;
  for (std::size_t i : keep) {
    out.points.push_back(cloud.points[i]);
    out.normals.push_back(cloud.normals[i]);
    out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

json camera_json(const CameraPose& c) {
  return {{"azimuth", c.azimuth}, {"elevation", c.elevation}, {"distance", c.distance}, {"look_at", to_json(c.look_at)}};
}

/// JSON-lines sink: a file, or stdout when no path is given.
class LineWriter {
 public:
  explicit LineWriter(const std::string& path) {
    if (!path.empty()) {
      const fs::path p(path);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      file_.open(p);
      if (!file_) throw std::runtime_error("cannot write " + path);
    }
  }
  void write(const json& j) { (file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout) << j.dump() << '\n'; }

 private:
  std::ofstream file_;
};

// ---- gen

struct GenArgs {
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::string> categories{"door-cabinet", "drawer-cabinet"};
  int instances = 1;
  int first_instance = 0;
  int states = 40;
  int views = 5;
  int noise_level = 0;
  std::size_t max_points = 4096;
};

int run_gen(const GenArgs& a, const json& resolved) {
  const fs::path root(a.out);
  fs::create_directories(root);
  write_json(root / "config.json", resolved);
  std::size_t written = 0;
  for (Category cat : parse_categories(a.categories)) {
    for (int i = a.first_instance; i < a.first_instance + a.instances; ++i) {
      std::ostringstream name;
      name << "instance_" << std::setw(3) << std::setfill('0') << i;
      const fs::path dir = root / to_string(cat) / name.str();
      fs::create_directories(dir);
      const auto views = instance_views(cat, instance_seed(a.seed, cat, i), a.states, a.views);
      for (std::size_t k = 0; k < views.size(); ++k) {
        const ViewSpec& v = views[k];
        Rng rng(v.seed);
        LabeledCloud cloud = render_cloud(v.model, v.camera);
        if (a.noise_level > 0) {
          Rng nr = rng.split(1);
          cloud = apply_noise(cloud, noise_level(a.noise_level), nr);
        }
        Rng sr = rng.split(5);
        cloud = subsample(cloud, a.max_points, sr);
        std::ostringstream stem;
        stem << "view_" << std::setw(4) << std::setfill('0') << k;
        save_ply(dir / (stem.str() + ".ply"), cloud);
        write_json(dir / (stem.str() + ".json"), {{"model", to_json(v.model)},
                                                  {"camera", camera_json(v.camera)},
                                                  {"noise_level", a.noise_level},
                                                  {"seed", v.seed},
                                                  {"points", cloud.size()}});
        ++written;
      }
    }
  }
  std::cerr << "wrote " << written << " views to " << root.string() << '\n';
  return 0;
}

// ---- train

struct TrainArgs {
  std::uint64_t seed = 0;
  std::string out;
  std::string category = "door-cabinet";
  int instances = 16;
  int first_instance = 0;
  int states = 40;
  int views = 5;
  std::size_t tuples = 32;
  int tuple_size = 5;
  std::vector<int> noise_levels{0};
  std::size_t max_points = 2048;
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 0.02;
  double momentum = 0.9;
  int width = 256;
  int blocks = 4;
  LossWeights weights;
};

int run_train(const TrainArgs& a, const json& resolved) {
  const Category cat = parse_category(a.category);
  for (int n : a.noise_levels) {
    if (n < 0 || n >= kNoiseLevels) throw UsageError("noise level out of range");
  }
  DatasetConfig d;
  d.states = a.states;
  d.views = a.views;
  d.tuples_per_cloud = a.tuples;
  d.noise_levels = a.noise_levels;
  d.features.tuple_size = a.tuple_size;
  d.features.max_points = a.max_points;
  NetConfig net;
  net.tuple_size = a.tuple_size;
  net.width = a.width;
  net.blocks = a.blocks;
  const auto kinds = joint_kinds(cat);
  net.joints = static_cast<int>(kinds.size());

  const TrainingSet data = build_training_set(cat, a.seed, a.first_instance, a.instances, d, net);
  std::cerr << "training on " << data.size() << " tuples\n";
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.learning_rate;
  tc.momentum = a.momentum;
  tc.seed = a.seed;
  tc.weights = a.weights;
  const TrainResult r = train(data, tc);
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) std::cerr << "epoch " << e + 1 << " loss " << r.epoch_loss[e] << '\n';

  const TrainedModel model{r.net, kinds, d.features};
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_weights(out, model, {{"config", resolved}, {"epoch_loss", r.epoch_loss}, {"examples", data.size()}});
  write_json(config_beside(out), resolved);
  return 0;
}

// ---- vote options shared by infer, eval-perception and trials

struct VoteArgs {
  std::size_t tuples = 100000;
  double step_deg = 2.0;
  double voxel = 0.01;
  bool no_score_filter = false;

  void add_to(OptionTable& t) {
    t.add("tuples", tuples, "number of sampled tuples K");
    t.add("step-deg", step_deg, "candidate spacing in degrees")->check(CLI::PositiveNumber);
    t.add("voxel", voxel, "origin voxel size in meters")->check(CLI::PositiveNumber);
    t.flag("no-score-filter", no_score_filter, "vote with every tuple, ignoring the articulation score");
  }

  VoteConfig config() const {
    VoteConfig c;
    c.step_deg = step_deg;
    c.voxel = voxel;
    c.use_score_filter = !no_score_filter;
    return c;
  }
};

// ---- infer

struct InferArgs {
  std::uint64_t seed = 0;
  std::string weights;
  std::string input;
  std::string out;
  VoteArgs vote;
};

int run_infer(const InferArgs& a, const json& resolved) {
  const TrainedModel model = load_weights(a.weights);
  const LabeledCloud cloud = load_ply(a.input);
  InferOptions opt;
  opt.tuples = a.vote.tuples;
  opt.seed = a.seed;
  const auto estimates = infer(cloud, model, a.vote.config(), opt);
  json j;
  j["input"] = a.input;
  j["joints"] = json::array();
  for (const auto& e : estimates) j["joints"].push_back(to_json(e));
  if (a.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(a.out, j);
    write_json(config_beside(a.out), resolved);
  }
  return 0;
}

// ---- eval-perception

struct EvalArgs {
  std::uint64_t seed = 0;
  std::string weights;
  std::string category = "door-cabinet";
  std::string out;
  int instances = 4;
  int first_instance = 16;
  int states = 5;
  int views = 1;
  std::vector<int> noise_levels{0, 1, 2, 3, 4};
  VoteArgs vote;
};

int run_eval(const EvalArgs& a, const json& resolved) {
  const Category cat = parse_category(a.category);
  for (int n : a.noise_levels) {
    if (n < 0 || n >= kNoiseLevels) throw UsageError("noise level out of range");
  }
  const TrainedModel model = load_weights(a.weights);
  LineWriter sink(a.out);
  if (!a.out.empty()) write_json(config_beside(a.out), resolved);
  for (int i = a.first_instance; i < a.first_instance + a.instances; ++i) {
    for (const ViewSpec& v : instance_views(cat, instance_seed(a.seed, cat, i), a.states, a.views)) {
      const LabeledCloud clean = render_cloud(v.model, v.camera);
      for (int level : a.noise_levels) {
        Rng rng(v.seed);
        Rng nr = rng.split(1);
        const LabeledCloud cloud = level > 0 ? apply_noise(clean, noise_level(level), nr) : clean;
        InferOptions opt;
        opt.tuples = a.vote.tuples;
        opt.seed = rng.split(2).seed();
        const auto est = infer(cloud, model, a.vote.config(), opt);
        for (std::size_t j = 0; j < est.size(); ++j) {
          PerceptionRecord r = evaluate(est[j], joint_truth(v.model, j));
          r.noise_level = level;
          r.category = to_string(cat);
          r.seed = v.seed;
          sink.write(to_json(r));
        }
      }
    }
  }
  return 0;
}

// ---- trials

struct TrialArgs {
  std::uint64_t seed = 0;
  std::string category = "door-cabinet";
  std::string out;
  std::string estimator = "perfect";
  std::string weights;
  std::string policy = "both";
  int count = 100;
  int noise_level = 0;
  int steps = 50;
  VoteArgs vote;
};

int run_trials(const TrialArgs& a, const json& resolved) {
  const Category cat = parse_category(a.category);
  if (a.estimator != "perfect" && a.estimator != "model") throw UsageError("estimator must be perfect or model");
  if (a.estimator == "model" && a.weights.empty()) throw UsageError("--weights is required with --estimator model");
  std::vector<Policy> policies;
  if (a.policy == "tracked" || a.policy == "both") policies.push_back(Policy::tracked);
  if (a.policy == "open-loop" || a.policy == "both") policies.push_back(Policy::open_loop);
  if (policies.empty()) throw UsageError("policy must be tracked, open-loop or both");
  std::optional<TrainedModel> model;
  if (a.estimator == "model") model = load_weights(a.weights);

  TrialConfig tc;
  tc.n_steps = a.steps;
  LineWriter sink(a.out);
  if (!a.out.empty()) write_json(config_beside(a.out), resolved);
  const Rng root(a.seed);
  for (int k = 0; k < a.count; ++k) {
    const std::uint64_t trial_seed = root.split(static_cast<std::uint64_t>(k)).seed();
    const TrialSetup setup = make_trial(cat, trial_seed, tc);
    std::optional<JointEstimate> est;
    if (model) {
      Rng rng = Rng(trial_seed).split(7);
      Rng nr = rng.split(1);
      const LabeledCloud cloud = a.noise_level > 0 ? apply_noise(setup.cloud, noise_level(a.noise_level), nr) : setup.cloud;
      InferOptions opt;
      opt.tuples = a.vote.tuples;
      opt.seed = rng.split(2).seed();
      try {
        est = infer(cloud, *model, a.vote.config(), opt).front();
      } catch (const InsufficientEvidence&) {
      }
    } else {
      est = perfect_estimate(setup.model);
    }
    for (Policy p : policies) {
      TrialRecord rec{to_string(cat), to_string(p), a.estimator, a.noise_level, trial_seed, {}};
      if (est) {
        rec.outcome = run_trial(setup, *est, p, tc);
      } else {
        rec.outcome.target = setup.target;
      }
      sink.write(to_json(rec));
    }
  }
  return 0;
}

// ---- report

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int run_report(const ReportArgs& a) {
  std::stringstream all;
  for (const auto& path : a.inputs) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    all << is.rdbuf() << '\n';
  }
  const Report rep = aggregate_report(all);
  if (a.out.empty()) {
    std::cout << rep.csv;
  } else {
    const fs::path p(a.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + a.out);
    os << rep.csv;
  }
  std::cerr << rep.perception_records << " perception records, " << rep.trial_records << " trial records\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Articulation estimation by point-tuple voting"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "render labeled point clouds of procedural objects");
  OptionTable gen_opts(gen_cmd);
  gen_opts.add("seed", gen.seed, "run seed");
  gen_opts.add("out", gen.out, "output directory");
  gen_opts.add("category", gen.categories, "categories (comma separated)")->delimiter(',');
  gen_opts.add("instances", gen.instances, "objects per category")->check(CLI::PositiveNumber);
  gen_opts.add("first-instance", gen.first_instance, "index of the first object")->check(CLI::NonNegativeNumber);
  gen_opts.add("states", gen.states, "joint states per object")->check(CLI::PositiveNumber);
  gen_opts.add("views", gen.views, "camera views per state")->check(CLI::PositiveNumber);
  gen_opts.add("noise-level", gen.noise_level, "corruption level 0-4")->check(CLI::Range(0, kNoiseLevels - 1));
  gen_opts.add("max-points", gen.max_points, "points kept per cloud (0 keeps all)");
  gen_opts.add_config_option();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train the voting network on generated data");
  OptionTable train_opts(train_cmd);
  train_opts.add("seed", tr.seed, "run seed (also selects the training objects)");
  train_opts.add("out", tr.out, "weights file to write");
  train_opts.add("category", tr.category, "object category");
  train_opts.add("instances", tr.instances, "training objects")->check(CLI::PositiveNumber);
  train_opts.add("first-instance", tr.first_instance, "index of the first object")->check(CLI::NonNegativeNumber);
  train_opts.add("states", tr.states, "joint states per object")->check(CLI::PositiveNumber);
  train_opts.add("views", tr.views, "camera views per state")->check(CLI::PositiveNumber);
  train_opts.add("tuples", tr.tuples, "tuples sampled per training cloud");
  train_opts.add("tuple-size", tr.tuple_size, "points per tuple M")->check(CLI::Range(2, 16));
  train_opts.add("noise-levels", tr.noise_levels, "noise levels drawn for training clouds")->delimiter(',');
  train_opts.add("max-points", tr.max_points, "points kept per cloud");
  train_opts.add("epochs", tr.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  train_opts.add("batch-size", tr.batch_size, "minibatch size")->check(CLI::PositiveNumber);
  train_opts.add("learning-rate", tr.learning_rate, "initial learning rate")->check(CLI::PositiveNumber);
  train_opts.add("momentum", tr.momentum, "SGD momentum")->check(CLI::Range(0.0, 1.0));
  train_opts.add("width", tr.width, "hidden width")->check(CLI::PositiveNumber);
  train_opts.add("blocks", tr.blocks, "residual blocks")->check(CLI::NonNegativeNumber);
  train_opts.add("lambda-d", tr.weights.lambda_d, "weight of the direction term")->check(CLI::NonNegativeNumber);
  train_opts.add("lambda-a", tr.weights.lambda_a, "weight of the affordance term")->check(CLI::NonNegativeNumber);
  train_opts.add("lambda-aa", tr.weights.lambda_aa, "weight of the articulation-score term")->check(CLI::NonNegativeNumber);
  train_opts.add_config_option();

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "estimate joints and affordable points of a PLY cloud");
  OptionTable infer_opts(infer_cmd);
  infer_opts.add("seed", inf.seed, "sampling seed");
  infer_opts.add("weights", inf.weights, "trained weights file");
  infer_opts.add("input", inf.input, "input PLY cloud");
  infer_opts.add("out", inf.out, "output JSON (stdout if omitted)");
  inf.vote.add_to(infer_opts);
  infer_opts.add_config_option();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval-perception", "perception errors of held-out objects over noise levels");
  OptionTable eval_opts(eval_cmd);
  eval_opts.add("seed", ev.seed, "run seed used to generate the objects");
  eval_opts.add("weights", ev.weights, "trained weights file");
  eval_opts.add("category", ev.category, "object category");
  eval_opts.add("out", ev.out, "output JSON-lines file (stdout if omitted)");
  eval_opts.add("instances", ev.instances, "evaluated objects")->check(CLI::PositiveNumber);
  eval_opts.add("first-instance", ev.first_instance, "index of the first held-out object")->check(CLI::NonNegativeNumber);
  eval_opts.add("states", ev.states, "joint states per object")->check(CLI::PositiveNumber);
  eval_opts.add("views", ev.views, "camera views per state")->check(CLI::PositiveNumber);
  eval_opts.add("noise-level", ev.noise_levels, "noise levels to sweep")->delimiter(',');
  ev.vote.tuples = 20000;
  ev.vote.add_to(eval_opts);
  eval_opts.add_config_option();

  TrialArgs tl;
  auto* trials_cmd = app.add_subcommand("trials", "randomized kinematic manipulation trials");
  OptionTable trial_opts(trials_cmd);
  trial_opts.add("seed", tl.seed, "run seed");
  trial_opts.add("category", tl.category, "object category");
  trial_opts.add("out", tl.out, "output JSON-lines file (stdout if omitted)");
  trial_opts.add("estimator", tl.estimator, "perfect or model");
  trial_opts.add("weights", tl.weights, "trained weights file (model estimator)");
  trial_opts.add("policy", tl.policy, "tracked, open-loop or both");
  trial_opts.add("count", tl.count, "number of trials")->check(CLI::PositiveNumber);
  trial_opts.add("noise-level", tl.noise_level, "corruption of the observed cloud")->check(CLI::Range(0, kNoiseLevels - 1));
  trial_opts.add("steps", tl.steps, "execution steps")->check(CLI::PositiveNumber);
  tl.vote.tuples = 20000;
  tl.vote.add_to(trial_opts);
  trial_opts.add_config_option();

  ReportArgs rp;
  auto* report_cmd = app.add_subcommand("report", "aggregate JSON-lines results into CSV");
  report_cmd->add_option("inputs", rp.inputs, "JSON-lines result files")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", rp.out, "output CSV (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "artivote: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) {
      gen_opts.apply_config();
      if (gen.out.empty()) throw UsageError("--out is required");
      json resolved = gen_opts.resolved("gen");
      resolved.erase("out");  // the tree itself is the output location
      return run_gen(gen, resolved);
    }
    if (train_cmd->parsed()) {
      train_opts.apply_config();
      if (tr.out.empty()) throw UsageError("--out is required");
      return run_train(tr, train_opts.resolved("train"));
    }
    if (infer_cmd->parsed()) {
      infer_opts.apply_config();
      if (inf.weights.empty() || inf.input.empty()) throw UsageError("--weights and --input are required");
      return run_infer(inf, infer_opts.resolved("infer"));
    }
    if (eval_cmd->parsed()) {
      eval_opts.apply_config();
      if (ev.weights.empty()) throw UsageError("--weights is required");
      return run_eval(ev, eval_opts.resolved("eval-perception"));
    }
    if (trials_cmd->parsed()) {
      trial_opts.apply_config();
      return run_trials(tl, trial_opts.resolved("trials"));
    }
    if (report_cmd->parsed()) return run_report(rp);
  } catch (const UsageError& e) {
    std::cerr << "artivote: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "artivote: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
