#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradctrl/binary_io.hpp"
#include "gradctrl/classifier.hpp"
#include "gradctrl/control.hpp"
#include "gradctrl/errors.hpp"
#include "gradctrl/eval.hpp"
#include "gradctrl/synthworld.hpp"

namespace gradctrl::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

struct Common {
  std::uint64_t seed = 2022;
  std::string out_dir = ".";
  unsigned threads = 1;
};

struct Inputs {
  std::string world;
  std::string bank;
  std::string labels;
  std::string clf_dir;

  void resolve(const Common& common) {
    if (world.empty()) world = (fs::path(common.out_dir) / "world.json").string();
    if (bank.empty()) bank = (fs::path(common.out_dir) / "bank.gclb").string();
    if (labels.empty()) labels = (fs::path(common.out_dir) / "labels.jsonl").string();
    if (clf_dir.empty()) clf_dir = common.out_dir;
  }
};

struct SynthArgs {
  std::size_t n = 100000;
  std::string world_in;
};

struct TrainArgs {
  std::vector<std::string> attrs;
  std::size_t per_class = 30;
  int epochs = 500;
  double lr = 0.05;
  std::size_t hidden = 32;
  std::size_t hidden_layers = 2;
  std::string optimizer = "gd";
  std::size_t heldout = 1000;
};

struct ControlArgs {
  std::string target;
  double alpha = kDefaultStepSize;
  int max_steps = 100;
  bool raw_step = false;
  bool ignore_boundary = false;
  std::string mask_mode = "per-step";
  std::string dims;
  std::size_t boundary = 0;
  double margin = 0.5;
};

struct EditArgs {
  ControlArgs control;
  std::string exclude;
  std::optional<std::size_t> z_index;
  std::string z_file;
  bool flip = false;
  std::string out;
  std::string traj_dir;
};

struct EvalArgs {
  std::vector<std::string> traj_dirs;
  std::string scorer = "oracle";
  std::vector<std::string> attrs;
  std::size_t bins = kDefaultAdBins;
  std::string scatter;
};

struct SweepArgs {
  ControlArgs control;
  std::vector<std::string> entangled;
  std::vector<std::size_t> counts = {50, 100, 150, 200, 250};
};

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::lookup:
      return kExitUsage;
    case ErrorKind::divergence:
    case ErrorKind::vanishing_gradient:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results keep index order.
template <typename T>
std::vector<T> parallel_map(std::size_t n, unsigned threads, const std::function<T(std::size_t)>& fn) {
  std::vector<std::optional<T>> slots(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<T> out;
  out.reserve(n);
  for (auto& slot : slots) out.push_back(std::move(*slot));
  return out;
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t parse_count(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  unsigned long long value = 0;
  try {
    value = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("invalid " + what + " '" + text + "'");
  return static_cast<std::size_t>(value);
}

/// "attr" or "attr:class", class given by name or index.
std::pair<std::string, std::size_t> parse_target(const WorldSpec& world, const std::string& text) {
  if (text.empty()) throw UsageError("--target is required");
  const auto colon = text.find(':');
  const std::string id = text.substr(0, colon);
  const OracleAttribute& attr = world.attribute(id);
  if (colon == std::string::npos) {
    if (attr.num_classes > 1) throw UsageError("multi-class target '" + id + "' needs ':class'");
    return {id, 0};
  }
  const std::string cls = text.substr(colon + 1);
  if (attr.num_classes == 1) throw UsageError("binary target '" + id + "' takes no class");
  for (std::size_t i = 0; i < attr.class_names.size(); ++i) {
    if (attr.class_names[i] == cls) return {id, i};
  }
  const std::size_t index = parse_count(cls, "class");
  if (index >= attr.num_classes) throw UsageError("class " + cls + " out of range for '" + id + "'");
  return {id, index};
}

/// "a:c,b:c"; a bare attribute uses the default count.
std::vector<ExclusionEntry> parse_exclusions(const WorldSpec& world, const std::string& text) {
  std::vector<ExclusionEntry> out;
  for (const std::string& item : split_list(text, ',')) {
    const auto colon = item.find(':');
    ExclusionEntry entry{item.substr(0, colon), kDefaultExclusionCount};
    world.attribute(entry.attr);
    if (colon != std::string::npos) entry.count = parse_count(item.substr(colon + 1), "exclusion count");
    out.push_back(std::move(entry));
  }
  return out;
}

/// "0-79,160" style ranges, inclusive.
std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_list(text, ',')) {
    const auto dash = item.find('-');
    const std::size_t lo = parse_count(item.substr(0, dash), "dimension");
    const std::size_t hi = dash == std::string::npos ? lo : parse_count(item.substr(dash + 1), "dimension");
    if (hi < lo) throw UsageError("empty dimension range '" + item + "'");
    for (std::size_t i = lo; i <= hi; ++i) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

MaskMode parse_mask_mode(const std::string& text) {
  if (text == "per-step") return MaskMode::per_step;
  if (text == "frozen") return MaskMode::frozen;
  throw UsageError("unknown mask mode '" + text + "' (per-step|frozen)");
}

std::string gclf_path(const std::string& dir, const std::string& id) {
  return join_path(dir, id + ".gclf");
}

/// Trained classifiers for every world attribute that has a file in `dir`.
std::map<std::string, AttributeClassifier> load_classifiers(const WorldSpec& world, const std::string& dir) {
  std::map<std::string, AttributeClassifier> out;
  for (const OracleAttribute& attr : world.attributes) {
    const std::string path = gclf_path(dir, attr.id);
    if (!fs::exists(path)) continue;
    AttributeClassifier clf = load_file(path);
    if (clf.input_dim() != world.dim) {
      throw DimensionError("classifier '" + path + "' expects dim " + std::to_string(clf.input_dim()));
    }
    out.emplace(attr.id, std::move(clf));
  }
  return out;
}

const AttributeClassifier& require_classifier(const std::map<std::string, AttributeClassifier>& clfs,
                                              const std::string& id, const std::string& dir) {
  auto it = clfs.find(id);
  if (it == clfs.end()) throw IoError("no classifier file for '" + id + "' in '" + dir + "'");
  return it->second;
}

std::vector<Observer> classifier_observers(const std::map<std::string, AttributeClassifier>& clfs) {
  std::vector<Observer> out;
  for (const auto& [id, clf] : clfs) out.push_back(observe(clf));
  return out;
}

void print_seed_header(std::ostream& out, const Common& common, std::initializer_list<std::string> stages) {
  out << "# seed " << common.seed;
  for (const std::string& stage : stages) out << ' ' << stage << '=' << derive_seed(common.seed, stage);
  out << '\n';
}

// ---------------------------------------------------------------- synth

int cmd_synth(const Common& common, const SynthArgs& args, std::ostream& out) {
  if (args.n == 0) throw UsageError("--n must be at least 1");
  const WorldSpec world = args.world_in.empty() ? default_world(common.seed) : load_world(args.world_in);
  ensure_dir(common.out_dir);
  print_seed_header(out, common, {"bank"});

  Rng rng(derive_seed(common.seed, "bank"));
  const Bank bank = sample_bank(world, args.n, rng, common.threads);
  save_world(world, join_path(common.out_dir, "world.json"));
  save_bank(bank, join_path(common.out_dir, "bank.gclb"), join_path(common.out_dir, "labels.jsonl"));

  out << "bank rows " << bank.size() << ", dim " << bank.dim << '\n';
  out << std::fixed << std::setprecision(4);
  for (std::size_t a = 0; a < bank.attr_ids.size(); ++a) {
    const OracleAttribute& attr = world.attribute(bank.attr_ids[a]);
    std::vector<std::size_t> counts(attr.spec().label_count(), 0);
    for (std::size_t label : bank.labels[a]) ++counts[label];
    out << attr.id;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      const std::string name = c < attr.class_names.size() ? attr.class_names[c] : std::to_string(c);
      out << ' ' << name << '=' << static_cast<double>(counts[c]) / static_cast<double>(bank.size());
    }
    out << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- train

/// Bank latents with labels taken from the sidecar file.
Bank bank_with_sidecar(const WorldSpec& world, const Inputs& in, std::span<const std::string> attrs) {
  Bank bank = load_bank(world, in.bank);
  const LabelTable table = decode_bank_labels(io::read_text_file(in.labels));
  if (table.rows.size() != bank.size()) {
    throw FormatError(0, "label sidecar has " + std::to_string(table.rows.size()) + " rows, bank has " +
                             std::to_string(bank.size()));
  }
  for (const std::string& id : attrs) {
    auto it = std::find(table.attr_ids.begin(), table.attr_ids.end(), id);
    if (it == table.attr_ids.end()) throw CoverageError("label sidecar has no labels for '" + id + "'");
    const std::size_t col = static_cast<std::size_t>(it - table.attr_ids.begin());
    auto& labels = bank.labels[bank.attr_index(id)];
    const std::size_t limit = world.attribute(id).spec().label_count();
    for (std::size_t r = 0; r < bank.size(); ++r) {
      if (table.rows[r][col] >= limit) throw FormatError(0, "label out of range for '" + id + "'");
      labels[r] = table.rows[r][col];
    }
  }
  return bank;
}

int cmd_train(const Common& common, Inputs in, const TrainArgs& args, std::ostream& out) {
  in.resolve(common);
  const WorldSpec world = load_world(in.world);
  std::vector<std::string> attrs = args.attrs.empty() ? world.attribute_ids() : args.attrs;
  for (const std::string& id : attrs) world.attribute(id);
  if (args.optimizer != "gd" && args.optimizer != "adam") {
    throw UsageError("unknown optimizer '" + args.optimizer + "' (gd|adam)");
  }
  if (args.heldout == 0) throw UsageError("--heldout must be at least 1");
  ensure_dir(common.out_dir);

  const Bank bank = bank_with_sidecar(world, in, attrs);
  Rng heldout_rng(derive_seed(common.seed, "heldout"));
  std::vector<Vector> heldout;
  for (std::size_t i = 0; i < args.heldout; ++i) heldout.push_back(sample_latent(world, heldout_rng));

  print_seed_header(out, common, {"heldout"});
  struct Row {
    double train_acc, heldout_acc, loss;
  };
  const auto rows = parallel_map<Row>(attrs.size(), common.threads, [&](std::size_t i) {
    const std::string& id = attrs[i];
    const AttributeSpec spec = world.attribute(id).spec();
    TrainConfig cfg;
    cfg.examples_per_class = args.per_class;
    cfg.epochs = args.epochs;
    cfg.learning_rate = args.lr;
    cfg.hidden_width = args.hidden;
    cfg.hidden_layers = args.hidden_layers;
    cfg.optimizer = args.optimizer == "adam" ? Optimizer::adam : Optimizer::gradient_descent;
    cfg.seed = derive_seed(common.seed, "train:" + id);
    const auto data = training_set_from_bank(bank, id, args.per_class);
    TrainResult result = train(data, spec, cfg);
    std::vector<LabeledLatent> held;
    for (const Vector& z : heldout) held.push_back({z, oracle_label(world, id, z)});
    save_file(result.classifier, gclf_path(common.out_dir, id));
    return Row{result.train_accuracy, accuracy(result.classifier, held), result.final_loss};
  });

  out << std::fixed << std::setprecision(4);
  out << "attribute train_acc heldout_acc final_loss\n";
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    out << attrs[i] << ' ' << rows[i].train_acc << ' ' << rows[i].heldout_acc << ' ' << rows[i].loss << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- edit / sweep

struct ControlSetup {
  WorldSpec world;
  std::map<std::string, AttributeClassifier> clfs;
  std::string target;
  std::size_t target_class = 0;
  StepPolicy policy;
  MaskMode mask_mode = MaskMode::per_step;
};

ControlSetup make_control(const Inputs& in, const ControlArgs& args) {
  ControlSetup s;
  s.world = load_world(in.world);
  std::tie(s.target, s.target_class) = parse_target(s.world, args.target);
  s.clfs = load_classifiers(s.world, in.clf_dir);
  require_classifier(s.clfs, s.target, in.clf_dir);
  s.policy.alpha = args.alpha;
  s.policy.max_steps = args.max_steps;
  s.policy.normalize = !args.raw_step;
  s.policy.stop_on_boundary = !args.ignore_boundary;
  if (!args.dims.empty()) s.policy.dim_mask = parse_dims(args.dims);
  s.policy.validate(s.world.dim);
  s.mask_mode = parse_mask_mode(args.mask_mode);
  return s;
}

/// Binary targets: step away from the classifier's current side.
StepPolicy policy_for(const ControlSetup& s, const Vector& z0) {
  StepPolicy p = s.policy;
  const AttributeClassifier& clf = s.clfs.at(s.target);
  if (clf.attr().num_classes == 1) {
    const double mag = std::abs(p.alpha);
    p.alpha = forward(clf, z0)[0] > 0.0 ? -mag : mag;
  }
  return p;
}

std::vector<AttributeClassifier> entangled_classifiers(const ControlSetup& s, const DisentangleSpec& spec,
                                                       const std::string& clf_dir) {
  std::vector<AttributeClassifier> out;
  for (const ExclusionEntry& e : spec.entangled) out.push_back(require_classifier(s.clfs, e.attr, clf_dir));
  return out;
}

std::vector<std::size_t> boundary_rows(const ControlSetup& s, const Inputs& in, const ControlArgs& args,
                                       Bank& bank_out) {
  if (!(args.margin > 0.0)) throw UsageError("--margin must be positive");
  bank_out = load_bank(s.world, in.bank);
  const BoundarySubset subset = boundary_sample(bank_out, s.target, args.margin, args.boundary);
  if (subset.rows.empty()) throw MissingDataError("no bank rows within the boundary margin");
  return subset.rows;
}

std::string traj_name(std::size_t i) {
  std::ostringstream name;
  name << "traj_" << std::setw(5) << std::setfill('0') << i << ".jsonl";
  return name.str();
}

Vector read_z_file(const std::string& path, std::size_t dim) {
  const std::string text = io::read_text_file(path);
  std::vector<double> values;
  try {
    values = ordered_json::parse(text).get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, "z file '" + path + "' is not a JSON array of numbers");
  }
  if (values.size() != dim) {
    throw DimensionError("z file has " + std::to_string(values.size()) + " values, world dim is " +
                         std::to_string(dim));
  }
  Vector z(std::move(values));
  if (!z.all_finite()) throw RangeError("z file contains non-finite values");
  return z;
}

int exit_for_stop(StopReason reason) {
  switch (reason) {
    case StopReason::boundary_crossed:
      return kExitOk;
    case StopReason::max_steps:
      return kExitMaxSteps;
    case StopReason::vanishing_gradient:
      return kExitNumeric;
  }
  return kExitOk;
}

int cmd_edit(const Common& common, Inputs in, const EditArgs& args, std::ostream& out) {
  in.resolve(common);
  const ControlSetup s = make_control(in, args.control);
  DisentangleSpec spec{s.target, s.target_class, parse_exclusions(s.world, args.exclude), s.mask_mode};
  spec.validate(s.world.dim);
  const auto entangled = entangled_classifiers(s, spec, in.clf_dir);
  const std::vector<Observer> observers = classifier_observers(s.clfs);
  const AttributeClassifier& target_clf = s.clfs.at(s.target);

  const int sources = (args.z_index ? 1 : 0) + (args.z_file.empty() ? 0 : 1) + (args.control.boundary > 0 ? 1 : 0);
  if (sources != 1) throw UsageError("give exactly one of --z-index, --z-file, --boundary");
  ensure_dir(common.out_dir);

  if (args.control.boundary > 0) {
    Bank bank;
    const auto rows = boundary_rows(s, in, args.control, bank);
    const std::string dir = args.traj_dir.empty() ? join_path(common.out_dir, "trajectories") : args.traj_dir;
    ensure_dir(dir);
    const auto trajs = parallel_map<Trajectory>(rows.size(), common.threads, [&](std::size_t i) {
      const Vector z0 = bank.latent(rows[i]);
      return manipulate(z0, target_clf, s.target_class, entangled, spec, policy_for(s, z0), observers);
    });
    std::map<StopReason, std::size_t> reasons;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      io::write_text_file(join_path(dir, traj_name(i)), trajectory_to_jsonl(trajs[i]));
      ++reasons[trajs[i].stop_reason];
    }
    out << "wrote " << trajs.size() << " trajectories to " << dir << '\n';
    for (const auto& [reason, count] : reasons) out << to_string(reason) << ' ' << count << '\n';
    return kExitOk;
  }

  Vector z0;
  StepPolicy policy = s.policy;
  if (args.z_index) {
    const Bank bank = load_bank(s.world, in.bank);
    if (*args.z_index >= bank.size()) throw UsageError("--z-index beyond bank size");
    z0 = bank.latent(*args.z_index);
  } else {
    z0 = read_z_file(args.z_file, s.world.dim);
  }
  if (args.flip) policy = policy_for(s, z0);
  const Trajectory traj = manipulate(z0, target_clf, s.target_class, entangled, spec, policy, observers);
  const std::string path = args.out.empty() ? join_path(common.out_dir, "trajectory.jsonl") : args.out;
  io::write_text_file(path, trajectory_to_jsonl(traj));
  out << "steps " << traj.steps.size() << " stop_reason " << to_string(traj.stop_reason) << '\n';
  return exit_for_stop(traj.stop_reason);
}

int cmd_sweep(const Common& common, Inputs in, const SweepArgs& args, std::ostream& out) {
  in.resolve(common);
  const ControlSetup s = make_control(in, args.control);
  if (args.entangled.empty()) throw UsageError("--entangled needs at least one attribute");
  if (args.counts.empty()) throw UsageError("--counts needs at least one value");
  DisentangleSpec spec{s.target, s.target_class, {}, s.mask_mode};
  for (const std::string& id : args.entangled) {
    s.world.attribute(id);
    spec.entangled.push_back({id, 0});
  }
  for (std::size_t c : args.counts) {
    if (c > s.world.dim) throw UsageError("count " + std::to_string(c) + " exceeds the latent dimension");
  }
  spec.validate(s.world.dim);
  const auto entangled = entangled_classifiers(s, spec, in.clf_dir);
  const std::vector<Observer> observers = classifier_observers(s.clfs);
  const auto grid = uniform_count_grid(args.counts, spec.entangled.size());

  ControlArgs control = args.control;
  if (control.boundary == 0) control.boundary = 100;
  Bank bank;
  const auto rows = boundary_rows(s, in, control, bank);
  ensure_dir(common.out_dir);

  using Sweep = std::map<CountAssignment, Trajectory>;
  const auto sweeps = parallel_map<Sweep>(rows.size(), common.threads, [&](std::size_t i) {
    const Vector z0 = bank.latent(rows[i]);
    return sweep_exclusion_counts(z0, s.clfs.at(s.target), s.target_class, entangled, spec, grid,
                                  policy_for(s, z0), observers);
  });

  std::ostringstream csv;
  csv.precision(17);
  csv << "count,attr,mean_oracle_drift,mean_steps,boundary_crossed\n";
  out << std::fixed << std::setprecision(5);
  out << "count attr mean_oracle_drift mean_steps boundary_crossed\n";
  for (const CountAssignment& counts : grid) {
    const std::string dir = join_path(common.out_dir, "sweep/c" + std::to_string(counts.front()));
    ensure_dir(dir);
    double steps = 0.0;
    std::size_t crossed = 0;
    std::vector<double> drift(args.entangled.size(), 0.0);
    for (std::size_t i = 0; i < sweeps.size(); ++i) {
      const Trajectory& t = sweeps[i].at(counts);
      io::write_text_file(join_path(dir, traj_name(i)), trajectory_to_jsonl(t));
      steps += static_cast<double>(t.steps.size());
      crossed += t.stop_reason == StopReason::boundary_crossed;
      for (std::size_t e = 0; e < args.entangled.size(); ++e) {
        const Vector a = oracle_score(s.world, args.entangled[e], t.steps.front().z);
        const Vector b = oracle_score(s.world, args.entangled[e], t.steps.back().z);
        drift[e] += l2_norm(b - a);
      }
    }
    const double n = static_cast<double>(sweeps.size());
    for (std::size_t e = 0; e < args.entangled.size(); ++e) {
      csv << counts.front() << ',' << args.entangled[e] << ',' << drift[e] / n << ',' << steps / n << ','
          << crossed << '\n';
      out << counts.front() << ' ' << args.entangled[e] << ' ' << drift[e] / n << ' ' << steps / n << ' '
          << crossed << '\n';
    }
  }
  io::write_text_file(join_path(common.out_dir, "sweep.csv"), csv.str());
  return kExitOk;
}

// ---------------------------------------------------------------- eval

std::vector<Trajectory> load_trajectory_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw MissingDataError("trajectory directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw MissingDataError("no trajectories in '" + dir + "'");
  std::vector<Trajectory> out;
  for (const fs::path& f : files) out.push_back(trajectory_from_jsonl(io::read_text_file(f.string())));
  return out;
}

std::string run_label(const std::string& dir, std::size_t index, const std::vector<std::string>& taken) {
  std::string label = fs::path(dir).lexically_normal().filename().string();
  if (label.empty() || label == ".") label = fs::path(dir).lexically_normal().parent_path().filename().string();
  if (label.empty() || std::find(taken.begin(), taken.end(), label) != taken.end()) {
    label = "run" + std::to_string(index);
  }
  return label;
}

int cmd_eval(const Common& common, Inputs in, const EvalArgs& args, std::ostream& out) {
  in.resolve(common);
  if (args.traj_dirs.empty()) throw UsageError("--traj-dir is required");
  if (args.scorer != "oracle" && args.scorer != "classifier") {
    throw UsageError("unknown scorer '" + args.scorer + "' (oracle|classifier)");
  }
  if (args.bins == 0) throw UsageError("--bins must be at least 1");
  const WorldSpec world = load_world(in.world);
  std::vector<std::string> attrs = args.attrs.empty() ? world.attribute_ids() : args.attrs;
  for (const std::string& id : attrs) world.attribute(id);

  const Matrix latents = decode_bank_latents(io::read_file(in.bank));
  if (latents.cols() != world.dim) {
    throw DegenerateNormalizerError("bank width " + std::to_string(latents.cols()) +
                                    " does not match world dim " + std::to_string(world.dim) +
                                    "; normalizers unavailable");
  }

  std::map<std::string, AttributeClassifier> clfs;
  std::vector<Observer> scorers;
  if (args.scorer == "oracle") {
    for (Observer& o : oracle_observers(world)) {
      if (std::find(attrs.begin(), attrs.end(), o.id) != attrs.end()) scorers.push_back(std::move(o));
    }
  } else {
    clfs = load_classifiers(world, in.clf_dir);
    for (const std::string& id : attrs) scorers.push_back(observe(require_classifier(clfs, id, in.clf_dir)));
  }
  const auto stats = observer_statistics(latents, scorers);

  struct Loaded {
    std::string label;
    EvalRun run;
  };
  std::vector<Loaded> runs;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < args.traj_dirs.size(); ++i) {
    const auto raw = load_trajectory_dir(args.traj_dirs[i]);
    for (const Trajectory& t : raw) {
      if (std::find(attrs.begin(), attrs.end(), t.target_attr) == attrs.end()) {
        throw DegenerateNormalizerError("no normalizer for target '" + t.target_attr + "'");
      }
      for (const TrajectoryStep& step : t.steps) {
        if (step.z.size() != world.dim) throw DimensionError("trajectory latent width does not match world");
      }
    }
    EvalRun run;
    run.scorer = args.scorer == "oracle" ? Scorer::oracle : Scorer::trained_classifier;
    run.bank_stats = stats;
    run.trajectories = parallel_map<Trajectory>(raw.size(), common.threads,
                                                [&](std::size_t k) { return rescore(raw[k], scorers); });
    labels.push_back(run_label(args.traj_dirs[i], i, labels));
    runs.push_back({labels.back(), std::move(run)});
  }

  // Targets in first-seen order; bins shared across runs per target.
  std::vector<std::string> targets;
  for (const Loaded& l : runs) {
    for (const Trajectory& t : l.run.trajectories) {
      if (std::find(targets.begin(), targets.end(), t.target_attr) == targets.end()) targets.push_back(t.target_attr);
    }
  }
  std::map<std::string, std::vector<double>> edges;
  for (const std::string& target : targets) {
    std::vector<double> xs;
    for (const Loaded& l : runs) {
      if (std::none_of(l.run.trajectories.begin(), l.run.trajectories.end(),
                       [&](const Trajectory& t) { return t.target_attr == target; })) {
        continue;
      }
      for (const AdPoint& p : ad_points(l.run, target)) xs.push_back(p.x);
    }
    edges[target] = uniform_bin_edges(xs, args.bins);
  }

  std::vector<std::string> scatter_attrs = split_list(args.scatter, ',');
  if (!scatter_attrs.empty() && scatter_attrs.size() != 2) throw UsageError("--scatter takes two attributes");

  ensure_dir(common.out_dir);
  ordered_json doc;
  doc["seed"] = common.seed;
  doc["scorer"] = args.scorer;
  doc["runs"] = ordered_json::object();
  out << std::fixed << std::setprecision(4);
  out << "run target accuracy mean_ad trajectories\n";
  for (const Loaded& l : runs) {
    const auto accuracy = manipulation_accuracy(l.run, attrs);
    std::map<std::string, AdCurve> curves;
    for (const auto& [target, acc] : accuracy) {
      curves[target] = bin_ad_points(ad_points(l.run, target), edges.at(target));
      io::write_text_file(join_path(common.out_dir, "ad_" + l.label + "_" + target + ".csv"),
                          ad_curve_to_csv(curves[target]));
    }
    std::vector<ScatterPair> scatter;
    if (!scatter_attrs.empty()) scatter = logit_scatter(l.run, scatter_attrs[0], scatter_attrs[1]);
    doc["runs"][l.label] = ordered_json::parse(metrics_to_json(accuracy, curves, scatter));
    for (const auto& [target, acc] : accuracy) {
      const auto points = ad_points(l.run, target);
      double ad = 0.0;
      for (const AdPoint& p : points) ad += p.ad;
      out << l.label << ' ' << target << ' ' << acc << ' ' << ad / static_cast<double>(points.size()) << ' '
          << points.size() << '\n';
    }
  }
  io::write_text_file(join_path(common.out_dir, "metrics.json"), doc.dump(2) + "\n");
  return kExitOk;
}

void add_inputs(CLI::App* sub, Inputs& in, bool labels) {
  sub->add_option("--world", in.world, "World JSON (default <out-dir>/world.json)");
  sub->add_option("--bank", in.bank, "GCLB bank (default <out-dir>/bank.gclb)");
  if (labels) sub->add_option("--labels", in.labels, "Label sidecar (default <out-dir>/labels.jsonl)");
  sub->add_option("--clf-dir", in.clf_dir, "Directory of <attr>.gclf files (default <out-dir>)");
}

void add_control(CLI::App* sub, ControlArgs& c) {
  sub->add_option("--target", c.target, "Target attribute, attr or attr:class")->required();
  sub->add_option("--alpha", c.alpha, "Step size; sign picks the direction")->capture_default_str();
  sub->add_option("--max-steps", c.max_steps, "Step budget")->capture_default_str();
  sub->add_flag("--raw-step", c.raw_step, "Step along the unnormalized gradient");
  sub->add_flag("--ignore-boundary", c.ignore_boundary, "Do not stop at the decision boundary");
  sub->add_option("--mask-mode", c.mask_mode, "per-step|frozen")->capture_default_str();
  sub->add_option("--dims", c.dims, "Editable dimensions, e.g. 0-79,160-239");
  sub->add_option("--margin", c.margin, "Boundary sampling margin")->capture_default_str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gradient-based latent attribute control on a synthetic latent world", "gradctrl"};
  app.set_config("--config", "", "Key/value config file; command-line flags take precedence");
  app.fallthrough();
  app.require_subcommand(1);

  Common common;
  app.add_option("--seed", common.seed, "Root seed")->capture_default_str();
  app.add_option("--out-dir", common.out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", common.threads, "Worker threads")->capture_default_str()->check(CLI::Range(1u, 256u));

  Inputs in;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a world file, a latent bank and its labels");
  s->add_option("--n", synth.n, "Bank rows")->capture_default_str();
  s->add_option("--world", synth.world_in, "Use this world JSON instead of the default world");

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "Train one classifier per attribute from the bank");
  add_inputs(t, in, true);
  t->add_option("--attrs", train_args.attrs, "Attributes to train (default all)")->delimiter(',');
  t->add_option("--per-class", train_args.per_class, "Examples per class")->capture_default_str();
  t->add_option("--epochs", train_args.epochs, "Training epochs")->capture_default_str();
  t->add_option("--lr", train_args.lr, "Learning rate")->capture_default_str();
  t->add_option("--hidden", train_args.hidden, "Hidden width")->capture_default_str();
  t->add_option("--hidden-layers", train_args.hidden_layers, "Hidden layers (1 or 2)")->capture_default_str();
  t->add_option("--optimizer", train_args.optimizer, "gd|adam")->capture_default_str();
  t->add_option("--heldout", train_args.heldout, "Held-out oracle samples")->capture_default_str();

  EditArgs edit;
  auto* e = app.add_subcommand("edit", "Manipulate latents along classifier gradients");
  add_inputs(e, in, false);
  add_control(e, edit.control);
  e->add_option("--exclude", edit.exclude, "Entangled attributes and counts, e.g. age:100,glasses:100");
  e->add_option("--z-index", edit.z_index, "Start from this bank row");
  e->add_option("--z-file", edit.z_file, "Start from a JSON array");
  e->add_option("--boundary", edit.control.boundary, "Batch mode: edit this many boundary latents");
  e->add_flag("--flip", edit.flip, "Binary target: step away from the current side");
  e->add_option("--out", edit.out, "Trajectory file (single mode)");
  e->add_option("--traj-dir", edit.traj_dir, "Trajectory directory (batch mode)");

  EvalArgs eval_args;
  auto* v = app.add_subcommand("eval", "Accuracy and attribute dependency of trajectory sets");
  add_inputs(v, in, false);
  v->add_option("--traj-dir", eval_args.traj_dirs, "Trajectory directory (repeatable)")->required();
  v->add_option("--scorer", eval_args.scorer, "oracle|classifier")->capture_default_str();
  v->add_option("--attrs", eval_args.attrs, "Attribute set A (default all)")->delimiter(',');
  v->add_option("--bins", eval_args.bins, "AD bins")->capture_default_str();
  v->add_option("--scatter", eval_args.scatter, "Logit scatter pair x,y");

  SweepArgs sweep;
  auto* w = app.add_subcommand("sweep", "Exclusion-count sweep over boundary latents");
  add_inputs(w, in, false);
  add_control(w, sweep.control);
  w->add_option("--entangled", sweep.entangled, "Entangled attributes")->delimiter(',')->required();
  w->add_option("--counts", sweep.counts, "Exclusion counts")->delimiter(',')->capture_default_str();
  w->add_option("--boundary", sweep.control.boundary, "Boundary latents (default 100)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(common, synth, out);
    if (t->parsed()) return cmd_train(common, in, train_args, out);
    if (e->parsed()) return cmd_edit(common, in, edit, out);
    if (v->parsed()) return cmd_eval(common, in, eval_args, out);
    if (w->parsed()) return cmd_sweep(common, in, sweep, out);
  } catch (const Error& ex) {
    err << "gradctrl: " << ex.what() << '\n';
    return exit_code_for(ex.kind());
  } catch (const std::exception& ex) {
    err << "gradctrl: " << ex.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace gradctrl::cli
