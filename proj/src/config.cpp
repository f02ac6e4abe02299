#include "geoseg/config.hpp"

#include <sstream>

#include "geoseg/errors.hpp"
#include "geoseg/kvconfig.hpp"

namespace geoseg {

namespace {

[[noreturn]] void unknown(const kv::Entry& e, const std::string& section) {
  throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "' in [" + section + "]");
}

std::size_t to_size(const kv::Entry& e) {
  const long long v = kv::to_int(e);
  if (v < 0) throw ConfigError("line " + std::to_string(e.line) + ": '" + e.key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

std::vector<std::filesystem::path> to_paths(const kv::Entry& e) {
  std::vector<std::filesystem::path> out;
  std::istringstream in(e.value);
  std::string tok;
  while (in >> tok) out.emplace_back(tok);
  return out;
}

template <class T, std::size_t N>
std::array<T, N> to_array(const kv::Entry& e) {
  const auto v = kv::to_doubles(e);
  if (v.size() != N)
    throw ConfigError("line " + std::to_string(e.line) + ": '" + e.key + "' needs " + std::to_string(N) + " values");
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<T>(v[i]);
  return out;
}

void parse_data(ExperimentConfig& c, const kv::Entry& e) {
  if (e.key == "train") c.train_files = to_paths(e);
  else if (e.key == "eval") c.eval_files = to_paths(e);
  else if (e.key == "synthetic_train") c.synthetic_train = to_size(e);
  else if (e.key == "synthetic_eval") c.synthetic_eval = to_size(e);
  else if (e.key == "synthetic_extent") c.synthetic_extent = kv::to_double(e);
  else if (e.key == "synthetic_density") c.synthetic_density = kv::to_double(e);
  else if (e.key == "synthetic_seed") c.synthetic_seed = static_cast<std::uint64_t>(kv::to_int(e));
  else unknown(e, "data");
}

void parse_network(NetworkConfig& n, double& width_scale, const kv::Entry& e) {
  if (e.key == "classes") n.num_classes = static_cast<int>(kv::to_int(e));
  else if (e.key == "ratios") n.ratios = to_array<double, kStages>(e);
  else if (e.key == "widths") n.widths = to_array<std::size_t, kStages>(e);
  else if (e.key == "width_scale") width_scale = kv::to_double(e);
  else if (e.key == "k1") n.k1 = to_size(e);
  else if (e.key == "k2") n.k2 = to_size(e);
  else if (e.key == "k_eig") n.k_eig = to_size(e);
  else if (e.key == "propagate_k") n.propagate_k = to_size(e);
  else if (e.key == "boundary_radius") n.boundary_radius = kv::to_double(e);
  else if (e.key == "boundary_radius_growth") n.boundary_radius_growth = kv::to_double(e);
  else if (e.key == "use_eigen") n.use_eigen = kv::to_bool(e);
  else if (e.key == "use_gcfr") n.use_gcfr = kv::to_bool(e);
  else if (e.key == "use_color") n.use_color = kv::to_bool(e);
  else if (e.key == "use_residual") n.use_residual = kv::to_bool(e);
  else if (e.key == "use_positions") n.use_positions = kv::to_bool(e);
  else unknown(e, "network");
}

void parse_loss(LossWeights& w, const kv::Entry& e) {
  if (e.key == "lambda1") w.lambda1 = kv::to_double(e);
  else if (e.key == "lambda2") w.lambda2 = kv::to_double(e);
  else if (e.key == "tau") w.tau = kv::to_double(e);
  else unknown(e, "loss");
}

void parse_train(ExperimentConfig& c, const kv::Entry& e) {
  TrainConfig& t = c.train;
  if (e.key == "epochs") t.epochs = to_size(e);
  else if (e.key == "batch") t.batch_size = to_size(e);
  else if (e.key == "steps_per_epoch") t.steps_per_epoch = to_size(e);
  else if (e.key == "column_points") t.column_points = to_size(e);
  else if (e.key == "column_section") t.column_section = kv::to_double(e);
  else if (e.key == "learning_rate") t.adam.learning_rate = kv::to_double(e);
  else if (e.key == "lr_decay") t.lr_decay = kv::to_double(e);
  else if (e.key == "beta1") t.adam.beta1 = kv::to_double(e);
  else if (e.key == "beta2") t.adam.beta2 = kv::to_double(e);
  else if (e.key == "eps") t.adam.eps = kv::to_double(e);
  else if (e.key == "rotate_z") t.augment.rotate_z = kv::to_bool(e);
  else if (e.key == "scale") t.augment.scale = kv::to_bool(e);
  else if (e.key == "scale_min") t.augment.scale_min = kv::to_double(e);
  else if (e.key == "scale_max") t.augment.scale_max = kv::to_double(e);
  else if (e.key == "jitter") t.augment.jitter = kv::to_double(e);
  else if (e.key == "eval_every") t.eval_every = to_size(e);
  else if (e.key == "recalibrate_batches") t.recalibrate_batches = to_size(e);
  else if (e.key == "threads") t.threads = static_cast<unsigned>(to_size(e));
  else if (e.key == "checkpoint") c.checkpoint = e.value;
  else if (e.key == "log") c.log = e.value;
  else unknown(e, "train");
}

void parse_eval(EvalOptions& o, const kv::Entry& e) {
  if (e.key == "column_points") o.column_points = to_size(e);
  else if (e.key == "column_section") o.column_section = kv::to_double(e);
  else if (e.key == "absent_classes") {
    if (e.value == "exclude") o.absent = AbsentClassPolicy::Exclude;
    else if (e.value == "zero") o.absent = AbsentClassPolicy::CountAsZero;
    else throw ConfigError("line " + std::to_string(e.line) + ": absent_classes must be 'exclude' or 'zero'");
  } else unknown(e, "eval");
}

std::string join_paths(const std::vector<std::filesystem::path>& paths) {
  std::string out;
  for (const auto& p : paths) out += (out.empty() ? "" : " ") + p.string();
  return out;
}

template <class T, std::size_t N>
std::string join_values(const std::array<T, N>& a) {
  std::ostringstream ss;
  ss.precision(17);
  for (std::size_t i = 0; i < N; ++i) ss << (i ? " " : "") << a[i];
  return ss.str();
}

}  // namespace

void ExperimentConfig::set_seed(std::uint64_t seed) {
  train.seed = seed;
  train.net.seed = seed;
  eval.seed = seed;
}

void ExperimentConfig::validate() const {
  train.validate();
  if (!(synthetic_extent > 0) || !(synthetic_density > 0))
    throw ConfigError("synthetic scene extent and density must be positive");
  if (eval.column_points < train.net.min_points())
    throw ConfigError("eval column_points is below the network minimum " + std::to_string(train.net.min_points()));
  if (!(eval.column_section > 0)) throw ConfigError("eval column_section must be positive");
}

std::string ExperimentConfig::to_text() const {
  const NetworkConfig& n = train.net;
  const TrainConfig& t = train;
  std::ostringstream s;
  s.precision(17);
  s << "seed = " << t.seed << "\n\n[data]\n";
  if (!train_files.empty()) s << "train = " << join_paths(train_files) << '\n';
  if (!eval_files.empty()) s << "eval = " << join_paths(eval_files) << '\n';
  s << "synthetic_train = " << synthetic_train << "\nsynthetic_eval = " << synthetic_eval
    << "\nsynthetic_extent = " << synthetic_extent << "\nsynthetic_density = " << synthetic_density
    << "\nsynthetic_seed = " << synthetic_seed << "\n\n[network]\n"
    << "classes = " << n.num_classes << "\nratios = " << join_values(n.ratios) << "\nwidths = " << join_values(n.widths)
    << "\nk1 = " << n.k1 << "\nk2 = " << n.k2 << "\nk_eig = " << n.k_eig << "\npropagate_k = " << n.propagate_k
    << "\nboundary_radius = " << n.boundary_radius << "\nboundary_radius_growth = " << n.boundary_radius_growth
    << std::boolalpha << "\nuse_eigen = " << n.use_eigen << "\nuse_gcfr = " << n.use_gcfr
    << "\nuse_color = " << n.use_color << "\nuse_residual = " << n.use_residual
    << "\nuse_positions = " << n.use_positions << "\n\n[loss]\n"
    << "lambda1 = " << t.loss.lambda1 << "\nlambda2 = " << t.loss.lambda2 << "\ntau = " << t.loss.tau
    << "\n\n[train]\n"
    << "epochs = " << t.epochs << "\nbatch = " << t.batch_size << "\nsteps_per_epoch = " << t.steps_per_epoch
    << "\ncolumn_points = " << t.column_points << "\ncolumn_section = " << t.column_section
    << "\nlearning_rate = " << t.adam.learning_rate << "\nlr_decay = " << t.lr_decay << "\nbeta1 = " << t.adam.beta1
    << "\nbeta2 = " << t.adam.beta2 << "\neps = " << t.adam.eps << "\nrotate_z = " << t.augment.rotate_z
    << "\nscale = " << t.augment.scale << "\nscale_min = " << t.augment.scale_min
    << "\nscale_max = " << t.augment.scale_max << "\njitter = " << t.augment.jitter
    << "\neval_every = " << t.eval_every << "\nrecalibrate_batches = " << t.recalibrate_batches
    << "\nthreads = " << t.threads << "\ncheckpoint = " << checkpoint.string()
    << "\nlog = " << log.string() << "\n\n[eval]\n"
    << "column_points = " << eval.column_points << "\ncolumn_section = " << eval.column_section
    << "\nabsent_classes = " << (eval.absent == AbsentClassPolicy::Exclude ? "exclude" : "zero") << '\n';
  return s.str();
}

ExperimentConfig parse_experiment(const std::string& text) {
  ExperimentConfig c;
  double width_scale = 1.0;
  bool seed_set = false;
  std::uint64_t seed = 0;
  for (const auto& section : kv::parse(text)) {
    const std::string& name = section.name;
    if (!name.empty() && name != "data" && name != "network" && name != "loss" && name != "train" && name != "eval")
      throw ConfigError("line " + std::to_string(section.line) + ": unknown section [" + name + "]");
    for (const auto& e : section.entries) {
      if (name.empty()) {
        if (e.key != "seed") unknown(e, "");
        seed = static_cast<std::uint64_t>(kv::to_int(e));
        seed_set = true;
      } else if (name == "data") {
        parse_data(c, e);
      } else if (name == "network") {
        parse_network(c.train.net, width_scale, e);
      } else if (name == "loss") {
        parse_loss(c.train.loss, e);
      } else if (name == "train") {
        parse_train(c, e);
      } else {
        parse_eval(c.eval, e);
      }
    }
  }
  if (!(width_scale > 0)) throw ConfigError("width_scale must be positive");
  if (width_scale != 1.0) c.train.net = c.train.net.scaled_widths(width_scale);
  if (seed_set) c.set_seed(seed);
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  ExperimentConfig c = parse_experiment(read_text_file(path));
  const auto base = path.parent_path();
  for (auto* list : {&c.train_files, &c.eval_files})
    for (auto& p : *list)
      if (p.is_relative()) p = base / p;
  return c;
}

Datasets load_datasets(const ExperimentConfig& cfg) {
  Datasets d;
  const int classes = cfg.train.net.num_classes;
  for (const auto& p : cfg.train_files) d.train.push_back(load_cloud(p, classes));
  for (const auto& p : cfg.eval_files) d.eval.push_back(load_cloud(p, classes));
  const bool synthetic = cfg.train_files.empty();
  if (synthetic) {
    if (cfg.synthetic_train == 0) throw ConfigError("no training data: set [data] train or synthetic_train");
    for (std::size_t i = 0; i < cfg.synthetic_train; ++i)
      d.train.push_back(generate_scene(two_class_scene(derive_seed(cfg.synthetic_seed, i), cfg.synthetic_extent,
                                                       cfg.synthetic_density)));
  }
  if (cfg.eval_files.empty())
    for (std::size_t i = 0; i < cfg.synthetic_eval; ++i)
      d.eval.push_back(generate_scene(two_class_scene(derive_seed(cfg.synthetic_seed, 1000000 + i),
                                                      cfg.synthetic_extent, cfg.synthetic_density)));
  for (auto& c : d.train) c.num_classes = std::max(c.num_classes, classes);
  for (auto& c : d.eval) c.num_classes = std::max(c.num_classes, classes);
  return d;
}

}  // namespace geoseg
