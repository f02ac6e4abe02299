// geoseg: command-line entry point for scene generation, feature export,
// boundary mining, training, evaluation, gradient checks and sweeps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "geoseg/boundary.hpp"
#include "geoseg/config.hpp"
#include "geoseg/errors.hpp"
#include "geoseg/geomfeat.hpp"
#include "geoseg/gradcheck.hpp"
#include "geoseg/pointcloud.hpp"
#include "geoseg/spatial.hpp"
#include "geoseg/sweep.hpp"
#include "geoseg/training.hpp"

namespace fs = std::filesystem;
using namespace geoseg;

namespace {

// Exit codes, one per failure class.
enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kMissingFile = 3,
  kBadConfig = 4,
  kClassMismatch = 5,
  kBadInput = 6,
  kDiverged = 7,
  kGradCheckFailed = 8,
};

class ExitError : public Error {
 public:
  ExitError(Exit code, const char* kind, const std::string& what) : Error(what), code_(code), kind_(kind) {}
  Exit code() const noexcept { return code_; }
  const char* kind() const noexcept { return kind_; }

 private:
  Exit code_;
  const char* kind_;
};

// One line on stderr: `error kind=<kind> code=<n> message=<json string>`.
int report(const char* kind, int code, const std::string& message) {
  std::cerr << "error kind=" << kind << " code=" << code << " message=" << nlohmann::json(message).dump() << '\n';
  return code;
}

// Values given on the command line; unset ones keep the config's value.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k1, k2, epochs, batch;
  std::optional<double> lambda1, lambda2, tau;

  void apply(ExperimentConfig& c) const {
    if (seed) c.set_seed(*seed);
    if (k1) c.train.net.k1 = *k1;
    if (k2) c.train.net.k2 = *k2;
    if (epochs) c.train.epochs = *epochs;
    if (batch) c.train.batch_size = *batch;
    if (lambda1) c.train.loss.lambda1 = *lambda1;
    if (lambda2) c.train.loss.lambda2 = *lambda2;
    if (tau) c.train.loss.tau = *tau;
    c.validate();
  }
};

ExperimentConfig load_config(const std::optional<fs::path>& path) {
  if (!path) return ExperimentConfig{};
  if (!fs::exists(*path)) throw IoError("config file '" + path->string() + "' not found");
  try {
    return load_experiment(*path);
  } catch (const ParseError& e) {
    throw ConfigError(path->string() + ": " + e.what());
  }
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(9);
  return out;
}

// --- gen ---------------------------------------------------------------------

void cmd_gen(const fs::path& spec_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  SceneSpec spec;
  try {
    spec = load_scene_spec(spec_path);
  } catch (const ParseError& e) {
    throw ConfigError(spec_path.string() + ": " + e.what());
  }
  if (seed) spec.seed = *seed;
  const LabeledCloud cloud = generate_scene(spec);
  save_cloud(cloud, out);
  std::cout << "points " << cloud.size() << '\n';
}

// --- features ----------------------------------------------------------------

void cmd_features(const fs::path& in, const fs::path& out_dir, std::size_t k) {
  const LabeledCloud cloud = load_cloud(in);
  if (k == 0 || k > cloud.size())
    throw ExitError(kBadInput, "input", "k must lie in [1, " + std::to_string(cloud.size()) + "]");
  fs::create_directories(out_dir);
  const KdTree tree(cloud.positions);
  const NeighborTable nn = tree.knn(cloud.positions, k);

  const EigenFeatures eig = local_covariance_eigenvalues(cloud.positions, nn);
  auto eo = open_output(out_dir / "eigenvalues.csv");
  eo << "point,lambda1,lambda2,lambda3\n";
  for (std::size_t i = 0; i < eig.size(); ++i) eo << i << ',' << eig[i][0] << ',' << eig[i][1] << ',' << eig[i][2] << '\n';

  const GcfrFeatures g = gcfr_features(cloud.positions, nn);
  auto go = open_output(out_dir / "gcfr.csv");
  go << "point,slot,neighbor,distance,azimuth,elevation,rel_azimuth,rel_elevation,centroid_azimuth,centroid_elevation\n";
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.k; ++j) {
      const std::size_t e = i * g.k + j;
      go << i << ',' << j << ',' << nn.at(i, j) << ',' << g.distance[e] << ',' << g.azimuth[e] << ',' << g.elevation[e]
         << ',' << g.rel_azimuth[e] << ',' << g.rel_elevation[e] << ',' << g.centroid_azimuth[i] << ','
         << g.centroid_elevation[i] << '\n';
    }

  const BoundingSphere sphere = centroid_bounding_sphere(cloud.positions);
  const LocalDensity d = local_density(cloud.positions, nn, sphere.center, sphere.radius);
  auto dout = open_output(out_dir / "density.csv");
  dout << "point,ratio,degenerate\n";
  for (std::size_t i = 0; i < d.ratio.size(); ++i) dout << i << ',' << d.ratio[i] << ',' << int(d.degenerate[i]) << '\n';

  const ColorFeatures c = color_features(cloud.colors, nn);
  auto co = open_output(out_dir / "color.csv");
  co << "point,slot,neighbor,dr,dg,db,r,g,b,var_r,var_g,var_b\n";
  for (std::size_t i = 0; i < c.rows; ++i)
    for (std::size_t j = 0; j < c.k; ++j) {
      co << i << ',' << j << ',' << nn.at(i, j);
      for (std::size_t ch = 0; ch < 6; ++ch) co << ',' << c.per_neighbor[(i * c.k + j) * 6 + ch];
      for (std::size_t ch = 0; ch < 3; ++ch) co << ',' << c.variance[i * 3 + ch];
      co << '\n';
    }
  std::cout << "points " << cloud.size() << " k " << k << '\n';
}

// --- boundary ----------------------------------------------------------------

void cmd_boundary(const fs::path& in, const std::optional<fs::path>& out, double radius) {
  if (!(radius > 0)) throw ExitError(kBadInput, "input", "radius must be positive");
  const LabeledCloud cloud = load_cloud(in);
  const BoundaryMask mask = mine_boundaries(cloud.positions, cloud.labels, radius);
  const std::vector<int> column(mask.begin(), mask.end());
  const fs::path target = out ? *out : fs::path(in).replace_extension(".boundary.xyz");
  save_cloud(cloud, target, column);
  std::size_t count = 0;
  for (char b : mask) count += b != 0;
  std::cout << "points " << cloud.size() << " boundary " << count << " out " << target.string() << '\n';
}

// --- train -------------------------------------------------------------------

void cmd_train(const ExperimentConfig& cfg) {
  const Datasets data = load_datasets(cfg);
  auto log = open_output(cfg.log);
  log << log_header() << '\n';
  std::cout << log_header() << '\n';
  const TrainResult r = train(data.train, data.eval, cfg.train, [&](const EpochLog& e) {
    log << log_row(e) << '\n' << std::flush;
    std::cout << log_row(e) << '\n' << std::flush;
  });
  save_checkpoint(cfg.checkpoint, cfg.train.net, r.store);
  if (r.diverged) throw ExitError(kDiverged, "diverged", r.divergence);
}

// --- eval --------------------------------------------------------------------

void cmd_eval(const fs::path& checkpoint, const std::vector<fs::path>& inputs, const std::optional<fs::path>& out,
              const EvalOptions& opts) {
  if (out && inputs.size() != 1) throw ExitError(kUsage, "usage", "--out needs exactly one --in file");
  LoadedModel model = load_checkpoint(checkpoint);
  std::vector<LabeledCloud> scenes;
  for (const auto& p : inputs) {
    LabeledCloud c = load_cloud(p);
    if (c.num_classes > model.cfg.num_classes)
      throw ClassMismatchError("'" + p.string() + "' has labels up to " + std::to_string(c.num_classes - 1) +
                               ", model has " + std::to_string(model.cfg.num_classes) + " classes");
    c.num_classes = model.cfg.num_classes;
    scenes.push_back(std::move(c));
  }
  if (out) save_labels(scenes[0], predict_scene(model.net, model.store, scenes[0], opts), *out);
  const Metrics m = evaluate(model.net, model.store, scenes, opts);
  std::cout.precision(6);
  std::cout << std::fixed << "metric,all,boundary\n"
            << "OA," << m.all.oa << ',' << m.boundary.oa << '\n'
            << "mIoU," << m.all.miou << ',' << m.boundary.miou << '\n'
            << "mACC," << m.all.macc << ',' << m.boundary.macc << '\n';
  for (std::size_t c = 0; c < m.all.iou.size(); ++c)
    std::cout << "IoU_" << c << ',' << m.all.iou[c] << ',' << m.boundary.iou[c] << '\n';
  std::cout << "points," << m.all.points << ',' << m.boundary.points << '\n';
}

// --- gradcheck ---------------------------------------------------------------

void cmd_gradcheck(std::uint64_t seed, double tolerance) {
  const auto results = run_gradcheck_suite(seed);
  bool ok = true;
  std::cout << "op,max_rel_error,max_abs_error,entries,one_sided,skipped,status\n";
  for (const auto& r : results) {
    const bool pass = r.passed(tolerance);
    ok = ok && pass;
    std::cout << r.name << ',' << r.max_rel_error << ',' << r.max_abs_error << ',' << r.entries << ',' << r.one_sided
              << ',' << r.skipped << ',' << (pass ? "pass" : "FAIL") << '\n';
  }
  if (!ok) throw ExitError(kGradCheckFailed, "gradcheck", "relative error above " + std::to_string(tolerance));
}

// --- sweep -------------------------------------------------------------------

void cmd_sweep(const ExperimentConfig& base, const std::vector<double>& l1, const std::vector<double>& l2, bool grid,
               bool ablations, const std::optional<fs::path>& out) {
  std::vector<SweepVariant> variants;
  if (grid) variants = loss_weight_grid(base, l1, l2);
  if (ablations)
    for (auto& v : ablation_variants(base)) variants.push_back(std::move(v));
  if (variants.empty()) throw ExitError(kUsage, "usage", "nothing to run: enable the grid or --ablations");
  const Datasets data = load_datasets(base);
  std::optional<std::ofstream> file;
  if (out) file = open_output(*out);
  auto emit = [&](const std::string& line) {
    std::cout << line << '\n' << std::flush;
    if (file) *file << line << '\n' << std::flush;
  };
  emit(sweep_header());
  for (const auto& v : variants) emit(sweep_row(run_variant(v, data)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud semantic segmentation with geometric features and contrastive boundary learning"};
  app.require_subcommand(1);

  std::optional<fs::path> config_path, in_path, out_path, spec_path, checkpoint_path;
  std::vector<fs::path> inputs;
  Overrides ov;
  double radius = 0.1;
  double tolerance = 1e-3;
  std::vector<double> sweep_l1{0.1}, sweep_l2{0.1, 0.2, 0.3};
  bool ablations = false, no_grid = false;
  std::size_t feature_k = 16;

  auto* gen = app.add_subcommand("gen", "Generate a labeled scene from a scene spec");
  gen->add_option("--spec", spec_path, "Scene spec file")->required();
  gen->add_option("--out", out_path, "Output point file")->required();
  gen->add_option("--seed", ov.seed, "Override the spec seed");

  auto* features = app.add_subcommand("features", "Export eigenvalue, polar, density and color features as CSV");
  features->add_option("--in", in_path, "Point file")->required();
  features->add_option("--out", out_path, "Output directory")->required();
  features->add_option("--k1", feature_k, "Neighbors per point (self included)")->capture_default_str();

  auto* boundary = app.add_subcommand("boundary", "Append a boundary column to a point file");
  boundary->add_option("--in", in_path, "Point file")->required();
  boundary->add_option("--out", out_path, "Output file (default: <in>.boundary.xyz)");
  boundary->add_option("--radius", radius, "Boundary radius in meters")->capture_default_str();

  auto add_training_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config");
    sub->add_option("--seed", ov.seed, "Seed for every random choice");
    sub->add_option("--k1", ov.k1, "Small neighborhood size");
    sub->add_option("--k2", ov.k2, "Large neighborhood size");
    sub->add_option("--tau", ov.tau, "Contrastive temperature");
    sub->add_option("--epochs", ov.epochs, "Training epochs");
    sub->add_option("--batch", ov.batch, "Columns per step");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes a checkpoint and a CSV log");
  add_training_flags(train_cmd);
  train_cmd->add_option("--lambda1", ov.lambda1, "Stage supervision weight");
  train_cmd->add_option("--lambda2", ov.lambda2, "Contrastive boundary weight");
  train_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint path (overrides the config)");
  train_cmd->add_option("--out", out_path, "Log path (overrides the config)");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on labeled point files");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint")->required();
  eval_cmd->add_option("--in", inputs, "Point files")->required();
  eval_cmd->add_option("--config", config_path, "Experiment config for the [eval] settings");
  eval_cmd->add_option("--seed", ov.seed, "Seed for column order");
  eval_cmd->add_option("--out", out_path, "Write per-point predictions (single input only)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", ov.seed, "Seed for the random inputs");
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Loss-weight grid and block ablations; one metrics row each");
  add_training_flags(sweep);
  sweep->add_option("--lambda1", sweep_l1, "Stage supervision weights")->delimiter(',')->capture_default_str();
  sweep->add_option("--lambda2", sweep_l2, "Contrastive boundary weights")->delimiter(',')->capture_default_str();
  sweep->add_flag("--ablations", ablations, "Add the block-removal rows");
  sweep->add_flag("--no-grid", no_grid, "Skip the loss-weight grid");
  sweep->add_option("--out", out_path, "Also write the table to this CSV file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", kUsage, e.what());
  }

  try {
    if (*gen) {
      cmd_gen(*spec_path, *out_path, ov.seed);
    } else if (*features) {
      cmd_features(*in_path, *out_path, feature_k);
    } else if (*boundary) {
      cmd_boundary(*in_path, out_path, radius);
    } else if (*train_cmd) {
      ExperimentConfig cfg = load_config(config_path);
      ov.apply(cfg);
      if (checkpoint_path) cfg.checkpoint = *checkpoint_path;
      if (out_path) cfg.log = *out_path;
      cmd_train(cfg);
    } else if (*eval_cmd) {
      ExperimentConfig cfg = load_config(config_path);
      if (ov.seed) cfg.set_seed(*ov.seed);
      cmd_eval(*checkpoint_path, inputs, out_path, cfg.eval);
    } else if (*gradcheck) {
      cmd_gradcheck(ov.seed.value_or(0), tolerance);
    } else if (*sweep) {
      ExperimentConfig cfg = load_config(config_path);
      ov.apply(cfg);
      cmd_sweep(cfg, sweep_l1, sweep_l2, !no_grid, ablations, out_path);
    }
  } catch (const ExitError& e) {
    return report(e.kind(), e.code(), e.what());
  } catch (const IoError& e) {
    return report("missing_file", kMissingFile, e.what());
  } catch (const ConfigError& e) {
    return report("config", kBadConfig, e.what());
  } catch (const ClassMismatchError& e) {
    return report("class_mismatch", kClassMismatch, e.what());
  } catch (const ParseError& e) {
    return report("input", kBadInput, e.what());
  } catch (const DivergenceError& e) {
    return report("diverged", kDiverged, e.what());
  } catch (const std::exception& e) {
    return report("internal", kInternal, e.what());
  }
  return kOk;
}
