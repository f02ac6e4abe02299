// Acceptance checks. Prints one PASS/FAIL line per criterion; the exit code is
// nonzero when any selected criterion fails.
//
//   geoseg_acceptance [--criterion N]...   (all criteria when none is given)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../common/oracles.hpp"
#include "geoseg/boundary.hpp"
#include "geoseg/config.hpp"
#include "geoseg/geomfeat.hpp"
#include "geoseg/gradcheck.hpp"
#include "geoseg/spatial.hpp"
#include "geoseg/sweep.hpp"
#include "geoseg/training.hpp"

using namespace geoseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

using Matrix3 = std::array<std::array<double, 3>, 3>;

// Uniform random rotation from a normalized Gaussian quaternion.
Matrix3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  double q[4] = {g(rng), g(rng), g(rng), g(rng)};
  const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  for (double& v : q) v /= n;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

Matrix3 z_rotation(double a) {
  return {{{std::cos(a), -std::sin(a), 0}, {std::sin(a), std::cos(a), 0}, {0, 0, 1}}};
}

std::vector<Point3> transform(const std::vector<Point3>& pts, const Matrix3& r, const Point3& t) {
  std::vector<Point3> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int a = 0; a < 3; ++a) out[i][a] = r[a][0] * pts[i][0] + r[a][1] * pts[i][1] + r[a][2] * pts[i][2] + t[a];
  return out;
}

EigenFeatures eigen_of(const std::vector<Point3>& pts, std::size_t k) {
  return local_covariance_eigenvalues(pts, KdTree(pts).knn(pts, k));
}

double max_eigen_diff(const EigenFeatures& a, const EigenFeatures& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int d = 0; d < 3; ++d) m = std::max(m, std::abs(a[i][d] - b[i][d]));
  return m;
}

// --- 1 --------------------------------------------------------------------------

Outcome rigid_motion() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> shift(-10, 10);
  double worst = 0;
  const int clouds = 120;
  for (int c = 0; c < clouds; ++c) {
    const std::size_t n = 32 + rng() % 481;
    const auto pts = oracle::random_points(rng, n);
    const auto moved = transform(pts, random_rotation(rng), {shift(rng), shift(rng), shift(rng)});
    worst = std::max(worst, max_eigen_diff(eigen_of(pts, 16), eigen_of(moved, 16)));
  }
  return {worst < 1e-6, std::to_string(clouds) + " clouds, max eigenvalue change " + fmt(worst)};
}

// --- 2 --------------------------------------------------------------------------

Outcome z_rotation_invariance() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> angle(-M_PI, M_PI), shift(-5, 5);
  double worst = 0;
  const int clouds = 120;
  for (int c = 0; c < clouds; ++c) {
    const std::size_t n = 32 + rng() % 481;
    const auto pts = oracle::random_points(rng, n);
    const auto moved = transform(pts, z_rotation(angle(rng)), {shift(rng), shift(rng), shift(rng)});
    const auto ta = KdTree(pts).knn(pts, 16);
    const auto tb = KdTree(moved).knn(moved, 16);
    const auto ga = gcfr_features(pts, ta), gb = gcfr_features(moved, tb);
    for (std::size_t e = 0; e < ga.distance.size(); ++e) {
      worst = std::max(worst, std::abs(ga.distance[e] - gb.distance[e]));
      worst = std::max(worst, std::abs(wrap_angle(ga.rel_azimuth[e] - gb.rel_azimuth[e])));
      worst = std::max(worst, std::abs(ga.rel_elevation[e] - gb.rel_elevation[e]));
    }
    const auto sa = centroid_bounding_sphere(pts), sb = centroid_bounding_sphere(moved);
    const auto da = local_density(pts, ta, sa.center, sa.radius), db = local_density(moved, tb, sb.center, sb.radius);
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(da.ratio[i] - db.ratio[i]));
    worst = std::max(worst, max_eigen_diff(local_covariance_eigenvalues(pts, ta), local_covariance_eigenvalues(moved, tb)));
  }
  return {worst < 1e-6, std::to_string(clouds) + " clouds, max feature change " + fmt(worst)};
}

// --- 3 --------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(303);
  const int instances = 60;
  int knn_bad = 0, radius_bad = 0, fps_bad = 0, boundary_bad = 0;
  double cbl_worst = 0;
  for (int inst = 0; inst < instances; ++inst) {
    const std::size_t n = 3 + rng() % 298;
    const auto pts = oracle::random_points(rng, n);
    const std::size_t k = 1 + rng() % std::min<std::size_t>(n, 24);
    const KdTree tree(pts);

    const auto t = tree.knn(pts, k);
    const auto ref = oracle::knn(pts, pts, k);
    for (std::size_t i = 0; i < n; ++i)
      knn_bad += !std::equal(ref[i].begin(), ref[i].end(), t.row(i).begin());

    const double r = 0.05 + 0.4 * std::uniform_real_distribution<double>(0, 1)(rng);
    radius_bad += tree.radius_search(pts, r) != oracle::radius(pts, pts, r);

    const std::size_t m = 1 + rng() % n;
    const auto picks = farthest_point_sample(pts, m, rng());
    fps_bad += picks != oracle::fps(pts, m, picks[0]);

    const auto labels = oracle::random_labels(rng, n, 2 + inst % 3);
    const auto mask = mine_boundaries(pts, labels, r);
    boundary_bad += mask != oracle::boundaries(pts, labels, r);

    std::normal_distribution<double> g;
    std::vector<std::vector<double>> f(n, std::vector<double>(6));
    std::vector<double> flat;
    for (auto& row : f)
      for (auto& v : row) flat.push_back(v = g(rng));
    const std::size_t kc = 1 + rng() % std::min<std::size_t>(n - 1, 16);
    const double tau = 0.5 + (inst % 4) * 0.5;
    const auto got = cbl_loss(ad::Value::constant({n, 6}, flat), pts, labels, mask, kc, tau);
    auto wide = oracle::knn(pts, pts, kc + 1);
    for (std::size_t i = 0; i < n; ++i) {
      auto self = std::find(wide[i].begin(), wide[i].end(), static_cast<Index>(i));
      if (self != wide[i].end()) wide[i].erase(self);
      wide[i].resize(kc);
    }
    cbl_worst = std::max(cbl_worst, std::abs(got.loss.item() - oracle::cbl(f, wide, labels, mask, tau)));
  }
  const bool pass = knn_bad == 0 && radius_bad == 0 && fps_bad == 0 && boundary_bad == 0 && cbl_worst < 1e-6;
  return {pass, std::to_string(instances) + " instances; mismatches knn " + std::to_string(knn_bad) + ", radius " +
                    std::to_string(radius_bad) + ", fps " + std::to_string(fps_bad) + ", boundary " +
                    std::to_string(boundary_bad) + "; CBL max diff " + fmt(cbl_worst)};
}

// --- 4 --------------------------------------------------------------------------

Outcome gradient_correctness() {
  GradCheckOptions opts;  // eps 1e-4, double precision
  const auto results = run_gradcheck_suite(0, opts);
  const std::set<std::string> required{"attentive_pool", "residual_geometry_module", "network_64_points", "cbl_loss"};
  std::set<std::string> seen;
  double worst = 0;
  std::string worst_name, failed;
  std::size_t skipped = 0, entries = 0;
  for (const auto& r : results) {
    seen.insert(r.name);
    std::cout << "  " << r.name << " max_rel " << fmt(r.max_rel_error) << " (" << r.entries << " entries, "
              << r.one_sided << " one-sided, " << r.skipped << " skipped)\n";
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = r.name;
    if (!r.passed(1e-3)) failed += " " + r.name;
    skipped += r.skipped;
    entries += r.entries;
  }
  bool pass = failed.empty();
  for (const auto& name : required) pass = pass && seen.count(name);
  return {pass, std::to_string(results.size()) + " checks, eps " + fmt(opts.eps) + ", worst " + worst_name + " " +
                    fmt(worst) + ", " + std::to_string(entries) + " entries compared, " + std::to_string(skipped) +
                    " skipped" + (failed.empty() ? "" : ", failed:" + failed)};
}

// --- 5 --------------------------------------------------------------------------

TrainConfig small_training(double l1, double l2) {
  TrainConfig t;
  t.net.num_classes = 2;
  t.net.ratios = {1.0, 0.5, 0.5, 0.5, 0.5};
  t.net.widths = {4, 8, 8, 16, 16};
  t.net.k1 = 8;
  t.net.k2 = 16;
  t.net.k_eig = 8;
  t.net.propagate_k = 8;
  t.loss = {l1, l2, 1.0};
  t.epochs = 3;
  t.batch_size = 2;
  t.steps_per_epoch = 4;
  t.column_points = 128;
  t.column_section = 1.5;
  t.eval_every = 0;
  t.adam.learning_rate = 0.01;
  return t;
}

Outcome loss_decomposition() {
  std::vector<LabeledCloud> scenes;
  for (int i = 0; i < 2; ++i) scenes.push_back(generate_scene(two_class_scene(500 + i)));
  double worst = 0;
  std::size_t steps = 0, cbl_active = 0;
  const auto weighted = small_training(0.1, 0.2);
  train(scenes, {}, weighted, {}, [&](const StepInfo&, const LossReport& r) {
    worst = std::max(worst, std::abs(r.total - (r.final_loss + 0.1 * r.pred_sum() + 0.2 * r.cbl)));
    cbl_active += r.cbl > 0;
    ++steps;
  });
  std::size_t zero_steps = 0, exact = 0;
  train(scenes, {}, small_training(0, 0), {}, [&](const StepInfo&, const LossReport& r) {
    exact += r.total == r.final_loss;
    ++zero_steps;
  });
  const bool pass = steps > 0 && worst <= 1e-6 && cbl_active > 0 && exact == zero_steps;
  return {pass, std::to_string(steps) + " item-steps, max |total - sum| " + fmt(worst) + ", CBL active in " +
                    std::to_string(cbl_active) + "; lambda=0 exact in " + std::to_string(exact) + "/" +
                    std::to_string(zero_steps)};
}

// --- 6 --------------------------------------------------------------------------

Outcome analytic_values() {
  double ce_worst = 0;
  for (std::size_t c : {2, 3, 13}) {
    const auto logits = ad::Value::constant({10, c}, 0.7);
    const std::vector<int> labels(10, 1);
    ce_worst = std::max(ce_worst, std::abs(ad::cross_entropy(logits, labels).item() - std::log(double(c))));
  }
  // K = 2: one same-label and one other-label neighbor with identical features.
  NeighborTable t;
  t.rows = 3;
  t.k = 2;
  t.indices = {1, 2, 0, 2, 0, 1};
  t.distances.assign(6, 0.0);
  const std::vector<int> labels{0, 0, 1};
  const auto feats = ad::Value::constant({3, 4}, 0.25);
  const double cbl = cbl_loss(feats, t, labels, BoundaryMask{1, 0, 0}, 1.0).loss.item();
  ConfusionMatrix m(2);
  m.add(0, 0, 50);
  m.add(0, 1, 50);
  m.add(1, 1, 100);
  const Scores s = score(m);
  const double cbl_err = std::abs(cbl - std::log(2.0));
  const double oa_err = std::abs(s.oa - 0.75), miou_err = std::abs(s.miou - 0.58333333333333333);
  const bool pass = ce_worst < 1e-6 && cbl_err < 1e-6 && oa_err < 1e-6 && miou_err < 1e-6;
  return {pass, "CE - ln C " + fmt(ce_worst) + ", CBL - ln 2 " + fmt(cbl_err) + ", OA " + fmt(s.oa) + ", mIoU " +
                    std::to_string(s.miou)};
}

// --- 7 --------------------------------------------------------------------------

Outcome desk_training() {
  const ExperimentConfig base = load_experiment(GEOSEG_DESK_CONFIG);
  const int seeds = 5;
  int wins = 0, losses = 0, oa_ok = 0;
  double diff_sum = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    ExperimentConfig cfg = base;
    cfg.set_seed(static_cast<std::uint64_t>(seed));
    cfg.synthetic_seed = static_cast<std::uint64_t>(seed);
    const Datasets data = load_datasets(cfg);
    double bmiou[2] = {};
    for (int with_cbl = 0; with_cbl < 2; ++with_cbl) {
      TrainConfig t = cfg.train;
      t.loss.lambda2 = with_cbl ? 0.2 : 0.0;
      const TrainResult r = train(data.train, {}, t);
      double best_oa = 0;
      for (const auto& e : r.log)
        if (std::isfinite(e.eval.oa)) best_oa = std::max(best_oa, e.eval.oa);
      bmiou[with_cbl] = r.log.back().boundary_miou;
      std::cout << "  seed " << seed << " lambda2 " << t.loss.lambda2 << ": epochs " << r.log.size()
                << " training OA best " << fmt(best_oa) << " last " << fmt(r.log.back().eval.oa) << ", boundary mIoU "
                << fmt(bmiou[with_cbl]) << (r.diverged ? " DIVERGED" : "") << '\n'
                << std::flush;
      if (with_cbl) oa_ok += best_oa >= 0.90 && !r.diverged && r.log.size() <= 30;
    }
    wins += bmiou[1] > bmiou[0];
    losses += bmiou[1] < bmiou[0];
    diff_sum += bmiou[1] - bmiou[0];
  }
  // One-sided sign test: P(at least `wins` successes of wins + losses fair coin flips).
  const int n = wins + losses;
  double p = 0;
  for (int k = wins; k <= n; ++k) p += std::tgamma(n + 1) / (std::tgamma(k + 1) * std::tgamma(n - k + 1));
  p /= std::pow(2.0, n);
  const double mean_diff = diff_sum / seeds;
  const bool pass = oa_ok == seeds && wins > losses && mean_diff > 0;
  return {pass, "OA >= 0.90 in " + std::to_string(oa_ok) + "/" + std::to_string(seeds) +
                    " runs; boundary mIoU lambda2=0.2 vs 0: " + std::to_string(wins) + " wins, " +
                    std::to_string(losses) + " losses, mean gain " + fmt(mean_diff) + ", sign test p=" + fmt(p)};
}

// --- 8 --------------------------------------------------------------------------

Outcome ablation_parity() {
  ExperimentConfig base = parse_experiment(R"(
[data]
synthetic_train = 1
[network]
classes = 2
ratios = 1 0.5 0.5 0.5 0.5
widths = 4 8 8 16 16
k1 = 8
k2 = 16
k_eig = 8
propagate_k = 8
[train]
epochs = 1
batch = 2
steps_per_epoch = 2
column_points = 128
column_section = 1.5
[eval]
column_points = 128
column_section = 1.5
)");
  const std::vector<double> l1{0.1}, l2{0.1, 0.2, 0.3};
  std::vector<SweepVariant> variants = loss_weight_grid(base, l1, l2);
  for (auto& v : ablation_variants(base)) variants.push_back(std::move(v));
  const Datasets data = load_datasets(base);
  int rows = 0, expressible = 0;
  std::cout << "  " << sweep_header() << '\n';
  for (const auto& v : variants) {
    // The variant is a plain config file: its text form parses back to itself.
    expressible += parse_experiment(v.cfg.to_text()).to_text() == v.cfg.to_text();
    const SweepRow row = run_variant(v, data);
    std::cout << "  " << sweep_row(row) << '\n';
    rows += !row.diverged && std::isfinite(row.scores.oa) && std::isfinite(row.scores.miou) &&
            std::isfinite(row.scores.macc);
  }
  const int expected = 10;  // 3 loss-weight rows + full model + 6 removals
  const bool pass = static_cast<int>(variants.size()) == expected && rows == expected && expressible == expected;
  return {pass, std::to_string(variants.size()) + " variants, " + std::to_string(rows) + " metric rows, " +
                    std::to_string(expressible) + " round-trip as config files"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  app.add_option("--criterion", selected, "Criterion number (repeatable)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "rigid-motion invariance of eigenvalue features", 10, rigid_motion},
      {2, "z-rotation invariance of polar, density and eigenvalue features", 10, z_rotation_invariance},
      {3, "spatial, boundary and contrastive-loss oracles", 60, oracle_equivalence},
      {4, "finite-difference gradient checks", 300, gradient_correctness},
      {5, "loss decomposition every step", 300, loss_decomposition},
      {6, "analytic loss and metric values", 10, analytic_values},
      {7, "desk-scale training and contrastive boundary effect", 1200, desk_training},
      {8, "loss-weight and ablation sweep rows", 600, ablation_parity},
  };
  bool ok = true;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    ok = ok && pass;
    std::cout << "criterion " << c.id << " " << (pass ? "PASS" : "FAIL") << ": " << c.name << " (" << o.detail << "; "
              << fmt(secs) << " s of " << c.budget_seconds << " s" << (in_time ? "" : ", over budget") << ")\n"
              << std::flush;
  }
  return ok ? 0 : 1;
}
