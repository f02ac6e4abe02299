#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "../common/oracles.hpp"
#include "geoseg/config.hpp"
#include "geoseg/errors.hpp"
#include "geoseg/sweep.hpp"
#include "geoseg/training.hpp"

using namespace geoseg;

namespace {

TrainConfig tiny_train(std::uint64_t seed) {
  TrainConfig t;
  t.net.num_classes = 2;
  t.net.ratios = {1.0, 0.5, 0.5, 0.5, 0.5};
  t.net.widths = {4, 6, 6, 8, 8};
  t.net.k1 = 6;
  t.net.k2 = 10;
  t.net.k_eig = 4;
  t.net.propagate_k = 4;
  t.epochs = 2;
  t.batch_size = 2;
  t.steps_per_epoch = 2;
  t.column_points = 64;
  t.column_section = 1.5;
  t.eval_every = 0;
  t.adam.learning_rate = 0.01;
  t.seed = t.net.seed = seed;
  return t;
}

std::vector<LabeledCloud> scenes(int n) {
  std::vector<LabeledCloud> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_scene(two_class_scene(50 + i, 2.0, 60)));
  return out;
}

}  // namespace

TEST_CASE("hand confusion matrix scores") {
  ConfusionMatrix m(2);
  m.add(0, 0, 50);
  m.add(0, 1, 50);
  m.add(1, 1, 100);
  const Scores s = score(m);
  CHECK(std::abs(s.oa - 0.75) < 1e-12);
  CHECK(std::abs(s.miou - (0.5 + 2.0 / 3.0) / 2) < 1e-12);
  CHECK(std::abs(s.macc - 0.75) < 1e-12);
  CHECK(s.points == 200);
}

TEST_CASE("absent classes are excluded or counted as zero") {
  ConfusionMatrix m(3);
  m.add(0, 0, 10);
  m.add(1, 1, 10);
  CHECK(score(m, AbsentClassPolicy::Exclude).miou == doctest::Approx(1.0));
  CHECK(score(m, AbsentClassPolicy::CountAsZero).miou == doctest::Approx(2.0 / 3.0));
  CHECK(std::isnan(score(m).iou[2]));
  // A class predicted but never present still counts in mIoU with IoU 0.
  m.add(0, 2, 10);
  const Scores s = score(m);
  CHECK(s.iou[2] == 0.0);
  CHECK(std::isnan(s.acc[2]));
  CHECK(s.macc == doctest::Approx((0.5 + 1.0) / 2));
  const Scores empty = score(ConfusionMatrix(2));
  CHECK(empty.oa == 0);
  CHECK(empty.miou == 0);
}

TEST_CASE("confusion matrix masks, merges and validates labels") {
  ConfusionMatrix a(2), b(2);
  const std::vector<int> t{0, 1, 1}, p{0, 0, 1};
  a.add(t, p, std::vector<char>{1, 0, 1});
  CHECK(a.total() == 2);
  CHECK(a.trace() == 2);
  b.add(t, p);
  a.merge(b);
  CHECK(a.total() == 5);
  CHECK(a.at(1, 0) == 1);
  CHECK_THROWS_AS(a.add(2, 0), ClassMismatchError);
  CHECK_THROWS_AS(a.merge(ConfusionMatrix(3)), ClassMismatchError);
}

TEST_CASE("multi-stage loss decomposes and reduces to the final term") {
  auto cfg = tiny_train(1).net;
  std::mt19937_64 rng(1);
  LabeledCloud cloud;
  cloud.positions = oracle::random_points(rng, 64, 0.3);
  cloud.colors.assign(64, Point3{0.5, 0.5, 0.5});
  cloud.labels = oracle::random_labels(rng, 64, 2);
  cloud.num_classes = 2;
  const auto p = encode(cloud, cfg);
  ad::ParameterStore store;
  const GeoSegNet net(cfg, store);
  const auto out = net.forward(p, store, ad::Mode::Train);
  const LossWeights w{0.1, 0.2, 1.0};
  const auto r = multi_stage_loss(out, p, w).report;
  CHECK(r.cbl > 0);
  CHECK(std::abs(r.total - (r.final_loss + 0.1 * r.pred_sum() + 0.2 * r.cbl)) < 1e-12);
  const auto zero = multi_stage_loss(out, p, LossWeights{0, 0, 1.0});
  CHECK(zero.report.total == zero.report.final_loss);
  CHECK(zero.total.item() == ad::cross_entropy(out.final_logits, cloud.labels).item());
  CHECK_THROWS(LossWeights{-1, 0, 1}.validate());
  CHECK_THROWS(LossWeights{0, 0, 0}.validate());
}

TEST_CASE("training is deterministic and independent of the thread count") {
  const auto data = scenes(2);
  auto cfg = tiny_train(3);
  cfg.threads = 1;
  const auto a = train(data, {}, cfg);
  cfg.threads = 2;
  const auto b = train(data, {}, cfg);
  REQUIRE(a.log.size() == 2);
  for (std::size_t e = 0; e < a.log.size(); ++e) CHECK(log_row(a.log[e]) == log_row(b.log[e]));
  CHECK(std::isnan(a.log[0].eval.oa));  // eval_every = 0 only scores the last epoch
  CHECK(std::isfinite(a.log[1].eval.oa));
  for (std::size_t i = 0; i < a.store.size(); ++i)
    CHECK(std::equal(a.store.value(i).data().begin(), a.store.value(i).data().end(), b.store.value(i).data().begin()));
  cfg.seed = 4;
  CHECK(log_row(train(data, {}, cfg).log[0]) != log_row(a.log[0]));
}

TEST_CASE("step callback reports every step and the log has thirteen columns") {
  auto cfg = tiny_train(5);
  std::size_t calls = 0;
  train(scenes(1), {}, cfg, {}, [&](const StepInfo& s, const LossReport& r) {
    CHECK(s.step == calls);
    CHECK(s.epoch == calls / cfg.steps_per_epoch);
    CHECK(std::abs(r.total - (r.final_loss + cfg.loss.lambda1 * r.pred_sum() + cfg.loss.lambda2 * r.cbl)) < 1e-9);
    ++calls;
  });
  CHECK(calls == cfg.epochs * cfg.steps_per_epoch);
  const std::string header = log_header();
  CHECK(std::count(header.begin(), header.end(), ',') == 12);
}

TEST_CASE("divergence stops before applying the bad update") {
  auto cfg = tiny_train(6);
  cfg.adam.learning_rate = std::numeric_limits<double>::infinity();
  const auto r = train(scenes(1), {}, cfg);
  CHECK(r.diverged);
  CHECK_FALSE(r.divergence.empty());
  for (std::size_t i = 0; i < r.store.size(); ++i)
    for (double v : r.store.value(i).data()) CHECK(std::isfinite(v));
}

TEST_CASE("training rejects scenes with more classes than the network") {
  auto cfg = tiny_train(7);
  auto data = scenes(1);
  data[0].num_classes = 3;
  data[0].labels[0] = 2;
  CHECK_THROWS_AS(train(data, {}, cfg), ClassMismatchError);
}

TEST_CASE("scene prediction covers every point") {
  const auto data = scenes(1);
  auto cfg = tiny_train(8);
  ad::ParameterStore store;
  const GeoSegNet net(cfg.net, store);
  const auto pred = predict_scene(net, store, data[0], {64, 1.0, AbsentClassPolicy::Exclude, 1});
  REQUIRE(pred.size() == data[0].size());
  for (int p : pred) CHECK((p == 0 || p == 1));
}

TEST_CASE("experiment config parses, round trips and rejects typos") {
  const std::string text = R"(
seed = 9
[data]
synthetic_train = 2
[network]
classes = 2
ratios = 1 0.5 0.5 0.5 0.5
widths = 4 6 6 8 8
use_color = false
[loss]
lambda2 = 0.3
[train]
epochs = 3
column_points = 64
[eval]
column_points = 64
absent_classes = zero
)";
  const auto c = parse_experiment(text);
  CHECK(c.train.seed == 9);
  CHECK(c.train.net.seed == 9);
  CHECK_FALSE(c.train.net.use_color);
  CHECK(c.train.loss.lambda2 == 0.3);
  CHECK(c.eval.absent == AbsentClassPolicy::CountAsZero);
  CHECK(parse_experiment(c.to_text()).to_text() == c.to_text());
  CHECK_THROWS_AS(parse_experiment("[train]\nepoch = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("[trian]\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("[network]\nk1 = 40\nk2 = 20\n"), ConfigError);
  CHECK(parse_experiment("").train.epochs == 30);

  const auto dir = std::filesystem::temp_directory_path() / "geoseg_cfg";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "exp.cfg") << "[data]\ntrain = a.xyz\n";
  CHECK(load_experiment(dir / "exp.cfg").train_files[0] == dir / "a.xyz");
  std::filesystem::remove_all(dir);

  const auto d1 = load_datasets(c), d2 = load_datasets(c);
  REQUIRE(d1.train.size() == 2);
  CHECK(d1.train[1].positions == d2.train[1].positions);
  CHECK(d1.train[0].positions != d1.train[1].positions);
}

TEST_CASE("sweep variants cover the loss grid and every block removal") {
  auto base = parse_experiment("[network]\nclasses = 2\n");
  const std::vector<double> l1{0.1}, l2{0.1, 0.2, 0.3};
  const auto grid = loss_weight_grid(base, l1, l2);
  REQUIRE(grid.size() == 3);
  CHECK(grid[1].cfg.train.loss.lambda2 == 0.2);
  const auto ab = ablation_variants(base);
  REQUIRE(ab.size() == 7);
  CHECK(ab[0].name == "full");
  CHECK((!ab[1].cfg.train.net.use_eigen && !ab[1].cfg.train.net.use_gcfr));
  CHECK((ab[2].cfg.train.net.use_eigen && !ab[2].cfg.train.net.use_gcfr));
  CHECK_FALSE(ab[3].cfg.train.net.use_residual);
  CHECK_FALSE(ab[4].cfg.train.net.use_color);
  CHECK(ab[5].cfg.train.loss.lambda2 == 0);
  CHECK(ab[6].cfg.train.loss.lambda1 == 0);
  const std::string header = sweep_header();
  CHECK(std::count(header.begin(), header.end(), ',') == 12);
}

TEST_CASE("normalization recalibration only changes running statistics") {
  const auto data = scenes(1);
  auto cfg = tiny_train(7);
  cfg.eval_every = 1;
  const auto plain = train(data, {}, cfg);
  cfg.recalibrate_batches = 2;
  const auto recal = train(data, {}, cfg);
  REQUIRE(plain.store.size() == recal.store.size());
  bool stats_changed = false;
  for (std::size_t i = 0; i < plain.store.size(); ++i) {
    const auto a = plain.store.value(i).data(), b = recal.store.value(i).data();
    if (plain.store.entry(i).trainable) {
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    } else {
      stats_changed = stats_changed || !std::equal(a.begin(), a.end(), b.begin());
      for (double v : b) CHECK(std::isfinite(v));
    }
  }
  CHECK(stats_changed);
  for (std::size_t e = 0; e < plain.log.size(); ++e) CHECK(plain.log[e].loss.total == recal.log[e].loss.total);
  CHECK(parse_experiment("[train]\nrecalibrate_batches = 3\n").train.recalibrate_batches == 3);
}
