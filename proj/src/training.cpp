#include "geoseg/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "geoseg/errors.hpp"

namespace geoseg {

using ad::Value;

void LossWeights::validate() const {
  if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw ConfigError("loss weights must be non-negative");
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
}

double LossReport::pred_sum() const {
  double s = 0;
  for (double v : pred) s += v;
  return s;
}

LossResult multi_stage_loss(const Value& final_logits, std::span<const int> final_labels,
                            std::span<const StageSupervision> stages, const LossWeights& weights) {
  weights.validate();
  if (stages.size() > kStages) throw Error("multi_stage_loss: more than five supervised stages");
  LossResult r;
  const Value l_final = ad::cross_entropy(final_logits, final_labels);
  r.report.final_loss = l_final.item();

  Value pred_sum, cbl_sum;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageSupervision& st = stages[s];
    const Value pred = ad::cross_entropy(st.logits, st.labels);
    r.report.pred[s] = pred.item();
    pred_sum = pred_sum.defined() ? pred_sum + pred : pred;

    const CblResult cbl = cbl_loss(st.features, st.neighbors, st.labels, st.boundary, weights.tau);
    r.report.cbl_points += cbl.used;
    if (cbl.used == 0) continue;
    r.report.cbl += cbl.loss.item();
    cbl_sum = cbl_sum.defined() ? cbl_sum + cbl.loss : cbl.loss;
  }

  r.total = l_final;
  if (weights.lambda1 != 0 && pred_sum.defined()) r.total = r.total + ad::scale(pred_sum, weights.lambda1);
  if (weights.lambda2 != 0 && cbl_sum.defined()) r.total = r.total + ad::scale(cbl_sum, weights.lambda2);
  r.report.total = r.total.item();
  return r;
}

LossResult multi_stage_loss(const NetworkOutput& out, const PreparedCloud& cloud, const LossWeights& weights) {
  std::vector<StageSupervision> stages(kStages);
  for (std::size_t s = 0; s < kStages; ++s) {
    const StageState& st = cloud.stages[s];
    stages[s] = {out.stage_logits[s], out.decoder_features[s], st.hard_labels, st.boundary, st.knn_k1};
  }
  return multi_stage_loss(out.final_logits, cloud.stages[0].hard_labels, stages, weights);
}

// --- metrics -----------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 1) throw Error("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0);
}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t count) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw ClassMismatchError("label outside [0, " + std::to_string(classes_) + ")");
  counts_[static_cast<std::size_t>(truth * classes_ + predicted)] += count;
}

void ConfusionMatrix::add(std::span<const int> truth, std::span<const int> predicted, std::span<const char> mask) {
  if (truth.size() != predicted.size() || (!mask.empty() && mask.size() != truth.size()))
    throw Error("confusion matrix: label arrays differ in length");
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (mask.empty() || mask[i]) add(truth[i], predicted[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ClassMismatchError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_.at(static_cast<std::size_t>(truth * classes_ + predicted));
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (int c = 0; c < classes_; ++c) t += at(c, c);
  return t;
}

Scores score(const ConfusionMatrix& m, AbsentClassPolicy policy) {
  const int C = m.classes();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Scores s;
  s.points = m.total();
  s.iou.assign(static_cast<std::size_t>(C), nan);
  s.acc.assign(static_cast<std::size_t>(C), nan);
  if (s.points == 0) return s;
  s.oa = static_cast<double>(m.trace()) / static_cast<double>(s.points);
  double iou_sum = 0, acc_sum = 0;
  int iou_n = 0, acc_n = 0;
  for (int c = 0; c < C; ++c) {
    std::uint64_t gt = 0, pred = 0;
    for (int o = 0; o < C; ++o) {
      gt += m.at(c, o);
      pred += m.at(o, c);
    }
    const std::uint64_t tp = m.at(c, c);
    const std::uint64_t uni = gt + pred - tp;
    if (uni > 0 || policy == AbsentClassPolicy::CountAsZero) {
      const double iou = uni > 0 ? static_cast<double>(tp) / static_cast<double>(uni) : 0.0;
      s.iou[static_cast<std::size_t>(c)] = iou;
      iou_sum += iou;
      ++iou_n;
    }
    if (gt > 0 || (policy == AbsentClassPolicy::CountAsZero && pred == 0)) {
      const double acc = gt > 0 ? static_cast<double>(tp) / static_cast<double>(gt) : 0.0;
      s.acc[static_cast<std::size_t>(c)] = acc;
      acc_sum += acc;
      ++acc_n;
    }
  }
  s.miou = iou_n ? iou_sum / iou_n : 0.0;
  s.macc = acc_n ? acc_sum / acc_n : 0.0;
  return s;
}

Metrics make_metrics(ConfusionMatrix all, ConfusionMatrix boundary, AbsentClassPolicy policy) {
  Metrics m;
  m.all = score(all, policy);
  m.boundary = score(boundary, policy);
  m.confusion = std::move(all);
  m.boundary_confusion = std::move(boundary);
  return m;
}

// --- configuration ---------------------------------------------------------------

void TrainConfig::validate() const {
  net.validate();
  loss.validate();
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be positive");
  if (column_points < net.min_points())
    throw ConfigError("column_points " + std::to_string(column_points) + " is below the network minimum " +
                      std::to_string(net.min_points()));
  if (!(column_section > 0)) throw ConfigError("column_section must be positive");
  if (!(adam.learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (augment.scale && !(augment.scale_min > 0 && augment.scale_min <= augment.scale_max))
    throw ConfigError("scale range must satisfy 0 < min <= max");
  if (!(augment.jitter >= 0)) throw ConfigError("jitter must be non-negative");
}

std::string log_header() {
  return "epoch,L_final,L_pred_1,L_pred_2,L_pred_3,L_pred_4,L_pred_5,L_CBL,total,OA,mIoU,mACC,boundary_mIoU";
}

std::string log_row(const EpochLog& e) {
  std::ostringstream ss;
  ss.precision(8);
  ss << e.epoch << ',' << e.loss.final_loss;
  for (double p : e.loss.pred) ss << ',' << p;
  ss << ',' << e.loss.cbl << ',' << e.loss.total << ',' << e.eval.oa << ',' << e.eval.miou << ',' << e.eval.macc
     << ',' << e.boundary_miou;
  return ss.str();
}

unsigned resolve_threads(unsigned requested) {
  unsigned n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("GEOSEG_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap > 0) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

namespace {

/// Runs fn(i) for i in [0, count) on up to `threads` workers; rethrows the
/// first failure in index order.
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) run(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Moves the column center to the origin in x and y.
void center_column(LabeledCloud& cloud, const Point3& center) {
  for (auto& p : cloud.positions) {
    p[0] -= center[0];
    p[1] -= center[1];
  }
}

void augment(LabeledCloud& cloud, const AugmentOptions& opts, std::mt19937_64& rng) {
  if (opts.rotate_z) {
    const double a = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
    const double c = std::cos(a), s = std::sin(a);
    for (auto& p : cloud.positions) {
      const double x = p[0], y = p[1];
      p[0] = c * x - s * y;
      p[1] = s * x + c * y;
    }
  }
  if (opts.scale) {
    const double f = std::uniform_real_distribution<double>(opts.scale_min, opts.scale_max)(rng);
    for (auto& p : cloud.positions)
      for (auto& v : p) v *= f;
  }
  if (opts.jitter > 0) {
    std::normal_distribution<double> noise(0.0, opts.jitter);
    for (auto& p : cloud.positions)
      for (auto& v : p) v += noise(rng);
  }
}

/// One augmented training column drawn from a random scene.
PreparedCloud training_column(std::span<const LabeledCloud> scenes, const TrainConfig& cfg,
                              const NetworkConfig& net_cfg, std::mt19937_64& rng) {
  const auto& scene = scenes[std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(rng)];
  ColumnSample sample = sample_column(scene, cfg.column_points, cfg.column_section, rng());
  center_column(sample.cloud, sample.center);
  augment(sample.cloud, cfg.augment, rng);
  sample.cloud.num_classes = net_cfg.num_classes;
  return encode(sample.cloud, net_cfg);
}

/// Encodes `cfg.batch_size` training columns in parallel and merges them.
PreparedCloud training_batch(std::span<const LabeledCloud> scenes, const TrainConfig& cfg,
                             const NetworkConfig& net_cfg, std::uint64_t seed, unsigned threads) {
  std::vector<PreparedCloud> items(cfg.batch_size);
  parallel_for(cfg.batch_size, threads, [&](std::size_t b) {
    std::mt19937_64 rng(derive_seed(seed, b));
    items[b] = training_column(scenes, cfg, net_cfg, rng);
  });
  return merge_prepared(items);
}

/// Sets every running normalization buffer to the mean of its batch
/// statistics over `cfg.recalibrate_batches` training batches.
void recalibrate_normalization(const GeoSegNet& net, ad::ParameterStore& store, std::span<const LabeledCloud> scenes,
                               const TrainConfig& cfg, std::uint64_t seed, unsigned threads) {
  const std::size_t batches = cfg.recalibrate_batches;
  std::vector<std::vector<double>> sums(store.size());
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!store.entry(i).trainable) sums[i].assign(store.value(i).data().size(), 0.0);
  for (std::size_t t = 0; t < batches; ++t) {
    const PreparedCloud batch = training_batch(scenes, cfg, net.config(), derive_seed(seed, t), threads);
    ad::ParameterStore fork = store.clone();
    // From zeroed buffers one update leaves exactly kNormMomentum * (batch statistic).
    for (std::size_t i = 0; i < fork.size(); ++i)
      if (!fork.entry(i).trainable) {
        auto d = fork.value(i).mutable_data();
        std::fill(d.begin(), d.end(), 0.0);
      }
    net.forward(batch, fork, ad::Mode::Train);
    for (std::size_t i = 0; i < fork.size(); ++i) {
      const auto src = fork.value(i).data();
      for (std::size_t j = 0; j < sums[i].size(); ++j) sums[i][j] += src[j];
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.entry(i).trainable) continue;
    auto dst = store.value(i).mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = sums[i][j] / (ad::kNormMomentum * static_cast<double>(batches));
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void accumulate(LossReport& sum, const LossReport& r) {
  sum.final_loss += r.final_loss;
  for (std::size_t s = 0; s < kStages; ++s) sum.pred[s] += r.pred[s];
  sum.cbl += r.cbl;
  sum.total += r.total;
  sum.cbl_points += r.cbl_points;
}

void divide(LossReport& r, double n) {
  r.final_loss /= n;
  for (auto& p : r.pred) p /= n;
  r.cbl /= n;
  r.total /= n;
}

}  // namespace

// --- evaluation --------------------------------------------------------------------

std::vector<int> predict_scene(const GeoSegNet& net, ad::ParameterStore& store, const LabeledCloud& cloud,
                               const EvalOptions& opts) {
  const NetworkConfig& cfg = net.config();
  if (cloud.num_classes > cfg.num_classes)
    throw ClassMismatchError("scene has " + std::to_string(cloud.num_classes) + " classes, model has " +
                             std::to_string(cfg.num_classes));
  const std::size_t n = cloud.size();
  const std::size_t C = static_cast<std::size_t>(cfg.num_classes);
  std::vector<double> votes(n * C, 0.0);
  std::vector<char> covered(n, 0);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(opts.seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::size_t column = 0;
  for (std::size_t center : order) {
    if (covered[center]) continue;
    ColumnSample sample = sample_column_at(cloud, std::max(opts.column_points, cfg.min_points()), opts.column_section,
                                           center, derive_seed(opts.seed, column++));
    center_column(sample.cloud, sample.center);
    sample.cloud.num_classes = cfg.num_classes;
    const PreparedCloud prepared = encode(sample.cloud, cfg);
    const NetworkOutput out = net.forward(prepared, store, ad::Mode::Eval);
    const Value prob = ad::softmax(out.final_logits, 1);
    const auto p = prob.data();
    for (std::size_t i = 0; i < sample.source_rows.size(); ++i) {
      const std::size_t row = sample.source_rows[i];
      covered[row] = 1;
      for (std::size_t c = 0; c < C; ++c) votes[row * C + c] += p[i * C + c];
    }
  }

  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* v = votes.data() + i * C;
    pred[i] = static_cast<int>(std::max_element(v, v + C) - v);
  }
  return pred;
}

Metrics evaluate(const GeoSegNet& net, ad::ParameterStore& store, std::span<const LabeledCloud> scenes,
                 const EvalOptions& opts) {
  const NetworkConfig& cfg = net.config();
  ConfusionMatrix all(cfg.num_classes), boundary(cfg.num_classes);
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const LabeledCloud& scene = scenes[s];
    EvalOptions o = opts;
    o.seed = derive_seed(opts.seed, s);
    const auto pred = predict_scene(net, store, scene, o);
    const auto mask = mine_boundaries(scene.positions, scene.labels, cfg.boundary_radius);
    all.add(scene.labels, pred);
    boundary.add(scene.labels, pred, mask);
  }
  return make_metrics(std::move(all), std::move(boundary), opts.absent);
}

// --- training loop ----------------------------------------------------------------

TrainResult train(std::span<const LabeledCloud> train_scenes, std::span<const LabeledCloud> eval_scenes,
                  const TrainConfig& cfg, const EpochCallback& on_epoch, const StepCallback& on_step) {
  cfg.validate();
  if (train_scenes.empty()) throw Error("training needs at least one scene");
  for (const auto& s : train_scenes) {
    s.validate();
    if (s.num_classes > cfg.net.num_classes)
      throw ClassMismatchError("training scene has " + std::to_string(s.num_classes) + " classes, network has " +
                               std::to_string(cfg.net.num_classes));
  }
  if (eval_scenes.empty()) eval_scenes = train_scenes;

  TrainResult result;
  NetworkConfig net_cfg = cfg.net;
  net_cfg.lambda1 = cfg.loss.lambda1;
  net_cfg.lambda2 = cfg.loss.lambda2;
  net_cfg.tau = cfg.loss.tau;
  const GeoSegNet net(net_cfg, result.store);
  ad::Adam adam(result.store, cfg.adam);
  const unsigned threads = resolve_threads(cfg.threads);

  EvalOptions eval_opts;
  eval_opts.column_points = cfg.column_points;
  eval_opts.column_section = cfg.column_section;
  eval_opts.absent = cfg.absent;
  eval_opts.seed = derive_seed(cfg.seed, 0xE7A1);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    LossReport epoch_sum;
    for (std::size_t it = 0; it < cfg.steps_per_epoch; ++it, ++step) {
      const PreparedCloud batch =
          training_batch(train_scenes, cfg, net_cfg, derive_seed(cfg.seed, 1000003ULL * (step + 1)), threads);
      // The forward pass updates running statistics, so a failed step restores this copy.
      const ad::ParameterStore before = result.store.clone();
      const auto fail = [&](const std::string& what) {
        result.store.copy_values(before);
        result.diverged = true;
        result.divergence = what + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
        return result;
      };
      result.store.zero_grads();
      const NetworkOutput out = net.forward(batch, result.store, ad::Mode::Train);
      const LossResult loss = multi_stage_loss(out, batch, cfg.loss);
      if (!std::isfinite(loss.report.total)) return fail("non-finite loss");
      ad::backward(loss.total);
      for (std::size_t i = 0; i < result.store.size(); ++i)
        if (result.store.entry(i).trainable && !all_finite(result.store.value(i).grad()))
          return fail("non-finite gradient");
      adam.step(result.store);
      for (std::size_t i = 0; i < result.store.size(); ++i)
        if (!all_finite(result.store.value(i).data())) return fail("non-finite parameters after the update");
      accumulate(epoch_sum, loss.report);
      if (on_step) on_step(StepInfo{epoch, step}, loss.report);
    }
    adam.options().learning_rate *= cfg.lr_decay;

    EpochLog log;
    log.epoch = epoch;
    divide(epoch_sum, static_cast<double>(cfg.steps_per_epoch));
    log.loss = epoch_sum;
    const bool last = epoch + 1 == cfg.epochs;
    if (last || (cfg.eval_every && (epoch + 1) % cfg.eval_every == 0)) {
      if (cfg.recalibrate_batches)
        recalibrate_normalization(net, result.store, train_scenes, cfg, derive_seed(cfg.seed, 0xBA7C + epoch),
                                  threads);
      const Metrics m = evaluate(net, result.store, eval_scenes, eval_opts);
      log.eval = m.all;
      log.boundary_miou = m.boundary.miou;
    } else {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      log.eval.oa = log.eval.miou = log.eval.macc = log.boundary_miou = nan;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg, const ad::ParameterStore& store) {
  store.save(path, cfg.to_meta());
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  std::map<std::string, std::string> meta;
  const ad::ParameterStore loaded = ad::ParameterStore::load(path, &meta);
  const NetworkConfig cfg = NetworkConfig::from_meta(meta);
  ad::ParameterStore store;
  GeoSegNet net(cfg, store);
  if (store.size() != loaded.size()) throw Error("checkpoint does not match the network layout");
  for (std::size_t i = 0; i < loaded.size(); ++i)
    if (loaded.entry(i).name != store.entry(i).name || loaded.value(i).shape() != store.value(i).shape())
      throw Error("checkpoint tensor '" + loaded.entry(i).name + "' does not match the network layout");
  store.copy_values(loaded);
  return LoadedModel{cfg, std::move(store), std::move(net)};
}

SceneSpec two_class_scene(std::uint64_t seed, double extent, double density) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSpec spec;
  spec.extent = {extent, extent, 2.0};
  spec.num_classes = 2;
  spec.floor_class = 0;
  spec.density = density;
  spec.seed = derive_seed(seed, 1);
  spec.floor_color = {0.45 + 0.2 * unit(rng), 0.4 + 0.2 * unit(rng), 0.3 + 0.2 * unit(rng)};
  const int boxes = 2 + static_cast<int>(unit(rng) * 3.0);
  for (int b = 0; b < boxes; ++b) {
    SceneObject o;
    o.class_id = 1;
    const double w = 0.3 + 0.5 * unit(rng), d = 0.3 + 0.5 * unit(rng), h = 0.25 + 0.6 * unit(rng);
    const double x = 0.1 + (extent - w - 0.2) * unit(rng), y = 0.1 + (extent - d - 0.2) * unit(rng);
    o.min = {x, y, 0.0};
    o.max = {x + w, y + d, h};
    o.color = {0.2 + 0.6 * unit(rng), 0.2 + 0.6 * unit(rng), 0.2 + 0.6 * unit(rng)};
    spec.objects.push_back(o);
  }
  return spec;
}

}  // namespace geoseg
