#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "geoseg/autodiff.hpp"
#include "geoseg/boundary.hpp"
#include "geoseg/layers.hpp"
#include "geoseg/network.hpp"
#include "geoseg/pointcloud.hpp"

namespace geoseg {

struct LossWeights {
  double lambda1 = 0.1;
  double lambda2 = 0.2;
  double tau = 1.0;
  void validate() const;
};

struct LossReport {
  double final_loss = 0;
  std::array<double, kStages> pred{};  // L_pred_1..5, finest stage first
  double cbl = 0;                      // summed over stages
  double total = 0;
  std::size_t cbl_points = 0;          // boundary points that contributed to L_CBL

  double pred_sum() const;
};

struct LossResult {
  LossReport report;
  ad::Value total;
};

/// Supervision for one stage: logits [n, C], pre-head features [n, D], hard
/// labels, boundary mask and the neighbor table used for the contrastive term.
struct StageSupervision {
  ad::Value logits;
  ad::Value features;
  std::vector<int> labels;
  BoundaryMask boundary;
  NeighborTable neighbors;
};

/// total = L_final + lambda1 * sum_n L_pred_n + lambda2 * sum_n L_CBL_n.
/// Terms whose weight is zero are left out of the graph, so the total then
/// equals L_final bit for bit.
LossResult multi_stage_loss(const ad::Value& final_logits, std::span<const int> final_labels,
                            std::span<const StageSupervision> stages, const LossWeights& weights);

/// Uses the prepared stage labels, boundary masks and K1 tables.
LossResult multi_stage_loss(const NetworkOutput& out, const PreparedCloud& cloud, const LossWeights& weights);

// --- metrics -------------------------------------------------------------------

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int classes);

  int classes() const noexcept { return classes_; }
  void add(int truth, int predicted, std::uint64_t count = 1);
  /// Adds every row whose mask entry is nonzero (all rows when the mask is empty).
  void add(std::span<const int> truth, std::span<const int> predicted, std::span<const char> mask = {});
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(int truth, int predicted) const;
  std::uint64_t total() const;
  std::uint64_t trace() const;

 private:
  int classes_ = 0;
  std::vector<std::uint64_t> counts_;
};

/// How to treat a class that appears in neither ground truth nor prediction.
enum class AbsentClassPolicy { Exclude, CountAsZero };

struct Scores {
  double oa = 0, miou = 0, macc = 0;
  std::vector<double> iou;  // NaN for excluded classes
  std::vector<double> acc;  // NaN for classes absent from the ground truth
  std::uint64_t points = 0;
};

/// OA = trace / total. IoU_c = TP / (TP + FP + FN). Accuracy per class is
/// recall and is averaged over classes present in the ground truth. An empty
/// matrix scores zero everywhere.
Scores score(const ConfusionMatrix& m, AbsentClassPolicy policy = AbsentClassPolicy::Exclude);

struct Metrics {
  ConfusionMatrix confusion;
  ConfusionMatrix boundary_confusion;  // restricted to mined stage-0 boundary points
  Scores all;
  Scores boundary;
};

Metrics make_metrics(ConfusionMatrix all, ConfusionMatrix boundary,
                     AbsentClassPolicy policy = AbsentClassPolicy::Exclude);

// --- training ------------------------------------------------------------------

struct AugmentOptions {
  bool rotate_z = true;
  bool scale = false;
  double scale_min = 0.9, scale_max = 1.1;
  double jitter = 0.005;  // standard deviation in meters, 0 disables
};

struct TrainConfig {
  NetworkConfig net;
  LossWeights loss;
  ad::AdamOptions adam;
  double lr_decay = 1.0;  // multiplies the learning rate after each epoch
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::size_t steps_per_epoch = 4;
  std::size_t column_points = 1024;
  double column_section = 2.0;  // side of the square column footprint in meters
  AugmentOptions augment;
  /// Scores the evaluation scenes every `eval_every` epochs and after the last
  /// one; rows in between carry NaN metrics. 0 evaluates only at the end.
  std::size_t eval_every = 1;
  /// Before each evaluation, replaces the running normalization statistics by
  /// their exact mean over this many training batches. 0 keeps the running averages.
  std::size_t recalibrate_batches = 0;
  AbsentClassPolicy absent = AbsentClassPolicy::Exclude;
  /// Worker threads for batch items; 0 takes GEOSEG_THREADS or the hardware count.
  unsigned threads = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  LossReport loss;  // mean over the steps of the epoch
  Scores eval;
  double boundary_miou = 0;
};

/// `epoch, L_final, L_pred_1..5, L_CBL, total, OA, mIoU, mACC, boundary_mIoU`.
std::string log_header();
std::string log_row(const EpochLog& e);

struct TrainResult {
  ad::ParameterStore store;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string divergence;  // description of the failing step
};

/// Worker count after applying GEOSEG_THREADS.
unsigned resolve_threads(unsigned requested);

struct EvalOptions {
  std::size_t column_points = 1024;
  double column_section = 2.0;
  AbsentClassPolicy absent = AbsentClassPolicy::Exclude;
  std::uint64_t seed = 0;
};

/// Per-point predictions for a whole scene: columns centered on points not yet
/// covered are classified until every point has a vote; class probabilities
/// are summed over the columns containing a point.
std::vector<int> predict_scene(const GeoSegNet& net, ad::ParameterStore& store, const LabeledCloud& cloud,
                               const EvalOptions& opts);

/// Accumulates one confusion matrix over every scene; boundary scores use the
/// ground-truth boundary mask mined at the first-stage radius.
Metrics evaluate(const GeoSegNet& net, ad::ParameterStore& store, std::span<const LabeledCloud> scenes,
                 const EvalOptions& opts);

using EpochCallback = std::function<void(const EpochLog&)>;

struct StepInfo {
  std::size_t epoch = 0;
  std::size_t step = 0;  // counted over the whole run
};
/// Called after each applied update with the loss of that step's batch.
using StepCallback = std::function<void(const StepInfo&, const LossReport&)>;

/// Column batches from `train` with augmentation, Adam updates, and one log
/// row per epoch scored on `eval_scenes` (the training scenes when empty).
/// The columns of a batch are encoded in parallel and merged into one forward
/// pass, so channel normalization uses statistics over the whole batch.
/// A non-finite loss, gradient or updated parameter stops training and
/// returns the parameters from before the failing step with `diverged` set.
TrainResult train(std::span<const LabeledCloud> train_scenes, std::span<const LabeledCloud> eval_scenes,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {}, const StepCallback& on_step = {});

/// Parameters of a trained model plus the metadata needed to rebuild it.
void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg, const ad::ParameterStore& store);
struct LoadedModel {
  NetworkConfig cfg;
  ad::ParameterStore store;
  GeoSegNet net;  // parameter layout matching `store`
};
LoadedModel load_checkpoint(const std::filesystem::path& path);

/// Room with a floor (class 0) and a few boxes (class 1) placed on it.
SceneSpec two_class_scene(std::uint64_t seed, double extent = 3.0, double density = 120.0);

}  // namespace geoseg
