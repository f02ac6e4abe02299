#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoseg/autodiff.hpp"
#include "geoseg/boundary.hpp"
#include "geoseg/geomfeat.hpp"
#include "geoseg/layers.hpp"
#include "geoseg/pointcloud.hpp"
#include "geoseg/spatial.hpp"

namespace geoseg {

inline constexpr std::size_t kStages = 5;

struct NetworkConfig {
  int num_classes = 13;
  /// Fraction of the previous stage kept by each stage; the first entry applies to the input.
  std::array<double, kStages> ratios{1.0, 0.25, 0.25, 0.25, 0.25};
  std::array<std::size_t, kStages> widths{32, 64, 128, 256, 512};
  std::size_t k1 = 16;
  std::size_t k2 = 32;
  std::size_t k_eig = 16;
  std::size_t propagate_k = 16;
  /// Stage n mines boundaries with radius boundary_radius * boundary_radius_growth^n.
  double boundary_radius = 0.1;
  double boundary_radius_growth = 2.0;
  double lambda1 = 0.1;
  double lambda2 = 0.2;
  double tau = 1.0;

  // Block switches used by the ablation harness.
  bool use_eigen = true;
  bool use_gcfr = true;
  bool use_color = true;
  bool use_residual = true;
  bool use_positions = true;

  std::uint64_t seed = 0;

  void validate() const;
  /// Smallest input size that keeps every stage nonempty under the ratio schedule.
  std::size_t min_points() const;
  std::array<std::size_t, kStages> stage_sizes(std::size_t n) const;
  /// Widths multiplied by `factor`, each at least 2.
  NetworkConfig scaled_widths(double factor) const;

  std::map<std::string, std::string> to_meta() const;
  static NetworkConfig from_meta(const std::map<std::string, std::string>& meta);
};

/// Geometry of one neighborhood branch of the residual geometry module. Each
/// point's rows are its Euclidean neighbors followed by its eigen-space neighbors.
struct BranchGeometry {
  std::size_t k_euclid = 0;
  std::size_t k_eig = 0;
  std::size_t width() const noexcept { return k_euclid + k_eig; }
  std::vector<Index> table;        // rows * width()
  std::vector<double> polar;       // rows * width() * polar_channels: distance, rel. azimuth, rel. elevation
  std::size_t polar_channels = 0;
  std::vector<double> context;     // rows * width() * context_channels: position, density, color
  std::size_t context_channels = 0;
};

struct StageState {
  std::size_t stage = 0;
  std::vector<Index> parent_rows;  // rows of the previous stage (identity at stage 0)
  std::vector<Index> cloud_rows;   // rows of the input cloud
  std::vector<Point3> positions;
  std::vector<Point3> colors;
  NeighborTable knn_k1, knn_k2, knn_eig;
  EigenFeatures eigen;
  LocalDensity density_k1, density_k2;
  std::array<BranchGeometry, 2> branches;

  LabelDistribution label_distribution;
  std::vector<int> hard_labels;
  BoundaryMask boundary;

  /// Inverse-distance interpolation from the next coarser stage (empty at the last stage).
  std::vector<Index> up_indices;
  std::vector<double> up_weights;
  std::size_t up_k = 0;

  std::size_t size() const noexcept { return positions.size(); }
};

/// Everything about an input cloud that does not depend on learned parameters.
struct PreparedCloud {
  std::array<StageState, kStages> stages;
  BoundingSphere sphere;
  int num_classes = 0;
  std::size_t size() const noexcept { return stages[0].size(); }
};

/// Builds the five stages: farthest point sampling, neighbor tables, hand-crafted
/// geometric features, propagated label distributions and boundary masks.
/// Throws when the cloud is smaller than cfg.min_points().
PreparedCloud encode(const LabeledCloud& cloud, const NetworkConfig& cfg);

/// Disjoint union of clouds prepared with the same config: stage rows are
/// concatenated item by item and every index table is offset accordingly, so
/// one forward pass over the result equals per-item passes except that channel
/// normalization sees the statistics of the whole batch. The sphere is the first item's.
PreparedCloud merge_prepared(std::span<const PreparedCloud> items);

/// Each fine point gets the inverse-distance weighted mean of its 3 nearest
/// coarse points (weights 1 / (d + 1e-8)); a coinciding coarse point is copied exactly.
struct InterpolationWeights {
  std::size_t k = 0;
  std::vector<Index> indices;  // fine * k
  std::vector<double> weights; // fine * k
};
InterpolationWeights interpolation_weights(std::span<const Point3> coarse, std::span<const Point3> fine);
ad::Value nn_interpolate_up(const ad::Value& coarse_features, std::span<const Point3> coarse_positions,
                            std::span<const Point3> fine_positions);
ad::Value nn_interpolate_up(const ad::Value& coarse_features, const InterpolationWeights& w);

/// Two dense + normalization + activation units with an additive skip from
/// input to output (a normalized linear map when widths differ). With the
/// residual switch off it reduces to one unit.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ad::ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                bool residual, std::mt19937_64& rng);
  ad::Value forward(ad::ParameterStore& store, const ad::Value& x, ad::Mode mode) const;
  std::size_t out_features() const noexcept { return first_.out_features(); }

 private:
  bool residual_ = true;
  bool project_ = false;
  ad::DenseLayer first_, second_, skip_;
};

/// Per-channel softmax over the neighbor axis of learned scores, then a weighted sum.
class AttentivePool {
 public:
  AttentivePool() = default;
  AttentivePool(ad::ParameterStore& store, const std::string& name, std::size_t channels, std::mt19937_64& rng);
  ad::Value forward(ad::ParameterStore& store, const ad::Value& neighbor_features, ad::Mode mode) const;
  /// Pooling weights [N, K, C] for the given input; each (point, channel) sums to one over K.
  ad::Value weights(ad::ParameterStore& store, const ad::Value& neighbor_features, ad::Mode mode) const;

 private:
  ad::DenseLayer score_;
};

/// Residual geometry module for one receptive field.
class GeometryBranch {
 public:
  GeometryBranch() = default;
  GeometryBranch(ad::ParameterStore& store, const std::string& name, std::size_t in_features,
                 std::size_t polar_channels, std::size_t context_channels, std::size_t width, bool residual,
                 std::mt19937_64& rng);

  /// `point_features` is [N, C_in] (may be undefined when C_in == 0); result is [N, width].
  ad::Value forward(ad::ParameterStore& store, const ad::Value& point_features, const BranchGeometry& geo,
                    ad::Mode mode) const;

 private:
  std::size_t in_features_ = 0, polar_channels_ = 0, context_channels_ = 0;
  bool has_pre_ = false;
  ResidualBlock pre_geometry_, pre_context_, post_;
  AttentivePool pool_;
};

struct NetworkOutput {
  std::array<ad::Value, kStages> stage_logits;       // [stage points, C]
  ad::Value final_logits;                            // [N, C]
  std::array<ad::Value, kStages> decoder_features;   // [stage points, width] before the heads
  std::array<ad::Value, kStages> encoder_features;
};

class GeoSegNet {
 public:
  /// Registers every parameter in `store` (deterministic given cfg.seed).
  GeoSegNet(const NetworkConfig& cfg, ad::ParameterStore& store);

  const NetworkConfig& config() const noexcept { return cfg_; }

  /// Point features entering stage `s` (input eigenvalues and/or the
  /// previous stage's output gathered at this stage's points).
  std::size_t stage_input_width(std::size_t s) const;

  NetworkOutput forward(const PreparedCloud& cloud, ad::ParameterStore& store, ad::Mode mode) const;
  /// Output of one encoder stage given its input point features.
  ad::Value encode_stage(std::size_t s, const PreparedCloud& cloud, const ad::Value& input,
                         ad::ParameterStore& store, ad::Mode mode) const;

  /// Selects one receptive-field branch only (0 or 1) for diagnostics; -1 sums both.
  void set_branch_mask(int branch) { branch_mask_ = branch; }

 private:
  NetworkConfig cfg_;
  std::array<std::array<GeometryBranch, 2>, kStages> encoder_;
  std::array<ad::DenseLayer, kStages> decoder_;
  std::array<ad::DenseLayer, kStages> heads_;
  ad::DenseLayer final_hidden_, final_out_;
  int branch_mask_ = -1;
};

/// Channels of the per-neighbor geometric and context blocks under `cfg`.
std::size_t polar_channel_count(const NetworkConfig& cfg);
std::size_t context_channel_count(const NetworkConfig& cfg);

}  // namespace geoseg
