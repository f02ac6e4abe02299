#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "geoseg/autodiff.hpp"
#include "geoseg/pointcloud.hpp"
#include "geoseg/spatial.hpp"

namespace geoseg {

/// One entry per point; nonzero marks a boundary point.
using BoundaryMask = std::vector<char>;

/// Per-point class proportions; each row sums to one.
struct LabelDistribution {
  std::size_t rows = 0;
  std::size_t classes = 0;
  std::vector<double> data;  // rows * classes

  static LabelDistribution one_hot(std::span<const int> labels, int num_classes);
  std::span<const double> row(std::size_t i) const { return {data.data() + i * classes, classes}; }
  /// Most frequent class per row, ties to the lower class index.
  std::vector<int> argmax() const;
};

/// True where some other point within `radius` carries a different label.
BoundaryMask mine_boundaries(std::span<const Point3> positions, std::span<const int> labels, double radius);

/// Each child row is the mean of the distributions of its k nearest parent points.
LabelDistribution propagate_label_distributions(const LabelDistribution& parent,
                                                std::span<const Point3> parent_positions,
                                                std::span<const Point3> child_positions, std::size_t k);

struct CblResult {
  ad::Value loss;                 // scalar; constant zero when no boundary point is usable
  std::size_t boundary_points = 0;
  std::size_t used = 0;           // boundary points with at least one positive neighbor
  std::size_t skipped = 0;        // boundary points without a positive neighbor
};

/// Contrastive boundary loss over the rows of `features` ([n, D]). For each
/// boundary point, neighbors sharing its label are positives and all
/// neighbors form the denominator, weighted by exp(-||F_i - F_j|| / tau).
/// Table entries equal to the row's own index are ignored.
CblResult cbl_loss(const ad::Value& features, const NeighborTable& neighbors, std::span<const int> labels,
                   const BoundaryMask& boundary, double tau);

/// Same loss with the neighborhood taken as the k nearest other points.
CblResult cbl_loss(const ad::Value& features, std::span<const Point3> positions, std::span<const int> labels,
                   const BoundaryMask& boundary, std::size_t k, double tau);

}  // namespace geoseg
