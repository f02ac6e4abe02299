#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "geoseg/pointcloud.hpp"

namespace geoseg {

using Index = std::uint32_t;

/// K nearest neighbors per query row, each row sorted by (distance, index).
struct NeighborTable {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<Index> indices;     // rows * k
  std::vector<double> distances;  // Euclidean, rows * k

  std::span<const Index> row(std::size_t i) const { return {indices.data() + i * k, k}; }
  std::span<const double> row_distances(std::size_t i) const { return {distances.data() + i * k, k}; }
  Index at(std::size_t i, std::size_t j) const { return indices[i * k + j]; }
};

/// Exact kd-tree over a fixed point set. Immutable after construction, so
/// concurrent queries are safe.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> points, std::size_t leaf_size = 8);

  std::size_t size() const noexcept { return points_.size(); }
  std::span<const Point3> points() const noexcept { return points_; }

  /// Ties in distance resolve to the smaller point index. Throws when k > size().
  NeighborTable knn(std::span<const Point3> queries, std::size_t k) const;

  /// Indices within distance `radius` (inclusive) of each query, ascending by index.
  std::vector<std::vector<Index>> radius_search(std::span<const Point3> queries, double radius) const;

  /// Radius search from every indexed point, each list excluding the point itself.
  std::vector<std::vector<Index>> radius_neighbors_self(double radius) const;

 private:
  struct Node {
    std::uint32_t begin, end;  // range in order_
    std::int32_t left = -1, right = -1;
    int axis = -1;  // -1 for leaves
    double split = 0;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size);
  void knn_one(const Point3& q, std::size_t k, std::vector<std::pair<double, Index>>& heap) const;
  void radius_one(const Point3& q, double r2, std::vector<Index>& out) const;

  std::vector<Point3> points_;
  std::vector<Index> order_;
  std::vector<Node> nodes_;
};

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Greedy farthest point sampling. The first pick is drawn from `seed`; each
/// later pick maximizes the distance to the selected set, ties to the lower index.
std::vector<Index> farthest_point_sample(std::span<const Point3> points, std::size_t m,
                                         std::uint64_t seed);

/// Same as above with a caller-chosen first pick.
std::vector<Index> farthest_point_sample_from(std::span<const Point3> points, std::size_t m,
                                              Index first);

}  // namespace geoseg
