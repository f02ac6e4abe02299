#include "geoseg/boundary.hpp"

#include <algorithm>
#include <string>

#include "geoseg/errors.hpp"

namespace geoseg {

LabelDistribution LabelDistribution::one_hot(std::span<const int> labels, int num_classes) {
  if (num_classes < 1) throw Error("one_hot: need at least one class");
  LabelDistribution d;
  d.rows = labels.size();
  d.classes = static_cast<std::size_t>(num_classes);
  d.data.assign(d.rows * d.classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw Error("one_hot: label out of range");
    d.data[i * d.classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return d;
}

std::vector<int> LabelDistribution::argmax() const {
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto r = row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

BoundaryMask mine_boundaries(std::span<const Point3> positions, std::span<const int> labels, double radius) {
  if (!(radius > 0)) throw Error("mine_boundaries: radius must be positive");
  if (positions.size() != labels.size()) throw Error("mine_boundaries: label count mismatch");
  BoundaryMask mask(positions.size(), 0);
  if (positions.empty()) return mask;
  const KdTree tree(positions);
  const auto hoods = tree.radius_neighbors_self(radius);
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (Index j : hoods[i])
      if (labels[j] != labels[i]) {
        mask[i] = 1;
        break;
      }
  return mask;
}

LabelDistribution propagate_label_distributions(const LabelDistribution& parent,
                                                std::span<const Point3> parent_positions,
                                                std::span<const Point3> child_positions, std::size_t k) {
  if (parent_positions.size() != parent.rows) throw Error("propagate: parent size mismatch");
  if (k == 0 || k > parent.rows)
    throw Error("propagate: k=" + std::to_string(k) + " must be in [1, " + std::to_string(parent.rows) + "]");
  const KdTree tree(parent_positions);
  const auto table = tree.knn(child_positions, k);
  LabelDistribution child;
  child.rows = child_positions.size();
  child.classes = parent.classes;
  child.data.assign(child.rows * child.classes, 0.0);
  const double inv = 1.0 / static_cast<double>(k);
  for (std::size_t i = 0; i < child.rows; ++i) {
    double* dst = child.data.data() + i * child.classes;
    for (Index j : table.row(i)) {
      const auto src = parent.row(j);
      for (std::size_t c = 0; c < child.classes; ++c) dst[c] += src[c];
    }
    for (std::size_t c = 0; c < child.classes; ++c) dst[c] *= inv;
  }
  return child;
}

CblResult cbl_loss(const ad::Value& features, const NeighborTable& neighbors, std::span<const int> labels,
                   const BoundaryMask& boundary, double tau) {
  if (!(tau > 0)) throw Error("cbl_loss: temperature must be positive");
  if (features.rank() != 2) throw ShapeError("cbl_loss: features must be [n, D], got " + ad::to_string(features.shape()));
  const std::size_t n = features.shape()[0];
  if (labels.size() != n || boundary.size() != n || neighbors.rows != n)
    throw Error("cbl_loss: features, labels, mask and neighbor table disagree on point count");

  CblResult result;
  const std::size_t k = neighbors.k;
  std::vector<std::uint32_t> centers, table;
  std::vector<char> valid, positive;
  for (std::size_t i = 0; i < n; ++i) {
    if (!boundary[i]) continue;
    ++result.boundary_points;
    bool has_positive = false;
    for (Index j : neighbors.row(i))
      has_positive = has_positive || (j != i && labels[j] == labels[i]);
    if (!has_positive) {
      ++result.skipped;
      continue;
    }
    centers.push_back(static_cast<std::uint32_t>(i));
    for (Index j : neighbors.row(i)) {
      table.push_back(j);
      valid.push_back(j != i);
      positive.push_back(j != i && labels[j] == labels[i]);
    }
  }
  result.used = centers.size();
  if (centers.empty()) {
    result.loss = ad::Value::scalar(0.0);
    return result;
  }
  const std::size_t nb = centers.size();
  const std::size_t dims = features.shape()[1];
  using namespace ad;
  const Value center = reshape(gather_rows(features, centers, {nb}), {nb, 1, dims});
  const Value around = gather_rows(features, table, {nb, k});
  const Value logits = scale(norm(around - center, 2), -1.0 / tau);  // [nb, k]
  const Value log_num = logsumexp(logits, 1, positive);
  const Value log_den = logsumexp(logits, 1, valid);
  result.loss = mean_all(log_den - log_num);
  return result;
}

CblResult cbl_loss(const ad::Value& features, std::span<const Point3> positions, std::span<const int> labels,
                   const BoundaryMask& boundary, std::size_t k, double tau) {
  if (positions.size() < 2) throw Error("cbl_loss: need at least two points");
  k = std::min(k, positions.size() - 1);
  const KdTree tree(positions);
  // k + 1 so that the row still holds k entries once the point itself is dropped.
  const auto wide = tree.knn(positions, k + 1);
  NeighborTable t;
  t.rows = wide.rows;
  t.k = k;
  t.indices.reserve(t.rows * k);
  t.distances.reserve(t.rows * k);
  for (std::size_t i = 0; i < wide.rows; ++i) {
    std::size_t kept = 0;
    for (std::size_t j = 0; j < wide.k && kept < k; ++j) {
      if (wide.at(i, j) == i) continue;
      t.indices.push_back(wide.at(i, j));
      t.distances.push_back(wide.row_distances(i)[j]);
      ++kept;
    }
  }
  return cbl_loss(features, t, labels, boundary, tau);
}

}  // namespace geoseg
