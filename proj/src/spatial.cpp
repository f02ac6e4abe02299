#include "geoseg/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "geoseg/errors.hpp"

namespace geoseg {

KdTree::KdTree(std::span<const Point3> points, std::size_t leaf_size)
    : points_(points.begin(), points.end()) {
  if (points_.empty()) throw Error("cannot index an empty point set");
  for (std::size_t i = 0; i < points_.size(); ++i)
    for (double v : points_[i])
      if (!std::isfinite(v)) throw Error("non-finite coordinate at point " + std::to_string(i));
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), Index{0});
  nodes_.reserve(2 * points_.size() / std::max<std::size_t>(leaf_size, 1) + 1);
  build(0, static_cast<std::uint32_t>(points_.size()), std::max<std::size_t>(leaf_size, 1));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= leaf_size) return id;

  Point3 lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (auto i = begin; i < end; ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], points_[order_[i]][a]);
      hi[a] = std::max(hi[a], points_[order_[i]][a]);
    }
  int axis = 0;
  for (int a = 1; a < 3; ++a)
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  if (hi[axis] - lo[axis] <= 0) return id;  // all coincident

  const auto mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Index a, Index b) { return points_[a][axis] < points_[b][axis]; });
  const double split = points_[order_[mid]][axis];
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  const auto left = build(begin, mid, leaf_size);
  const auto right = build(mid, end, leaf_size);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

namespace {

// Max-heap on (squared distance, index): the worst kept candidate is on top.
bool heap_less(const std::pair<double, Index>& a, const std::pair<double, Index>& b) {
  return a < b;
}

}  // namespace

void KdTree::knn_one(const Point3& q, std::size_t k,
                     std::vector<std::pair<double, Index>>& heap) const {
  heap.clear();
  // Explicit stack of (node, lower bound on squared distance).
  std::vector<std::pair<std::int32_t, double>> stack{{0, 0.0}};
  while (!stack.empty()) {
    auto [id, bound] = stack.back();
    stack.pop_back();
    // Equal bounds are still visited so lower-index ties can replace the worst entry.
    if (heap.size() == k && bound > heap.front().first) continue;
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (auto i = node.begin; i < node.end; ++i) {
        const Index idx = order_[i];
        const std::pair<double, Index> cand{squared_distance(q, points_[idx]), idx};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), heap_less);
        } else if (cand < heap.front()) {
          std::pop_heap(heap.begin(), heap.end(), heap_less);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), heap_less);
        }
      }
      continue;
    }
    const double diff = q[node.axis] - node.split;
    const double plane = diff * diff;
    const auto near = diff < 0 ? node.left : node.right;
    const auto far = diff < 0 ? node.right : node.left;
    // Points equal to the split value may sit on either side, so the far side
    // is bounded by the plane distance only.
    stack.push_back({far, std::max(bound, plane)});
    stack.push_back({near, bound});
  }
  std::sort_heap(heap.begin(), heap.end(), heap_less);
}

NeighborTable KdTree::knn(std::span<const Point3> queries, std::size_t k) const {
  if (k == 0) throw Error("knn: k must be at least 1");
  if (k > size())
    throw Error("knn: k=" + std::to_string(k) + " exceeds point count " + std::to_string(size()));
  NeighborTable table;
  table.rows = queries.size();
  table.k = k;
  table.indices.resize(queries.size() * k);
  table.distances.resize(queries.size() * k);
  std::vector<std::pair<double, Index>> heap;
  heap.reserve(k);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    knn_one(queries[q], k, heap);
    for (std::size_t j = 0; j < k; ++j) {
      table.indices[q * k + j] = heap[j].second;
      table.distances[q * k + j] = std::sqrt(heap[j].first);
    }
  }
  return table;
}

void KdTree::radius_one(const Point3& q, double r2, std::vector<Index>& out) const {
  std::vector<std::pair<std::int32_t, double>> stack{{0, 0.0}};
  while (!stack.empty()) {
    auto [id, bound] = stack.back();
    stack.pop_back();
    if (bound > r2) continue;
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (auto i = node.begin; i < node.end; ++i)
        if (squared_distance(q, points_[order_[i]]) <= r2) out.push_back(order_[i]);
      continue;
    }
    const double diff = q[node.axis] - node.split;
    const double plane = diff * diff;
    stack.push_back({diff < 0 ? node.right : node.left, std::max(bound, plane)});
    stack.push_back({diff < 0 ? node.left : node.right, bound});
  }
  std::sort(out.begin(), out.end());
}

std::vector<std::vector<Index>> KdTree::radius_search(std::span<const Point3> queries,
                                                      double radius) const {
  if (!(radius > 0)) throw Error("radius must be positive");
  const double r2 = radius * radius;
  std::vector<std::vector<Index>> out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) radius_one(queries[q], r2, out[q]);
  return out;
}

std::vector<std::vector<Index>> KdTree::radius_neighbors_self(double radius) const {
  auto out = radius_search(points_, radius);
  for (std::size_t i = 0; i < out.size(); ++i)
    std::erase(out[i], static_cast<Index>(i));
  return out;
}

std::vector<Index> farthest_point_sample_from(std::span<const Point3> points, std::size_t m,
                                              Index first) {
  const std::size_t n = points.size();
  if (m == 0 || m > n)
    throw Error("farthest_point_sample: m=" + std::to_string(m) + " must be in [1, " +
                std::to_string(n) + "]");
  if (first >= n) throw Error("farthest_point_sample: first pick out of range");
  std::vector<Index> picks{first};
  picks.reserve(m);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  taken[first] = 1;
  Index last = first;
  while (picks.size() < m) {
    Index best = 0;
    double best_d2 = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d2[i] = std::min(min_d2[i], squared_distance(points[i], points[last]));
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = static_cast<Index>(i);
      }
    }
    taken[best] = 1;
    picks.push_back(best);
    last = best;
  }
  return picks;
}

std::vector<Index> farthest_point_sample(std::span<const Point3> points, std::size_t m,
                                         std::uint64_t seed) {
  if (points.empty()) throw Error("farthest_point_sample: empty point set");
  std::mt19937_64 rng(seed);
  const auto first = std::uniform_int_distribution<std::size_t>(0, points.size() - 1)(rng);
  return farthest_point_sample_from(points, m, static_cast<Index>(first));
}

}  // namespace geoseg
