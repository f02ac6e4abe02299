#include <doctest.h>

#include "../common/oracles.hpp"
#include "geoseg/spatial.hpp"

using namespace geoseg;

TEST_CASE("kd-tree knn matches brute force exactly") {
  std::mt19937_64 rng(1);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 1 + rng() % 300;
    const auto pts = oracle::random_points(rng, n);
    const std::size_t k = 1 + rng() % std::min<std::size_t>(n, 20);
    const KdTree tree(pts, 1 + rng() % 10);
    const auto t = tree.knn(pts, k);
    const auto ref = oracle::knn(pts, pts, k);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = t.row(i);
      CHECK(std::vector<Index>(row.begin(), row.end()) == ref[i]);
      for (std::size_t j = 0; j < k; ++j)
        CHECK(t.row_distances(i)[j] == doctest::Approx(std::sqrt(squared_distance(pts[i], pts[ref[i][j]]))));
    }
  }
}

TEST_CASE("knn ties resolve to the lower index") {
  // Integer lattice: many equal distances.
  std::vector<Point3> pts;
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 3; ++z) pts.push_back({double(x), double(y), double(z)});
  pts.push_back(pts[5]);  // exact duplicate
  const auto t = KdTree(pts, 2).knn(pts, 9);
  const auto ref = oracle::knn(pts, pts, 9);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto row = t.row(i);
    CHECK(std::vector<Index>(row.begin(), row.end()) == ref[i]);
  }
  CHECK(t.at(pts.size() - 1, 0) == 5);  // the duplicate's first neighbor is the lower copy
}

TEST_CASE("knn rejects k above the point count") {
  const std::vector<Point3> pts{{0, 0, 0}, {1, 0, 0}};
  CHECK_THROWS(KdTree(pts).knn(pts, 3));
}

TEST_CASE("radius search matches brute force, boundary inclusive") {
  std::mt19937_64 rng(2);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 1 + rng() % 300;
    const auto pts = oracle::random_points(rng, n);
    const auto queries = oracle::random_points(rng, 20);
    const double r = 0.05 + 0.5 * std::uniform_real_distribution<double>(0, 1)(rng);
    const KdTree tree(pts);
    CHECK(tree.radius_search(queries, r) == oracle::radius(pts, queries, r));
  }
  const std::vector<Point3> line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  const auto hits = KdTree(line).radius_search(std::vector<Point3>{{0, 0, 0}}, 1.0);
  CHECK(hits[0] == std::vector<Index>{0, 1});
  const auto self = KdTree(line).radius_neighbors_self(1.0);
  CHECK(self[1] == std::vector<Index>{0, 2});
}

TEST_CASE("farthest point sampling is the greedy max-min sequence") {
  std::mt19937_64 rng(3);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + rng() % 299;
    const auto pts = oracle::random_points(rng, n);
    const std::size_t m = 1 + rng() % n;
    const auto seed = rng();
    const auto picks = farthest_point_sample(pts, m, seed);
    REQUIRE(picks.size() == m);
    CHECK(picks == oracle::fps(pts, m, picks[0]));
    CHECK(farthest_point_sample(pts, m, seed) == picks);
  }
  const std::vector<Point3> pts{{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}, {0.5, 0, 0}};
  CHECK(farthest_point_sample_from(pts, 3, 0) == std::vector<Index>{0, 1, 2});  // tie between 1 and 2
  CHECK_THROWS(farthest_point_sample(pts, 5, 0));
}
