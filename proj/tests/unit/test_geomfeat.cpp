#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <numbers>

#include "../common/oracles.hpp"
#include "geoseg/geomfeat.hpp"

using namespace geoseg;

namespace {

Point3 eigen_reference(double xx, double yy, double zz, double xy, double xz, double yz) {
  Eigen::Matrix3d m;
  m << xx, xy, xz, xy, yy, yz, xz, yz, zz;
  const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(m, Eigen::EigenvaluesOnly).eigenvalues();
  return {ev[2], ev[1], ev[0]};
}

NeighborTable table_of(const std::vector<Point3>& pts, std::size_t k) { return KdTree(pts).knn(pts, k); }

std::vector<Point3> rotate_z(const std::vector<Point3>& pts, double a, Point3 shift = {}) {
  std::vector<Point3> out;
  for (const auto& p : pts)
    out.push_back({std::cos(a) * p[0] - std::sin(a) * p[1] + shift[0], std::sin(a) * p[0] + std::cos(a) * p[1] + shift[1],
                   p[2] + shift[2]});
  return out;
}

}  // namespace

TEST_CASE("closed-form eigenvalues match the Eigen solver") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int i = 0; i < 2000; ++i) {
    const double a[6] = {u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    const Point3 got = symmetric_eigenvalues(a[0], a[1], a[2], a[3], a[4], a[5]);
    const Point3 ref = eigen_reference(a[0], a[1], a[2], a[3], a[4], a[5]);
    for (int d = 0; d < 3; ++d) CHECK(got[d] == doctest::Approx(ref[d]).epsilon(1e-9).scale(1.0));
  }
}

TEST_CASE("eigenvalues of degenerate matrices") {
  CHECK(symmetric_eigenvalues(0, 0, 0, 0, 0, 0) == Point3{0, 0, 0});
  const Point3 id = symmetric_eigenvalues(2, 2, 2, 0, 0, 0);
  for (double v : id) CHECK(v == doctest::Approx(2));
  const Point3 diag = symmetric_eigenvalues(1, 3, 2, 0, 0, 0);
  CHECK(diag[0] == doctest::Approx(3));
  CHECK(diag[1] == doctest::Approx(2));
  CHECK(diag[2] == doctest::Approx(1));
  // Rank one: v v^T with v = (1, 2, 2) has eigenvalues 9, 0, 0.
  const Point3 r1 = symmetric_eigenvalues(1, 4, 4, 2, 2, 4);
  CHECK(r1[0] == doctest::Approx(9));
  CHECK(std::abs(r1[1]) < 1e-9);
  CHECK(std::abs(r1[2]) < 1e-9);
}

TEST_CASE("local covariance is M M^T of neighbor offsets") {
  std::mt19937_64 rng(5);
  const auto pts = oracle::random_points(rng, 40);
  const auto t = table_of(pts, 6);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = local_covariance(pts, i, t.row(i));
    double ref[3][3] = {};
    for (Index j : t.row(i))
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) ref[a][b] += (pts[j][a] - pts[i][a]) * (pts[j][b] - pts[i][b]);
    CHECK(c[0] == doctest::Approx(ref[0][0]));
    CHECK(c[1] == doctest::Approx(ref[1][1]));
    CHECK(c[2] == doctest::Approx(ref[2][2]));
    CHECK(c[3] == doctest::Approx(ref[0][1]));
    CHECK(c[4] == doctest::Approx(ref[0][2]));
    CHECK(c[5] == doctest::Approx(ref[1][2]));
  }
}

TEST_CASE("eigenvalue features are sorted, non-negative and rigid-motion invariant") {
  std::mt19937_64 rng(6);
  const auto pts = oracle::random_points(rng, 200);
  const auto eig = local_covariance_eigenvalues(pts, table_of(pts, 12));
  for (const auto& e : eig) {
    CHECK(e[0] >= e[1]);
    CHECK(e[1] >= e[2]);
    CHECK(e[2] >= 0);
  }
  const auto moved = rotate_z(pts, 0.7, {3, -2, 1});
  const auto eig2 = local_covariance_eigenvalues(moved, table_of(moved, 12));
  for (std::size_t i = 0; i < eig.size(); ++i)
    for (int d = 0; d < 3; ++d) CHECK(std::abs(eig[i][d] - eig2[i][d]) < 1e-9);
}

TEST_CASE("eigen-space knn matches brute force over eigenvalue triples") {
  std::mt19937_64 rng(7);
  const auto pts = oracle::random_points(rng, 150);
  const auto eig = local_covariance_eigenvalues(pts, table_of(pts, 10));
  const auto t = eigenspace_knn(eig, 8);
  const auto ref = oracle::knn(eig, eig, 8);
  for (std::size_t i = 0; i < eig.size(); ++i) {
    const auto row = t.row(i);
    CHECK(std::vector<Index>(row.begin(), row.end()) == ref[i]);
  }
}

TEST_CASE("polar angles and wrapping") {
  const auto zero = polar_angles(0, 0, 0);
  CHECK(zero[0] == 0);
  CHECK(zero[1] == 0);
  const auto up = polar_angles(0, 0, 2);
  CHECK(up[1] == doctest::Approx(std::numbers::pi / 2));
  const auto side = polar_angles(0, 1, 0);
  CHECK(side[0] == doctest::Approx(std::numbers::pi / 2));
  CHECK(wrap_angle(3 * std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(0.5) == doctest::Approx(0.5));
  CHECK(wrap_angle(-7.0) == doctest::Approx(-7.0 + 2 * std::numbers::pi));
}

TEST_CASE("polar features: distances match and relative angles are z-rotation invariant") {
  std::mt19937_64 rng(8);
  const auto pts = oracle::random_points(rng, 120);
  const auto t = table_of(pts, 10);
  const auto g = gcfr_features(pts, t);
  REQUIRE(g.rows == pts.size());
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.k; ++j)
      CHECK(g.distance[i * g.k + j] == doctest::Approx(std::sqrt(squared_distance(pts[i], pts[t.at(i, j)]))));
  const auto moved = rotate_z(pts, -2.1, {0.5, 0.5, 0});
  const auto g2 = gcfr_features(moved, table_of(moved, 10));
  for (std::size_t e = 0; e < g.distance.size(); ++e) {
    CHECK(std::abs(g.distance[e] - g2.distance[e]) < 1e-9);
    CHECK(std::abs(wrap_angle(g.rel_azimuth[e] - g2.rel_azimuth[e])) < 1e-9);
    CHECK(std::abs(g.rel_elevation[e] - g2.rel_elevation[e]) < 1e-9);
    CHECK(std::abs(g.elevation[e] - g2.elevation[e]) < 1e-9);
  }
}

TEST_CASE("local density is the cubed radius ratio") {
  std::mt19937_64 rng(9);
  const auto pts = oracle::random_points(rng, 100);
  const auto t = table_of(pts, 8);
  const auto s = centroid_bounding_sphere(pts);
  Point3 mean{};
  for (const auto& p : pts)
    for (int d = 0; d < 3; ++d) mean[d] += p[d] / pts.size();
  double far = 0;
  for (const auto& p : pts) far = std::max(far, std::sqrt(squared_distance(p, mean)));
  for (int d = 0; d < 3; ++d) CHECK(s.center[d] == doctest::Approx(mean[d]));
  CHECK(s.radius == doctest::Approx(far));
  const auto dens = local_density(pts, t, s.center, s.radius);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double local = 0;
    for (Index j : t.row(i)) local = std::max(local, std::sqrt(squared_distance(pts[i], pts[j])));
    CHECK(dens.ratio[i] == doctest::Approx(std::pow(local / far, 3)));
    CHECK_FALSE(dens.degenerate[i]);
  }
  const std::vector<Point3> same(4, Point3{1, 1, 1});
  const auto d2 = local_density(same, table_of(same, 3), {1, 1, 1}, 1.0);
  CHECK(d2.degenerate[0]);
  CHECK(d2.ratio[0] == 0);
}

TEST_CASE("color features: differences, center color and variance") {
  std::mt19937_64 rng(10);
  const auto pts = oracle::random_points(rng, 60);
  std::vector<Point3> colors = oracle::random_points(rng, 60, 0.5);
  for (auto& c : colors)
    for (auto& v : c) v += 0.5;
  const auto t = table_of(pts, 5);
  const auto f = color_features(colors, t);
  const auto cat = f.concatenated();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      double var = 0;
      for (Index j : t.row(i)) var += (colors[j][ch] - colors[i][ch]) * (colors[j][ch] - colors[i][ch]);
      var /= 5.0;
      CHECK(f.variance[i * 3 + ch] == doctest::Approx(var));
    }
    for (std::size_t j = 0; j < 5; ++j) {
      const Index n = t.at(i, j);
      const double* row = &cat[(i * 5 + j) * ColorFeatures::kChannels];
      for (int ch = 0; ch < 3; ++ch) {
        CHECK(row[ch] == doctest::Approx(colors[n][ch] - colors[i][ch]));
        CHECK(row[3 + ch] == doctest::Approx(colors[i][ch]));
        CHECK(row[6 + ch] == doctest::Approx(f.variance[i * 3 + ch]));
      }
    }
  }
}
