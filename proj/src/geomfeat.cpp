#include "geoseg/geomfeat.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "geoseg/errors.hpp"

namespace geoseg {

Point3 symmetric_eigenvalues(double xx, double yy, double zz, double xy, double xz, double yz) {
  const double off = xy * xy + xz * xz + yz * yz;
  Point3 eig{};
  if (off == 0.0) {
    eig = {xx, yy, zz};
  } else {
    const double q = (xx + yy + zz) / 3.0;
    const double axx = xx - q, ayy = yy - q, azz = zz - q;
    const double p = std::sqrt((axx * axx + ayy * ayy + azz * azz + 2.0 * off) / 6.0);
    // det((A - qI) / p) / 2
    const double det = axx * (ayy * azz - yz * yz) - xy * (xy * azz - yz * xz) +
                       xz * (xy * yz - ayy * xz);
    const double r = std::clamp(det / (2.0 * p * p * p), -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    const double e1 = q + 2.0 * p * std::cos(phi);
    const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    eig = {e1, 3.0 * q - e1 - e3, e3};
  }
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

std::array<double, 6> local_covariance(std::span<const Point3> positions, std::size_t center,
                                       std::span<const Index> neighbors) {
  std::array<double, 6> c{};
  const Point3& p = positions[center];
  for (Index j : neighbors) {
    const double dx = positions[j][0] - p[0];
    const double dy = positions[j][1] - p[1];
    const double dz = positions[j][2] - p[2];
    c[0] += dx * dx;
    c[1] += dy * dy;
    c[2] += dz * dz;
    c[3] += dx * dy;
    c[4] += dx * dz;
    c[5] += dy * dz;
  }
  return c;
}

EigenFeatures local_covariance_eigenvalues(std::span<const Point3> positions,
                                           const NeighborTable& neighbors) {
  if (neighbors.rows != positions.size()) throw Error("neighbor table rows != point count");
  if (neighbors.k == 0) throw Error("neighbor table is empty");
  EigenFeatures out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto c = local_covariance(positions, i, neighbors.row(i));
    auto eig = symmetric_eigenvalues(c[0], c[1], c[2], c[3], c[4], c[5]);
    for (auto& v : eig) v = std::max(v, 0.0);
    out[i] = eig;
  }
  return out;
}

NeighborTable eigenspace_knn(const EigenFeatures& eig, std::size_t k) {
  if (k > eig.size())
    throw Error("eigenspace_knn: k=" + std::to_string(k) + " exceeds point count " +
                std::to_string(eig.size()));
  const KdTree tree(eig);
  return tree.knn(eig, k);
}

std::array<double, 2> polar_angles(double x, double y, double z) {
  if (x == 0.0 && y == 0.0 && z == 0.0) return {0.0, 0.0};
  return {std::atan2(y, x), std::atan2(z, std::sqrt(x * x + y * y))};
}

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::remainder(a, 2.0 * pi);  // [-pi, pi]
  return a <= -pi ? a + 2.0 * pi : a;
}

namespace {

GcfrFeatures gcfr_raw(std::span<const Point3> positions, const NeighborTable& neighbors) {
  if (neighbors.k == 0) throw Error("gcfr_features: empty neighbor table");
  if (neighbors.rows > positions.size()) throw Error("gcfr_features: more rows than points");
  const std::size_t n = neighbors.rows, k = neighbors.k;
  GcfrFeatures f;
  f.rows = n;
  f.k = k;
  f.distance.resize(n * k);
  f.azimuth.resize(n * k);
  f.elevation.resize(n * k);
  f.rel_azimuth.resize(n * k);
  f.rel_elevation.resize(n * k);
  f.centroid_azimuth.resize(n);
  f.centroid_elevation.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Point3& p = positions[i];
    for (std::size_t j = 0; j < k; ++j) {
      const Point3& q = positions[neighbors.at(i, j)];
      const double x = q[0] - p[0], y = q[1] - p[1], z = q[2] - p[2];
      const auto [az, el] = polar_angles(x, y, z);
      f.distance[i * k + j] = std::sqrt(x * x + y * y + z * z);
      f.azimuth[i * k + j] = az;
      f.elevation[i * k + j] = el;
    }
  }
  return f;
}

void apply_frame(GcfrFeatures& f) {
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t j = 0; j < f.k; ++j) {
      const std::size_t e = i * f.k + j;
      // A zero offset has no direction; its relative angles are defined as 0.
      const bool zero = f.distance[e] == 0;
      f.rel_azimuth[e] = zero ? 0.0 : wrap_angle(f.azimuth[e] - f.centroid_azimuth[i]);
      f.rel_elevation[e] = zero ? 0.0 : wrap_angle(f.elevation[e] - f.centroid_elevation[i]);
    }
}

}  // namespace

GcfrFeatures gcfr_features(std::span<const Point3> positions, const NeighborTable& neighbors) {
  GcfrFeatures f = gcfr_raw(positions, neighbors);
  for (std::size_t i = 0; i < f.rows; ++i) {
    const Point3& p = positions[i];
    Point3 centroid{};
    for (Index j : neighbors.row(i))
      for (int a = 0; a < 3; ++a) centroid[a] += positions[j][a];
    for (auto& c : centroid) c /= static_cast<double>(f.k);
    const auto [alpha, beta] = polar_angles(centroid[0] - p[0], centroid[1] - p[1], centroid[2] - p[2]);
    f.centroid_azimuth[i] = alpha;
    f.centroid_elevation[i] = beta;
  }
  apply_frame(f);
  return f;
}

GcfrFeatures gcfr_features_in_frame(std::span<const Point3> positions, const NeighborTable& neighbors,
                                    std::span<const double> centroid_azimuth,
                                    std::span<const double> centroid_elevation) {
  if (centroid_azimuth.size() != neighbors.rows || centroid_elevation.size() != neighbors.rows)
    throw Error("gcfr_features_in_frame: frame size mismatch");
  GcfrFeatures f = gcfr_raw(positions, neighbors);
  std::copy(centroid_azimuth.begin(), centroid_azimuth.end(), f.centroid_azimuth.begin());
  std::copy(centroid_elevation.begin(), centroid_elevation.end(), f.centroid_elevation.begin());
  apply_frame(f);
  return f;
}

BoundingSphere centroid_bounding_sphere(std::span<const Point3> positions) {
  if (positions.empty()) throw Error("bounding sphere of an empty set");
  BoundingSphere s;
  for (const auto& p : positions)
    for (int a = 0; a < 3; ++a) s.center[a] += p[a];
  for (auto& c : s.center) c /= static_cast<double>(positions.size());
  double r2 = 0;
  for (const auto& p : positions) r2 = std::max(r2, squared_distance(p, s.center));
  s.radius = std::sqrt(r2);
  return s;
}

LocalDensity local_density(std::span<const Point3> positions, const NeighborTable& neighbors,
                           const Point3& /*global_center*/, double global_radius) {
  if (!(global_radius > 0)) throw Error("local_density: global radius must be positive");
  LocalDensity d;
  d.ratio.resize(neighbors.rows);
  d.degenerate.resize(neighbors.rows, 0);
  for (std::size_t i = 0; i < neighbors.rows; ++i) {
    double local = 0;
    for (Index j : neighbors.row(i)) local = std::max(local, squared_distance(positions[i], positions[j]));
    local = std::sqrt(local);
    if (local == 0.0) {
      d.degenerate[i] = 1;
      d.ratio[i] = 0.0;
      continue;
    }
    const double s = local / global_radius;
    d.ratio[i] = s * s * s;
  }
  return d;
}

std::vector<double> ColorFeatures::concatenated() const {
  std::vector<double> out(rows * k * kChannels);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double* dst = out.data() + (i * k + j) * kChannels;
      std::copy_n(per_neighbor.data() + (i * k + j) * 6, 6, dst);
      std::copy_n(variance.data() + i * 3, 3, dst + 6);
    }
  return out;
}

ColorFeatures color_features(std::span<const Point3> colors, const NeighborTable& neighbors) {
  if (neighbors.k == 0) throw Error("color_features: empty neighbor table");
  ColorFeatures f;
  f.rows = neighbors.rows;
  f.k = neighbors.k;
  f.per_neighbor.resize(f.rows * f.k * 6);
  f.variance.assign(f.rows * 3, 0.0);
  for (std::size_t i = 0; i < f.rows; ++i) {
    const Point3& ci = colors[i];
    for (std::size_t j = 0; j < f.k; ++j) {
      const Point3& cj = colors[neighbors.at(i, j)];
      double* dst = f.per_neighbor.data() + (i * f.k + j) * 6;
      for (int a = 0; a < 3; ++a) {
        const double d = cj[a] - ci[a];
        dst[a] = d;
        dst[3 + a] = ci[a];
        f.variance[i * 3 + a] += d * d;
      }
    }
    for (int a = 0; a < 3; ++a) f.variance[i * 3 + a] /= static_cast<double>(f.k);
  }
  return f;
}

}  // namespace geoseg
