#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "geoseg/pointcloud.hpp"
#include "geoseg/spatial.hpp"

namespace geoseg {

/// Per-point covariance eigenvalues, sorted descending and clamped at zero.
using EigenFeatures = std::vector<Point3>;

/// Eigenvalues of a symmetric 3x3 matrix given by its upper triangle
/// (xx, yy, zz, xy, xz, yz), computed from the characteristic cubic with the
/// trigonometric method. Sorted descending, not clamped.
Point3 symmetric_eigenvalues(double xx, double yy, double zz, double xy, double xz, double yz);

/// C = M M^T with M the 3 x K matrix of offsets (neighbor - center).
std::array<double, 6> local_covariance(std::span<const Point3> positions, std::size_t center,
                                       std::span<const Index> neighbors);

EigenFeatures local_covariance_eigenvalues(std::span<const Point3> positions,
                                           const NeighborTable& neighbors);

/// Exact KNN among the eigenvalue triples (self included at distance 0).
NeighborTable eigenspace_knn(const EigenFeatures& eig, std::size_t k);

/// Polar context per neighbor, expressed relative to the direction of the
/// neighborhood centroid so that it does not change under rotation about z.
struct GcfrFeatures {
  std::size_t rows = 0, k = 0;
  std::vector<double> distance;  // rows * k
  std::vector<double> azimuth;   // rows * k, raw azimuth of the offset
  std::vector<double> elevation; // rows * k, raw elevation of the offset
  std::vector<double> rel_azimuth;    // rows * k, azimuth - centroid azimuth, wrapped
  std::vector<double> rel_elevation;  // rows * k, elevation - centroid elevation, wrapped
                                      // (both relative angles are 0 for a zero offset)
  std::vector<double> centroid_azimuth;    // rows
  std::vector<double> centroid_elevation;  // rows
};

/// Azimuth via atan2(y, x), elevation via atan2(z, hypot(x, y)); a zero offset maps to (0, 0).
std::array<double, 2> polar_angles(double x, double y, double z);

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

GcfrFeatures gcfr_features(std::span<const Point3> positions, const NeighborTable& neighbors);

/// Same quantities, but angles are taken relative to a caller-supplied
/// per-row centroid direction instead of the centroid of `neighbors`.
GcfrFeatures gcfr_features_in_frame(std::span<const Point3> positions, const NeighborTable& neighbors,
                                    std::span<const double> centroid_azimuth,
                                    std::span<const double> centroid_elevation);

struct BoundingSphere {
  Point3 center{};
  double radius = 0;
};

/// Sphere centered at the coordinate centroid that covers every point.
BoundingSphere centroid_bounding_sphere(std::span<const Point3> positions);

struct LocalDensity {
  std::vector<double> ratio;       // (local radius / global radius)^3
  std::vector<char> degenerate;    // local radius was zero
};

LocalDensity local_density(std::span<const Point3> positions, const NeighborTable& neighbors,
                           const Point3& global_center, double global_radius);

/// Color context: per neighbor (f_j - f_i, f_i) and the per-point
/// componentwise variance of the neighbor colors around f_i.
struct ColorFeatures {
  std::size_t rows = 0, k = 0;
  std::vector<double> per_neighbor;  // rows * k * 6
  std::vector<double> variance;      // rows * 3
  static constexpr std::size_t kChannels = 9;

  /// (f_j - f_i, f_i, variance) for every neighbor row: rows * k * 9.
  std::vector<double> concatenated() const;
};

ColorFeatures color_features(std::span<const Point3> colors, const NeighborTable& neighbors);

}  // namespace geoseg
