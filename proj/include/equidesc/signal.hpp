#pragma once

#include <vector>

#include "equidesc/core.hpp"

namespace equidesc {

/// Multi-channel real signal on a Driscoll-Healy grid.
///
/// Values are stored channel-major, then alpha, then beta:
/// values[(c * 2b + j) * 2b + k] is channel c at (alpha_j, beta_k).
struct SphericalSignal {
  int bandwidth = 0;
  int channels = 0;
  std::vector<double> values;

  SphericalSignal() = default;
  SphericalSignal(int bandwidth, int channels);

  int size() const { return 2 * bandwidth; }
  std::size_t grid_size() const {
    return static_cast<std::size_t>(size()) * size();
  }
  std::size_t index(int c, int j, int k) const {
    return (static_cast<std::size_t>(c) * size() + j) * size() + k;
  }
  double& at(int c, int j, int k) { return values[index(c, j, k)]; }
  double at(int c, int j, int k) const { return values[index(c, j, k)]; }
};

/// Support ball and binning resolution used to turn a neighborhood into a
/// spherical signal.
struct SupportSpec {
  double radius = 0.30;  // meters
  int shells = 4;        // K
  int bandwidth = 8;     // b

  void validate() const;
};

/// Spherical cell (alpha column, beta row, shell) of an offset from the center.
struct SphericalCell {
  int alpha_index = 0;
  int beta_index = 0;
  int shell = 0;
};

/// Cell of `offset` for the given spec. Offsets shorter than 1e-9 * radius go
/// to shell 0, alpha column 0, beta row 0.
SphericalCell locate_cell(const Vec3& offset, const SupportSpec& spec);

/// Fraction of the sphere's solid angle covered by one cell in beta row k.
double cell_solid_angle_fraction(int bandwidth, int beta_index);

/// Density signal of the points within `spec.radius` (closed ball) of `center`.
///
/// Each in-support point increments its cell; a cell's value is
/// count / (N_support * solid-angle fraction of the cell). An empty
/// neighborhood yields the all-zero signal.
SphericalSignal build_spherical_signal(const PointCloud& cloud,
                                       const Vec3& center,
                                       const SupportSpec& spec);

/// Rotates points (and normals) about `pivot`.
PointCloud rotate_point_cloud(const PointCloud& cloud, const RotationZYZ& r,
                              const Vec3& pivot);
PointCloud rotate_point_cloud(const PointCloud& cloud, const Mat3& r,
                              const Vec3& pivot);

}  // namespace equidesc
