#include "equidesc/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace equidesc {
namespace {

constexpr double kPi = std::numbers::pi;

}  // namespace

SphericalSignal::SphericalSignal(int bandwidth, int channels)
    : bandwidth(bandwidth),
      channels(channels),
      values(static_cast<std::size_t>(channels) * 4 * bandwidth * bandwidth,
             0.0) {}

void SupportSpec::validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw InvalidArgument("support radius must be positive");
  }
  if (shells < 1) throw InvalidArgument("support needs at least one shell");
  if (bandwidth < 1) throw InvalidArgument("bandwidth must be >= 1");
}

SphericalCell locate_cell(const Vec3& offset, const SupportSpec& spec) {
  const double distance = offset.norm();
  if (distance < 1e-9 * spec.radius) return {};
  const int n = 2 * spec.bandwidth;
  SphericalCell cell;
  cell.shell = std::min(
      static_cast<int>(std::floor(spec.shells * distance / spec.radius)),
      spec.shells - 1);
  const double beta = std::acos(std::clamp(offset.z() / distance, -1.0, 1.0));
  // Rows partition [0, pi] evenly; row k is centered on beta_k.
  cell.beta_index =
      std::min(static_cast<int>(std::floor(beta / (kPi / n))), n - 1);
  double alpha = std::atan2(offset.y(), offset.x());
  if (alpha < 0.0) alpha += 2.0 * kPi;
  // Columns are centered on alpha_j = 2 pi j / n.
  const double step = 2.0 * kPi / n;
  cell.alpha_index = static_cast<int>(std::floor(alpha / step + 0.5)) % n;
  return cell;
}

double cell_solid_angle_fraction(int bandwidth, int beta_index) {
  const int n = 2 * bandwidth;
  const double lo = kPi * beta_index / n;
  const double hi = kPi * (beta_index + 1) / n;
  // (cos lo - cos hi) * (2 pi / n) / (4 pi)
  return (std::cos(lo) - std::cos(hi)) / (2.0 * n);
}

SphericalSignal build_spherical_signal(const PointCloud& cloud,
                                       const Vec3& center,
                                       const SupportSpec& spec) {
  spec.validate();
  if (!center.allFinite()) {
    throw InvalidArgument("build_spherical_signal: center is not finite");
  }
  SphericalSignal signal(spec.bandwidth, spec.shells);
  std::size_t support = 0;
  for (const Vec3& p : cloud.points) {
    if (!p.allFinite()) {
      throw InvalidArgument("build_spherical_signal: non-finite point");
    }
    const Vec3 offset = p - center;
    if (offset.norm() > spec.radius) continue;
    const SphericalCell cell = locate_cell(offset, spec);
    signal.at(cell.shell, cell.alpha_index, cell.beta_index) += 1.0;
    ++support;
  }
  if (support == 0) return signal;
  const int n = signal.size();
  std::vector<double> scale(n);
  for (int k = 0; k < n; ++k) {
    scale[k] = 1.0 / (static_cast<double>(support) *
                      cell_solid_angle_fraction(spec.bandwidth, k));
  }
  for (int c = 0; c < spec.shells; ++c) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) signal.at(c, j, k) *= scale[k];
    }
  }
  return signal;
}

PointCloud rotate_point_cloud(const PointCloud& cloud, const Mat3& r,
                              const Vec3& pivot) {
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const Vec3& p : cloud.points) out.points.push_back(r * (p - pivot) + pivot);
  out.normals.reserve(cloud.normals.size());
  for (const Vec3& n : cloud.normals) out.normals.push_back(r * n);
  if (cloud.sensor_origin) {
    out.sensor_origin = r * (*cloud.sensor_origin - pivot) + pivot;
  }
  return out;
}

PointCloud rotate_point_cloud(const PointCloud& cloud, const RotationZYZ& r,
                              const Vec3& pivot) {
  return rotate_point_cloud(cloud, r.to_matrix(), pivot);
}

}  // namespace equidesc
