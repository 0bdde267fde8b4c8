#include "equidesc/core.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

namespace equidesc {

Rng derive_rng(std::uint64_t seed, std::uint32_t tag, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kGimbalSin = 1e-9;
constexpr double kRotationTolerance = 1e-6;

void RequireBandwidth(int bandwidth) {
  if (bandwidth < 1) {
    throw InvalidArgument("bandwidth must be >= 1, got " +
                          std::to_string(bandwidth));
  }
}

}  // namespace

double wrap_angle(double angle) {
  double wrapped = std::fmod(angle, kTwoPi);
  if (wrapped < 0.0) wrapped += kTwoPi;
  if (wrapped >= kTwoPi) wrapped = 0.0;
  return wrapped;
}

Mat3 rotation_z(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat3 m;
  m << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  return m;
}

Mat3 rotation_y(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat3 m;
  m << c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c;
  return m;
}

Mat3 zyz_to_matrix(const RotationZYZ& r) {
  return rotation_z(r.alpha) * rotation_y(r.beta) * rotation_z(r.gamma);
}

Mat3 RotationZYZ::to_matrix() const { return zyz_to_matrix(*this); }

RotationZYZ RotationZYZ::from_matrix(const Mat3& m) { return matrix_to_zyz(m); }

double orthogonality_residual(const Mat3& m) {
  return (m.transpose() * m - Mat3::Identity()).norm();
}

RotationZYZ matrix_to_zyz(const Mat3& m) {
  if (!m.allFinite() || orthogonality_residual(m) > kRotationTolerance ||
      m.determinant() < 0.0) {
    throw InvalidArgument("matrix_to_zyz: input is not a rotation matrix");
  }
  const double sin_beta = std::hypot(m(0, 2), m(1, 2));
  RotationZYZ r;
  r.beta = std::atan2(sin_beta, m(2, 2));
  if (sin_beta < kGimbalSin) {
    // Only alpha + gamma (beta = 0) or alpha - gamma (beta = pi) is defined.
    r.beta = m(2, 2) > 0.0 ? 0.0 : kPi;
    r.alpha = wrap_angle(std::atan2(-m(0, 1), m(1, 1)));
    r.gamma = 0.0;
    return r;
  }
  r.alpha = wrap_angle(std::atan2(m(1, 2), m(0, 2)));
  r.gamma = wrap_angle(std::atan2(m(2, 1), -m(2, 0)));
  return r;
}

RotationZYZ compose(const RotationZYZ& a, const RotationZYZ& b) {
  return matrix_to_zyz(a.to_matrix() * b.to_matrix());
}

RotationZYZ inverse(const RotationZYZ& a) {
  return matrix_to_zyz(a.to_matrix().transpose());
}

std::vector<double> dh_beta_weights(int bandwidth) {
  RequireBandwidth(bandwidth);
  const int n = 2 * bandwidth;
  std::vector<double> weights(n);
  for (int k = 0; k < n; ++k) {
    const double beta = kPi * (2 * k + 1) / (4.0 * bandwidth);
    double sum = 0.0;
    for (int l = 0; l < bandwidth; ++l) {
      sum += std::sin((2 * l + 1) * beta) / (2 * l + 1);
    }
    weights[k] = 2.0 / bandwidth * std::sin(beta) * sum;
  }
  return weights;
}

DhGrid make_dh_grid(int bandwidth) {
  RequireBandwidth(bandwidth);
  const int n = 2 * bandwidth;
  DhGrid grid;
  grid.bandwidth = bandwidth;
  grid.alphas.resize(n);
  grid.betas.resize(n);
  for (int j = 0; j < n; ++j) grid.alphas[j] = kTwoPi * j / n;
  for (int k = 0; k < n; ++k) grid.betas[k] = kPi * (2 * k + 1) / (4.0 * bandwidth);
  grid.weights = dh_beta_weights(bandwidth);
  // sin(beta) d(beta) integrates to 2, d(alpha) to 2 pi over n samples.
  for (double& w : grid.weights) w /= 2.0 * n;
  return grid;
}

So3Grid make_so3_grid(int bandwidth) {
  RequireBandwidth(bandwidth);
  const int n = 2 * bandwidth;
  So3Grid grid;
  grid.bandwidth = bandwidth;
  grid.alphas.resize(n);
  grid.betas.resize(n);
  grid.gammas.resize(n);
  for (int j = 0; j < n; ++j) {
    grid.alphas[j] = kTwoPi * j / n;
    grid.gammas[j] = kTwoPi * j / n;
  }
  for (int k = 0; k < n; ++k) grid.betas[k] = kPi * (2 * k + 1) / (4.0 * bandwidth);
  grid.weights = dh_beta_weights(bandwidth);
  for (double& w : grid.weights) w /= 2.0 * n * n;
  return grid;
}

void PointCloud::validate() const {
  if (normals.empty()) return;
  if (normals.size() != points.size()) {
    throw InvalidArgument("point cloud has " + std::to_string(normals.size()) +
                          " normals for " + std::to_string(points.size()) +
                          " points");
  }
  for (const Vec3& n : normals) {
    if (std::abs(n.norm() - 1.0) > 1e-6) {
      throw InvalidArgument("point cloud normal is not unit length");
    }
  }
}

RotationZYZ sample_uniform_rotation(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Quaterniond q;
  double norm = 0.0;
  do {
    q = Eigen::Quaterniond(normal(rng), normal(rng), normal(rng), normal(rng));
    norm = q.norm();
  } while (norm < 1e-12);
  q.coeffs() /= norm;
  return matrix_to_zyz(q.toRotationMatrix());
}

Vec3 transform_point(const Mat4& t, const Vec3& p) {
  return t.topLeftCorner<3, 3>() * p + t.topRightCorner<3, 1>();
}

Mat4 make_transform(const Mat3& rotation, const Vec3& translation) {
  Mat4 t = Mat4::Identity();
  t.topLeftCorner<3, 3>() = rotation;
  t.topRightCorner<3, 1>() = translation;
  return t;
}

Mat4 rigid_inverse(const Mat4& t) {
  const Mat3 rt = t.topLeftCorner<3, 3>().transpose();
  return make_transform(rt, -rt * t.topRightCorner<3, 1>());
}

}  // namespace equidesc
