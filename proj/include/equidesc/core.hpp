#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace equidesc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// All randomness in the library flows through this engine type so that a
/// single seed reproduces every result on a given platform.
using Rng = std::mt19937_64;

/// Independent stream for (seed, tag, index), so that work items draw the
/// same numbers whatever order or thread they run in.
Rng derive_rng(std::uint64_t seed, std::uint32_t tag, std::uint64_t index);

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied argument violates a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Rotation parameterized by intrinsic ZYZ Euler angles,
/// R = Rz(alpha) * Ry(beta) * Rz(gamma).
struct RotationZYZ {
  double alpha = 0.0;  // [0, 2pi)
  double beta = 0.0;   // [0, pi]
  double gamma = 0.0;  // [0, 2pi)

  static RotationZYZ Identity() { return {}; }

  Mat3 to_matrix() const;
  static RotationZYZ from_matrix(const Mat3& m);
};

Mat3 zyz_to_matrix(const RotationZYZ& r);

/// Inverse of zyz_to_matrix on rotations. At gimbal lock (|sin beta| < 1e-9)
/// gamma is pinned to zero and the residual z rotation is folded into alpha.
/// Throws InvalidArgument when m is not a rotation within 1e-6.
RotationZYZ matrix_to_zyz(const Mat3& m);

/// Matrix of the result equals matrix(a) * matrix(b).
RotationZYZ compose(const RotationZYZ& a, const RotationZYZ& b);
RotationZYZ inverse(const RotationZYZ& a);

/// Frobenius norm of m^T m - I.
double orthogonality_residual(const Mat3& m);

Mat3 rotation_z(double angle);
Mat3 rotation_y(double angle);

/// Wraps an angle into [0, 2pi).
double wrap_angle(double angle);

/// Driscoll-Healy equiangular sampling of the sphere.
///
/// Samples are alpha_j = 2 pi j / 2b and beta_k = pi (2k + 1) / 4b. The
/// quadrature weight of a cell depends only on its beta row; `weights[k]` is
/// the weight of a single cell in row k and the full grid sums to one.
struct DhGrid {
  int bandwidth = 0;
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<double> weights;

  int size() const { return 2 * bandwidth; }
};

DhGrid make_dh_grid(int bandwidth);

/// Raw Driscoll-Healy beta weights w_k, exact for integrals of
/// g(beta) sin(beta) d(beta) when g is a polynomial in cos(beta) of degree
/// below 2b. They sum to 2.
std::vector<double> dh_beta_weights(int bandwidth);

/// Equiangular Euler-angle sampling of SO(3) with (2b)^3 samples indexed
/// (alpha_j, beta_k, gamma_l), alpha-major. `weights[k]` is the weight of a
/// single sample in beta row k; weights implement
/// d(alpha) sin(beta) d(beta) d(gamma) / (8 pi^2) and sum to one.
struct So3Grid {
  int bandwidth = 0;
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<double> gammas;
  std::vector<double> weights;

  int size() const { return 2 * bandwidth; }
  RotationZYZ sample(int j, int k, int l) const {
    return {alphas[j], betas[k], gammas[l]};
  }
};

So3Grid make_so3_grid(int bandwidth);

/// Points in meters with optional per-point unit normals.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::optional<Vec3> sensor_origin;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }

  /// Throws InvalidArgument if normals are present but not one unit vector
  /// per point (tolerance 1e-6).
  void validate() const;
};

/// Haar-uniform rotation: unit quaternion from a 4D Gaussian.
RotationZYZ sample_uniform_rotation(Rng& rng);

/// Rigid transform helpers for 4x4 homogeneous matrices.
Vec3 transform_point(const Mat4& t, const Vec3& p);
Mat4 make_transform(const Mat3& rotation, const Vec3& translation);
Mat4 rigid_inverse(const Mat4& t);

}  // namespace equidesc
