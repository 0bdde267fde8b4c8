#include "equidesc/core.hpp"

#include <cmath>
#include <numbers>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <Eigen/Geometry>
#include <gtest/gtest.h>

namespace equidesc {
namespace {

constexpr double kPi = std::numbers::pi;

RotationZYZ RandomEuler(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {2 * kPi * u(rng), kPi * u(rng), 2 * kPi * u(rng)};
}

TEST(Rotation, IdentityAndZ) {
  EXPECT_TRUE(zyz_to_matrix({0, 0, 0}).isApprox(Mat3::Identity(), 0.0));
  Mat3 expected;
  expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_LT((zyz_to_matrix({kPi / 2, 0, 0}) - expected).norm(), 1e-15);
}

TEST(Rotation, OrthogonalWithUnitDeterminant) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Mat3 m = zyz_to_matrix(RandomEuler(rng));
    EXPECT_LT(orthogonality_residual(m), 1e-12);
    EXPECT_NEAR(m.determinant(), 1.0, 1e-12);
  }
}

TEST(Rotation, MatchesEigenAngleAxisProduct) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const RotationZYZ r = RandomEuler(rng);
    const Mat3 ref = (Eigen::AngleAxisd(r.alpha, Vec3::UnitZ()) *
                      Eigen::AngleAxisd(r.beta, Vec3::UnitY()) *
                      Eigen::AngleAxisd(r.gamma, Vec3::UnitZ()))
                         .toRotationMatrix();
    EXPECT_LT((zyz_to_matrix(r) - ref).norm(), 1e-14);
  }
}

TEST(Rotation, RoundTripRandom) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Mat3 m = zyz_to_matrix(RandomEuler(rng));
    EXPECT_LT((zyz_to_matrix(matrix_to_zyz(m)) - m).norm(), 1e-9);
  }
}

TEST(Rotation, RoundTripAtGimbalLock) {
  for (double beta : {0.0, kPi}) {
    for (double a : {0.3, 2.0, 5.5}) {
      for (double g : {0.0, 1.1, 4.0}) {
        const Mat3 m = zyz_to_matrix({a, beta, g});
        const RotationZYZ r = matrix_to_zyz(m);
        EXPECT_EQ(r.gamma, 0.0);
        EXPECT_LT((zyz_to_matrix(r) - m).norm(), 1e-9);
      }
    }
  }
}

TEST(Rotation, PureZIsFoldedIntoAlpha) {
  const RotationZYZ r = matrix_to_zyz(rotation_z(1.0));
  EXPECT_NEAR(r.alpha, 1.0, 1e-12);
  EXPECT_EQ(r.beta, 0.0);
  EXPECT_EQ(r.gamma, 0.0);
  const RotationZYZ id = matrix_to_zyz(Mat3::Identity());
  EXPECT_EQ(id.alpha, 0.0);
  EXPECT_EQ(id.beta, 0.0);
  EXPECT_EQ(id.gamma, 0.0);
}

TEST(Rotation, RejectsNonRotations) {
  Mat3 scaled = 1.01 * Mat3::Identity();
  EXPECT_THROW(matrix_to_zyz(scaled), InvalidArgument);
  Mat3 reflect = Mat3::Identity();
  reflect(2, 2) = -1.0;
  EXPECT_THROW(matrix_to_zyz(reflect), InvalidArgument);
}

TEST(Rotation, ComposeInverseAssociativity) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const RotationZYZ a = RandomEuler(rng);
    const RotationZYZ b = RandomEuler(rng);
    const RotationZYZ c = RandomEuler(rng);
    EXPECT_LT((compose(a, b).to_matrix() - a.to_matrix() * b.to_matrix()).norm(), 1e-9);
    EXPECT_LT((compose(a, inverse(a)).to_matrix() - Mat3::Identity()).norm(), 1e-9);
    EXPECT_LT((compose(compose(a, b), c).to_matrix() -
               compose(a, compose(b, c)).to_matrix())
                  .norm(),
              1e-9);
    const Vec3 x = Vec3::Random();
    EXPECT_LT((compose(a, b).to_matrix() * x - a.to_matrix() * (b.to_matrix() * x)).norm(),
              1e-9);
    EXPECT_LT((compose(a, RotationZYZ::Identity()).to_matrix() - a.to_matrix()).norm(),
              1e-9);
  }
  const RotationZYZ inv = inverse({kPi / 2, 0, 0});
  EXPECT_LT((inv.to_matrix() - zyz_to_matrix({3 * kPi / 2, 0, 0})).norm(), 1e-12);
}

TEST(Grid, DhSmallBandwidth) {
  const DhGrid g = make_dh_grid(1);
  ASSERT_EQ(g.alphas.size(), 2u);
  EXPECT_DOUBLE_EQ(g.alphas[1], kPi);
  EXPECT_DOUBLE_EQ(g.betas[0], kPi / 4);
  EXPECT_DOUBLE_EQ(g.betas[1], 3 * kPi / 4);
  EXPECT_THROW(make_dh_grid(0), InvalidArgument);
  EXPECT_THROW(make_so3_grid(0), InvalidArgument);
}

TEST(Grid, WeightsPositiveAndNormalized) {
  for (int b : {1, 2, 4, 8, 24}) {
    const DhGrid s2 = make_dh_grid(b);
    const So3Grid so3 = make_so3_grid(b);
    double s2_total = 0.0;
    double so3_total = 0.0;
    for (int k = 0; k < 2 * b; ++k) {
      EXPECT_GT(s2.weights[k], 0.0);
      EXPECT_GT(so3.weights[k], 0.0);
      s2_total += s2.weights[k] * 2 * b;
      so3_total += so3.weights[k] * 4 * b * b;
    }
    EXPECT_NEAR(s2_total, 1.0, 1e-12);
    EXPECT_NEAR(so3_total, 1.0, 1e-10);
  }
}

TEST(Grid, DhQuadratureMatchesAdaptiveIntegration) {
  using boost::math::quadrature::gauss_kronrod;
  const DhGrid g = make_dh_grid(8);
  const auto fn = [](double a, double b) {
    return std::cos(b) + 0.5 * std::exp(std::cos(b)) +
           std::sin(b) * std::sin(b) * std::cos(2 * a) * std::cos(2 * a);
  };
  double quad = 0.0;
  for (int j = 0; j < g.size(); ++j) {
    for (int k = 0; k < g.size(); ++k) quad += g.weights[k] * fn(g.alphas[j], g.betas[k]);
  }
  const double ref =
      gauss_kronrod<double, 31>::integrate(
          [&](double a) {
            return gauss_kronrod<double, 31>::integrate(
                [&](double b) { return fn(a, b) * std::sin(b); }, 0.0, kPi, 10, 1e-13);
          },
          0.0, 2 * kPi, 10, 1e-13) /
      (4 * kPi);
  EXPECT_NEAR(quad, ref, 1e-6);
}

TEST(Sampling, DeterministicForSeed) {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 10; ++i) {
    const RotationZYZ ra = sample_uniform_rotation(a);
    const RotationZYZ rb = sample_uniform_rotation(b);
    EXPECT_EQ(ra.alpha, rb.alpha);
    EXPECT_EQ(ra.beta, rb.beta);
    EXPECT_EQ(ra.gamma, rb.gamma);
  }
}

TEST(Sampling, HaarMeanAngle) {
  Rng rng(7);
  double total = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Mat3 m = sample_uniform_rotation(rng).to_matrix();
    total += std::acos(std::clamp((m.trace() - 1.0) / 2.0, -1.0, 1.0));
  }
  EXPECT_NEAR(total / n, kPi / 2 + 2 / kPi, 0.01);
}

TEST(Sampling, RotatedVectorUniformOverOctants) {
  Rng rng(8);
  std::array<int, 8> counts{};
  const int n = 80000;
  const Vec3 v = Vec3(0.3, -0.5, 0.8).normalized();
  for (int i = 0; i < n; ++i) {
    const Vec3 x = sample_uniform_rotation(rng).to_matrix() * v;
    counts[(x.x() > 0) + 2 * (x.y() > 0) + 4 * (x.z() > 0)]++;
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - n / 8.0) * (c - n / 8.0) / (n / 8.0);
  const boost::math::chi_squared dist(7);
  EXPECT_GT(1.0 - boost::math::cdf(dist, chi2), 0.01);
}

TEST(PointCloudTest, ValidateNormals) {
  PointCloud cloud;
  cloud.points = {Vec3::Zero(), Vec3::Ones()};
  cloud.validate();
  cloud.normals = {Vec3::UnitX()};
  EXPECT_THROW(cloud.validate(), InvalidArgument);
  cloud.normals = {Vec3::UnitX(), Vec3(0, 2, 0)};
  EXPECT_THROW(cloud.validate(), InvalidArgument);
  cloud.normals = {Vec3::UnitX(), Vec3::UnitY()};
  EXPECT_NO_THROW(cloud.validate());
}

TEST(Transform, RigidInverse) {
  Rng rng(9);
  const Mat4 t = make_transform(sample_uniform_rotation(rng).to_matrix(), Vec3(1, -2, 3));
  EXPECT_LT((t * rigid_inverse(t) - Mat4::Identity()).norm(), 1e-12);
  const Vec3 p(0.5, 0.1, -0.7);
  EXPECT_LT((transform_point(rigid_inverse(t), transform_point(t, p)) - p).norm(), 1e-12);
}

}  // namespace
}  // namespace equidesc
