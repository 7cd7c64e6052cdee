#include "kinefuse/so3.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace kinefuse;
using so3::UnitQuaternion;
namespace kt = kinefuse::testing;

namespace {

constexpr double kPi = so3::kPi;

// Smooth test trajectory R(t) = A Rz(a t) B Rx(b t^2) with its analytic
// derivative by the product rule.
struct SmoothRotation {
  Mat3 a, b;
  double ra, rb;

  Mat3 at(double t) const {
    return a * so3::rotation_about(Vec3::UnitZ(), ra * t) * b *
           so3::rotation_about(Vec3::UnitX(), rb * t * t);
  }
  Mat3 rate(double t) const {
    const Mat3 z = so3::rotation_about(Vec3::UnitZ(), ra * t);
    const Mat3 x = so3::rotation_about(Vec3::UnitX(), rb * t * t);
    const Mat3 zd = z * so3::hat<double>(Vec3::UnitZ()) * ra;
    const Mat3 xd = x * so3::hat<double>(Vec3::UnitX()) * (2.0 * rb * t);
    return a * zd * b * x + a * z * b * xd;
  }
};

}  // namespace

TEST(So3, IdentityQuaternionGivesIdentityMatrix) {
  EXPECT_TRUE(so3::quat_to_matrix(UnitQuaternion()).isApprox(Mat3::Identity(), 1e-15));
}

TEST(So3, QuarterTurnAboutZMapsXToY) {
  const auto q = UnitQuaternion::from_axis_angle(Vec3::UnitZ(), kPi / 2);
  EXPECT_TRUE((so3::quat_to_matrix(q) * Vec3::UnitX()).isApprox(Vec3::UnitY(), 1e-12));
}

TEST(So3, QuaternionMatrixRoundTrip) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto q = kt::random_quat(rng);
    const Mat3 r = so3::quat_to_matrix(q);
    EXPECT_TRUE(so3::is_rotation(r, 1e-12));
    EXPECT_TRUE(so3::quat_to_matrix(-q).isApprox(r, 1e-14));
    const auto back = so3::matrix_to_quat(r);
    EXPECT_GE(back.w(), 0.0);
    EXPECT_LT((back.coeffs() - q.canonical().coeffs()).norm(), 1e-9);
  }
}

TEST(So3, NonUnitQuaternionTolerance) {
  const UnitQuaternion q(1.0005, 0.0, 0.0, 0.0);
  EXPECT_NEAR(q.coeffs().norm(), 1.0, 1e-15);
  EXPECT_THROW(UnitQuaternion(1.1, 0.0, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(UnitQuaternion(0.0, 0.0, 0.0, 0.0), std::invalid_argument);
}

TEST(So3, SlerpEndpointsAndMidpoint) {
  const UnitQuaternion q0;
  const auto q1 = UnitQuaternion::from_axis_angle(Vec3::UnitZ(), kPi / 2);
  EXPECT_EQ(so3::slerp(q0, q1, 0.0).coeffs(), q0.coeffs());
  EXPECT_EQ(so3::slerp(q0, q1, 1.0).coeffs(), q1.coeffs());
  const Mat3 half = so3::quat_to_matrix(so3::slerp(q0, q1, 0.5));
  EXPECT_TRUE(half.isApprox(so3::rotation_about(Vec3::UnitZ(), kPi / 4), 1e-12));
}

TEST(So3, SlerpTakesShortestArc) {
  const UnitQuaternion q0;
  const auto q1 = UnitQuaternion::from_axis_angle(Vec3::UnitX(), 0.6);
  const Mat3 a = so3::quat_to_matrix(so3::slerp(q0, q1, 0.3));
  const Mat3 b = so3::quat_to_matrix(so3::slerp(q0, -q1, 0.3));
  EXPECT_TRUE(a.isApprox(b, 1e-12));
}

TEST(So3, SlerpRejectsHalfTurnPairs) {
  const UnitQuaternion q0;
  const auto q1 = UnitQuaternion::from_axis_angle(Vec3::UnitY(), kPi);
  EXPECT_THROW(so3::slerp(q0, q1, 0.5), std::domain_error);
  EXPECT_THROW(so3::slerp(q0, q0, 1.5), std::invalid_argument);
}

TEST(So3, SlerpGeodesicProportionality) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const auto q0 = kt::random_quat(rng);
    const auto q1 = kt::random_quat(rng);
    const double u = uni(rng);
    const Mat3 r0 = so3::quat_to_matrix(q0);
    const double full = so3::geodesic_angle(r0, so3::quat_to_matrix(q1));
    const double part = so3::geodesic_angle(r0, so3::quat_to_matrix(so3::slerp(q0, q1, u)));
    EXPECT_NEAR(part, u * full, 1e-9);
  }
}

TEST(So3, SlerpIsIdentityOnEqualInputs) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto q = kt::random_quat(rng);
    const double u = static_cast<double>(i) / 99.0;
    EXPECT_LT((so3::slerp(q, q, u).coeffs() - q.coeffs()).norm(), 1e-15);
  }
}

TEST(So3, NearlyParallelSlerpMatchesExtendedPrecision) {
  // Reference: textbook slerp in long double with the arc from atan2.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const auto q0 = kt::random_quat(rng);
    const double angle = std::pow(10.0, -2.0 - 8.0 * uni(rng));
    const auto q1 = q0 * UnitQuaternion::from_axis_angle(kt::random_vec3(rng), angle);
    const double u = uni(rng);
    const auto got = so3::slerp(q0, q1, u).coeffs();

    long double a[4], b[4], dot = 0, dm = 0, dp = 0;
    for (int k = 0; k < 4; ++k) {
      a[k] = q0.coeffs()(k);
      b[k] = q1.coeffs()(k);
      dot += a[k] * b[k];
    }
    if (dot < 0)
      for (auto& v : b) v = -v;
    for (int k = 0; k < 4; ++k) {
      dm += (b[k] - a[k]) * (b[k] - a[k]);
      dp += (b[k] + a[k]) * (b[k] + a[k]);
    }
    const long double om = 2.0L * std::atan2(std::sqrt(dm), std::sqrt(dp));
    for (int k = 0; k < 4; ++k) {
      const long double ref =
          (std::sin((1.0L - u) * om) * a[k] + std::sin(u * om) * b[k]) / std::sin(om);
      EXPECT_NEAR(got(k), static_cast<double>(ref), 1e-9);
    }
  }
}

TEST(So3, PiecewiseHeadingKnotsAndInterpolation) {
  const UnitQuaternion id;
  const double duration = 10.0;
  for (double t : {0.0, 1.3, 5.0, 7.7, 10.0}) {
    EXPECT_TRUE(so3::piecewise_heading(id, id, id, t, duration).isApprox(Mat3::Identity(), 1e-15));
  }
  std::mt19937_64 rng(13);
  const auto a = kt::random_quat(rng), b = kt::random_quat(rng), c = kt::random_quat(rng);
  EXPECT_EQ(so3::piecewise_heading(a, b, c, 0.0, duration), so3::quat_to_matrix(a));
  EXPECT_EQ(so3::piecewise_heading(a, b, c, 5.0, duration), so3::quat_to_matrix(b));
  EXPECT_EQ(so3::piecewise_heading(a, b, c, 10.0, duration), so3::quat_to_matrix(c));

  const auto mid = UnitQuaternion::from_axis_angle(Vec3::UnitZ(), so3::deg2rad(10.0));
  const Mat3 quarter = so3::piecewise_heading(id, mid, id, 2.5, duration);
  EXPECT_TRUE(quarter.isApprox(so3::rotation_about(Vec3::UnitZ(), so3::deg2rad(5.0)), 1e-12));
}

TEST(So3, PiecewiseHeadingClampsAndIsContinuous) {
  std::mt19937_64 rng(17);
  const auto a = kt::random_quat(rng), b = kt::random_quat(rng), c = kt::random_quat(rng);
  const double duration = 8.0;
  EXPECT_EQ(so3::piecewise_heading(a, b, c, -0.3, duration), so3::quat_to_matrix(a));
  EXPECT_EQ(so3::piecewise_heading(a, b, c, 8.4, duration), so3::quat_to_matrix(c));
  for (double t : {0.0, 4.0, 8.0}) {
    const double lo = std::max(0.0, t - 1e-9), hi = std::min(duration, t + 1e-9);
    EXPECT_LT(so3::geodesic_angle(so3::piecewise_heading(a, b, c, lo, duration),
                                  so3::piecewise_heading(a, b, c, hi, duration)),
              1e-7);
  }
}

TEST(So3, GeodesicAngleBasics) {
  std::mt19937_64 rng(19);
  const Mat3 r = kt::random_rotation(rng);
  EXPECT_NEAR(so3::geodesic_angle(r, r), 0.0, 1e-12);
  for (int i = 0; i < 20; ++i) {
    const Mat3 rb = so3::rotation_about(kt::random_vec3(rng), so3::deg2rad(30.0));
    EXPECT_NEAR(so3::geodesic_angle(Mat3::Identity(), rb), 0.5235987755982988, 1e-12);
  }
}

TEST(So3, GeodesicAngleSymmetryAndTriangleInequality) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 1000; ++i) {
    const Mat3 a = kt::random_rotation(rng), b = kt::random_rotation(rng),
               c = kt::random_rotation(rng);
    const double ab = so3::geodesic_angle(a, b);
    EXPECT_NEAR(ab, so3::geodesic_angle(b, a), 1e-12);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, kPi);
    EXPECT_LE(so3::geodesic_angle(a, c), ab + so3::geodesic_angle(b, c) + 1e-9);
  }
}

TEST(So3, AngularVelocityConstantSpin) {
  const double w0 = 1.7;
  for (double t : {0.0, 0.4, 2.0}) {
    const Mat3 r = so3::rotation_about(Vec3::UnitZ(), w0 * t);
    const Mat3 rd = r * so3::hat<double>(Vec3::UnitZ()) * w0;
    const auto res = so3::angular_velocity(r, rd);
    EXPECT_TRUE(res.omega.isApprox(Vec3(0, 0, w0), 1e-14));
    EXPECT_TRUE(res.consistent());
  }
  EXPECT_EQ(so3::angular_velocity(Mat3::Identity(), Mat3::Zero()).omega, Vec3::Zero());
}

TEST(So3, AngularVelocityMatchesFiniteDifferences) {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> uni(-2.0, 2.0);
  const double h = 1e-5;
  for (int i = 0; i < 1000; ++i) {
    const SmoothRotation traj{kt::random_rotation(rng), kt::random_rotation(rng), uni(rng),
                              uni(rng)};
    const double t = uni(rng);
    const auto res = so3::angular_velocity(traj.at(t), traj.rate(t));
    const Vec3 fd = so3::log_map(traj.at(t - h).transpose() * traj.at(t + h)) / (2.0 * h);
    EXPECT_LT((res.omega - fd).norm(), 1e-5);
    EXPECT_LT(res.symmetric_residual, 1e-12);
  }
}

TEST(So3, AngularVelocityIsBodyFrameEquivariant) {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 100; ++i) {
    const SmoothRotation traj{kt::random_rotation(rng), kt::random_rotation(rng), 0.8, -1.1};
    const Mat3 c = kt::random_rotation(rng);
    const auto a = so3::angular_velocity(traj.at(0.3), traj.rate(0.3));
    const auto b = so3::angular_velocity(c * traj.at(0.3), c * traj.rate(0.3));
    EXPECT_LT((a.omega - b.omega).norm(), 1e-12);
  }
}

TEST(So3, AngularVelocityFlagsInconsistentRate) {
  const auto res = so3::angular_velocity(Mat3::Identity(), Mat3::Identity() * 0.01);
  EXPECT_FALSE(res.consistent());
  EXPECT_NEAR(res.symmetric_residual, std::sqrt(3.0) * 0.01, 1e-15);
}

TEST(So3, ExpLogAndRightJacobian) {
  std::mt19937_64 rng(37);
  for (int i = 0; i < 200; ++i) {
    const Vec3 r = kt::random_vec3(rng, i < 50 ? 1e-4 : 1.0);
    if (r.norm() > 3.0) continue;
    const Mat3 rot = so3::exp_map<double>(r);
    EXPECT_TRUE(so3::is_rotation(rot, 1e-12));
    EXPECT_LT((so3::log_map(rot) - r).norm(), 1e-9);
    // d/dt exp(r + t v) at t = 0 equals R [Jr v]x
    const Vec3 v = kt::random_vec3(rng);
    const double h = 1e-6;
    const Mat3 fd = (so3::exp_map<double>(Vec3(r + h * v)) - so3::exp_map<double>(Vec3(r - h * v))) / (2 * h);
    const Mat3 an = rot * so3::hat<double>(Vec3(so3::right_jacobian<double>(r) * v));
    EXPECT_LT((fd - an).norm(), 1e-7);
  }
}
