#pragma once

// Rotation algebra used throughout kinefuse.
//
// Conventions: quaternions are (w, x, y, z) with Hamilton product; rotation
// matrices act on column vectors; R_ab maps coordinates in frame b to frame a.
// Angular velocities are body-frame unless stated otherwise.
//
// Most kernels are templated on the scalar so they can be evaluated with
// forward-mode jets (see autodiff.hpp) inside the optimizer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kinefuse {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

template <typename T>
using Vec3T = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Vec4T = Eigen::Matrix<T, 4, 1>;
template <typename T>
using Mat3T = Eigen::Matrix<T, 3, 3>;

namespace so3 {

inline constexpr double kPi = 3.14159265358979323846;

inline constexpr double deg2rad(double d) { return d * kPi / 180.0; }
inline constexpr double rad2deg(double r) { return r * 180.0 / kPi; }

template <typename T>
Mat3T<T> hat(const Vec3T<T>& v) {
  Mat3T<T> m;
  m << T(0), -v.z(), v.y(),
       v.z(), T(0), -v.x(),
       -v.y(), v.x(), T(0);
  return m;
}

template <typename T>
Vec3T<T> vee(const Mat3T<T>& m) {
  return Vec3T<T>(m(2, 1), m(0, 2), m(1, 0));
}

/// vee of the skew-symmetric part, (M - M^T) / 2.
template <typename T>
Vec3T<T> vee_skew(const Mat3T<T>& m) {
  return Vec3T<T>((m(2, 1) - m(1, 2)) * 0.5, (m(0, 2) - m(2, 0)) * 0.5,
                  (m(1, 0) - m(0, 1)) * 0.5);
}

// ---------------------------------------------------------------------------
// Quaternions

/// Rotation matrix of a raw 4-parameter quaternion. The input is normalized
/// first, so this is the map used for optimized quaternion parameters.
template <typename T>
Mat3T<T> quat_to_matrix_raw(const Vec4T<T>& q_raw) {
  using std::sqrt;
  const T n2 = q_raw.squaredNorm();
  const T s = T(2) / n2;
  const T w = q_raw(0), x = q_raw(1), y = q_raw(2), z = q_raw(3);
  Mat3T<T> r;
  r(0, 0) = T(1) - s * (y * y + z * z);
  r(0, 1) = s * (x * y - w * z);
  r(0, 2) = s * (x * z + w * y);
  r(1, 0) = s * (x * y + w * z);
  r(1, 1) = T(1) - s * (x * x + z * z);
  r(1, 2) = s * (y * z - w * x);
  r(2, 0) = s * (x * z - w * y);
  r(2, 1) = s * (y * z + w * x);
  r(2, 2) = T(1) - s * (x * x + y * y);
  return r;
}

template <typename T>
Vec4T<T> quat_multiply(const Vec4T<T>& a, const Vec4T<T>& b) {
  return Vec4T<T>(a(0) * b(0) - a(1) * b(1) - a(2) * b(2) - a(3) * b(3),
                  a(0) * b(1) + a(1) * b(0) + a(2) * b(3) - a(3) * b(2),
                  a(0) * b(2) - a(1) * b(3) + a(2) * b(0) + a(3) * b(1),
                  a(0) * b(3) + a(1) * b(2) - a(2) * b(1) + a(3) * b(0));
}

/// Unit quaternion value type. Inputs within 1e-3 of unit norm are normalized
/// silently; anything further off is rejected.
class UnitQuaternion {
 public:
  UnitQuaternion() = default;

  UnitQuaternion(double w, double x, double y, double z) : q_(w, x, y, z) {
    const double n = q_.norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-3) {
      throw std::invalid_argument("UnitQuaternion: norm " + std::to_string(n) +
                                  " is not within 1e-3 of 1");
    }
    q_ /= n;
  }

  explicit UnitQuaternion(const Vec4& wxyz)
      : UnitQuaternion(wxyz(0), wxyz(1), wxyz(2), wxyz(3)) {}

  static UnitQuaternion identity() { return {}; }

  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized();
    const double h = 0.5 * angle;
    return UnitQuaternion(std::cos(h), std::sin(h) * a.x(), std::sin(h) * a.y(),
                          std::sin(h) * a.z());
  }

  /// Shepperd's method; result canonicalized to w >= 0.
  static UnitQuaternion from_matrix(const Mat3& r) {
    const double tr = r.trace();
    Vec4 q;
    if (tr > r(0, 0) && tr > r(1, 1) && tr > r(2, 2)) {
      const double s = 2.0 * std::sqrt(1.0 + tr);
      q << 0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s,
          (r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
      const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
      q << (r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s,
          (r(0, 2) + r(2, 0)) / s;
    } else if (r(1, 1) > r(2, 2)) {
      const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
      q << (r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s,
          (r(1, 2) + r(2, 1)) / s;
    } else {
      const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
      q << (r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s,
          (r(1, 2) + r(2, 1)) / s, 0.25 * s;
    }
    UnitQuaternion out;
    out.q_ = q.normalized();
    return out.canonical();
  }

  double w() const { return q_(0); }
  double x() const { return q_(1); }
  double y() const { return q_(2); }
  double z() const { return q_(3); }
  const Vec4& coeffs() const { return q_; }

  UnitQuaternion canonical() const {
    UnitQuaternion out = *this;
    if (out.q_(0) < 0.0) out.q_ = -out.q_;
    return out;
  }
  UnitQuaternion operator-() const {
    UnitQuaternion out = *this;
    out.q_ = -out.q_;
    return out;
  }
  UnitQuaternion conjugate() const {
    UnitQuaternion out = *this;
    out.q_.tail<3>() = -out.q_.tail<3>();
    return out;
  }
  UnitQuaternion operator*(const UnitQuaternion& o) const {
    UnitQuaternion out;
    out.q_ = quat_multiply<double>(q_, o.q_).normalized();
    return out;
  }
  double dot(const UnitQuaternion& o) const { return q_.dot(o.q_); }

 private:
  Vec4 q_{1.0, 0.0, 0.0, 0.0};
};

inline Mat3 quat_to_matrix(const UnitQuaternion& q) {
  return quat_to_matrix_raw<double>(q.coeffs());
}

inline UnitQuaternion matrix_to_quat(const Mat3& r) {
  return UnitQuaternion::from_matrix(r);
}

// ---------------------------------------------------------------------------
// Exponential coordinates

/// exp([r]x) via Rodrigues, with series expansions near the identity so that
/// jets stay finite at r = 0.
template <typename T>
Mat3T<T> exp_map(const Vec3T<T>& r) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T th2 = r.squaredNorm();
  T a, b;  // sin(th)/th, (1 - cos th)/th^2
  if (th2 < T(1e-4)) {
    a = T(1) - th2 / T(6) + th2 * th2 / T(120);
    b = T(0.5) - th2 / T(24) + th2 * th2 / T(720);
  } else {
    const T th = sqrt(th2);
    a = sin(th) / th;
    b = (T(1) - cos(th)) / th2;
  }
  const Mat3T<T> k = hat<T>(r);
  return Mat3T<T>::Identity() + a * k + b * (k * k);
}

/// Right Jacobian of SO(3): body angular velocity of exp(r(t)) is Jr(r) r'.
template <typename T>
Mat3T<T> right_jacobian(const Vec3T<T>& r) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T th2 = r.squaredNorm();
  T b, c;  // (1 - cos th)/th^2, (th - sin th)/th^3
  if (th2 < T(1e-4)) {
    b = T(0.5) - th2 / T(24) + th2 * th2 / T(720);
    c = T(1) / T(6) - th2 / T(120) + th2 * th2 / T(5040);
  } else {
    const T th = sqrt(th2);
    b = (T(1) - cos(th)) / th2;
    c = (th - sin(th)) / (th2 * th);
  }
  const Mat3T<T> k = hat<T>(r);
  return Mat3T<T>::Identity() - b * k + c * (k * k);
}

/// Rotation about a unit axis.
template <typename T>
Mat3T<T> axis_rotation(const Vec3& axis, const T& angle) {
  using std::cos;
  using std::sin;
  const Mat3T<T> k = hat<double>(axis).template cast<T>();
  return Mat3T<T>::Identity() + sin(angle) * k + (T(1) - cos(angle)) * (k * k);
}

inline Mat3 rotation_about(const Vec3& axis, double angle) {
  return axis_rotation<double>(axis.normalized(), angle);
}

/// Inverse of exp_map for angles in [0, pi).
inline Vec3 log_map(const Mat3& r) {
  const Vec3 v = vee_skew<double>(r);
  const double s = v.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  const double th = std::atan2(s, c);
  if (s < 1e-7) {
    if (c > 0.0) return v * (1.0 + s * s / 6.0);
    // Near pi: recover the axis from the symmetric part.
    const Mat3 b = 0.5 * (r + Mat3::Identity());
    int i = 0;
    b.diagonal().maxCoeff(&i);
    Vec3 axis = b.col(i) / std::sqrt(std::max(b(i, i), 1e-300));
    if (axis.dot(v) < 0.0) axis = -axis;
    return th * axis.normalized();
  }
  return v * (th / s);
}

/// Rotation angle of E and its squared value, stable at the identity for jets.
template <typename T>
T rotation_angle_squared(const Mat3T<T>& e) {
  using std::atan2;
  using std::sqrt;
  const Vec3T<T> v = vee_skew<T>(e);
  const T s2 = v.squaredNorm();
  const T c = (e.trace() - T(1)) * 0.5;
  if (s2 < T(1e-14) && c > T(0)) {
    // th = asin(s) ~ s + s^3/6, so th^2 ~ s^2 + s^4/3
    return s2 + s2 * s2 / T(3);
  }
  const T th = atan2(sqrt(s2), c);
  return th * th;
}

// ---------------------------------------------------------------------------
// SLERP and the three-knot heading drift

/// Shortest-arc SLERP on raw (unnormalized) quaternion parameters. Falls back
/// to normalized linear interpolation when the arc is below 1e-4 rad in
/// quaternion space. No antipodal check; see slerp() for the checked API.
template <typename T>
Vec4T<T> slerp_raw(const Vec4T<T>& a_raw, const Vec4T<T>& b_raw, const T& u) {
  using std::atan2;
  using std::sin;
  using std::sqrt;
  const Vec4T<T> a = a_raw / sqrt(a_raw.squaredNorm());
  Vec4T<T> b = b_raw / sqrt(b_raw.squaredNorm());
  if (a.dot(b) < T(0)) b = -b;
  const T dm2 = (b - a).squaredNorm();
  const T dp2 = (b + a).squaredNorm();
  // half-chord small => arc small; compare squared quantities to avoid sqrt(0)
  if (dm2 < T(4e-8) * dp2) {
    const Vec4T<T> l = (T(1) - u) * a + u * b;
    return l / sqrt(l.squaredNorm());
  }
  const T omega = T(2) * atan2(sqrt(dm2), sqrt(dp2));
  const T so = sin(omega);
  return (sin((T(1) - u) * omega) / so) * a + (sin(u * omega) / so) * b;
}

inline UnitQuaternion slerp(const UnitQuaternion& q0, const UnitQuaternion& q1,
                            double u) {
  if (!(u >= 0.0 && u <= 1.0)) {
    throw std::invalid_argument("slerp: u must lie in [0, 1]");
  }
  // |dot| ~ 0 means the relative rotation is ~pi: both arcs have equal length.
  if (std::abs(q0.dot(q1)) < 1e-12) {
    throw std::domain_error("slerp: inputs are half a turn apart, arc undefined");
  }
  if (u == 0.0) return q0;
  if (u == 1.0) return q0.dot(q1) < 0.0 ? -q1 : q1;
  return UnitQuaternion(slerp_raw<double>(q0.coeffs(), q1.coeffs(), u));
}

/// Heading drift R_nn'(t): piecewise SLERP through knots at 0, T/2 and T.
/// Times outside [0, T] clamp to the nearest knot.
template <typename T>
Mat3T<T> piecewise_heading_raw(const Vec4T<T>& k0, const Vec4T<T>& k1,
                               const Vec4T<T>& k2, const T& t, double duration) {
  const double half = 0.5 * duration;
  T tc = t;
  if (tc < T(0)) tc = T(0);
  if (tc > T(duration)) tc = T(duration);
  if (tc <= T(half)) {
    return quat_to_matrix_raw<T>(slerp_raw<T>(k0, k1, tc / half));
  }
  return quat_to_matrix_raw<T>(slerp_raw<T>(k1, k2, (tc - half) / half));
}

inline Mat3 piecewise_heading(const UnitQuaternion& q_start,
                              const UnitQuaternion& q_mid,
                              const UnitQuaternion& q_end, double t,
                              double duration) {
  if (!(duration > 0.0)) {
    throw std::invalid_argument("piecewise_heading: duration must be positive");
  }
  const double half = 0.5 * duration;
  const double tc = std::clamp(t, 0.0, duration);
  if (tc == 0.0) return quat_to_matrix(q_start);
  if (tc == half) return quat_to_matrix(q_mid);
  if (tc == duration) return quat_to_matrix(q_end);
  if (tc < half) return quat_to_matrix(slerp(q_start, q_mid, tc / half));
  return quat_to_matrix(slerp(q_mid, q_end, (tc - half) / half));
}

// ---------------------------------------------------------------------------
// Distances and rates

/// Geodesic distance on SO(3): the rotation angle of Ra Rb^T, in [0, pi].
/// Evaluated as atan2(|vee skew|, (tr - 1)/2), which equals the clamped
/// arccos form but stays accurate near 0 and pi.
inline double geodesic_angle(const Mat3& ra, const Mat3& rb) {
  const Mat3 e = ra * rb.transpose();
  const double s = vee_skew<double>(e).norm();
  const double c = std::clamp(0.5 * (e.trace() - 1.0), -1.0, 1.0);
  return std::atan2(s, c);
}

struct AngularVelocityResult {
  Vec3 omega = Vec3::Zero();
  /// Frobenius norm of the symmetric part of R^T Rdot; large values mean
  /// Rdot is not a derivative of R.
  double symmetric_residual = 0.0;
  bool consistent() const { return symmetric_residual <= 1e-3; }
};

/// Body-frame angular velocity: omega = vee(R^T Rdot), after projecting the
/// product onto skew-symmetric matrices.
inline AngularVelocityResult angular_velocity(const Mat3& r, const Mat3& rdot) {
  const Mat3 m = r.transpose() * rdot;
  AngularVelocityResult out;
  out.omega = vee_skew<double>(m);
  out.symmetric_residual = (0.5 * (m + m.transpose())).norm();
  return out;
}

inline bool is_rotation(const Mat3& r, double tol = 1e-9) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

/// Closest rotation in the Frobenius sense (polar projection via SVD).
inline Mat3 project_to_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1 : 1;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

}  // namespace so3
}  // namespace kinefuse
