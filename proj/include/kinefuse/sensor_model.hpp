#pragma once

// Uncalibrated IMU and phone-gyroscope models.
//
// Attitude model: R_nn'(t) R_n's(t) R_sb ~ R_nb(t), where R_nn' is the
// heading drift of the sensor's home frame and R_sb maps segment to sensor
// coordinates. A sensor gyro therefore reads w_s = R_sb w_b.

#include "kinefuse/errors.hpp"
#include "kinefuse/so3.hpp"

#include <array>
#include <string>
#include <vector>

namespace kinefuse {

inline constexpr double kMaxTimeOffset = 0.5;
inline constexpr double kTimeMargin = 0.5;

struct SensorStream {
  std::string id;
  std::string segment;
  double attitude_rate = 55.0;
  double gyro_rate = 562.5;
  std::vector<double> att_t;
  std::vector<Vec4> att_q;   // R_n's as (w, x, y, z)
  std::vector<Mat3> att_r;   // same, as matrices
  std::vector<double> gyro_t;
  std::vector<Vec3> gyro;    // rad/s, sensor frame
};

struct PhoneGyroStream {
  double rate = 100.0;
  std::vector<double> t;
  std::vector<Vec3> gyro;  // rad/s, camera frame
  bool empty() const { return t.empty(); }
};

/// Learned calibration of one IMU. Quaternions are stored raw and
/// renormalized after every optimizer update.
struct ImuCalibration {
  Vec4 q_sb = Vec4(1, 0, 0, 0);
  std::array<Vec4, 3> knots{Vec4(1, 0, 0, 0), Vec4(1, 0, 0, 0), Vec4(1, 0, 0, 0)};
  double delta = 0.0;

  Mat3 r_sb() const { return so3::quat_to_matrix_raw<double>(q_sb); }
  Mat3 drift(double t, double duration) const {
    return so3::piecewise_heading_raw<double>(knots[0], knots[1], knots[2], t, duration);
  }
  void normalize() {
    q_sb.normalize();
    for (auto& k : knots) k.normalize();
  }
};

struct SensorCalibration {
  std::vector<ImuCalibration> imus;
  double phone_delta = 0.0;
};

/// The sensor's claim about its segment's global orientation at recording
/// time t: R_nn'(t) R_n's R_sb.
inline Mat3 predicted_attitude(const ImuCalibration& cal, const Mat3& reading, double t, double duration) {
  return cal.drift(t, duration) * reading * cal.r_sb();
}

/// Sensor-frame gyro reading implied by a segment trajectory.
inline Vec3 predicted_sensor_gyro(const ImuCalibration& cal, const Mat3& r_nb, const Mat3& rdot_nb) {
  return cal.r_sb() * so3::angular_velocity(r_nb, rdot_nb).omega;
}

inline Vec3 predicted_phone_gyro(const Mat3& r_nc, const Mat3& rdot_nc) {
  return so3::angular_velocity(r_nc, rdot_nc).omega;
}

/// Stream clock to recording clock.
inline double resolve_time(double stream_t, double delta) {
  if (std::abs(delta) > kMaxTimeOffset) throw std::invalid_argument("time offset beyond 0.5 s");
  return stream_t + delta;
}

/// Resolved samples outside [-0.5, T + 0.5] s are excluded from batches.
inline bool in_recording_window(double t, double duration) {
  return t >= -kTimeMargin && t <= duration + kTimeMargin;
}

}  // namespace kinefuse
