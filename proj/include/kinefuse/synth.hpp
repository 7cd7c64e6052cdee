#pragma once

// Ground-truth recording simulator.
//
// Joint angles are sums of sinusoids at the gait frequency, the pelvis walks
// across the view of a handheld camera that pans to follow it, and IMUs
// report through known calibrations, heading drift and clock offsets. Every
// trajectory is analytic, so true rates are exact.

#include "kinefuse/body_model.hpp"
#include "kinefuse/camera.hpp"
#include "kinefuse/recording.hpp"
#include "kinefuse/sensor_model.hpp"
#include "kinefuse/so3.hpp"

#include "json.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace kinefuse {

inline constexpr const char* kScenarioSchema = "kinefuse.scenario/1";
inline constexpr const char* kTruthSchema = "kinefuse.truth/1";
inline constexpr double kOccludedSigmaMm = 1e9;

struct DofMotion {
  double mean_deg = 0.0;
  double amplitude_deg = 0.0;
  double phase_rad = 0.0;
  double harmonic2_deg = 0.0;
  double phase2_rad = 0.0;
  double multiple = 1.0;  // frequency as a multiple of the gait frequency
};

struct SensorSpec {
  std::string id;
  std::string segment;
  Vec3 r_sb_axis = Vec3::UnitZ();
  double r_sb_angle_deg = 0.0;
  double home_yaw_deg = 0.0;
  Vec3 drift_yaw_deg = Vec3(0.0, 3.0, 5.0);
  double time_offset_s = 0.0;

  ImuCalibration calibration() const {
    ImuCalibration c;
    c.q_sb = so3::UnitQuaternion::from_axis_angle(r_sb_axis, so3::deg2rad(r_sb_angle_deg)).canonical().coeffs();
    for (int k = 0; k < 3; ++k) {
      c.knots[k] = so3::UnitQuaternion::from_axis_angle(Vec3::UnitZ(), so3::deg2rad(home_yaw_deg + drift_yaw_deg(k)))
                       .canonical()
                       .coeffs();
    }
    c.delta = time_offset_s;
    return c;
  }
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  double duration = 10.0;
  double gait_hz = 1.0;
  std::map<std::string, DofMotion> dofs;

  // Pelvis: camera-relative start, walking velocity, vertical bob and
  // exponential-coordinate oscillations around the walking heading.
  Vec3 root_start = Vec3(4.0, -1.5, -0.1);
  Vec3 root_velocity = Vec3(0.0, 0.3, 0.0);
  double bob_m = 0.02;
  double heading_deg = 90.0;
  double roll_deg = 3.0, pitch_deg = 2.0, yaw_deg = 5.0;

  // Camera pans to follow the pelvis (gain) with handheld wobble.
  double pan_follow = 1.0;
  double pitch_mean_deg = 2.0;
  double pitch_wobble_deg = 1.5, pitch_wobble_hz = 0.7;
  double roll_wobble_deg = 1.0, roll_wobble_hz = 0.5;

  CameraIntrinsics intrinsics;
  double keypoint_hz = 30.0, attitude_hz = 55.0, gyro_hz = 562.5, phone_hz = 100.0, reference_hz = 29.0;

  double keypoint_sigma_mm = 0.0;
  double pixel_sigma_px = 0.0;
  double attitude_noise_deg = 1.0;
  double gyro_noise_dps = 0.5;
  double phone_gyro_noise_dps = 0.5;

  std::map<std::string, double> subject_scale;  // beta_s entries by name
  std::vector<SensorSpec> sensors;
  double phone_time_offset_s = 0.0;

  bool occlusion = false;
  double occlusion_start = 0.25, occlusion_end = 0.75;
  std::vector<std::string> occluded_segments;

  nlohmann::json to_json() const;
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
  void validate(const KinematicTree& tree) const;

  static ScenarioConfig defaults();
  static ScenarioConfig from_json(const nlohmann::json& j);
  static ScenarioConfig from_file(const std::string& path);
};

inline ScenarioConfig ScenarioConfig::defaults() {
  ScenarioConfig c;
  const double pi = so3::kPi;
  auto& d = c.dofs;
  d["lumbar_flexion"] = {3, 2, 0, 0, 0, 2};
  d["lumbar_bending"] = {0, 3, 0, 0, 0, 1};
  d["lumbar_rotation"] = {0, 4, pi, 0, 0, 1};
  d["neck_flexion"] = {2, 2, 0.5, 0, 0, 2};
  for (int side = 0; side < 2; ++side) {
    const std::string p = side == 0 ? "l_" : "r_";
    const double s = side == 0 ? 0.0 : pi;
    d[p + "hip_flexion"] = {10, 25, s, 0, 0, 1};
    d[p + "hip_adduction"] = {0, 4, 1.0 + s, 0, 0, 1};
    d[p + "hip_rotation"] = {0, 5, 0.3 + s, 0, 0, 1};
    d[p + "knee_flexion"] = {30, 25, -1.2 + s, 8, 0.4 + 2 * s, 1};
    d[p + "ankle_dorsiflexion"] = {0, 10, 0.8 + s, 4, 0.0 + 2 * s, 1};
  }
  c.subject_scale = {{"overall", 0.04}, {"l_thigh", 0.03}, {"r_thigh", 0.03}, {"torso", -0.03}};
  SensorSpec a;
  a.id = "imu_l_thigh";
  a.segment = "l_thigh";
  a.r_sb_axis = Vec3(0.2, 0.3, 1.0).normalized();
  a.r_sb_angle_deg = 100.0;
  a.home_yaw_deg = 40.0;
  a.time_offset_s = 0.2;
  SensorSpec b;
  b.id = "imu_l_shank";
  b.segment = "l_shank";
  b.r_sb_axis = Vec3(1.0, -0.4, 0.3).normalized();
  b.r_sb_angle_deg = 70.0;
  b.home_yaw_deg = -25.0;
  b.time_offset_s = 0.2;
  c.sensors = {a, b};
  c.occluded_segments = {"l_thigh", "l_shank", "l_foot", "l_toes"};
  return c;
}

namespace detail {

inline nlohmann::json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Vec3 vec3_from(const nlohmann::json& j, const char* what) {
  return fixed_from_json<3>(j, what);
}

}  // namespace detail

inline nlohmann::json ScenarioConfig::to_json() const {
  nlohmann::json j;
  j["schema"] = kScenarioSchema;
  j["seed"] = seed;
  j["duration_s"] = duration;
  j["gait_hz"] = gait_hz;
  for (const auto& [name, m] : dofs) {
    j["dofs"][name] = {{"mean_deg", m.mean_deg}, {"amplitude_deg", m.amplitude_deg}, {"phase_rad", m.phase_rad},
                       {"harmonic2_deg", m.harmonic2_deg}, {"phase2_rad", m.phase2_rad}, {"multiple", m.multiple}};
  }
  j["root"] = {{"start_m", detail::vec3_json(root_start)}, {"velocity_mps", detail::vec3_json(root_velocity)},
               {"bob_m", bob_m}, {"heading_deg", heading_deg}, {"roll_deg", roll_deg},
               {"pitch_deg", pitch_deg}, {"yaw_deg", yaw_deg}};
  j["camera"] = {{"pan_follow", pan_follow}, {"pitch_mean_deg", pitch_mean_deg},
                 {"pitch_wobble_deg", pitch_wobble_deg}, {"pitch_wobble_hz", pitch_wobble_hz},
                 {"roll_wobble_deg", roll_wobble_deg}, {"roll_wobble_hz", roll_wobble_hz}};
  j["intrinsics"] = kinefuse::to_json(intrinsics);
  j["rates_hz"] = {{"keypoints", keypoint_hz}, {"attitude", attitude_hz}, {"gyro", gyro_hz},
                   {"phone_gyro", phone_hz}, {"reference", reference_hz}};
  j["noise"] = {{"keypoint_mm", keypoint_sigma_mm}, {"pixel_px", pixel_sigma_px},
                {"attitude_deg", attitude_noise_deg}, {"gyro_dps", gyro_noise_dps},
                {"phone_gyro_dps", phone_gyro_noise_dps}};
  j["subject_scale"] = nlohmann::json::object();
  for (const auto& [k, v] : subject_scale) j["subject_scale"][k] = v;
  j["sensors"] = nlohmann::json::array();
  for (const auto& s : sensors) {
    j["sensors"].push_back({{"id", s.id}, {"segment", s.segment}, {"r_sb_axis", detail::vec3_json(s.r_sb_axis)},
                            {"r_sb_angle_deg", s.r_sb_angle_deg}, {"home_yaw_deg", s.home_yaw_deg},
                            {"drift_yaw_deg", detail::vec3_json(s.drift_yaw_deg)},
                            {"time_offset_s", s.time_offset_s}});
  }
  j["phone_time_offset_s"] = phone_time_offset_s;
  if (occlusion) {
    j["occlusion"] = {{"start", occlusion_start}, {"end", occlusion_end}, {"segments", occluded_segments}};
  } else {
    j["occlusion"] = nullptr;
  }
  return j;
}

/// Reads a scenario; absent fields keep their defaults.
inline ScenarioConfig ScenarioConfig::from_json(const nlohmann::json& j) {
  ScenarioConfig c = defaults();
  try {
    if (j.contains("schema") && j.at("schema").get<std::string>() != kScenarioSchema) {
      throw ConfigError(std::string("scenario: schema must be '") + kScenarioSchema + "'");
    }
    c.seed = j.value("seed", c.seed);
    c.duration = j.value("duration_s", c.duration);
    c.gait_hz = j.value("gait_hz", c.gait_hz);
    if (j.contains("dofs")) {
      for (const auto& [name, m] : j.at("dofs").items()) {
        DofMotion d = c.dofs.count(name) ? c.dofs[name] : DofMotion{};
        d.mean_deg = m.value("mean_deg", d.mean_deg);
        d.amplitude_deg = m.value("amplitude_deg", d.amplitude_deg);
        d.phase_rad = m.value("phase_rad", d.phase_rad);
        d.harmonic2_deg = m.value("harmonic2_deg", d.harmonic2_deg);
        d.phase2_rad = m.value("phase2_rad", d.phase2_rad);
        d.multiple = m.value("multiple", d.multiple);
        c.dofs[name] = d;
      }
    }
    if (j.contains("root")) {
      const auto& r = j.at("root");
      if (r.contains("start_m")) c.root_start = detail::vec3_from(r.at("start_m"), "root.start_m");
      if (r.contains("velocity_mps")) c.root_velocity = detail::vec3_from(r.at("velocity_mps"), "root.velocity_mps");
      c.bob_m = r.value("bob_m", c.bob_m);
      c.heading_deg = r.value("heading_deg", c.heading_deg);
      c.roll_deg = r.value("roll_deg", c.roll_deg);
      c.pitch_deg = r.value("pitch_deg", c.pitch_deg);
      c.yaw_deg = r.value("yaw_deg", c.yaw_deg);
    }
    if (j.contains("camera")) {
      const auto& m = j.at("camera");
      c.pan_follow = m.value("pan_follow", c.pan_follow);
      c.pitch_mean_deg = m.value("pitch_mean_deg", c.pitch_mean_deg);
      c.pitch_wobble_deg = m.value("pitch_wobble_deg", c.pitch_wobble_deg);
      c.pitch_wobble_hz = m.value("pitch_wobble_hz", c.pitch_wobble_hz);
      c.roll_wobble_deg = m.value("roll_wobble_deg", c.roll_wobble_deg);
      c.roll_wobble_hz = m.value("roll_wobble_hz", c.roll_wobble_hz);
    }
    if (j.contains("intrinsics")) c.intrinsics = intrinsics_from_json(j.at("intrinsics"));
    if (j.contains("rates_hz")) {
      const auto& r = j.at("rates_hz");
      c.keypoint_hz = r.value("keypoints", c.keypoint_hz);
      c.attitude_hz = r.value("attitude", c.attitude_hz);
      c.gyro_hz = r.value("gyro", c.gyro_hz);
      c.phone_hz = r.value("phone_gyro", c.phone_hz);
      c.reference_hz = r.value("reference", c.reference_hz);
    }
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      c.keypoint_sigma_mm = n.value("keypoint_mm", c.keypoint_sigma_mm);
      c.pixel_sigma_px = n.value("pixel_px", c.pixel_sigma_px);
      c.attitude_noise_deg = n.value("attitude_deg", c.attitude_noise_deg);
      c.gyro_noise_dps = n.value("gyro_dps", c.gyro_noise_dps);
      c.phone_gyro_noise_dps = n.value("phone_gyro_dps", c.phone_gyro_noise_dps);
    }
    if (j.contains("subject_scale")) {
      c.subject_scale.clear();
      for (const auto& [k, v] : j.at("subject_scale").items()) c.subject_scale[k] = v.get<double>();
    }
    if (j.contains("sensors")) {
      c.sensors.clear();
      for (const auto& s : j.at("sensors")) {
        SensorSpec sp;
        sp.id = s.at("id").get<std::string>();
        sp.segment = s.at("segment").get<std::string>();
        if (s.contains("r_sb_axis")) sp.r_sb_axis = detail::vec3_from(s.at("r_sb_axis"), "r_sb_axis");
        if (sp.r_sb_axis.norm() < 1e-9) throw ConfigError("sensor '" + sp.id + "': zero r_sb_axis");
        sp.r_sb_angle_deg = s.value("r_sb_angle_deg", 0.0);
        sp.home_yaw_deg = s.value("home_yaw_deg", 0.0);
        if (s.contains("drift_yaw_deg")) sp.drift_yaw_deg = detail::vec3_from(s.at("drift_yaw_deg"), "drift_yaw_deg");
        sp.time_offset_s = s.value("time_offset_s", 0.0);
        c.sensors.push_back(sp);
      }
    }
    c.phone_time_offset_s = j.value("phone_time_offset_s", c.phone_time_offset_s);
    if (j.contains("occlusion") && !j.at("occlusion").is_null()) {
      const auto& o = j.at("occlusion");
      c.occlusion = true;
      c.occlusion_start = o.value("start", c.occlusion_start);
      c.occlusion_end = o.value("end", c.occlusion_end);
      if (o.contains("segments")) c.occluded_segments = o.at("segments").get<std::vector<std::string>>();
    } else {
      c.occlusion = false;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  return c;
}

inline ScenarioConfig ScenarioConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open scenario '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scenario '" + path + "': " + e.what());
  }
  return from_json(j);
}

inline void ScenarioConfig::validate(const KinematicTree& tree) const {
  if (!(duration > 0.0)) throw ConfigError("scenario: duration must be positive");
  if (!(gait_hz >= 0.0)) throw ConfigError("scenario: gait_hz must be >= 0");
  for (double r : {keypoint_hz, attitude_hz, gyro_hz, phone_hz, reference_hz}) {
    if (!(r > 0.0)) throw ConfigError("scenario: rates must be positive");
  }
  for (double n : {keypoint_sigma_mm, pixel_sigma_px, attitude_noise_deg, gyro_noise_dps, phone_gyro_noise_dps}) {
    if (!(n >= 0.0)) throw ConfigError("scenario: noise levels must be >= 0");
  }
  if (occlusion && !(occlusion_start >= 0.0 && occlusion_start <= occlusion_end && occlusion_end <= 1.0)) {
    throw ConfigError("scenario: occlusion window must lie within [0, 1]");
  }
  const auto& names = tree.dof_names();
  for (const auto& [name, m] : dofs) {
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw ConfigError("scenario: unknown dof '" + name + "'");
    }
  }
  for (const auto& [name, v] : subject_scale) {
    const auto& sn = tree.scale_names();
    if (std::find(sn.begin(), sn.end(), name) == sn.end()) {
      throw ConfigError("scenario: unknown scale parameter '" + name + "'");
    }
  }
  for (const auto& s : sensors) {
    if (!tree.find_segment(s.segment)) throw ConfigError("scenario: sensor on unknown segment '" + s.segment + "'");
    if (std::abs(s.time_offset_s) > kMaxTimeOffset) throw ConfigError("scenario: time offset beyond 0.5 s");
  }
  for (const auto& s : occluded_segments) {
    if (!tree.find_segment(s)) throw ConfigError("scenario: occluded segment '" + s + "' unknown");
  }
  if (std::abs(phone_time_offset_s) > kMaxTimeOffset) throw ConfigError("scenario: phone offset beyond 0.5 s");
}

// ---------------------------------------------------------------------------
// Analytic ground truth

struct TruthSample {
  PoseVector theta, theta_dot;
  Mat3 r_nc, rdot_nc;
};

class GroundTruth {
 public:
  GroundTruth(ScenarioConfig cfg, KinematicTree tree) : cfg_(std::move(cfg)), tree_(std::move(tree)) {
    cfg_.validate(tree_);
    beta_ = ScaleParams::neutral(tree_);
    for (const auto& [name, v] : cfg_.subject_scale) {
      const auto& sn = tree_.scale_names();
      beta_.scale(std::find(sn.begin(), sn.end(), name) - sn.begin()) = v;
    }
    const double w0 = 2.0 * so3::kPi * cfg_.gait_hz;
    motions_.assign(static_cast<std::size_t>(tree_.dof_count()), DofMotion{});
    for (const auto& [name, m] : cfg_.dofs) motions_[tree_.primary_dof_index(name)] = m;
    omega_ = w0;
    for (const auto& s : cfg_.sensors) cal_.imus.push_back(s.calibration());
    cal_.phone_delta = cfg_.phone_time_offset_s;
  }

  const ScenarioConfig& config() const { return cfg_; }
  const KinematicTree& tree() const { return tree_; }
  const ScaleParams& beta() const { return beta_; }
  const SensorCalibration& calibration() const { return cal_; }
  double duration() const { return cfg_.duration; }

  /// Pose, pose rate and camera rotation with its rate at recording time t.
  TruthSample at(double t) const {
    TruthSample s;
    const int n = tree_.dof_count();
    s.theta = PoseVector::Zero(n);
    s.theta_dot = PoseVector::Zero(n);
    const double w = omega_;
    const auto d2r = so3::deg2rad(1.0);

    const Vec3 p = cfg_.root_start + cfg_.root_velocity * t + Vec3(0, 0, cfg_.bob_m * std::sin(2 * w * t));
    const Vec3 pd = cfg_.root_velocity + Vec3(0, 0, 2 * w * cfg_.bob_m * std::cos(2 * w * t));
    s.theta.head<3>() = p;
    s.theta_dot.head<3>() = pd;
    s.theta(3) = d2r * cfg_.roll_deg * std::sin(w * t);
    s.theta_dot(3) = d2r * cfg_.roll_deg * w * std::cos(w * t);
    s.theta(4) = d2r * cfg_.pitch_deg * std::sin(2 * w * t + so3::kPi / 2);
    s.theta_dot(4) = d2r * cfg_.pitch_deg * 2 * w * std::cos(2 * w * t + so3::kPi / 2);
    s.theta(5) = d2r * (cfg_.heading_deg + cfg_.yaw_deg * std::sin(w * t));
    s.theta_dot(5) = d2r * cfg_.yaw_deg * w * std::cos(w * t);

    for (int i = 6; i < n; ++i) {
      const DofMotion& m = motions_[i];
      const double a = m.multiple * w;
      s.theta(i) = d2r * (m.mean_deg + m.amplitude_deg * std::sin(a * t + m.phase_rad) +
                          m.harmonic2_deg * std::sin(2 * a * t + m.phase2_rad));
      s.theta_dot(i) = d2r * (m.amplitude_deg * a * std::cos(a * t + m.phase_rad) +
                              m.harmonic2_deg * 2 * a * std::cos(2 * a * t + m.phase2_rad));
    }

    // Camera: R = Rz(psi) Ry(phi) Rx(rho) C0, C0 maps camera z to world x.
    const double x = p.x(), y = p.y();
    const double psi = cfg_.pan_follow * std::atan2(y, x);
    const double psid = cfg_.pan_follow * (x * pd.y() - y * pd.x()) / (x * x + y * y);
    const double wp = 2 * so3::kPi * cfg_.pitch_wobble_hz, wr = 2 * so3::kPi * cfg_.roll_wobble_hz;
    const double phi = d2r * (cfg_.pitch_mean_deg + cfg_.pitch_wobble_deg * std::sin(wp * t));
    const double phid = d2r * cfg_.pitch_wobble_deg * wp * std::cos(wp * t);
    const double rho = d2r * cfg_.roll_wobble_deg * std::sin(wr * t);
    const double rhod = d2r * cfg_.roll_wobble_deg * wr * std::cos(wr * t);
    const Mat3 rz = so3::rotation_about(Vec3::UnitZ(), psi);
    const Mat3 ry = so3::rotation_about(Vec3::UnitY(), phi);
    const Mat3 rx = so3::rotation_about(Vec3::UnitX(), rho);
    const Mat3 c0 = camera_mount();
    s.r_nc = rz * ry * rx * c0;
    s.rdot_nc = rz * so3::hat<double>(Vec3::UnitZ()) * psid * ry * rx * c0 +
                rz * ry * so3::hat<double>(Vec3::UnitY()) * phid * rx * c0 +
                rz * ry * rx * so3::hat<double>(Vec3::UnitX()) * rhod * c0;
    return s;
  }

  /// Nominal portrait handheld mount: camera x -> -y, y -> -z, z -> x (world).
  static Mat3 camera_mount() {
    Mat3 c;
    c << 0, 0, 1, -1, 0, 0, 0, -1, 0;
    return c;
  }

 private:
  ScenarioConfig cfg_;
  KinematicTree tree_;
  ScaleParams beta_;
  SensorCalibration cal_;
  std::vector<DofMotion> motions_;
  double omega_ = 0.0;
};

// ---------------------------------------------------------------------------
// Observation rendering

namespace detail {

/// Independent noise stream per (seed, channel name).
inline std::mt19937_64 channel_rng(std::uint64_t seed, const std::string& channel) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a64(channel)), static_cast<std::uint32_t>(fnv1a64(channel) >> 32)};
  return std::mt19937_64(seq);
}

inline int sample_count(double duration, double rate) {
  return static_cast<int>(std::floor(duration * rate + 1e-9));
}

inline Vec4 canonical_quat(const Mat3& r) { return so3::matrix_to_quat(r).coeffs(); }

}  // namespace detail

inline std::vector<char> occluded_marker_mask(const ScenarioConfig& cfg, const KinematicTree& tree) {
  std::vector<char> mask(static_cast<std::size_t>(tree.marker_count()), 0);
  if (!cfg.occlusion) return mask;
  for (int m = 0; m < tree.marker_count(); ++m) {
    const auto& seg = tree.segment(tree.marker(m).segment).name;
    for (const auto& s : cfg.occluded_segments) mask[m] = mask[m] || seg == s;
  }
  return mask;
}

inline bool frame_occluded(const ScenarioConfig& cfg, double t) {
  if (!cfg.occlusion) return false;
  const double u = t / cfg.duration;
  return u >= cfg.occlusion_start && u < cfg.occlusion_end;
}

/// Keypoint frames at the video rate on the recording clock.
inline std::vector<KeypointFrame> render_observations(const GroundTruth& truth) {
  const auto& cfg = truth.config();
  const auto& tree = truth.tree();
  const int nm = tree.marker_count();
  const auto occl = occluded_marker_mask(cfg, tree);
  auto rng = detail::channel_rng(cfg.seed, "keypoints");
  std::normal_distribution<double> n01(0.0, 1.0);
  const double sk = cfg.keypoint_sigma_mm * 1e-3;
  std::vector<KeypointFrame> frames;
  const int n = detail::sample_count(cfg.duration, cfg.keypoint_hz);
  for (int k = 0; k < n; ++k) {
    KeypointFrame f;
    f.t = k / cfg.keypoint_hz;
    const auto s = truth.at(f.t);
    const auto fk = forward_kinematics(tree, truth.beta(), s.theta);
    f.p_c.resize(nm, 3);
    f.x.resize(nm, 2);
    f.sigma_mm = Eigen::VectorXd::Constant(nm, cfg.keypoint_sigma_mm);
    const bool occluded_frame = frame_occluded(cfg, f.t);
    for (int m = 0; m < nm; ++m) {
      const Vec3 pc = s.r_nc.transpose() * fk.markers[m];
      const Vec3 noise(n01(rng), n01(rng), n01(rng));
      const Vec2 pn(n01(rng), n01(rng));
      // One detection: the 2D keypoint is the projection of the noisy 3D one.
      const Vec3 detected = pc + sk * noise;
      f.p_c.row(m) = detected.transpose();
      const auto px = project(cfg.intrinsics, detected);
      if (px) {
        f.x.row(m) = (*px + cfg.pixel_sigma_px * pn).transpose();
      } else {
        f.x.row(m) = Vec2(cfg.intrinsics.cx, cfg.intrinsics.cy).transpose();
        f.sigma_mm(m) = kOccludedSigmaMm;
      }
      if (occluded_frame && occl[m]) f.sigma_mm(m) = kOccludedSigmaMm;
    }
    f.confidence.resize(nm);
    for (int m = 0; m < nm; ++m) f.confidence(m) = confidence_from_std(f.sigma_mm(m));
    frames.push_back(std::move(f));
  }
  return frames;
}

/// IMU streams and the phone gyro, each on its own clock: a sample stamped
/// tau holds the value at recording time tau + offset.
inline std::pair<std::vector<SensorStream>, PhoneGyroStream> simulate_imu(const GroundTruth& truth) {
  const auto& cfg = truth.config();
  const auto& tree = truth.tree();
  std::vector<SensorStream> out;
  const double an = so3::deg2rad(cfg.attitude_noise_deg);
  const double gn = so3::deg2rad(cfg.gyro_noise_dps);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.sensors.size(); ++i) {
    const auto& spec = cfg.sensors[i];
    const ImuCalibration& cal = truth.calibration().imus[i];
    const int seg = *tree.find_segment(spec.segment);
    const Mat3 r_sb = cal.r_sb();
    SensorStream s;
    s.id = spec.id;
    s.segment = spec.segment;
    s.attitude_rate = cfg.attitude_hz;
    s.gyro_rate = cfg.gyro_hz;
    auto rng = detail::channel_rng(cfg.seed, spec.id + "/att");
    for (int k = 0; k < detail::sample_count(cfg.duration, cfg.attitude_hz); ++k) {
      const double tau = k / cfg.attitude_hz;
      const double t = tau + cal.delta;
      const auto ts = truth.at(t);
      const auto fk = forward_kinematics(tree, truth.beta(), ts.theta);
      const Vec3 noise(n01(rng), n01(rng), n01(rng));
      const Mat3 reading = cal.drift(t, cfg.duration).transpose() * fk.orientations[seg] * r_sb.transpose() *
                           so3::exp_map<double>(Vec3(an * noise));
      s.att_t.push_back(tau);
      s.att_q.push_back(detail::canonical_quat(reading));
      s.att_r.push_back(so3::quat_to_matrix(so3::UnitQuaternion(s.att_q.back())));
    }
    rng = detail::channel_rng(cfg.seed, spec.id + "/gyro");
    for (int k = 0; k < detail::sample_count(cfg.duration, cfg.gyro_hz); ++k) {
      const double tau = k / cfg.gyro_hz;
      const auto ts = truth.at(tau + cal.delta);
      const auto om = body_angular_velocities(tree, truth.beta(), ts.theta, ts.theta_dot);
      const Vec3 noise(n01(rng), n01(rng), n01(rng));
      s.gyro_t.push_back(tau);
      s.gyro.push_back(r_sb * om[seg] + gn * noise);
    }
    out.push_back(std::move(s));
  }
  PhoneGyroStream phone;
  phone.rate = cfg.phone_hz;
  auto rng = detail::channel_rng(cfg.seed, "phone_gyro");
  const double pn = so3::deg2rad(cfg.phone_gyro_noise_dps);
  for (int k = 0; k < detail::sample_count(cfg.duration, cfg.phone_hz); ++k) {
    const double tau = k / cfg.phone_hz;
    const auto ts = truth.at(tau + cfg.phone_time_offset_s);
    const Vec3 noise(n01(rng), n01(rng), n01(rng));
    phone.t.push_back(tau);
    phone.gyro.push_back(so3::angular_velocity(ts.r_nc, ts.rdot_nc).omega + pn * noise);
  }
  return {out, phone};
}

inline Recording simulate_recording(const GroundTruth& truth) {
  Recording rec;
  rec.intrinsics = truth.config().intrinsics;
  rec.duration = truth.duration();
  rec.scenario_hash = truth.config().hash();
  rec.model_descriptor = truth.tree().descriptor();
  rec.frames = render_observations(truth);
  auto [sensors, phone] = simulate_imu(truth);
  rec.sensors = std::move(sensors);
  rec.phone = std::move(phone);
  return rec;
}

// ---------------------------------------------------------------------------
// Ground-truth sidecar (scoring only)

/// Reference samples of the true trajectory plus the true calibrations.
struct TruthRecord {
  std::uint64_t scenario_hash = 0;
  double duration = 0.0;
  ScaleParams beta;
  SensorCalibration calibration;
  std::vector<std::string> sensor_segments;
  std::vector<double> t;
  std::vector<PoseVector> theta;
  std::vector<Mat3> r_nc;
  bool occlusion = false;
  double occlusion_start = 0.0, occlusion_end = 0.0;
};

inline TruthRecord make_truth_record(const GroundTruth& truth) {
  const auto& cfg = truth.config();
  TruthRecord r;
  r.scenario_hash = cfg.hash();
  r.duration = cfg.duration;
  r.beta = truth.beta();
  r.calibration = truth.calibration();
  for (const auto& s : cfg.sensors) r.sensor_segments.push_back(s.segment);
  for (int k = 0; k < detail::sample_count(cfg.duration, cfg.reference_hz); ++k) {
    const double t = k / cfg.reference_hz;
    const auto s = truth.at(t);
    r.t.push_back(t);
    r.theta.push_back(s.theta);
    r.r_nc.push_back(s.r_nc);
  }
  r.occlusion = cfg.occlusion;
  r.occlusion_start = cfg.occlusion_start;
  r.occlusion_end = cfg.occlusion_end;
  return r;
}

inline nlohmann::json calibration_json(const SensorCalibration& cal, const std::vector<std::string>& segments) {
  nlohmann::json j;
  j["imus"] = nlohmann::json::array();
  for (std::size_t i = 0; i < cal.imus.size(); ++i) {
    const auto& c = cal.imus[i];
    nlohmann::json e{{"q_sb", detail::vec_json(c.q_sb)}, {"time_offset_s", c.delta}};
    e["knots"] = nlohmann::json::array();
    for (const auto& k : c.knots) e["knots"].push_back(detail::vec_json(k));
    if (i < segments.size()) e["segment"] = segments[i];
    j["imus"].push_back(e);
  }
  j["phone_time_offset_s"] = cal.phone_delta;
  return j;
}

inline SensorCalibration calibration_from_json(const nlohmann::json& j) {
  SensorCalibration cal;
  for (const auto& e : j.at("imus")) {
    ImuCalibration c;
    c.q_sb = detail::fixed_from_json<4>(e.at("q_sb"), "q_sb");
    for (int k = 0; k < 3; ++k) c.knots[k] = detail::fixed_from_json<4>(e.at("knots").at(k), "knots");
    c.delta = e.at("time_offset_s").get<double>();
    cal.imus.push_back(c);
  }
  cal.phone_delta = j.value("phone_time_offset_s", 0.0);
  return cal;
}

inline void write_truth(const std::filesystem::path& p, const TruthRecord& r) {
  nlohmann::json j;
  j["schema"] = kTruthSchema;
  j["scenario_hash"] = hash_hex(r.scenario_hash);
  j["duration_s"] = r.duration;
  j["scale"] = detail::vec_json(r.beta.scale);
  j["calibration"] = calibration_json(r.calibration, r.sensor_segments);
  j["occlusion"] = r.occlusion ? nlohmann::json{{"start", r.occlusion_start}, {"end", r.occlusion_end}}
                               : nlohmann::json(nullptr);
  auto ref = nlohmann::json::object();
  ref["t"] = r.t;
  ref["theta"] = nlohmann::json::array();
  ref["q_nc"] = nlohmann::json::array();
  for (std::size_t k = 0; k < r.t.size(); ++k) {
    ref["theta"].push_back(detail::vec_json(r.theta[k]));
    ref["q_nc"].push_back(detail::vec_json(detail::canonical_quat(r.r_nc[k])));
  }
  j["reference"] = ref;
  auto os = detail::open_out(p);
  os << j.dump() << '\n';
}

inline TruthRecord read_truth(const std::filesystem::path& p, const KinematicTree& tree) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open ground truth '" + p.string() + "'");
  TruthRecord r;
  try {
    nlohmann::json j;
    is >> j;
    if (j.value("schema", std::string()) != kTruthSchema) throw ConfigError("ground truth: wrong schema");
    r.scenario_hash = parse_hash_hex(j.at("scenario_hash").get<std::string>());
    r.duration = j.at("duration_s").get<double>();
    r.beta = ScaleParams::neutral(tree);
    const auto sc = j.at("scale").get<std::vector<double>>();
    if (static_cast<int>(sc.size()) != tree.scale_count()) throw ConfigError("ground truth: scale size mismatch");
    for (int i = 0; i < tree.scale_count(); ++i) r.beta.scale(i) = sc[i];
    r.calibration = calibration_from_json(j.at("calibration"));
    for (const auto& e : j.at("calibration").at("imus")) r.sensor_segments.push_back(e.value("segment", std::string()));
    if (!j.at("occlusion").is_null()) {
      r.occlusion = true;
      r.occlusion_start = j.at("occlusion").at("start").get<double>();
      r.occlusion_end = j.at("occlusion").at("end").get<double>();
    }
    const auto& ref = j.at("reference");
    r.t = ref.at("t").get<std::vector<double>>();
    for (const auto& th : ref.at("theta")) {
      const auto v = th.get<std::vector<double>>();
      if (static_cast<int>(v.size()) != tree.dof_count()) throw ConfigError("ground truth: pose size mismatch");
      r.theta.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    for (const auto& q : ref.at("q_nc")) {
      r.r_nc.push_back(so3::quat_to_matrix(so3::UnitQuaternion(detail::fixed_from_json<4>(q, "q_nc"))));
    }
    if (r.theta.size() != r.t.size() || r.r_nc.size() != r.t.size()) throw ConfigError("ground truth: ragged reference");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("ground truth '" + p.string() + "': " + e.what());
  }
  return r;
}

}  // namespace kinefuse
