#pragma once

// Comparison metrics against a ground-truth reference and report output.

#include "kinefuse/optimize.hpp"
#include "kinefuse/synth.hpp"

#include <sstream>

namespace kinefuse {

inline void check_series(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("series length mismatch");
  if (a.empty()) throw std::invalid_argument("empty series");
}

inline double mae(const std::vector<double>& a, const std::vector<double>& b) {
  check_series(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double mean(const std::vector<double>& a) {
  double s = 0.0;
  for (double x : a) s += x;
  return s / static_cast<double>(a.size());
}

/// MAE after removing each series' mean.
inline double mae_ma(const std::vector<double>& a, const std::vector<double>& b) {
  check_series(a, b);
  const double ma = mean(a), mb = mean(b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs((a[i] - ma) - (b[i] - mb));
  return s / static_cast<double>(a.size());
}

/// Sample correlation; absent when either series has zero variance.
inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  check_series(a, b);
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// The simulator's analytic trajectory in network-output form: pose, then the
/// first two columns of R_nc (which orthonormalize back to R_nc exactly).
inline TrajectoryFn truth_trajectory(const GroundTruth& gt) {
  return [&gt](const std::vector<double>& times, int order, NetBatch& out) {
    const int d = gt.tree().dof_count();
    const auto n = static_cast<Eigen::Index>(times.size());
    out.order = order;
    out.y.resize(d + 6, n);
    out.yd.resize(order >= 1 ? d + 6 : 0, order >= 1 ? n : 0);
    out.ydd.resize(0, 0);
    for (Eigen::Index c = 0; c < n; ++c) {
      const TruthSample s = gt.at(times[c]);
      out.y.col(c) << s.theta, s.r_nc.col(0), s.r_nc.col(1);
      if (order >= 1) out.yd.col(c) << s.theta_dot, s.rdot_nc.col(0), s.rdot_nc.col(1);
    }
  };
}

// ---------------------------------------------------------------------------
// Ground-truth comparison

inline const std::vector<std::string>& comparison_joints() {
  static const std::vector<std::string> j{"l_hip", "l_knee", "r_hip", "r_knee"};
  return j;
}

struct JointMetrics {
  std::string joint;
  std::string window;  // "full" or "occluded"
  double mae = 0.0;
  double mae_ma = 0.0;
  std::optional<double> pearson;
  int samples = 0;
};

struct ComparisonReport {
  std::string mode;
  std::uint64_t scenario_hash = 0;
  std::vector<JointMetrics> joints;
  std::vector<double> timestamps;
  std::optional<double> orientation_deg;            // composite sensor-implied segment orientation error
  std::vector<double> time_offset_error_s;          // per IMU
  std::optional<double> phone_time_offset_error_s;

  const JointMetrics* find(const std::string& joint, const std::string& window = "full") const {
    for (const auto& j : joints)
      if (j.joint == joint && j.window == window) return &j;
    return nullptr;
  }
};

inline JointMetrics joint_metrics(const std::string& joint, const std::string& window, const std::vector<double>& est,
                                  const std::vector<double>& ref) {
  JointMetrics m;
  m.joint = joint;
  m.window = window;
  m.mae = mae(est, ref);
  m.mae_ma = mae_ma(est, ref);
  m.pearson = pearson(est, ref);
  m.samples = static_cast<int>(est.size());
  return m;
}

/// Mean geodesic error, over the truth timestamps, between the segment
/// orientation implied by each sensor reading (through the fitted camera,
/// drift, offset and mount) and the true segment orientation, both expressed
/// in the camera frame. Working in the camera frame removes the unobservable
/// global rotation of the world frame.
inline std::optional<double> composite_orientation_error(const Problem& pb, const FitState& s,
                                                         const TruthRecord& truth,
                                                         const TrajectoryFn* source = nullptr) {
  if (pb.sensors() == 0) return std::nullopt;
  const Recording& rec = *pb.rec;
  double sum = 0.0;
  long n = 0;
  NetBatch nb;
  if (source) {
    (*source)(truth.t, 0, nb);
  } else {
    forward_batch(s.net, truth.t, pb.duration, 0, nb);
  }
  for (int i = 0; i < pb.sensors(); ++i) {
    const SensorStream& st = rec.sensors[i];
    const ImuCalibration& cal = s.cal.imus[i];
    const int seg = pb.sensor_segment[i];
    for (std::size_t j = 0; j < truth.t.size(); ++j) {
      const double t = truth.t[j];
      const double x = (t - cal.delta) * st.attitude_rate;
      if (x < 0.0 || x > static_cast<double>(st.att_t.size() - 1)) continue;
      const int k = std::min(static_cast<int>(x), static_cast<int>(st.att_t.size()) - 2);
      const double u = std::clamp((t - cal.delta - st.att_t[k]) / (st.att_t[k + 1] - st.att_t[k]), 0.0, 1.0);
      const Vec4 qa = so3::slerp_raw<double>(st.att_q[k], st.att_q[k + 1], u);
      const Mat3 a = so3::quat_to_matrix_raw<double>(qa);
      const Mat3 rc = orthonormalize(nb.y.col(static_cast<Eigen::Index>(j)).tail<6>());
      const Mat3 est = rc.transpose() * predicted_attitude(cal, a, t, pb.duration);
      const auto fk = forward_kinematics(pb.tree, truth.beta, truth.theta[j]);
      const Mat3 ref = truth.r_nc[j].transpose() * fk.orientations[seg];
      sum += so3::rad2deg(so3::geodesic_angle(est, ref));
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

/// Joint-angle comparison at the truth timestamps by direct evaluation of the
/// fitted trajectory (or of `source`).
inline ComparisonReport compare_to_truth(const Problem& pb, const FitState& s, const TruthRecord& truth,
                                         const TrajectoryFn* source = nullptr) {
  ComparisonReport r;
  r.mode = fit_mode_name(pb.mode);
  r.scenario_hash = truth.scenario_hash;
  r.timestamps = truth.t;
  NetBatch nb;
  if (source) {
    (*source)(truth.t, 0, nb);
  } else {
    forward_batch(s.net, truth.t, pb.duration, 0, nb);
  }
  const int d = pb.pose_dim();
  for (const auto& joint : comparison_joints()) {
    std::vector<double> est, ref, est_o, ref_o;
    for (std::size_t k = 0; k < truth.t.size(); ++k) {
      const double e = extract_joint_angle(pb.tree, nb.y.col(static_cast<Eigen::Index>(k)).head(d), joint);
      const double g = extract_joint_angle(pb.tree, truth.theta[k], joint);
      est.push_back(e);
      ref.push_back(g);
      const double u = truth.t[k] / truth.duration;
      if (truth.occlusion && u >= truth.occlusion_start && u < truth.occlusion_end) {
        est_o.push_back(e);
        ref_o.push_back(g);
      }
    }
    r.joints.push_back(joint_metrics(joint, "full", est, ref));
    if (!est_o.empty()) r.joints.push_back(joint_metrics(joint, "occluded", est_o, ref_o));
  }
  if (pb.mode == FitMode::kFusion) {
    r.orientation_deg = composite_orientation_error(pb, s, truth, source);
    for (int i = 0; i < pb.sensors() && i < static_cast<int>(truth.calibration.imus.size()); ++i) {
      r.time_offset_error_s.push_back(std::abs(s.cal.imus[i].delta - truth.calibration.imus[i].delta));
    }
  }
  if (!pb.rec->phone.empty()) r.phone_time_offset_error_s = std::abs(s.cal.phone_delta - truth.calibration.phone_delta);
  return r;
}

// ---------------------------------------------------------------------------
// Output

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json j;
  j["mode"] = r.mode;
  j["scenario_hash"] = hash_hex(r.scenario_hash);
  j["samples"] = r.timestamps.size();
  j["joints"] = nlohmann::json::array();
  for (const auto& m : r.joints) {
    j["joints"].push_back({{"joint", m.joint},
                           {"window", m.window},
                           {"mae_deg", m.mae},
                           {"mae_ma_deg", m.mae_ma},
                           {"pearson", opt_json(m.pearson)},
                           {"samples", m.samples}});
  }
  j["orientation_deg"] = opt_json(r.orientation_deg);
  j["time_offset_error_s"] = r.time_offset_error_s;
  j["phone_time_offset_error_s"] = opt_json(r.phone_time_offset_error_s);
  return j;
}

namespace detail {
inline std::string csv_num(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}
}  // namespace detail

/// One row per (label, mode, joint, window).
inline std::string comparison_csv(const std::vector<std::pair<std::string, ComparisonReport>>& reports) {
  std::ostringstream os;
  os << "label,scenario_hash,mode,joint,window,mae_deg,mae_ma_deg,pearson,samples\n";
  for (const auto& [label, r] : reports) {
    for (const auto& m : r.joints) {
      os << label << ',' << hash_hex(r.scenario_hash) << ',' << r.mode << ',' << m.joint << ',' << m.window << ','
         << detail::csv_num(m.mae) << ',' << detail::csv_num(m.mae_ma) << ',' << detail::csv_num(m.pearson) << ','
         << m.samples << '\n';
    }
  }
  return os.str();
}

/// Per-joint differences (b - a) of every metric, e.g. fusion minus video.
inline nlohmann::json paired_deltas(const ComparisonReport& a, const ComparisonReport& b) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& mb : b.joints) {
    const JointMetrics* ma = a.find(mb.joint, mb.window);
    if (!ma) continue;
    nlohmann::json e{{"joint", mb.joint},
                     {"window", mb.window},
                     {"delta_mae_deg", mb.mae - ma->mae},
                     {"delta_mae_ma_deg", mb.mae_ma - ma->mae_ma}};
    e["delta_pearson"] = (ma->pearson && mb.pearson) ? nlohmann::json(*mb.pearson - *ma->pearson) : nlohmann::json();
    out.push_back(e);
  }
  return out;
}

inline std::string paired_csv(const std::string& label_a, const ComparisonReport& a, const std::string& label_b,
                              const ComparisonReport& b) {
  std::ostringstream os;
  os << "pair,joint,window,delta_mae_deg,delta_mae_ma_deg,delta_pearson\n";
  for (const auto& e : paired_deltas(a, b)) {
    os << label_b << "-" << label_a << ',' << e["joint"].get<std::string>() << ',' << e["window"].get<std::string>()
       << ',' << detail::csv_num(e["delta_mae_deg"].get<double>()) << ','
       << detail::csv_num(e["delta_mae_ma_deg"].get<double>()) << ','
       << (e["delta_pearson"].is_null() ? std::string() : detail::csv_num(e["delta_pearson"].get<double>())) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Occlusion experiment

struct OcclusionOutcome {
  ComparisonReport video;
  ComparisonReport fusion;
};

/// Simulates the (occluded) scenario, fits video-only and fusion, and
/// compares both with the truth.
inline OcclusionOutcome run_occlusion_experiment(const ScenarioConfig& scenario, const FitConfig& video_cfg,
                                                 const FitConfig& fusion_cfg, const KinematicTree& tree) {
  if (!scenario.occlusion) throw ConfigError("occlusion experiment: scenario has no occlusion window");
  const GroundTruth gt(scenario, tree);
  const Recording rec = simulate_recording(gt);
  const TruthRecord truth = make_truth_record(gt);
  OcclusionOutcome out;
  {
    const Problem pb(rec, FitMode::kVideo, video_cfg.weights);
    const FitResult r = fit(pb, video_cfg);
    if (r.diverged) throw NumericalError("occlusion experiment: video fit diverged");
    out.video = compare_to_truth(pb, r.state, truth);
  }
  {
    const Problem pb(rec, FitMode::kFusion, fusion_cfg.weights);
    const FitResult r = fit(pb, fusion_cfg);
    if (r.diverged) throw NumericalError("occlusion experiment: fusion fit diverged");
    out.fusion = compare_to_truth(pb, r.state, truth);
  }
  return out;
}

}  // namespace kinefuse
