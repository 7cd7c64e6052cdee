#pragma once

// Fitting loop: minibatch sampling, three Adam parameter groups, annealed
// sensor terms and the calibration warm start.

#include "kinefuse/objective.hpp"

#include <chrono>
#include <cmath>
#include <set>

namespace kinefuse {

struct OptimizerConfig {
  int steps = 20000;
  int batch = 500;
  std::uint64_t seed = 0;
  // Group A: network and body scale.
  double lr_start = 1e-3, lr_end = 1e-4;
  double beta1 = 0.9, beta2 = 0.8;
  double weight_decay = 1e-5;
  // Group B: rotation offsets and drift knots.
  int calib_start = 10000;
  double calib_lr = 1e-5;
  double calib_beta1 = 0.9, calib_beta2 = 0.999;
  // Group C: time offsets.
  double offset_lr = 1e-4;
  double offset_beta1 = 0.85, offset_beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables
  bool warm_start = true;
  bool init_from_data = true;
  bool learn_phone_offset = true;
  int log_every = 500;
  int threads = 0;

  void validate() const {
    if (steps < 1) throw ConfigError("optimizer: steps must be >= 1");
    if (batch < 1) throw ConfigError("optimizer: batch must be >= 1");
    for (double lr : {lr_start, lr_end, calib_lr, offset_lr}) {
      if (!(lr > 0.0)) throw ConfigError("optimizer: learning rates must be positive");
    }
    for (double b : {beta1, beta2, calib_beta1, calib_beta2, offset_beta1, offset_beta2}) {
      if (!(b >= 0.0 && b < 1.0)) throw ConfigError("optimizer: Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0) || !(weight_decay >= 0.0) || !(clip_norm >= 0.0)) {
      throw ConfigError("optimizer: eps must be positive, weight decay and clip norm >= 0");
    }
    if (calib_start < 0) throw ConfigError("optimizer: calib_start must be >= 0");
    if (log_every < 1) throw ConfigError("optimizer: log_every must be >= 1");
  }
};

struct FitConfig {
  NetConfig net;
  OptimizerConfig opt;
  LossWeights weights;

  void validate() const {
    if (net.hidden_layers < 1 || net.width < 1 || net.bands < 0) throw ConfigError("network: invalid size");
    if (!(net.output_init > 0.0)) throw ConfigError("network: output_init must be positive");
    opt.validate();
    weights.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["network"] = {{"hidden_layers", net.hidden_layers}, {"width", net.width},
                    {"bands", net.bands},                 {"activation", activation_name(net.activation)},
                    {"output_init", net.output_init}};
    j["optimizer"] = {{"steps", opt.steps},
                      {"batch", opt.batch},
                      {"seed", opt.seed},
                      {"lr_start", opt.lr_start},
                      {"lr_end", opt.lr_end},
                      {"betas", {opt.beta1, opt.beta2}},
                      {"weight_decay", opt.weight_decay},
                      {"calib_start", opt.calib_start},
                      {"calib_lr", opt.calib_lr},
                      {"calib_betas", {opt.calib_beta1, opt.calib_beta2}},
                      {"offset_lr", opt.offset_lr},
                      {"offset_betas", {opt.offset_beta1, opt.offset_beta2}},
                      {"eps", opt.eps},
                      {"clip_norm", opt.clip_norm},
                      {"warm_start", opt.warm_start},
                      {"init_from_data", opt.init_from_data},
                      {"learn_phone_offset", opt.learn_phone_offset},
                      {"log_every", opt.log_every},
                      {"threads", opt.threads}};
    j["weights"] = {{"keypoint", weights.keypoint},
                    {"reproj", weights.reproj},
                    {"attitude", weights.attitude},
                    {"gyro_sensor", weights.gyro_sensor},
                    {"gyro_phone", weights.gyro_phone},
                    {"anneal_start", weights.anneal_start},
                    {"anneal_end", weights.anneal_end},
                    {"huber_keypoint_m", weights.huber_keypoint_m},
                    {"huber_reproj_px", weights.huber_reproj_px},
                    {"weighted_centering", weights.weighted_centering}};
    return j;
  }

  /// Overlays `j` on the defaults. Unknown sections or keys are errors.
  static FitConfig from_json(const nlohmann::json& j) {
    FitConfig c;
    const nlohmann::json base = c.to_json();
    if (!j.is_object()) throw ConfigError("fit config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!base.contains(it.key())) throw ConfigError("fit config: unknown section '" + it.key() + "'");
      if (!it->is_object()) throw ConfigError("fit config: section '" + it.key() + "' must be an object");
      for (auto f = it->begin(); f != it->end(); ++f) {
        if (!base[it.key()].contains(f.key())) {
          throw ConfigError("fit config: unknown key '" + it.key() + "." + f.key() + "'");
        }
      }
    }
    nlohmann::json m = base;
    m.merge_patch(j);
    try {
      const auto& n = m["network"];
      c.net.hidden_layers = n["hidden_layers"].get<int>();
      c.net.width = n["width"].get<int>();
      c.net.bands = n["bands"].get<int>();
      c.net.activation = activation_from_name(n["activation"].get<std::string>());
      c.net.output_init = n["output_init"].get<double>();
      const auto& o = m["optimizer"];
      c.opt.steps = o["steps"].get<int>();
      c.opt.batch = o["batch"].get<int>();
      c.opt.seed = o["seed"].get<std::uint64_t>();
      c.opt.lr_start = o["lr_start"].get<double>();
      c.opt.lr_end = o["lr_end"].get<double>();
      c.opt.beta1 = o["betas"].at(0).get<double>();
      c.opt.beta2 = o["betas"].at(1).get<double>();
      c.opt.weight_decay = o["weight_decay"].get<double>();
      c.opt.calib_start = o["calib_start"].get<int>();
      c.opt.calib_lr = o["calib_lr"].get<double>();
      c.opt.calib_beta1 = o["calib_betas"].at(0).get<double>();
      c.opt.calib_beta2 = o["calib_betas"].at(1).get<double>();
      c.opt.offset_lr = o["offset_lr"].get<double>();
      c.opt.offset_beta1 = o["offset_betas"].at(0).get<double>();
      c.opt.offset_beta2 = o["offset_betas"].at(1).get<double>();
      c.opt.eps = o["eps"].get<double>();
      c.opt.clip_norm = o["clip_norm"].get<double>();
      c.opt.warm_start = o["warm_start"].get<bool>();
      c.opt.init_from_data = o["init_from_data"].get<bool>();
      c.opt.learn_phone_offset = o["learn_phone_offset"].get<bool>();
      c.opt.log_every = o["log_every"].get<int>();
      c.opt.threads = o["threads"].get<int>();
      const auto& w = m["weights"];
      c.weights.keypoint = w["keypoint"].get<double>();
      c.weights.reproj = w["reproj"].get<double>();
      c.weights.attitude = w["attitude"].get<double>();
      c.weights.gyro_sensor = w["gyro_sensor"].get<double>();
      c.weights.gyro_phone = w["gyro_phone"].get<double>();
      c.weights.anneal_start = w["anneal_start"].get<int>();
      c.weights.anneal_end = w["anneal_end"].get<int>();
      c.weights.huber_keypoint_m = w["huber_keypoint_m"].get<double>();
      c.weights.huber_reproj_px = w["huber_reproj_px"].get<double>();
      c.weights.weighted_centering = w["weighted_centering"].get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("fit config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static FitConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open fit config '" + path + "'");
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("fit config '" + path + "': " + e.what());
    }
    return from_json(j);
  }

  /// The same schedule compressed or stretched to `steps`: phase boundaries
  /// keep their fractions of the run.
  FitConfig with_steps(int steps) const {
    if (steps < 1) throw ConfigError("steps must be positive");
    FitConfig c = *this;
    const double f = static_cast<double>(steps) / opt.steps;
    c.opt.steps = steps;
    c.opt.calib_start = static_cast<int>(std::lround(opt.calib_start * f));
    c.weights.anneal_start = static_cast<int>(std::lround(weights.anneal_start * f));
    c.weights.anneal_end = static_cast<int>(std::lround(weights.anneal_end * f));
    c.opt.log_every = std::max(1, std::min(opt.log_every, steps / 10));
    return c;
  }
};

// ---------------------------------------------------------------------------
// Sampling

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// n draws with replacement from [0, size); keyed by (seed, step, stream) so
/// every batch is reproducible on its own.
inline std::vector<int> draw_indices(std::uint64_t seed, int step, int stream, int n, int size) {
  std::vector<int> out;
  if (size <= 0) return out;
  std::uint64_t s = seed ^ (0xd1b54a32d192ed03ull * (static_cast<std::uint64_t>(step) + 1)) ^
                    (0x8cb92ba72f3d8dd7ull * (static_cast<std::uint64_t>(stream) + 1));
  splitmix64(s);
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double u = static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
    out.push_back(std::min(size - 1, static_cast<int>(u * size)));
  }
  return out;
}

}  // namespace detail

inline Batch sample_batch(const Problem& pb, std::uint64_t seed, int step, int n) {
  Batch b;
  const Recording& rec = *pb.rec;
  b.frames = detail::draw_indices(seed, step, 0, n, static_cast<int>(rec.frames.size()));
  b.phone = detail::draw_indices(seed, step, 1, n, static_cast<int>(rec.phone.t.size()));
  for (int i = 0; i < pb.sensors(); ++i) {
    b.att.push_back(detail::draw_indices(seed, step, 2 + 2 * i, n, static_cast<int>(rec.sensors[i].att_t.size())));
    b.gyro.push_back(detail::draw_indices(seed, step, 3 + 2 * i, n, static_cast<int>(rec.sensors[i].gyro_t.size())));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Adam

struct Adam {
  Eigen::VectorXd m, v;
  long t = 0;

  void reset(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }

  /// Decoupled weight decay (AdamW).
  void step(Eigen::Ref<Eigen::VectorXd> p, const Eigen::VectorXd& g, double lr, double b1, double b2, double eps,
            double wd = 0.0) {
    if (m.size() != p.size()) reset(p.size());
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    p.array() -= lr * ((m.array() / c1) / ((v.array() / c2).sqrt() + eps) + wd * p.array());
  }
};

// ---------------------------------------------------------------------------
// Initialisation

/// Fresh parameters for a recording: network from `seed`, neutral body,
/// identity calibration.
inline FitState initial_state(const Problem& pb, const FitConfig& cfg) {
  NetConfig nc = cfg.net;
  nc.pose_dim = pb.pose_dim();
  FitState s{init_trajectory(cfg.opt.seed, nc), ScaleParams::neutral(pb.tree), {}};
  s.cal.imus.assign(static_cast<std::size_t>(pb.sensors()), ImuCalibration{});
  return s;
}

/// Nominal portrait mount: camera x -> world -y, y -> -z, z -> x.
inline Mat3 nominal_camera_mount() {
  Mat3 c;
  c << 0, 0, 1, -1, 0, 0, 0, -1, 0;
  return c;
}

namespace detail {

/// Rotation R and translation t minimising sum w |R a + t - b|^2.
inline std::pair<Mat3, Vec3> kabsch(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                                    const std::vector<double>& w) {
  Vec3 ma = Vec3::Zero(), mb = Vec3::Zero();
  double ws = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += w[i] * a[i];
    mb += w[i] * b[i];
    ws += w[i];
  }
  ma /= ws;
  mb /= ws;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) h += w[i] * (b[i] - mb) * (a[i] - ma).transpose();
  const Mat3 r = so3::project_to_rotation(h);
  return {r, mb - r * ma};
}

}  // namespace detail

/// Points the output biases at a plausible constant answer: nominal camera
/// mount and a rigid fit of the rest-pose markers to the detections seen
/// through that mount.
inline void init_from_data(const Problem& pb, FitState& s) {
  const Recording& rec = *pb.rec;
  const Mat3 c0 = nominal_camera_mount();
  const MarkerMatrix rest = pb.tree.rest_markers();
  Vec3 tsum = Vec3::Zero();
  Mat3 rsum = Mat3::Zero();
  int used = 0;
  for (const auto& f : rec.frames) {
    std::vector<Vec3> a, b;
    std::vector<double> w;
    for (int j = 0; j < pb.tree.marker_count(); ++j) {
      if (!(f.confidence(j) > 0.0)) continue;
      a.push_back(rest.row(j).transpose());
      b.push_back(c0 * f.p_c.row(j).transpose());
      w.push_back(f.confidence(j));
    }
    if (a.size() < 3) continue;
    const auto [r, t] = detail::kabsch(a, b, w);
    rsum += r;
    tsum += t;
    ++used;
  }
  const int d = pb.pose_dim();
  auto bias = s.net.bias(s.net.layer_count() - 1);
  if (used > 0) {
    bias.head<3>() = tsum / used;
    bias.segment<3>(3) = so3::log_map(so3::project_to_rotation(rsum));
  }
  bias.segment<3>(d) = c0.col(0);
  bias.segment<3>(d + 3) = c0.col(1);
}

namespace detail {

/// Samples of a scalar signal on a uniform grid, linearly interpolated.
struct GridSignal {
  double t0 = 0.0, dt = 1.0;
  std::vector<double> v;
  double at(double t) const {
    const double x = (t - t0) / dt;
    const int n = static_cast<int>(v.size());
    if (x <= 0.0) return v.front();
    if (x >= n - 1) return v.back();
    const int i = static_cast<int>(x);
    const double f = x - i;
    return (1.0 - f) * v[i] + f * v[i + 1];
  }
};

/// Offset in [-0.5, 0.5] s that best aligns measured and predicted gyro
/// magnitudes (coarse grid, then a fine grid around the best value).
inline double align_offset(const std::vector<double>& tau, const std::vector<double>& mag, const GridSignal& pred,
                           double duration) {
  const auto cost = [&](double delta) {
    double c = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < tau.size(); ++k) {
      const double t = tau[k] + delta;
      if (t < 0.0 || t > duration) continue;
      const double e = mag[k] - pred.at(t);
      c += e * e;
      ++n;
    }
    return n > 0 ? c / n : std::numeric_limits<double>::infinity();
  };
  double best = 0.0, bc = cost(0.0);
  for (int i = -100; i <= 100; ++i) {
    const double d = 0.005 * i;
    const double c = cost(d);
    if (c < bc) bc = c, best = d;
  }
  const double centre = best;
  for (int i = -10; i <= 10; ++i) {
    const double d = std::clamp(centre + 0.0005 * i, -kMaxTimeOffset, kMaxTimeOffset);
    const double c = cost(d);
    if (c < bc) bc = c, best = d;
  }
  return best;
}

inline Vec4 quat_near(const Mat3& r, const Vec4& ref) {
  Vec4 q = so3::matrix_to_quat(r).coeffs();
  if (q.dot(ref) < 0.0) q = -q;
  return q;
}

}  // namespace detail

/// Closed-form calibration estimate from the current trajectory: time offsets
/// by gyro-magnitude alignment, R_sb and drift knots by alternating rotation
/// fits, and the phone offset the same way.
inline void warm_start_calibration(const Problem& pb, FitState& s, bool phone_offset) {
  const Recording& rec = *pb.rec;
  const double duration = pb.duration;
  const int d = pb.pose_dim();
  const double hz = 200.0;
  std::vector<double> grid;
  for (double t = 0.0; t <= duration + 1e-9; t += 1.0 / hz) grid.push_back(t);
  NetBatch nb;
  forward_batch(s.net, grid, duration, 1, nb);
  const int ng = static_cast<int>(grid.size());

  for (int i = 0; i < pb.sensors(); ++i) {
    const SensorStream& stream = rec.sensors[i];
    ImuCalibration& cal = s.cal.imus[i];
    const int seg = pb.sensor_segment[i];
    FkState st;
    std::vector<Vec3> wb(static_cast<std::size_t>(ng));
    detail::GridSignal mag{0.0, 1.0 / hz, std::vector<double>(static_cast<std::size_t>(ng))};
    for (int g = 0; g < ng; ++g) {
      const Eigen::VectorXd thd = nb.yd.col(g).head(d);
      fk_evaluate(pb.tree, s.beta.segment_factors(pb.tree), s.beta.offsets, nb.y.col(g).head(d), &thd, st,
                  &pb.sensor_mask[i], false);
      wb[g] = st.omega[seg];
      mag.v[g] = wb[g].norm();
    }
    std::vector<double> tau, m;
    for (std::size_t k = 0; k < stream.gyro_t.size(); k += 2) {
      tau.push_back(stream.gyro_t[k]);
      m.push_back(stream.gyro[k].norm());
    }
    cal.delta = detail::align_offset(tau, m, mag, duration);

    // Gyro cross-covariance at the aligned offset: S w_b ~ w_s.
    Mat3 mg = Mat3::Zero();
    double mg_norm = 0.0;
    for (std::size_t k = 0; k < stream.gyro_t.size(); k += 2) {
      const double x = (stream.gyro_t[k] + cal.delta) * hz;
      if (x < 0.0 || x >= ng - 1) continue;
      const int g = static_cast<int>(x);
      const double f = x - g;
      const Vec3 w = (1.0 - f) * wb[g] + f * wb[g + 1];
      mg += stream.gyro[k] * w.transpose();
      mg_norm += stream.gyro[k].norm() * w.norm();
    }
    if (mg_norm > 0.0) mg /= mg_norm;

    // Segment attitude at the attitude sample times.
    std::vector<double> ta;
    std::vector<int> ka;
    for (std::size_t k = 0; k < stream.att_t.size(); ++k) {
      const double t = stream.att_t[k] + cal.delta;
      if (t < 0.0 || t > duration) continue;
      ta.push_back(t);
      ka.push_back(static_cast<int>(k));
    }
    if (ta.empty()) continue;
    NetBatch na;
    forward_batch(s.net, ta, duration, 0, na);
    std::vector<Mat3> rhat(ta.size());
    for (std::size_t k = 0; k < ta.size(); ++k) {
      fk_evaluate(pb.tree, s.beta.segment_factors(pb.tree), s.beta.offsets, na.y.col(k).head(d), nullptr, st,
                  &pb.sensor_mask[i], false);
      rhat[k] = st.rotation[seg];
    }
    const double na_inv = 1.0 / static_cast<double>(ta.size());
    Mat3 sb = mg_norm > 0.0 ? so3::project_to_rotation(mg) : Mat3::Identity();
    Mat3 dr = Mat3::Identity();
    for (int it = 0; it < 12; ++it) {
      Mat3 acc = Mat3::Zero();
      for (std::size_t k = 0; k < ta.size(); ++k) acc += rhat[k] * sb.transpose() * stream.att_r[ka[k]].transpose();
      dr = so3::project_to_rotation(acc);
      acc.setZero();
      for (std::size_t k = 0; k < ta.size(); ++k) acc += stream.att_r[ka[k]].transpose() * dr.transpose() * rhat[k];
      sb = so3::project_to_rotation(acc * na_inv + mg);
    }
    // Knots: tent-weighted drift estimates around 0, T/2 and T.
    std::array<Mat3, 3> kd;
    for (int kk = 0; kk < 3; ++kk) {
      Mat3 acc = Mat3::Zero();
      double wsum = 0.0;
      for (std::size_t k = 0; k < ta.size(); ++k) {
        const double w = std::max(0.0, 1.0 - std::abs(ta[k] - 0.5 * kk * duration) / (0.5 * duration));
        acc += w * rhat[k] * sb.transpose() * stream.att_r[ka[k]].transpose();
        wsum += w;
      }
      kd[kk] = wsum > 1e-6 ? so3::project_to_rotation(acc) : dr;
    }
    cal.q_sb = detail::quat_near(sb, cal.q_sb);
    Vec4 ref = cal.knots[0];
    for (int kk = 0; kk < 3; ++kk) {
      cal.knots[kk] = detail::quat_near(kd[kk], ref);
      ref = cal.knots[kk];
    }
  }

  if (phone_offset && !rec.phone.empty()) {
    detail::GridSignal mag{0.0, 1.0 / hz, std::vector<double>(static_cast<std::size_t>(ng))};
    CameraHead cam;
    for (int g = 0; g < ng; ++g) {
      cam.evaluate(nb.y.col(g).tail<6>(), nb.yd.col(g).tail<6>());
      mag.v[g] = so3::vee_skew<double>(Mat3(cam.r.transpose() * cam.rd)).norm();
    }
    std::vector<double> tau, m;
    for (std::size_t k = 0; k < rec.phone.t.size(); ++k) {
      tau.push_back(rec.phone.t[k]);
      m.push_back(rec.phone.gyro[k].norm());
    }
    s.cal.phone_delta = detail::align_offset(tau, m, mag, duration);
  }
}

// ---------------------------------------------------------------------------
// Fit

struct Progress {
  int step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

struct FitResult {
  FitState state;
  std::vector<LossBreakdown> history;
  bool diverged = false;
  int divergence_step = -1;
  double seconds = 0.0;
  int steps_run = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(n), v.end());
  if (v.size() % 2) return v[n];
  const double hi = v[n];
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<long>(n)));
}

/// Median total loss over the first or last `n` recorded steps.
inline double history_median(const std::vector<LossBreakdown>& h, std::size_t n, bool last) {
  std::vector<double> v;
  const std::size_t k = std::min(n, h.size());
  for (std::size_t i = 0; i < k; ++i) v.push_back(h[last ? h.size() - k + i : i].total);
  return median(v);
}

/// Learning rate of group A: exponential decay from lr_start to lr_end.
inline double lr_at(const OptimizerConfig& o, int step) {
  if (o.steps <= 1) return o.lr_start;
  const double u = static_cast<double>(step) / (o.steps - 1);
  return o.lr_start * std::pow(o.lr_end / o.lr_start, u);
}

inline TermWeights term_weights(const Problem& pb, const OptimizerConfig& o, int step) {
  const LossWeights& w = pb.weights;
  TermWeights tw;
  tw.keypoint = w.keypoint;
  tw.reproj = w.reproj;
  tw.gyro_phone = pb.rec->phone.empty() ? 0.0 : w.gyro_phone;
  const bool calib = step >= o.calib_start;
  if (pb.mode == FitMode::kFusion && pb.sensors() > 0) {
    const double f = w.sensor_factor(step);
    tw.attitude = f * w.attitude;
    tw.gyro_sensor = f * w.gyro_sensor;
    tw.imu_delta_grad = calib;
  }
  tw.phone_delta_grad = calib && o.learn_phone_offset && tw.gyro_phone > 0.0;
  return tw;
}

namespace detail {

inline bool finite(const Gradients& g) {
  if (!g.net.allFinite() || !g.scale.allFinite() || !g.offsets.allFinite() || !std::isfinite(g.phone_delta)) {
    return false;
  }
  for (const auto& c : g.cal)
    if (!c.allFinite()) return false;
  for (double x : g.delta)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

/// Runs the optimizer. Starts from `init` when given, else from a fresh
/// state (optionally initialised from the data). The loss weights of `cfg`
/// replace those of `problem`.
inline FitResult fit(const Problem& problem, const FitConfig& cfg, const FitState* init = nullptr,
                     const std::function<void(const Progress&)>& progress = {}) {
  cfg.validate();
  Problem pb = problem;
  pb.weights = cfg.weights;
  const auto t0 = std::chrono::steady_clock::now();
  const OptimizerConfig& o = cfg.opt;
  FitResult res;
  FitState s = init ? *init : initial_state(pb, cfg);
  if (!init && o.init_from_data) init_from_data(pb, s);
  FitState last_good = s;
  const int ns = pb.sensors();
  const int threads = resolve_threads(o.threads);
  const Eigen::Index np = s.net.size(), nsc = s.beta.scale.size(), nof = s.beta.offsets.size();

  Adam adam_a, adam_b, adam_c;
  Gradients g;
  Eigen::VectorXd pa(np + nsc + nof), ga(np + nsc + nof);
  Eigen::VectorXd pb_vec(kCalibrationParams * ns), gb(kCalibrationParams * ns);
  Eigen::VectorXd pc(ns + 1), gc(ns + 1);
  res.history.reserve(static_cast<std::size_t>(o.steps));

  for (int step = 0; step < o.steps; ++step) {
    const bool calib = step >= o.calib_start;
    if (pb.mode == FitMode::kFusion && step == o.calib_start && o.warm_start && (ns > 0 || !pb.rec->phone.empty())) {
      warm_start_calibration(pb, s, o.learn_phone_offset);
    }
    const TermWeights tw = term_weights(pb, o, step);
    const Batch batch = sample_batch(pb, o.seed, step, o.batch);
    g.reset(s);
    const BatchResult br = evaluate_batch(pb, s, batch, tw, &g, threads);
    if (!std::isfinite(br.loss.total) || !detail::finite(g)) {
      res.diverged = true;
      res.divergence_step = step;
      s = last_good;
      break;
    }
    last_good = s;
    res.history.push_back(br.loss);
    res.steps_run = step + 1;

    // Flatten the active groups.
    pa << s.net.data(), s.beta.scale, Eigen::Map<const Eigen::VectorXd>(s.beta.offsets.data(), nof);
    ga << g.net, g.scale, Eigen::Map<const Eigen::VectorXd>(g.offsets.data(), nof);
    for (int i = 0; i < ns; ++i) {
      const auto& c = s.cal.imus[i];
      pb_vec.segment<kCalibrationParams>(kCalibrationParams * i) << c.q_sb, c.knots[0], c.knots[1], c.knots[2];
      gb.segment<kCalibrationParams>(kCalibrationParams * i) = g.cal[i];
      pc(i) = c.delta;
      gc(i) = g.delta[i];
    }
    pc(ns) = s.cal.phone_delta;
    gc(ns) = g.phone_delta;
    const bool b_on = calib && tw.imu_delta_grad;
    if (!tw.imu_delta_grad) gc.head(ns).setZero();
    if (!tw.phone_delta_grad) gc(ns) = 0.0;
    if (o.clip_norm > 0.0) {
      double n2 = ga.squaredNorm() + gc.squaredNorm();
      if (b_on) n2 += gb.squaredNorm();
      const double n = std::sqrt(n2);
      if (n > o.clip_norm) {
        const double f = o.clip_norm / n;
        ga *= f;
        gb *= f;
        gc *= f;
      }
    }

    const double lr = lr_at(o, step);
    adam_a.step(pa, ga, lr, o.beta1, o.beta2, o.eps, o.weight_decay);
    s.net.data() = pa.head(np);
    s.beta.scale = pa.segment(np, nsc);
    s.beta.offsets = Eigen::Map<const MarkerMatrix>(pa.data() + np + nsc, s.beta.offsets.rows(), 3);
    s.beta.clamp_offsets();
    if (b_on && ns > 0) {
      adam_b.step(pb_vec, gb, o.calib_lr, o.calib_beta1, o.calib_beta2, o.eps);
      for (int i = 0; i < ns; ++i) {
        auto& c = s.cal.imus[i];
        const auto seg = pb_vec.segment<kCalibrationParams>(kCalibrationParams * i);
        c.q_sb = seg.segment<4>(0);
        for (int k = 0; k < 3; ++k) c.knots[k] = seg.segment<4>(4 + 4 * k);
        c.normalize();
      }
    }
    if (tw.imu_delta_grad || tw.phone_delta_grad) {
      adam_c.step(pc, gc, o.offset_lr, o.offset_beta1, o.offset_beta2, o.eps);
      for (int i = 0; i < ns; ++i) {
        if (tw.imu_delta_grad) s.cal.imus[i].delta = std::clamp(pc(i), -kMaxTimeOffset, kMaxTimeOffset);
      }
      if (tw.phone_delta_grad) s.cal.phone_delta = std::clamp(pc(ns), -kMaxTimeOffset, kMaxTimeOffset);
    }

    if (progress && ((step + 1) % o.log_every == 0 || step + 1 == o.steps)) {
      progress(Progress{step + 1, br.loss, lr});
    }
  }
  res.state = s;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace kinefuse
