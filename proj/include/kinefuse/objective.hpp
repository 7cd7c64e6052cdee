#pragma once

// Loss terms and the batch gradient engine.
//
// Five sources feed the objective: keypoint frames (3D keypoint and
// reprojection terms share the sampled frames), per-IMU attitude samples,
// per-IMU gyro samples and phone gyro samples. Each term is a mean over its
// sampled entries; sensor terms additionally average over sensors.

#include "kinefuse/body_model.hpp"
#include "kinefuse/camera.hpp"
#include "kinefuse/recording.hpp"
#include "kinefuse/sensor_model.hpp"
#include "kinefuse/trajectory_net.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace kinefuse {

// ---------------------------------------------------------------------------
// Robust penalty

/// NaN propagates so the optimizer can detect it.
inline double huber(double r, double delta) {
  if (r < 0.0 || delta < 0.0) throw std::invalid_argument("huber: r and delta must be >= 0");
  return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
}

/// huber'(r) / r, the factor that maps a residual vector to its gradient.
inline double huber_weight(double r, double delta) { return r <= delta ? 1.0 : delta / r; }

// Reference forms of the individual terms (single frame or sample).

inline double keypoint_loss(const MarkerMatrix& model_n, const MarkerMatrix& detected_c, const Eigen::VectorXd& c,
                            const Mat3& r_nc, double delta = 1.0, bool weighted = true) {
  const auto a = center_keypoints(model_n, c, weighted);
  const auto b = center_keypoints(detected_c, c, weighted);
  if (!a || !b) return 0.0;
  double l = 0.0;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    if (!(c(j) > 0.0)) continue;
    const Vec3 d = a->row(j).transpose() - r_nc * b->row(j).transpose();
    l += c(j) * huber(d.norm(), delta);
  }
  return l / static_cast<double>(c.size());
}

inline double reprojection_loss(const MarkerMatrix& model_n, const PixelMatrix& x, const Eigen::VectorXd& c,
                                const Mat3& r_nc, const CameraIntrinsics& intr, double delta = 100.0) {
  double l = 0.0;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    if (!(c(j) > 0.0)) continue;
    const auto u = project(intr, r_nc.transpose() * model_n.row(j).transpose());
    if (!u) continue;
    l += c(j) * huber((*u - x.row(j).transpose()).norm(), delta);
  }
  return l / static_cast<double>(c.size());
}

inline double attitude_loss(const std::vector<Mat3>& model, const std::vector<Mat3>& sensor) {
  if (model.size() != sensor.size() || model.empty()) throw std::invalid_argument("attitude_loss: size mismatch");
  double l = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const double a = so3::geodesic_angle(model[i], sensor[i]);
    l += a * a;
  }
  return l / static_cast<double>(model.size());
}

/// (sensor term averaged over sensors, phone term).
inline std::pair<double, double> gyro_losses(const std::vector<Vec3>& pred_s, const std::vector<Vec3>& meas_s,
                                             const Vec3& pred_c, const Vec3& meas_c) {
  if (pred_s.size() != meas_s.size()) throw std::invalid_argument("gyro_losses: size mismatch");
  double ls = 0.0;
  for (std::size_t i = 0; i < pred_s.size(); ++i) ls += (pred_s[i] - meas_s[i]).squaredNorm();
  if (!pred_s.empty()) ls /= static_cast<double>(pred_s.size());
  return {ls, (pred_c - meas_c).squaredNorm()};
}

// ---------------------------------------------------------------------------
// Configuration

enum class FitMode { kVideo, kFusion };

inline FitMode fit_mode_from_name(const std::string& s) {
  if (s == "video") return FitMode::kVideo;
  if (s == "fusion") return FitMode::kFusion;
  throw ConfigError("mode must be 'video' or 'fusion', got '" + s + "'");
}
inline const char* fit_mode_name(FitMode m) { return m == FitMode::kVideo ? "video" : "fusion"; }

struct LossWeights {
  double keypoint = 1.0;
  double reproj = 1e-4;
  double attitude = 1.0;
  double gyro_sensor = 1e-3;
  double gyro_phone = 1e-2;
  int anneal_start = 10000;
  int anneal_end = 15000;
  double huber_keypoint_m = 1.0;
  double huber_reproj_px = 100.0;
  bool weighted_centering = true;

  /// Linear ramp of the IMU terms from 0 at anneal_start to 1 at anneal_end.
  double sensor_factor(int step) const {
    if (step < anneal_start) return 0.0;
    if (anneal_end <= anneal_start) return 1.0;
    return std::min(1.0, static_cast<double>(step - anneal_start) / (anneal_end - anneal_start));
  }

  void validate() const {
    for (double w : {keypoint, reproj, attitude, gyro_sensor, gyro_phone}) {
      if (!(w >= 0.0)) throw ConfigError("loss weights must be >= 0");
    }
    if (anneal_start > anneal_end) throw ConfigError("anneal start must not exceed anneal end");
    if (!(huber_keypoint_m > 0.0 && huber_reproj_px > 0.0)) throw ConfigError("huber thresholds must be positive");
  }
};

// ---------------------------------------------------------------------------
// Parameters

struct FitState {
  TrajectoryParams net;
  ScaleParams beta;
  SensorCalibration cal;
};

inline constexpr int kCalibrationParams = 16;  // q_sb (4) + three knots (12)
using CalGrad = Eigen::Matrix<double, kCalibrationParams, 1>;

struct Gradients {
  Eigen::VectorXd net;
  Eigen::VectorXd scale;
  MarkerMatrix offsets;
  std::vector<CalGrad> cal;
  std::vector<double> delta;
  double phone_delta = 0.0;

  void reset(const FitState& s) {
    net = Eigen::VectorXd::Zero(s.net.size());
    scale = Eigen::VectorXd::Zero(s.beta.scale.size());
    offsets = MarkerMatrix::Zero(s.beta.offsets.rows(), 3);
    cal.assign(s.cal.imus.size(), CalGrad::Zero());
    delta.assign(s.cal.imus.size(), 0.0);
    phone_delta = 0.0;
  }
};

struct LossBreakdown {
  double total = 0.0;
  double keypoint = 0.0;
  double reproj = 0.0;
  double attitude = 0.0;
  double gyro_sensor = 0.0;
  double gyro_phone = 0.0;
};

/// Effective weight of each term for one evaluation (0 disables the term).
struct TermWeights {
  double keypoint = 0.0, reproj = 0.0, attitude = 0.0, gyro_sensor = 0.0, gyro_phone = 0.0;
  bool imu_delta_grad = false;    // dL/d(delta_i)
  bool phone_delta_grad = false;  // dL/d(delta_phone)
};

/// Sample indices per source.
struct Batch {
  std::vector<int> frames;
  std::vector<std::vector<int>> att;
  std::vector<std::vector<int>> gyro;
  std::vector<int> phone;
};

/// Recording, tree and derived lookups shared by every evaluation.
struct Problem {
  const Recording* rec = nullptr;
  KinematicTree tree;
  FitMode mode = FitMode::kFusion;
  LossWeights weights;
  double duration = 0.0;
  std::vector<int> sensor_segment;
  std::vector<std::vector<char>> sensor_mask;

  Problem(const Recording& r, FitMode m, const LossWeights& w) : rec(&r), tree(r.tree()), mode(m), weights(w) {
    duration = r.duration;
    for (const auto& s : r.sensors) {
      const auto seg = tree.find_segment(s.segment);
      if (!seg) throw ConfigError("sensor '" + s.id + "' is attached to unknown segment '" + s.segment + "'");
      sensor_segment.push_back(*seg);
      sensor_mask.push_back(tree.ancestor_mask({*seg}));
    }
  }

  int pose_dim() const { return tree.dof_count(); }
  int sensors() const { return mode == FitMode::kFusion ? static_cast<int>(rec->sensors.size()) : 0; }
};

// ---------------------------------------------------------------------------
// Threads

/// Worker count: hardware concurrency capped by KINEFUSE_THREADS.
inline int resolve_threads(int requested = 0) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("KINEFUSE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max(1, n);
}

/// Runs f(worker, begin, end) over a static partition of [0, n). Callers
/// write per-item outputs, so results do not depend on the partition.
template <typename F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, std::min(threads, n / 32 + 1));
  if (threads == 1) {
    f(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    const int b = static_cast<int>(static_cast<long long>(n) * w / threads);
    const int e = static_cast<int>(static_cast<long long>(n) * (w + 1) / threads);
    pool.emplace_back([&, w, b, e] { f(w, b, e); });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Per-sample kernels

struct Workspace {
  FkState st;
  FkAdjoint adj;
  FkGradient grad;
  CameraHead cam;
};

/// Raw (unrobustified, unweighted) residual sums for diagnostics.
struct RawResidual {
  double kp_sum = 0.0, rp_sum = 0.0, att_sum = 0.0, gyro_sum = 0.0, phone_sum = 0.0;
  long kp_n = 0, rp_n = 0, att_n = 0, gyro_n = 0, phone_n = 0, behind = 0;

  void add(const RawResidual& o) {
    kp_sum += o.kp_sum; rp_sum += o.rp_sum; att_sum += o.att_sum; gyro_sum += o.gyro_sum; phone_sum += o.phone_sum;
    kp_n += o.kp_n; rp_n += o.rp_n; att_n += o.att_n; gyro_n += o.gyro_n; phone_n += o.phone_n; behind += o.behind;
  }
};

struct SampleOut {
  double loss_a = 0.0, loss_b = 0.0;  // keypoint frames: (3D, 2D); others: loss_a only
  double dgrad = 0.0;                 // d(weighted loss)/d(time offset)
  CalGrad cal = CalGrad::Zero();
  RawResidual raw;
};

namespace detail {

inline Eigen::Matrix<double, 6, 1> head_of(const Eigen::Ref<const Eigen::VectorXd>& y) {
  return y.tail<6>();
}

}  // namespace detail

/// Keypoint frame: 3D keypoint term (scale s_kp) and reprojection term
/// (scale s_rp). With grad, fills gy and accumulates beta gradients in ws.grad.
inline SampleOut keypoint_kernel(const Problem& pb, const FitState& s, const Eigen::VectorXd& factors,
                                 const KeypointFrame& f, const Eigen::Ref<const Eigen::VectorXd>& y, double s_kp,
                                 double s_rp, bool grad, Workspace& ws, Eigen::Ref<Eigen::VectorXd> gy) {
  SampleOut out;
  const int d = pb.pose_dim();
  const int nm = pb.tree.marker_count();
  const auto& w = pb.weights;
  const Eigen::Matrix<double, 6, 1> head = detail::head_of(y);
  ws.cam.evaluate(head, Eigen::Matrix<double, 6, 1>::Zero());
  const Mat3& r = ws.cam.r;
  fk_evaluate(pb.tree, factors, s.beta.offsets, y.head(d), nullptr, ws.st);
  if (grad) ws.adj.reset(pb.tree);
  Mat3 gr = Mat3::Zero();
  const double inv_m = 1.0 / nm;
  const Eigen::VectorXd& c = f.confidence;

  // 3D keypoint term on centered sets.
  double csum = 0.0;
  int npos = 0;
  Vec3 mu_model = Vec3::Zero(), mu_det = Vec3::Zero();
  for (int j = 0; j < nm; ++j) {
    if (!(c(j) > 0.0)) continue;
    const double wj = w.weighted_centering ? c(j) : 1.0;
    mu_model += wj * ws.st.markers[j];
    mu_det += wj * f.p_c.row(j).transpose();
    csum += wj;
    ++npos;
  }
  if (npos > 0) {
    mu_model /= csum;
    mu_det /= csum;
    Vec3 gsum = Vec3::Zero();
    std::vector<Vec3> g(static_cast<std::size_t>(nm), Vec3::Zero());
    for (int j = 0; j < nm; ++j) {
      if (!(c(j) > 0.0)) continue;
      const Vec3 q = f.p_c.row(j).transpose() - mu_det;
      const Vec3 dv = ws.st.markers[j] - mu_model - r * q;
      const double rn = dv.norm();
      out.loss_a += c(j) * huber(rn, w.huber_keypoint_m) * inv_m;
      out.raw.kp_sum += rn;
      ++out.raw.kp_n;
      if (grad && s_kp != 0.0) {
        g[j] = s_kp * c(j) * inv_m * huber_weight(rn, w.huber_keypoint_m) * dv;
        gsum += g[j];
        gr -= g[j] * q.transpose();
      }
    }
    if (grad && s_kp != 0.0) {
      for (int j = 0; j < nm; ++j) {
        if (!(c(j) > 0.0)) continue;
        const double wj = (w.weighted_centering ? c(j) : 1.0) / csum;
        ws.adj.marker[j] += g[j] - wj * gsum;
      }
    }
  }

  // Reprojection term.
  const auto& in = pb.rec->intrinsics;
  for (int j = 0; j < nm; ++j) {
    if (!(c(j) > 0.0)) continue;
    const Vec3& p = ws.st.markers[j];
    const Vec3 q = r.transpose() * p;
    if (!(q.z() > kMinDepth)) {
      ++out.raw.behind;
      continue;
    }
    const Vec2 u(in.fx * q.x() / q.z() + in.cx, in.fy * q.y() / q.z() + in.cy);
    const Vec2 e = u - f.x.row(j).transpose();
    const double rn = e.norm();
    out.loss_b += c(j) * huber(rn, w.huber_reproj_px) * inv_m;
    out.raw.rp_sum += rn;
    ++out.raw.rp_n;
    if (grad && s_rp != 0.0) {
      const Vec2 ge = s_rp * c(j) * inv_m * huber_weight(rn, w.huber_reproj_px) * e;
      const double iz = 1.0 / q.z();
      const Vec3 gq(in.fx * iz * ge.x(), in.fy * iz * ge.y(),
                    -(in.fx * q.x() * ge.x() + in.fy * q.y() * ge.y()) * iz * iz);
      ws.adj.marker[j] += r * gq;
      gr += p * gq.transpose();
    }
  }

  if (grad) {
    ws.grad.theta.setZero();
    fk_backward(pb.tree, y.head(d), nullptr, ws.st, ws.adj, ws.grad);
    gy.head(d) = ws.grad.theta;
    Eigen::Matrix<double, 6, 1> gh = Eigen::Matrix<double, 6, 1>::Zero(), ghd = gh;
    ws.cam.backward(gr, Mat3::Zero(), gh, ghd);
    gy.tail<6>() = gh;
  }
  return out;
}

/// Attitude sample of IMU i at recording time t = tau + delta_i.
inline SampleOut attitude_kernel(const Problem& pb, const FitState& s, int i, int k, double t,
                                 const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::VectorXd* yd, double scale,
                                 bool grad, bool delta_grad, Workspace& ws, Eigen::Ref<Eigen::VectorXd> gy) {
  SampleOut out;
  const int d = pb.pose_dim();
  const int seg = pb.sensor_segment[i];
  const auto& stream = pb.rec->sensors[i];
  const ImuCalibration& cal = s.cal.imus[i];
  const Mat3& a = stream.att_r[k];
  fk_evaluate(pb.tree, s.beta.segment_factors(pb.tree), s.beta.offsets, y.head(d), nullptr, ws.st,
              &pb.sensor_mask[i], false);
  const Mat3& rhat = ws.st.rotation[seg];

  if (!grad) {
    const Mat3 pred = predicted_attitude(cal, a, t, pb.duration);
    const double ang = so3::geodesic_angle(rhat, pred);
    out.loss_a = ang * ang;
    out.raw.att_sum = so3::rad2deg(ang);
    out.raw.att_n = 1;
    return out;
  }

  // L = |log(E)|^2 with E = Rhat P^T and P = D(t) A S. A left perturbation
  // of Rhat by dphi changes L by 2 w . dphi (w = log E); one of P by Omega
  // changes it by -2 w . Omega.
  using J4 = Jet<4>;
  using J13 = Jet<13>;
  Vec4T<J4> qj;
  for (int c = 0; c < 4; ++c) qj(c) = make_jet<4>(cal.q_sb(c), c);
  const Mat3T<J4> sj = so3::quat_to_matrix_raw<J4>(qj);
  std::array<Vec4T<J13>, 3> kj;
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 4; ++c) kj[k](c) = make_jet<13>(cal.knots[k](c), 4 * k + c);
  const Mat3T<J13> dj = so3::piecewise_heading_raw<J13>(kj[0], kj[1], kj[2], make_jet<13>(t, 12), pb.duration);
  Mat3 sm, dm;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      sm(r, c) = sj(r, c).value();
      dm(r, c) = dj(r, c).value();
    }
  const Mat3 da = dm * a;
  const Vec3 w = so3::log_map(rhat * (da * sm).transpose());
  const double l = w.squaredNorm();
  out.loss_a = l;
  out.raw.att_sum = so3::rad2deg(std::sqrt(l));
  out.raw.att_n = 1;

  Eigen::Matrix<double, 17, 1> gx;  // q_sb (4), knots (12), t
  for (int c = 0; c < 4; ++c) {
    Mat3 ds;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) ds(r, k) = sj(r, k).derivatives()(c);
    gx(c) = -2.0 * scale * w.dot(da * so3::vee_skew<double>(Mat3(ds * sm.transpose())));
  }
  for (int c = 0; c < 13; ++c) {
    Mat3 dd;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) dd(r, k) = dj(r, k).derivatives()(c);
    gx(4 + c) = -2.0 * scale * w.dot(so3::vee_skew<double>(Mat3(dd * dm.transpose())));
  }
  ws.adj.reset(pb.tree);
  ws.adj.torque[seg] = 2.0 * scale * w;
  ws.grad.theta.setZero();
  fk_backward(pb.tree, y.head(d), nullptr, ws.st, ws.adj, ws.grad);
  gy.head(d) = ws.grad.theta;
  gy.tail<6>().setZero();
  out.cal = gx.head<kCalibrationParams>();
  if (delta_grad && yd) out.dgrad = gx(16) + ws.grad.theta.dot(yd->head(d));
  return out;
}

/// Sensor gyro sample of IMU i.
inline SampleOut gyro_kernel(const Problem& pb, const FitState& s, int i, int k,
                             const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& yd,
                             const Eigen::VectorXd* ydd, double scale, bool grad, bool delta_grad, Workspace& ws,
                             Eigen::Ref<Eigen::VectorXd> gy, Eigen::Ref<Eigen::VectorXd> gyd) {
  SampleOut out;
  const int d = pb.pose_dim();
  const int seg = pb.sensor_segment[i];
  const Vec3& meas = pb.rec->sensors[i].gyro[k];
  const ImuCalibration& cal = s.cal.imus[i];
  const Eigen::VectorXd th = y.head(d), thd = yd.head(d);
  fk_evaluate(pb.tree, s.beta.segment_factors(pb.tree), s.beta.offsets, th, &thd, ws.st, &pb.sensor_mask[i], false);
  const Vec3& wb = ws.st.omega[seg];

  using J = Jet<4>;
  Vec4T<J> q;
  for (int c = 0; c < 4; ++c) q(c) = make_jet<4>(cal.q_sb(c), c);
  const Mat3T<J> rsb = so3::quat_to_matrix_raw<J>(q);
  const Vec3T<J> res = rsb * wb.cast<J>() - meas.cast<J>();
  const J l = res.squaredNorm();
  out.loss_a = l.value();
  Vec3 rv;
  for (int c = 0; c < 3; ++c) rv(c) = res(c).value();
  out.raw.gyro_sum = so3::rad2deg(rv.norm());
  out.raw.gyro_n = 1;
  if (!grad) return out;

  Mat3 r;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r(a, b) = rsb(a, b).value();
  out.cal.head<4>() = scale * l.derivatives();
  ws.adj.reset(pb.tree);
  ws.adj.omega[seg] = 2.0 * scale * r.transpose() * rv;
  ws.grad.theta.setZero();
  ws.grad.theta_dot.setZero();
  fk_backward(pb.tree, th, &thd, ws.st, ws.adj, ws.grad);
  gy.head(d) = ws.grad.theta;
  gyd.head(d) = ws.grad.theta_dot;
  gy.tail<6>().setZero();
  gyd.tail<6>().setZero();
  if (delta_grad && ydd) out.dgrad = ws.grad.theta.dot(thd) + ws.grad.theta_dot.dot(ydd->head(d));
  return out;
}

/// Phone gyro sample.
inline SampleOut phone_kernel(const Problem& pb, int k, const Eigen::Ref<const Eigen::VectorXd>& y,
                              const Eigen::Ref<const Eigen::VectorXd>& yd, const Eigen::VectorXd* ydd, double scale,
                              bool grad, bool delta_grad, Workspace& ws, Eigen::Ref<Eigen::VectorXd> gy,
                              Eigen::Ref<Eigen::VectorXd> gyd) {
  SampleOut out;
  const Vec3& meas = pb.rec->phone.gyro[k];
  const Eigen::Matrix<double, 6, 1> h = detail::head_of(y), hd = detail::head_of(yd);
  ws.cam.evaluate(h, hd);
  const Mat3 m = ws.cam.r.transpose() * ws.cam.rd;
  const Vec3 rv = so3::vee_skew<double>(m) - meas;
  out.loss_a = rv.squaredNorm();
  out.raw.phone_sum = so3::rad2deg(rv.norm());
  out.raw.phone_n = 1;
  if (!grad) return out;
  const Mat3 gm = 0.5 * so3::hat<double>(Vec3(2.0 * scale * rv));
  Eigen::Matrix<double, 6, 1> gh = Eigen::Matrix<double, 6, 1>::Zero(), ghd = gh;
  ws.cam.backward(ws.cam.rd * gm.transpose(), ws.cam.r * gm, gh, ghd);
  gy.setZero();
  gyd.setZero();
  gy.tail<6>() = gh;
  gyd.tail<6>() = ghd;
  if (delta_grad && ydd) out.dgrad = gh.dot(hd) + ghd.dot(ydd->tail<6>());
  return out;
}

// ---------------------------------------------------------------------------
// Batch evaluation

struct BatchResult {
  LossBreakdown loss;
  RawResidual raw;
};

namespace detail {

struct TimedSample {
  int stream;  // sensor index, or -1
  int index;   // sample index in its stream
  double t;    // recording time
};

}  // namespace detail

/// Alternative trajectory for value-only evaluation: fills y (and yd, ydd up
/// to `order`) of a NetBatch at the given recording times.
using TrajectoryFn = std::function<void(const std::vector<double>& times, int order, NetBatch& out)>;

/// Evaluates the weighted objective on a batch. With `grads`, accumulates
/// gradients of the weighted total into it (which must be reset by the
/// caller). `source` replaces the network for value-only evaluation.
inline BatchResult evaluate_batch(const Problem& pb, const FitState& s, const Batch& batch, const TermWeights& tw,
                                  Gradients* grads, int threads = 1, const TrajectoryFn* source = nullptr) {
  using detail::TimedSample;
  const bool grad = grads != nullptr;
  if (grad && source) throw std::invalid_argument("evaluate_batch: gradients need the network trajectory");
  const auto trajectory = [&](const std::vector<double>& times, int order, NetBatch& nb) {
    if (source) {
      (*source)(times, order, nb);
    } else {
      forward_batch(s.net, times, pb.duration, order, nb);
    }
  };
  const Recording& rec = *pb.rec;
  const int d = pb.pose_dim();
  const int ns = pb.sensors();
  const double duration = pb.duration;
  BatchResult res;

  // Resolve times and drop samples outside the recording window.
  std::vector<TimedSample> kp, att, gyr, ph;
  const bool use_kp = tw.keypoint > 0.0 || tw.reproj > 0.0 || !grad;
  if (use_kp) {
    for (int f : batch.frames) kp.push_back({-1, f, rec.frames[f].t});
  }
  std::vector<int> att_count(ns, 0), gyro_count(ns, 0);
  for (int i = 0; i < ns; ++i) {
    const double delta = s.cal.imus[i].delta;
    if ((tw.attitude > 0.0 || !grad) && i < static_cast<int>(batch.att.size())) {
      for (int k : batch.att[i]) {
        const double t = rec.sensors[i].att_t[k] + delta;
        if (!in_recording_window(t, duration)) continue;
        att.push_back({i, k, t});
        ++att_count[i];
      }
    }
    if ((tw.gyro_sensor > 0.0 || !grad) && i < static_cast<int>(batch.gyro.size())) {
      for (int k : batch.gyro[i]) {
        const double t = rec.sensors[i].gyro_t[k] + delta;
        if (!in_recording_window(t, duration)) continue;
        gyr.push_back({i, k, t});
        ++gyro_count[i];
      }
    }
  }
  if (tw.gyro_phone > 0.0 || !grad) {
    for (int k : batch.phone) {
      const double t = rec.phone.t[k] + s.cal.phone_delta;
      if (in_recording_window(t, duration)) ph.push_back({-1, k, t});
    }
  }
  int att_sensors = 0, gyro_sensors = 0;
  for (int i = 0; i < ns; ++i) {
    att_sensors += att_count[i] > 0;
    gyro_sensors += gyro_count[i] > 0;
  }

  // Per-sample gradient scales.
  const double n_kp = std::max<double>(1.0, static_cast<double>(kp.size()));
  const double s_kp = tw.keypoint / n_kp, s_rp = tw.reproj / n_kp;
  const auto att_scale = [&](int i) { return tw.attitude / (att_sensors * static_cast<double>(att_count[i])); };
  const auto gyro_scale = [&](int i) { return tw.gyro_sensor / (gyro_sensors * static_cast<double>(gyro_count[i])); };
  const double s_ph = ph.empty() ? 0.0 : tw.gyro_phone / static_cast<double>(ph.size());

  const int nthreads = resolve_threads(threads);
  std::vector<Workspace> ws(static_cast<std::size_t>(nthreads));
  for (auto& w : ws) w.grad.reset(pb.tree);
  const Eigen::VectorXd factors = s.beta.segment_factors(pb.tree);
  const int out_dim = s.net.config().output_dim();

  // Keypoint frames: values only.
  std::vector<SampleOut> kp_out(kp.size());
  if (!kp.empty()) {
    std::vector<double> times;
    for (const auto& x : kp) times.push_back(x.t);
    NetBatch nb;
    trajectory(times, 0, nb);
    Eigen::MatrixXd gy = Eigen::MatrixXd::Zero(out_dim, static_cast<Eigen::Index>(kp.size()));
    const int n = static_cast<int>(kp.size());
    Eigen::MatrixXd sf, off;
    if (grad) {
      sf.resize(pb.tree.segment_count(), n);
      off.resize(3 * pb.tree.marker_count(), n);
    }
    parallel_for(n, nthreads, [&](int w, int b, int e) {
      for (int c = b; c < e; ++c) {
        Workspace& W = ws[w];
        if (grad) {
          W.grad.segment_factor.setZero();
          W.grad.offsets.setZero();
        }
        kp_out[c] = keypoint_kernel(pb, s, factors, rec.frames[kp[c].index], nb.y.col(c), s_kp, s_rp, grad, W,
                                    gy.col(c));
        if (grad) {
          sf.col(c) = W.grad.segment_factor;
          off.col(c) = Eigen::Map<const Eigen::VectorXd>(W.grad.offsets.data(), off.rows());
        }
      }
    });
    if (grad) {
      backward_batch(s.net, nb, gy, nullptr, grads->net);
      const Eigen::VectorXd sfs = sf.rowwise().sum();
      grads->scale += pb.tree.scale_map().transpose() * sfs.cwiseProduct(factors);
      const Eigen::VectorXd offs = off.rowwise().sum();
      grads->offsets += Eigen::Map<const MarkerMatrix>(offs.data(), pb.tree.marker_count(), 3);
    }
    for (const auto& o : kp_out) {
      res.loss.keypoint += o.loss_a;
      res.loss.reproj += o.loss_b;
      res.raw.add(o.raw);
    }
    res.loss.keypoint /= n_kp;
    res.loss.reproj /= n_kp;
  }

  // Attitude samples: values, plus rates when offsets are differentiated.
  if (!att.empty()) {
    const int order = grad && tw.imu_delta_grad ? 1 : 0;
    std::vector<double> times;
    for (const auto& x : att) times.push_back(x.t);
    NetBatch nb;
    trajectory(times, order, nb);
    const int n = static_cast<int>(att.size());
    Eigen::MatrixXd gy = Eigen::MatrixXd::Zero(out_dim, n);
    std::vector<SampleOut> out(att.size());
    parallel_for(n, nthreads, [&](int w, int b, int e) {
      Eigen::VectorXd ydc;
      for (int c = b; c < e; ++c) {
        if (order >= 1) ydc = nb.yd.col(c);
        out[c] = attitude_kernel(pb, s, att[c].stream, att[c].index, att[c].t, nb.y.col(c), order >= 1 ? &ydc : nullptr,
                                 grad ? att_scale(att[c].stream) : 0.0, grad, tw.imu_delta_grad, ws[w], gy.col(c));
      }
    });
    if (grad) backward_batch(s.net, nb, gy, nullptr, grads->net);
    std::vector<double> per(ns, 0.0);
    for (int c = 0; c < n; ++c) {
      const int i = att[c].stream;
      per[i] += out[c].loss_a;
      res.raw.add(out[c].raw);
      if (grad) {
        grads->cal[i] += out[c].cal;
        grads->delta[i] += out[c].dgrad;
      }
    }
    for (int i = 0; i < ns; ++i)
      if (att_count[i] > 0) res.loss.attitude += per[i] / att_count[i] / att_sensors;
  }

  // Gyro samples (sensor and phone): values and rates, plus second rates for offsets.
  if (!gyr.empty() || !ph.empty()) {
    const bool need2 = grad && (tw.imu_delta_grad || tw.phone_delta_grad);
    const int order = need2 ? 2 : 1;
    std::vector<double> times;
    for (const auto& x : gyr) times.push_back(x.t);
    for (const auto& x : ph) times.push_back(x.t);
    NetBatch nb;
    trajectory(times, order, nb);
    const int ng = static_cast<int>(gyr.size());
    const int n = ng + static_cast<int>(ph.size());
    Eigen::MatrixXd gy = Eigen::MatrixXd::Zero(out_dim, n), gyd = Eigen::MatrixXd::Zero(out_dim, n);
    std::vector<SampleOut> out(static_cast<std::size_t>(n));
    parallel_for(n, nthreads, [&](int w, int b, int e) {
      Eigen::VectorXd yddc;
      for (int c = b; c < e; ++c) {
        if (order >= 2) yddc = nb.ydd.col(c);
        const Eigen::VectorXd* ydd = order >= 2 ? &yddc : nullptr;
        if (c < ng) {
          const int i = gyr[c].stream;
          out[c] = gyro_kernel(pb, s, i, gyr[c].index, nb.y.col(c), nb.yd.col(c), ydd, grad ? gyro_scale(i) : 0.0,
                               grad, tw.imu_delta_grad, ws[w], gy.col(c), gyd.col(c));
        } else {
          out[c] = phone_kernel(pb, ph[c - ng].index, nb.y.col(c), nb.yd.col(c), ydd, s_ph, grad, tw.phone_delta_grad,
                                ws[w], gy.col(c), gyd.col(c));
        }
      }
    });
    if (grad) backward_batch(s.net, nb, gy, &gyd, grads->net);
    std::vector<double> per(ns, 0.0);
    double phone_sum = 0.0;
    for (int c = 0; c < n; ++c) {
      res.raw.add(out[c].raw);
      if (c < ng) {
        const int i = gyr[c].stream;
        per[i] += out[c].loss_a;
        if (grad) {
          grads->cal[i] += out[c].cal;
          grads->delta[i] += out[c].dgrad;
        }
      } else {
        phone_sum += out[c].loss_a;
        if (grad) grads->phone_delta += out[c].dgrad;
      }
    }
    for (int i = 0; i < ns; ++i)
      if (gyro_count[i] > 0) res.loss.gyro_sensor += per[i] / gyro_count[i] / gyro_sensors;
    if (!ph.empty()) res.loss.gyro_phone = phone_sum / static_cast<double>(ph.size());
  }

  res.loss.total = tw.keypoint * res.loss.keypoint + tw.reproj * res.loss.reproj + tw.attitude * res.loss.attitude +
                   tw.gyro_sensor * res.loss.gyro_sensor + tw.gyro_phone * res.loss.gyro_phone;
  return res;
}

/// Every observation of every stream (the full recording).
inline Batch full_batch(const Problem& pb) {
  Batch b;
  const Recording& rec = *pb.rec;
  for (int f = 0; f < static_cast<int>(rec.frames.size()); ++f) b.frames.push_back(f);
  for (int i = 0; i < pb.sensors(); ++i) {
    b.att.emplace_back();
    b.gyro.emplace_back();
    for (int k = 0; k < static_cast<int>(rec.sensors[i].att_t.size()); ++k) b.att[i].push_back(k);
    for (int k = 0; k < static_cast<int>(rec.sensors[i].gyro_t.size()); ++k) b.gyro[i].push_back(k);
  }
  for (int k = 0; k < static_cast<int>(rec.phone.t.size()); ++k) b.phone.push_back(k);
  return b;
}

// ---------------------------------------------------------------------------
// Residual report

struct ResidualReport {
  std::optional<double> keypoint_cm, reproj_px, phone_gyro_dps, sensor_gyro_dps, attitude_deg;
  long behind_camera = 0;
};

inline std::optional<double> mean_or_absent(double sum, long n) {
  if (n <= 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline ResidualReport residual_report(const RawResidual& raw) {
  ResidualReport r;
  r.keypoint_cm = mean_or_absent(100.0 * raw.kp_sum, raw.kp_n);
  r.reproj_px = mean_or_absent(raw.rp_sum, raw.rp_n);
  r.phone_gyro_dps = mean_or_absent(raw.phone_sum, raw.phone_n);
  r.sensor_gyro_dps = mean_or_absent(raw.gyro_sum, raw.gyro_n);
  r.attitude_deg = mean_or_absent(raw.att_sum, raw.att_n);
  r.behind_camera = raw.behind;
  return r;
}

/// Mean raw residuals over every observation in the recording. Sensor streams
/// only count in fusion mode.
inline ResidualReport stream_residuals(const Problem& pb, const FitState& s, int threads = 1,
                                       const TrajectoryFn* source = nullptr) {
  TermWeights tw;  // values only
  return residual_report(evaluate_batch(pb, s, full_batch(pb), tw, nullptr, threads, source).raw);
}

inline nlohmann::json to_json(const ResidualReport& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"keypoint_cm", opt(r.keypoint_cm)},       {"reproj_px", opt(r.reproj_px)},
          {"phone_gyro_dps", opt(r.phone_gyro_dps)}, {"sensor_gyro_dps", opt(r.sensor_gyro_dps)},
          {"attitude_deg", opt(r.attitude_deg)},     {"behind_camera", r.behind_camera}};
}

}  // namespace kinefuse
