#pragma once

// Implicit trajectory f_phi: recording time -> (pose vector, camera rotation).
//
// Time is normalized by the recording length, encoded with sinusoidal
// features and fed through a smooth perceptron. Outputs are [theta (D),
// camera head (6)]. Value, first and second time derivatives are carried
// through the network in lockstep so the optimizer can differentiate losses
// that themselves depend on rates.

#include "kinefuse/autodiff.hpp"
#include "kinefuse/errors.hpp"
#include "kinefuse/so3.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace kinefuse {

enum class Activation : std::uint32_t { kTanh = 0, kIsru = 1 };

struct NetConfig {
  int pose_dim = 20;
  int hidden_layers = 3;
  int width = 64;
  int bands = 8;              // sinusoidal frequency bands, base period = T
  Activation activation = Activation::kIsru;  // x / sqrt(1 + x^2)
  double output_init = 1e-3;  // std of output-layer weights at init

  int input_dim() const { return 1 + 2 * bands; }
  int output_dim() const { return pose_dim + 6; }
};

inline const char* activation_name(Activation a) { return a == Activation::kTanh ? "tanh" : "isru"; }
inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "isru") return Activation::kIsru;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Flat parameter vector plus the layer index map.
class TrajectoryParams {
 public:
  TrajectoryParams() = default;
  explicit TrajectoryParams(const NetConfig& cfg) : cfg_(cfg) {
    if (cfg.hidden_layers < 1 || cfg.width < 1 || cfg.bands < 0 || cfg.pose_dim < 6) {
      throw ConfigError("invalid network configuration");
    }
    std::size_t off = 0;
    int in = cfg.input_dim();
    for (int l = 0; l <= cfg.hidden_layers; ++l) {
      const int out = l == cfg.hidden_layers ? cfg.output_dim() : cfg.width;
      layers_.push_back({in, out, off, off + static_cast<std::size_t>(in) * out});
      off += static_cast<std::size_t>(in + 1) * out;
      in = out;
    }
    data_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(off));
  }

  struct Layer {
    int in, out;
    std::size_t w_off, b_off;
  };

  const NetConfig& config() const { return cfg_; }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  const Layer& layer(int l) const { return layers_[l]; }
  Eigen::VectorXd& data() { return data_; }
  const Eigen::VectorXd& data() const { return data_; }
  Eigen::Index size() const { return data_.size(); }

  Eigen::Map<const Eigen::MatrixXd> weight(int l) const {
    return {data_.data() + layers_[l].w_off, layers_[l].out, layers_[l].in};
  }
  Eigen::Map<Eigen::MatrixXd> weight(int l) { return {data_.data() + layers_[l].w_off, layers_[l].out, layers_[l].in}; }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const { return {data_.data() + layers_[l].b_off, layers_[l].out}; }
  Eigen::Map<Eigen::VectorXd> bias(int l) { return {data_.data() + layers_[l].b_off, layers_[l].out}; }

  static Eigen::Map<Eigen::MatrixXd> weight_in(Eigen::VectorXd& flat, const Layer& ly) {
    return {flat.data() + ly.w_off, ly.out, ly.in};
  }
  static Eigen::Map<Eigen::VectorXd> bias_in(Eigen::VectorXd& flat, const Layer& ly) {
    return {flat.data() + ly.b_off, ly.out};
  }

 private:
  NetConfig cfg_;
  std::vector<Layer> layers_;
  Eigen::VectorXd data_;
};

/// Deterministic initialization. Hidden layers use LeCun-normal weights; the
/// output layer starts near zero with the camera head biased to identity.
inline TrajectoryParams init_trajectory(std::uint64_t seed, const NetConfig& cfg) {
  TrajectoryParams p(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int l = 0; l < p.layer_count(); ++l) {
    auto w = p.weight(l);
    const bool last = l + 1 == p.layer_count();
    const double sd = last ? cfg.output_init : 1.0 / std::sqrt(static_cast<double>(p.layer(l).in));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = sd * n01(rng);
    p.bias(l).setZero();
  }
  auto b = p.bias(p.layer_count() - 1);
  b.tail<6>() << 1, 0, 0, 0, 1, 0;
  return p;
}

// ---------------------------------------------------------------------------
// Camera head: 6 reals -> rotation by Gram-Schmidt on the two 3-vectors.

/// Orthonormalizes head (a, b) and propagates the head rate (ad, bd).
template <typename T>
void orthonormalize_with_rate(const Eigen::Matrix<T, 6, 1>& h, const Eigen::Matrix<T, 6, 1>& hd,
                              Mat3T<T>& r, Mat3T<T>& rd) {
  using std::sqrt;
  const Vec3T<T> a = h.template head<3>(), b = h.template tail<3>();
  const Vec3T<T> ad = hd.template head<3>(), bd = hd.template tail<3>();
  const T n = sqrt(a.squaredNorm());
  const Vec3T<T> e1 = a / n;
  const Vec3T<T> e1d = (ad - e1 * e1.dot(ad)) / n;
  const T c = e1.dot(b);
  const T cd = e1d.dot(b) + e1.dot(bd);
  const Vec3T<T> bp = b - c * e1;
  const Vec3T<T> bpd = bd - cd * e1 - c * e1d;
  const T m = sqrt(bp.squaredNorm());
  const Vec3T<T> e2 = bp / m;
  const Vec3T<T> e2d = (bpd - e2 * e2.dot(bpd)) / m;
  r.col(0) = e1;
  r.col(1) = e2;
  r.col(2) = e1.cross(e2);
  rd.col(0) = e1d;
  rd.col(1) = e2d;
  rd.col(2) = e1d.cross(e2) + e1.cross(e2d);
}

inline Mat3 orthonormalize(const Eigen::Matrix<double, 6, 1>& h) {
  Mat3 r, rd;
  orthonormalize_with_rate<double>(h, Eigen::Matrix<double, 6, 1>::Zero(), r, rd);
  return r;
}

/// Camera rotation, its rate and (optionally) second rate, with the Jacobian
/// needed to pull matrix adjoints back onto the head.
struct CameraHead {
  Mat3 r, rd, rdd;
  Eigen::Matrix<double, 9, 12> jr;   // d vec(R) / d(h, hd)
  Eigen::Matrix<double, 9, 12> jrd;  // d vec(Rd) / d(h, hd)

  void evaluate(const Eigen::Matrix<double, 6, 1>& h, const Eigen::Matrix<double, 6, 1>& hd,
                const Eigen::Matrix<double, 6, 1>* hdd = nullptr) {
    using J = Jet<12>;
    Eigen::Matrix<J, 6, 1> hj, hdj;
    for (int i = 0; i < 6; ++i) {
      hj(i) = make_jet<12>(h(i), i);
      hdj(i) = make_jet<12>(hd(i), 6 + i);
    }
    Mat3T<J> rj, rdj;
    orthonormalize_with_rate<J>(hj, hdj, rj, rdj);
    for (int c = 0; c < 3; ++c)
      for (int a = 0; a < 3; ++a) {
        r(a, c) = rj(a, c).value();
        rd(a, c) = rdj(a, c).value();
        jr.row(3 * c + a) = rj(a, c).derivatives().transpose();
        jrd.row(3 * c + a) = rdj(a, c).derivatives().transpose();
      }
    if (hdd) {
      Eigen::Matrix<double, 12, 1> v;
      v << hd, *hdd;
      const Eigen::Matrix<double, 9, 1> x = jrd * v;
      rdd = Eigen::Map<const Mat3>(x.data());
    } else {
      rdd.setZero();
    }
  }

  /// Pulls dL/dR and dL/dRd back to (dL/dh, dL/dhd).
  void backward(const Mat3& gr, const Mat3& grd, Eigen::Ref<Eigen::Matrix<double, 6, 1>> gh,
                Eigen::Ref<Eigen::Matrix<double, 6, 1>> ghd) const {
    const Eigen::Matrix<double, 12, 1> g =
        jr.transpose() * Eigen::Map<const Eigen::Matrix<double, 9, 1>>(gr.data()) +
        jrd.transpose() * Eigen::Map<const Eigen::Matrix<double, 9, 1>>(grd.data());
    gh += g.head<6>();
    ghd += g.tail<6>();
  }
};

// ---------------------------------------------------------------------------
// Batched evaluation

/// Forward cache for a batch of N times. Column n of y/yd/ydd holds the
/// output, its time derivative and second derivative at times[n].
struct NetBatch {
  int order = 0;  // 0: values, 1: + first rates, 2: + second rates
  Eigen::MatrixXd y, yd, ydd;
  // Per layer: stacked inputs [X | XD | XDD] and activation derivatives.
  std::vector<Eigen::MatrixXd> input;
  std::vector<Eigen::MatrixXd> s1, s2, ad;
  int columns() const { return static_cast<int>(y.cols()); }
};

namespace detail {

inline void encode_times(const std::vector<double>& times, double duration, int bands, int order,
                         Eigen::MatrixXd& x) {
  const int n = static_cast<int>(times.size());
  const int in = 1 + 2 * bands;
  x.resize(in, n * (order + 1));
  x.setZero();
  const double du = 1.0 / duration;
  for (int c = 0; c < n; ++c) {
    const double u = times[c] * du;
    x(0, c) = u;
    if (order >= 1) x(0, n + c) = du;
    for (int k = 0; k < bands; ++k) {
      const double w = 2.0 * so3::kPi * std::ldexp(1.0, k);
      const double s = std::sin(w * u), co = std::cos(w * u);
      x(1 + 2 * k, c) = s;
      x(2 + 2 * k, c) = co;
      if (order >= 1) {
        const double wd = w * du;
        x(1 + 2 * k, n + c) = wd * co;
        x(2 + 2 * k, n + c) = -wd * s;
        if (order >= 2) {
          x(1 + 2 * k, 2 * n + c) = -wd * wd * s;
          x(2 + 2 * k, 2 * n + c) = -wd * wd * co;
        }
      }
    }
  }
}

}  // namespace detail

/// Evaluates the network at `times` (recording clock) with derivatives up to
/// `order`. Fills every cache the backward pass needs.
inline void forward_batch(const TrajectoryParams& p, const std::vector<double>& times, double duration,
                          int order, NetBatch& out) {
  if (!(duration > 0.0)) throw std::invalid_argument("trajectory: duration must be positive");
  for (double t : times) {
    if (!std::isfinite(t)) throw NumericalError("trajectory: non-finite time");
  }
  const NetConfig& cfg = p.config();
  const int n = static_cast<int>(times.size());
  const int nl = p.layer_count();
  out.order = order;
  out.input.resize(nl);
  out.s1.resize(nl - 1);
  out.s2.resize(nl - 1);
  out.ad.resize(nl - 1);
  detail::encode_times(times, duration, cfg.bands, order, out.input[0]);

  for (int l = 0; l < nl; ++l) {
    const auto w = p.weight(l);
    const auto b = p.bias(l);
    Eigen::MatrixXd a = w * out.input[l];
    a.leftCols(n).colwise() += b;
    if (l + 1 == nl) {
      out.y = a.leftCols(n);
      if (order >= 1) out.yd = a.middleCols(n, n);
      else out.yd.resize(0, 0);
      if (order >= 2) out.ydd = a.middleCols(2 * n, n);
      else out.ydd.resize(0, 0);
      break;
    }
    auto av = a.leftCols(n).array();
    Eigen::MatrixXd& s1 = out.s1[l];
    Eigen::MatrixXd& s2 = out.s2[l];
    Eigen::MatrixXd& next = out.input[l + 1];
    next.resize(a.rows(), a.cols());
    if (cfg.activation == Activation::kTanh) {
      const Eigen::ArrayXXd h = av.tanh();
      next.leftCols(n) = h.matrix();
      s1 = (1.0 - h.square()).matrix();
      if (order >= 1) s2 = (-2.0 * h * s1.array()).matrix();
    } else {
      const Eigen::ArrayXXd r = (1.0 + av.square()).rsqrt();
      next.leftCols(n) = (av * r).matrix();
      s1 = r.cube().matrix();
      if (order >= 1) s2 = (-3.0 * av * s1.array() * r.square()).matrix();
    }
    if (order >= 1) {
      out.ad[l] = a.middleCols(n, n);
      next.middleCols(n, n) = (s1.array() * out.ad[l].array()).matrix();
      if (order >= 2) {
        next.middleCols(2 * n, n) = (s2.array() * out.ad[l].array().square() +
                                     s1.array() * a.middleCols(2 * n, n).array())
                                        .matrix();
      }
    } else {
      out.ad[l].resize(0, 0);
    }
  }
}

/// Accumulates dL/dphi given adjoints for y (and yd when order >= 1).
/// Second-rate outputs carry no parameter gradient: they only feed
/// time-offset derivatives.
inline void backward_batch(const TrajectoryParams& p, const NetBatch& fw, const Eigen::MatrixXd& gy,
                           const Eigen::MatrixXd* gyd, Eigen::VectorXd& grad) {
  const int n = fw.columns();
  const int nl = p.layer_count();
  const bool rates = gyd != nullptr && fw.order >= 1;
  Eigen::MatrixXd g(gy.rows(), rates ? 2 * n : n);
  g.leftCols(n) = gy;
  if (rates) g.middleCols(n, n) = *gyd;

  for (int l = nl - 1; l >= 0; --l) {
    const auto& ly = p.layer(l);
    const Eigen::MatrixXd& x = fw.input[l];
    auto gw = TrajectoryParams::weight_in(grad, ly);
    auto gb = TrajectoryParams::bias_in(grad, ly);
    gw.noalias() += g * x.leftCols(g.cols()).transpose();
    gb += g.leftCols(n).rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd gx = p.weight(l).transpose() * g;
    // Through the activation of layer l-1: h = s(a), hd = s'(a) ad.
    const auto& s1 = fw.s1[l - 1];
    Eigen::MatrixXd ga(gx.rows(), gx.cols());
    if (rates) {
      ga.leftCols(n) = (gx.leftCols(n).array() * s1.array() +
                        gx.middleCols(n, n).array() * fw.s2[l - 1].array() * fw.ad[l - 1].array())
                           .matrix();
      ga.middleCols(n, n) = (gx.middleCols(n, n).array() * s1.array()).matrix();
    } else {
      ga = (gx.array() * s1.array()).matrix();
    }
    g.swap(ga);
  }
}

// ---------------------------------------------------------------------------
// Single-time API

struct NetOutput {
  Eigen::VectorXd theta;
  Eigen::Matrix<double, 6, 1> head;
  Mat3 camera;  // R_nc
};

struct NetOutputRate {
  Eigen::VectorXd theta_dot;
  Eigen::Matrix<double, 6, 1> head_dot;
  Mat3 camera_dot;
};

inline NetOutput eval_trajectory(const TrajectoryParams& p, double t, double duration) {
  NetBatch b;
  forward_batch(p, {t}, duration, 0, b);
  const int d = p.config().pose_dim;
  NetOutput o;
  o.theta = b.y.col(0).head(d);
  o.head = b.y.col(0).tail<6>();
  o.camera = orthonormalize(o.head);
  return o;
}

inline std::pair<NetOutput, NetOutputRate> eval_with_time_derivative(const TrajectoryParams& p, double t,
                                                                     double duration) {
  NetBatch b;
  forward_batch(p, {t}, duration, 1, b);
  const int d = p.config().pose_dim;
  NetOutput o;
  NetOutputRate r;
  o.theta = b.y.col(0).head(d);
  o.head = b.y.col(0).tail<6>();
  r.theta_dot = b.yd.col(0).head(d);
  r.head_dot = b.yd.col(0).tail<6>();
  orthonormalize_with_rate<double>(o.head, r.head_dot, o.camera, r.camera_dot);
  return {o, r};
}

// ---------------------------------------------------------------------------
// Checkpoint: little-endian binary with a config header.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline double get_f64(std::istream& is) {
  const std::uint64_t v = get_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointMagic = 0x4b43464bu;  // "KFCK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Network parameters plus named auxiliary blocks (scale, calibrations, ...).
struct Checkpoint {
  TrajectoryParams net;
  std::uint64_t descriptor_hash = 0;
  std::uint64_t scenario_hash = 0;
  double duration = 0.0;
  std::vector<std::pair<std::string, Eigen::VectorXd>> blocks;

  const Eigen::VectorXd* find(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.first == name) return &b.second;
    return nullptr;
  }
};

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path + "'");
  using namespace detail;
  const NetConfig& c = ck.net.config();
  put_u32(os, kCheckpointMagic);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(c.pose_dim));
  put_u32(os, static_cast<std::uint32_t>(c.hidden_layers));
  put_u32(os, static_cast<std::uint32_t>(c.width));
  put_u32(os, static_cast<std::uint32_t>(c.bands));
  put_u32(os, static_cast<std::uint32_t>(c.activation));
  put_u64(os, ck.descriptor_hash);
  put_u64(os, ck.scenario_hash);
  put_f64(os, ck.duration);
  put_u64(os, static_cast<std::uint64_t>(ck.net.size()));
  for (Eigen::Index i = 0; i < ck.net.size(); ++i) put_f64(os, ck.net.data()(i));
  put_u32(os, static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& [name, v] : ck.blocks) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(os, v(i));
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  using namespace detail;
  if (get_u32(is) != kCheckpointMagic) throw IoError("'" + path + "' is not a checkpoint");
  if (get_u32(is) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  NetConfig c;
  c.pose_dim = static_cast<int>(get_u32(is));
  c.hidden_layers = static_cast<int>(get_u32(is));
  c.width = static_cast<int>(get_u32(is));
  c.bands = static_cast<int>(get_u32(is));
  c.activation = static_cast<Activation>(get_u32(is));
  Checkpoint ck;
  ck.descriptor_hash = get_u64(is);
  ck.scenario_hash = get_u64(is);
  ck.duration = get_f64(is);
  ck.net = TrajectoryParams(c);
  if (get_u64(is) != static_cast<std::uint64_t>(ck.net.size())) {
    throw IoError("checkpoint parameter count does not match its header");
  }
  for (Eigen::Index i = 0; i < ck.net.size(); ++i) ck.net.data()(i) = get_f64(is);
  const std::uint32_t nb = get_u32(is);
  for (std::uint32_t k = 0; k < nb; ++k) {
    const std::uint32_t len = get_u32(is);
    if (len > 4096) throw IoError("checkpoint block name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("checkpoint truncated");
    const std::uint64_t n = get_u64(is);
    if (n > (1ull << 32)) throw IoError("checkpoint block too large");
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = get_f64(is);
    ck.blocks.emplace_back(std::move(name), std::move(v));
  }
  return ck;
}

}  // namespace kinefuse
