#include "kinefuse/trajectory_net.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdio>

using namespace kinefuse;
namespace kt = kinefuse::testing;

namespace {

NetConfig small_config(Activation act = Activation::kTanh) {
  NetConfig c;
  c.pose_dim = 7;
  c.hidden_layers = 2;
  c.width = 9;
  c.bands = 3;
  c.activation = act;
  return c;
}

// Weights at the scale a trained network reaches.
TrajectoryParams trained_scale(std::uint64_t seed, const NetConfig& cfg) {
  auto p = init_trajectory(seed, cfg);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.05);
  const auto& last = p.layer(p.layer_count() - 1);
  for (Eigen::Index i = static_cast<Eigen::Index>(last.w_off); i < p.size(); ++i) p.data()(i) += n(rng);
  return p;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST(TrajectoryNet, InitIsDeterministicPerSeed) {
  const NetConfig cfg;
  const auto a = init_trajectory(3, cfg), b = init_trajectory(3, cfg), c = init_trajectory(4, cfg);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), sizeof(double) * a.size()), 0);
  EXPECT_GT((a.data() - c.data()).norm(), 1.0);
}

TEST(TrajectoryNet, InitialPoseNearNeutralAndCameraIdentity) {
  const NetConfig cfg;
  const auto p = init_trajectory(11, cfg);
  for (double t = 0.0; t <= 10.0; t += 0.37) {
    const auto o = eval_trajectory(p, t, 10.0);
    EXPECT_LT(o.theta.cwiseAbs().maxCoeff(), 0.1);
    EXPECT_LT(so3::geodesic_angle(o.camera, Mat3::Identity()), 0.1);
  }
}

TEST(TrajectoryNet, OrthonormalizationProducesRotations) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    Eigen::Matrix<double, 6, 1> h;
    for (int k = 0; k < 6; ++k) h(k) = n(rng);
    const Mat3 r = orthonormalize(h);
    EXPECT_LT((r.transpose() * r - Mat3::Identity()).norm(), 1e-9);
    EXPECT_GT(r.determinant(), 0.0);
  }
}

TEST(TrajectoryNet, OrthonormalizationIsIdempotentOnRotations) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Mat3 r = kt::random_rotation(rng);
    Eigen::Matrix<double, 6, 1> h;
    h << r.col(0), r.col(1);
    EXPECT_LT((orthonormalize(h) - r).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(TrajectoryNet, ContinuousInTime) {
  const auto p = trained_scale(5, NetConfig());
  const double duration = 10.0;
  for (double t = 0.0; t < duration; t += 0.53) {
    const auto a = eval_trajectory(p, t, duration), b = eval_trajectory(p, t + 1e-6 * duration, duration);
    EXPECT_LT((a.theta - b.theta).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_LT((a.head - b.head).cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(TrajectoryNet, ConstantNetworkHasZeroDerivative) {
  auto p = trained_scale(6, small_config());
  p.weight(0).setZero();
  const auto [o, r] = eval_with_time_derivative(p, 1.3, 4.0);
  EXPECT_EQ(r.theta_dot.norm(), 0.0);
  EXPECT_EQ(r.camera_dot.norm(), 0.0);
}

TEST(TrajectoryNet, RejectsBadTimes) {
  const auto p = init_trajectory(1, small_config());
  EXPECT_THROW(eval_trajectory(p, std::nan(""), 1.0), NumericalError);
  EXPECT_THROW(eval_trajectory(p, 0.5, 0.0), std::invalid_argument);
}

class TrajectoryNetAct : public ::testing::TestWithParam<Activation> {};

TEST_P(TrajectoryNetAct, TimeDerivativesMatchFiniteDifferences) {
  const NetConfig cfg = [] {
    NetConfig c;
    c.activation = GetParam();
    return c;
  }();
  const auto p = trained_scale(7, cfg);
  const double duration = 10.0, h = 1e-5 * duration;
  for (double t = 0.1; t < duration; t += 0.77) {
    NetBatch b, bp, bm;
    forward_batch(p, {t}, duration, 2, b);
    forward_batch(p, {t + h}, duration, 1, bp);
    forward_batch(p, {t - h}, duration, 1, bm);
    const Eigen::VectorXd fd = (bp.y - bm.y).col(0) / (2 * h);
    const Eigen::VectorXd fdd = (bp.yd - bm.yd).col(0) / (2 * h);
    EXPECT_LT((b.yd.col(0) - fd).norm() / b.yd.col(0).norm(), 1e-4);
    EXPECT_LT((b.ydd.col(0) - fdd).norm() / b.ydd.col(0).norm(), 1e-4);

    const auto [o, r] = eval_with_time_derivative(p, t, duration);
    // Central differences at h and h/2 combined (Richardson) so the oracle's
    // own truncation error stays well below the tolerance for the
    // high-frequency bands.
    const auto central = [&](double s) {
      return Mat3((eval_trajectory(p, t + s, duration).camera - eval_trajectory(p, t - s, duration).camera) / (2 * s));
    };
    const Mat3 fdr = (4.0 * central(0.5 * h) - central(h)) / 3.0;
    EXPECT_LT((r.camera_dot - fdr).norm() / r.camera_dot.norm(), 1e-4);
    const Mat3 w = o.camera.transpose() * r.camera_dot;
    EXPECT_LT((w + w.transpose()).norm(), 1e-8);
  }
}

TEST_P(TrajectoryNetAct, ParameterGradientMatchesFiniteDifferences) {
  NetConfig cfg = small_config(GetParam());
  auto p = trained_scale(8, cfg);
  const std::vector<double> times{0.2, 1.1, 2.9, 3.7, 4.4};
  const double duration = 5.0;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  const int o = cfg.output_dim();
  Eigen::MatrixXd gy(o, 5), gyd(o, 5);
  for (int i = 0; i < o; ++i)
    for (int j = 0; j < 5; ++j) {
      gy(i, j) = n(rng);
      gyd(i, j) = n(rng);
    }
  const auto loss = [&](const TrajectoryParams& q) {
    NetBatch b;
    forward_batch(q, times, duration, 1, b);
    return (gy.array() * b.y.array()).sum() + (gyd.array() * b.yd.array()).sum();
  };
  NetBatch b;
  forward_batch(p, times, duration, 1, b);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(p.size());
  backward_batch(p, b, gy, &gyd, grad);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    auto qp = p, qm = p;
    qp.data()(i) += h;
    qm.data()(i) -= h;
    const double fd = (loss(qp) - loss(qm)) / (2 * h);
    EXPECT_LT(relative_error(grad(i), fd), 1e-4) << "param " << i << " " << grad(i) << " vs " << fd;
  }
}

INSTANTIATE_TEST_SUITE_P(Activations, TrajectoryNetAct, ::testing::Values(Activation::kTanh, Activation::kIsru));

TEST(TrajectoryNet, CameraHeadBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Matrix<double, 6, 1> h, hd;
  for (int i = 0; i < 6; ++i) {
    h(i) = n(rng);
    hd(i) = n(rng);
  }
  Mat3 gr, grd;
  for (int i = 0; i < 9; ++i) {
    gr.data()[i] = n(rng);
    grd.data()[i] = n(rng);
  }
  const auto loss = [&](const Eigen::Matrix<double, 6, 1>& a, const Eigen::Matrix<double, 6, 1>& ad) {
    Mat3 r, rd;
    orthonormalize_with_rate<double>(a, ad, r, rd);
    return (gr.array() * r.array()).sum() + (grd.array() * rd.array()).sum();
  };
  CameraHead cam;
  cam.evaluate(h, hd);
  Eigen::Matrix<double, 6, 1> gh = Eigen::Matrix<double, 6, 1>::Zero(), ghd = gh;
  cam.backward(gr, grd, gh, ghd);
  const double e = 1e-6;
  for (int i = 0; i < 6; ++i) {
    auto hp = h, hm = h;
    hp(i) += e;
    hm(i) -= e;
    EXPECT_NEAR(gh(i), (loss(hp, hd) - loss(hm, hd)) / (2 * e), 1e-7);
    auto dp = hd, dm = hd;
    dp(i) += e;
    dm(i) -= e;
    EXPECT_NEAR(ghd(i), (loss(h, dp) - loss(h, dm)) / (2 * e), 1e-7);
  }
}

TEST(TrajectoryNet, CheckpointRoundTrip) {
  Checkpoint ck;
  ck.net = trained_scale(12, NetConfig());
  ck.descriptor_hash = 0x1234567890abcdefull;
  ck.scenario_hash = 42;
  ck.duration = 10.0;
  ck.blocks.emplace_back("scale", Eigen::VectorXd::LinSpaced(8, -1.0, 1.0));
  const std::string path = ::testing::TempDir() + "/kf_ck.bin";
  write_checkpoint(path, ck);
  const auto back = read_checkpoint(path);
  EXPECT_EQ(back.descriptor_hash, ck.descriptor_hash);
  EXPECT_EQ(back.scenario_hash, 42u);
  EXPECT_EQ(back.net.config().width, ck.net.config().width);
  EXPECT_EQ(back.net.data(), ck.net.data());
  ASSERT_NE(back.find("scale"), nullptr);
  EXPECT_EQ(*back.find("scale"), ck.blocks[0].second);
  std::remove(path.c_str());
  EXPECT_THROW(read_checkpoint(path), IoError);
}
