#include "kinefuse/eval.hpp"
#include "kinefuse/objective.hpp"

#include "test_util.hpp"
#include "tiny_problem.hpp"

#include <gtest/gtest.h>

using namespace kinefuse;
namespace kt = kinefuse::testing;
using kt::tiny;
using kt::Tiny;

namespace {

enum class Term { kKeypoint, kReproj, kAttitude, kGyroSensor, kGyroPhone };

TermWeights only(Term t) {
  TermWeights w;
  switch (t) {
    case Term::kKeypoint: w.keypoint = 1.0; break;
    case Term::kReproj: w.reproj = 1e-4; break;
    case Term::kAttitude: w.attitude = 1.0; break;
    case Term::kGyroSensor: w.gyro_sensor = 1e-3; break;
    case Term::kGyroPhone: w.gyro_phone = 1e-2; break;
  }
  w.imu_delta_grad = true;
  w.phone_delta_grad = true;
  return w;
}

const char* term_name(Term t) {
  switch (t) {
    case Term::kKeypoint: return "keypoint";
    case Term::kReproj: return "reproj";
    case Term::kAttitude: return "attitude";
    case Term::kGyroSensor: return "gyro_sensor";
    case Term::kGyroPhone: return "gyro_phone";
  }
  return "";
}

/// Central-difference gradient of f over n scalar parameters reached by
/// `param(state, i)`.
template <typename P>
Eigen::VectorXd numeric_gradient(const Problem& pb, const FitState& s0, const TermWeights& tw, int n, P param,
                                 double h = 1e-6) {
  Eigen::VectorXd g(n);
  const Batch b = full_batch(pb);
  for (int i = 0; i < n; ++i) {
    FitState sp = s0, sm = s0;
    param(sp, i) += h;
    param(sm, i) -= h;
    g(i) = (evaluate_batch(pb, sp, b, tw, nullptr).loss.total - evaluate_batch(pb, sm, b, tw, nullptr).loss.total) /
           (2 * h);
  }
  return g;
}

void expect_close(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric, const std::string& what) {
  const double scale = std::max(numeric.norm(), analytic.norm());
  if (scale < 1e-9) {
    SUCCEED();
    return;
  }
  EXPECT_LT((analytic - numeric).norm() / scale, 1e-4) << what << "\n analytic " << analytic.transpose()
                                                        << "\n numeric  " << numeric.transpose();
}

class GradientCheck : public ::testing::TestWithParam<Term> {};

}  // namespace

TEST(Objective, HuberPieces) {
  EXPECT_DOUBLE_EQ(huber(0.5, 1.0), 0.125);
  EXPECT_DOUBLE_EQ(huber(1.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(huber(3.0, 1.0), 2.5);
  EXPECT_DOUBLE_EQ(huber_weight(3.0, 1.0), 1.0 / 3.0);
  EXPECT_THROW(huber(-1.0, 1.0), std::invalid_argument);
}

TEST(Objective, AnnealRamp) {
  LossWeights w;
  EXPECT_EQ(w.sensor_factor(0), 0.0);
  EXPECT_EQ(w.sensor_factor(9999), 0.0);
  EXPECT_EQ(w.sensor_factor(10000), 0.0);
  EXPECT_DOUBLE_EQ(w.sensor_factor(12500), 0.5);
  EXPECT_EQ(w.sensor_factor(15000), 1.0);
  EXPECT_EQ(w.sensor_factor(19999), 1.0);
}

TEST_P(GradientCheck, MatchesFiniteDifferences) {
  const Tiny& t = tiny();
  const Problem pb(t.rec, FitMode::kFusion, t.weights);
  const TermWeights tw = only(GetParam());
  const std::string name = term_name(GetParam());
  Gradients g;
  g.reset(t.state);
  const BatchResult r = evaluate_batch(pb, t.state, full_batch(pb), tw, &g);
  ASSERT_GT(r.loss.total, 0.0);

  expect_close(g.net,
               numeric_gradient(pb, t.state, tw, static_cast<int>(t.state.net.size()),
                                [](FitState& s, int i) -> double& { return s.net.data()(i); }),
               name + " / network");
  expect_close(g.scale,
               numeric_gradient(pb, t.state, tw, static_cast<int>(t.state.beta.scale.size()),
                                [](FitState& s, int i) -> double& { return s.beta.scale(i); }),
               name + " / scale");
  expect_close(Eigen::Map<const Eigen::VectorXd>(g.offsets.data(), g.offsets.size()),
               numeric_gradient(pb, t.state, tw, static_cast<int>(t.state.beta.offsets.size()),
                                [](FitState& s, int i) -> double& { return s.beta.offsets.data()[i]; }),
               name + " / offsets");
  for (int i = 0; i < 2; ++i) {
    expect_close(g.cal[i].head<4>(),
                 numeric_gradient(pb, t.state, tw, 4,
                                  [i](FitState& s, int c) -> double& { return s.cal.imus[i].q_sb(c); }),
                 name + " / R_sb " + std::to_string(i));
    expect_close(g.cal[i].tail<12>(),
                 numeric_gradient(pb, t.state, tw, 12,
                                  [i](FitState& s, int c) -> double& { return s.cal.imus[i].knots[c / 4](c % 4); }),
                 name + " / knots " + std::to_string(i));
  }
  expect_close(Eigen::Map<const Eigen::VectorXd>(g.delta.data(), 2),
               numeric_gradient(pb, t.state, tw, 2, [](FitState& s, int i) -> double& { return s.cal.imus[i].delta; }),
               name + " / time offsets");
  expect_close(Eigen::VectorXd::Constant(1, g.phone_delta),
               numeric_gradient(pb, t.state, tw, 1, [](FitState& s, int) -> double& { return s.cal.phone_delta; }),
               name + " / phone offset");
}

INSTANTIATE_TEST_SUITE_P(Terms, GradientCheck,
                         ::testing::Values(Term::kKeypoint, Term::kReproj, Term::kAttitude, Term::kGyroSensor,
                                           Term::kGyroPhone),
                         [](const auto& info) { return std::string(term_name(info.param)); });

// The batched engine against a direct evaluation of each term from the
// single-frame reference forms and the public FK / trajectory API.
TEST(Objective, EngineMatchesReferenceTerms) {
  const Tiny& t = tiny();
  const Problem pb(t.rec, FitMode::kFusion, t.weights);
  const KinematicTree tree = t.rec.tree();
  const FitState& s = t.state;
  const double T = t.rec.duration;
  const BatchResult r = evaluate_batch(pb, s, full_batch(pb), TermWeights{}, nullptr);

  double kp = 0.0, rp = 0.0;
  for (const auto& f : t.rec.frames) {
    const NetOutput o = eval_trajectory(s.net, f.t, T);
    const auto fk = forward_kinematics(tree, s.beta, o.theta);
    MarkerMatrix model(3, 3);
    for (int m = 0; m < 3; ++m) model.row(m) = fk.markers[m].transpose();
    kp += keypoint_loss(model, f.p_c, f.confidence, o.camera, t.weights.huber_keypoint_m);
    rp += reprojection_loss(model, f.x, f.confidence, o.camera, t.rec.intrinsics, t.weights.huber_reproj_px);
  }
  EXPECT_NEAR(r.loss.keypoint, kp / 5.0, 1e-12);
  EXPECT_NEAR(r.loss.reproj, rp / 5.0, 1e-9);

  double att = 0.0, gyro = 0.0;
  for (int i = 0; i < 2; ++i) {
    const auto& st = t.rec.sensors[i];
    const auto& cal = s.cal.imus[i];
    const int seg = *tree.find_segment(st.segment);
    std::vector<Mat3> model, sensor;
    for (std::size_t k = 0; k < st.att_t.size(); ++k) {
      const double tt = st.att_t[k] + cal.delta;
      model.push_back(forward_kinematics(tree, s.beta, eval_trajectory(s.net, tt, T).theta).orientations[seg]);
      sensor.push_back(predicted_attitude(cal, st.att_r[k], tt, T));
    }
    att += attitude_loss(model, sensor) / 2.0;
    double gs = 0.0;
    for (std::size_t k = 0; k < st.gyro_t.size(); ++k) {
      const auto [o, d] = eval_with_time_derivative(s.net, st.gyro_t[k] + cal.delta, T);
      const auto fk = forward_kinematics(tree, s.beta, o.theta);
      const auto rd = fk_time_derivative(tree, s.beta, o.theta, d.theta_dot);
      const Vec3 pred = predicted_sensor_gyro(cal, fk.orientations[seg], rd[seg]);
      gs += gyro_losses({pred}, {st.gyro[k]}, Vec3::Zero(), Vec3::Zero()).first;
    }
    gyro += gs / static_cast<double>(st.gyro_t.size()) / 2.0;
  }
  EXPECT_NEAR(r.loss.attitude, att, 1e-12);
  EXPECT_NEAR(r.loss.gyro_sensor, gyro, 1e-10);

  double ph = 0.0;
  for (std::size_t k = 0; k < t.rec.phone.t.size(); ++k) {
    const auto [o, d] = eval_with_time_derivative(s.net, t.rec.phone.t[k] + s.cal.phone_delta, T);
    ph += gyro_losses({}, {}, predicted_phone_gyro(o.camera, d.camera_dot), t.rec.phone.gyro[k]).second;
  }
  EXPECT_NEAR(r.loss.gyro_phone, ph / 7.0, 1e-10);
}

TEST(Objective, SamplesOutsideRecordingWindowAreExcluded) {
  Tiny t = tiny();
  auto& st = t.rec.sensors[0];
  st.att_t.push_back(5.45);  // resolves to 5.55 > T + 0.5
  st.att_q.push_back(st.att_q.back());
  st.att_r.push_back(st.att_r.back());
  const SensorStream before = tiny().rec.sensors[0];
  const Problem a(tiny().rec, FitMode::kFusion, t.weights);
  const Problem b(t.rec, FitMode::kFusion, t.weights);
  const double la = evaluate_batch(a, t.state, full_batch(a), TermWeights{}, nullptr).loss.attitude;
  const double lb = evaluate_batch(b, t.state, full_batch(b), TermWeights{}, nullptr).loss.attitude;
  EXPECT_EQ(la, lb);
  EXPECT_EQ(before.att_t.size() + 1, t.rec.sensors[0].att_t.size());
}

TEST(Objective, VideoModeIgnoresSensors) {
  const Tiny& t = tiny();
  const Problem pb(t.rec, FitMode::kVideo, t.weights);
  EXPECT_EQ(pb.sensors(), 0);
  const BatchResult r = evaluate_batch(pb, t.state, full_batch(pb), TermWeights{}, nullptr);
  EXPECT_EQ(r.loss.attitude, 0.0);
  EXPECT_EQ(r.raw.att_n, 0);
  EXPECT_EQ(r.raw.gyro_n, 0);
  EXPECT_FALSE(residual_report(r.raw).attitude_deg);
}

TEST(Objective, GradientsIndependentOfThreadCount) {
  const GroundTruth gt(ScenarioConfig::defaults(), KinematicTree::default_lower_body());
  const Recording rec = simulate_recording(gt);
  FitConfig cfg;
  const Problem pb(rec, FitMode::kFusion, cfg.weights);
  FitState s = initial_state(pb, cfg);
  s.cal = gt.calibration();
  const Batch b = sample_batch(pb, 3, 7, 200);
  TermWeights tw = term_weights(pb, cfg.opt, 16000);
  Gradients g1, g3;
  g1.reset(s);
  g3.reset(s);
  const auto r1 = evaluate_batch(pb, s, b, tw, &g1, 1);
  const auto r3 = evaluate_batch(pb, s, b, tw, &g3, 3);
  EXPECT_EQ(r1.loss.total, r3.loss.total);
  EXPECT_EQ(g1.net, g3.net);
  EXPECT_EQ(g1.scale, g3.scale);
  EXPECT_EQ(g1.offsets, g3.offsets);
  EXPECT_EQ(g1.delta, g3.delta);
  EXPECT_EQ(g1.phone_delta, g3.phone_delta);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(g1.cal[i], g3.cal[i]);
}

// With the true trajectory, body, calibration and offsets, a noiseless
// recording is explained exactly.
TEST(Objective, ClosedLoopZeroAtTruth) {
  ScenarioConfig c = ScenarioConfig::defaults();
  c.attitude_noise_deg = 0.0;
  c.gyro_noise_dps = 0.0;
  c.phone_gyro_noise_dps = 0.0;
  c.phone_time_offset_s = 0.05;
  const GroundTruth gt(c, KinematicTree::default_lower_body());
  const Recording rec = simulate_recording(gt);
  FitConfig cfg;
  const Problem pb(rec, FitMode::kFusion, cfg.weights);
  FitState s = initial_state(pb, cfg);
  s.beta = gt.beta();
  s.cal = gt.calibration();
  const TrajectoryFn truth = truth_trajectory(gt);
  const BatchResult r = evaluate_batch(pb, s, full_batch(pb), TermWeights{}, nullptr, 1, &truth);
  EXPECT_LT(r.loss.keypoint, 1e-10);
  EXPECT_LT(r.loss.reproj, 1e-10);
  EXPECT_LT(r.loss.attitude, 1e-10);
  EXPECT_LT(r.loss.gyro_sensor, 1e-10);
  EXPECT_LT(r.loss.gyro_phone, 1e-10);
  const ResidualReport rr = stream_residuals(pb, s, 1, &truth);
  EXPECT_LT(*rr.keypoint_cm, 1e-3);
  EXPECT_LT(*rr.reproj_px, 1e-3);
  EXPECT_LT(*rr.attitude_deg, 1e-3);
  EXPECT_LT(*rr.sensor_gyro_dps, 1e-3);
  EXPECT_LT(*rr.phone_gyro_dps, 1e-3);

  // Sanity: a wrong offset is visible.
  s.cal.imus[0].delta = 0.1;
  const ResidualReport bad = stream_residuals(pb, s, 1, &truth);
  EXPECT_GT(*bad.sensor_gyro_dps, 1.0);
}
