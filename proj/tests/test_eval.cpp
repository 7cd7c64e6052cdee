#include "kinefuse/eval.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace kinefuse;

TEST(Metrics, MeanAbsoluteError) {
  EXPECT_NEAR(mae({1, 2, 3}, {2, 3, 5}), 4.0 / 3.0, 1e-15);
  EXPECT_EQ(mae({0, 10}, {10, 0}), 10.0);
  EXPECT_THROW(mae({1, 2}, {1}), std::invalid_argument);
  EXPECT_THROW(mae({}, {}), std::invalid_argument);
}

TEST(Metrics, MeanAdjustedErrorIgnoresConstantOffset) {
  const std::vector<double> a{1, 4, 2, 8, 5};
  std::vector<double> b = a;
  for (double& x : b) x += 17.5;
  EXPECT_NEAR(mae_ma(a, b), 0.0, 1e-12);
  EXPECT_NEAR(mae(a, b), 17.5, 1e-12);
  // [1,2,3] - 2 = [-1,0,1]; [2,3,5] - 10/3 = [-4/3,-1/3,5/3]; |diff| = [1/3,1/3,2/3].
  EXPECT_NEAR(mae_ma({1, 2, 3}, {2, 3, 5}), 4.0 / 9.0, 1e-15);
}

TEST(Metrics, PearsonAffineInvariance) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(500), b(500), c(500);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = n(rng);
    b[i] = 2 * a[i] + 3;
    c[i] = -0.5 * a[i] + 1;
  }
  EXPECT_NEAR(*pearson(a, b), 1.0, 1e-12);
  EXPECT_NEAR(*pearson(a, c), -1.0, 1e-12);
  std::vector<double> d(500), e(500);
  for (std::size_t i = 0; i < a.size(); ++i) {
    d[i] = a[i] + n(rng);
    e[i] = 4 * d[i] - 9;
  }
  EXPECT_NEAR(*pearson(a, d), *pearson(a, e), 1e-12);
}

TEST(Metrics, PearsonOfIndependentNoiseIsSmall) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(10000), b(10000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = n(rng);
    b[i] = n(rng);
  }
  EXPECT_LT(std::abs(*pearson(a, b)), 0.05);
}

TEST(Metrics, PearsonAbsentForConstantSeries) {
  EXPECT_FALSE(pearson({1, 1, 1}, {1, 2, 3}));
  EXPECT_NEAR(*pearson({1, 2, 3}, {2, 4, 7}), 0.9933992677987828, 1e-12);
}

namespace {

ScenarioConfig occluded_scenario() {
  ScenarioConfig c = ScenarioConfig::defaults();
  c.duration = 4.0;
  c.attitude_noise_deg = 0.0;
  c.occlusion = true;
  return c;
}

}  // namespace

// The truth compared with itself: zero joint errors, perfect correlation and
// a composite orientation error limited by attitude interpolation.
TEST(Comparison, TruthAgainstItself) {
  const GroundTruth gt(occluded_scenario(), KinematicTree::default_lower_body());
  const Recording rec = simulate_recording(gt);
  const TruthRecord truth = make_truth_record(gt);
  const Problem pb(rec, FitMode::kFusion, LossWeights{});
  FitState s = initial_state(pb, FitConfig{});
  s.cal = gt.calibration();
  s.beta = gt.beta();
  const TrajectoryFn src = truth_trajectory(gt);
  const ComparisonReport r = compare_to_truth(pb, s, truth, &src);

  EXPECT_EQ(r.mode, "fusion");
  EXPECT_EQ(r.scenario_hash, gt.config().hash());
  EXPECT_EQ(r.timestamps.size(), 116u);
  ASSERT_EQ(r.joints.size(), 8u);
  for (const auto& m : r.joints) {
    EXPECT_LT(m.mae, 1e-12) << m.joint << " " << m.window;
    EXPECT_NEAR(*m.pearson, 1.0, 1e-12);
  }
  // Occluded window [0.25, 0.75) of 4 s at 29 Hz: t = k / 29 for k = 29..86.
  EXPECT_EQ(r.find("l_knee", "occluded")->samples, 58);
  EXPECT_EQ(r.find("r_hip", "full")->samples, 116);
  ASSERT_TRUE(r.orientation_deg);
  EXPECT_LT(*r.orientation_deg, 0.2);
  ASSERT_EQ(r.time_offset_error_s.size(), 2u);
  EXPECT_EQ(r.time_offset_error_s[0], 0.0);
  EXPECT_EQ(*r.phone_time_offset_error_s, 0.0);

  // A wrong mount is visible in the composite metric.
  s.cal.imus[1].q_sb = so3::UnitQuaternion::from_axis_angle(Vec3::UnitX(), so3::deg2rad(10.0)).coeffs();
  EXPECT_GT(*compare_to_truth(pb, s, truth, &src).orientation_deg, 5.0);
}

TEST(Comparison, VideoReportHasNoSensorMetrics) {
  const GroundTruth gt(occluded_scenario(), KinematicTree::default_lower_body());
  const Recording rec = simulate_recording(gt);
  const TruthRecord truth = make_truth_record(gt);
  const Problem pb(rec, FitMode::kVideo, LossWeights{});
  const FitState s = initial_state(pb, FitConfig{});
  const ComparisonReport r = compare_to_truth(pb, s, truth);
  EXPECT_EQ(r.mode, "video");
  EXPECT_FALSE(r.orientation_deg);
  EXPECT_TRUE(r.time_offset_error_s.empty());
  const auto j = to_json(r);
  EXPECT_TRUE(j["orientation_deg"].is_null());
  EXPECT_EQ(j["joints"].size(), 8u);
}

TEST(Comparison, CsvAndPairedDeltas) {
  ComparisonReport a, b;
  a.mode = "video";
  b.mode = "fusion";
  a.joints = {joint_metrics("l_knee", "full", {1, 2, 3}, {2, 3, 5})};
  b.joints = {joint_metrics("l_knee", "full", {2, 3, 5}, {2, 3, 5})};
  const std::string csv = comparison_csv({{"v", a}, {"f", b}});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.rfind("label,scenario_hash,mode,joint,window,mae_deg,mae_ma_deg,pearson,samples\n", 0), 0u);
  const auto d = paired_deltas(a, b);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR(d[0]["delta_mae_deg"].get<double>(), -4.0 / 3.0, 1e-12);
  EXPECT_NEAR(d[0]["delta_mae_ma_deg"].get<double>(), -4.0 / 9.0, 1e-12);
  EXPECT_NEAR(d[0]["delta_pearson"].get<double>(), 1.0 - 3.0 / std::sqrt(84.0 / 9.0), 1e-12);
  const std::string p = paired_csv("v", a, "f", b);
  EXPECT_NE(p.find("f-v,l_knee,full,"), std::string::npos);
}
