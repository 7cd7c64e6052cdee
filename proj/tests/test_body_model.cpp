#include "kinefuse/body_model.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <fstream>

using namespace kinefuse;
namespace kt = kinefuse::testing;

namespace {

const KinematicTree& tree() {
  static const KinematicTree t = KinematicTree::default_lower_body();
  return t;
}

PoseVector random_pose(std::mt19937_64& rng, const KinematicTree& t, double spread = 0.8) {
  std::uniform_real_distribution<double> uni(-spread, spread);
  PoseVector th(t.dof_count());
  for (int i = 0; i < th.size(); ++i) th(i) = uni(rng);
  return th;
}

ScaleParams random_scale(std::mt19937_64& rng, const KinematicTree& t) {
  std::uniform_real_distribution<double> uni(-0.2, 0.2), off(-0.04, 0.04);
  auto b = ScaleParams::neutral(t);
  for (int i = 0; i < b.scale.size(); ++i) b.scale(i) = uni(rng);
  for (int m = 0; m < b.offsets.rows(); ++m)
    for (int c = 0; c < 3; ++c) b.offsets(m, c) = off(rng);
  return b;
}

// Independent forward kinematics by composing rigid transforms.
std::vector<Eigen::Isometry3d> compose_frames(const KinematicTree& t, const ScaleParams& b,
                                              const PoseVector& th) {
  const Eigen::VectorXd s = (t.scale_map() * b.scale).array().exp().matrix();
  std::vector<Eigen::Isometry3d> frames(t.segment_count());
  for (int k = 0; k < t.segment_count(); ++k) {
    const Segment& seg = t.segment(k);
    Eigen::Isometry3d x = Eigen::Isometry3d::Identity();
    if (seg.parent < 0) {
      const Vec3 r = th.segment<3>(3);
      x.translate(th.head<3>());
      if (r.norm() > 0) x.rotate(Eigen::AngleAxisd(r.norm(), r.normalized()));
    } else {
      x = frames[seg.parent];
      x.translate(s(seg.parent) * seg.rest_offset);
      for (std::size_t i = 0; i < seg.dofs.size(); ++i)
        x.rotate(Eigen::AngleAxisd(th(seg.first_dof + static_cast<int>(i)), seg.dofs[i].axis));
    }
    frames[k] = x;
  }
  return frames;
}

Vec3 oracle_marker(const KinematicTree& t, const ScaleParams& b, const PoseVector& th, int m) {
  const auto frames = compose_frames(t, b, th);
  const Marker& mk = t.marker(m);
  const double s = std::exp(t.scale_map().row(mk.segment).dot(b.scale));
  return frames[mk.segment] * (s * mk.local_position + b.offsets.row(m).transpose());
}

nlohmann::json tiny_descriptor() {
  return nlohmann::json::parse(R"({
    "schema": "kinefuse.body_model/1",
    "scale_parameters": ["overall"],
    "segments": [
      {"name": "base", "parent": null, "joint": {"name": "root", "type": "free"}, "scale": ["overall"]},
      {"name": "link", "parent": "base", "offset": [0, 0, 1], "scale": ["overall"],
       "joint": {"name": "elbow", "type": "hinge", "dofs": [{"name": "elbow_flexion", "axis": [0, 1, 0]}]}}
    ],
    "markers": [{"name": "tip", "segment": "link", "position": [0, 0, 1]}]
  })");
}

}  // namespace

TEST(BodyModel, DefaultDescriptorCounts) {
  EXPECT_EQ(tree().segment_count(), 11);
  EXPECT_EQ(tree().dof_count(), 20);
  EXPECT_EQ(tree().marker_count(), 16);
  EXPECT_EQ(tree().scale_count(), 8);
  EXPECT_EQ(tree().segment(0).name, "pelvis");
}

TEST(BodyModel, ShippedFileMatchesEmbeddedDescriptor) {
  const auto from_file = KinematicTree::from_file(std::string(KINEFUSE_DATA_DIR) + "/models/lower_body.json");
  EXPECT_EQ(from_file.descriptor_hash(), tree().descriptor_hash());
}

TEST(BodyModel, RejectsSelfParent) {
  auto d = tiny_descriptor();
  d["segments"][1]["parent"] = "link";
  EXPECT_THROW(KinematicTree::from_json(d), ConfigError);
}

TEST(BodyModel, RejectsCycle) {
  auto d = tiny_descriptor();
  d["segments"].push_back(nlohmann::json::parse(
      R"({"name": "a", "parent": "b", "joint": {"name": "ja", "type": "fixed"}})"));
  d["segments"].push_back(nlohmann::json::parse(
      R"({"name": "b", "parent": "a", "joint": {"name": "jb", "type": "fixed"}})"));
  EXPECT_THROW(KinematicTree::from_json(d), ConfigError);
}

TEST(BodyModel, RejectsDuplicateMarkers) {
  auto d = tiny_descriptor();
  d["markers"].push_back(d["markers"][0]);
  EXPECT_THROW(KinematicTree::from_json(d), ConfigError);
}

TEST(BodyModel, RejectsMalformedDescriptors) {
  auto d = tiny_descriptor();
  d["schema"] = "other";
  EXPECT_THROW(KinematicTree::from_json(d), ConfigError);
  d = tiny_descriptor();
  d["segments"][1]["parent"] = "missing";
  EXPECT_THROW(KinematicTree::from_json(d), ConfigError);
  d = tiny_descriptor();
  d["segments"][1].erase("joint");
  EXPECT_THROW(KinematicTree::from_json(d), ConfigError);
  EXPECT_THROW(KinematicTree::from_file("/nonexistent/model.json"), IoError);
}

TEST(BodyModel, ZeroMarkersIsValid) {
  auto d = tiny_descriptor();
  d.erase("markers");
  const auto t = KinematicTree::from_json(d);
  const auto fk = forward_kinematics(t, ScaleParams::neutral(t), PoseVector::Zero(t.dof_count()));
  EXPECT_TRUE(fk.markers.empty());
  EXPECT_EQ(fk.orientations.size(), 2u);
}

TEST(BodyModel, RestPoseIsIdentityAndOffsetSums) {
  const auto fk = forward_kinematics(tree(), ScaleParams::neutral(tree()), PoseVector::Zero(20));
  for (const auto& r : fk.orientations) EXPECT_TRUE(r.isApprox(Mat3::Identity(), 1e-15));
  const int m = *tree().find_marker("l_knee_lat");
  EXPECT_TRUE(fk.markers[m].isApprox(Vec3(0.0, 0.14, -0.49), 1e-14));
  const int toe = *tree().find_marker("l_toe");
  EXPECT_TRUE(fk.markers[toe].isApprox(Vec3(0.19, 0.09, -0.95), 1e-14));
}

TEST(BodyModel, KneeFlexionSwingsShankBackward) {
  PoseVector th = PoseVector::Zero(20);
  th(tree().primary_dof_index("l_knee")) = so3::kPi / 2;
  const auto fk = forward_kinematics(tree(), ScaleParams::neutral(tree()), th);
  const int knee = *tree().find_segment("l_shank");
  const int ankle = *tree().find_marker("l_ankle_lat");
  EXPECT_TRUE((fk.markers[ankle] - fk.origins[knee]).isApprox(Vec3(-0.41, 0.04, 0.0), 1e-12));
  EXPECT_NEAR(extract_joint_angle(tree(), th, "l_knee"), 90.0, 1e-12);
}

TEST(BodyModel, OverallScaleDoublesMarkerDistances) {
  auto b = ScaleParams::neutral(tree());
  b.scale(0) = std::log(2.0);
  const auto fk = forward_kinematics(tree(), b, PoseVector::Zero(20));
  const auto rest = tree().rest_markers();
  for (int m = 0; m < 16; ++m) EXPECT_TRUE(fk.markers[m].isApprox(2.0 * rest.row(m).transpose(), 1e-13));
}

TEST(BodyModel, MatchesTransformCompositionOracle) {
  std::mt19937_64 rng(41);
  for (int c = 0; c < 100; ++c) {
    const auto th = random_pose(rng, tree());
    const auto b = random_scale(rng, tree());
    const auto fk = forward_kinematics(tree(), b, th);
    const auto frames = compose_frames(tree(), b, th);
    for (int k = 0; k < tree().segment_count(); ++k) {
      EXPECT_LT((fk.orientations[k] - frames[k].linear()).norm(), 1e-9);
      EXPECT_LT((fk.origins[k] - frames[k].translation()).norm(), 1e-9);
    }
    for (int m = 0; m < 16; ++m) EXPECT_LT((fk.markers[m] - oracle_marker(tree(), b, th, m)).norm(), 1e-9);
  }
}

TEST(BodyModel, SegmentsStayRigid) {
  std::mt19937_64 rng(43);
  const auto b = random_scale(rng, tree());
  const auto a = forward_kinematics(tree(), b, random_pose(rng, tree()));
  const auto c = forward_kinematics(tree(), b, random_pose(rng, tree()));
  const int i = *tree().find_marker("l_knee_lat"), j = *tree().find_marker("l_thigh_lat");
  EXPECT_NEAR((a.markers[i] - a.markers[j]).norm(), (c.markers[i] - c.markers[j]).norm(), 1e-12);
  for (const auto& r : a.orientations) EXPECT_TRUE(so3::is_rotation(r, 1e-12));
}

TEST(BodyModel, RootTransformEquivariance) {
  std::mt19937_64 rng(47);
  for (int c = 0; c < 20; ++c) {
    auto th = random_pose(rng, tree());
    const auto b = random_scale(rng, tree());
    const Mat3 rot = kt::random_rotation(rng);
    const Vec3 shift = kt::random_vec3(rng);
    const auto base = forward_kinematics(tree(), b, th);
    PoseVector moved = th;
    moved.head<3>() = rot * th.head<3>() + shift;
    moved.segment<3>(3) = so3::log_map(Mat3(rot * so3::exp_map<double>(Vec3(th.segment<3>(3)))));
    const auto out = forward_kinematics(tree(), b, moved);
    for (int m = 0; m < 16; ++m) EXPECT_LT((out.markers[m] - (rot * base.markers[m] + shift)).norm(), 1e-9);
  }
}

TEST(BodyModel, SegmentScaleOnlyMovesDescendants) {
  std::mt19937_64 rng(53);
  const auto th = random_pose(rng, tree());
  auto b = ScaleParams::neutral(tree());
  const auto base = forward_kinematics(tree(), b, th);
  b.scale(2) = 0.3;  // l_thigh
  const auto out = forward_kinematics(tree(), b, th);
  const int thigh = *tree().find_segment("l_thigh");
  for (int m = 0; m < 16; ++m) {
    int k = tree().marker(m).segment;
    bool below = false;
    for (; k >= 0; k = tree().segment(k).parent) below = below || k == thigh;
    if (below) {
      EXPECT_GT((out.markers[m] - base.markers[m]).norm(), 1e-3) << tree().marker(m).name;
    } else {
      EXPECT_EQ(out.markers[m], base.markers[m]) << tree().marker(m).name;
    }
  }
}

TEST(BodyModel, InvalidInputs) {
  auto b = ScaleParams::neutral(tree());
  EXPECT_THROW(forward_kinematics(tree(), b, PoseVector::Zero(19)), std::invalid_argument);
  PoseVector th = PoseVector::Zero(20);
  th(7) = std::nan("");
  EXPECT_THROW(forward_kinematics(tree(), b, th), NumericalError);
  EXPECT_THROW(tree().primary_dof_index("l_elbow"), ConfigError);
  EXPECT_EQ(tree().primary_dof_index("l_hip"), tree().primary_dof_index("l_hip_flexion"));
}

TEST(BodyModel, TimeDerivativeMatchesFiniteDifferences) {
  std::mt19937_64 rng(59);
  const double h = 1e-6;
  for (int c = 0; c < 20; ++c) {
    const auto th = random_pose(rng, tree());
    const auto rate = random_pose(rng, tree(), 2.0);
    const auto b = random_scale(rng, tree());
    const auto rd = fk_time_derivative(tree(), b, th, rate);
    const auto plus = forward_kinematics(tree(), b, th + h * rate);
    const auto minus = forward_kinematics(tree(), b, th - h * rate);
    for (int k = 0; k < tree().segment_count(); ++k) {
      const Mat3 fd = (plus.orientations[k] - minus.orientations[k]) / (2 * h);
      EXPECT_LT((rd[k] - fd).norm(), 1e-6);
    }
  }
}

TEST(BodyModel, ReverseModeGradientMatchesFiniteDifferences) {
  // L = sum g_m . p_m + sum c_k . (R_k u_k) + sum h_k . omega_k
  std::mt19937_64 rng(61);
  const auto& t = tree();
  const int nseg = t.segment_count();
  std::vector<Vec3> g(16), cvec(nseg), u(nseg), hw(nseg);
  for (auto& v : g) v = kt::random_vec3(rng);
  for (int k = 0; k < nseg; ++k) {
    cvec[k] = kt::random_vec3(rng);
    u[k] = kt::random_vec3(rng);
    hw[k] = kt::random_vec3(rng);
  }
  const auto loss = [&](const PoseVector& th, const PoseVector& rate, const ScaleParams& b) {
    const auto fk = forward_kinematics(t, b, th);
    const auto om = body_angular_velocities(t, b, th, rate);
    double l = 0;
    for (int m = 0; m < 16; ++m) l += g[m].dot(fk.markers[m]);
    for (int k = 0; k < nseg; ++k) l += cvec[k].dot(fk.orientations[k] * u[k]) + hw[k].dot(om[k]);
    return l;
  };

  for (int c = 0; c < 5; ++c) {
    const auto th = random_pose(rng, t);
    const PoseVector rate = random_pose(rng, t, 2.0);
    const auto b = random_scale(rng, t);

    FkState st;
    const Eigen::VectorXd factors = b.segment_factors(t);
    fk_evaluate(t, factors, b.offsets, th, &rate, st);
    FkAdjoint adj;
    adj.reset(t);
    for (int m = 0; m < 16; ++m) adj.marker[m] = g[m];
    for (int k = 0; k < nseg; ++k) {
      adj.torque[k] = (st.rotation[k] * u[k]).cross(cvec[k]);
      adj.omega[k] = hw[k];
    }
    FkGradient grad;
    grad.reset(t);
    fk_backward(t, th, &rate, st, adj, grad);

    const double h = 1e-6;
    for (int i = 0; i < t.dof_count(); ++i) {
      PoseVector p = th, q = th;
      p(i) += h;
      q(i) -= h;
      EXPECT_NEAR(grad.theta(i), (loss(p, rate, b) - loss(q, rate, b)) / (2 * h), 1e-6) << "theta " << i;
      PoseVector rp = rate, rq = rate;
      rp(i) += h;
      rq(i) -= h;
      EXPECT_NEAR(grad.theta_dot(i), (loss(th, rp, b) - loss(th, rq, b)) / (2 * h), 1e-6) << "rate " << i;
    }
    const Eigen::VectorXd gs = grad.scale_gradient(t, factors);
    for (int i = 0; i < t.scale_count(); ++i) {
      ScaleParams p = b, q = b;
      p.scale(i) += h;
      q.scale(i) -= h;
      EXPECT_NEAR(gs(i), (loss(th, rate, p) - loss(th, rate, q)) / (2 * h), 1e-6) << "scale " << i;
    }
    for (int m = 0; m < 16; ++m) {
      for (int d = 0; d < 3; ++d) {
        ScaleParams p = b, q = b;
        p.offsets(m, d) += h;
        q.offsets(m, d) -= h;
        EXPECT_NEAR(grad.offsets(m, d), (loss(th, rate, p) - loss(th, rate, q)) / (2 * h), 1e-6);
      }
    }
  }
}
