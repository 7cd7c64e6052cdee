#pragma once

// Kinematic-tree body model: isotropic per-segment scaling, marker offsets,
// forward kinematics, analytic body angular velocities and the reverse-mode
// pass used by the optimizer.
//
// Pose layout: theta = [root translation (3, m), root exponential
// coordinates (3, rad), hinge angles in segment order (rad)].
// Segment frames are aligned with their parent at zero pose; a segment's rest
// offset is expressed in the parent frame and scaled by the parent's factor.

#include "kinefuse/autodiff.hpp"
#include "kinefuse/errors.hpp"
#include "kinefuse/so3.hpp"

#include "json.hpp"

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kinefuse {

using PoseVector = Eigen::VectorXd;
using MarkerMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline constexpr const char* kBodyModelSchema = "kinefuse.body_model/1";

struct Dof {
  std::string name;
  Vec3 axis = Vec3::UnitZ();  // unit, segment frame
  double lower = -so3::kPi;
  double upper = so3::kPi;
};

enum class JointType { kFree, kHinge, kFixed };

struct Segment {
  std::string name;
  int parent = -1;
  Vec3 rest_offset = Vec3::Zero();
  std::string joint_name;
  JointType joint_type = JointType::kFixed;
  std::vector<Dof> dofs;  // hinge axes applied in order
  int primary_dof = 0;    // index into dofs reported by extract_joint_angle
  int first_dof = -1;     // index of dofs[0] in the pose vector
};

struct Marker {
  std::string name;
  int segment = 0;
  Vec3 local_position = Vec3::Zero();
};

/// FNV-1a over a byte string; used for descriptor and scenario hashes.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {
// Same content as data/models/lower_body.json (checked by the tests).
inline constexpr const char* kDefaultDescriptor = R"json({
  "schema": "kinefuse.body_model/1",
  "name": "lower_body_20dof",
  "scale_parameters": ["overall", "pelvis", "l_thigh", "l_leg_foot", "r_thigh", "r_leg_foot", "torso", "head"],
  "segments": [
    {"name": "pelvis", "parent": null, "joint": {"name": "root", "type": "free"}, "scale": ["overall", "pelvis"]},
    {"name": "torso", "parent": "pelvis", "offset": [0.0, 0.0, 0.10], "scale": ["overall", "torso"],
     "joint": {"name": "lumbar", "type": "hinge", "primary": "lumbar_flexion", "dofs": [
       {"name": "lumbar_flexion", "axis": [0, 1, 0]},
       {"name": "lumbar_bending", "axis": [1, 0, 0]},
       {"name": "lumbar_rotation", "axis": [0, 0, 1]}]}},
    {"name": "head", "parent": "torso", "offset": [0.0, 0.0, 0.50], "scale": ["overall", "head"],
     "joint": {"name": "neck", "type": "hinge", "dofs": [{"name": "neck_flexion", "axis": [0, 1, 0]}]}},
    {"name": "l_thigh", "parent": "pelvis", "offset": [0.0, 0.09, -0.07], "scale": ["overall", "l_thigh"],
     "joint": {"name": "l_hip", "type": "hinge", "primary": "l_hip_flexion", "dofs": [
       {"name": "l_hip_flexion", "axis": [0, -1, 0]},
       {"name": "l_hip_adduction", "axis": [-1, 0, 0]},
       {"name": "l_hip_rotation", "axis": [0, 0, 1]}]}},
    {"name": "l_shank", "parent": "l_thigh", "offset": [0.0, 0.0, -0.42], "scale": ["overall", "l_leg_foot"],
     "joint": {"name": "l_knee", "type": "hinge", "dofs": [{"name": "l_knee_flexion", "axis": [0, 1, 0], "range_deg": [-10, 150]}]}},
    {"name": "l_foot", "parent": "l_shank", "offset": [0.0, 0.0, -0.41], "scale": ["overall", "l_leg_foot"],
     "joint": {"name": "l_ankle", "type": "hinge", "dofs": [{"name": "l_ankle_dorsiflexion", "axis": [0, -1, 0], "range_deg": [-60, 45]}]}},
    {"name": "l_toes", "parent": "l_foot", "offset": [0.14, 0.0, -0.05], "scale": ["overall", "l_leg_foot"],
     "joint": {"name": "l_mtp", "type": "fixed"}},
    {"name": "r_thigh", "parent": "pelvis", "offset": [0.0, -0.09, -0.07], "scale": ["overall", "r_thigh"],
     "joint": {"name": "r_hip", "type": "hinge", "primary": "r_hip_flexion", "dofs": [
       {"name": "r_hip_flexion", "axis": [0, -1, 0]},
       {"name": "r_hip_adduction", "axis": [1, 0, 0]},
       {"name": "r_hip_rotation", "axis": [0, 0, -1]}]}},
    {"name": "r_shank", "parent": "r_thigh", "offset": [0.0, 0.0, -0.42], "scale": ["overall", "r_leg_foot"],
     "joint": {"name": "r_knee", "type": "hinge", "dofs": [{"name": "r_knee_flexion", "axis": [0, 1, 0], "range_deg": [-10, 150]}]}},
    {"name": "r_foot", "parent": "r_shank", "offset": [0.0, 0.0, -0.41], "scale": ["overall", "r_leg_foot"],
     "joint": {"name": "r_ankle", "type": "hinge", "dofs": [{"name": "r_ankle_dorsiflexion", "axis": [0, -1, 0], "range_deg": [-60, 45]}]}},
    {"name": "r_toes", "parent": "r_foot", "offset": [0.14, 0.0, -0.05], "scale": ["overall", "r_leg_foot"],
     "joint": {"name": "r_mtp", "type": "fixed"}}
  ],
  "markers": [
    {"name": "l_asis", "segment": "pelvis", "position": [0.06, 0.12, 0.03]},
    {"name": "r_asis", "segment": "pelvis", "position": [0.06, -0.12, 0.03]},
    {"name": "c7", "segment": "torso", "position": [-0.06, 0.0, 0.45]},
    {"name": "head_top", "segment": "head", "position": [0.02, 0.0, 0.20]},
    {"name": "l_thigh_lat", "segment": "l_thigh", "position": [0.02, 0.08, -0.20]},
    {"name": "l_knee_lat", "segment": "l_thigh", "position": [0.0, 0.05, -0.42]},
    {"name": "l_shank_lat", "segment": "l_shank", "position": [0.03, 0.05, -0.20]},
    {"name": "l_ankle_lat", "segment": "l_shank", "position": [0.0, 0.04, -0.41]},
    {"name": "l_heel", "segment": "l_foot", "position": [-0.05, 0.0, -0.06]},
    {"name": "l_toe", "segment": "l_toes", "position": [0.05, 0.0, 0.0]},
    {"name": "r_thigh_lat", "segment": "r_thigh", "position": [0.02, -0.08, -0.20]},
    {"name": "r_knee_lat", "segment": "r_thigh", "position": [0.0, -0.05, -0.42]},
    {"name": "r_shank_lat", "segment": "r_shank", "position": [0.03, -0.05, -0.20]},
    {"name": "r_ankle_lat", "segment": "r_shank", "position": [0.0, -0.04, -0.41]},
    {"name": "r_heel", "segment": "r_foot", "position": [-0.05, 0.0, -0.06]},
    {"name": "r_toe", "segment": "r_toes", "position": [0.05, 0.0, 0.0]}
  ]
}
)json";
}  // namespace detail

/// Immutable kinematic tree. Segments are stored in topological order with
/// the free-floating root at index 0.
class KinematicTree {
 public:
  static KinematicTree from_json(const nlohmann::json& desc) {
    KinematicTree tree;
    tree.descriptor_ = desc;
    try {
      tree.parse(desc);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model descriptor: ") + e.what());
    }
    return tree;
  }

  static KinematicTree from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open model descriptor '" + path + "'");
    nlohmann::json desc;
    try {
      in >> desc;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model descriptor '" + path + "': " + e.what());
    }
    return from_json(desc);
  }

  /// The shipped desk-scale lower-body model (11 segments, 20 DOF, 16 markers).
  static KinematicTree default_lower_body() {
    return from_json(nlohmann::json::parse(detail::kDefaultDescriptor));
  }

  int segment_count() const { return static_cast<int>(segments_.size()); }
  int dof_count() const { return dof_count_; }
  int marker_count() const { return static_cast<int>(markers_.size()); }
  int scale_count() const { return static_cast<int>(scale_names_.size()); }

  const Segment& segment(int i) const { return segments_.at(i); }
  const std::vector<Segment>& segments() const { return segments_; }
  const Marker& marker(int i) const { return markers_.at(i); }
  const std::vector<Marker>& markers() const { return markers_; }
  const std::vector<std::string>& scale_names() const { return scale_names_; }
  const std::vector<std::string>& dof_names() const { return dof_names_; }
  /// Segments x scale parameters; segment factor = exp(row . beta_s).
  const Eigen::MatrixXd& scale_map() const { return scale_map_; }
  const std::vector<int>& children(int seg) const { return children_.at(seg); }
  const std::vector<int>& markers_on(int seg) const { return markers_on_.at(seg); }
  const nlohmann::json& descriptor() const { return descriptor_; }
  std::uint64_t descriptor_hash() const { return fnv1a64(descriptor_.dump()); }

  std::optional<int> find_segment(const std::string& name) const {
    for (int i = 0; i < segment_count(); ++i) {
      if (segments_[i].name == name) return i;
    }
    return std::nullopt;
  }
  std::optional<int> find_marker(const std::string& name) const {
    for (int i = 0; i < marker_count(); ++i) {
      if (markers_[i].name == name) return i;
    }
    return std::nullopt;
  }

  /// Pose index of a joint's primary DOF (or of a DOF given by name).
  int primary_dof_index(const std::string& joint) const {
    for (const auto& s : segments_) {
      if (s.joint_type == JointType::kHinge && s.joint_name == joint) {
        return s.first_dof + s.primary_dof;
      }
    }
    for (int i = 0; i < dof_count_; ++i) {
      if (dof_names_[i] == joint) return i;
    }
    throw ConfigError("unknown joint '" + joint + "'");
  }

  /// Mask of the segments needed to evaluate the given ones (their ancestors).
  std::vector<char> ancestor_mask(const std::vector<int>& segs) const {
    std::vector<char> mask(segments_.size(), 0);
    for (int s : segs) {
      for (int k = s; k >= 0 && !mask[k]; k = segments_[k].parent) mask[k] = 1;
    }
    return mask;
  }

  /// Marker positions at zero pose and neutral scale (segment-0 frame).
  MarkerMatrix rest_markers() const;

 private:
  void parse(const nlohmann::json& desc);

  std::vector<Segment> segments_;
  std::vector<Marker> markers_;
  std::vector<std::string> scale_names_;
  std::vector<std::string> dof_names_;
  std::vector<std::vector<int>> children_;
  std::vector<std::vector<int>> markers_on_;
  Eigen::MatrixXd scale_map_;
  nlohmann::json descriptor_;
  int dof_count_ = 0;
};

inline void KinematicTree::parse(const nlohmann::json& desc) {
  if (desc.value("schema", std::string()) != kBodyModelSchema) {
    throw ConfigError(std::string("model descriptor: schema must be '") +
                      kBodyModelSchema + "'");
  }
  for (const auto& n : desc.at("scale_parameters")) {
    scale_names_.push_back(n.get<std::string>());
  }

  // Collect raw segments then order them topologically by parent name.
  struct Raw {
    nlohmann::json j;
    std::string name;
    std::string parent;
  };
  std::vector<Raw> raw;
  std::map<std::string, int> by_name;
  for (const auto& sj : desc.at("segments")) {
    Raw r{sj, sj.at("name").get<std::string>(),
          sj.at("parent").is_null() ? std::string() : sj.at("parent").get<std::string>()};
    if (by_name.count(r.name)) throw ConfigError("duplicate segment name '" + r.name + "'");
    by_name[r.name] = static_cast<int>(raw.size());
    raw.push_back(std::move(r));
  }
  if (raw.empty()) throw ConfigError("model descriptor has no segments");
  int roots = 0;
  for (const auto& r : raw) {
    if (r.parent.empty()) {
      ++roots;
      continue;
    }
    if (!by_name.count(r.parent)) {
      throw ConfigError("segment '" + r.name + "' has unknown parent '" + r.parent + "'");
    }
    // Walk up; a revisit means a cycle.
    std::vector<char> seen(raw.size(), 0);
    std::string cur = r.name;
    while (!cur.empty()) {
      const int idx = by_name.at(cur);
      if (seen[idx]) throw ConfigError("cyclic parent graph at segment '" + r.name + "'");
      seen[idx] = 1;
      cur = raw[idx].parent;
    }
  }
  if (roots != 1) throw ConfigError("model descriptor must have exactly one root segment");

  std::vector<int> order;
  std::vector<char> placed(raw.size(), 0);
  while (order.size() < raw.size()) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (placed[i]) continue;
      if (raw[i].parent.empty() || placed[by_name.at(raw[i].parent)]) {
        placed[i] = 1;
        order.push_back(static_cast<int>(i));
      }
    }
  }
  std::map<std::string, int> new_index;
  for (std::size_t k = 0; k < order.size(); ++k) new_index[raw[order[k]].name] = static_cast<int>(k);

  const int nseg = static_cast<int>(order.size());
  scale_map_ = Eigen::MatrixXd::Zero(nseg, static_cast<int>(scale_names_.size()));
  dof_count_ = 0;
  for (int k = 0; k < nseg; ++k) {
    const auto& sj = raw[order[k]].j;
    Segment s;
    s.name = raw[order[k]].name;
    s.parent = raw[order[k]].parent.empty() ? -1 : new_index.at(raw[order[k]].parent);
    if (sj.contains("offset")) {
      const auto& o = sj.at("offset");
      s.rest_offset = Vec3(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
    }
    const auto& jj = sj.at("joint");
    s.joint_name = jj.at("name").get<std::string>();
    const std::string type = jj.at("type").get<std::string>();
    if (type == "free") {
      if (s.parent != -1) throw ConfigError("free joint only allowed on the root segment");
      s.joint_type = JointType::kFree;
      s.first_dof = 0;
      dof_count_ += 6;
      for (const char* n : {"root_tx", "root_ty", "root_tz", "root_rx", "root_ry", "root_rz"}) {
        dof_names_.emplace_back(n);
      }
    } else if (type == "hinge" || type == "fixed") {
      if (s.parent == -1) throw ConfigError("root segment must use a free joint");
      s.joint_type = type == "hinge" ? JointType::kHinge : JointType::kFixed;
      s.first_dof = dof_count_;
      if (type == "hinge") {
        for (const auto& dj : jj.at("dofs")) {
          Dof d;
          d.name = dj.at("name").get<std::string>();
          const auto& a = dj.at("axis");
          const Vec3 axis(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
          if (axis.norm() < 1e-9) throw ConfigError("dof '" + d.name + "' has a zero axis");
          d.axis = axis.normalized();
          if (dj.contains("range_deg")) {
            d.lower = so3::deg2rad(dj.at("range_deg").at(0).get<double>());
            d.upper = so3::deg2rad(dj.at("range_deg").at(1).get<double>());
          }
          dof_names_.push_back(d.name);
          s.dofs.push_back(d);
        }
        if (s.dofs.empty()) throw ConfigError("hinge joint '" + s.joint_name + "' has no dofs");
        if (jj.contains("primary")) {
          const auto p = jj.at("primary").get<std::string>();
          bool found = false;
          for (std::size_t i = 0; i < s.dofs.size(); ++i) {
            if (s.dofs[i].name == p) {
              s.primary_dof = static_cast<int>(i);
              found = true;
            }
          }
          if (!found) throw ConfigError("primary dof '" + p + "' not in joint '" + s.joint_name + "'");
        }
        dof_count_ += static_cast<int>(s.dofs.size());
      }
    } else {
      throw ConfigError("unknown joint type '" + type + "'");
    }
    if (sj.contains("scale")) {
      for (const auto& sn : sj.at("scale")) {
        const auto name = sn.get<std::string>();
        auto it = std::find(scale_names_.begin(), scale_names_.end(), name);
        if (it == scale_names_.end()) throw ConfigError("unknown scale parameter '" + name + "'");
        scale_map_(k, static_cast<int>(it - scale_names_.begin())) += 1.0;
      }
    }
    segments_.push_back(std::move(s));
  }

  children_.assign(nseg, {});
  for (int k = 1; k < nseg; ++k) children_[segments_[k].parent].push_back(k);

  markers_on_.assign(nseg, {});
  std::map<std::string, int> marker_names;
  if (desc.contains("markers")) {
    for (const auto& mj : desc.at("markers")) {
      Marker m;
      m.name = mj.at("name").get<std::string>();
      if (marker_names.count(m.name)) throw ConfigError("duplicate marker name '" + m.name + "'");
      const auto seg = mj.at("segment").get<std::string>();
      if (!new_index.count(seg)) throw ConfigError("marker '" + m.name + "' on unknown segment '" + seg + "'");
      m.segment = new_index.at(seg);
      const auto& p = mj.at("position");
      m.local_position = Vec3(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
      marker_names[m.name] = static_cast<int>(markers_.size());
      markers_on_[m.segment].push_back(static_cast<int>(markers_.size()));
      markers_.push_back(m);
    }
  }
}

/// Scale parameters beta = (beta_s, beta_m).
struct ScaleParams {
  Eigen::VectorXd scale;  // beta_s; zero is the neutral body
  MarkerMatrix offsets;   // beta_m, marker offsets in segment frames (m)
  double offset_bound = 0.05;

  static ScaleParams neutral(const KinematicTree& tree) {
    ScaleParams p;
    p.scale = Eigen::VectorXd::Zero(tree.scale_count());
    p.offsets = MarkerMatrix::Zero(tree.marker_count(), 3);
    return p;
  }

  /// Per-segment isotropic factors, exp(S beta_s) > 0.
  Eigen::VectorXd segment_factors(const KinematicTree& tree) const {
    return (tree.scale_map() * scale).array().exp().matrix();
  }

  void clamp_offsets() { offsets = offsets.cwiseMax(-offset_bound).cwiseMin(offset_bound); }
};

struct FkOutput {
  std::vector<Vec3> markers;       // global frame, m
  std::vector<Mat3> orientations;  // R_nb per segment
  std::vector<Vec3> origins;       // segment origins, m
};

// ---------------------------------------------------------------------------
// Workspace evaluator used by both the public API and the optimizer.

/// Forward state of one FK evaluation; reused across samples to avoid
/// allocations.
struct FkState {
  std::vector<Mat3> rotation;
  std::vector<Vec3> origin;
  std::vector<Vec3> omega;             // body-frame angular velocity
  std::vector<Vec3> markers;
  std::vector<Vec3> hinge_axis_world;  // per pose index
  std::vector<Vec3> hinge_rate_state;  // body rate right after each hinge
  std::vector<Mat3> hinge_rotation;
  std::vector<char> active;
  Eigen::VectorXd factors;
  bool with_rates = false;

  void resize(const KinematicTree& tree) {
    const auto n = static_cast<std::size_t>(tree.segment_count());
    rotation.resize(n);
    origin.resize(n);
    omega.resize(n);
    markers.resize(static_cast<std::size_t>(tree.marker_count()));
    hinge_axis_world.resize(static_cast<std::size_t>(tree.dof_count()));
    hinge_rate_state.resize(static_cast<std::size_t>(tree.dof_count()));
    hinge_rotation.resize(static_cast<std::size_t>(tree.dof_count()));
  }
};

/// Adjoints flowing into the reverse pass.
struct FkAdjoint {
  std::vector<Vec3> marker;  // dL/dp_m, global frame
  std::vector<Vec3> torque;  // world torque: dL = tau . dphi for R -> exp(dphi) R
  std::vector<Vec3> omega;   // dL/domega (body frame)

  void reset(const KinematicTree& tree) {
    marker.assign(static_cast<std::size_t>(tree.marker_count()), Vec3::Zero());
    torque.assign(static_cast<std::size_t>(tree.segment_count()), Vec3::Zero());
    omega.assign(static_cast<std::size_t>(tree.segment_count()), Vec3::Zero());
  }
};

struct FkGradient {
  Eigen::VectorXd theta;
  Eigen::VectorXd theta_dot;
  Eigen::VectorXd segment_factor;  // dL/ds_k
  MarkerMatrix offsets;

  void reset(const KinematicTree& tree) {
    theta = Eigen::VectorXd::Zero(tree.dof_count());
    theta_dot = Eigen::VectorXd::Zero(tree.dof_count());
    segment_factor = Eigen::VectorXd::Zero(tree.segment_count());
    offsets = MarkerMatrix::Zero(tree.marker_count(), 3);
  }

  /// Chain segment-factor gradients onto beta_s.
  Eigen::VectorXd scale_gradient(const KinematicTree& tree, const Eigen::VectorXd& factors) const {
    return tree.scale_map().transpose() * segment_factor.cwiseProduct(factors);
  }
};

/// Evaluates segment poses (and body rates when theta_dot is given) for the
/// segments flagged in `active` (all when empty), plus markers on them.
inline void fk_evaluate(const KinematicTree& tree, const Eigen::VectorXd& factors,
                        const MarkerMatrix& offsets, const Eigen::Ref<const Eigen::VectorXd>& theta,
                        const Eigen::VectorXd* theta_dot, FkState& st,
                        const std::vector<char>* active = nullptr, bool markers = true) {
  st.resize(tree);
  st.factors = factors;
  st.with_rates = theta_dot != nullptr;
  const int nseg = tree.segment_count();
  if (active) {
    st.active = *active;
  } else {
    st.active.assign(static_cast<std::size_t>(nseg), 1);
  }
  for (int k = 0; k < nseg; ++k) {
    if (!st.active[k]) continue;
    const Segment& s = tree.segment(k);
    if (k == 0) {
      const Vec3 r = theta.segment<3>(3);
      st.rotation[0] = so3::exp_map<double>(r);
      st.origin[0] = theta.head<3>();
      st.omega[0] = st.with_rates
                        ? Vec3(so3::right_jacobian<double>(r) * theta_dot->segment<3>(3))
                        : Vec3::Zero();
      continue;
    }
    const int p = s.parent;
    Mat3 rk = st.rotation[p];
    st.origin[k] = st.origin[p] + rk * (factors(p) * s.rest_offset);
    Vec3 v = st.omega[p];
    for (std::size_t i = 0; i < s.dofs.size(); ++i) {
      const int j = s.first_dof + static_cast<int>(i);
      const Vec3& a = s.dofs[i].axis;
      st.hinge_axis_world[j] = rk * a;
      const Mat3 q = so3::axis_rotation<double>(a, theta(j));
      st.hinge_rotation[j] = q;
      rk = rk * q;
      if (st.with_rates) {
        v = q.transpose() * v + a * (*theta_dot)(j);
        st.hinge_rate_state[j] = v;
      }
    }
    st.rotation[k] = rk;
    st.omega[k] = st.with_rates ? v : Vec3::Zero();
  }
  if (markers) {
    for (int m = 0; m < tree.marker_count(); ++m) {
      const Marker& mk = tree.marker(m);
      if (!st.active[mk.segment]) continue;
      const Vec3 local = factors(mk.segment) * mk.local_position + offsets.row(m).transpose();
      st.markers[m] = st.origin[mk.segment] + st.rotation[mk.segment] * local;
    }
  }
}

/// Reverse pass: accumulates dL/dtheta, dL/dtheta_dot, dL/ds_k and marker
/// offset gradients into `grad` (which is not reset here).
inline void fk_backward(const KinematicTree& tree, const Eigen::Ref<const Eigen::VectorXd>& theta,
                        const Eigen::VectorXd* theta_dot, const FkState& st, const FkAdjoint& adj,
                        FkGradient& grad) {
  const int nseg = tree.segment_count();
  thread_local std::vector<Vec3> force, moment, hom;
  force.assign(static_cast<std::size_t>(nseg), Vec3::Zero());
  moment.assign(static_cast<std::size_t>(nseg), Vec3::Zero());
  hom.assign(static_cast<std::size_t>(nseg), Vec3::Zero());

  for (int m = 0; m < tree.marker_count(); ++m) {
    const Marker& mk = tree.marker(m);
    const int k = mk.segment;
    if (!st.active[k]) continue;
    const Vec3& g = adj.marker[m];
    force[k] += g;
    moment[k] += st.markers[m].cross(g);
    grad.offsets.row(m) += (st.rotation[k].transpose() * g).transpose();
    grad.segment_factor(k) += g.dot(st.rotation[k] * mk.local_position);
  }
  for (int k = 0; k < nseg; ++k) {
    if (!st.active[k]) continue;
    moment[k] += adj.torque[k];
    hom[k] += adj.omega[k];
  }

  for (int k = nseg - 1; k >= 1; --k) {
    if (!st.active[k]) continue;
    const Segment& s = tree.segment(k);
    const Vec3 tau_k = moment[k] - st.origin[k].cross(force[k]);
    Vec3 hv = hom[k];
    for (int i = static_cast<int>(s.dofs.size()) - 1; i >= 0; --i) {
      const int j = s.first_dof + i;
      const Vec3& a = s.dofs[i].axis;
      grad.theta(j) += st.hinge_axis_world[j].dot(tau_k);
      if (st.with_rates) {
        grad.theta_dot(j) += a.dot(hv);
        grad.theta(j) -= hv.dot(a.cross(st.hinge_rate_state[j]));
        hv = st.hinge_rotation[j] * hv;
      }
    }
    const int p = s.parent;
    grad.segment_factor(p) += force[k].dot(st.rotation[p] * s.rest_offset);
    force[p] += force[k];
    moment[p] += moment[k];
    hom[p] += hv;
  }

  // Root: translation and exponential coordinates.
  grad.theta.head<3>() += force[0];
  const Vec3 tau0 = moment[0] - st.origin[0].cross(force[0]);
  using J6 = Jet<6>;
  Vec3T<J6> r, rd;
  for (int i = 0; i < 3; ++i) {
    r(i) = make_jet<6>(theta(3 + i), i);
    rd(i) = make_jet<6>(theta_dot ? (*theta_dot)(3 + i) : 0.0, 3 + i);
  }
  const Mat3T<J6> rj = so3::exp_map<J6>(r);
  Mat3 r0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r0(a, b) = rj(a, b).value();
  for (int i = 0; i < 3; ++i) {
    Mat3 dr;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) dr(a, b) = rj(a, b).derivatives()(i);
    grad.theta(3 + i) += tau0.dot(so3::vee_skew<double>(Mat3(dr * r0.transpose())));
  }
  if (st.with_rates) {
    const Vec3T<J6> w = so3::right_jacobian<J6>(r) * rd;
    for (int i = 0; i < 3; ++i) {
      double gr = 0.0, grd = 0.0;
      for (int a = 0; a < 3; ++a) {
        gr += hom[0](a) * w(a).derivatives()(i);
        grd += hom[0](a) * w(a).derivatives()(3 + i);
      }
      grad.theta(3 + i) += gr;
      grad.theta_dot(3 + i) += grd;
    }
  }
}

// ---------------------------------------------------------------------------
// Public API

namespace detail {
inline void check_pose_inputs(const KinematicTree& tree, const ScaleParams& beta,
                              const PoseVector& theta) {
  if (theta.size() != tree.dof_count()) {
    throw std::invalid_argument("pose vector has " + std::to_string(theta.size()) +
                                " entries, tree has " + std::to_string(tree.dof_count()) + " dofs");
  }
  if (beta.scale.size() != tree.scale_count() || beta.offsets.rows() != tree.marker_count()) {
    throw std::invalid_argument("scale parameters do not match the tree");
  }
  if (!theta.allFinite() || !beta.scale.allFinite() || !beta.offsets.allFinite()) {
    throw NumericalError("forward kinematics: non-finite input");
  }
}
}  // namespace detail

inline FkOutput forward_kinematics(const KinematicTree& tree, const ScaleParams& beta,
                                   const PoseVector& theta) {
  detail::check_pose_inputs(tree, beta, theta);
  FkState st;
  fk_evaluate(tree, beta.segment_factors(tree), beta.offsets, theta, nullptr, st);
  return FkOutput{st.markers, st.rotation, st.origin};
}

/// Body-frame angular velocity of every segment for the pose rate theta_dot.
inline std::vector<Vec3> body_angular_velocities(const KinematicTree& tree, const ScaleParams& beta,
                                                 const PoseVector& theta,
                                                 const PoseVector& theta_dot) {
  detail::check_pose_inputs(tree, beta, theta);
  if (theta_dot.size() != theta.size()) throw std::invalid_argument("theta_dot size mismatch");
  if (!theta_dot.allFinite()) throw NumericalError("forward kinematics: non-finite rate");
  FkState st;
  fk_evaluate(tree, beta.segment_factors(tree), beta.offsets, theta, &theta_dot, st, nullptr, false);
  return st.omega;
}

/// Time derivative of every segment orientation, Rdot = R [omega]x.
inline std::vector<Mat3> fk_time_derivative(const KinematicTree& tree, const ScaleParams& beta,
                                            const PoseVector& theta, const PoseVector& theta_dot) {
  detail::check_pose_inputs(tree, beta, theta);
  if (theta_dot.size() != theta.size()) throw std::invalid_argument("theta_dot size mismatch");
  if (!theta_dot.allFinite()) throw NumericalError("forward kinematics: non-finite rate");
  FkState st;
  fk_evaluate(tree, beta.segment_factors(tree), beta.offsets, theta, &theta_dot, st, nullptr, false);
  std::vector<Mat3> out(st.rotation.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = st.rotation[k] * so3::hat<double>(st.omega[k]);
  return out;
}

/// Primary-axis angle of a joint, in degrees.
inline double extract_joint_angle(const KinematicTree& tree, const PoseVector& theta,
                                  const std::string& joint) {
  const int idx = tree.primary_dof_index(joint);
  if (idx >= theta.size()) throw std::invalid_argument("pose vector too short");
  return so3::rad2deg(theta(idx));
}

inline MarkerMatrix KinematicTree::rest_markers() const {
  const auto fk = forward_kinematics(*this, ScaleParams::neutral(*this),
                                     PoseVector::Zero(dof_count_));
  MarkerMatrix out(marker_count(), 3);
  for (int m = 0; m < marker_count(); ++m) out.row(m) = fk.markers[m].transpose();
  return out;
}

}  // namespace kinefuse
