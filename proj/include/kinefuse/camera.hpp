#pragma once

// Pinhole camera, keypoint frames and confidence handling.

#include "kinefuse/body_model.hpp"
#include "kinefuse/errors.hpp"
#include "kinefuse/so3.hpp"

#include "json.hpp"

#include <cmath>
#include <optional>

namespace kinefuse {

struct CameraIntrinsics {
  double fx = 1500.0, fy = 1500.0;
  double cx = 540.0, cy = 960.0;
  int width = 1080, height = 1920;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("intrinsics: fx and fy must be positive");
    if (!(width > 0 && height > 0)) throw ConfigError("intrinsics: image size must be positive");
    if (!(cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height)) {
      throw ConfigError("intrinsics: principal point outside the image");
    }
  }
};

inline nlohmann::json to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics c;
  for (const char* key : {"fx", "fy", "cx", "cy", "width", "height"}) {
    if (!j.contains(key)) throw ConfigError(std::string("intrinsics: missing field '") + key + "'");
  }
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.validate();
  return c;
}

using PixelMatrix = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// One video frame of detections. p_c in the camera frame (m), x in pixels.
struct KeypointFrame {
  double t = 0.0;
  MarkerMatrix p_c;
  PixelMatrix x;
  Eigen::VectorXd sigma_mm;
  Eigen::VectorXd confidence;
};

inline constexpr double kMinDepth = 1e-6;

/// Pinhole projection; empty when the point is not in front of the camera.
inline std::optional<Vec2> project(const CameraIntrinsics& c, const Vec3& p) {
  if (!(p.z() > kMinDepth)) return std::nullopt;
  return Vec2(c.fx * p.x() / p.z() + c.cx, c.fy * p.y() / p.z() + c.cy);
}

/// Descending sigmoid: 0.5 at 30 mm, width 10 mm. Exactly 0 once exp overflows.
inline double confidence_from_std(double sigma_mm) {
  if (!(sigma_mm >= 0.0)) throw std::invalid_argument("confidence_from_std: sigma must be >= 0");
  return 1.0 / (1.0 + std::exp((sigma_mm - 30.0) / 10.0));
}

/// Confidence-weighted centroid (plain mean over c > 0 when weighted is false).
inline std::optional<Vec3> keypoint_centroid(const MarkerMatrix& p, const Eigen::VectorXd& c,
                                             bool weighted = true) {
  double wsum = 0.0;
  Vec3 s = Vec3::Zero();
  for (Eigen::Index j = 0; j < p.rows(); ++j) {
    if (!(c(j) > 0.0)) continue;
    const double w = weighted ? c(j) : 1.0;
    s += w * p.row(j).transpose();
    wsum += w;
  }
  if (wsum <= 0.0) return std::nullopt;
  return Vec3(s / wsum);
}

/// Removes the (confidence-weighted) mean translation. Empty when every
/// confidence is zero.
inline std::optional<MarkerMatrix> center_keypoints(const MarkerMatrix& p, const Eigen::VectorXd& c,
                                                    bool weighted = true) {
  if (c.size() != p.rows()) throw std::invalid_argument("center_keypoints: size mismatch");
  const auto m = keypoint_centroid(p, c, weighted);
  if (!m) return std::nullopt;
  MarkerMatrix out = p;
  out.rowwise() -= m->transpose();
  return out;
}

}  // namespace kinefuse
