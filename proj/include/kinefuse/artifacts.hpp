#pragma once

// Fit directories: checkpoint, summary, residual report and loss log.

#include "kinefuse/eval.hpp"

#include <cstdio>

namespace kinefuse {

inline constexpr const char* kFitSummarySchema = "kinefuse.fit/1";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kResidualsFile = "residuals.json";
inline constexpr const char* kLossLogFile = "loss_log.csv";
inline constexpr const char* kTimingFile = "timing.json";

inline Checkpoint make_checkpoint(const Problem& pb, const FitState& s) {
  Checkpoint ck;
  ck.net = s.net;
  ck.descriptor_hash = pb.tree.descriptor_hash();
  ck.scenario_hash = pb.rec->scenario_hash;
  ck.duration = pb.duration;
  ck.blocks.emplace_back("scale", s.beta.scale);
  ck.blocks.emplace_back("offsets", Eigen::Map<const Eigen::VectorXd>(s.beta.offsets.data(), s.beta.offsets.size()));
  for (std::size_t i = 0; i < s.cal.imus.size(); ++i) {
    const auto& c = s.cal.imus[i];
    Eigen::VectorXd v(17);
    v << c.q_sb, c.knots[0], c.knots[1], c.knots[2], c.delta;
    ck.blocks.emplace_back("imu:" + pb.rec->sensors[i].id, v);
  }
  ck.blocks.emplace_back("phone_delta", Eigen::VectorXd::Constant(1, s.cal.phone_delta));
  return ck;
}

inline FitState state_from_checkpoint(const Problem& pb, const Checkpoint& ck) {
  if (ck.descriptor_hash != pb.tree.descriptor_hash()) throw ConfigError("checkpoint was fit with another body model");
  if (ck.net.config().pose_dim != pb.pose_dim()) throw ConfigError("checkpoint pose size does not match the model");
  const auto block = [&](const std::string& name, Eigen::Index size) {
    const Eigen::VectorXd* v = ck.find(name);
    if (!v || v->size() != size) throw IoError("checkpoint block '" + name + "' missing or malformed");
    return *v;
  };
  FitState s{ck.net, ScaleParams::neutral(pb.tree), {}};
  s.beta.scale = block("scale", s.beta.scale.size());
  const Eigen::VectorXd off = block("offsets", s.beta.offsets.size());
  s.beta.offsets = Eigen::Map<const MarkerMatrix>(off.data(), s.beta.offsets.rows(), 3);
  for (int i = 0; i < pb.sensors(); ++i) {
    const Eigen::VectorXd v = block("imu:" + pb.rec->sensors[i].id, 17);
    ImuCalibration c;
    c.q_sb = v.segment<4>(0);
    for (int k = 0; k < 3; ++k) c.knots[k] = v.segment<4>(4 + 4 * k);
    c.delta = v(16);
    s.cal.imus.push_back(c);
  }
  s.cal.phone_delta = block("phone_delta", 1)(0);
  return s;
}

inline nlohmann::json to_json(const LossBreakdown& l) {
  return {{"total", l.total},       {"keypoint", l.keypoint},       {"reproj", l.reproj},
          {"attitude", l.attitude}, {"gyro_sensor", l.gyro_sensor}, {"gyro_phone", l.gyro_phone}};
}

inline std::string loss_log_csv(const std::vector<LossBreakdown>& history, const OptimizerConfig& o) {
  std::string out = "step,lr,total,keypoint,reproj,attitude,gyro_sensor,gyro_phone\n";
  char buf[512];
  for (std::size_t k = 0; k < history.size(); ++k) {
    const int step = static_cast<int>(k) + 1;
    if (step % o.log_every != 0 && k + 1 != history.size()) continue;
    const auto& l = history[k];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", step, lr_at(o, step - 1), l.total,
                  l.keypoint, l.reproj, l.attitude, l.gyro_sensor, l.gyro_phone);
    out += buf;
  }
  return out;
}

/// Writes every fit artifact into `dir`. Wall time goes to its own file so
/// the others are byte-reproducible.
inline void write_fit(const std::filesystem::path& dir, const Problem& pb, const FitConfig& cfg, const FitResult& r,
                      const std::string& manifest) {
  std::filesystem::create_directories(dir);
  write_checkpoint((dir / kCheckpointFile).string(), make_checkpoint(pb, r.state));

  nlohmann::json sum;
  sum["schema"] = kFitSummarySchema;
  sum["mode"] = fit_mode_name(pb.mode);
  sum["scenario_hash"] = hash_hex(pb.rec->scenario_hash);
  sum["manifest"] = manifest;
  sum["config"] = cfg.to_json();
  sum["config"]["optimizer"].erase("threads");  // results do not depend on it
  sum["steps_run"] = r.steps_run;
  sum["diverged"] = r.diverged;
  sum["divergence_step"] = r.diverged ? nlohmann::json(r.divergence_step) : nlohmann::json(nullptr);
  sum["final_loss"] = r.history.empty() ? nlohmann::json(nullptr) : to_json(r.history.back());
  std::vector<std::string> segs;
  for (int i = 0; i < pb.sensors(); ++i) segs.push_back(pb.rec->sensors[i].segment);
  sum["calibration"] = calibration_json(r.state.cal, segs);
  sum["scale"] = detail::vec_json(r.state.beta.scale);
  detail::open_out(dir / kSummaryFile) << sum.dump(2) << '\n';

  nlohmann::json res = to_json(stream_residuals(pb, r.state, resolve_threads(cfg.opt.threads)));
  res["scenario_hash"] = hash_hex(pb.rec->scenario_hash);
  res["mode"] = fit_mode_name(pb.mode);
  detail::open_out(dir / kResidualsFile) << res.dump(2) << '\n';

  detail::open_out(dir / kLossLogFile) << loss_log_csv(r.history, cfg.opt);
  detail::open_out(dir / kTimingFile) << nlohmann::json{{"seconds", r.seconds}}.dump(2) << '\n';
}

/// A fit directory reloaded against its recording.
struct LoadedFit {
  nlohmann::json summary;
  std::unique_ptr<Recording> rec;  // heap-held: the problem points into it
  std::unique_ptr<Problem> problem;
  FitState state;
};

inline LoadedFit load_fit(const std::filesystem::path& dir, const std::string& manifest_override = {}) {
  std::vector<std::string> missing;
  for (const char* f : {kCheckpointFile, kSummaryFile, kResidualsFile}) {
    if (!std::filesystem::is_regular_file(dir / f)) missing.push_back(f);
  }
  if (!missing.empty()) {
    std::string m;
    for (const auto& f : missing) m += (m.empty() ? "" : ", ") + f;
    throw IoError("fit directory '" + dir.string() + "' lacks " + m);
  }
  LoadedFit out;
  std::ifstream is(dir / kSummaryFile);
  try {
    is >> out.summary;
    if (out.summary.value("schema", std::string()) != kFitSummarySchema) {
      throw IoError("'" + (dir / kSummaryFile).string() + "' is not a fit summary");
    }
    const std::string manifest =
        manifest_override.empty() ? out.summary.at("manifest").get<std::string>() : manifest_override;
    const FitMode mode = fit_mode_from_name(out.summary.at("mode").get<std::string>());
    out.rec = std::make_unique<Recording>(read_recording(manifest, mode == FitMode::kFusion));
    const FitConfig cfg = FitConfig::from_json(out.summary.at("config"));
    out.problem = std::make_unique<Problem>(*out.rec, mode, cfg.weights);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + (dir / kSummaryFile).string() + "': " + e.what());
  }
  const Checkpoint ck = read_checkpoint((dir / kCheckpointFile).string());
  if (ck.scenario_hash != out.rec->scenario_hash) throw ConfigError("checkpoint and recording come from different scenarios");
  out.state = state_from_checkpoint(*out.problem, ck);
  return out;
}

}  // namespace kinefuse
