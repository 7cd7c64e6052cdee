// kinefuse: simulate recordings, fit trajectories, compare fits with truth.

#include "kinefuse/artifacts.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace kinefuse;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2, kIo = 3 };

KinematicTree load_tree(const std::string& model) {
  return model.empty() ? KinematicTree::default_lower_body() : KinematicTree::from_file(model);
}

int cmd_simulate(const std::string& scenario_path, const std::string& model, std::optional<std::uint64_t> seed,
                 const std::string& out) {
  ScenarioConfig cfg = scenario_path.empty() ? ScenarioConfig::defaults() : ScenarioConfig::from_file(scenario_path);
  if (seed) cfg.seed = *seed;
  const KinematicTree tree = load_tree(model);
  const GroundTruth gt(cfg, tree);
  Recording rec = simulate_recording(gt);
  if (!model.empty()) rec.model_descriptor = tree.descriptor();
  write_recording(out, rec);
  write_truth(fs::path(out) / "truth.json", make_truth_record(gt));
  detail::open_out(fs::path(out) / "scenario.json") << cfg.to_json().dump(2) << '\n';

  std::printf("scenario %s  duration %.3g s  seed %llu\n", hash_hex(cfg.hash()).c_str(), cfg.duration,
              static_cast<unsigned long long>(cfg.seed));
  std::printf("keypoints   %zu frames @ %g Hz\n", rec.frames.size(), cfg.keypoint_hz);
  for (const auto& s : rec.sensors) {
    std::printf("%-11s %zu attitude @ %g Hz, %zu gyro @ %g Hz (%s)\n", s.id.c_str(), s.att_t.size(), s.attitude_rate,
                s.gyro_t.size(), s.gyro_rate, s.segment.c_str());
  }
  std::printf("phone gyro  %zu samples @ %g Hz\n", rec.phone.t.size(), rec.phone.rate);
  if (cfg.occlusion) {
    long zeroed = 0;
    for (const auto& f : rec.frames) zeroed += (f.confidence.array() == 0.0).count();
    std::printf("occlusion   [%g, %g) of the recording, %ld keypoints zeroed\n", cfg.occlusion_start,
                cfg.occlusion_end, zeroed);
  }
  std::printf("wrote %s\n", out.c_str());
  return kOk;
}

int cmd_fit(const std::string& manifest, const std::string& mode_name, const std::string& config_path,
            std::optional<int> steps, std::optional<std::uint64_t> seed, const std::string& out, bool quiet) {
  const FitMode mode = fit_mode_from_name(mode_name);
  FitConfig cfg = config_path.empty() ? FitConfig{} : FitConfig::from_file(config_path);
  if (steps) cfg = cfg.with_steps(*steps);
  if (seed) cfg.opt.seed = *seed;
  cfg.validate();

  const std::string man = fs::weakly_canonical(manifest).string();
  const Recording rec = read_recording(man, mode == FitMode::kFusion);
  if (mode == FitMode::kFusion && rec.sensors.empty()) {
    throw ConfigError("fusion mode needs sensor streams; the manifest lists none");
  }
  const Problem pb(rec, mode, cfg.weights);
  const auto progress = [&](const Progress& p) {
    if (quiet) return;
    std::fprintf(stderr, "step %6d  lr %.2e  total %.4e  kp %.3e  rp %.3e  att %.3e  gs %.3e  gp %.3e\n", p.step,
                 p.lr, p.loss.total, p.loss.keypoint, p.loss.reproj, p.loss.attitude, p.loss.gyro_sensor,
                 p.loss.gyro_phone);
  };
  const FitResult r = fit(pb, cfg, nullptr, progress);
  write_fit(out, pb, cfg, r, man);
  if (r.diverged) {
    std::fprintf(stderr, "error: optimization diverged at step %d; last finite state written to %s\n",
                 r.divergence_step, out.c_str());
    return kNumerical;
  }
  const ResidualReport rr = stream_residuals(pb, r.state, resolve_threads(cfg.opt.threads));
  std::printf("%s fit: %d steps in %.1f s\n", fit_mode_name(mode), r.steps_run, r.seconds);
  std::printf("residuals %s\n", to_json(rr).dump().c_str());
  std::printf("wrote %s\n", out.c_str());
  return kOk;
}

int cmd_report(const std::vector<std::string>& fits, std::vector<std::string> labels, const std::string& truth_path,
               const std::string& out) {
  if (!labels.empty() && labels.size() != fits.size()) throw ConfigError("give one --label per --fit");
  std::vector<std::pair<std::string, ComparisonReport>> reports;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const LoadedFit lf = load_fit(fits[i]);
    const TruthRecord truth = read_truth(truth_path, lf.problem->tree);
    if (truth.scenario_hash != lf.rec->scenario_hash) {
      throw ConfigError("fit '" + fits[i] + "' (scenario " + hash_hex(lf.rec->scenario_hash) +
                        ") does not match the truth (scenario " + hash_hex(truth.scenario_hash) + ")");
    }
    const std::string label = labels.empty() ? fit_mode_name(lf.problem->mode) : labels[i];
    reports.emplace_back(label, compare_to_truth(*lf.problem, lf.state, truth));
  }

  nlohmann::json j;
  j["reports"] = nlohmann::json::array();
  for (const auto& [label, r] : reports) {
    auto e = to_json(r);
    e["label"] = label;
    j["reports"].push_back(e);
  }
  std::string csv = comparison_csv(reports);
  std::string paired;
  if (reports.size() == 2) {
    // Second minus first, e.g. fusion - video.
    j["paired_deltas"] = paired_deltas(reports[0].second, reports[1].second);
    paired = paired_csv(reports[0].first, reports[0].second, reports[1].first, reports[1].second);
  }
  if (out.empty()) {
    std::cout << csv;
    if (!paired.empty()) std::cout << '\n' << paired;
    return kOk;
  }
  fs::create_directories(out);
  detail::open_out(fs::path(out) / "comparison.json") << j.dump(2) << '\n';
  detail::open_out(fs::path(out) / "comparison.csv") << csv;
  if (!paired.empty()) detail::open_out(fs::path(out) / "paired.csv") << paired;
  std::cout << csv;
  if (!paired.empty()) std::cout << '\n' << paired;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint-angle reconstruction from video keypoints and inertial sensors"};
  app.require_subcommand(1);

  std::string scenario, model, out, manifest, mode = "fusion", config, truth;
  std::uint64_t seed = 0;
  int steps = 0;
  bool quiet = false;
  std::vector<std::string> fits, labels;

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic recording and its ground truth");
  sim->add_option("--scenario", scenario, "Scenario JSON (default: built-in scenario)")->check(CLI::ExistingFile);
  sim->add_option("--model", model, "Body model descriptor (default: built-in lower body)")->check(CLI::ExistingFile);
  auto* sim_seed = sim->add_option("--seed", seed, "Noise seed (overrides the scenario's)");
  sim->add_option("--out", out, "Output directory")->required();

  auto* fitc = app.add_subcommand("fit", "Fit a trajectory to a recording");
  fitc->add_option("--manifest", manifest, "Recording manifest.json")->required();
  fitc->add_option("--mode", mode, "video or fusion")->check(CLI::IsMember({"video", "fusion"}));
  fitc->add_option("--config", config, "Fit configuration JSON")->check(CLI::ExistingFile);
  auto* fit_steps = fitc->add_option("--steps", steps, "Override the step count")->check(CLI::PositiveNumber);
  auto* fit_seed = fitc->add_option("--seed", seed, "Initialization and sampling seed");
  fitc->add_option("--out", out, "Output directory")->required();
  fitc->add_flag("--quiet", quiet, "No progress log");

  auto* rep = app.add_subcommand("report", "Compare fits with the ground truth");
  rep->add_option("--fit", fits, "Fit directory (repeatable; two give paired deltas)")->required();
  rep->add_option("--label", labels, "Label per fit (default: its mode)");
  rep->add_option("--truth", truth, "Ground-truth sidecar (truth.json)")->required();
  rep->add_option("--out", out, "Output directory (default: print CSV only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) {
      return cmd_simulate(scenario, model, *sim_seed ? std::optional<std::uint64_t>(seed) : std::nullopt, out);
    }
    if (*fitc) {
      return cmd_fit(manifest, mode, config, *fit_steps ? std::optional<int>(steps) : std::nullopt,
                     *fit_seed ? std::optional<std::uint64_t>(seed) : std::nullopt, out, quiet);
    }
    if (*rep) return cmd_report(fits, labels, truth, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kNumerical;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kNumerical;
  }
  return kUsage;
}
