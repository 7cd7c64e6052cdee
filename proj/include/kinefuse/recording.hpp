#pragma once

// Recording container and its on-disk form: a JSON manifest next to
// JSON-lines stream files (keypoints, one file per IMU, phone gyro).

#include "kinefuse/body_model.hpp"
#include "kinefuse/camera.hpp"
#include "kinefuse/errors.hpp"
#include "kinefuse/sensor_model.hpp"

#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace kinefuse {

inline constexpr const char* kRecordingSchema = "kinefuse.recording/1";

struct Recording {
  CameraIntrinsics intrinsics;
  double duration = 0.0;
  std::uint64_t scenario_hash = 0;
  nlohmann::json model_descriptor;  // empty: shipped default model
  std::vector<KeypointFrame> frames;
  std::vector<SensorStream> sensors;
  PhoneGyroStream phone;

  KinematicTree tree() const {
    return model_descriptor.is_null() ? KinematicTree::default_lower_body()
                                      : KinematicTree::from_json(model_descriptor);
  }
};

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::uint64_t parse_hash_hex(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw ConfigError("malformed scenario hash '" + s + "'");
  }
  return std::stoull(s, nullptr, 16);
}

namespace detail {

inline nlohmann::json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  auto a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

template <int N>
Eigen::Matrix<double, N, 1> fixed_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || static_cast<int>(j.size()) != N) {
    throw ConfigError(std::string(what) + ": expected " + std::to_string(N) + " numbers");
  }
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v(i) = j.at(i).get<double>();
  return v;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write '" + p.string() + "'");
  return os;
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline void check_increasing(const std::vector<double>& t, const std::string& what) {
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (!(t[i] > t[i - 1])) throw ConfigError(what + ": timestamps not strictly increasing");
  }
}

}  // namespace detail

inline void write_keypoints(const std::filesystem::path& p, const std::vector<KeypointFrame>& frames) {
  auto os = detail::open_out(p);
  for (const auto& f : frames) {
    nlohmann::json j;
    j["t"] = f.t;
    auto pc = nlohmann::json::array(), x2 = nlohmann::json::array();
    for (Eigen::Index m = 0; m < f.p_c.rows(); ++m) {
      pc.push_back({f.p_c(m, 0), f.p_c(m, 1), f.p_c(m, 2)});
      x2.push_back({f.x(m, 0), f.x(m, 1)});
    }
    j["p_c"] = pc;
    j["x2d"] = x2;
    j["sigma_mm"] = detail::vec_json(f.sigma_mm);
    os << j.dump() << '\n';
  }
}

inline std::vector<KeypointFrame> read_keypoints(const std::filesystem::path& p, int markers) {
  std::vector<KeypointFrame> frames;
  for (const auto& j : detail::read_jsonl(p)) {
    KeypointFrame f;
    f.t = j.at("t").get<double>();
    const auto& pc = j.at("p_c");
    const auto& x2 = j.at("x2d");
    const auto& sg = j.at("sigma_mm");
    if (static_cast<int>(pc.size()) != markers || static_cast<int>(x2.size()) != markers ||
        static_cast<int>(sg.size()) != markers) {
      throw ConfigError(p.string() + ": frame at t=" + std::to_string(f.t) + " does not have " +
                        std::to_string(markers) + " keypoints");
    }
    f.p_c.resize(markers, 3);
    f.x.resize(markers, 2);
    f.sigma_mm.resize(markers);
    f.confidence.resize(markers);
    for (int m = 0; m < markers; ++m) {
      f.p_c.row(m) = detail::fixed_from_json<3>(pc.at(m), "p_c").transpose();
      f.x.row(m) = detail::fixed_from_json<2>(x2.at(m), "x2d").transpose();
      f.sigma_mm(m) = sg.at(m).get<double>();
      f.confidence(m) = confidence_from_std(f.sigma_mm(m));
    }
    frames.push_back(std::move(f));
  }
  std::vector<double> ts;
  for (const auto& f : frames) ts.push_back(f.t);
  detail::check_increasing(ts, p.string());
  return frames;
}

inline void write_sensor_stream(const std::filesystem::path& p, const SensorStream& s) {
  auto os = detail::open_out(p);
  nlohmann::json h{{"stream_id", s.id}, {"segment", s.segment},
                   {"rates", {{"att", s.attitude_rate}, {"gyro", s.gyro_rate}}}};
  os << h.dump() << '\n';
  for (std::size_t i = 0; i < s.att_t.size(); ++i) {
    nlohmann::json j{{"stream_id", s.id}, {"channel", "att"}, {"t", s.att_t[i]}, {"data", detail::vec_json(s.att_q[i])}};
    os << j.dump() << '\n';
  }
  for (std::size_t i = 0; i < s.gyro_t.size(); ++i) {
    nlohmann::json j{{"stream_id", s.id}, {"channel", "gyro"}, {"t", s.gyro_t[i]}, {"data", detail::vec_json(s.gyro[i])}};
    os << j.dump() << '\n';
  }
}

inline SensorStream read_sensor_stream(const std::filesystem::path& p) {
  const auto lines = detail::read_jsonl(p);
  if (lines.empty()) throw ConfigError(p.string() + ": empty sensor stream");
  SensorStream s;
  const auto& h = lines[0];
  if (!h.contains("segment")) throw ConfigError(p.string() + ": header line lacks 'segment'");
  s.id = h.at("stream_id").get<std::string>();
  s.segment = h.at("segment").get<std::string>();
  if (h.contains("rates")) {
    s.attitude_rate = h.at("rates").value("att", s.attitude_rate);
    s.gyro_rate = h.at("rates").value("gyro", s.gyro_rate);
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& j = lines[i];
    const auto ch = j.at("channel").get<std::string>();
    const double t = j.at("t").get<double>();
    if (ch == "att") {
      const Vec4 raw = detail::fixed_from_json<4>(j.at("data"), "att");
      const so3::UnitQuaternion q(raw);
      s.att_t.push_back(t);
      s.att_q.push_back(raw);  // as stored, so a rewrite is byte-identical
      s.att_r.push_back(so3::quat_to_matrix(q));
    } else if (ch == "gyro") {
      s.gyro_t.push_back(t);
      s.gyro.push_back(detail::fixed_from_json<3>(j.at("data"), "gyro"));
    } else {
      throw ConfigError(p.string() + ": unknown channel '" + ch + "'");
    }
  }
  detail::check_increasing(s.att_t, p.string() + " att");
  detail::check_increasing(s.gyro_t, p.string() + " gyro");
  return s;
}

inline void write_phone_stream(const std::filesystem::path& p, const PhoneGyroStream& s) {
  auto os = detail::open_out(p);
  os << nlohmann::json{{"stream_id", "phone"}, {"rates", {{"phone_gyro", s.rate}}}}.dump() << '\n';
  for (std::size_t i = 0; i < s.t.size(); ++i) {
    nlohmann::json j{{"stream_id", "phone"}, {"channel", "phone_gyro"}, {"t", s.t[i]}, {"data", detail::vec_json(s.gyro[i])}};
    os << j.dump() << '\n';
  }
}

inline PhoneGyroStream read_phone_stream(const std::filesystem::path& p) {
  const auto lines = detail::read_jsonl(p);
  PhoneGyroStream s;
  for (const auto& j : lines) {
    if (!j.contains("channel")) {
      if (j.contains("rates")) s.rate = j.at("rates").value("phone_gyro", s.rate);
      continue;
    }
    if (j.at("channel").get<std::string>() != "phone_gyro") throw ConfigError(p.string() + ": unexpected channel");
    s.t.push_back(j.at("t").get<double>());
    s.gyro.push_back(detail::fixed_from_json<3>(j.at("data"), "phone_gyro"));
  }
  detail::check_increasing(s.t, p.string());
  return s;
}

/// Writes manifest.json plus stream files into `dir`.
inline void write_recording(const std::filesystem::path& dir, const Recording& rec) {
  std::filesystem::create_directories(dir);
  nlohmann::json man;
  man["schema"] = kRecordingSchema;
  man["duration_s"] = rec.duration;
  man["scenario_hash"] = hash_hex(rec.scenario_hash);
  man["intrinsics"] = to_json(rec.intrinsics);
  if (!rec.model_descriptor.is_null()) {
    auto os = detail::open_out(dir / "model.json");
    os << rec.model_descriptor.dump(2) << '\n';
    man["model"] = "model.json";
  }
  write_keypoints(dir / "keypoints.jsonl", rec.frames);
  man["keypoints"] = "keypoints.jsonl";
  auto sensors = nlohmann::json::array();
  for (const auto& s : rec.sensors) {
    const std::string name = s.id + ".jsonl";
    write_sensor_stream(dir / name, s);
    sensors.push_back(name);
  }
  man["sensors"] = sensors;
  if (!rec.phone.empty()) {
    write_phone_stream(dir / "phone_gyro.jsonl", rec.phone);
    man["phone_gyro"] = "phone_gyro.jsonl";
  }
  auto os = detail::open_out(dir / "manifest.json");
  os << man.dump(2) << '\n';
}

/// Loads a recording. Sensor streams are skipped when `with_sensors` is false.
inline Recording read_recording(const std::filesystem::path& manifest_path, bool with_sensors = true) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest '" + manifest_path.string() + "'");
  nlohmann::json man;
  try {
    is >> man;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest '" + manifest_path.string() + "': " + e.what());
  }
  const auto dir = manifest_path.parent_path();
  Recording rec;
  try {
    if (man.value("schema", std::string()) != kRecordingSchema) {
      throw ConfigError(std::string("manifest: schema must be '") + kRecordingSchema + "'");
    }
    if (!man.contains("intrinsics")) throw ConfigError("manifest: missing field 'intrinsics'");
    if (!man.contains("duration_s")) throw ConfigError("manifest: missing field 'duration_s'");
    if (!man.contains("keypoints")) throw ConfigError("manifest: missing field 'keypoints'");
    rec.intrinsics = intrinsics_from_json(man.at("intrinsics"));
    rec.duration = man.at("duration_s").get<double>();
    if (!(rec.duration > 0.0)) throw ConfigError("manifest: duration_s must be positive");
    rec.scenario_hash = man.contains("scenario_hash") ? parse_hash_hex(man.at("scenario_hash").get<std::string>()) : 0;
    if (man.contains("model")) {
      const auto mp = dir / man.at("model").get<std::string>();
      std::ifstream ms(mp);
      if (!ms) throw IoError("cannot open model descriptor '" + mp.string() + "'");
      ms >> rec.model_descriptor;
    }
    const int markers = rec.tree().marker_count();
    rec.frames = read_keypoints(dir / man.at("keypoints").get<std::string>(), markers);
    if (with_sensors) {
      for (const auto& s : man.value("sensors", nlohmann::json::array())) {
        rec.sensors.push_back(read_sensor_stream(dir / s.get<std::string>()));
      }
    }
    if (man.contains("phone_gyro")) rec.phone = read_phone_stream(dir / man.at("phone_gyro").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest '" + manifest_path.string() + "': " + e.what());
  }
  const auto check_extent = [&](const std::vector<double>& t, double rate, const std::string& what) {
    if (t.empty()) return;
    const double slack = kTimeMargin + 1.0 / rate + 1e-9;
    if (t.front() < -slack || std::abs(t.back() - rec.duration) > slack) {
      throw ConfigError("stream '" + what + "' does not span the manifest duration");
    }
  };
  std::vector<double> kt;
  for (const auto& f : rec.frames) kt.push_back(f.t);
  check_extent(kt, 30.0, "keypoints");
  for (const auto& s : rec.sensors) {
    check_extent(s.att_t, s.attitude_rate, s.id + " att");
    check_extent(s.gyro_t, s.gyro_rate, s.id + " gyro");
  }
  check_extent(rec.phone.t, rec.phone.rate, "phone_gyro");
  return rec;
}

}  // namespace kinefuse
