// SPDX-License-Identifier: Apache-2.0
#include "gridshed/trajectory_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gridshed/error.hpp"

namespace gridshed {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

json meta_json(const Trajectory& traj) {
  json ref = json::object();
  for (std::size_t c = 0; c < traj.channels.size(); ++c)
    ref[traj.channels[c]] = traj.reference.size() ? traj.reference[static_cast<Eigen::Index>(c)] : 0.0;
  return {{"reference", ref},
          {"terminated_early", traj.terminated_early},
          {"termination_reason", traj.termination_reason},
          {"end_time", traj.end_time}};
}

void apply_meta(const json& meta, Trajectory& traj) {
  traj.terminated_early = meta.value("terminated_early", false);
  traj.termination_reason = meta.value("termination_reason", std::string());
  traj.end_time = meta.value("end_time", traj.times.empty() ? 0.0 : traj.times.back());
  if (meta.contains("reference")) {
    traj.reference.resize(static_cast<Eigen::Index>(traj.channels.size()));
    for (std::size_t c = 0; c < traj.channels.size(); ++c) {
      const auto& r = meta.at("reference");
      if (!r.contains(traj.channels[c])) throw Error("reference missing for channel " + traj.channels[c]);
      traj.reference[static_cast<Eigen::Index>(c)] = r.at(traj.channels[c]).get<double>();
    }
  }
}

double parse_double(std::string_view s, std::size_t line) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError(line, "bad number '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = with_suffix(path, ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json events_to_json(const std::vector<Event>& events) {
  json j = json::array();
  for (const auto& e : events) {
    json ev = {{"name", e.name}, {"t", e.t}};
    ev["load_index"] = e.load_index ? json(*e.load_index) : json(nullptr);
    j.push_back(ev);
  }
  return j;
}

std::vector<Event> events_from_json(const json& j) {
  std::vector<Event> out;
  for (const auto& ev : j) {
    Event e{ev.at("name").get<std::string>(), ev.at("t").get<double>(), std::nullopt};
    if (ev.contains("load_index") && !ev.at("load_index").is_null())
      e.load_index = ev.at("load_index").get<std::size_t>();
    out.push_back(e);
  }
  return out;
}

void write_trajectory_csv(const fs::path& path, const Trajectory& traj) {
  std::string text = "t";
  for (const auto& c : traj.channels) text += "," + c;
  text += '\n';
  char buf[32];
  auto put = [&](double v) {
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    text.append(buf, r.ptr);
  };
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    put(traj.times[k]);
    for (Eigen::Index c = 0; c < traj.samples.rows(); ++c) {
      text += ',';
      put(traj.samples(c, static_cast<Eigen::Index>(k)));
    }
    text += '\n';
  }
  write_file_atomic(path, text);
  write_file_atomic(with_suffix(path, ".events.json"), events_to_json(traj.events).dump(2) + "\n");
  write_file_atomic(with_suffix(path, ".meta.json"), meta_json(traj).dump(2) + "\n");
}

Trajectory read_trajectory_csv(const fs::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  Trajectory traj;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(1, "empty trajectory file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_commas(line);
  if (header.empty() || header.front() != "t") throw ParseError(1, "first column must be 't'");
  for (std::size_t i = 1; i < header.size(); ++i) traj.channels.emplace_back(header[i]);

  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_commas(line);
    if (cells.size() != header.size())
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " columns");
    traj.times.push_back(parse_double(cells[0], line_no));
    for (std::size_t i = 1; i < cells.size(); ++i) values.push_back(parse_double(cells[i], line_no));
  }
  const auto C = static_cast<Eigen::Index>(traj.channels.size());
  const auto T = static_cast<Eigen::Index>(traj.times.size());
  traj.samples = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>>(values.data(), C, T);
  traj.end_time = traj.times.empty() ? 0.0 : traj.times.back();

  if (fs::exists(with_suffix(path, ".events.json")))
    traj.events = events_from_json(json::parse(read_file(with_suffix(path, ".events.json"))));
  if (fs::exists(with_suffix(path, ".meta.json"))) {
    apply_meta(json::parse(read_file(with_suffix(path, ".meta.json"))), traj);
  }
  if (traj.reference.size() != C && T > 0) traj.reference = traj.samples.col(0);
  return traj;
}

void write_trajectory_binary(const fs::path& stem, const Trajectory& traj) {
  json meta = meta_json(traj);
  meta["channels"] = traj.channels;
  meta["samples"] = traj.times.size();
  meta["events"] = events_to_json(traj.events);
  const auto C = traj.channels.size(), T = traj.times.size();
  std::string blob((C + 1) * T * sizeof(double), '\0');
  std::memcpy(blob.data(), traj.times.data(), T * sizeof(double));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < T; ++k) {
      const double v = traj.samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k));
      std::memcpy(blob.data() + ((c + 1) * T + k) * sizeof(double), &v, sizeof(double));
    }
  write_file_atomic(with_suffix(stem, ".f64"), blob);
  write_file_atomic(with_suffix(stem, ".json"), meta.dump() + "\n");
}

Trajectory read_trajectory_binary(const fs::path& stem) {
  const json meta = json::parse(read_file(with_suffix(stem, ".json")));
  Trajectory traj;
  traj.channels = meta.at("channels").get<std::vector<std::string>>();
  const std::size_t T = meta.at("samples").get<std::size_t>(), C = traj.channels.size();
  const std::string blob = read_file(with_suffix(stem, ".f64"));
  if (blob.size() != (C + 1) * T * sizeof(double)) throw Error("trajectory blob size mismatch: " + stem.string());
  traj.times.resize(T);
  std::memcpy(traj.times.data(), blob.data(), T * sizeof(double));
  traj.samples.resize(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(T));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < T; ++k) {
      double v;
      std::memcpy(&v, blob.data() + ((c + 1) * T + k) * sizeof(double), sizeof(double));
      traj.samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) = v;
    }
  traj.events = events_from_json(meta.at("events"));
  apply_meta(meta, traj);
  return traj;
}

}  // namespace gridshed
