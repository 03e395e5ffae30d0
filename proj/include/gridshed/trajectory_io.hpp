// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "gridshed/dae_sim.hpp"

namespace gridshed {

nlohmann::json events_to_json(const std::vector<Event>& events);
std::vector<Event> events_from_json(const nlohmann::json& j);

/// CSV with a leading "t" column and one column per channel. Two sidecars
/// are written next to it: `<path>.events.json` (the event list) and
/// `<path>.meta.json` (equilibrium reference and termination status).
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj);

/// Reads a CSV written by write_trajectory_csv. Missing sidecars are
/// tolerated: events are then empty and the reference is the first row.
Trajectory read_trajectory_csv(const std::filesystem::path& path);

/// Compact store used by the sweep: `<stem>.json` holds the metadata and
/// `<stem>.f64` the little-endian doubles (times row, then one row per
/// channel).
void write_trajectory_binary(const std::filesystem::path& stem, const Trajectory& traj);
Trajectory read_trajectory_binary(const std::filesystem::path& stem);

/// Writes `text` to `path` through a temporary file and rename, so readers
/// never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

}  // namespace gridshed
