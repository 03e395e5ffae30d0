// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gridshed/attack.hpp"
#include "gridshed/dae_sim.hpp"
#include "gridshed/labeler.hpp"
#include "gridshed/mpa.hpp"

namespace gridshed {

/// How each enumerated attack gets its gain: find the smallest destabilizing
/// gain from the small-signal model, push it until the dominant mode grows at
/// `growth_target`, then confirm with a no-shed run that the detector alarms
/// within `verify_horizon` seconds of activation.
struct GainPolicy {
  double growth_target = 0.05;  // 1/s
  double k_min = 1e-3;
  double k_max = 1e2;
  double verify_horizon = 60.0;
};

struct SweepConfig {
  std::vector<Variable> read_vars{Variable::omega, Variable::delta, Variable::V,    Variable::theta,
                                  Variable::PG,    Variable::QG,    Variable::eq_p, Variable::ed_p};
  std::vector<Variable> write_vars{Variable::omega, Variable::delta, Variable::V,    Variable::theta, Variable::PG,
                                   Variable::QG,    Variable::eq_p,  Variable::ed_p, Variable::PL,    Variable::QL};
  std::vector<std::size_t> loads;  // load indices; empty means every load
  std::size_t max_attacks = 80;    // accepted attacks to keep
  std::uint64_t seed = 7;
  GainPolicy gain;
  double kick = 1e-4;  // alternating +/- rotor speed offsets at attack onset
  double t_on = 0.0;
  double shed_delay = 10.0;
  double post_shed = 200.0;
  double dt = 0.01;
  double record_rate = 20.0;
  PronyConfig prony;
  LabelerConfig labeler;
  unsigned threads = 1;
  std::filesystem::path output_dir;

  double t_shed() const { return t_on + shed_delay; }
  double t_end() const { return t_shed() + post_shed; }
  void validate() const;
};

void to_json(nlohmann::json& j, const SweepConfig& c);
void from_json(const nlohmann::json& j, SweepConfig& c);

/// Gain-policy outcome for one candidate attack.
struct AttackCalibration {
  AttackSpec spec;  // gain filled in when accepted
  std::optional<double> critical_gain;
  double growth_rate = 0.0;
  std::optional<double> alarm_time;
  bool accepted = false;
  std::string reason;  // why it was rejected
};

void to_json(nlohmann::json& j, const AttackCalibration& c);
void from_json(const nlohmann::json& j, AttackCalibration& c);

SpeedKick sweep_kick(const GridModel& model, const SweepConfig& config);

AttackCalibration calibrate_attack(const GridModel& model, const Equilibrium& eq, const Target& read,
                                   const Target& write, const SweepConfig& config);

/// Shuffles the candidate list with the seed and calibrates in that order
/// until max_attacks are accepted.
std::vector<AttackCalibration> calibrate_attacks(const GridModel& model, const Equilibrium& eq,
                                                 const std::vector<AttackSpec>& candidates, const SweepConfig& config);

struct Viability {
  bool viable = false;
  std::string reason;  // "integrator" or "duration" when rejected
};

struct ScenarioResult {
  std::string id;
  AttackSpec attack;
  std::size_t load_index = 0;
  int load_bus = 0;
  double t_shed = 0.0;
  bool terminated_early = false;
  std::string termination_reason;
  double end_time = 0.0;
  Viability viability;
  std::optional<Label> label;
  std::string error;  // set when the scenario could not be run at all
};

void to_json(nlohmann::json& j, const ScenarioResult& r);
void from_json(const nlohmann::json& j, ScenarioResult& r);

std::string scenario_id(const GridModel& model, const AttackSpec& attack, std::size_t load_index);

/// Early termination before 50 s of post-shed data is an integrator
/// rejection; a run that ended normally with too little data is a duration
/// rejection.
Viability viability_filter(bool terminated_early, double end_time, double t_shed, double min_post = 50.0);
Viability viability_filter(const ScenarioResult& r, double min_post = 50.0);

/// Runs one attack/shed scenario and labels it when viable.
ScenarioResult run_scenario(const GridModel& model, const Equilibrium& eq, const AttackSpec& attack,
                            std::size_t load_index, const SweepConfig& config, Trajectory* trajectory = nullptr);

using SweepProgress = std::function<void(std::size_t done, std::size_t total, const ScenarioResult&)>;

/// Every (attack, load) pair. Results and trajectories are persisted under
/// output_dir when it is set; scenarios already on disk are loaded instead of
/// rerun.
std::vector<ScenarioResult> run_sweep(const GridModel& model, const Equilibrium& eq,
                                      const std::vector<AttackSpec>& attacks, const SweepConfig& config,
                                      const SweepProgress& progress = {});

std::filesystem::path scenario_path(const std::filesystem::path& sweep_dir, const std::string& id);
std::filesystem::path trajectory_stem(const std::filesystem::path& sweep_dir, const std::string& id);
std::vector<ScenarioResult> load_sweep_results(const std::filesystem::path& sweep_dir);

struct SampleMeta {
  std::string scenario_id;
  Target read;
  Target write;
  double gain = 0.0;
};

struct ShedSample {
  Eigen::MatrixXd channels;  // C x T, raw units
  std::size_t load_index = 0;
  Verdict label = Verdict::stable;
  SampleMeta meta;
};

/// Pre-shed window [t_shed - window_s, t_shed) of a viable scenario.
ShedSample make_sample(const ScenarioResult& result, const Trajectory& traj, double window_s = 10.0,
                       double record_rate = 20.0);

/// Samples from every viable scenario of a persisted sweep, in scenario id
/// order. `channels` receives the recorded channel names.
std::vector<ShedSample> collect_samples(const std::filesystem::path& sweep_dir, std::vector<std::string>& channels,
                                        double window_s = 10.0, double record_rate = 20.0);

struct SplitData {
  std::vector<SampleMeta> meta;
  std::vector<int> load_index;
  std::vector<int> label;  // 0 = STABLE, 1 = UNSTABLE
  std::vector<float> x;    // sample-major, then channel, then time
  std::size_t size() const { return label.size(); }
};

struct Dataset {
  std::vector<std::string> channels;
  std::size_t C = 0, T = 0, L = 0;
  Eigen::VectorXd mean, stddev;
  std::uint64_t seed = 0;
  SplitData train, val, test;
  nlohmann::json manifest;
};

/// Stratified 60/20/20 split with per-channel z-normalization from the
/// training split only.
Dataset split_and_normalize(const std::vector<ShedSample>& samples, const std::vector<std::string>& channels,
                            std::size_t n_loads, std::uint64_t seed, double record_rate = 20.0);

/// Per-channel mean and population standard deviation over every time step of
/// the given samples; constant channels get a standard deviation of 1.
std::pair<Eigen::VectorXd, Eigen::VectorXd> channel_stats(const std::vector<const ShedSample*>& samples);

void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

struct CountRow {
  std::string key;
  std::size_t stable = 0;
  std::size_t total = 0;
};

struct DistributionReport {
  std::vector<CountRow> by_load;
  std::vector<CountRow> by_read_var;
  std::vector<CountRow> by_write_var;
  std::size_t total = 0;
  std::size_t stable = 0;
};

DistributionReport distribution_report(const Dataset& ds);
DistributionReport distribution_report(const std::vector<SampleMeta>& meta, const std::vector<int>& load_index,
                                       const std::vector<int>& label, std::size_t n_loads);
std::string format_report(const DistributionReport& r);
/// Writes by_load.csv, by_read_var.csv, by_write_var.csv and report.txt.
void write_report(const std::filesystem::path& dir, const DistributionReport& r);

}  // namespace gridshed
