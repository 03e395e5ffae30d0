// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gridshed/dae_sim.hpp"

namespace gridshed {

struct PronyConfig {
  int window_len = 100;  // samples
  int stride = 20;       // samples between window evaluations
  int model_order = 12;
  double energy_floor = 0.02;
  double damping_alarm = 0.01;  // 1/s
  double min_mode_energy = 0.05;
  double fit_residual_max = 0.2;
  int consecutive_k = 3;
  double sample_dt = 0.05;
  double max_abs_sigma = 50.0;  // faster modes are treated as fitting artifacts

  void validate() const;
};

void to_json(nlohmann::json& j, const PronyConfig& c);
void from_json(const nlohmann::json& j, PronyConfig& c);

/// One damped oscillation A e^{sigma t} cos(2 pi freq t + phase), with t
/// measured from the start of the window. Conjugate pairs are merged.
struct Mode {
  double sigma = 0.0;
  double freq = 0.0;
  double amplitude = 0.0;
  double phase = 0.0;
  double energy_fraction = 0.0;
};

void to_json(nlohmann::json& j, const Mode& m);

/// Prony fit of a window (mean removed internally). Empty for a constant
/// window. Modes are sorted by energy fraction, largest first.
std::vector<Mode> prony_fit(const Eigen::VectorXd& window, int order, double sample_dt);

struct ModeSelection {
  std::vector<Mode> modes;
  double fit_residual = 1.0;  // relative L2 error of the refit reconstruction
};

/// Drops low-energy and unphysical modes, refits their amplitudes once on
/// `window`, and reports the reconstruction residual.
ModeSelection classify_modes(const std::vector<Mode>& modes, const Eigen::VectorXd& window, const PronyConfig& config);

struct WindowVerdict {
  double t_end = 0.0;
  bool unstable = false;
  ModeSelection selection;
};

WindowVerdict evaluate_window(const Eigen::VectorXd& window, double t_end, const PronyConfig& config);

/// Sliding-window alarm for one channel.
class AlarmState {
 public:
  explicit AlarmState(PronyConfig config = {});

  /// Appends uniformly spaced samples and evaluates every window that
  /// became due. Throws on non-uniform spacing.
  void update(const std::vector<double>& times, const std::vector<double>& values);
  void update(double t, double value);

  bool alarmed() const { return alarm_time_.has_value(); }
  std::optional<double> alarm_time() const { return alarm_time_; }
  int consecutive() const { return consecutive_; }
  long windows_evaluated() const { return windows_; }
  const std::vector<Mode>& modes_at_alarm() const { return modes_at_alarm_; }
  const std::optional<WindowVerdict>& last_window() const { return last_; }
  const PronyConfig& config() const { return config_; }

 private:
  PronyConfig config_;
  std::deque<double> buffer_;
  std::optional<double> last_t_;
  long since_window_ = 0;
  long windows_ = 0;
  int consecutive_ = 0;
  std::optional<double> alarm_time_;
  std::vector<Mode> modes_at_alarm_;
  std::optional<WindowVerdict> last_;
};

struct ChannelAlarm {
  bool alarmed = false;
  std::optional<double> alarm_time;
  std::vector<Mode> modes_at_alarm;
};

struct DetectionReport {
  std::map<std::string, ChannelAlarm> channels;
  /// Any channel alarmed; the earliest alarm time.
  bool alarmed = false;
  std::optional<double> alarm_time;
};

/// Runs one AlarmState per channel over samples with t in [t0, t1].
/// sample_dt is taken from the trajectory.
DetectionReport detect(const Trajectory& traj, PronyConfig config = {}, double t0 = -1e300, double t1 = 1e300);

/// {"alarmed", "alarm_time", "channels": {name: {"alarmed", "alarm_time", "modes_at_alarm"}}}.
nlohmann::json to_json(const DetectionReport& r);

}  // namespace gridshed
