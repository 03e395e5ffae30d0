// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "gridshed/dae_sim.hpp"
#include "gridshed/error.hpp"

namespace gridshed {

enum class Verdict { stable, unstable };
enum class DecidingTest { excursion, variance, envelope };

std::string_view to_string(Verdict v);
std::string_view to_string(DecidingTest t);
Verdict verdict_from_string(std::string_view s);

struct LabelerConfig {
  // Relative excursion band per channel class (name prefix before '_').
  // Classes without an entry are not banded.
  std::map<std::string, double> excursion_band{{"V", 0.20}};
  double tail_fraction = 0.25;
  double variance_floor = 1e-6;
  int n_envelope_windows = 6;
  double slope_threshold = -1e-3;
  double min_duration = 50.0;  // seconds of post-shed data required
  double log_epsilon = 1e-12;

  void validate() const;
};

/// Missing keys keep their defaults.
void to_json(nlohmann::json& j, const LabelerConfig& c);
void from_json(const nlohmann::json& j, LabelerConfig& c);

struct Label {
  Verdict verdict = Verdict::stable;
  DecidingTest deciding_test = DecidingTest::variance;
  std::string deciding_channel;  // empty when every channel passed
};

/// Raised when a trajectory cannot be labeled (too short, no reference).
class ViabilityError : public Error {
 public:
  using Error::Error;
};

struct ChannelVerdict {
  bool flagged = false;
  std::string channel;
};

/// Any banded channel leaving its band (strictly) marks the shed unstable.
ChannelVerdict excursion_test(const Trajectory& post, const LabelerConfig& config);

/// Normalized tail variance of one channel.
double tail_variance(const Trajectory& tail, std::size_t channel);

/// True (stable) when every channel's normalized tail variance is below the
/// floor. `tail` is the last tail_fraction of the post-shed data.
ChannelVerdict variance_test(const Trajectory& tail, const LabelerConfig& config);

/// Least-squares slope of log RMS over equal windows for one channel.
double envelope_slope(const Trajectory& tail, std::size_t channel, const LabelerConfig& config);

/// Unstable when any unsettled channel's envelope slope reaches the threshold.
ChannelVerdict envelope_slope_test(const Trajectory& tail, const LabelerConfig& config);

/// Tail used by the variance and envelope tests.
Trajectory tail_of(const Trajectory& post, const LabelerConfig& config);

/// Excursion first (unstable short-circuit), then variance (stable
/// short-circuit), then the envelope slope decides.
Label label(const Trajectory& post, const LabelerConfig& config = {});

}  // namespace gridshed
