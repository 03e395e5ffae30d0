// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>

#include "gridshed/dataset.hpp"

namespace gridshed {

/// Two attacks sharing a write target but reading different states, for
/// which shedding the same load ends stable in one case and unstable in the
/// other.
struct ContrastPair {
  ScenarioResult stable;
  ScenarioResult unstable;
};

struct PairSearchConfig {
  SweepConfig sweep;               // catalog, gain policy, timing, labeler
  std::size_t reads_per_write = 6;  // calibrated attacks tried per write target
  std::size_t max_candidates_per_write = 24;
  double time_budget = 540.0;      // seconds of wall time
};

using PairSearchLog = std::function<void(const std::string&)>;

/// Walks write targets in seeded order. For each, calibrates attacks from
/// different read sources, then sheds each load under every calibrated
/// attack until one load shows both verdicts.
std::optional<ContrastPair> find_contrasting_pair(const GridModel& model, const Equilibrium& eq,
                                                  const PairSearchConfig& config, const PairSearchLog& log = {});

}  // namespace gridshed
