// SPDX-License-Identifier: Apache-2.0
#include "gridshed/pair_search.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <random>

namespace gridshed {

std::optional<ContrastPair> find_contrasting_pair(const GridModel& model, const Equilibrium& eq,
                                                  const PairSearchConfig& config, const PairSearchLog& log) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };
  auto note = [&](const std::string& s) {
    if (log) log(s);
  };

  const SweepConfig& sc = config.sweep;
  std::map<std::string, std::vector<AttackSpec>> by_write;
  std::vector<std::string> writes;
  for (const auto& a : enumerate_attacks(model, sc.read_vars, sc.write_vars)) {
    const std::string key = to_string(a.write);
    if (!by_write.count(key)) writes.push_back(key);
    by_write[key].push_back(a);
  }
  std::mt19937_64 rng(sc.seed);
  std::shuffle(writes.begin(), writes.end(), rng);

  std::vector<std::size_t> loads = sc.loads;
  if (loads.empty())
    for (std::size_t l = 0; l < model.loads().size(); ++l) loads.push_back(l);

  for (const auto& w : writes) {
    if (elapsed() > config.time_budget) break;
    auto candidates = by_write[w];
    std::shuffle(candidates.begin(), candidates.end(), rng);
    std::vector<AttackSpec> accepted;
    for (std::size_t i = 0; i < candidates.size() && i < config.max_candidates_per_write; ++i) {
      if (accepted.size() >= config.reads_per_write || elapsed() > config.time_budget) break;
      const auto cal = calibrate_attack(model, eq, candidates[i].read, candidates[i].write, sc);
      if (cal.accepted) accepted.push_back(cal.spec);
    }
    note("write " + w + ": " + std::to_string(accepted.size()) + " calibrated attacks");
    if (accepted.size() < 2) continue;

    for (std::size_t load : loads) {
      std::optional<ScenarioResult> stable, unstable;
      for (const auto& a : accepted) {
        if (elapsed() > config.time_budget) return std::nullopt;
        ScenarioResult r = run_scenario(model, eq, a, load, sc);
        if (!r.viability.viable || !r.label) continue;
        auto& slot = r.label->verdict == Verdict::stable ? stable : unstable;
        if (!slot) slot = std::move(r);
        if (stable && unstable) {
          note("contrast at load " + std::to_string(load) + ": " + attack_id(stable->attack) + " vs " +
               attack_id(unstable->attack));
          return ContrastPair{std::move(*stable), std::move(*unstable)};
        }
      }
    }
  }
  return std::nullopt;
}

}  // namespace gridshed
