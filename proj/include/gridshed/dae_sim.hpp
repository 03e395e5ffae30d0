// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gridshed/attack.hpp"
#include "gridshed/grid_model.hpp"

namespace gridshed {

struct PowerFlowResult {
  Eigen::VectorXd V;
  Eigen::VectorXd theta;
  int iterations = 0;
};

/// Newton power flow on the bus balance equations with PV buses held at
/// setpoint voltage and the slack bus fixing the angle reference.
PowerFlowResult solve_power_flow(const GridModel& model, const Inputs& inputs, double tol = 1e-12,
                                 int max_iters = 30);

struct Equilibrium {
  SystemState state;
  Inputs inputs;  // tau_m and v_ref solved so every derivative vanishes
};

Equilibrium find_equilibrium(const GridModel& model);

struct ShedEvent {
  double t_shed = 10.0;
  std::size_t load_index = 0;
};

/// Instantaneous rotor-speed perturbation used to excite the modes.
struct SpeedKick {
  double t = 0.0;
  std::vector<double> d_omega;  // one entry per generator
};

struct ScenarioConfig {
  double t_end = 210.0;
  double dt = 0.01;
  double record_rate = 20.0;
  std::optional<AttackSpec> attack;
  std::optional<ShedEvent> shed;
  std::optional<SpeedKick> kick;
  double newton_tol = 1e-10;
  int newton_max_iters = 20;
  // Voltage magnitude outside [v_min, v_max] or |omega - 1| > omega_dev_max
  // ends the run; past these the network equations have no useful solution.
  double v_min = 0.05;
  double v_max = 3.0;
  double omega_dev_max = 0.5;

  void validate() const;
};

struct Event {
  std::string name;
  double t = 0.0;
  std::optional<std::size_t> load_index;
  bool operator==(const Event&) const = default;
};

/// Channels x time, sampled uniformly at the record rate.
struct Trajectory {
  std::vector<std::string> channels;
  std::vector<double> times;
  Eigen::MatrixXd samples;    // channels x times
  Eigen::VectorXd reference;  // channel values at the pre-attack equilibrium
  std::vector<Event> events;
  bool terminated_early = false;
  std::string termination_reason;
  double end_time = 0.0;  // last time the integrator reached

  std::optional<std::size_t> channel(std::string_view name) const;
  /// Samples with time >= t0 (and < t1 when given) as a new trajectory.
  Trajectory slice(double t0, std::optional<double> t1 = std::nullopt) const;
};

/// Standard recorded channel names: V, theta (referred to the slack bus) per
/// bus; omega, delta (referred) per generator; effective PL, QL per load.
std::vector<std::string> channel_names(const GridModel& model);

Eigen::VectorXd channel_values(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x,
                               const BoundAttack* attack = nullptr, double t = 0.0);

struct NewtonStats {
  long iterations = 0;
  long jacobian_evaluations = 0;
};

/// Implicit trapezoidal rule on a semi-explicit DAE whose first `n_diff`
/// rows are differential right-hand sides and remaining rows algebraic
/// constraints. Newton with a cached finite-difference iteration matrix,
/// refreshed when convergence stalls.
class TrapezoidalSolver {
 public:
  using Residual = std::function<void(const Eigen::VectorXd& y, Eigen::Ref<Eigen::VectorXd> out)>;

  TrapezoidalSolver(std::size_t n_diff, double tol, int max_iters);

  /// Solves y - x_prev - dt/2 (f_prev + f(y)) = 0 on differential rows and
  /// g(y) = 0 on algebraic rows. `y` holds the initial guess on entry.
  bool step(const Residual& next, const Eigen::VectorXd& x_prev, const Eigen::VectorXd& f_prev, double dt,
            Eigen::VectorXd& y);

  /// Newton on the algebraic rows with differential states held fixed.
  bool solve_algebraic(const Residual& residual, Eigen::VectorXd& y);

  void invalidate() { lu_valid_ = false; }
  const NewtonStats& stats() const { return stats_; }

 private:
  void refresh(const Residual& next, const Eigen::VectorXd& y, double dt);

  std::size_t n_diff_;
  double tol_;
  int max_iters_;
  double lu_dt_ = 0.0;
  bool lu_valid_ = false;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  NewtonStats stats_;
};

/// Implicit trapezoidal integrator for the semi-explicit DAE. Owns the live
/// state; events are applied between steps.
class Simulator {
 public:
  Simulator(const GridModel& model, const Equilibrium& eq, ScenarioConfig config);

  double time() const { return step_index_ * config_.dt; }
  long step_index() const { return step_index_; }
  const Eigen::VectorXd& state() const { return x_; }
  const Inputs& inputs() const { return inputs_; }
  const ScenarioConfig& config() const { return config_; }
  const std::vector<Event>& events() const { return events_; }
  const std::optional<BoundAttack>& attack() const { return attack_; }
  bool failed() const { return failed_; }
  const std::string& failure_reason() const { return failure_reason_; }
  const NewtonStats& stats() const { return solver_.stats(); }

  /// Full residual at the current inputs, attack included.
  void evaluate(const Eigen::VectorXd& x, double t, Eigen::Ref<Eigen::VectorXd> out) const;

  /// One trapezoidal step. Returns false (and marks the run failed) when
  /// Newton does not converge.
  bool step();

  /// Processes events due at the current time (attack arming, kick, shed).
  void apply_due_events();

  /// Zeroes the load's PL and QL from now on and restores algebraic
  /// consistency at fixed differential states.
  void apply_shed(std::size_t load_index);

  Eigen::VectorXd channels() const;

 private:
  bool restore_consistency();
  void fail(std::string reason);

  const GridModel* model_;
  ScenarioConfig config_;
  Eigen::VectorXd x_;
  Inputs inputs_;
  std::optional<BoundAttack> attack_;
  long step_index_ = 0;
  std::vector<Event> events_;
  bool attack_armed_ = false;
  bool kick_done_ = false;
  bool shed_done_ = false;
  bool failed_ = false;
  std::string failure_reason_;
  TrapezoidalSolver solver_;
};

/// Integrates from equilibrium through the configured events, recording the
/// standard channels. Newton failure yields a partial, flagged trajectory.
Trajectory simulate(const GridModel& model, const ScenarioConfig& scenario);
Trajectory simulate(const GridModel& model, const Equilibrium& eq, const ScenarioConfig& scenario);

}  // namespace gridshed
