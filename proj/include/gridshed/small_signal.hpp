// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include <Eigen/Dense>

#include "gridshed/attack.hpp"
#include "gridshed/dae_sim.hpp"

namespace gridshed {

/// Reduced state matrix A = Fx - Fy Gy^-1 Gx of the DAE linearized at the
/// given operating point, optionally closed through an attack loop (armed at
/// the operating point, so the attack term is zero there).
Eigen::MatrixXd state_matrix(const GridModel& model, const Equilibrium& op,
                             const std::optional<AttackSpec>& attack = std::nullopt);

Eigen::VectorXcd small_signal_modes(const GridModel& model, const Equilibrium& op,
                                    const std::optional<AttackSpec>& attack = std::nullopt);

/// Linearization of the attacked system at an operating point. The attack
/// enters the Jacobian as a rank-one term linear in the gain, so the state
/// matrix for any gain is cheap once the base Jacobian is known.
class AttackLoop {
 public:
  AttackLoop(const GridModel& model, const Equilibrium& op, const Target& read, const Target& write);

  Eigen::MatrixXd state_matrix(double gain) const;
  Eigen::VectorXcd modes(double gain) const;
  double growth_rate(double gain, double zero_tol = 1e-6) const;

 private:
  Eigen::Index nd_ = 0;
  Eigen::MatrixXd J_;       // base Jacobian, no attack
  Eigen::VectorXd column_;  // d(residual)/d(gain) direction: the write row
  Eigen::VectorXd grad_;    // gradient of the read variable
};

struct CriticalGain {
  double gain = 0.0;  // signed gain at which the loop first turns unstable
  double growth_above = 0.0;  // growth rate just past the crossing
};

/// Smallest-magnitude gain (either sign) that makes the attacked system
/// small-signal unstable, searched on a log grid in [k_min, k_max] and
/// refined by bisection. Empty when no gain in range destabilizes.
std::optional<CriticalGain> critical_gain(const AttackLoop& loop, double k_min = 1e-3, double k_max = 1e3,
                                          double rel_tol = 1e-4);

/// Gain beyond `k_crit` (same sign) at which the largest growth rate reaches
/// `target`. Growth is continuous in the gain, so bisection applies once a
/// bracketing gain is found by doubling.
std::optional<double> gain_for_growth(const AttackLoop& loop, double k_crit, double target, double k_max = 1e4,
                                      double rel_tol = 1e-6);

/// Largest real part among the modes, ignoring the rotational-symmetry
/// eigenvalue at the origin (|lambda| < zero_tol).
double max_growth_rate(const Eigen::VectorXcd& modes, double zero_tol = 1e-6);

}  // namespace gridshed
