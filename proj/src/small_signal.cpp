// SPDX-License-Identifier: Apache-2.0
#include "gridshed/small_signal.hpp"

#include <cmath>
#include <limits>

namespace gridshed {

Eigen::MatrixXd state_matrix(const GridModel& model, const Equilibrium& op,
                             const std::optional<AttackSpec>& attack) {
  const auto& L = model.layout();
  const Eigen::Index n = static_cast<Eigen::Index>(L.size());
  const Eigen::Index nd = static_cast<Eigen::Index>(L.differential_size());
  const Eigen::Index na = n - nd;

  std::optional<BoundAttack> bound;
  if (attack) {
    bound.emplace(model, *attack);
    bound->arm(bound->read(model, op.inputs, op.state.x));
  }
  const double t = attack ? attack->t_on : 0.0;
  auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd& out) {
    residuals(model, op.inputs, x, out);
    if (bound) bound->inject(model, op.inputs, x, t, out);
  };

  const Eigen::VectorXd& x0 = op.state.x;
  Eigen::MatrixXd J(n, n);
  Eigen::VectorXd fp(n), fm(n);
  Eigen::VectorXd x = x0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(x0[j]));
    x[j] = x0[j] + h;
    eval(x, fp);
    x[j] = x0[j] - h;
    eval(x, fm);
    x[j] = x0[j];
    J.col(j) = (fp - fm) / (2.0 * h);
  }
  const Eigen::MatrixXd Fx = J.topLeftCorner(nd, nd);
  const Eigen::MatrixXd Fy = J.topRightCorner(nd, na);
  const Eigen::MatrixXd Gx = J.bottomLeftCorner(na, nd);
  const Eigen::MatrixXd Gy = J.bottomRightCorner(na, na);
  return Fx - Fy * Gy.partialPivLu().solve(Gx);
}

Eigen::VectorXcd small_signal_modes(const GridModel& model, const Equilibrium& op,
                                    const std::optional<AttackSpec>& attack) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(state_matrix(model, op, attack), false);
  return es.eigenvalues();
}

namespace {

Eigen::MatrixXd reduce(const Eigen::MatrixXd& J, Eigen::Index nd) {
  const Eigen::Index na = J.rows() - nd;
  const Eigen::MatrixXd Fx = J.topLeftCorner(nd, nd);
  const Eigen::MatrixXd Fy = J.topRightCorner(nd, na);
  const Eigen::MatrixXd Gx = J.bottomLeftCorner(na, nd);
  const Eigen::MatrixXd Gy = J.bottomRightCorner(na, na);
  return Fx - Fy * Gy.partialPivLu().solve(Gx);
}

}  // namespace

AttackLoop::AttackLoop(const GridModel& model, const Equilibrium& op, const Target& read, const Target& write) {
  const auto& L = model.layout();
  const Eigen::Index n = static_cast<Eigen::Index>(L.size());
  nd_ = static_cast<Eigen::Index>(L.differential_size());

  // Unit-gain attack armed at the operating point: its residual contribution
  // is (read(x) - read(x0)) on the write row, times a sign.
  const AttackSpec unit{read, write, 1.0, 0.0};
  BoundAttack bound(model, unit);
  const Eigen::VectorXd& x0 = op.state.x;
  bound.arm(bound.read(model, op.inputs, x0));

  J_.resize(n, n);
  grad_.resize(n);
  Eigen::VectorXd fp(n), fm(n), x = x0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(x0[j]));
    x[j] = x0[j] + h;
    residuals(model, op.inputs, x, fp);
    const double rp = bound.read(model, op.inputs, x);
    x[j] = x0[j] - h;
    residuals(model, op.inputs, x, fm);
    const double rm = bound.read(model, op.inputs, x);
    x[j] = x0[j];
    J_.col(j) = (fp - fm) / (2.0 * h);
    grad_[j] = (rp - rm) / (2.0 * h);
  }
  // Probe the write row and sign with a unit read deviation.
  column_ = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd base = Eigen::VectorXd::Zero(n), shifted = Eigen::VectorXd::Zero(n);
  bound.inject(model, op.inputs, x0, 0.0, base);
  bound.arm(bound.read(model, op.inputs, x0) - 1.0);
  bound.inject(model, op.inputs, x0, 0.0, shifted);
  column_ = shifted - base;
}

Eigen::MatrixXd AttackLoop::state_matrix(double gain) const {
  Eigen::MatrixXd J = J_;
  J.noalias() += gain * column_ * grad_.transpose();
  return reduce(J, nd_);
}

Eigen::VectorXcd AttackLoop::modes(double gain) const {
  return Eigen::EigenSolver<Eigen::MatrixXd>(state_matrix(gain), false).eigenvalues();
}

double AttackLoop::growth_rate(double gain, double zero_tol) const { return max_growth_rate(modes(gain), zero_tol); }

std::optional<CriticalGain> critical_gain(const AttackLoop& loop, double k_min, double k_max, double rel_tol) {
  const int per_decade = 8;
  const int steps = static_cast<int>(std::ceil(std::log10(k_max / k_min) * per_decade));
  std::optional<CriticalGain> best;
  for (double sign : {1.0, -1.0}) {
    double prev = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double k = k_min * std::pow(10.0, static_cast<double>(i) / per_decade);
      if (best && k >= std::abs(best->gain)) break;
      if (loop.growth_rate(sign * k) > 0) {
        double lo = prev, hi = k;
        while (hi - lo > rel_tol * hi) {
          const double mid = 0.5 * (lo + hi);
          (loop.growth_rate(sign * mid) > 0 ? hi : lo) = mid;
        }
        best = CriticalGain{sign * hi, loop.growth_rate(sign * hi)};
        break;
      }
      prev = k;
    }
  }
  return best;
}

std::optional<double> gain_for_growth(const AttackLoop& loop, double k_crit, double target, double k_max,
                                      double rel_tol) {
  double lo = k_crit, hi = k_crit;
  while (loop.growth_rate(hi) < target) {
    lo = hi;
    hi *= 2.0;
    if (std::abs(hi) > k_max) return std::nullopt;
  }
  while (std::abs(hi - lo) > rel_tol * std::abs(hi)) {
    const double mid = 0.5 * (lo + hi);
    (loop.growth_rate(mid) < target ? lo : hi) = mid;
  }
  return hi;
}

double max_growth_rate(const Eigen::VectorXcd& modes, double zero_tol) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& l : modes)
    if (std::abs(l) >= zero_tol) best = std::max(best, l.real());
  return best;
}

}  // namespace gridshed
