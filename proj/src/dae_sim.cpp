// SPDX-License-Identifier: Apache-2.0
#include "gridshed/dae_sim.hpp"

#include <cmath>
#include <complex>

#include "gridshed/error.hpp"

namespace gridshed {

namespace {

using cplx = std::complex<double>;

constexpr double kFdRelStep = 1e-7;

double fd_step(double v) { return kFdRelStep * std::max(1.0, std::abs(v)); }

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

// ---------------------------------------------------------------------------
// Power flow

PowerFlowResult solve_power_flow(const GridModel& model, const Inputs& inputs, double tol, int max_iters) {
  const std::size_t n = model.bus_count();
  const auto& buses = model.buses();

  std::vector<double> p_spec(n, 0.0), q_spec(n, 0.0);
  for (const auto& gen : model.generators()) p_spec[gen.machine.bus] += gen.machine.p_set;
  for (std::size_t l = 0; l < model.loads().size(); ++l) {
    p_spec[model.loads()[l].bus] -= inputs.effective_p(l);
    q_spec[model.loads()[l].bus] -= inputs.effective_q(l);
  }

  // Unknowns: theta at every non-slack bus, V at every PQ bus.
  std::vector<std::size_t> theta_idx, v_idx;
  for (std::size_t b = 0; b < n; ++b) {
    if (buses[b].kind != BusKind::slack) theta_idx.push_back(b);
    if (buses[b].kind == BusKind::pq) v_idx.push_back(b);
  }
  const std::size_t nu = theta_idx.size() + v_idx.size();

  Eigen::VectorXd V(n), theta = Eigen::VectorXd::Zero(n);
  for (std::size_t b = 0; b < n; ++b) V[b] = buses[b].kind == BusKind::pq ? 1.0 : buses[b].v_set;

  auto unpack = [&](const Eigen::VectorXd& u) {
    for (std::size_t k = 0; k < theta_idx.size(); ++k) theta[theta_idx[k]] = u[k];
    for (std::size_t k = 0; k < v_idx.size(); ++k) V[v_idx[k]] = u[theta_idx.size() + k];
  };
  auto mismatch = [&](const Eigen::VectorXd& u) {
    unpack(u);
    Eigen::VectorXd P = Eigen::Map<const Eigen::VectorXd>(p_spec.data(), n);
    Eigen::VectorXd Q = Eigen::Map<const Eigen::VectorXd>(q_spec.data(), n);
    for (std::size_t b = 0; b < n; ++b) Q[b] += buses[b].b_shunt * V[b] * V[b];
    for (const auto& br : model.branches()) {
      const std::size_t i = br.from_bus, k = br.to_bus;
      const BranchFlow fi = branch_flow(V[i], theta[i], V[k], theta[k], br, BranchSide::sending);
      const BranchFlow fk = branch_flow(V[k], theta[k], V[i], theta[i], br, BranchSide::receiving);
      P[i] += fi.P;
      Q[i] += fi.Q;
      P[k] += fk.P;
      Q[k] += fk.Q;
    }
    Eigen::VectorXd r(nu);
    for (std::size_t k = 0; k < theta_idx.size(); ++k) r[k] = P[theta_idx[k]];
    for (std::size_t k = 0; k < v_idx.size(); ++k) r[theta_idx.size() + k] = Q[v_idx[k]];
    return r;
  };

  Eigen::VectorXd u(nu);
  for (std::size_t k = 0; k < theta_idx.size(); ++k) u[k] = 0.0;
  for (std::size_t k = 0; k < v_idx.size(); ++k) u[theta_idx.size() + k] = 1.0;

  Eigen::MatrixXd J(nu, nu);
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::VectorXd r = mismatch(u);
    if (!all_finite(r)) break;
    if (r.cwiseAbs().maxCoeff() < tol) {
      unpack(u);
      return {V, theta, it};
    }
    for (std::size_t j = 0; j < nu; ++j) {
      Eigen::VectorXd up = u;
      const double h = fd_step(u[j]);
      up[j] += h;
      J.col(j) = (mismatch(up) - r) / h;
    }
    u -= J.partialPivLu().solve(r);
  }
  throw ConvergenceError("power flow did not converge");
}

// ---------------------------------------------------------------------------
// Initialization

Equilibrium find_equilibrium(const GridModel& model) {
  Inputs inputs = Inputs::nominal(model);
  const PowerFlowResult pf = solve_power_flow(model, inputs);
  const auto& L = model.layout();
  const std::size_t n = model.bus_count();

  Eigen::VectorXd x = Eigen::VectorXd::Zero(L.size());
  for (std::size_t b = 0; b < n; ++b) {
    x[L.v(b)] = pf.V[b];
    x[L.theta(b)] = pf.theta[b];
  }

  // Generation each bus must supply to close its balance.
  std::vector<double> p_need(n, 0.0), q_need(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) q_need[b] = -model.buses()[b].b_shunt * pf.V[b] * pf.V[b];
  for (std::size_t l = 0; l < model.loads().size(); ++l) {
    p_need[model.loads()[l].bus] += inputs.effective_p(l);
    q_need[model.loads()[l].bus] += inputs.effective_q(l);
  }
  for (const auto& br : model.branches()) {
    const std::size_t i = br.from_bus, k = br.to_bus;
    const BranchFlow fi = branch_flow(pf.V[i], pf.theta[i], pf.V[k], pf.theta[k], br, BranchSide::sending);
    const BranchFlow fk = branch_flow(pf.V[k], pf.theta[k], pf.V[i], pf.theta[i], br, BranchSide::receiving);
    p_need[i] -= fi.P;
    q_need[i] -= fi.Q;
    p_need[k] -= fk.P;
    q_need[k] -= fk.Q;
  }

  const auto& gens = model.generators();
  for (std::size_t g = 0; g < gens.size(); ++g) {
    const auto& m = gens[g].machine;
    const auto& a = gens[g].avr;
    const auto& here = model.generators_at_bus()[m.bus];
    const double share = 1.0 / static_cast<double>(here.size());
    const double P = m.bus == model.slack_bus() ? p_need[m.bus] * share : m.p_set;
    const double Q = q_need[m.bus] * share;

    const cplx Vb = std::polar(pf.V[m.bus], pf.theta[m.bus]);
    const cplx I = std::conj(cplx(P, Q) / Vb);
    const cplx E = Vb + cplx(m.r_a, m.x_q) * I;
    const double delta = std::arg(E);
    const cplx rot = std::polar(1.0, -(delta - M_PI / 2.0));
    const cplx Idq = I * rot;
    const cplx Vdq = Vb * rot;
    const double i_d = Idq.real(), i_q = Idq.imag();
    const double v_q = Vdq.imag();

    const double ed = (m.x_q - m.x_q_p) * i_q;
    const double eq = v_q + m.r_a * i_q + m.x_d_p * i_d;
    const double vf = eq + (m.x_d - m.x_d_p) * i_d;
    const double vr1 = vf * (a.K_e + a.A_e * std::exp(a.B_e * std::abs(vf)));
    if (vr1 <= a.v_r_min || vr1 >= a.v_r_max)
      throw ModelError("infeasible setpoints: generator " + std::to_string(g + 1) +
                       " needs regulator output outside its limits");

    x[L.delta(g)] = delta;
    x[L.omega(g)] = m.omega_s;
    x[L.eq_p(g)] = eq;
    x[L.ed_p(g)] = ed;
    x[L.v_m(g)] = pf.V[m.bus];
    x[L.v_r1(g)] = vr1;
    x[L.v_r2(g)] = -a.K_f / a.T_f * vf;
    x[L.v_f(g)] = vf;
    x[L.i_d(g)] = i_d;
    x[L.i_q(g)] = i_q;

    inputs.v_ref[g] = pf.V[m.bus] + vr1 / a.K_a;
    inputs.tau_m[g] = P + m.r_a * (i_d * i_d + i_q * i_q);
  }
  return {SystemState{x}, inputs};
}

// ---------------------------------------------------------------------------
// Trapezoidal core

TrapezoidalSolver::TrapezoidalSolver(std::size_t n_diff, double tol, int max_iters)
    : n_diff_(n_diff), tol_(tol), max_iters_(max_iters) {}

void TrapezoidalSolver::refresh(const Residual& next, const Eigen::VectorXd& y, double dt) {
  const Eigen::Index n = y.size();
  Eigen::VectorXd f0(n), f1(n);
  next(y, f0);
  Eigen::MatrixXd M(n, n);
  Eigen::VectorXd yp = y;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = fd_step(y[j]);
    yp[j] = y[j] + h;
    next(yp, f1);
    yp[j] = y[j];
    M.col(j) = (f1 - f0) / h;
  }
  const Eigen::Index nd = static_cast<Eigen::Index>(n_diff_);
  M.topRows(nd) *= -0.5 * dt;
  M.topLeftCorner(nd, nd).diagonal().array() += 1.0;
  lu_.compute(M);
  lu_dt_ = dt;
  lu_valid_ = true;
  ++stats_.jacobian_evaluations;
}

bool TrapezoidalSolver::step(const Residual& next, const Eigen::VectorXd& x_prev, const Eigen::VectorXd& f_prev,
                             double dt, Eigen::VectorXd& y) {
  const Eigen::Index n = y.size();
  const Eigen::Index nd = static_cast<Eigen::Index>(n_diff_);
  Eigen::VectorXd F(n), R(n);
  bool fresh = false;
  if (!lu_valid_ || lu_dt_ != dt) {
    refresh(next, y, dt);
    fresh = true;
  }
  double prev_norm = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iters_; ++it) {
    next(y, F);
    R.head(nd) = y.head(nd) - x_prev.head(nd) - 0.5 * dt * (f_prev.head(nd) + F.head(nd));
    R.tail(n - nd) = F.tail(n - nd);
    if (!R.allFinite()) return false;
    const Eigen::VectorXd delta = lu_.solve(R);
    y -= delta;
    ++stats_.iterations;
    if (!y.allFinite()) return false;
    const double norm = delta.cwiseAbs().maxCoeff();
    if (norm < tol_) return true;
    if (norm > 0.25 * prev_norm && !fresh) {
      refresh(next, y, dt);
      fresh = true;
    }
    prev_norm = norm;
  }
  return false;
}

bool TrapezoidalSolver::solve_algebraic(const Residual& residual, Eigen::VectorXd& y) {
  const Eigen::Index n = y.size();
  const Eigen::Index nd = static_cast<Eigen::Index>(n_diff_);
  const Eigen::Index na = n - nd;
  Eigen::VectorXd F(n), F1(n);
  Eigen::MatrixXd J(na, na);
  lu_valid_ = false;
  for (int it = 0; it < max_iters_; ++it) {
    residual(y, F);
    const Eigen::VectorXd g = F.tail(na);
    if (!g.allFinite()) return false;
    if (it > 0 && g.cwiseAbs().maxCoeff() < tol_) return true;
    Eigen::VectorXd yp = y;
    for (Eigen::Index j = 0; j < na; ++j) {
      const double h = fd_step(y[nd + j]);
      yp[nd + j] = y[nd + j] + h;
      residual(yp, F1);
      yp[nd + j] = y[nd + j];
      J.col(j) = (F1.tail(na) - g) / h;
    }
    const Eigen::VectorXd delta = J.partialPivLu().solve(g);
    y.tail(na) -= delta;
    if (!y.allFinite()) return false;
    if (delta.cwiseAbs().maxCoeff() < tol_) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Channels and trajectories

std::vector<std::string> channel_names(const GridModel& model) {
  std::vector<std::string> names;
  for (const auto& b : model.buses()) names.push_back("V_" + std::to_string(b.id));
  for (const auto& b : model.buses()) names.push_back("theta_" + std::to_string(b.id));
  for (std::size_t g = 0; g < model.generators().size(); ++g) names.push_back("omega_g" + std::to_string(g + 1));
  for (std::size_t g = 0; g < model.generators().size(); ++g) names.push_back("delta_g" + std::to_string(g + 1));
  for (const auto& ld : model.loads()) names.push_back("PL_" + std::to_string(model.buses()[ld.bus].id));
  for (const auto& ld : model.loads()) names.push_back("QL_" + std::to_string(model.buses()[ld.bus].id));
  return names;
}

Eigen::VectorXd channel_values(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x,
                               const BoundAttack* attack, double t) {
  const auto& L = model.layout();
  const std::size_t n = model.bus_count(), ng = model.generators().size(), nl = model.loads().size();
  Eigen::VectorXd c(2 * n + 2 * ng + 2 * nl);
  const double ref = x[L.theta(model.slack_bus())];
  std::size_t k = 0;
  for (std::size_t b = 0; b < n; ++b) c[k++] = x[L.v(b)];
  for (std::size_t b = 0; b < n; ++b) c[k++] = x[L.theta(b)] - ref;
  for (std::size_t g = 0; g < ng; ++g) c[k++] = x[L.omega(g)];
  for (std::size_t g = 0; g < ng; ++g) c[k++] = x[L.delta(g)] - ref;
  for (std::size_t l = 0; l < nl; ++l)
    c[k++] = inputs.effective_p(l) + (attack ? attack->load_offset(l, false, model, inputs, x, t) : 0.0);
  for (std::size_t l = 0; l < nl; ++l)
    c[k++] = inputs.effective_q(l) + (attack ? attack->load_offset(l, true, model, inputs, x, t) : 0.0);
  return c;
}

std::optional<std::size_t> Trajectory::channel(std::string_view name) const {
  for (std::size_t i = 0; i < channels.size(); ++i)
    if (channels[i] == name) return i;
  return std::nullopt;
}

Trajectory Trajectory::slice(double t0, std::optional<double> t1) const {
  // Half a sample of slack keeps grid-aligned boundaries exact.
  const double eps = times.size() > 1 ? 0.5 * (times[1] - times[0]) * 1e-6 : 1e-12;
  std::size_t first = 0, last = 0;
  while (first < times.size() && times[first] < t0 - eps) ++first;
  last = first;
  while (last < times.size() && (!t1 || times[last] < *t1 - eps)) ++last;
  Trajectory out;
  out.channels = channels;
  out.times.assign(times.begin() + static_cast<long>(first), times.begin() + static_cast<long>(last));
  out.samples = samples.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(last - first));
  out.reference = reference;
  for (const auto& e : events)
    if (e.t >= t0 - eps && (!t1 || e.t < *t1 - eps)) out.events.push_back(e);
  out.terminated_early = terminated_early;
  out.termination_reason = termination_reason;
  out.end_time = end_time;
  return out;
}

// ---------------------------------------------------------------------------
// Simulator

void ScenarioConfig::validate() const {
  if (!(dt > 0)) throw Error("dt must be positive");
  if (!(record_rate > 0)) throw Error("record_rate must be positive");
  if (dt > 1.0 / record_rate + 1e-12) throw Error("dt must not exceed the recording interval");
  const double ratio = 1.0 / (record_rate * dt);
  if (std::abs(ratio - std::round(ratio)) > 1e-9) throw Error("recording interval must be a multiple of dt");
  if (!(t_end > 0)) throw Error("t_end must be positive");
  if (shed && !(shed->t_shed < t_end)) throw Error("shed time must precede t_end");
  if (newton_max_iters < 1 || !(newton_tol > 0)) throw Error("invalid Newton settings");
}

Simulator::Simulator(const GridModel& model, const Equilibrium& eq, ScenarioConfig config)
    : model_(&model),
      config_(std::move(config)),
      x_(eq.state.x),
      inputs_(eq.inputs),
      solver_(model.layout().differential_size(), config_.newton_tol, config_.newton_max_iters) {
  config_.validate();
  if (config_.attack) attack_.emplace(model, *config_.attack);
  if (config_.shed && config_.shed->load_index >= model.loads().size()) throw Error("unknown load index");
  if (config_.kick && config_.kick->d_omega.size() != model.generators().size())
    throw Error("speed kick needs one entry per generator");
}

void Simulator::evaluate(const Eigen::VectorXd& x, double t, Eigen::Ref<Eigen::VectorXd> out) const {
  residuals(*model_, inputs_, x, out);
  if (attack_) attack_->inject(*model_, inputs_, x, t, out);
}

void Simulator::fail(std::string reason) {
  failed_ = true;
  failure_reason_ = std::move(reason);
}

bool Simulator::restore_consistency() {
  const double t = time();
  solver_.invalidate();
  const bool ok = solver_.solve_algebraic(
      [this, t](const Eigen::VectorXd& y, Eigen::Ref<Eigen::VectorXd> out) { evaluate(y, t, out); }, x_);
  if (!ok) fail("algebraic re-solve failed at t=" + std::to_string(t));
  return ok;
}

void Simulator::apply_due_events() {
  if (failed_) return;
  const double t = time();
  const double half = 0.5 * config_.dt;
  if (attack_ && !attack_armed_ && t >= attack_->spec().t_on - half) {
    attack_->arm(attack_->read(*model_, inputs_, x_));
    attack_armed_ = true;
    events_.push_back({"attack_on", t, std::nullopt});
  }
  if (config_.kick && !kick_done_ && t >= config_.kick->t - half) {
    const auto& L = model_->layout();
    for (std::size_t g = 0; g < config_.kick->d_omega.size(); ++g) x_[L.omega(g)] += config_.kick->d_omega[g];
    kick_done_ = true;
    events_.push_back({"kick", t, std::nullopt});
    if (!restore_consistency()) return;
  }
  if (config_.shed && !shed_done_ && t >= config_.shed->t_shed - half) {
    shed_done_ = true;
    apply_shed(config_.shed->load_index);
  }
}

void Simulator::apply_shed(std::size_t load_index) {
  if (load_index >= inputs_.shed.size()) throw Error("unknown load index " + std::to_string(load_index));
  inputs_.shed[load_index] = true;
  events_.push_back({"shed", time(), load_index});
  restore_consistency();
}

bool Simulator::step() {
  if (failed_) return false;
  const double t = time();
  const Eigen::Index n = x_.size();
  Eigen::VectorXd f_prev(n);
  evaluate(x_, t, f_prev);
  Eigen::VectorXd y = x_;
  const std::size_t nd = model_->layout().differential_size();
  y.head(static_cast<Eigen::Index>(nd)) += config_.dt * f_prev.head(static_cast<Eigen::Index>(nd));
  const double t_next = (step_index_ + 1) * config_.dt;
  const bool ok = solver_.step(
      [this, t_next](const Eigen::VectorXd& v, Eigen::Ref<Eigen::VectorXd> out) { evaluate(v, t_next, out); }, x_,
      f_prev, config_.dt, y);
  if (!ok) {
    fail("newton: no convergence at t=" + std::to_string(t_next));
    return false;
  }
  x_ = y;
  ++step_index_;

  const auto& L = model_->layout();
  for (std::size_t b = 0; b < model_->bus_count(); ++b) {
    const double V = x_[L.v(b)];
    if (V < config_.v_min || V > config_.v_max) {
      fail("voltage out of range at bus " + std::to_string(model_->buses()[b].id) + ", t=" + std::to_string(time()));
      return false;
    }
  }
  for (std::size_t g = 0; g < model_->generators().size(); ++g) {
    if (std::abs(x_[L.omega(g)] - 1.0) > config_.omega_dev_max) {
      fail("speed out of range at generator " + std::to_string(g + 1) + ", t=" + std::to_string(time()));
      return false;
    }
  }
  return true;
}

Eigen::VectorXd Simulator::channels() const {
  return channel_values(*model_, inputs_, x_, attack_ ? &*attack_ : nullptr, time());
}

Trajectory simulate(const GridModel& model, const ScenarioConfig& scenario) {
  return simulate(model, find_equilibrium(model), scenario);
}

Trajectory simulate(const GridModel& model, const Equilibrium& eq, const ScenarioConfig& scenario) {
  Simulator sim(model, eq, scenario);
  const auto& cfg = sim.config();
  const long per_record = std::lround(1.0 / (cfg.record_rate * cfg.dt));
  const long total = std::lround(cfg.t_end / cfg.dt);

  Trajectory tr;
  tr.channels = channel_names(model);
  tr.reference = channel_values(model, eq.inputs, eq.state.x);
  std::vector<Eigen::VectorXd> cols;
  cols.reserve(static_cast<std::size_t>(total / per_record + 1));

  for (long n = 0;; ++n) {
    sim.apply_due_events();
    if (sim.failed()) break;
    if (n % per_record == 0) {
      cols.push_back(sim.channels());
      tr.times.push_back(static_cast<double>(n / per_record) / cfg.record_rate);
    }
    if (n == total) break;
    if (!sim.step()) break;
  }
  tr.samples.resize(static_cast<Eigen::Index>(tr.channels.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) tr.samples.col(static_cast<Eigen::Index>(j)) = cols[j];
  tr.events = sim.events();
  tr.terminated_early = sim.failed();
  tr.termination_reason = sim.failure_reason();
  tr.end_time = sim.time();
  return tr;
}

}  // namespace gridshed
