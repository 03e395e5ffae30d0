// SPDX-License-Identifier: Apache-2.0
#include "gridshed/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gridshed/error.hpp"

namespace gridshed {

StateLayout::StateLayout(std::size_t generators, std::size_t buses, const std::vector<int>& bus_ids)
    : generators_(generators), buses_(buses) {
  names_.resize((kDiffPerGen + kAlgPerGen) * generators + 2 * buses);
  static constexpr const char* kDiffNames[kDiffPerGen] = {"delta", "omega", "eq_p", "ed_p",
                                                          "v_m",   "v_r1",  "v_r2", "v_f"};
  for (std::size_t g = 0; g < generators; ++g) {
    const std::string suffix = "_g" + std::to_string(g + 1);
    for (std::size_t k = 0; k < kDiffPerGen; ++k) names_[kDiffPerGen * g + k] = kDiffNames[k] + suffix;
    names_[i_d(g)] = "i_d" + suffix;
    names_[i_q(g)] = "i_q" + suffix;
  }
  for (std::size_t b = 0; b < buses; ++b) {
    const std::string suffix = "_" + std::to_string(bus_ids.at(b));
    names_[v(b)] = "V" + suffix;
    names_[theta(b)] = "theta" + suffix;
  }
  for (std::size_t i = 0; i < names_.size(); ++i) index_.emplace(names_[i], i);
}

std::optional<std::size_t> StateLayout::offset(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

namespace {

void check_params(const Generator& gen, std::size_t g) {
  const auto& m = gen.machine;
  const auto& a = gen.avr;
  auto fail = [g](const std::string& what) {
    throw ModelError("generator " + std::to_string(g + 1) + ": " + what);
  };
  if (!(m.H > 0)) fail("H must be positive");
  if (!(m.T_d0_p > 0) || !(m.T_q0_p > 0)) fail("transient time constants must be positive");
  if (!(m.x_d_p > 0) || m.x_d < m.x_d_p) fail("require x_d >= x_d' > 0");
  if (!(m.x_q_p > 0) || m.x_q < m.x_q_p) fail("require x_q >= x_q' > 0");
  if (!(m.Omega_b > 0)) fail("Omega_b must be positive");
  if (!(a.T_a > 0) || !(a.T_e > 0) || !(a.T_f > 0) || !(a.T_m_filt > 0))
    fail("AVR time constants must be positive");
  if (!(a.v_r_min < a.v_r_max)) fail("require v_r_min < v_r_max");
}

}  // namespace

GridModel GridModel::build(std::vector<BusParams> buses, std::vector<Generator> generators,
                           std::vector<BranchParams> branches, std::vector<LoadParams> loads,
                           double base_mva) {
  if (buses.empty()) throw ModelError("model has no buses");
  GridModel m;
  const std::size_t n = buses.size();

  std::size_t slack_count = 0;
  for (std::size_t b = 0; b < n; ++b) {
    if (buses[b].kind == BusKind::slack) {
      m.slack_bus_ = b;
      ++slack_count;
    }
  }
  if (slack_count == 0) throw ModelError("no slack bus");
  if (slack_count > 1) throw ModelError("duplicate slack bus");

  for (const auto& br : branches) {
    if (br.from_bus >= n || br.to_bus >= n) throw ModelError("branch endpoint references unknown bus");
    if (br.from_bus == br.to_bus) throw ModelError("branch connects a bus to itself");
    if (!(br.Y >= 0)) throw ModelError("branch admittance must be non-negative");
    if (!(br.m > 0)) throw ModelError("tap ratio must be positive");
    if (br.kind == BranchKind::line && br.m != 1.0) throw ModelError("line with non-unit tap");
  }
  for (std::size_t g = 0; g < generators.size(); ++g) {
    if (generators[g].machine.bus >= n) throw ModelError("generator references unknown bus");
    check_params(generators[g], g);
  }
  std::vector<bool> has_load(n, false);
  for (const auto& ld : loads) {
    if (ld.bus >= n) throw ModelError("load references unknown bus");
    if (has_load[ld.bus]) throw ModelError("more than one load on bus " + std::to_string(buses[ld.bus].id));
    has_load[ld.bus] = true;
  }

  // Connectivity by union-find over branches.
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (const auto& br : branches) parent[find(br.from_bus)] = find(br.to_bus);
  for (std::size_t b = 1; b < n; ++b)
    if (find(b) != find(0)) throw ModelError("topology is disconnected at bus " + std::to_string(buses[b].id));

  m.gens_at_bus_.assign(n, {});
  for (std::size_t g = 0; g < generators.size(); ++g) m.gens_at_bus_[generators[g].machine.bus].push_back(g);
  m.branches_at_bus_.assign(n, {});
  for (std::size_t k = 0; k < branches.size(); ++k) {
    m.branches_at_bus_[branches[k].from_bus].push_back(k);
    m.branches_at_bus_[branches[k].to_bus].push_back(k);
  }

  std::vector<int> ids;
  for (const auto& b : buses) ids.push_back(b.id);
  m.layout_ = StateLayout(generators.size(), n, ids);
  m.buses_ = std::move(buses);
  m.generators_ = std::move(generators);
  m.branches_ = std::move(branches);
  m.loads_ = std::move(loads);
  m.base_mva_ = base_mva;
  return m;
}

std::optional<std::size_t> GridModel::bus_index(int id) const {
  for (std::size_t b = 0; b < buses_.size(); ++b)
    if (buses_[b].id == id) return b;
  return std::nullopt;
}

std::optional<std::size_t> GridModel::load_at_bus(std::size_t bus) const {
  for (std::size_t l = 0; l < loads_.size(); ++l)
    if (loads_[l].bus == bus) return l;
  return std::nullopt;
}

Inputs Inputs::nominal(const GridModel& model) {
  Inputs in;
  in.tau_m.assign(model.generators().size(), 0.0);
  in.v_ref.assign(model.generators().size(), 1.0);
  for (const auto& ld : model.loads()) {
    in.p_load.push_back(ld.PL);
    in.q_load.push_back(ld.QL);
  }
  in.shed.assign(model.loads().size(), false);
  return in;
}

std::pair<double, double> admittance_polar(double r, double x) {
  const double z = std::hypot(r, x);
  if (z == 0.0) throw ModelError("branch with zero impedance");
  return {1.0 / z, std::atan2(x, r)};
}

BranchFlow branch_flow(double V_i, double theta_i, double V_k, double theta_k, const BranchParams& br,
                       BranchSide side) {
  const double a = br.phi + theta_i - theta_k;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cp = std::cos(br.phi), sp = std::sin(br.phi);
  if (br.kind == BranchKind::line) {
    return {br.Y * V_i * (V_k * ca - V_i * cp), br.Y * V_i * (V_k * sa - V_i * sp) + br.b_sh * V_i * V_i};
  }
  if (side == BranchSide::sending) {
    const double vi = V_i / br.m;
    return {br.Y * vi * (V_k * ca - vi * cp), br.Y * vi * (V_k * sa - vi * sp) + br.b_sh * V_i * V_i};
  }
  const double vk = V_k / br.m;
  return {br.Y * V_i * (vk * ca - V_i * cp), br.Y * V_i * (vk * sa - V_i * sp)};
}

GeneratorOutput generator_output(const GridModel& model, const Eigen::VectorXd& x, std::size_t g) {
  const auto& L = model.layout();
  const auto& m = model.generators()[g].machine;
  const double V = x[L.v(m.bus)];
  const double angle = x[L.delta(g)] - x[L.theta(m.bus)];
  const double i_d = x[L.i_d(g)], i_q = x[L.i_q(g)];
  GeneratorOutput out;
  out.v_d = V * std::sin(angle);
  out.v_q = V * std::cos(angle);
  out.P_g = out.v_d * i_d + out.v_q * i_q;
  out.Q_g = out.v_q * i_d - out.v_d * i_q;
  out.tau_e = (m.r_a * i_q + out.v_q) * i_q + (m.r_a * i_d + out.v_d) * i_d;
  return out;
}

double regulator_output(double v_r1, const AvrParams& avr) {
  if (v_r1 < avr.v_r_min) return avr.v_r_min;
  if (v_r1 > avr.v_r_max) return avr.v_r_max;
  return v_r1;
}

void residuals(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x,
               Eigen::Ref<Eigen::VectorXd> out) {
  const auto& L = model.layout();
  if (static_cast<std::size_t>(x.size()) != L.size() || static_cast<std::size_t>(out.size()) != L.size())
    throw ModelError("state vector length does not match model");
  if (inputs.tau_m.size() != model.generators().size() || inputs.p_load.size() != model.loads().size())
    throw ModelError("inputs do not match model");

  const auto& buses = model.buses();
  for (std::size_t b = 0; b < buses.size(); ++b) {
    const double V = x[L.v(b)];
    out[L.p_balance_row(b)] = 0.0;
    out[L.q_balance_row(b)] = buses[b].b_shunt * V * V;
  }
  const auto& loads = model.loads();
  for (std::size_t l = 0; l < loads.size(); ++l) {
    out[L.p_balance_row(loads[l].bus)] -= inputs.effective_p(l);
    out[L.q_balance_row(loads[l].bus)] -= inputs.effective_q(l);
  }
  for (const auto& br : model.branches()) {
    const std::size_t i = br.from_bus, k = br.to_bus;
    const double Vi = x[L.v(i)], ti = x[L.theta(i)];
    const double Vk = x[L.v(k)], tk = x[L.theta(k)];
    const BranchFlow fi = branch_flow(Vi, ti, Vk, tk, br, BranchSide::sending);
    const BranchFlow fk = branch_flow(Vk, tk, Vi, ti, br, BranchSide::receiving);
    out[L.p_balance_row(i)] += fi.P;
    out[L.q_balance_row(i)] += fi.Q;
    out[L.p_balance_row(k)] += fk.P;
    out[L.q_balance_row(k)] += fk.Q;
  }

  const auto& gens = model.generators();
  for (std::size_t g = 0; g < gens.size(); ++g) {
    const auto& m = gens[g].machine;
    const auto& a = gens[g].avr;
    const GeneratorOutput o = generator_output(model, x, g);
    out[L.p_balance_row(m.bus)] += o.P_g;
    out[L.q_balance_row(m.bus)] += o.Q_g;

    const double omega = x[L.omega(g)];
    const double eq = x[L.eq_p(g)], ed = x[L.ed_p(g)];
    const double i_d = x[L.i_d(g)], i_q = x[L.i_q(g)];
    const double vm = x[L.v_m(g)], vr1 = x[L.v_r1(g)], vr2 = x[L.v_r2(g)], vf = x[L.v_f(g)];
    const double V = x[L.v(m.bus)];

    out[L.delta(g)] = m.Omega_b * (omega - m.omega_s);
    out[L.omega(g)] = (inputs.tau_m[g] - o.tau_e - m.D * (omega - m.omega_s)) / (2.0 * m.H);
    out[L.eq_p(g)] = (-eq - (m.x_d - m.x_d_p) * i_d + vf) / m.T_d0_p;
    out[L.ed_p(g)] = (-ed + (m.x_q - m.x_q_p) * i_q) / m.T_q0_p;
    out[L.v_m(g)] = (V - vm) / a.T_m_filt;
    const double rate = a.K_f / a.T_f * vf;
    out[L.v_r1(g)] = (a.K_a * (inputs.v_ref[g] - vm - vr2 - rate) - vr1) / a.T_a;
    out[L.v_r2(g)] = -(rate + vr2) / a.T_f;
    const double vr = regulator_output(vr1, a);
    out[L.v_f(g)] = -(vf * (a.K_e + a.A_e * std::exp(a.B_e * std::abs(vf))) - vr) / a.T_e;

    out[L.i_d(g)] = o.v_q + m.r_a * i_q - eq + m.x_d_p * i_d;
    out[L.i_q(g)] = o.v_d + m.r_a * i_d - ed - m.x_q_p * i_q;
  }
}

Eigen::VectorXd residuals(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x) {
  Eigen::VectorXd out(x.size());
  residuals(model, inputs, x, out);
  return out;
}

}  // namespace gridshed
