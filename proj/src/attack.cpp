// SPDX-License-Identifier: Apache-2.0
#include "gridshed/attack.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gridshed/error.hpp"

namespace gridshed {

namespace {

struct VarName {
  Variable v;
  std::string_view name;
};

constexpr VarName kNames[] = {
    {Variable::omega, "omega"}, {Variable::delta, "delta"}, {Variable::V, "V"},       {Variable::theta, "theta"},
    {Variable::PL, "PL"},       {Variable::QL, "QL"},       {Variable::PG, "PG"},     {Variable::QG, "QG"},
    {Variable::eq_p, "eq_p"},   {Variable::ed_p, "ed_p"},
};

// Internal index of the node a target refers to.
std::size_t resolve(const GridModel& model, const Target& t) {
  switch (node_kind(t.var)) {
    case NodeKind::bus: {
      auto b = model.bus_index(t.node);
      if (!b) throw ModelError("attack target " + to_string(t) + ": unknown bus");
      return *b;
    }
    case NodeKind::generator:
      if (t.node < 1 || static_cast<std::size_t>(t.node) > model.generators().size())
        throw ModelError("attack target " + to_string(t) + ": unknown generator");
      return static_cast<std::size_t>(t.node - 1);
    case NodeKind::load: {
      auto b = model.bus_index(t.node);
      auto l = b ? model.load_at_bus(*b) : std::nullopt;
      if (!l) throw ModelError("attack target " + to_string(t) + ": no load on that bus");
      return *l;
    }
  }
  return 0;
}

}  // namespace

std::string_view to_string(Variable v) {
  for (const auto& n : kNames)
    if (n.v == v) return n.name;
  return "?";
}

Variable variable_from_string(std::string_view s) {
  for (const auto& n : kNames)
    if (n.name == s) return n.v;
  throw Error("unknown attack variable '" + std::string(s) + "'");
}

NodeKind node_kind(Variable v) {
  switch (v) {
    case Variable::V:
    case Variable::theta:
      return NodeKind::bus;
    case Variable::PL:
    case Variable::QL:
      return NodeKind::load;
    default:
      return NodeKind::generator;
  }
}

std::string to_string(const Target& t) {
  std::ostringstream ss;
  ss << to_string(t.var) << (node_kind(t.var) == NodeKind::generator ? "_g" : "_") << t.node;
  return ss.str();
}

std::string attack_id(const AttackSpec& a) { return to_string(a.read) + "__" + to_string(a.write); }

void to_json(nlohmann::json& j, const AttackSpec& a) {
  j = nlohmann::json{{"read", {{"node", a.read.node}, {"var", to_string(a.read.var)}}},
                     {"write", {{"node", a.write.node}, {"var", to_string(a.write.var)}}},
                     {"gain", a.gain},
                     {"t_on", a.t_on}};
}

void from_json(const nlohmann::json& j, AttackSpec& a) {
  try {
    a.read.node = j.at("read").at("node").get<int>();
    a.read.var = variable_from_string(j.at("read").at("var").get<std::string>());
    a.write.node = j.at("write").at("node").get<int>();
    a.write.var = variable_from_string(j.at("write").at("var").get<std::string>());
    a.gain = j.at("gain").get<double>();
    a.t_on = j.value("t_on", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed attack spec: ") + e.what());
  }
  if (!std::isfinite(a.gain)) throw Error("attack gain must be finite");
}

double read_variable(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x, const Target& t) {
  const auto& L = model.layout();
  const std::size_t i = resolve(model, t);
  const double ref_angle = x[L.theta(model.slack_bus())];
  switch (t.var) {
    case Variable::omega: return x[L.omega(i)];
    case Variable::delta: return x[L.delta(i)] - ref_angle;
    case Variable::V: return x[L.v(i)];
    case Variable::theta: return x[L.theta(i)] - ref_angle;
    case Variable::PL: return inputs.effective_p(i);
    case Variable::QL: return inputs.effective_q(i);
    case Variable::PG: return generator_output(model, x, i).P_g;
    case Variable::QG: return generator_output(model, x, i).Q_g;
    case Variable::eq_p: return x[L.eq_p(i)];
    case Variable::ed_p: return x[L.ed_p(i)];
  }
  return 0.0;
}

BoundAttack::BoundAttack(const GridModel& model, const AttackSpec& spec) : spec_(spec) {
  if (spec.read == spec.write) throw ModelError("attack reads and writes the same target");
  if (!std::isfinite(spec.gain)) throw ModelError("attack gain must be finite");
  read_index_ = resolve(model, spec.read);
  write_index_ = resolve(model, spec.write);
  const auto& L = model.layout();
  const std::size_t w = write_index_;
  switch (spec.write.var) {
    case Variable::omega: write_row_ = L.omega(w); break;
    case Variable::delta: write_row_ = L.delta(w); break;
    case Variable::eq_p: write_row_ = L.eq_p(w); break;
    case Variable::ed_p: write_row_ = L.ed_p(w); break;
    // Bus-level writes bias the power balance: reactive row for voltage,
    // active row for angle.
    case Variable::V: write_row_ = L.q_balance_row(w); break;
    case Variable::theta: write_row_ = L.p_balance_row(w); break;
    case Variable::PG: write_row_ = L.p_balance_row(model.generators()[w].machine.bus); break;
    case Variable::QG: write_row_ = L.q_balance_row(model.generators()[w].machine.bus); break;
    // Extra load draw enters the balance with a negative sign.
    case Variable::PL:
      write_row_ = L.p_balance_row(model.loads()[w].bus);
      write_sign_ = -1.0;
      break;
    case Variable::QL:
      write_row_ = L.q_balance_row(model.loads()[w].bus);
      write_sign_ = -1.0;
      break;
  }
}

double BoundAttack::read(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x) const {
  return read_variable(model, inputs, x, spec_.read);
}

double BoundAttack::signal(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x, double t) const {
  if (t < spec_.t_on || !reference_) return 0.0;
  return spec_.gain * (read(model, inputs, x) - *reference_);
}

void BoundAttack::inject(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x, double t,
                         Eigen::Ref<Eigen::VectorXd> residual) const {
  if (t < spec_.t_on || !reference_) return;
  const NodeKind wk = node_kind(spec_.write.var);
  // A shed load draws nothing, attacked or not.
  if (wk == NodeKind::load && inputs.shed[write_index_]) return;
  residual[write_row_] += write_sign_ * signal(model, inputs, x, t);
}

double BoundAttack::load_offset(std::size_t load, bool reactive, const GridModel& model, const Inputs& inputs,
                                const Eigen::VectorXd& x, double t) const {
  const Variable want = reactive ? Variable::QL : Variable::PL;
  if (spec_.write.var != want || write_index_ != load || inputs.shed[load]) return 0.0;
  return signal(model, inputs, x, t);
}

std::vector<Target> catalog(const GridModel& model, Variable v) {
  std::vector<Target> out;
  switch (node_kind(v)) {
    case NodeKind::bus:
      for (std::size_t b = 0; b < model.bus_count(); ++b) {
        if (v == Variable::theta && b == model.slack_bus()) continue;
        out.push_back({model.buses()[b].id, v});
      }
      break;
    case NodeKind::generator:
      for (std::size_t g = 0; g < model.generators().size(); ++g) out.push_back({static_cast<int>(g + 1), v});
      break;
    case NodeKind::load:
      for (const auto& ld : model.loads()) out.push_back({model.buses()[ld.bus].id, v});
      break;
  }
  return out;
}

std::vector<AttackSpec> enumerate_attacks(const GridModel& model, const std::vector<Variable>& read_vars,
                                          const std::vector<Variable>& write_vars, double gain) {
  if (read_vars.empty() || write_vars.empty()) throw Error("attack catalog is empty");
  std::vector<Target> reads, writes;
  for (Variable v : read_vars)
    for (const auto& t : catalog(model, v))
      if (std::find(reads.begin(), reads.end(), t) == reads.end()) reads.push_back(t);
  for (Variable v : write_vars)
    for (const auto& t : catalog(model, v))
      if (std::find(writes.begin(), writes.end(), t) == writes.end()) writes.push_back(t);
  std::vector<AttackSpec> out;
  for (const auto& r : reads)
    for (const auto& w : writes)
      if (!(r == w)) out.push_back({r, w, gain, 0.0});
  return out;
}

}  // namespace gridshed
