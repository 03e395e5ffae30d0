// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gridshed/grid_model.hpp"

namespace gridshed {

enum class Variable { omega, delta, V, theta, PL, QL, PG, QG, eq_p, ed_p };

std::string_view to_string(Variable v);
Variable variable_from_string(std::string_view s);

enum class NodeKind { bus, generator, load };
NodeKind node_kind(Variable v);

/// A read or write point. `node` is a bus id for V/theta, a 1-based
/// generator number for omega/delta/PG/QG/eq_p/ed_p, and the bus id of the
/// load for PL/QL.
struct Target {
  int node = 0;
  Variable var = Variable::omega;
  bool operator==(const Target&) const = default;
};

std::string to_string(const Target& t);

/// Proportional feedback u = gain * (x_read(t) - x_read(t_on-)), active for
/// t >= t_on, added to the write target.
struct AttackSpec {
  Target read;
  Target write;
  double gain = 0.0;
  double t_on = 0.0;
  bool operator==(const AttackSpec&) const = default;
};

std::string attack_id(const AttackSpec& a);

void to_json(nlohmann::json& j, const AttackSpec& a);
void from_json(const nlohmann::json& j, AttackSpec& a);

/// Attack resolved against a model: state offsets and residual rows.
class BoundAttack {
 public:
  BoundAttack(const GridModel& model, const AttackSpec& spec);

  const AttackSpec& spec() const { return spec_; }

  /// Measured value of the read target. Angles are referred to the slack bus.
  double read(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x) const;

  /// Latches x_read(t_on-) at activation.
  void arm(double reference) { reference_ = reference; }
  std::optional<double> reference() const { return reference_; }

  double signal(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x, double t) const;

  /// Adds the feedback term to the residual vector. Identity for t < t_on or
  /// before the attack has been armed.
  void inject(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x, double t,
              Eigen::Ref<Eigen::VectorXd> residual) const;

  /// Additive change of the effective load drawn at `load`, for PL/QL writes.
  double load_offset(std::size_t load, bool reactive, const GridModel& model, const Inputs& inputs,
                     const Eigen::VectorXd& x, double t) const;

 private:
  AttackSpec spec_;
  std::size_t read_index_ = 0;   // gen, bus or load index
  std::size_t write_index_ = 0;
  std::size_t write_row_ = 0;
  double write_sign_ = 1.0;
  std::optional<double> reference_;
};

/// Reads any catalog variable from a state vector. Angles are referred to the
/// slack bus angle.
double read_variable(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x, const Target& t);

/// Every node carrying the variable, as Targets. Angles exclude the slack bus,
/// whose referred angle is identically zero.
std::vector<Target> catalog(const GridModel& model, Variable v);

/// Cartesian product of read targets and write targets, excluding read ==
/// write, each with the given gain and t_on = 0.
std::vector<AttackSpec> enumerate_attacks(const GridModel& model, const std::vector<Variable>& read_vars,
                                          const std::vector<Variable>& write_vars, double gain = 1.0);

}  // namespace gridshed
