// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace gridshed {

// Two-axis synchronous machine. Reactances and resistance in pu on the
// system base, time constants and inertia in seconds.
struct MachineParams {
  double r_a = 0.0;
  double x_d = 1.0;
  double x_d_p = 0.3;
  double x_q = 0.7;
  double x_q_p = 0.5;
  double T_d0_p = 6.0;
  double T_q0_p = 0.5;
  double H = 5.0;
  double D = 2.0;
  double Omega_b = 2.0 * 3.14159265358979323846 * 60.0;
  double omega_s = 1.0;
  std::size_t bus = 0;  // internal bus index
  double p_set = 0.0;   // dispatch used by the power flow
};

// Rate-feedback exciter with measurement filter. The operating reference
// voltage lives in Inputs::v_ref because it is solved at initialization.
struct AvrParams {
  double K_a = 20.0;
  double T_a = 0.05;
  double K_e = 1.0;
  double T_e = 0.3;
  double K_f = 0.05;
  double T_f = 1.0;
  double A_e = 0.0006;
  double B_e = 0.9;
  double T_m_filt = 0.02;
  double v_r_min = -5.0;
  double v_r_max = 7.0;
};

enum class BranchKind { line, transformer };

struct BranchParams {
  std::size_t from_bus = 0;
  std::size_t to_bus = 0;
  double Y = 0.0;     // admittance magnitude
  double phi = 0.0;   // admittance angle (rad)
  double b_sh = 0.0;  // per-end shunt susceptance (half the line charging)
  BranchKind kind = BranchKind::line;
  double m = 1.0;     // off-nominal tap on the from side
};

struct LoadParams {
  std::size_t bus = 0;
  double PL = 0.0;
  double QL = 0.0;
};

enum class BusKind { pq, pv, slack };

struct BusParams {
  int id = 0;  // label from the case file
  BusKind kind = BusKind::pq;
  double v_set = 1.0;
  double b_shunt = 0.0;
};

struct Generator {
  MachineParams machine;
  AvrParams avr;
};

/// Offsets of every state variable inside the flat state vector.
///
/// Differential states come first (eight per generator), then the stator
/// currents (two per generator), then bus voltage magnitude and angle.
class StateLayout {
 public:
  static constexpr std::size_t kDiffPerGen = 8;
  static constexpr std::size_t kAlgPerGen = 2;

  StateLayout() = default;
  StateLayout(std::size_t generators, std::size_t buses, const std::vector<int>& bus_ids);

  std::size_t size() const { return names_.size(); }
  std::size_t differential_size() const { return kDiffPerGen * generators_; }
  std::size_t generators() const { return generators_; }
  std::size_t buses() const { return buses_; }

  std::size_t delta(std::size_t g) const { return kDiffPerGen * g + 0; }
  std::size_t omega(std::size_t g) const { return kDiffPerGen * g + 1; }
  std::size_t eq_p(std::size_t g) const { return kDiffPerGen * g + 2; }
  std::size_t ed_p(std::size_t g) const { return kDiffPerGen * g + 3; }
  std::size_t v_m(std::size_t g) const { return kDiffPerGen * g + 4; }
  std::size_t v_r1(std::size_t g) const { return kDiffPerGen * g + 5; }
  std::size_t v_r2(std::size_t g) const { return kDiffPerGen * g + 6; }
  std::size_t v_f(std::size_t g) const { return kDiffPerGen * g + 7; }
  std::size_t i_d(std::size_t g) const { return differential_size() + kAlgPerGen * g; }
  std::size_t i_q(std::size_t g) const { return differential_size() + kAlgPerGen * g + 1; }
  std::size_t v(std::size_t bus) const { return bus_base() + 2 * bus; }
  std::size_t theta(std::size_t bus) const { return bus_base() + 2 * bus + 1; }

  // Residual rows of the bus balances share the offsets of (V, theta).
  std::size_t p_balance_row(std::size_t bus) const { return v(bus); }
  std::size_t q_balance_row(std::size_t bus) const { return theta(bus); }

  const std::string& name(std::size_t offset) const { return names_.at(offset); }
  std::optional<std::size_t> offset(std::string_view name) const;

 private:
  std::size_t bus_base() const { return (kDiffPerGen + kAlgPerGen) * generators_; }

  std::size_t generators_ = 0;
  std::size_t buses_ = 0;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Static grid data. Immutable once built; construct through load_case or
/// GridModel::build, which validate topology and parameter invariants.
class GridModel {
 public:
  static GridModel build(std::vector<BusParams> buses, std::vector<Generator> generators,
                         std::vector<BranchParams> branches, std::vector<LoadParams> loads,
                         double base_mva = 100.0);

  const std::vector<BusParams>& buses() const { return buses_; }
  const std::vector<Generator>& generators() const { return generators_; }
  const std::vector<BranchParams>& branches() const { return branches_; }
  const std::vector<LoadParams>& loads() const { return loads_; }
  std::size_t slack_bus() const { return slack_bus_; }
  double base_mva() const { return base_mva_; }
  const StateLayout& layout() const { return layout_; }

  std::size_t bus_count() const { return buses_.size(); }
  std::optional<std::size_t> bus_index(int id) const;
  // Load attached to the given internal bus index, if any.
  std::optional<std::size_t> load_at_bus(std::size_t bus) const;
  // Generators attached to each bus, by internal bus index.
  const std::vector<std::vector<std::size_t>>& generators_at_bus() const { return gens_at_bus_; }
  // Branch indices incident to each bus.
  const std::vector<std::vector<std::size_t>>& branches_at_bus() const { return branches_at_bus_; }

 private:
  GridModel() = default;

  std::vector<BusParams> buses_;
  std::vector<Generator> generators_;
  std::vector<BranchParams> branches_;
  std::vector<LoadParams> loads_;
  std::size_t slack_bus_ = 0;
  double base_mva_ = 100.0;
  StateLayout layout_;
  std::vector<std::vector<std::size_t>> gens_at_bus_;
  std::vector<std::vector<std::size_t>> branches_at_bus_;
};

/// Exogenous quantities that change at run time: mechanical torque and AVR
/// reference (solved at initialization) and the load draws.
struct Inputs {
  std::vector<double> tau_m;
  std::vector<double> v_ref;
  std::vector<double> p_load;
  std::vector<double> q_load;
  std::vector<bool> shed;

  static Inputs nominal(const GridModel& model);
  double effective_p(std::size_t load) const { return shed[load] ? 0.0 : p_load[load]; }
  double effective_q(std::size_t load) const { return shed[load] ? 0.0 : q_load[load]; }
  bool operator==(const Inputs&) const = default;
};

struct SystemState {
  Eigen::VectorXd x;
};

/// Builds a model from case text. See docs/case_format.md.
GridModel load_case(std::string_view case_text);
GridModel load_case_file(const std::string& path_or_builtin);
std::string_view builtin_ieee14_case();

/// (Y, phi) for a series impedance r + jx.
std::pair<double, double> admittance_polar(double r, double x);

enum class BranchSide { sending, receiving };

struct BranchFlow {
  double P = 0.0;
  double Q = 0.0;
};

/// Power flowing from the branch into bus i. For transformers the sending
/// side is the tapped (from) end; on the receiving side (V_k, theta_k) are
/// the sending-end quantities.
BranchFlow branch_flow(double V_i, double theta_i, double V_k, double theta_k,
                       const BranchParams& branch, BranchSide side);

struct GeneratorOutput {
  double v_d, v_q, P_g, Q_g, tau_e;
};

GeneratorOutput generator_output(const GridModel& model, const Eigen::VectorXd& x, std::size_t g);

/// Clamped regulator output.
double regulator_output(double v_r1, const AvrParams& avr);

/// Differential rows carry f(x); algebraic rows carry g(x).
void residuals(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x,
               Eigen::Ref<Eigen::VectorXd> out);
Eigen::VectorXd residuals(const GridModel& model, const Inputs& inputs, const Eigen::VectorXd& x);

}  // namespace gridshed
