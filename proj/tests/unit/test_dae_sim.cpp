// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "../common/fixtures.hpp"
#include "../common/oracles.hpp"
#include "gridshed/error.hpp"

using namespace gridshed;

namespace {

Eigen::VectorXd referred_angles(const GridModel& m, const Eigen::VectorXd& x) {
  const auto& L = m.layout();
  Eigen::VectorXd th(static_cast<Eigen::Index>(m.bus_count()));
  for (std::size_t b = 0; b < m.bus_count(); ++b)
    th[static_cast<Eigen::Index>(b)] = x[L.theta(b)] - x[L.theta(m.slack_bus())];
  return th;
}

Eigen::VectorXd bus_voltages(const GridModel& m, const Eigen::VectorXd& x) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(m.bus_count()));
  for (std::size_t b = 0; b < m.bus_count(); ++b) v[static_cast<Eigen::Index>(b)] = x[m.layout().v(b)];
  return v;
}

// Post-disturbance steady state with a common speed. Without governors the
// angles keep drifting, so the angle rows become speed-equality constraints
// plus one gauge row fixing the slack angle at zero. Solved by Newton with a
// central-difference Jacobian.
Eigen::VectorXd drifting_steady_state(const GridModel& m, const Inputs& in, Eigen::VectorXd x) {
  const auto& L = m.layout();
  const std::size_t ng = m.generators().size();
  auto F = [&](const Eigen::VectorXd& y) {
    Eigen::VectorXd r = residuals(m, in, y);
    for (std::size_t g = 0; g < ng; ++g)
      r[L.delta(g)] = g == 0 ? y[L.theta(m.slack_bus())] : y[L.omega(g)] - y[L.omega(0)];
    return r;
  };
  const double shift = x[L.theta(m.slack_bus())];
  for (std::size_t g = 0; g < ng; ++g) x[L.delta(g)] -= shift;
  for (std::size_t b = 0; b < m.bus_count(); ++b) x[L.theta(b)] -= shift;
  for (int it = 0; it < 30; ++it) {
    const Eigen::VectorXd r = F(x);
    if (r.cwiseAbs().maxCoeff() < 1e-12) break;
    Eigen::MatrixXd J(x.size(), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double h = 1e-7;
      Eigen::VectorXd a = x, b = x;
      a[j] += h;
      b[j] -= h;
      J.col(j) = (F(a) - F(b)) / (2 * h);
    }
    x -= J.fullPivLu().solve(r);
  }
  REQUIRE(F(x).cwiseAbs().maxCoeff() < 1e-10);
  return x;
}

}  // namespace

TEST_CASE("equilibrium matches the independent power flow") {
  const auto& m = fixtures::ieee14();
  const auto& eq = fixtures::ieee14_eq();
  const auto pf = oracle::newton_power_flow(m);
  REQUIRE(pf.converged);
  CHECK((bus_voltages(m, eq.state.x) - pf.V).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((referred_angles(m, eq.state.x) - pf.theta).cwiseAbs().maxCoeff() < 1e-6);

  const auto lib = solve_power_flow(m, eq.inputs);
  CHECK((lib.V - pf.V).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("power flow reproduces the published voltage profile") {
  const auto& m = fixtures::ieee14();
  const auto pf = oracle::newton_power_flow(m);
  const auto& pub = oracle::published_ieee14_voltages();
  for (std::size_t b = 0; b < pub.size(); ++b) CHECK(std::abs(pf.V[static_cast<Eigen::Index>(b)] - pub[b]) < 2e-3);
}

TEST_CASE("unloaded network sits at a flat profile") {
  const GridModel m = load_case(fixtures::two_bus_case(0.0, 0.0, 0.01, 0.1, 0.0));
  const Equilibrium eq = find_equilibrium(m);
  const auto& L = m.layout();
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(eq.state.x[L.v(b)] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(eq.state.x[L.theta(b)] - eq.state.x[L.theta(0)]) < 1e-10);
  }
  CHECK(std::abs(eq.state.x[L.i_d(0)]) < 1e-10);
  CHECK(std::abs(eq.state.x[L.i_q(0)]) < 1e-10);
  CHECK(eq.inputs.tau_m[0] == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
}

TEST_CASE("equilibrium is a fixed point of one step") {
  const auto& m = fixtures::ieee14();
  const auto& eq = fixtures::ieee14_eq();
  ScenarioConfig sc;
  Simulator sim(m, eq, sc);
  REQUIRE(sim.step());
  CHECK((sim.state() - eq.state.x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("trapezoidal rule on linear decay") {
  // y' = -y with an algebraic companion z = y^2.
  TrapezoidalSolver solver(1, 1e-13, 20);
  auto res = [](const Eigen::VectorXd& v, Eigen::Ref<Eigen::VectorXd> out) {
    out[0] = -v[0];
    out[1] = v[1] - v[0] * v[0];
  };
  const double dt = 0.1;
  Eigen::VectorXd x(2);
  x << 1.0, 1.0;
  double expect = 1.0;
  for (int n = 0; n < 50; ++n) {
    Eigen::VectorXd f(2);
    res(x, f);
    Eigen::VectorXd y = x;
    REQUIRE(solver.step(res, x, f, dt, y));
    x = y;
    expect *= (1 - dt / 2) / (1 + dt / 2);
    CHECK(x[0] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(x[1] == doctest::Approx(expect * expect).epsilon(1e-10));
  }
}

TEST_CASE("second-order convergence under step halving") {
  const auto& m = fixtures::ieee14();
  const auto& eq = fixtures::ieee14_eq();
  auto run = [&](double dt) {
    ScenarioConfig sc;
    sc.dt = dt;
    sc.t_end = 2.0;
    sc.kick = SpeedKick{0.0, {0.002, -0.002, 0.002, -0.002, 0.002}};
    const auto tr = simulate(m, eq, sc);
    REQUIRE(!tr.terminated_early);
    return Eigen::VectorXd(tr.samples.col(tr.samples.cols() - 1));
  };
  const Eigen::VectorXd a = run(0.025), b = run(0.0125), c = run(0.00625);
  const double ratio = (a - b).norm() / (b - c).norm();
  CHECK(ratio > 3.0);
  CHECK(ratio < 5.0);
}

TEST_CASE("load step settles at the independent steady state") {
  const auto& m = fixtures::ieee14();
  const auto& eq = fixtures::ieee14_eq();
  const std::size_t l14 = *m.load_at_bus(*m.bus_index(14));
  ScenarioConfig sc;
  sc.t_end = 60.0;
  sc.shed = ShedEvent{1.0, l14};
  Simulator sim(m, eq, sc);
  sim.apply_due_events();
  while (sim.time() < sc.t_end - 1e-9) {
    REQUIRE(sim.step());
    sim.apply_due_events();
  }
  Inputs in = eq.inputs;
  in.shed[l14] = true;
  const Eigen::VectorXd ss = drifting_steady_state(m, in, sim.state());
  CHECK((bus_voltages(m, sim.state()) - bus_voltages(m, ss)).cwiseAbs().maxCoeff() < 1e-5);
  CHECK((referred_angles(m, sim.state()) - referred_angles(m, ss)).cwiseAbs().maxCoeff() < 1e-5);
  const auto& L = m.layout();
  for (std::size_t g = 0; g < m.generators().size(); ++g) {
    CHECK(sim.state()[L.omega(g)] == doctest::Approx(ss[L.omega(g)]).epsilon(1e-6));
    CHECK(sim.state()[L.omega(g)] > 1.0);  // lighter load, no governor
  }
}

TEST_CASE("shedding") {
  const auto& m = fixtures::ieee14();
  const auto& eq = fixtures::ieee14_eq();
  const std::size_t l9 = *m.load_at_bus(*m.bus_index(9));
  ScenarioConfig sc;
  sc.t_end = 2.0;
  sc.shed = ShedEvent{1.0, l9};
  const auto tr = simulate(m, eq, sc);
  REQUIRE(!tr.terminated_early);
  const auto pl = *tr.channel("PL_9"), ql = *tr.channel("QL_9");
  for (std::size_t j = 0; j < tr.times.size(); ++j) {
    const bool after = tr.times[j] >= 1.0 - 1e-9;
    CHECK((tr.samples(static_cast<Eigen::Index>(pl), static_cast<Eigen::Index>(j)) == 0.0) == after);
    if (after) CHECK(tr.samples(static_cast<Eigen::Index>(ql), static_cast<Eigen::Index>(j)) == 0.0);
  }
  bool logged = false;
  for (const auto& e : tr.events)
    if (e.name == "shed") logged = e.load_index == l9 && std::abs(e.t - 1.0) < 1e-9;
  CHECK(logged);

  SUBCASE("a zero load shed changes nothing") {
    const GridModel m0 = load_case(fixtures::two_bus_case(0.0, 0.0));
    const Equilibrium eq0 = find_equilibrium(m0);
    ScenarioConfig base;
    base.t_end = 3.0;
    base.kick = SpeedKick{0.0, {0.001}};
    ScenarioConfig with = base;
    with.shed = ShedEvent{1.0, 0};
    const auto a = simulate(m0, eq0, base), b = simulate(m0, eq0, with);
    CHECK((a.samples - b.samples).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(b.events.back().name == "shed");
  }
  SUBCASE("unknown load index") {
    ScenarioConfig bad;
    bad.shed = ShedEvent{1.0, 99};
    CHECK_THROWS_AS(Simulator(m, eq, bad), Error);
  }
}

TEST_CASE("simulation is deterministic") {
  const auto& m = fixtures::ieee14();
  ScenarioConfig sc;
  sc.t_end = 5.0;
  sc.attack = AttackSpec{{3, Variable::omega}, {9, Variable::PL}, 2.0, 0.5};
  sc.kick = SpeedKick{0.5, {1e-3, -1e-3, 1e-3, -1e-3, 1e-3}};
  const auto a = simulate(m, sc), b = simulate(m, sc);
  REQUIRE(a.samples.size() == b.samples.size());
  CHECK(std::memcmp(a.samples.data(), b.samples.data(), sizeof(double) * static_cast<std::size_t>(a.samples.size())) ==
        0);
  CHECK(a.events == b.events);
}

TEST_CASE("short hold without disturbance") {
  const auto& m = fixtures::ieee14();
  const auto& eq = fixtures::ieee14_eq();
  ScenarioConfig sc;
  sc.t_end = 20.0;
  const auto tr = simulate(m, eq, sc);
  REQUIRE(tr.times.size() == 401);
  CHECK(tr.times.front() == 0.0);
  CHECK(tr.times.back() == doctest::Approx(20.0));
  double drift = 0;
  for (Eigen::Index j = 0; j < tr.samples.cols(); ++j)
    drift = std::max(drift, (tr.samples.col(j) - tr.reference).cwiseAbs().maxCoeff());
  CHECK(drift < 1e-8);
}

TEST_CASE("scenario validation") {
  ScenarioConfig sc;
  sc.dt = 0.03;
  CHECK_THROWS_AS(sc.validate(), Error);
  sc.dt = 0.01;
  sc.t_end = 0;
  CHECK_THROWS_AS(sc.validate(), Error);
}
