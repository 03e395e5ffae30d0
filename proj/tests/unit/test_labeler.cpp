// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "../common/synthetic.hpp"

using namespace gridshed;
using synthetic::post_shed;

TEST_CASE("synthetic suite") {
  const auto suite = synthetic::labeler_suite();
  CHECK(suite.size() >= 40);
  int families[4] = {0, 0, 0, 0};
  for (const auto& c : suite) {
    ++families[static_cast<int>(c.family)];
    INFO(c.name);
    const Label l = label(c.post);
    CHECK(l.verdict == c.expected);
    if (c.family == synthetic::Family::excursion) CHECK(l.deciding_test == DecidingTest::excursion);
    if (c.family == synthetic::Family::flat) CHECK(l.deciding_test == DecidingTest::variance);
    if (c.family == synthetic::Family::growing) CHECK(l.deciding_test == DecidingTest::envelope);
  }
  for (int n : families) CHECK(n >= 10);
}

TEST_CASE("band edge is inclusive") {
  LabelerConfig cfg;
  auto dip = [](double frac) {
    auto tr = post_shed([](int, double) { return 0.0; });
    tr.reference[0] = 1.0;
    tr.samples.row(0).setOnes();
    tr.samples(0, 400) = frac;
    return tr;
  };
  CHECK(!excursion_test(dip(0.80), cfg).flagged);
  CHECK(excursion_test(dip(0.79), cfg).flagged);
  CHECK(excursion_test(dip(0.79), cfg).channel == "V_4");
  CHECK(!excursion_test(dip(0.99), cfg).flagged);
  CHECK(label(dip(0.80)).verdict == Verdict::stable);
  CHECK(label(dip(0.79)).verdict == Verdict::unstable);
}

TEST_CASE("excursion wins over a quiet tail") {
  const auto tr = post_shed([](int c, double t) { return c == 0 && t < 2 ? -0.5 * 1.02 : 0.0; });
  LabelerConfig cfg;
  CHECK(variance_test(tail_of(tr, cfg), cfg).flagged);
  const Label l = label(tr, cfg);
  CHECK(l.verdict == Verdict::unstable);
  CHECK(l.deciding_test == DecidingTest::excursion);
  CHECK(l.deciding_channel == "V_4");
}

TEST_CASE("only banded channel classes are checked") {
  const auto tr = post_shed([](int c, double t) { return c == 3 && t < 1 ? -0.29 : 0.0; });
  CHECK(!excursion_test(tr, {}).flagged);
  LabelerConfig cfg;
  cfg.excursion_band["PL"] = 0.2;
  CHECK(excursion_test(tr, cfg).flagged);
}

TEST_CASE("variance test") {
  LabelerConfig cfg;
  const auto flat = post_shed([](int, double) { return 0.0; });
  CHECK(variance_test(tail_of(flat, cfg), cfg).flagged);
  const auto wobble = post_shed([](int c, double t) { return c == 2 ? 0.05 * std::cos(3 * t) : 0.0; });
  const auto v = variance_test(tail_of(wobble, cfg), cfg);
  CHECK(!v.flagged);
  CHECK(v.channel == "omega_g1");
  // Normalized by the squared reference: 0.05 cos has variance 0.00125.
  CHECK(tail_variance(tail_of(wobble, cfg), 2) == doctest::Approx(0.00125).epsilon(0.02));
}

TEST_CASE("envelope slope recovers the decay rate") {
  LabelerConfig cfg;
  for (double sigma : {-0.1, 0.05, -0.02}) {
    const auto tr = post_shed([=](int c, double t) { return c == 2 ? 0.01 * std::exp(sigma * t) * std::cos(5 * t) : 0.0; });
    const auto tail = tail_of(tr, cfg);
    CHECK(envelope_slope(tail, 2, cfg) == doctest::Approx(sigma).epsilon(0.05));
  }
  const auto tr_dec = post_shed([](int c, double t) { return c == 2 ? 0.01 * std::exp(-0.1 * t) * std::cos(5 * t) : 0.0; });
  CHECK(!envelope_slope_test(tail_of(tr_dec, cfg), cfg).flagged);
  const auto tr_grow = post_shed([](int c, double t) { return c == 2 ? 0.01 * std::exp(0.05 * t) * std::cos(5 * t) : 0.0; });
  CHECK(envelope_slope_test(tail_of(tr_grow, cfg), cfg).flagged);
  const auto tr_const = post_shed([](int c, double t) { return c == 2 ? 0.01 * std::cos(5 * t) : 0.0; });
  CHECK(std::abs(envelope_slope(tail_of(tr_const, cfg), 2, cfg)) < 1e-3);
  CHECK(envelope_slope_test(tail_of(tr_const, cfg), cfg).flagged);
}

TEST_CASE("envelope slope is scale invariant") {
  LabelerConfig cfg;
  const auto tr = post_shed([](int c, double t) { return c == 2 ? 0.05 * std::exp(-0.07 * t) * std::cos(4 * t) : 0.0; });
  const auto tail = tail_of(tr, cfg);
  const double base = envelope_slope(tail, 2, cfg);
  for (double k : {0.1, 3.0, 1e3}) {
    auto scaled = tail;
    scaled.samples.row(2) *= k;
    CHECK(std::abs(envelope_slope(scaled, 2, cfg) - base) < 1e-9);
  }
}

TEST_CASE("tail is the last quarter") {
  LabelerConfig cfg;
  const auto tr = post_shed([](int, double) { return 0.0; });
  const auto tail = tail_of(tr, cfg);
  CHECK(tail.times.size() == static_cast<std::size_t>(std::floor(tr.times.size() * 0.25)));
  CHECK(tail.times.back() == tr.times.back());
}

TEST_CASE("labeling is deterministic") {
  for (const auto& c : synthetic::labeler_suite()) {
    const Label a = label(c.post), b = label(c.post);
    CHECK(a.verdict == b.verdict);
    CHECK(a.deciding_test == b.deciding_test);
    CHECK(a.deciding_channel == b.deciding_channel);
  }
}

TEST_CASE("viability and config errors") {
  CHECK_THROWS_AS(label(post_shed([](int, double) { return 0.0; }, 49.9)), ViabilityError);
  CHECK_NOTHROW(label(post_shed([](int, double) { return 0.0; }, 50.0)));
  auto no_ref = post_shed([](int, double) { return 0.0; });
  no_ref.reference.resize(0);
  CHECK_THROWS_AS(label(no_ref), ViabilityError);
  LabelerConfig cfg;
  cfg.tail_fraction = 0.6;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.slope_threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.n_envelope_windows = 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("labeler config serialization") {
  LabelerConfig c;
  c.excursion_band = {{"V", 0.1}, {"omega", 0.02}};
  c.slope_threshold = -0.01;
  const nlohmann::json j = c;
  const auto back = j.get<LabelerConfig>();
  CHECK(back.excursion_band == c.excursion_band);
  CHECK(back.slope_threshold == -0.01);
  const auto partial = nlohmann::json{{"tail_fraction", 0.3}}.get<LabelerConfig>();
  CHECK(partial.tail_fraction == 0.3);
  CHECK(partial.excursion_band.at("V") == 0.2);
  CHECK(verdict_from_string(to_string(Verdict::unstable)) == Verdict::unstable);
}
