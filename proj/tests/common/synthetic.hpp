// SPDX-License-Identifier: Apache-2.0
// Synthetic signal generators with known modal content.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "gridshed/labeler.hpp"
#include "gridshed/mpa.hpp"

namespace synthetic {

constexpr double kTwoPi = 6.283185307179586;

struct Cosine {
  double amplitude = 1.0;
  double sigma = 0.0;
  double freq = 0.0;
  double phase = 0.0;
};

inline double value(const std::vector<Cosine>& parts, double t) {
  double v = 0.0;
  for (const auto& c : parts) v += c.amplitude * std::exp(c.sigma * t) * std::cos(kTwoPi * c.freq * t + c.phase);
  return v;
}

inline Eigen::VectorXd window(const std::vector<Cosine>& parts, int n, double dt, double offset = 0.0) {
  Eigen::VectorXd w(n);
  for (int k = 0; k < n; ++k) w[k] = offset + value(parts, k * dt);
  return w;
}

struct StreamResult {
  std::optional<long> alarm_window;       // 1-based window index at alarm
  std::optional<long> first_full_window;  // first window whose start is at or after onset
  long windows = 0;
};

/// Feeds `duration` seconds of `offset + noise + parts(t - onset)` (zero
/// before onset) through one AlarmState and reports the window indices.
inline StreamResult stream(const std::vector<Cosine>& parts, double onset, double duration, double noise_std,
                           std::uint64_t seed, gridshed::PronyConfig cfg = {}, double offset = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, noise_std > 0 ? noise_std : 1.0);
  gridshed::AlarmState a(cfg);
  StreamResult r;
  const long n = std::lround(duration / cfg.sample_dt);
  for (long k = 0; k <= n; ++k) {
    const double t = k * cfg.sample_dt;
    double v = offset + (t >= onset ? value(parts, t - onset) : 0.0);
    if (noise_std > 0) v += nd(rng);
    const long before = a.windows_evaluated();
    a.update(t, v);
    if (a.windows_evaluated() != before) {
      r.windows = a.windows_evaluated();
      const double start = t - (cfg.window_len - 1) * cfg.sample_dt;
      if (!r.first_full_window && start >= onset - 1e-9) r.first_full_window = r.windows;
      if (!r.alarm_window && a.alarmed()) r.alarm_window = r.windows;
    }
  }
  return r;
}

enum class Family { excursion, flat, decaying, growing };

struct LabelCase {
  std::string name;
  Family family;
  gridshed::Verdict expected;
  gridshed::Trajectory post;
};

/// Post-shed trajectory over [t0, t0 + duration] at 20 Hz with a voltage,
/// a speed and a load channel around fixed references. `shape(c, t)`
/// returns the deviation of channel c at time t since t0.
template <class Shape>
gridshed::Trajectory post_shed(Shape shape, double duration = 60.0, double t0 = 10.0) {
  gridshed::Trajectory tr;
  tr.channels = {"V_4", "V_9", "omega_g1", "PL_9"};
  tr.reference.resize(4);
  tr.reference << 1.02, 1.05, 1.0, 0.295;
  const long n = std::lround(duration * 20.0);
  tr.samples.resize(4, n + 1);
  for (long k = 0; k <= n; ++k) {
    const double t = k * 0.05;
    tr.times.push_back(t0 + t);
    for (int c = 0; c < 4; ++c) tr.samples(c, k) = tr.reference[c] + shape(c, t);
  }
  tr.end_time = tr.times.back();
  return tr;
}

/// Labeled synthetic suite covering four families.
inline std::vector<LabelCase> labeler_suite() {
  using gridshed::Verdict;
  std::vector<LabelCase> out;
  auto add = [&](std::string name, Family f, Verdict v, gridshed::Trajectory tr) {
    out.push_back({std::move(name), f, v, std::move(tr)});
  };
  // Voltage leaves the 20% band at some point; the tail may look calm.
  for (double depth : {0.79, 0.7, 0.5, 0.3})
    for (double at : {1.0, 30.0, 59.0})
      add("excursion dip " + std::to_string(depth) + " at " + std::to_string(at), Family::excursion,
          Verdict::unstable, post_shed([=](int c, double t) {
            return c == 1 && std::abs(t - at) < 0.5 ? (depth - 1.0) * 1.05 : 0.0;
          }));
  for (double rise : {1.21, 1.5})
    add("excursion swell " + std::to_string(rise), Family::excursion, Verdict::unstable,
        post_shed([=](int c, double t) { return c == 0 && t > 5 ? (rise - 1.0) * 1.02 : 0.0; }));
  // Flat, possibly at a slightly different operating point.
  for (double off : {0.0, 0.005, -0.01, 0.03})
    for (double step_at : {0.0, 10.0, 40.0})
      add("flat offset " + std::to_string(off) + " from " + std::to_string(step_at), Family::flat, Verdict::stable,
          post_shed([=](int c, double t) { return t >= step_at ? off * (c + 1) : 0.0; }));
  // Damped oscillations of varying rate, amplitude and frequency.
  for (double sigma : {-0.02, -0.05, -0.1, -0.3})
    for (double amp : {0.01, 0.05, 0.15})
      add("decaying " + std::to_string(sigma) + " amp " + std::to_string(amp), Family::decaying, Verdict::stable,
          post_shed([=](int c, double t) {
            return c < 3 ? amp * std::exp(sigma * t) * std::cos(kTwoPi * (0.4 + 0.3 * c) * t) : 0.0;
          }));
  // Growing or undamped speed oscillations, visible above the variance floor.
  for (double sigma : {0.0, 0.005, 0.02, 0.05})
    for (double amp : {3e-3, 1e-2, 3e-2})
      add("growing " + std::to_string(sigma) + " amp " + std::to_string(amp), Family::growing, Verdict::unstable,
          post_shed([=](int c, double t) {
            return c == 2 ? amp * std::exp(sigma * t) * std::cos(kTwoPi * 0.8 * t) : 0.0;
          }));
  return out;
}

}  // namespace synthetic
