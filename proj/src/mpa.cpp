// SPDX-License-Identifier: Apache-2.0
#include "gridshed/mpa.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "gridshed/error.hpp"

namespace gridshed {

namespace {

using cd = std::complex<double>;
constexpr double kTwoPi = 6.283185307179586;

// Real basis for the given modes over k = 0..W-1: one column for a real
// mode, a cosine/sine pair for an oscillatory one.
Eigen::MatrixXd mode_basis(const std::vector<Mode>& modes, Eigen::Index W, double dt) {
  Eigen::Index cols = 0;
  for (const auto& m : modes) cols += m.freq > 0 ? 2 : 1;
  Eigen::MatrixXd B(W, cols);
  Eigen::Index c = 0;
  for (const auto& m : modes) {
    for (Eigen::Index k = 0; k < W; ++k) {
      const double t = static_cast<double>(k) * dt;
      const double e = std::exp(m.sigma * t);
      B(k, c) = e * std::cos(kTwoPi * m.freq * t);
      if (m.freq > 0) B(k, c + 1) = e * std::sin(kTwoPi * m.freq * t);
    }
    c += m.freq > 0 ? 2 : 1;
  }
  return B;
}

Eigen::VectorXd demean(const Eigen::VectorXd& x) { return x.array() - x.mean(); }

}  // namespace

void PronyConfig::validate() const {
  if (model_order < 1 || window_len <= 2 * model_order) throw Error("Prony config needs window_len > 2 * model_order >= 2");
  if (stride < 1) throw Error("Prony stride must be positive");
  auto frac = [](double v) { return v > 0 && v < 1; };
  if (!frac(energy_floor) || !frac(min_mode_energy) || !frac(fit_residual_max))
    throw Error("Prony energy_floor, min_mode_energy and fit_residual_max must be in (0, 1)");
  if (consecutive_k < 1) throw Error("consecutive_k must be at least 1");
  if (!(sample_dt > 0)) throw Error("sample_dt must be positive");
}

void to_json(nlohmann::json& j, const PronyConfig& c) {
  j = {{"window_len", c.window_len},         {"stride", c.stride},
       {"model_order", c.model_order},       {"energy_floor", c.energy_floor},
       {"damping_alarm", c.damping_alarm},   {"min_mode_energy", c.min_mode_energy},
       {"fit_residual_max", c.fit_residual_max}, {"consecutive_k", c.consecutive_k},
       {"sample_dt", c.sample_dt},           {"max_abs_sigma", c.max_abs_sigma}};
}

void from_json(const nlohmann::json& j, PronyConfig& c) {
  c.window_len = j.value("window_len", c.window_len);
  c.stride = j.value("stride", c.stride);
  c.model_order = j.value("model_order", c.model_order);
  c.energy_floor = j.value("energy_floor", c.energy_floor);
  c.damping_alarm = j.value("damping_alarm", c.damping_alarm);
  c.min_mode_energy = j.value("min_mode_energy", c.min_mode_energy);
  c.fit_residual_max = j.value("fit_residual_max", c.fit_residual_max);
  c.consecutive_k = j.value("consecutive_k", c.consecutive_k);
  c.sample_dt = j.value("sample_dt", c.sample_dt);
  c.max_abs_sigma = j.value("max_abs_sigma", c.max_abs_sigma);
}

void to_json(nlohmann::json& j, const Mode& m) {
  j = {{"sigma", m.sigma},
       {"freq", m.freq},
       {"amplitude", m.amplitude},
       {"phase", m.phase},
       {"energy_fraction", m.energy_fraction}};
}

std::vector<Mode> prony_fit(const Eigen::VectorXd& window, int order, double sample_dt) {
  const Eigen::Index W = window.size();
  const Eigen::Index n = order;
  if (n < 1 || W <= 2 * n) throw Error("Prony fit needs more than 2 * order samples");
  if (!window.allFinite()) throw Error("Prony window contains non-finite samples");

  const Eigen::VectorXd x = demean(window);
  const double scale = window.cwiseAbs().maxCoeff();
  const double spread = std::sqrt(x.squaredNorm() / static_cast<double>(W));
  if (spread <= 1e-10 * scale || spread == 0.0) return {};

  // Forward linear prediction x[k] = sum_i a_i x[k-i].
  Eigen::MatrixXd A(W - n, n);
  Eigen::VectorXd b(W - n);
  for (Eigen::Index k = n; k < W; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) A(k - n, i) = x[k - 1 - i];
    b[k - n] = x[k];
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  if (cod.rank() == 0) return {};
  const Eigen::VectorXd a = cod.solve(b);

  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(n, n);
  companion.row(0) = a.transpose();
  for (Eigen::Index i = 1; i < n; ++i) companion(i, i - 1) = 1.0;
  const Eigen::VectorXcd roots = Eigen::EigenSolver<Eigen::MatrixXd>(companion, false).eigenvalues();

  std::vector<cd> z;
  for (const auto& r : roots)
    if (std::abs(r) >= 1e-8) z.push_back(r);
  if (z.empty()) return {};

  Eigen::MatrixXcd V(W, static_cast<Eigen::Index>(z.size()));
  for (std::size_t i = 0; i < z.size(); ++i) {
    cd p = 1.0;
    for (Eigen::Index k = 0; k < W; ++k) {
      V(k, static_cast<Eigen::Index>(i)) = p;
      p *= z[i];
    }
  }
  const Eigen::VectorXcd xc = x.cast<cd>();
  const Eigen::VectorXcd h = V.completeOrthogonalDecomposition().solve(xc);

  std::vector<Mode> modes;
  std::vector<double> energy;
  const double imag_tol = 1e-9;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const cd zi = z[i];
    if (zi.imag() < -imag_tol) continue;  // conjugate partner carries the pair
    const bool oscillatory = zi.imag() > imag_tol;
    const cd lambda = std::log(zi) / sample_dt;
    const cd hi = h[static_cast<Eigen::Index>(i)];
    Mode m;
    m.sigma = lambda.real();
    m.freq = oscillatory ? lambda.imag() / kTwoPi : (zi.real() < 0 ? 0.5 / sample_dt : 0.0);
    m.amplitude = oscillatory ? 2.0 * std::abs(hi) : std::abs(hi);
    m.phase = std::arg(hi);
    double e = 0.0;
    cd p = hi;
    for (Eigen::Index k = 0; k < W; ++k) {
      const double c = oscillatory ? 2.0 * p.real() : p.real();
      e += c * c;
      p *= zi;
    }
    modes.push_back(m);
    energy.push_back(e);
  }
  double total = 0.0;
  for (double e : energy) total += e;
  for (std::size_t i = 0; i < modes.size(); ++i) modes[i].energy_fraction = total > 0 ? energy[i] / total : 0.0;
  std::stable_sort(modes.begin(), modes.end(),
                   [](const Mode& l, const Mode& r) { return l.energy_fraction > r.energy_fraction; });
  return modes;
}

ModeSelection classify_modes(const std::vector<Mode>& modes, const Eigen::VectorXd& window, const PronyConfig& config) {
  ModeSelection out;
  for (const auto& m : modes)
    if (m.energy_fraction >= config.energy_floor && std::abs(m.sigma) <= config.max_abs_sigma) out.modes.push_back(m);
  const Eigen::VectorXd x = demean(window);
  const double norm = x.norm();
  if (out.modes.empty() || norm == 0.0) {
    out.modes.clear();
    out.fit_residual = 1.0;
    return out;
  }

  // The last column absorbs the offset left by removing the window mean.
  const Eigen::Index W = x.size();
  Eigen::MatrixXd B = mode_basis(out.modes, W, config.sample_dt);
  B.conservativeResize(W, B.cols() + 1);
  B.col(B.cols() - 1).setOnes();
  const Eigen::VectorXd coef = B.completeOrthogonalDecomposition().solve(x);
  out.fit_residual = (B * coef - x).norm() / norm;

  std::vector<double> energy;
  Eigen::Index c = 0;
  for (auto& m : out.modes) {
    Eigen::VectorXd comp;
    if (m.freq > 0) {
      const double p = coef[c], q = coef[c + 1];
      // p cos + q sin = A cos(wt + phi)
      m.amplitude = std::hypot(p, q);
      m.phase = std::atan2(-q, p);
      comp = B.col(c) * p + B.col(c + 1) * q;
      c += 2;
    } else {
      m.amplitude = std::abs(coef[c]);
      m.phase = coef[c] < 0 ? M_PI : 0.0;
      comp = B.col(c) * coef[c];
      c += 1;
    }
    energy.push_back(comp.squaredNorm());
  }
  double total = 0.0;
  for (double e : energy) total += e;
  for (std::size_t i = 0; i < out.modes.size(); ++i) out.modes[i].energy_fraction = total > 0 ? energy[i] / total : 0.0;
  std::stable_sort(out.modes.begin(), out.modes.end(),
                   [](const Mode& l, const Mode& r) { return l.energy_fraction > r.energy_fraction; });
  return out;
}

WindowVerdict evaluate_window(const Eigen::VectorXd& window, double t_end, const PronyConfig& config) {
  WindowVerdict v;
  v.t_end = t_end;
  v.selection = classify_modes(prony_fit(window, config.model_order, config.sample_dt), window, config);
  if (v.selection.fit_residual <= config.fit_residual_max)
    for (const auto& m : v.selection.modes)
      if (m.sigma > config.damping_alarm && m.energy_fraction >= config.min_mode_energy) v.unstable = true;
  return v;
}

AlarmState::AlarmState(PronyConfig config) : config_(config) { config_.validate(); }

void AlarmState::update(const std::vector<double>& times, const std::vector<double>& values) {
  if (times.size() != values.size()) throw Error("alarm update: times and values differ in length");
  for (std::size_t i = 0; i < times.size(); ++i) update(times[i], values[i]);
}

void AlarmState::update(double t, double value) {
  if (last_t_) {
    const double gap = t - *last_t_;
    if (std::abs(gap - config_.sample_dt) > 1e-6 * config_.sample_dt + 1e-9)
      throw Error("alarm update: non-uniform sampling at t = " + std::to_string(t));
  }
  last_t_ = t;
  buffer_.push_back(value);
  if (buffer_.size() > static_cast<std::size_t>(config_.window_len)) buffer_.pop_front();
  ++since_window_;
  if (buffer_.size() < static_cast<std::size_t>(config_.window_len)) return;
  if (windows_ > 0 && since_window_ < config_.stride) return;

  since_window_ = 0;
  ++windows_;
  Eigen::VectorXd w(config_.window_len);
  std::copy(buffer_.begin(), buffer_.end(), w.data());
  last_ = evaluate_window(w, t, config_);
  consecutive_ = last_->unstable ? consecutive_ + 1 : 0;
  if (!alarm_time_ && consecutive_ >= config_.consecutive_k) {
    alarm_time_ = t;
    modes_at_alarm_ = last_->selection.modes;
  }
}

DetectionReport detect(const Trajectory& traj, PronyConfig config, double t0, double t1) {
  if (traj.times.size() >= 2) config.sample_dt = traj.times[1] - traj.times[0];
  config.validate();
  DetectionReport report;
  for (std::size_t c = 0; c < traj.channels.size(); ++c) {
    AlarmState state(config);
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
      const double t = traj.times[k];
      if (t < t0 || t > t1) continue;
      state.update(t, traj.samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)));
    }
    ChannelAlarm ch{state.alarmed(), state.alarm_time(), state.modes_at_alarm()};
    if (ch.alarmed && (!report.alarm_time || *ch.alarm_time < *report.alarm_time)) report.alarm_time = ch.alarm_time;
    report.channels.emplace(traj.channels[c], std::move(ch));
  }
  report.alarmed = report.alarm_time.has_value();
  return report;
}

nlohmann::json to_json(const DetectionReport& r) {
  nlohmann::json channels = nlohmann::json::object();
  for (const auto& [name, ch] : r.channels) {
    channels[name] = {{"alarmed", ch.alarmed},
                      {"alarm_time", ch.alarm_time ? nlohmann::json(*ch.alarm_time) : nlohmann::json(nullptr)},
                      {"modes_at_alarm", ch.modes_at_alarm}};
  }
  return {{"alarmed", r.alarmed},
          {"alarm_time", r.alarm_time ? nlohmann::json(*r.alarm_time) : nlohmann::json(nullptr)},
          {"channels", channels}};
}

}  // namespace gridshed
