// SPDX-License-Identifier: Apache-2.0
#include "gridshed/labeler.hpp"

#include <cmath>
#include <limits>

namespace gridshed {

namespace {

std::string channel_class(const std::string& name) {
  const auto us = name.find('_');
  return us == std::string::npos ? name : name.substr(0, us);
}

double reference_scale(double ref) { return std::abs(ref) < 1e-6 ? 1.0 : ref; }

void require_reference(const Trajectory& t) {
  if (static_cast<std::size_t>(t.reference.size()) != t.channels.size())
    throw ViabilityError("trajectory has no equilibrium reference");
}

}  // namespace

std::string_view to_string(Verdict v) { return v == Verdict::stable ? "STABLE" : "UNSTABLE"; }

std::string_view to_string(DecidingTest t) {
  switch (t) {
    case DecidingTest::excursion: return "excursion";
    case DecidingTest::variance: return "variance";
    case DecidingTest::envelope: return "envelope";
  }
  return "?";
}

Verdict verdict_from_string(std::string_view s) {
  if (s == "STABLE") return Verdict::stable;
  if (s == "UNSTABLE") return Verdict::unstable;
  throw Error("unknown verdict '" + std::string(s) + "'");
}

void to_json(nlohmann::json& j, const LabelerConfig& c) {
  nlohmann::json band = nlohmann::json::object();
  for (const auto& [k, v] : c.excursion_band) band[k] = v;
  j = {{"excursion_band", band},
       {"tail_fraction", c.tail_fraction},
       {"variance_floor", c.variance_floor},
       {"n_envelope_windows", c.n_envelope_windows},
       {"slope_threshold", c.slope_threshold},
       {"min_duration", c.min_duration},
       {"log_epsilon", c.log_epsilon}};
}

void from_json(const nlohmann::json& j, LabelerConfig& c) {
  try {
    if (j.contains("excursion_band")) {
      c.excursion_band.clear();
      for (const auto& [k, v] : j.at("excursion_band").items()) c.excursion_band[k] = v.get<double>();
    }
    c.tail_fraction = j.value("tail_fraction", c.tail_fraction);
    c.variance_floor = j.value("variance_floor", c.variance_floor);
    c.n_envelope_windows = j.value("n_envelope_windows", c.n_envelope_windows);
    c.slope_threshold = j.value("slope_threshold", c.slope_threshold);
    c.min_duration = j.value("min_duration", c.min_duration);
    c.log_epsilon = j.value("log_epsilon", c.log_epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed labeler config: ") + e.what());
  }
}

void LabelerConfig::validate() const {
  if (!(tail_fraction > 0 && tail_fraction <= 0.5)) throw Error("tail_fraction must be in (0, 0.5]");
  if (n_envelope_windows < 2) throw Error("n_envelope_windows must be at least 2");
  if (!(slope_threshold < 0)) throw Error("slope_threshold must be negative");
  for (const auto& [cls, band] : excursion_band)
    if (!(band > 0)) throw Error("excursion band for " + cls + " must be positive");
}

ChannelVerdict excursion_test(const Trajectory& post, const LabelerConfig& config) {
  require_reference(post);
  for (std::size_t c = 0; c < post.channels.size(); ++c) {
    auto it = config.excursion_band.find(channel_class(post.channels[c]));
    if (it == config.excursion_band.end()) continue;
    const double ref = post.reference[static_cast<Eigen::Index>(c)];
    const double limit = it->second * std::abs(ref);
    const auto row = post.samples.row(static_cast<Eigen::Index>(c));
    for (Eigen::Index k = 0; k < row.size(); ++k)
      if (!(std::abs(row[k] - ref) <= limit)) return {true, post.channels[c]};
  }
  return {false, {}};
}

Trajectory tail_of(const Trajectory& post, const LabelerConfig& config) {
  const std::size_t n = post.times.size();
  const auto count = static_cast<std::size_t>(std::floor(static_cast<double>(n) * config.tail_fraction));
  if (count < 4) throw ViabilityError("tail shorter than 4 samples");
  return post.slice(post.times[n - count]);
}

double tail_variance(const Trajectory& tail, std::size_t channel) {
  const auto row = tail.samples.row(static_cast<Eigen::Index>(channel));
  const double mean = row.mean();
  const double var = (row.array() - mean).square().mean();
  const double scale = reference_scale(tail.reference[static_cast<Eigen::Index>(channel)]);
  return var / (scale * scale);
}

ChannelVerdict variance_test(const Trajectory& tail, const LabelerConfig& config) {
  require_reference(tail);
  if (tail.times.size() < 4) throw ViabilityError("tail shorter than 4 samples");
  double worst = -1.0;
  std::string worst_name;
  for (std::size_t c = 0; c < tail.channels.size(); ++c) {
    const double v = tail_variance(tail, c);
    if (!(v < config.variance_floor)) return {false, tail.channels[c]};
    if (v > worst) {
      worst = v;
      worst_name = tail.channels[c];
    }
  }
  return {true, worst_name};
}

double envelope_slope(const Trajectory& tail, std::size_t channel, const LabelerConfig& config) {
  const std::size_t nw = static_cast<std::size_t>(config.n_envelope_windows);
  const std::size_t w = tail.times.size() / nw;
  if (w < 4) throw ViabilityError("tail too short for the envelope test");
  const std::size_t start = tail.times.size() - nw * w;
  const auto row = tail.samples.row(static_cast<Eigen::Index>(channel));
  const double mean = row.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(nw * w)).mean();

  Eigen::VectorXd tc(static_cast<Eigen::Index>(nw)), lr(static_cast<Eigen::Index>(nw));
  for (std::size_t k = 0; k < nw; ++k) {
    double ss = 0.0, ts = 0.0;
    for (std::size_t j = start + k * w; j < start + (k + 1) * w; ++j) {
      const double d = row[static_cast<Eigen::Index>(j)] - mean;
      ss += d * d;
      ts += tail.times[j];
    }
    tc[static_cast<Eigen::Index>(k)] = ts / static_cast<double>(w);
    lr[static_cast<Eigen::Index>(k)] = std::log(std::sqrt(ss / static_cast<double>(w)) + config.log_epsilon);
  }
  const double tm = tc.mean(), lm = lr.mean();
  const double num = ((tc.array() - tm) * (lr.array() - lm)).sum();
  const double den = (tc.array() - tm).square().sum();
  return num / den;
}

ChannelVerdict envelope_slope_test(const Trajectory& tail, const LabelerConfig& config) {
  require_reference(tail);
  double worst = -std::numeric_limits<double>::infinity();
  std::string worst_name;
  for (std::size_t c = 0; c < tail.channels.size(); ++c) {
    // Settled channels carry no envelope information.
    if (tail_variance(tail, c) < config.variance_floor) continue;
    const double s = envelope_slope(tail, c, config);
    if (!(s < config.slope_threshold)) return {true, tail.channels[c]};
    if (s > worst) {
      worst = s;
      worst_name = tail.channels[c];
    }
  }
  return {false, worst_name};
}

Label label(const Trajectory& post, const LabelerConfig& config) {
  config.validate();
  require_reference(post);
  if (post.times.size() < 2 || post.times.back() - post.times.front() < config.min_duration - 1e-9)
    throw ViabilityError("post-shed trajectory shorter than " + std::to_string(config.min_duration) + " s");

  if (auto ex = excursion_test(post, config); ex.flagged)
    return {Verdict::unstable, DecidingTest::excursion, ex.channel};
  const Trajectory tail = tail_of(post, config);
  if (auto var = variance_test(tail, config); var.flagged) return {Verdict::stable, DecidingTest::variance, var.channel};
  const auto env = envelope_slope_test(tail, config);
  return {env.flagged ? Verdict::unstable : Verdict::stable, DecidingTest::envelope, env.channel};
}

}  // namespace gridshed
