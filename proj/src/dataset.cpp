// SPDX-License-Identifier: Apache-2.0
#include "gridshed/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "gridshed/error.hpp"
#include "gridshed/small_signal.hpp"
#include "gridshed/trajectory_io.hpp"

namespace gridshed {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json target_json(const Target& t) { return {{"node", t.node}, {"var", to_string(t.var)}}; }

Target target_from(const json& j) { return {j.at("node").get<int>(), variable_from_string(j.at("var").get<std::string>())}; }

std::vector<Variable> vars_from(const json& j) {
  std::vector<Variable> out;
  for (const auto& v : j) out.push_back(variable_from_string(v.get<std::string>()));
  return out;
}

json vars_json(const std::vector<Variable>& vars) {
  json j = json::array();
  for (Variable v : vars) j.push_back(std::string(to_string(v)));
  return j;
}

json label_json(const Label& l) {
  return {{"verdict", to_string(l.verdict)},
          {"deciding_test", to_string(l.deciding_test)},
          {"deciding_channel", l.deciding_channel}};
}

DecidingTest test_from_string(const std::string& s) {
  if (s == "excursion") return DecidingTest::excursion;
  if (s == "variance") return DecidingTest::variance;
  if (s == "envelope") return DecidingTest::envelope;
  throw Error("unknown deciding test '" + s + "'");
}

// Runs fn(i) for i in [0, n) on up to `threads` workers pulling from a
// shared counter.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void SweepConfig::validate() const {
  if (read_vars.empty() || write_vars.empty()) throw Error("sweep needs read and write variables");
  if (max_attacks == 0) throw Error("max_attacks must be positive");
  if (!(gain.growth_target > 0)) throw Error("growth_target must be positive");
  if (!(gain.k_min > 0 && gain.k_max > gain.k_min)) throw Error("gain search range is invalid");
  if (!(shed_delay > 0 && post_shed > 0)) throw Error("shed_delay and post_shed must be positive");
  if (threads == 0) throw Error("threads must be at least 1");
  prony.validate();
  labeler.validate();
}

void to_json(json& j, const SweepConfig& c) {
  j = {{"read_vars", vars_json(c.read_vars)},
       {"write_vars", vars_json(c.write_vars)},
       {"loads", c.loads},
       {"max_attacks", c.max_attacks},
       {"seed", c.seed},
       {"gain_policy",
        {{"growth_target", c.gain.growth_target},
         {"k_min", c.gain.k_min},
         {"k_max", c.gain.k_max},
         {"verify_horizon", c.gain.verify_horizon}}},
       {"kick", c.kick},
       {"t_on", c.t_on},
       {"shed_delay", c.shed_delay},
       {"post_shed", c.post_shed},
       {"dt", c.dt},
       {"record_rate", c.record_rate},
       {"prony", c.prony},
       {"labeler", c.labeler},
       {"threads", c.threads},
       {"output_dir", c.output_dir.string()}};
}

void from_json(const json& j, SweepConfig& c) {
  try {
    if (j.contains("read_vars")) c.read_vars = vars_from(j.at("read_vars"));
    if (j.contains("write_vars")) c.write_vars = vars_from(j.at("write_vars"));
    if (j.contains("loads")) c.loads = j.at("loads").get<std::vector<std::size_t>>();
    c.max_attacks = j.value("max_attacks", c.max_attacks);
    c.seed = j.value("seed", c.seed);
    if (j.contains("gain_policy")) {
      const auto& g = j.at("gain_policy");
      c.gain.growth_target = g.value("growth_target", c.gain.growth_target);
      c.gain.k_min = g.value("k_min", c.gain.k_min);
      c.gain.k_max = g.value("k_max", c.gain.k_max);
      c.gain.verify_horizon = g.value("verify_horizon", c.gain.verify_horizon);
    }
    c.kick = j.value("kick", c.kick);
    c.t_on = j.value("t_on", c.t_on);
    c.shed_delay = j.value("shed_delay", c.shed_delay);
    c.post_shed = j.value("post_shed", c.post_shed);
    c.dt = j.value("dt", c.dt);
    c.record_rate = j.value("record_rate", c.record_rate);
    if (j.contains("prony")) c.prony = j.at("prony").get<PronyConfig>();
    if (j.contains("labeler")) c.labeler = j.at("labeler").get<LabelerConfig>();
    c.threads = j.value("threads", c.threads);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(std::string("malformed sweep config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Gain policy

void to_json(json& j, const AttackCalibration& c) {
  j = {{"attack", c.spec},
       {"critical_gain", c.critical_gain ? json(*c.critical_gain) : json(nullptr)},
       {"growth_rate", c.growth_rate},
       {"alarm_time", c.alarm_time ? json(*c.alarm_time) : json(nullptr)},
       {"accepted", c.accepted},
       {"reason", c.reason}};
}

void from_json(const json& j, AttackCalibration& c) {
  c.spec = j.at("attack").get<AttackSpec>();
  if (!j.at("critical_gain").is_null()) c.critical_gain = j.at("critical_gain").get<double>();
  c.growth_rate = j.at("growth_rate").get<double>();
  if (!j.at("alarm_time").is_null()) c.alarm_time = j.at("alarm_time").get<double>();
  c.accepted = j.at("accepted").get<bool>();
  c.reason = j.at("reason").get<std::string>();
}

SpeedKick sweep_kick(const GridModel& model, const SweepConfig& config) {
  SpeedKick kick{config.t_on, {}};
  for (std::size_t g = 0; g < model.generators().size(); ++g) kick.d_omega.push_back(g % 2 ? -config.kick : config.kick);
  return kick;
}

AttackCalibration calibrate_attack(const GridModel& model, const Equilibrium& eq, const Target& read,
                                   const Target& write, const SweepConfig& config) {
  AttackCalibration cal;
  cal.spec = {read, write, 0.0, config.t_on};
  const AttackLoop loop(model, eq, read, write);
  const auto crit = critical_gain(loop, config.gain.k_min, config.gain.k_max);
  if (!crit) {
    cal.reason = "no destabilizing gain in range";
    return cal;
  }
  cal.critical_gain = crit->gain;
  const auto k = gain_for_growth(loop, crit->gain, config.gain.growth_target, 100.0 * config.gain.k_max);
  if (!k) {
    cal.reason = "growth target unreachable";
    return cal;
  }
  cal.spec.gain = *k;
  cal.growth_rate = loop.growth_rate(*k);

  ScenarioConfig sc;
  sc.t_end = config.t_on + config.gain.verify_horizon;
  sc.dt = config.dt;
  sc.record_rate = config.record_rate;
  sc.attack = cal.spec;
  if (config.kick != 0.0) sc.kick = sweep_kick(model, config);
  const Trajectory traj = simulate(model, eq, sc);
  const DetectionReport det = detect(traj, config.prony, config.t_on);
  if (det.alarmed) cal.alarm_time = det.alarm_time;
  if (traj.end_time < config.t_shed()) {
    cal.reason = "run fails before the shed time";
  } else if (!det.alarmed) {
    cal.reason = "no detector alarm within the verification horizon";
  } else {
    cal.accepted = true;
  }
  return cal;
}

std::vector<AttackCalibration> calibrate_attacks(const GridModel& model, const Equilibrium& eq,
                                                 const std::vector<AttackSpec>& candidates, const SweepConfig& config) {
  std::vector<AttackSpec> order = candidates;
  std::mt19937_64 rng(config.seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<AttackCalibration> out;
  std::size_t accepted = 0, next = 0;
  const std::size_t batch = std::max<unsigned>(1, config.threads);
  while (accepted < config.max_attacks && next < order.size()) {
    const std::size_t n = std::min(batch, order.size() - next);
    std::vector<AttackCalibration> part(n);
    parallel_for(n, config.threads, [&](std::size_t i) {
      part[i] = calibrate_attack(model, eq, order[next + i].read, order[next + i].write, config);
    });
    for (auto& c : part) {
      if (accepted >= config.max_attacks) break;
      if (c.accepted) ++accepted;
      out.push_back(std::move(c));
    }
    next += n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenarios

void to_json(json& j, const ScenarioResult& r) {
  j = {{"id", r.id},
       {"attack", r.attack},
       {"load_index", r.load_index},
       {"load_bus", r.load_bus},
       {"t_shed", r.t_shed},
       {"terminated_early", r.terminated_early},
       {"termination_reason", r.termination_reason},
       {"end_time", r.end_time},
       {"viable", r.viability.viable},
       {"rejection", r.viability.reason},
       {"label", r.label ? label_json(*r.label) : json(nullptr)},
       {"error", r.error}};
}

void from_json(const json& j, ScenarioResult& r) {
  r.id = j.at("id").get<std::string>();
  r.attack = j.at("attack").get<AttackSpec>();
  r.load_index = j.at("load_index").get<std::size_t>();
  r.load_bus = j.at("load_bus").get<int>();
  r.t_shed = j.at("t_shed").get<double>();
  r.terminated_early = j.at("terminated_early").get<bool>();
  r.termination_reason = j.at("termination_reason").get<std::string>();
  r.end_time = j.at("end_time").get<double>();
  r.viability = {j.at("viable").get<bool>(), j.at("rejection").get<std::string>()};
  if (!j.at("label").is_null()) {
    const auto& l = j.at("label");
    r.label = Label{verdict_from_string(l.at("verdict").get<std::string>()),
                    test_from_string(l.at("deciding_test").get<std::string>()),
                    l.at("deciding_channel").get<std::string>()};
  }
  r.error = j.value("error", std::string());
}

std::string scenario_id(const GridModel& model, const AttackSpec& attack, std::size_t load_index) {
  return attack_id(attack) + "__shed_" + std::to_string(model.buses()[model.loads().at(load_index).bus].id);
}

Viability viability_filter(bool terminated_early, double end_time, double t_shed, double min_post) {
  const double post = end_time - t_shed;
  const double slack = 1e-9;
  if (post >= min_post - slack) return {true, ""};
  return {false, terminated_early ? "integrator" : "duration"};
}

Viability viability_filter(const ScenarioResult& r, double min_post) {
  if (!r.error.empty()) return {false, "integrator"};
  return viability_filter(r.terminated_early, r.end_time, r.t_shed, min_post);
}

ScenarioResult run_scenario(const GridModel& model, const Equilibrium& eq, const AttackSpec& attack,
                            std::size_t load_index, const SweepConfig& config, Trajectory* trajectory) {
  ScenarioResult r;
  r.id = scenario_id(model, attack, load_index);
  r.attack = attack;
  r.load_index = load_index;
  r.load_bus = model.buses()[model.loads().at(load_index).bus].id;
  r.t_shed = config.t_shed();

  ScenarioConfig sc;
  sc.t_end = config.t_end();
  sc.dt = config.dt;
  sc.record_rate = config.record_rate;
  sc.attack = attack;
  sc.shed = ShedEvent{r.t_shed, load_index};
  if (config.kick != 0.0) sc.kick = sweep_kick(model, config);
  Trajectory traj;
  try {
    traj = simulate(model, eq, sc);
  } catch (const Error& e) {
    r.error = e.what();
    r.viability = {false, "integrator"};
    return r;
  }
  r.terminated_early = traj.terminated_early;
  r.termination_reason = traj.termination_reason;
  r.end_time = traj.end_time;
  r.viability = viability_filter(r, config.labeler.min_duration);
  if (r.viability.viable) r.label = label(traj.slice(r.t_shed), config.labeler);
  if (trajectory) *trajectory = std::move(traj);
  return r;
}

fs::path scenario_path(const fs::path& sweep_dir, const std::string& id) {
  return sweep_dir / "scenarios" / (id + ".json");
}

fs::path trajectory_stem(const fs::path& sweep_dir, const std::string& id) { return sweep_dir / "trajectories" / id; }

std::vector<ScenarioResult> run_sweep(const GridModel& model, const Equilibrium& eq,
                                      const std::vector<AttackSpec>& attacks, const SweepConfig& config,
                                      const SweepProgress& progress) {
  if (attacks.empty()) throw Error("sweep needs at least one attack");
  std::vector<std::size_t> loads = config.loads;
  if (loads.empty())
    for (std::size_t l = 0; l < model.loads().size(); ++l) loads.push_back(l);
  for (std::size_t l : loads)
    if (l >= model.loads().size()) throw Error("unknown load index " + std::to_string(l));

  struct Task {
    std::size_t attack, load;
  };
  std::vector<Task> tasks;
  for (std::size_t a = 0; a < attacks.size(); ++a)
    for (std::size_t l : loads) tasks.push_back({a, l});

  const bool persist = !config.output_dir.empty();
  std::vector<ScenarioResult> results(tasks.size());
  std::mutex progress_mutex;
  std::size_t done = 0;
  parallel_for(tasks.size(), config.threads, [&](std::size_t i) {
    const auto& task = tasks[i];
    const std::string id = scenario_id(model, attacks[task.attack], task.load);
    const fs::path path = persist ? scenario_path(config.output_dir, id) : fs::path();
    ScenarioResult r;
    if (persist && fs::exists(path)) {
      r = json::parse(read_file(path)).get<ScenarioResult>();
    } else {
      Trajectory traj;
      r = run_scenario(model, eq, attacks[task.attack], task.load, config, &traj);
      if (persist) {
        // Trajectory first: a result file on disk implies its data exists.
        if (r.error.empty()) write_trajectory_binary(trajectory_stem(config.output_dir, id), traj);
        write_file_atomic(path, json(r).dump(2) + "\n");
      }
    }
    results[i] = r;
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(++done, tasks.size(), results[i]);
    }
  });
  return results;
}

std::vector<ScenarioResult> load_sweep_results(const fs::path& sweep_dir) {
  const fs::path dir = sweep_dir / "scenarios";
  if (!fs::is_directory(dir)) throw Error("no scenario results under " + sweep_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ScenarioResult> out;
  for (const auto& f : files) out.push_back(json::parse(read_file(f)).get<ScenarioResult>());
  return out;
}

// ---------------------------------------------------------------------------
// Samples and splits

ShedSample make_sample(const ScenarioResult& result, const Trajectory& traj, double window_s, double record_rate) {
  if (!result.viability.viable || !result.label) throw Error("scenario " + result.id + " is not a viable labeled run");
  const auto T = static_cast<Eigen::Index>(std::lround(window_s * record_rate));
  const Trajectory pre = traj.slice(result.t_shed - window_s, result.t_shed);
  if (static_cast<Eigen::Index>(pre.times.size()) != T)
    throw Error("scenario " + result.id + ": pre-shed window has " + std::to_string(pre.times.size()) +
                " samples, expected " + std::to_string(T));
  ShedSample s;
  s.channels = pre.samples;
  s.load_index = result.load_index;
  s.label = result.label->verdict;
  s.meta = {result.id, result.attack.read, result.attack.write, result.attack.gain};
  return s;
}

std::vector<ShedSample> collect_samples(const fs::path& sweep_dir, std::vector<std::string>& channels,
                                        double window_s, double record_rate) {
  std::vector<ShedSample> out;
  channels.clear();
  for (const auto& r : load_sweep_results(sweep_dir)) {
    if (!r.viability.viable || !r.label) continue;
    const Trajectory traj = read_trajectory_binary(trajectory_stem(sweep_dir, r.id));
    if (channels.empty())
      channels = traj.channels;
    else if (traj.channels != channels)
      throw Error("scenario " + r.id + " records a different channel set");
    out.push_back(make_sample(r, traj, window_s, record_rate));
  }
  return out;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> channel_stats(const std::vector<const ShedSample*>& samples) {
  if (samples.empty()) throw Error("channel statistics need at least one sample");
  const Eigen::Index C = samples.front()->channels.rows();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(C);
  double count = 0.0;
  for (const auto* s : samples) {
    sum += s->channels.rowwise().sum();
    count += static_cast<double>(s->channels.cols());
  }
  const Eigen::VectorXd mean = sum / count;
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(C);
  for (const auto* s : samples) sq += (s->channels.colwise() - mean).array().square().rowwise().sum().matrix();
  Eigen::VectorXd sd = (sq / count).cwiseSqrt();
  for (Eigen::Index c = 0; c < C; ++c)
    if (!(sd[c] > 1e-12 * std::max(1.0, std::abs(mean[c])))) sd[c] = 1.0;
  return {mean, sd};
}

namespace {

json meta_json(const SampleMeta& m, std::size_t load, int label) {
  return {{"id", m.scenario_id},
          {"load_index", load},
          {"label", label == 0 ? "STABLE" : "UNSTABLE"},
          {"read", target_json(m.read)},
          {"write", target_json(m.write)},
          {"gain", m.gain}};
}

void fill_split(SplitData& split, const std::vector<const ShedSample*>& members, const Eigen::VectorXd& mean,
                const Eigen::VectorXd& sd) {
  for (const auto* s : members) {
    split.meta.push_back(s->meta);
    split.load_index.push_back(static_cast<int>(s->load_index));
    split.label.push_back(s->label == Verdict::stable ? 0 : 1);
    const Eigen::MatrixXd z = (s->channels.colwise() - mean).array().colwise() / sd.array();
    for (Eigen::Index c = 0; c < z.rows(); ++c)
      for (Eigen::Index t = 0; t < z.cols(); ++t) split.x.push_back(static_cast<float>(z(c, t)));
  }
}

json split_manifest(const SplitData& s, const std::string& file) {
  json samples = json::array();
  std::size_t stable = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    samples.push_back(meta_json(s.meta[i], static_cast<std::size_t>(s.load_index[i]), s.label[i]));
    stable += s.label[i] == 0;
  }
  return {{"file", file},
          {"count", s.size()},
          {"stable", stable},
          {"unstable", s.size() - stable},
          {"samples", samples}};
}

}  // namespace

Dataset split_and_normalize(const std::vector<ShedSample>& samples, const std::vector<std::string>& channels,
                            std::size_t n_loads, std::uint64_t seed, double record_rate) {
  if (samples.size() < 50) throw Error("dataset needs at least 50 samples, got " + std::to_string(samples.size()));
  const Eigen::Index C = samples.front().channels.rows(), T = samples.front().channels.cols();
  if (static_cast<std::size_t>(C) != channels.size()) throw Error("channel names do not match the samples");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].channels.rows() != C || samples[i].channels.cols() != T)
      throw Error("sample " + samples[i].meta.scenario_id + " has a different shape");
    if (samples[i].load_index >= n_loads) throw Error("sample load index out of range");
    by_class[samples[i].label == Verdict::stable ? 0 : 1].push_back(i);
  }
  if (by_class[0].empty() || by_class[1].empty()) throw Error("dataset is missing a label class entirely");

  std::mt19937_64 rng(seed);
  std::vector<const ShedSample*> parts[3];
  for (auto& cls : by_class) {
    std::shuffle(cls.begin(), cls.end(), rng);
    const auto n = static_cast<double>(cls.size());
    const auto n_train = static_cast<std::size_t>(std::lround(0.6 * n));
    const auto n_val = std::min(cls.size() - n_train, static_cast<std::size_t>(std::lround(0.2 * n)));
    for (std::size_t k = 0; k < cls.size(); ++k)
      parts[k < n_train ? 0 : k < n_train + n_val ? 1 : 2].push_back(&samples[cls[k]]);
  }
  // Keep a canonical order inside each split.
  for (auto& p : parts)
    std::sort(p.begin(), p.end(),
              [](const ShedSample* a, const ShedSample* b) { return a->meta.scenario_id < b->meta.scenario_id; });

  Dataset ds;
  ds.channels = channels;
  ds.C = static_cast<std::size_t>(C);
  ds.T = static_cast<std::size_t>(T);
  ds.L = n_loads;
  ds.seed = seed;
  std::tie(ds.mean, ds.stddev) = channel_stats(parts[0]);
  fill_split(ds.train, parts[0], ds.mean, ds.stddev);
  fill_split(ds.val, parts[1], ds.mean, ds.stddev);
  fill_split(ds.test, parts[2], ds.mean, ds.stddev);

  ds.manifest = {{"format", "gridshed-dataset-1"},
                 {"dtype", "float32"},
                 {"byte_order", "little"},
                 {"layout", "sample, channel, time"},
                 {"channels", channels},
                 {"C", ds.C},
                 {"T", ds.T},
                 {"record_rate", record_rate},
                 {"n_loads", n_loads},
                 {"seed", seed},
                 {"label_encoding", {{"STABLE", 0}, {"UNSTABLE", 1}}},
                 {"normalization",
                  {{"mean", std::vector<double>(ds.mean.data(), ds.mean.data() + C)},
                   {"std", std::vector<double>(ds.stddev.data(), ds.stddev.data() + C)}}},
                 {"splits",
                  {{"train", split_manifest(ds.train, "train.bin")},
                   {"val", split_manifest(ds.val, "val.bin")},
                   {"test", split_manifest(ds.test, "test.bin")}}}};
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  auto put = [&](const SplitData& s, const std::string& name) {
    std::string blob(s.x.size() * sizeof(float), '\0');
    std::memcpy(blob.data(), s.x.data(), blob.size());
    write_file_atomic(dir / name, blob);
  };
  put(ds.train, "train.bin");
  put(ds.val, "val.bin");
  put(ds.test, "test.bin");
  write_file_atomic(dir / "manifest.json", ds.manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  try {
    ds.manifest = json::parse(read_file(dir / "manifest.json"));
    const auto& m = ds.manifest;
    ds.channels = m.at("channels").get<std::vector<std::string>>();
    ds.C = m.at("C").get<std::size_t>();
    ds.T = m.at("T").get<std::size_t>();
    ds.L = m.at("n_loads").get<std::size_t>();
    ds.seed = m.at("seed").get<std::uint64_t>();
    const auto mean = m.at("normalization").at("mean").get<std::vector<double>>();
    const auto sd = m.at("normalization").at("std").get<std::vector<double>>();
    ds.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    ds.stddev = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
    auto get = [&](SplitData& s, const std::string& name) {
      const auto& sm = m.at("splits").at(name);
      for (const auto& e : sm.at("samples")) {
        s.meta.push_back({e.at("id").get<std::string>(), target_from(e.at("read")), target_from(e.at("write")),
                          e.at("gain").get<double>()});
        s.load_index.push_back(e.at("load_index").get<int>());
        s.label.push_back(e.at("label").get<std::string>() == "STABLE" ? 0 : 1);
      }
      const std::string blob = read_file(dir / sm.at("file").get<std::string>());
      if (blob.size() != s.size() * ds.C * ds.T * sizeof(float))
        throw Error("dataset file " + sm.at("file").get<std::string>() + " has the wrong size");
      s.x.resize(s.size() * ds.C * ds.T);
      std::memcpy(s.x.data(), blob.data(), blob.size());
    };
    get(ds.train, "train");
    get(ds.val, "val");
    get(ds.test, "test");
  } catch (const json::exception& e) {
    throw Error(std::string("malformed dataset manifest: ") + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Distribution report

DistributionReport distribution_report(const std::vector<SampleMeta>& meta, const std::vector<int>& load_index,
                                       const std::vector<int>& label, std::size_t n_loads) {
  DistributionReport r;
  r.by_load.resize(n_loads);
  for (std::size_t l = 0; l < n_loads; ++l) r.by_load[l].key = std::to_string(l);
  std::map<Variable, CountRow> reads, writes;
  for (std::size_t i = 0; i < label.size(); ++i) {
    const bool stable = label[i] == 0;
    auto& row = r.by_load.at(static_cast<std::size_t>(load_index[i]));
    row.total++;
    row.stable += stable;
    auto& rr = reads[meta[i].read.var];
    rr.total++;
    rr.stable += stable;
    auto& wr = writes[meta[i].write.var];
    wr.total++;
    wr.stable += stable;
    r.total++;
    r.stable += stable;
  }
  for (auto& [v, row] : reads) {
    row.key = std::string(to_string(v));
    r.by_read_var.push_back(row);
  }
  for (auto& [v, row] : writes) {
    row.key = std::string(to_string(v));
    r.by_write_var.push_back(row);
  }
  return r;
}

DistributionReport distribution_report(const Dataset& ds) {
  std::vector<SampleMeta> meta;
  std::vector<int> load, label;
  for (const SplitData* s : {&ds.train, &ds.val, &ds.test}) {
    meta.insert(meta.end(), s->meta.begin(), s->meta.end());
    load.insert(load.end(), s->load_index.begin(), s->load_index.end());
    label.insert(label.end(), s->label.begin(), s->label.end());
  }
  return distribution_report(meta, load, label, ds.L);
}

std::string format_report(const DistributionReport& r) {
  std::ostringstream out;
  auto table = [&](const char* title, const char* key, const std::vector<CountRow>& rows) {
    out << title << "\n";
    char line[96];
    std::snprintf(line, sizeof line, "%12s %8s %8s %8s\n", key, "stable", "total", "frac");
    out << line;
    for (const auto& row : rows) {
      const double frac = row.total ? static_cast<double>(row.stable) / static_cast<double>(row.total) : 0.0;
      std::snprintf(line, sizeof line, "%12s %8zu %8zu %8.3f\n", row.key.c_str(), row.stable, row.total, frac);
      out << line;
    }
    out << "\n";
  };
  out << "samples " << r.total << ", stable " << r.stable << "\n\n";
  table("Stable sheds per load", "load", r.by_load);
  table("Stable sheds per read variable", "read", r.by_read_var);
  table("Stable sheds per write variable", "write", r.by_write_var);
  return out.str();
}

void write_report(const fs::path& dir, const DistributionReport& r) {
  auto csv = [&](const std::string& name, const std::string& key, const std::vector<CountRow>& rows) {
    std::string text = key + ",stable,total\n";
    for (const auto& row : rows)
      text += row.key + "," + std::to_string(row.stable) + "," + std::to_string(row.total) + "\n";
    write_file_atomic(dir / name, text);
  };
  csv("by_load.csv", "load_index", r.by_load);
  csv("by_read_var.csv", "read_var", r.by_read_var);
  csv("by_write_var.csv", "write_var", r.by_write_var);
  write_file_atomic(dir / "report.txt", format_report(r));
}

}  // namespace gridshed
