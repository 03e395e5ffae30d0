// SPDX-License-Identifier: Apache-2.0
// Command-line entry point for every pipeline stage.

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gridshed/classifier.hpp"
#include "gridshed/dataset.hpp"
#include "gridshed/labeler.hpp"
#include "gridshed/mpa.hpp"
#include "gridshed/service.hpp"
#include "gridshed/trajectory_io.hpp"

// After Eigen: resolv.h, pulled in here, defines a `_res` macro.
#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gridshed;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

// Values from the --config file fill every option the command line left unset.
void merge_config(CLI::App* app, const json& config) {
  for (CLI::Option* opt : app->get_options()) {
    if (opt->count() > 0 || opt->get_lnames().empty()) continue;
    std::string key = opt->get_lnames().front();
    if (key == "config" || key == "help") continue;
    std::replace(key.begin(), key.end(), '-', '_');
    const json* v = nullptr;
    if (config.contains(key))
      v = &config[key];
    else if (config.contains(opt->get_lnames().front()))
      v = &config[opt->get_lnames().front()];
    if (!v || v->is_null() || v->is_object()) continue;
    auto as_text = [](const json& x) { return x.is_string() ? x.get<std::string>() : x.dump(); };
    if (v->is_array())
      for (const auto& x : *v) opt->add_result(as_text(x));
    else
      opt->add_result(as_text(*v));
    opt->run_callback();
  }
}

std::pair<int, double> parse_shed(const std::string& text) {
  const auto at = text.find('@');
  if (at == std::string::npos) throw UsageError("--shed expects BUS@TIME, got " + text);
  try {
    std::size_t used = 0;
    const int bus = std::stoi(text.substr(0, at), &used);
    if (used != at) throw std::invalid_argument("bus");
    const std::string ts = text.substr(at + 1);
    const double t = std::stod(ts, &used);
    if (used != ts.size()) throw std::invalid_argument("time");
    return {bus, t};
  } catch (const std::logic_error&) {
    throw UsageError("--shed expects BUS@TIME, got " + text);
  }
}

std::size_t load_index_for_bus(const GridModel& model, int bus) {
  for (std::size_t l = 0; l < model.loads().size(); ++l)
    if (model.buses()[model.loads()[l].bus].id == bus) return l;
  throw Error("bus " + std::to_string(bus) + " carries no load");
}

std::optional<double> event_time(const Trajectory& traj, const std::string& name) {
  for (const auto& e : traj.events)
    if (e.name == name) return e.t;
  return std::nullopt;
}

// --------------------------------------------------------------------------

struct SimulateArgs {
  std::string case_name = "ieee14";
  std::string attack;
  std::string shed;
  std::string out;
  double t_end = 210.0;
  double dt = 0.01;
  double record_rate = 20.0;
  double kick = 0.0;
};

int run_simulate(const SimulateArgs& a) {
  const GridModel model = load_case_file(a.case_name);
  ScenarioConfig sc;
  sc.t_end = a.t_end;
  sc.dt = a.dt;
  sc.record_rate = a.record_rate;
  if (!a.attack.empty()) sc.attack = read_json_file(a.attack).get<AttackSpec>();
  if (!a.shed.empty()) {
    const auto [bus, t] = parse_shed(a.shed);
    sc.shed = ShedEvent{t, load_index_for_bus(model, bus)};
  }
  if (a.kick != 0.0) {
    SpeedKick k{sc.attack ? sc.attack->t_on : 0.0, {}};
    for (std::size_t g = 0; g < model.generators().size(); ++g) k.d_omega.push_back(g % 2 ? -a.kick : a.kick);
    sc.kick = k;
  }
  sc.validate();
  const Trajectory traj = simulate(model, sc);
  write_trajectory_csv(a.out, traj);
  print_json({{"out", a.out},
              {"samples", traj.times.size()},
              {"end_time", traj.end_time},
              {"terminated_early", traj.terminated_early},
              {"termination_reason", traj.termination_reason},
              {"events", events_to_json(traj.events)}});
  return 0;
}

struct DetectArgs {
  std::string in, out;
  std::optional<double> from, to;
};

int run_detect(const DetectArgs& a, const json& config) {
  const Trajectory traj = read_trajectory_csv(a.in);
  PronyConfig prony = config.contains("prony") ? config["prony"].get<PronyConfig>() : PronyConfig{};
  const double t0 = a.from.value_or(event_time(traj, "attack_on").value_or(-1e300));
  const json report = to_json(detect(traj, prony, t0, a.to.value_or(1e300)));
  if (!a.out.empty())
    write_file_atomic(a.out, report.dump(2) + "\n");
  else
    print_json(report);
  return 0;
}

struct LabelArgs {
  std::string in;
  std::optional<double> t_shed;
};

int run_label(const LabelArgs& a, const json& config) {
  const Trajectory traj = read_trajectory_csv(a.in);
  const LabelerConfig lc = config.contains("labeler") ? config["labeler"].get<LabelerConfig>() : LabelerConfig{};
  const auto t_shed = a.t_shed ? a.t_shed : event_time(traj, "shed");
  if (!t_shed) throw Error("trajectory has no shed event; pass --t-shed");
  const Label l = label(traj.slice(*t_shed), lc);
  print_json({{"verdict", to_string(l.verdict)},
              {"deciding_test", to_string(l.deciding_test)},
              {"deciding_channel", l.deciding_channel}});
  return 0;
}

struct SweepArgs {
  std::string case_name = "ieee14";
  std::string out;
  std::string attacks;
  std::optional<unsigned> threads;
  std::optional<std::size_t> max_attacks;
  std::optional<std::uint64_t> seed;
  std::vector<int> load_buses;
};

int run_sweep_cmd(const SweepArgs& a, const json& config) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const GridModel model = load_case_file(a.case_name);
  const Equilibrium eq = find_equilibrium(model);
  SweepConfig sc = config.get<SweepConfig>();
  if (!a.out.empty()) sc.output_dir = a.out;
  if (sc.output_dir.empty()) throw UsageError("sweep needs --out");
  if (a.threads) sc.threads = *a.threads;
  if (a.max_attacks) sc.max_attacks = *a.max_attacks;
  if (a.seed) sc.seed = *a.seed;
  if (!a.load_buses.empty()) {
    sc.loads.clear();
    for (int b : a.load_buses) sc.loads.push_back(load_index_for_bus(model, b));
  }
  sc.validate();
  fs::create_directories(sc.output_dir);
  json stored = sc;
  stored["case"] = a.case_name;
  write_file_atomic(sc.output_dir / "config.json", stored.dump(2) + "\n");

  std::vector<AttackSpec> attacks;
  const fs::path attacks_file = sc.output_dir / "attacks.json";
  if (!a.attacks.empty()) {
    attacks = read_json_file(a.attacks).get<std::vector<AttackSpec>>();
  } else if (fs::exists(attacks_file)) {
    attacks = read_json_file(attacks_file).get<std::vector<AttackSpec>>();
    std::cerr << "reusing " << attacks.size() << " calibrated attacks from " << attacks_file << "\n";
  } else {
    const auto candidates = enumerate_attacks(model, sc.read_vars, sc.write_vars);
    const auto cal = calibrate_attacks(model, eq, candidates, sc);
    for (const auto& c : cal)
      if (c.accepted) attacks.push_back(c.spec);
    write_file_atomic(sc.output_dir / "calibration.json", json(cal).dump(2) + "\n");
    std::cerr << "calibrated " << cal.size() << " candidates, accepted " << attacks.size() << "\n";
  }
  write_file_atomic(attacks_file, json(attacks).dump(2) + "\n");

  const auto results = run_sweep(model, eq, attacks, sc, [](std::size_t done, std::size_t total, const ScenarioResult&) {
    if (done % 25 == 0 || done == total) std::cerr << "scenarios " << done << "/" << total << "\n";
  });
  std::size_t viable = 0, stable = 0, integrator = 0, duration = 0;
  for (const auto& r : results) {
    if (r.viability.viable) {
      ++viable;
      stable += r.label && r.label->verdict == Verdict::stable;
    } else if (r.viability.reason == "duration") {
      ++duration;
    } else {
      ++integrator;
    }
  }
  const json summary = {{"attacks", attacks.size()},
                        {"scenarios", results.size()},
                        {"viable", viable},
                        {"stable", stable},
                        {"unstable", viable - stable},
                        {"rejected_integrator", integrator},
                        {"rejected_duration", duration},
                        {"seconds", std::chrono::duration<double>(clock::now() - start).count()}};
  write_file_atomic(sc.output_dir / "summary.json", summary.dump(2) + "\n");
  print_json(summary);
  return 0;
}

struct DatasetArgs {
  std::string sweep, out;
  std::uint64_t seed = 11;
  double window = 10.0;
  double record_rate = 20.0;
};

int run_build_dataset(const DatasetArgs& a) {
  std::vector<std::string> channels;
  const auto samples = collect_samples(a.sweep, channels, a.window, a.record_rate);
  std::size_t n_loads = 0;
  const fs::path cfg = fs::path(a.sweep) / "config.json";
  const json sweep_cfg = fs::exists(cfg) ? read_json_file(cfg) : json::object();
  // Load count comes from the case the sweep ran on.
  n_loads = load_case_file(sweep_cfg.value("case", std::string("ieee14"))).loads().size();
  const Dataset ds = split_and_normalize(samples, channels, n_loads, a.seed, a.record_rate);
  write_dataset(a.out, ds);
  print_json(ds.manifest);
  return 0;
}

struct ReportArgs {
  std::string dataset, out;
};

int run_report(const ReportArgs& a) {
  const Dataset ds = load_dataset(a.dataset);
  const auto r = distribution_report(ds);
  if (!a.out.empty()) write_report(a.out, r);
  std::cout << format_report(r);
  return 0;
}

void emit_report(const EvalReport& r, const std::string& format, const std::string& json_path) {
  if (!json_path.empty()) write_file_atomic(json_path, to_json(r).dump(2) + "\n");
  if (format == "json")
    print_json(to_json(r));
  else
    std::cout << format_report(r);
}

struct TrainArgs {
  std::string dataset, out, format = "text", report;
  std::optional<std::size_t> epochs, batch_size, patience;
  std::optional<double> lr, tau;
  std::optional<std::uint64_t> seed;
  double target_precision = 0.95;
};

int run_train(const TrainArgs& a, const json& config) {
  const Dataset ds = load_dataset(a.dataset);
  Architecture arch = config.contains("architecture") ? config["architecture"].get<Architecture>() : Architecture{};
  arch.C = ds.C;
  arch.T = ds.T;
  arch.n_loads = ds.L;
  TrainConfig tc = config.contains("train") ? config["train"].get<TrainConfig>() : TrainConfig{};
  if (a.epochs) tc.max_epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.patience) tc.patience = *a.patience;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.seed) tc.seed = *a.seed;
  const TrainResult tr = train(ds.train, ds.val, arch, tc, [](const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss
              << " val_macro_f1 " << e.val_macro_f1 << "\n";
  });
  const ThresholdSweep sweep = sweep_threshold(tr.params, ds.val, a.target_precision, default_tau_grid());
  double tau = 0.5;
  if (a.tau)
    tau = *a.tau;
  else if (sweep.tau)
    tau = *sweep.tau;
  else
    std::cerr << "no tau reaches stable precision " << a.target_precision << " on validation; using 0.5\n";
  const EvalReport test = evaluate(tr.params, ds.test, tau);

  ModelBundle bundle{tr.params, ds.channels, ds.mean, ds.stddev, tau, json::object()};
  json history = json::array();
  for (const auto& e : tr.history)
    history.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss},
                       {"val_macro_f1", e.val_macro_f1},
                       {"val_accuracy", e.val_accuracy}});
  bundle.extra = {{"train_config", tc},
                  {"best_epoch", tr.best_epoch},
                  {"history", history},
                  {"threshold_sweep", to_json(sweep)},
                  {"test_report", to_json(test)}};
  save_weights(a.out, bundle);
  emit_report(test, a.format, a.report);
  return 0;
}

struct EvalArgs {
  std::string weights, dataset, split = "test", format = "text", report;
  std::optional<double> tau;
};

int run_eval(const EvalArgs& a) {
  const ModelBundle bundle = load_weights(a.weights);
  const Dataset ds = load_dataset(a.dataset);
  if (ds.channels != bundle.channels) throw Error("dataset channels do not match the weights");
  const SplitData& split = a.split == "train" ? ds.train : a.split == "val" ? ds.val : ds.test;
  emit_report(evaluate(bundle.params, split, a.tau.value_or(bundle.tau)), a.format, a.report);
  return 0;
}

struct ServeArgs {
  std::string case_name = "ieee14", weights, host = "127.0.0.1", static_dir;
  int port = 8080;
  std::optional<double> tau;
};

httplib::Server* g_server = nullptr;

int run_serve(const ServeArgs& a, const json& config) {
  ServiceConfig sc = config.get<ServiceConfig>();
  sc.case_name = a.case_name;
  if (!a.weights.empty()) sc.weights = a.weights;
  if (a.tau) sc.tau = a.tau;
  if (const char* dir = std::getenv("GRIDSHED_DATA_DIR"); dir && *dir) sc.data_dir = dir;
  Service service(sc);
  httplib::Server server;
  service.bind(server);
  if (!a.static_dir.empty() && !server.set_mount_point("/", a.static_dir))
    throw Error("static directory not found: " + a.static_dir);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::cerr << "serving on http://" << a.host << ":" << a.port << " (tau " << service.tau() << ", "
            << service.session_count() << " sessions restored)\n";
  if (!server.listen(a.host, a.port)) throw Error("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attack, detection, load-shedding simulation and classification pipeline"};
  app.require_subcommand(1);
  std::string config_path;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file; explicit flags take precedence");
  };

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "Integrate one scenario and write a trajectory CSV");
  s_sim->add_option("--case", sim.case_name, "Case file or builtin name");
  s_sim->add_option("--attack", sim.attack, "AttackSpec JSON file");
  s_sim->add_option("--shed", sim.shed, "Shed the load at BUS at time T, as BUS@T");
  s_sim->add_option("--out", sim.out, "Trajectory CSV path");
  s_sim->add_option("--t-end", sim.t_end);
  s_sim->add_option("--dt", sim.dt);
  s_sim->add_option("--record-rate", sim.record_rate);
  s_sim->add_option("--kick", sim.kick, "Alternating rotor speed offset at attack onset");
  add_config(s_sim);

  DetectArgs det;
  auto* s_det = app.add_subcommand("detect", "Run the sliding-window mode detector over a trajectory CSV");
  s_det->add_option("--in", det.in);
  s_det->add_option("--out", det.out);
  s_det->add_option("--from", det.from, "Start time (defaults to attack onset)");
  s_det->add_option("--to", det.to);
  add_config(s_det);

  LabelArgs lab;
  auto* s_lab = app.add_subcommand("label", "Label the post-shed part of a trajectory CSV");
  s_lab->add_option("--in", lab.in);
  s_lab->add_option("--t-shed", lab.t_shed, "Shed time (defaults to the recorded shed event)");
  add_config(s_lab);

  SweepArgs sw;
  auto* s_sw = app.add_subcommand("sweep", "Calibrate attacks and run every attack x load scenario");
  s_sw->add_option("--case", sw.case_name);
  s_sw->add_option("--out", sw.out, "Output directory");
  s_sw->add_option("--attacks", sw.attacks, "JSON list of AttackSpecs to use instead of calibrating");
  s_sw->add_option("--threads", sw.threads);
  s_sw->add_option("--max-attacks", sw.max_attacks);
  s_sw->add_option("--seed", sw.seed);
  s_sw->add_option("--load-buses", sw.load_buses, "Only shed loads at these buses");
  add_config(s_sw);

  DatasetArgs dsa;
  auto* s_ds = app.add_subcommand("build-dataset", "Turn a sweep directory into a split, normalized dataset");
  s_ds->add_option("--sweep", dsa.sweep);
  s_ds->add_option("--out", dsa.out);
  s_ds->add_option("--seed", dsa.seed);
  s_ds->add_option("--window", dsa.window, "Pre-shed window length in seconds");
  s_ds->add_option("--record-rate", dsa.record_rate);
  add_config(s_ds);

  ReportArgs rep;
  auto* s_rep = app.add_subcommand("report", "Label distribution of a dataset");
  s_rep->add_option("--dataset", rep.dataset);
  s_rep->add_option("--out", rep.out, "Directory for the CSV tables");
  add_config(s_rep);

  TrainArgs tra;
  auto* s_tr = app.add_subcommand("train", "Train the classifier, pick tau on validation, report on test");
  s_tr->add_option("--dataset", tra.dataset);
  s_tr->add_option("--out", tra.out, "Weights path; the manifest goes to <out>.json");
  s_tr->add_option("--epochs", tra.epochs);
  s_tr->add_option("--batch-size", tra.batch_size);
  s_tr->add_option("--patience", tra.patience);
  s_tr->add_option("--lr", tra.lr);
  s_tr->add_option("--seed", tra.seed);
  s_tr->add_option("--tau", tra.tau, "Fixed threshold instead of the validation sweep");
  s_tr->add_option("--target-precision", tra.target_precision, "Stable precision the tau sweep aims for");
  s_tr->add_option("--format", tra.format)->check(CLI::IsMember({"text", "json"}));
  s_tr->add_option("--report", tra.report, "Also write the report JSON here");
  add_config(s_tr);

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "Evaluate saved weights on a dataset split");
  s_ev->add_option("--weights", ev.weights);
  s_ev->add_option("--dataset", ev.dataset);
  s_ev->add_option("--tau", ev.tau, "Threshold (defaults to the one stored with the weights)");
  s_ev->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));
  s_ev->add_option("--format", ev.format)->check(CLI::IsMember({"text", "json"}));
  s_ev->add_option("--report", ev.report, "Also write the report JSON here");
  add_config(s_ev);

  ServeArgs srv;
  auto* s_srv = app.add_subcommand("serve", "HTTP service for live scenarios");
  s_srv->add_option("--port", srv.port);
  s_srv->add_option("--host", srv.host);
  s_srv->add_option("--case", srv.case_name);
  s_srv->add_option("--weights", srv.weights);
  s_srv->add_option("--tau", srv.tau);
  s_srv->add_option("--static", srv.static_dir, "Directory of console assets served at /");
  add_config(s_srv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    json config = json::object();
    CLI::App* sub = app.get_subcommands().front();
    if (!config_path.empty()) {
      config = read_json_file(config_path);
      if (!config.is_object()) throw UsageError("--config must hold a JSON object");
      merge_config(sub, config);
    }
    auto require = [&](const std::string& value, const char* flag) {
      if (value.empty()) throw UsageError(sub->get_name() + " needs " + flag);
    };
    const std::string name = sub->get_name();
    if (name == "simulate") {
      require(sim.out, "--out");
      return run_simulate(sim);
    }
    if (name == "detect") {
      require(det.in, "--in");
      return run_detect(det, config);
    }
    if (name == "label") {
      require(lab.in, "--in");
      return run_label(lab, config);
    }
    if (name == "sweep") return run_sweep_cmd(sw, config);
    if (name == "build-dataset") {
      require(dsa.sweep, "--sweep");
      require(dsa.out, "--out");
      return run_build_dataset(dsa);
    }
    if (name == "report") {
      require(rep.dataset, "--dataset");
      return run_report(rep);
    }
    if (name == "train") {
      require(tra.dataset, "--dataset");
      require(tra.out, "--out");
      return run_train(tra, config);
    }
    if (name == "eval") {
      require(ev.weights, "--weights");
      require(ev.dataset, "--dataset");
      return run_eval(ev);
    }
    if (name == "serve") return run_serve(srv, config);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
