// SPDX-License-Identifier: Apache-2.0
#include "gridshed/service.hpp"

#include <cmath>
#include <fstream>
#include <regex>

#include <httplib.h>

#include "gridshed/trajectory_io.hpp"

namespace gridshed {

namespace fs = std::filesystem;
using nlohmann::json;

void ServiceConfig::validate() const {
  if (!(dt > 0) || !(record_rate > 0)) throw Error("dt and record_rate must be positive");
  const double per = 1.0 / (record_rate * dt);
  if (std::abs(per - std::round(per)) > 1e-9) throw Error("record interval must be a whole number of steps");
  if (!(window_s > 0)) throw Error("window_s must be positive");
  if (!(max_step > 0)) throw Error("max_step must be positive");
  if (tau && !(*tau > 0 && *tau <= 1)) throw Error("tau must be in (0, 1]");
  prony.validate();
  labeler.validate();
}

void to_json(json& j, const ServiceConfig& c) {
  j = {{"case", c.case_name},
       {"weights", c.weights ? json(c.weights->string()) : json(nullptr)},
       {"tau", c.tau ? json(*c.tau) : json(nullptr)},
       {"dt", c.dt},
       {"record_rate", c.record_rate},
       {"kick", c.kick},
       {"window_s", c.window_s},
       {"max_step", c.max_step},
       {"prony", c.prony},
       {"labeler", c.labeler},
       {"data_dir", c.data_dir.string()}};
}

void from_json(const json& j, ServiceConfig& c) {
  c.case_name = j.value("case", c.case_name);
  if (j.contains("weights") && !j["weights"].is_null()) c.weights = j["weights"].get<std::string>();
  if (j.contains("tau") && !j["tau"].is_null()) c.tau = j["tau"].get<double>();
  c.dt = j.value("dt", c.dt);
  c.record_rate = j.value("record_rate", c.record_rate);
  c.kick = j.value("kick", c.kick);
  c.window_s = j.value("window_s", c.window_s);
  c.max_step = j.value("max_step", c.max_step);
  if (j.contains("prony")) c.prony = j["prony"].get<PronyConfig>();
  if (j.contains("labeler")) c.labeler = j["labeler"].get<LabelerConfig>();
  if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
}

std::string_view to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::running: return "running";
    case SessionStatus::awaiting_decision: return "awaiting-decision";
    case SessionStatus::finished: return "finished";
  }
  return "?";
}

std::vector<Recommendation> recommend(const ModelBundle& bundle, const Eigen::MatrixXd& window, double tau) {
  const Architecture& a = bundle.params.arch;
  if (window.rows() != static_cast<Eigen::Index>(a.C) || window.cols() != static_cast<Eigen::Index>(a.T))
    throw Error("window shape does not match the classifier input");
  Batch batch;
  batch.x.resize(window.size(), static_cast<Eigen::Index>(a.n_loads));
  for (std::size_t l = 0; l < a.n_loads; ++l) {
    for (Eigen::Index c = 0; c < window.rows(); ++c)
      for (Eigen::Index t = 0; t < window.cols(); ++t) {
        // Round through float like the stored dataset does.
        const float z = static_cast<float>((window(c, t) - bundle.mean[c]) / bundle.stddev[c]);
        batch.x(c * window.cols() + t, static_cast<Eigen::Index>(l)) = z;
      }
    batch.load_index.push_back(static_cast<int>(l));
  }
  const auto probs = forward(bundle.params, batch).probabilities;
  std::vector<Recommendation> out;
  for (std::size_t l = 0; l < a.n_loads; ++l) {
    const double p = probs(1, static_cast<Eigen::Index>(l));
    out.push_back({l, 0, p, predict(p, tau)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// ScenarioSession

namespace {

ScenarioConfig session_scenario(const GridModel& model, const ServiceConfig& config, const json& request,
                                double& t_on) {
  ScenarioConfig sc;
  sc.dt = config.dt;
  sc.record_rate = config.record_rate;
  sc.t_end = 1e9;
  if (!request.is_object()) throw BadRequest("scenario request must be a JSON object");
  if (request.contains("attack") && !request["attack"].is_null()) {
    try {
      sc.attack = request["attack"].get<AttackSpec>();
      BoundAttack probe(model, *sc.attack);  // rejects targets the model does not have
    } catch (const Error& e) {
      throw BadRequest(e.what());
    }
    t_on = sc.attack->t_on;
    if (!(t_on >= 0)) throw BadRequest("attack t_on must be non-negative");
  }
  const json kick = request.value("kick", json(config.kick));
  if (!kick.is_number()) throw BadRequest("kick must be a number");
  const double k = kick.get<double>();
  if (k != 0.0) {
    SpeedKick sk{t_on, {}};
    for (std::size_t g = 0; g < model.generators().size(); ++g) sk.d_omega.push_back(g % 2 ? -k : k);
    sc.kick = sk;
  }
  return sc;
}

}  // namespace

ScenarioSession::ScenarioSession(std::string id, const GridModel& model, const Equilibrium& eq,
                                 const ServiceConfig& config, const json& request)
    : id_(std::move(id)),
      model_(&model),
      config_(&config),
      sim_(model, eq, session_scenario(model, config, request, t_on_)) {
  reference_ = channel_values(model, eq.inputs, eq.state.x);
  channels_ = channel_names(model);
  per_record_ = std::lround(1.0 / (config.record_rate * config.dt));
  alarms_.assign(channels_.size(), AlarmState(config.prony));
  sim_.apply_due_events();
  if (sim_.failed())
    status_ = SessionStatus::finished;
  else
    record();
}

void ScenarioSession::record() {
  const Eigen::VectorXd v = sim_.channels();
  const double t = static_cast<double>(sim_.step_index() / per_record_) / config_->record_rate;
  times_.push_back(t);
  records_.push_back(v);
  if (t >= t_on_ - 1e-9)
    for (std::size_t c = 0; c < alarms_.size(); ++c) {
      alarms_[c].update(t, v[static_cast<Eigen::Index>(c)]);
      if (!alarm_time_ && alarms_[c].alarmed()) alarm_time_ = alarms_[c].alarm_time();
    }
}

void ScenarioSession::advance_record() {
  for (long i = 0; i < per_record_; ++i) {
    if (!sim_.step()) return;
    sim_.apply_due_events();
    if (sim_.failed()) return;
  }
  record();
}

void ScenarioSession::update_status() {
  if (sim_.failed()) {
    status_ = SessionStatus::finished;
  } else if (shed_time_) {
    if (time() >= *shed_time_ + config_->labeler.min_duration - 1e-9) status_ = SessionStatus::finished;
  } else if (alarm_time_) {
    status_ = SessionStatus::awaiting_decision;
  }
}

json ScenarioSession::step(double seconds) {
  if (!std::isfinite(seconds) || seconds <= 0) throw BadRequest("seconds must be a positive number");
  if (seconds > config_->max_step) throw BadRequest("seconds exceeds the per-request limit");
  if (status_ == SessionStatus::finished) throw Conflict("session is finished");
  const long n = std::max(1L, std::lround(seconds * config_->record_rate));
  std::string stopped = "completed";
  for (long i = 0; i < n; ++i) {
    const SessionStatus before = status_;
    advance_record();
    update_status();
    if (sim_.failed()) {
      stopped = "integrator";
      break;
    }
    if (status_ != before) {
      stopped = status_ == SessionStatus::finished ? "horizon" : "alarm";
      break;
    }
  }
  json out = summary();
  out["stopped"] = stopped;
  return out;
}

json ScenarioSession::shed(std::size_t load_index) {
  if (status_ != SessionStatus::awaiting_decision)
    throw Conflict("shed decisions are accepted only while awaiting-decision (status is " +
                   std::string(to_string(status_)) + ")");
  if (load_index >= model_->loads().size()) throw BadRequest("unknown load index " + std::to_string(load_index));
  sim_.apply_shed(load_index);
  shed_time_ = time();
  shed_load_ = load_index;
  status_ = SessionStatus::running;
  update_status();
  return summary();
}

json ScenarioSession::events_json() const { return events_to_json(sim_.events()); }

json ScenarioSession::summary() const {
  json j = {{"id", id_},
            {"status", to_string(status_)},
            {"sim_time", time()},
            {"alarm_time", alarm_time_ ? json(*alarm_time_) : json(nullptr)},
            {"events", events_json()}};
  if (shed_load_)
    j["shed"] = {{"load_index", *shed_load_},
                 {"load_bus", model_->buses()[model_->loads()[*shed_load_].bus].id},
                 {"t", *shed_time_}};
  else
    j["shed"] = nullptr;
  if (sim_.failed()) j["failure"] = sim_.failure_reason();
  return j;
}

Trajectory ScenarioSession::trajectory() const {
  Trajectory tr;
  tr.channels = channels_;
  tr.times = times_;
  tr.reference = reference_;
  tr.samples.resize(static_cast<Eigen::Index>(channels_.size()), static_cast<Eigen::Index>(records_.size()));
  for (std::size_t j = 0; j < records_.size(); ++j) tr.samples.col(static_cast<Eigen::Index>(j)) = records_[j];
  tr.events = sim_.events();
  tr.terminated_early = sim_.failed();
  tr.termination_reason = sim_.failure_reason();
  tr.end_time = time();
  return tr;
}

json ScenarioSession::state(double from) const {
  json samples = json::object();
  std::size_t first = 0;
  while (first < times_.size() && times_[first] < from - 1e-9) ++first;
  json times = json::array();
  for (std::size_t j = first; j < times_.size(); ++j) times.push_back(times_[j]);
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    json col = json::array();
    for (std::size_t j = first; j < records_.size(); ++j) col.push_back(records_[j][static_cast<Eigen::Index>(c)]);
    samples[channels_[c]] = std::move(col);
  }
  json j = summary();
  j["from"] = from;
  j["channels"] = channels_;
  j["times"] = std::move(times);
  j["samples"] = std::move(samples);
  return j;
}

json ScenarioSession::alarm() const {
  DetectionReport r;
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    const auto& a = alarms_[c];
    r.channels[channels_[c]] = {a.alarmed(), a.alarm_time(), a.modes_at_alarm()};
  }
  r.alarmed = alarm_time_.has_value();
  r.alarm_time = alarm_time_;
  return {{"id", id_},
          {"sim_time", time()},
          {"status", to_string(status_)},
          {"alarmed", r.alarmed},
          {"alarm_time", alarm_time_ ? json(*alarm_time_) : json(nullptr)},
          {"channels", to_json(r)["channels"]}};
}

Eigen::MatrixXd ScenarioSession::window() const {
  const auto T = static_cast<std::size_t>(std::lround(config_->window_s * config_->record_rate));
  // The current sample is excluded, matching the pre-shed training window.
  if (records_.size() < T + 1)
    throw Conflict("recommendations need " + std::to_string(config_->window_s) + " s of recorded data");
  Eigen::MatrixXd w(static_cast<Eigen::Index>(channels_.size()), static_cast<Eigen::Index>(T));
  const std::size_t start = records_.size() - 1 - T;
  for (std::size_t j = 0; j < T; ++j) w.col(static_cast<Eigen::Index>(j)) = records_[start + j];
  return w;
}

json ScenarioSession::recommendations(const ModelBundle& bundle, double tau) {
  if (recommendation_cache_ && recommendation_time_ == time()) return *recommendation_cache_;
  if (bundle.channels != channels_) throw Conflict("classifier channels do not match the session's model");
  auto recs = recommend(bundle, window(), tau);
  json out = json::array();
  for (auto& r : recs) {
    r.load_bus = model_->buses()[model_->loads()[r.load_index].bus].id;
    out.push_back({{"load_index", r.load_index},
                   {"load_bus", r.load_bus},
                   {"p_unstable", r.p_unstable},
                   {"label_at_tau", to_string(r.label)},
                   {"tau", tau},
                   {"sim_time", time()}});
  }
  recommendation_cache_ = out;
  recommendation_time_ = time();
  return out;
}

json ScenarioSession::outcome() const {
  if (status_ != SessionStatus::finished)
    throw Conflict("outcome is available once the session is finished (status is " +
                   std::string(to_string(status_)) + ")");
  json j = summary();
  if (!shed_time_) {
    j.update({{"viable", false}, {"reason", "integrator"}, {"verdict", nullptr}});
    return j;
  }
  const Trajectory post = trajectory().slice(*shed_time_);
  if (sim_.failed() || post.times.empty() || post.times.back() - *shed_time_ < config_->labeler.min_duration - 1e-9) {
    j.update({{"viable", false}, {"reason", "integrator"}, {"verdict", nullptr}});
    return j;
  }
  const Label l = label(post, config_->labeler);
  j.update({{"viable", true},
            {"reason", ""},
            {"verdict", to_string(l.verdict)},
            {"deciding_test", to_string(l.deciding_test)},
            {"deciding_channel", l.deciding_channel}});
  return j;
}

// ---------------------------------------------------------------------------
// Service

Service::Service(ServiceConfig config)
    : config_(std::move(config)), model_(load_case_file(config_.case_name)), eq_(find_equilibrium(model_)) {
  config_.validate();
  if (config_.weights) {
    bundle_ = load_weights(*config_.weights);
    if (bundle_->channels != channel_names(model_))
      throw Error("weights were trained on a different channel set than the served case");
  }
  replay();
}

double Service::tau() const {
  if (config_.tau) return *config_.tau;
  return bundle_ ? bundle_->tau : 0.5;
}

std::size_t Service::session_count() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

std::shared_ptr<ScenarioSession> Service::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

std::shared_ptr<ScenarioSession> Service::create(const json& request, const std::string& id, bool persist) {
  auto s = std::make_shared<ScenarioSession>(id, model_, eq_, config_, request);
  std::lock_guard lock(mutex_);
  sessions_[id] = s;
  if (persist && !config_.data_dir.empty()) {
    fs::create_directories(config_.data_dir / "sessions" / id);
    log_action(id, {{"op", "create"}, {"request", request}});
  }
  return s;
}

void Service::log_action(const std::string& id, const json& action) const {
  if (config_.data_dir.empty()) return;
  std::ofstream out(config_.data_dir / "sessions" / id / "actions.jsonl", std::ios::app);
  out << action.dump() << '\n';
  out.flush();
  if (!out) throw Error("cannot persist session " + id);
}

void Service::replay() {
  if (config_.data_dir.empty()) return;
  const fs::path root = config_.data_dir / "sessions";
  if (!fs::is_directory(root)) return;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    const std::string id = d.filename().string();
    std::ifstream in(d / "actions.jsonl");
    std::string line;
    std::shared_ptr<ScenarioSession> s;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json a = json::parse(line);
      const std::string op = a.at("op");
      if (op == "create")
        s = create(a.at("request"), id, false);
      else if (op == "step" && s)
        s->step(a.at("seconds").get<double>());
      else if (op == "shed" && s)
        s->shed(a.at("load_index").get<std::size_t>());
      else
        throw Error("corrupt action log for session " + id);
    }
    if (id.size() > 1 && id[0] == 's') next_id_ = std::max(next_id_, std::stol(id.substr(1)) + 1);
  }
}

namespace {

json error_body(const std::string& message) { return {{"error", message}}; }

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    throw BadRequest(std::string("malformed JSON body: ") + e.what());
  }
}

}  // namespace

Reply Service::handle(const std::string& method, const std::string& path,
                      const std::map<std::string, std::string>& query, const std::string& body) {
  static const std::regex session_re(R"(^/scenario/([A-Za-z0-9_-]+)(/([a-z]+))?$)");
  try {
    if (path == "/scenario" && method == "POST") {
      const json req = parse_body(body);
      std::string id;
      {
        std::lock_guard lock(mutex_);
        char buf[32];
        std::snprintf(buf, sizeof buf, "s%06ld", next_id_++);
        id = buf;
      }
      auto s = create(req, id, true);
      std::lock_guard lock(s->mutex());
      return {201, s->summary()};
    }
    if (path == "/scenario" && method == "GET") {
      json list = json::array();
      std::vector<std::shared_ptr<ScenarioSession>> all;
      {
        std::lock_guard lock(mutex_);
        for (const auto& [id, s] : sessions_) all.push_back(s);
      }
      for (const auto& s : all) {
        std::lock_guard lock(s->mutex());
        list.push_back(s->summary());
      }
      return {200, list};
    }
    std::smatch m;
    if (!std::regex_match(path, m, session_re)) return {404, error_body("no such endpoint")};
    auto s = find(m[1]);
    if (!s) return {404, error_body("unknown session " + m[1].str())};
    const std::string action = m[3];
    std::lock_guard lock(s->mutex());
    if (method == "GET") {
      if (action.empty()) return {200, s->summary()};
      if (action == "state") {
        double from = 0.0;
        if (auto it = query.find("from"); it != query.end()) {
          try {
            std::size_t used = 0;
            from = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing text");
          } catch (const std::exception&) {
            throw BadRequest("from must be a number");
          }
        }
        return {200, s->state(from)};
      }
      if (action == "alarm") return {200, s->alarm()};
      if (action == "recommendations") {
        if (!bundle_) return {503, error_body("service was started without classifier weights")};
        return {200, s->recommendations(*bundle_, tau())};
      }
      if (action == "outcome") return {200, s->outcome()};
    } else if (method == "POST") {
      if (action == "step") {
        const json req = parse_body(body);
        if (!req.is_object() || !req.contains("seconds") || !req["seconds"].is_number())
          throw BadRequest("step needs {\"seconds\": number}");
        const double seconds = req["seconds"].get<double>();
        json out = s->step(seconds);
        log_action(s->id(), {{"op", "step"}, {"seconds", seconds}});
        return {200, out};
      }
      if (action == "shed") {
        const json req = parse_body(body);
        if (!req.is_object() || !req.contains("load_index") || !req["load_index"].is_number_integer() ||
            req["load_index"].get<long>() < 0)
          throw BadRequest("shed needs {\"load_index\": non-negative integer}");
        const auto l = req["load_index"].get<std::size_t>();
        json out = s->shed(l);
        log_action(s->id(), {{"op", "shed"}, {"load_index", l}});
        return {200, out};
      }
    }
    return {404, error_body("no such endpoint")};
  } catch (const BadRequest& e) {
    return {400, error_body(e.what())};
  } catch (const Conflict& e) {
    return {409, error_body(e.what())};
  } catch (const Error& e) {
    return {500, error_body(e.what())};
  }
}

void Service::bind(httplib::Server& server) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const Reply r = handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  const std::string pattern = R"(/scenario(/.*)?)";
  server.Get(pattern, route);
  server.Post(pattern, route);
  server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"ok", true}, {"sessions", session_count()}, {"tau", tau()}, {"classifier", bundle_.has_value()}}
                        .dump(),
                    "application/json");
  });
}

}  // namespace gridshed
