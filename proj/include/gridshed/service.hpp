// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridshed/classifier.hpp"
#include "gridshed/dae_sim.hpp"
#include "gridshed/labeler.hpp"
#include "gridshed/mpa.hpp"

namespace httplib {
class Server;
}

namespace gridshed {

/// Request could not be parsed or names something that does not exist in
/// the model. Maps to HTTP 400.
class BadRequest : public Error {
 public:
  using Error::Error;
};

/// Request is valid but not allowed in the session's current status. Maps
/// to HTTP 409.
class Conflict : public Error {
 public:
  using Error::Error;
};

struct ServiceConfig {
  std::string case_name = "ieee14";
  std::optional<std::filesystem::path> weights;
  std::optional<double> tau;  // overrides the tau stored with the weights
  double dt = 0.01;
  double record_rate = 20.0;
  double kick = 1e-4;
  double window_s = 10.0;
  double max_step = 600.0;  // seconds per step request
  PronyConfig prony;
  LabelerConfig labeler;
  std::filesystem::path data_dir;  // empty disables persistence

  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

enum class SessionStatus { running, awaiting_decision, finished };
std::string_view to_string(SessionStatus s);

struct Recommendation {
  std::size_t load_index = 0;
  int load_bus = 0;
  double p_unstable = 0.0;
  Verdict label = Verdict::stable;
};

/// Classifier output for shedding each load after the given raw window
/// (channels x time, in the bundle's channel order).
std::vector<Recommendation> recommend(const ModelBundle& bundle, const Eigen::MatrixXd& window, double tau);

/// One live scenario. Time only moves on step(); the alarm fires the first
/// time any channel's detector alarms and puts the session in
/// awaiting-decision until a load is shed.
class ScenarioSession {
 public:
  /// `request` holds {"attack": AttackSpec?, "kick": number?}.
  ScenarioSession(std::string id, const GridModel& model, const Equilibrium& eq, const ServiceConfig& config,
                  const nlohmann::json& request);

  const std::string& id() const { return id_; }
  SessionStatus status() const { return status_; }
  double time() const { return sim_.time(); }
  std::mutex& mutex() { return mutex_; }

  /// Advances by whole record intervals. Stops early when the alarm first
  /// fires, when the post-shed horizon is reached, or on integrator failure.
  nlohmann::json step(double seconds);
  nlohmann::json shed(std::size_t load_index);

  nlohmann::json summary() const;
  nlohmann::json state(double from) const;
  nlohmann::json alarm() const;
  nlohmann::json recommendations(const ModelBundle& bundle, double tau);
  nlohmann::json outcome() const;

  /// Recorded channels so far.
  Trajectory trajectory() const;
  /// Last window_s seconds before the current time (exclusive).
  Eigen::MatrixXd window() const;

 private:
  void record();
  void advance_record();
  void update_status();
  nlohmann::json events_json() const;

  std::string id_;
  const GridModel* model_;
  const ServiceConfig* config_;
  double t_on_ = 0.0;  // set while sim_ is constructed, so declared before it
  Simulator sim_;
  Eigen::VectorXd reference_;
  std::vector<std::string> channels_;
  long per_record_ = 1;
  std::vector<double> times_;
  std::vector<Eigen::VectorXd> records_;
  std::vector<AlarmState> alarms_;
  std::optional<double> alarm_time_;
  std::optional<double> shed_time_;
  std::optional<std::size_t> shed_load_;
  SessionStatus status_ = SessionStatus::running;
  std::optional<nlohmann::json> recommendation_cache_;
  double recommendation_time_ = -1.0;
  std::mutex mutex_;
};

struct Reply {
  int status = 200;
  nlohmann::json body;
};

/// Session store plus request routing. Every accepted mutation is appended
/// to <data_dir>/sessions/<id>/actions.jsonl and replayed on construction.
class Service {
 public:
  explicit Service(ServiceConfig config);

  /// Routes one request. `path` excludes the query string.
  Reply handle(const std::string& method, const std::string& path, const std::map<std::string, std::string>& query,
               const std::string& body);

  /// Registers the endpoints on an HTTP server.
  void bind(httplib::Server& server);

  const ServiceConfig& config() const { return config_; }
  const GridModel& model() const { return model_; }
  const std::optional<ModelBundle>& bundle() const { return bundle_; }
  double tau() const;
  std::size_t session_count() const;

 private:
  std::shared_ptr<ScenarioSession> find(const std::string& id) const;
  std::shared_ptr<ScenarioSession> create(const nlohmann::json& request, const std::string& id, bool persist);
  void log_action(const std::string& id, const nlohmann::json& action) const;
  void replay();

  ServiceConfig config_;
  GridModel model_;
  Equilibrium eq_;
  std::optional<ModelBundle> bundle_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<ScenarioSession>> sessions_;
  long next_id_ = 1;
};

}  // namespace gridshed
