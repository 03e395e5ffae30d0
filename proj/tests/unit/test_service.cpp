// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <thread>

#include "../common/fixtures.hpp"
#include "gridshed/dataset.hpp"
#include "gridshed/service.hpp"
#include "gridshed/trajectory_io.hpp"

// After Eigen: resolv.h, pulled in here, defines a `_res` macro.
#include <httplib.h>

using namespace gridshed;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const AttackSpec& destabilizing_attack() {
  static const AttackSpec spec = [] {
    const auto cal = calibrate_attack(fixtures::ieee14(), fixtures::ieee14_eq(), Target{4, Variable::V},
                                      Target{2, Variable::QG}, SweepConfig{});
    REQUIRE(cal.accepted);
    return cal.spec;
  }();
  return spec;
}

Reply get(Service& s, const std::string& path, std::map<std::string, std::string> query = {}) {
  return s.handle("GET", path, query, "");
}

Reply post(Service& s, const std::string& path, const json& body) { return s.handle("POST", path, {}, body.dump()); }

ServiceConfig config_in(const fs::path& dir) {
  ServiceConfig c;
  c.data_dir = dir;
  return c;
}

// Tiny classifier over the served channel set.
fs::path small_weights(const fs::path& dir) {
  Architecture a;
  a.C = channel_names(fixtures::ieee14()).size();
  a.T = 200;
  a.F1 = 4;
  a.F2 = 4;
  a.H = 5;
  a.E = 3;
  a.head1 = 6;
  a.head2 = 4;
  a.n_loads = fixtures::ieee14().loads().size();
  ModelBundle b;
  b.params = init_params(a, 17);
  b.channels = channel_names(fixtures::ieee14());
  b.mean = channel_values(fixtures::ieee14(), fixtures::ieee14_eq().inputs, fixtures::ieee14_eq().state.x);
  b.stddev = Eigen::VectorXd::Constant(b.mean.size(), 1e-3);
  b.tau = 0.5;
  save_weights(dir / "w.bin", b);
  return dir / "w.bin";
}

}  // namespace

TEST_CASE("session walkthrough from attack to outcome") {
  const auto dir = fixtures::temp_dir("service_walk");
  Service svc(config_in(dir));
  const AttackSpec& attack = destabilizing_attack();

  auto r = post(svc, "/scenario", {{"attack", attack}});
  REQUIRE(r.status == 201);
  const std::string id = r.body["id"];
  const std::string base = "/scenario/" + id;
  CHECK(r.body["status"] == "running");
  CHECK(r.body["sim_time"] == 0.0);

  CHECK(post(svc, base + "/shed", {{"load_index", 0}}).status == 409);
  CHECK(get(svc, base + "/outcome").status == 409);
  CHECK(get(svc, base + "/recommendations").status == 503);

  r = post(svc, base + "/step", {{"seconds", 120}});
  REQUIRE(r.status == 200);
  CHECK(r.body["stopped"] == "alarm");
  CHECK(r.body["status"] == "awaiting-decision");
  REQUIRE(r.body["alarm_time"].is_number());
  const double alarm_t = r.body["alarm_time"];
  CHECK(r.body["sim_time"].get<double>() == doctest::Approx(alarm_t));
  const auto alarm = get(svc, base + "/alarm");
  CHECK(alarm.body["alarmed"] == true);
  CHECK(alarm.body["alarm_time"] == alarm_t);

  CHECK(post(svc, base + "/shed", {{"load_index", 99}}).status == 400);
  CHECK(post(svc, base + "/shed", {{"load_index", -1}}).status == 400);
  CHECK(svc.handle("POST", base + "/shed", {}, "{oops").status == 400);

  const std::size_t load = 3;
  r = post(svc, base + "/shed", {{"load_index", load}});
  REQUIRE(r.status == 200);
  const double t_shed = r.body["shed"]["t"];
  CHECK(t_shed == r.body["sim_time"].get<double>());
  CHECK(post(svc, base + "/shed", {{"load_index", 1}}).status == 409);

  r = post(svc, base + "/step", {{"seconds", 120}});
  REQUIRE(r.status == 200);
  CHECK(r.body["stopped"] == "horizon");
  CHECK(r.body["status"] == "finished");
  CHECK(r.body["sim_time"].get<double>() == doctest::Approx(t_shed + 50.0));
  CHECK(post(svc, base + "/step", {{"seconds", 1}}).status == 409);

  const auto outcome = get(svc, base + "/outcome");
  REQUIRE(outcome.status == 200);
  CHECK(outcome.body["viable"] == true);

  // The same scenario run straight through the simulator.
  const auto& m = fixtures::ieee14();
  ScenarioConfig sc;
  sc.attack = attack;
  sc.kick = SpeedKick{0.0, {}};
  for (std::size_t g = 0; g < m.generators().size(); ++g) sc.kick->d_omega.push_back(g % 2 ? -1e-4 : 1e-4);
  sc.shed = ShedEvent{t_shed, load};
  sc.t_end = t_shed + 50.0;
  const Trajectory ref = simulate(m, fixtures::ieee14_eq(), sc);
  REQUIRE(!ref.terminated_early);
  CHECK(outcome.body["events"] == events_to_json(ref.events));
  const Label l = label(ref.slice(t_shed));
  CHECK(outcome.body["verdict"] == std::string(to_string(l.verdict)));

  const auto state = get(svc, base + "/state", {{"from", std::to_string(t_shed)}});
  REQUIRE(state.status == 200);
  const auto& times = state.body["times"];
  REQUIRE(times.size() == 1001);
  CHECK(times[0].get<double>() == doctest::Approx(t_shed));
  const auto first = static_cast<Eigen::Index>(ref.times.size() - times.size());
  double diff = 0;
  for (std::size_t c = 0; c < ref.channels.size(); ++c) {
    const auto& col = state.body["samples"][ref.channels[c]];
    // The session's sample at the shed instant was recorded before the decision.
    for (std::size_t j = 1; j < col.size(); ++j)
      diff = std::max(diff, std::abs(col[j].get<double>() -
                                     ref.samples(static_cast<Eigen::Index>(c), first + static_cast<Eigen::Index>(j))));
  }
  CHECK(diff < 1e-9);
  CHECK(get(svc, base + "/state", {{"from", "soon"}}).status == 400);
}

TEST_CASE("routing errors") {
  Service svc(ServiceConfig{});
  CHECK(get(svc, "/scenario/nope").status == 404);
  CHECK(get(svc, "/nothing").status == 404);
  CHECK(svc.handle("DELETE", "/scenario", {}, "").status == 404);
  CHECK(post(svc, "/scenario", json::array({1})).status == 400);
  CHECK(post(svc, "/scenario", {{"attack", {{"read", {{"node", 99}, {"var", "V"}}},
                                            {"write", {{"node", 2}, {"var", "QG"}}},
                                            {"gain", 1.0}}}})
            .status == 400);
  CHECK(post(svc, "/scenario", {{"kick", "big"}}).status == 400);
  const auto r = post(svc, "/scenario", json::object());
  REQUIRE(r.status == 201);
  const std::string base = "/scenario/" + r.body["id"].get<std::string>();
  CHECK(post(svc, base + "/step", json::object()).status == 400);
  CHECK(post(svc, base + "/step", {{"seconds", -1}}).status == 400);
  CHECK(post(svc, base + "/step", {{"seconds", 1e6}}).status == 400);
  CHECK(get(svc, base + "/bogus").status == 404);
  CHECK(get(svc, "/scenario").body.size() == 1);
}

TEST_CASE("restart replays the session store") {
  const auto dir = fixtures::temp_dir("service_replay");
  std::vector<std::string> paths;
  std::vector<Reply> before;
  {
    Service svc(config_in(dir));
    const auto id = post(svc, "/scenario", {{"attack", destabilizing_attack()}}).body["id"].get<std::string>();
    post(svc, "/scenario", {{"kick", 0}});
    const std::string base = "/scenario/" + id;
    REQUIRE(post(svc, base + "/step", {{"seconds", 120}}).body["status"] == "awaiting-decision");
    REQUIRE(post(svc, base + "/shed", {{"load_index", 5}}).status == 200);
    REQUIRE(post(svc, base + "/step", {{"seconds", 7.5}}).status == 200);
    paths = {"/scenario", base, base + "/state", base + "/alarm", base + "/outcome"};
    for (const auto& p : paths) before.push_back(get(svc, p));
  }
  Service again(config_in(dir));
  CHECK(again.session_count() == 2);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const Reply r = get(again, paths[i]);
    CHECK(r.status == before[i].status);
    CHECK(r.body.dump() == before[i].body.dump());
  }
  CHECK(post(again, "/scenario", json::object()).body["id"] == "s000003");
}

TEST_CASE("recommendations follow the classifier at the served tau") {
  const auto dir = fixtures::temp_dir("service_recs");
  ServiceConfig cfg;
  cfg.weights = small_weights(dir);
  cfg.tau = 0.4;
  Service svc(cfg);
  CHECK(svc.tau() == 0.4);
  const std::string base = "/scenario/" + post(svc, "/scenario", json::object()).body["id"].get<std::string>();
  CHECK(get(svc, base + "/recommendations").status == 409);  // less than 10 s recorded
  REQUIRE(post(svc, base + "/step", {{"seconds", 12}}).status == 200);
  const auto r = get(svc, base + "/recommendations");
  REQUIRE(r.status == 200);
  const auto& bundle = *svc.bundle();
  REQUIRE(r.body.size() == bundle.params.arch.n_loads);

  // Rebuild the window from the state endpoint and run the classifier directly.
  const auto state = get(svc, base + "/state").body;
  const std::size_t n = state["times"].size(), T = bundle.params.arch.T;
  Batch batch;
  batch.x.resize(static_cast<Eigen::Index>(bundle.channels.size() * T), static_cast<Eigen::Index>(r.body.size()));
  for (std::size_t l = 0; l < r.body.size(); ++l) {
    for (std::size_t c = 0; c < bundle.channels.size(); ++c)
      for (std::size_t t = 0; t < T; ++t) {
        const double v = state["samples"][bundle.channels[c]][n - 1 - T + t];
        const auto ci = static_cast<Eigen::Index>(c);
        batch.x(static_cast<Eigen::Index>(c * T + t), static_cast<Eigen::Index>(l)) =
            static_cast<float>((v - bundle.mean[ci]) / bundle.stddev[ci]);
      }
    batch.load_index.push_back(static_cast<int>(l));
  }
  const auto probs = forward(bundle.params, batch).probabilities;
  for (std::size_t l = 0; l < r.body.size(); ++l) {
    const auto& row = r.body[l];
    CHECK(row["load_index"] == l);
    CHECK(row["load_bus"] == fixtures::ieee14().buses()[fixtures::ieee14().loads()[l].bus].id);
    CHECK(row["tau"] == 0.4);
    CHECK(row["sim_time"] == state["sim_time"]);
    const double p = row["p_unstable"];
    CHECK(p == doctest::Approx(probs(1, static_cast<Eigen::Index>(l))).epsilon(1e-12));
    CHECK(row["label_at_tau"] == std::string(to_string(predict(p, 0.4))));
  }
  CHECK(get(svc, base + "/recommendations").body == r.body);
}

TEST_CASE("weights for another channel set are refused") {
  const auto dir = fixtures::temp_dir("service_badweights");
  ModelBundle b = load_weights(small_weights(dir));
  b.channels.back() = "V_99";
  save_weights(dir / "other.bin", b);
  ServiceConfig cfg;
  cfg.weights = dir / "other.bin";
  CHECK_THROWS_AS(Service{cfg}, Error);
  ServiceConfig bad;
  bad.tau = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(json(bad).get<ServiceConfig>().tau == 1.5);
}

TEST_CASE("http binding") {
  Service svc(ServiceConfig{});
  httplib::Server server;
  svc.bind(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto created = client.Post("/scenario", "{}", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const std::string id = json::parse(created->body)["id"];
  auto step = client.Post("/scenario/" + id + "/step", R"({"seconds": 1})", "application/json");
  REQUIRE(step);
  CHECK(json::parse(step->body)["sim_time"] == doctest::Approx(1.0));
  auto state = client.Get("/scenario/" + id + "/state?from=0.5");
  REQUIRE(state);
  CHECK(json::parse(state->body)["times"].size() == 11);
  auto health = client.Get("/health");
  REQUIRE(health);
  CHECK(json::parse(health->body)["sessions"] == 1);
  auto missing = client.Get("/scenario/zzz");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  server.stop();
  th.join();
}
