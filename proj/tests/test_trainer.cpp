#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doublyaware/trainer.hpp"

using namespace doublyaware;
using trainer::Mode;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "doublyaware_test_trainer" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    rows.push_back(fields);
  }
  return rows;
}

trainer::RunConfig tiny(const std::string& dir) {
  trainer::RunConfig c;
  c.env_id = env::EnvId::point_mass;
  c.total_env_steps = 500;
  c.seed_episodes = 1;
  c.eval_every = 250;
  c.eval_episodes = 1;
  c.planner.iterations = 2;
  c.planner.n_policy_prior = 4;
  c.planner.n_mppi = 16;
  c.planner.elite_count = 8;
  c.learner.batch_size = 8;
  c.world_model.latent_dim = 8;
  c.world_model.hidden = 16;
  c.out_dir = scratch(dir);
  return c;
}

}  // namespace

TEST_CASE("config JSON round trip") {
  auto c = tiny("unused");
  c.mode = Mode::tdmpc_cp;
  c.seed = 123456789012345ULL;
  c.planner.alpha = 0.1;
  c.learner.kl_mode = grpc::KlMode::sampled;
  c.learner.detach_policy_latents = true;
  c.world_model.target_network = false;
  c.env_options.observation_noise = 0.02;
  const auto j = trainer::to_json(c);
  const auto back = trainer::config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(trainer::to_json(back).dump() == j.dump());
  CHECK(back.seed == c.seed);
  CHECK(back.learner.kl_mode == grpc::KlMode::sampled);
}

TEST_CASE("missing keys default and unknown keys are rejected") {
  const auto c = trainer::config_from_json(nlohmann::json::parse(R"({"env_id": "cartpole"})"));
  CHECK(c.env_id == env::EnvId::cartpole);
  CHECK(c.total_env_steps == 200'000);
  CHECK(c.planner.n_policy_prior == 24);
  CHECK(c.planner.n_mppi == 512);
  CHECK(c.learner.group_size == 3);
  CHECK(c.learner.batch_size == 256);
  CHECK(c.planner.alpha == 0.05);
  CHECK_THROWS_AS(trainer::config_from_json(nlohmann::json::parse(R"({"total_steps": 5})")), ConfigError);
  CHECK_THROWS_AS(trainer::config_from_json(nlohmann::json::parse(R"({"planner": {"horizonn": 3}})")), ConfigError);
  CHECK_THROWS_AS(trainer::config_from_json(nlohmann::json::parse(R"({"mode": "sac"})")), ConfigError);
  CHECK_THROWS_AS(trainer::config_from_json(nlohmann::json::parse(R"({"env_id": "humanoid"})")), ConfigError);
  CHECK_THROWS_AS(trainer::config_from_json(nlohmann::json::parse(R"({"seed": "zero"})")), ConfigError);
  CHECK_THROWS_AS(trainer::config_from_json(nlohmann::json::parse("[1, 2]")), ConfigError);
}

TEST_CASE("config files") {
  const fs::path dir = scratch("config_files");
  fs::create_directories(dir);
  CHECK_THROWS_AS(trainer::load_config(dir / "missing.json"), IoError);
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK_THROWS_AS(trainer::load_config(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "ok.json") << R"({"env_id": "pendulum", "learner": {"batch_size": 64}})";
  const auto c = trainer::load_config(dir / "ok.json");
  CHECK(c.env_id == env::EnvId::pendulum);
  CHECK(c.learner.batch_size == 64);
}

TEST_CASE("mode switches") {
  trainer::RunConfig c;
  c.planner.conformal_enabled = false;
  c.mode = Mode::doublyaware;
  auto e = trainer::effective_config(c);
  CHECK(e.planner.conformal_enabled);
  CHECK(e.learner.objective == grpc::PolicyObjective::grpc);
  c.mode = Mode::tdmpc_cp;
  e = trainer::effective_config(c);
  CHECK(e.planner.conformal_enabled);
  CHECK(e.learner.objective == grpc::PolicyObjective::vanilla);
  c.planner.conformal_enabled = true;
  c.mode = Mode::tdmpc_vanilla;
  e = trainer::effective_config(c);
  CHECK_FALSE(e.planner.conformal_enabled);
  CHECK(e.learner.objective == grpc::PolicyObjective::vanilla);
  CHECK(e.world_model.obs_dim == 4);
  CHECK(e.world_model.action_dim == 2);
  for (auto m : {Mode::doublyaware, Mode::tdmpc_cp, Mode::tdmpc_vanilla})
    CHECK(trainer::parse_mode(trainer::to_string(m)) == m);
  CHECK_THROWS_AS(trainer::parse_mode("dreamer"), ConfigError);
}

TEST_CASE("invalid run configurations") {
  auto c = tiny("invalid");
  c.eval_every = 0;
  CHECK_THROWS_AS(trainer::train(c), ConfigError);
  c = tiny("invalid");
  c.learner.horizon = 5;
  CHECK_THROWS_AS(trainer::train(c), ConfigError);
  c = tiny("invalid");
  c.planner.alpha = 1.5;
  CHECK_THROWS_AS(trainer::train(c), ConfigError);
}

TEST_CASE("zero env steps writes a header-only metrics file") {
  auto c = tiny("zero");
  c.total_env_steps = 0;
  const auto r = trainer::train(c);
  CHECK(r.env_steps == 0);
  CHECK(r.evals.empty());
  CHECK(slurp(c.out_dir / "metrics.csv") == std::string(trainer::kMetricsHeader) + "\n");
  CHECK(fs::exists(c.out_dir / "config.json"));
}

TEST_CASE("training metrics are a pure function of the configuration") {
  auto a = tiny("det_a");
  auto b = tiny("det_b");
  const auto ra = trainer::train(a);
  const auto rb = trainer::train(b);
  const std::string ma = slurp(a.out_dir / "metrics.csv");
  CHECK(ma == slurp(b.out_dir / "metrics.csv"));
  CHECK(ra.auc == rb.auc);
  CHECK(ra.env_steps == 500);
  CHECK(ra.episodes == 2);
  CHECK(ra.grad_steps > 0);

  const auto rows = read_csv(a.out_dir / "metrics.csv");
  REQUIRE(rows.size() == 1 + 2 + 2 + 0);
  const std::size_t columns = rows[0].size();
  CHECK(columns == 15);
  long previous = -1;
  std::size_t evals = 0, episodes = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == columns);
    const long step = std::stol(rows[i][0]);
    CHECK(step >= previous);
    previous = step;
    if (rows[i][2] == "eval") ++evals;
    if (rows[i][2] == "episode") ++episodes;
  }
  CHECK(evals == 2);
  CHECK(episodes == 2);
  CHECK(fs::exists(a.out_dir / "checkpoints" / "step_250" / "manifest.json"));
  CHECK(fs::exists(a.out_dir / "checkpoints" / "step_500" / "manifest.json"));
  CHECK(fs::exists(a.out_dir / "timing.csv"));

  auto c = tiny("det_c");
  c.seed = 1;
  trainer::train(c);
  CHECK(ma != slurp(c.out_dir / "metrics.csv"));
}

TEST_CASE("a final partial evaluation interval still gets evaluated") {
  auto c = tiny("partial");
  c.total_env_steps = 300;
  const auto r = trainer::train(c);
  REQUIRE(r.evals.size() == 2);
  CHECK(r.evals[0].env_step == 250);
  CHECK(r.evals[1].env_step == 300);
  CHECK(r.final_eval_mean == r.evals.back().mean);
  CHECK(r.auc == trainer::trapezoid_auc({250.0, 300.0}, {r.evals[0].mean, r.evals[1].mean}));
}

TEST_CASE("unwritable output directories are I/O errors") {
  const fs::path dir = scratch("unwritable");
  fs::create_directories(dir);
  std::ofstream(dir / "plain_file") << "x";
  auto c = tiny("unused");
  c.out_dir = dir / "plain_file" / "run";
  CHECK_THROWS_AS(trainer::train(c), IoError);
}

TEST_CASE("checkpoint evaluation") {
  const fs::path dir = scratch("ckpt");
  wm::WorldModelConfig wc;
  wc.obs_dim = 4;
  wc.action_dim = 2;
  wc.latent_dim = 8;
  wc.hidden = 16;
  wm::save_world_model(dir, wm::make_world_model(wc, 3));
  planner::PlannerConfig pc;
  pc.iterations = 2;
  pc.n_policy_prior = 4;
  pc.n_mppi = 16;
  pc.elite_count = 8;
  const auto s = trainer::evaluate_checkpoint(dir, env::EnvId::point_mass, 3, 5, false, pc);
  const auto again = trainer::evaluate_checkpoint(dir, env::EnvId::point_mass, 3, 5, false, pc);
  CHECK(s.returns == again.returns);
  REQUIRE(s.returns.size() == 3);
  const auto spec = env::Environment(env::EnvId::point_mass).spec();
  for (double r : s.returns) {
    CHECK(r >= spec.reward_min * spec.episode_length);
    CHECK(r <= spec.reward_max * spec.episode_length);
  }
  double mean = 0.0;
  for (double r : s.returns) mean += r / 3.0;
  CHECK(s.mean == doctest::Approx(mean).epsilon(1e-12));
  const auto policy = trainer::evaluate_checkpoint(dir, env::EnvId::point_mass, 2, 5, true);
  CHECK(policy.returns.size() == 2);
  CHECK_THROWS_AS(trainer::evaluate_checkpoint(dir, env::EnvId::point_mass, 0, 5), ContractViolation);
  CHECK_THROWS_AS(trainer::evaluate_checkpoint(dir, env::EnvId::cartpole, 1, 5), VersionError);
  CHECK_THROWS_AS(trainer::evaluate_checkpoint(dir / "nope", env::EnvId::point_mass, 1, 5), IoError);
}

TEST_CASE("evaluation episode seeds are distinct") {
  std::vector<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::size_t k = 0; k < 50; ++k) seen.push_back(trainer::eval_episode_seed(s, k));
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
}

TEST_CASE("trapezoid rule") {
  CHECK(trainer::trapezoid_auc({0.0, 1.0, 2.0}, {0.0, 1.0, 0.0}) == 1.0);
  CHECK(trainer::trapezoid_auc({0.0, 2.0, 5.0}, {1.0, 3.0, -1.0}) == doctest::Approx(4.0 + 3.0));
  CHECK(trainer::trapezoid_auc({3.0}, {7.0}) == 0.0);
  CHECK(trainer::trapezoid_auc({}, {}) == 0.0);
  CHECK_THROWS_AS(trainer::trapezoid_auc({0.0, 1.0}, {1.0}), ContractViolation);
}

TEST_CASE("ablation preconditions") {
  auto c = tiny("ablate_pre");
  CHECK_THROWS_AS(trainer::ablate(c, {Mode::doublyaware}, {0}), ContractViolation);
  CHECK_THROWS_AS(trainer::ablate(c, {Mode::doublyaware, Mode::tdmpc_vanilla}, {0, 1}), ContractViolation);
  CHECK_THROWS_AS(trainer::ablate(c, {Mode::doublyaware}, {0, 1, 2}), ContractViolation);
}

TEST_CASE("ablation matrix") {
  auto c = tiny("ablate");
  c.total_env_steps = 300;
  c.eval_every = 100;
  const auto r = trainer::ablate(c, {Mode::doublyaware, Mode::tdmpc_vanilla}, {0, 1, 2});
  REQUIRE(r.rows.size() == 6);
  const auto csv = read_csv(c.out_dir / "ablation.csv");
  REQUIRE(csv.size() == 7);
  CHECK(csv[0] == std::vector<std::string>{"mode", "seed", "final_eval_mean", "auc_of_curve"});
  for (const auto& row : r.rows) {
    const auto metrics = read_csv(c.out_dir / (trainer::to_string(row.mode) + "_seed" + std::to_string(row.seed)) /
                                  "metrics.csv");
    std::vector<double> x, y;
    for (std::size_t i = 1; i < metrics.size(); ++i)
      if (metrics[i][2] == "eval") {
        x.push_back(std::stod(metrics[i][0]));
        y.push_back(std::stod(metrics[i][4]));
      }
    REQUIRE(x.size() == 3);
    CHECK(row.auc == doctest::Approx(trainer::trapezoid_auc(x, y)).epsilon(1e-12));
    CHECK(row.final_eval_mean == doctest::Approx(y.back()).epsilon(1e-12));
  }
  CHECK(r.verdict.rfind("point_mass: ", 0) == 0);
  CHECK(fs::exists(c.out_dir / "verdict.txt"));
}

TEST_CASE("pendulum energy controller swings up") {
  const env::Environment e(env::EnvId::pendulum);
  const auto s = trainer::evaluate_pendulum_oracle(e, 5, 0);
  CHECK(s.returns == trainer::evaluate_pendulum_oracle(e, 5, 0).returns);
  for (double r : s.returns) CHECK(r > 50.0);
  CHECK_THROWS_AS(trainer::evaluate_pendulum_oracle(env::Environment(env::EnvId::cartpole), 1, 0), ContractViolation);
}
