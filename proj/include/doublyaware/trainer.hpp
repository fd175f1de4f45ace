#pragma once

// Collect-plan-learn loop, evaluation and the ablation harness.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "doublyaware/env.hpp"
#include "doublyaware/grpc.hpp"
#include "doublyaware/planner.hpp"
#include "doublyaware/world_model.hpp"

namespace doublyaware::trainer {

enum class Mode { doublyaware, tdmpc_cp, tdmpc_vanilla };
Mode parse_mode(std::string_view name);
std::string to_string(Mode mode);

struct RunConfig {
  env::EnvId env_id = env::EnvId::point_mass;
  env::EnvOptions env_options;
  std::size_t total_env_steps = 200'000;
  std::size_t seed_episodes = 10;
  std::size_t eval_every = 10'000;
  std::size_t eval_episodes = 10;
  std::size_t buffer_capacity = 1'000'000;
  Mode mode = Mode::doublyaware;
  planner::PlannerConfig planner;
  grpc::LearnerConfig learner;
  // obs_dim and action_dim are taken from the environment.
  wm::WorldModelConfig world_model;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/default";

  void validate() const;
};

// Applies the mode switches: tdmpc_vanilla turns conformal filtering off and
// uses the vanilla policy objective, tdmpc_cp keeps filtering with the
// vanilla objective, doublyaware uses both components. Also fills the model
// dimensions from the environment.
RunConfig effective_config(const RunConfig& cfg);

nlohmann::ordered_json to_json(const RunConfig& cfg);
// Missing keys keep their defaults; unknown keys raise ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

inline constexpr const char* kMetricsHeader =
    "env_step,grad_step,event,episode_return,eval_return_mean,eval_return_std,q_hat,n_kept,kept_fraction,"
    "policy_loss,kl_value,model_latent_loss,model_reward_loss,model_value_loss,mean_advantage_entropy";

struct EvalPoint {
  std::size_t env_step = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct TrainResult {
  std::size_t env_steps = 0;
  std::size_t grad_steps = 0;
  std::size_t episodes = 0;
  std::vector<double> episode_returns;
  std::vector<EvalPoint> evals;
  double final_eval_mean = 0.0;
  double auc = 0.0;
};

// Writes config.json, metrics.csv, timing.csv and checkpoints/step_<n>/ under
// cfg.out_dir. The metrics file is a pure function of the configuration.
TrainResult train(const RunConfig& cfg);

struct EvalSummary {
  std::size_t episodes = 0;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> returns;
};

// Planner-in-the-loop evaluation (exploration sigma floored, prior policy
// deterministic), or the bare policy mean with policy_only.
EvalSummary evaluate(const wm::WorldModelParams& wm, const planner::PlannerConfig& planner_cfg,
                     const env::Environment& env, std::size_t episodes, std::uint64_t seed, bool policy_only = false);
EvalSummary evaluate_checkpoint(const std::filesystem::path& checkpoint, env::EnvId env_id, std::size_t episodes,
                                std::uint64_t seed, bool policy_only = false,
                                const planner::PlannerConfig& planner_cfg = {});
nlohmann::ordered_json to_json(const EvalSummary& s);

// Trapezoidal integral of y over x.
double trapezoid_auc(const std::vector<double>& x, const std::vector<double>& y);

struct AblationRow {
  Mode mode = Mode::doublyaware;
  std::uint64_t seed = 0;
  double final_eval_mean = 0.0;
  double auc = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string verdict;
};

// Runs every (mode, seed) pair under base.out_dir/<mode>_seed<seed>, writes
// base.out_dir/ablation.csv and base.out_dir/verdict.txt.
AblationResult ablate(const RunConfig& base, const std::vector<Mode>& modes, const std::vector<std::uint64_t>& seeds);

// Hand-written pendulum swing-up controller: energy pumping far from the top,
// PD stabilization near it.
std::vector<double> pendulum_energy_controller(const env::EnvState& state);
EvalSummary evaluate_pendulum_oracle(const env::Environment& env, std::size_t episodes, std::uint64_t seed);

// Seed for evaluation episode k of a run with base seed `seed`.
std::uint64_t eval_episode_seed(std::uint64_t seed, std::size_t k);

}  // namespace doublyaware::trainer
