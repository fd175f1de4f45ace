#pragma once

// Latent world model: encoder h, latent dynamics d, reward head R, two value
// heads Q1/Q2 with slowly tracking target copies, and a tanh-squashed
// Gaussian policy head. Every head is an Mlp with two hidden layers.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "doublyaware/autodiff.hpp"
#include "doublyaware/common.hpp"
#include "doublyaware/nn.hpp"
#include "doublyaware/replay.hpp"
#include "doublyaware/tensor.hpp"

namespace doublyaware::wm {

struct WorldModelConfig {
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  std::size_t latent_dim = 64;
  std::size_t hidden = 128;
  double gamma = 0.99;
  // 1 evaluates the single-head form literally; 2 enables min/avg reductions.
  int value_heads = 2;
  // false bootstraps the value target from the live heads under stop-gradient.
  bool target_network = true;
  double log_std_min = -10.0;
  double log_std_max = 2.0;

  void validate() const;
};

enum class QReduce { min, avg, head1 };

struct LatentState {
  std::vector<double> z;
};

struct PolicyDistribution {
  std::vector<double> mean;
  std::vector<double> log_std;
};

struct PolicySample {
  std::vector<double> action;
  double log_prob = 0.0;
  PolicyDistribution dist;
};

struct WorldModelParams {
  WorldModelConfig config;
  ad::Mlp encoder;
  ad::Mlp dynamics;
  ad::Mlp reward_head;
  ad::Mlp value_head_1;
  ad::Mlp value_head_2;
  ad::Mlp policy_head;
  ad::Mlp target_value_1;
  ad::Mlp target_value_2;

  double gamma() const { return config.gamma; }
};

// He-uniform initialization; targets start as exact copies of the live heads.
WorldModelParams make_world_model(const WorldModelConfig& cfg, std::uint64_t seed);
// Every parameter zero.
WorldModelParams make_zero_world_model(const WorldModelConfig& cfg);

LatentState encode(const WorldModelParams& wm, std::span<const double> obs);
LatentState dynamics_step(const WorldModelParams& wm, const LatentState& z, std::span<const double> a);
double predict_reward(const WorldModelParams& wm, const LatentState& z, std::span<const double> a);
double predict_q(const WorldModelParams& wm, const LatentState& z, std::span<const double> a, bool use_target,
                 QReduce reduce);
PolicyDistribution policy_distribution(const WorldModelParams& wm, const LatentState& z);
PolicySample policy_sample(const WorldModelParams& wm, const LatentState& z, std::uint64_t seed);

// Batched forms: one row per latent / observation.
Matrix encode_batch(const WorldModelParams& wm, const Matrix& obs);
Matrix dynamics_batch(const WorldModelParams& wm, const Matrix& z, const Matrix& a);
Matrix reward_batch(const WorldModelParams& wm, const Matrix& z, const Matrix& a);
Matrix q_batch(const WorldModelParams& wm, const Matrix& z, const Matrix& a, bool use_target, QReduce reduce);

struct PolicyMoments {
  Matrix mean;     // pre-squash
  Matrix log_std;  // clamped to [log_std_min, log_std_max]
};
PolicyMoments policy_moments(const WorldModelParams& wm, const Matrix& z);
Matrix policy_mean_action(const WorldModelParams& wm, const Matrix& z);

struct PolicyBatchSample {
  Matrix actions;
  Matrix log_probs;  // B x 1
};
PolicyBatchSample sample_policy_batch(const PolicyMoments& moments, Rng& rng);

// Squashed-Gaussian log density for actions in (-1, 1):
// sum_d log N(atanh a_d; mean_d, exp(log_std_d)) - log(1 - a_d^2).
double squashed_log_prob(std::span<const double> mean, std::span<const double> log_std,
                         std::span<const double> action);
// Same density from the pre-squash noise (exact for a = tanh(mean + std * eps)).
double squashed_log_prob_from_noise(std::span<const double> log_std, std::span<const double> eps,
                                    std::span<const double> pre_squash);
// Maps raw head outputs into [log_std_min, log_std_max] with a tanh soft clamp.
double clamp_log_std(double raw, double lo, double hi);

// Tape views of the heads.
struct PolicyVars {
  ad::Var mean;
  ad::Var log_std;
};
PolicyVars policy_on_tape(const WorldModelParams& wm, ad::ParamHandle& policy, ad::Var z);

// ---- model objective ----

// Stop-gradient targets: encoded next observations and TD value targets.
struct ModelTargets {
  std::vector<Matrix> next_latents;  // h(s_{t+1}), t = 0..H-1
  std::vector<Matrix> td_targets;    // r_t + gamma * Q_target(h(s_{t+1}), pi_mean(h(s_{t+1}))), min-reduced
};

struct ModelLossTerms {
  double total = 0.0;
  double latent = 0.0;
  double reward = 0.0;
  double value = 0.0;
};

struct ModelHandles {
  ad::ParamHandle encoder;
  ad::ParamHandle dynamics;
  ad::ParamHandle reward;
  ad::ParamHandle value1;
  ad::ParamHandle value2;
  ModelHandles(ad::Tape& tape, const WorldModelParams& wm);
};

struct ModelGradients {
  std::vector<double> encoder;
  std::vector<double> dynamics;
  std::vector<double> reward;
  std::vector<double> value1;
  std::vector<double> value2;
  ModelLossTerms terms;
};

ModelTargets compute_model_targets(const WorldModelParams& wm, const replay::SegmentBatch& batch);
// Records the objective on a tape. Latents after step 0 come from rolling the
// dynamics head forward from h(s_0); `latents`, when given, receives them.
ad::Var model_loss_on_tape(const WorldModelParams& wm, ModelHandles& handles, const replay::SegmentBatch& batch,
                           const ModelTargets& targets, ModelLossTerms* terms = nullptr,
                           std::vector<Matrix>* latents = nullptr);
// Sum over the horizon (batch-mean) of latent, reward and value consistency.
// Targets are recomputed from `wm` unless supplied.
ModelLossTerms model_loss(const WorldModelParams& wm, const replay::SegmentBatch& batch,
                          const ModelTargets* targets = nullptr);
ModelGradients model_loss_grad(const WorldModelParams& wm, const replay::SegmentBatch& batch,
                               const ModelTargets* targets = nullptr);

// target <- (1 - tau) * target + tau * live for both value heads.
void soft_update_targets(WorldModelParams& wm, double tau);

// Checkpoint directory: one parameter file per head plus manifest.json.
void save_world_model(const std::filesystem::path& dir, const WorldModelParams& wm);
WorldModelParams load_world_model(const std::filesystem::path& dir);

}  // namespace doublyaware::wm
