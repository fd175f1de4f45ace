#pragma once

// Group-relative constrained policy learning.
//
// At every latent state of a sampled horizon segment the policy draws G
// actions, which are clipped into an epsilon_max-sigma band around the
// buffer-action moments (mu^G, sigma^G). The min-reduced Q of each action
// feeds a softmax that yields the group advantages. The policy minimizes
// -(1/G) sum_g A_g log pi(a_g | z) + beta * KL(pi(.|z) || N(mu^G, sigma^G)),
// averaged over the horizon, while the world model takes its own optimizer
// step on the consistency objective.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "doublyaware/autodiff.hpp"
#include "doublyaware/nn.hpp"
#include "doublyaware/replay.hpp"
#include "doublyaware/tensor.hpp"
#include "doublyaware/world_model.hpp"

namespace doublyaware::grpc {

// grpc: group-relative objective above. vanilla: -Q_avg(z, pi(z)) - beta * log pi(a_buffer | z).
enum class PolicyObjective { grpc, vanilla };
// closed_form: Gaussian KL of the pre-squash moments. sampled: one-sample
// estimate log pi(u | z) - log N(u; mu^G, sigma^G) with a reparameterized u.
enum class KlMode { closed_form, sampled };
enum class OptimizerKind { adam, sgd };

struct LearnerConfig {
  std::size_t group_size = 3;
  double tau_softmax = 1.0;
  double beta = 0.1;
  double epsilon_max = 3.0;
  double lr = 3e-4;
  std::size_t batch_size = 256;
  std::size_t horizon = 3;
  std::size_t updates_per_round = 1;
  double polyak = 0.01;
  double sigma_floor = 0.05;
  PolicyObjective objective = PolicyObjective::grpc;
  KlMode kl_mode = KlMode::closed_form;
  OptimizerKind optimizer = OptimizerKind::adam;
  // Stops policy-loss gradients at the latents (encoder and dynamics untouched by the policy step).
  bool detach_policy_latents = false;

  void validate() const;
};

struct GroupSample {
  Matrix actions;  // G x action_dim
  std::vector<double> log_probs;
  std::vector<double> q_values;
  std::vector<double> advantages;
};

struct GaussianPrior {
  std::vector<double> mu;
  std::vector<double> sigma;
};

// Softmax of q / tau, max-shifted.
std::vector<double> group_advantages(std::span<const double> q_values, double tau);
// Clips each component to mu_g +- epsilon_max * sigma_g.
Matrix group_threshold(const Matrix& actions, std::span<const double> mu_g, std::span<const double> sigma_g,
                       double epsilon_max);
// sum_d log(sigma_p / sigma_pi) + (sigma_pi^2 + (mu_pi - mu_p)^2) / (2 sigma_p^2) - 1/2
double kl_to_prior(const wm::PolicyDistribution& dist, std::span<const double> prior_mu,
                   std::span<const double> prior_sigma);
// Shannon entropy of an advantage vector (nats).
double advantage_entropy(std::span<const double> advantages);

// Draws G policy actions at z, thresholds them against the prior, scores
// them with the min-reduced live Q heads and attaches advantages.
GroupSample sample_group(const wm::WorldModelParams& wm, const wm::LatentState& z, const GaussianPrior& prior,
                         const LearnerConfig& cfg, std::uint64_t seed);

// Per-row buffer-action moments across G group batches at horizon step t,
// with sigma floored.
struct PriorMoments {
  Matrix mu;
  Matrix sigma;
};
PriorMoments group_prior(std::span<const replay::SegmentBatch> groups, std::size_t t, double sigma_floor);

// Constants of the group objective for N states at one horizon step.
struct GroupBatch {
  std::vector<Matrix> pre_squash;  // G entries, N x action_dim: atanh of the thresholded actions
  Matrix log_jacobian;             // N x G: -sum_d log(1 - a_d^2)
  Matrix q_values;                 // N x G
  Matrix advantages;               // N x G
  Matrix prior_mu;                 // N x action_dim
  Matrix prior_sigma;              // N x action_dim
  Matrix kl_noise;                 // N x action_dim, used by KlMode::sampled
  double mean_entropy = 0.0;
};
GroupBatch build_group_batch(const wm::WorldModelParams& wm, const Matrix& z, const PriorMoments& prior,
                             const LearnerConfig& cfg, Rng& rng);
GroupBatch group_batch_from_sample(const GroupSample& group, const GaussianPrior& prior);

struct PolicyTerms {
  double grpo = 0.0;
  double kl = 0.0;
};
// Batch mean of -(1/G) sum_g A_g log pi(a_g | z) + beta * KL. The policy head
// enters through `policy`, which may view a different parameter vector than
// wm.policy_head.
ad::Var grpc_loss_on_tape(const wm::WorldModelParams& wm, ad::ParamHandle& policy, ad::Var z, const GroupBatch& batch,
                          const LearnerConfig& cfg, PolicyTerms* terms = nullptr);

// Single-state value and gradient (with respect to the policy head).
double policy_loss(const wm::WorldModelParams& wm, const wm::LatentState& z, const GroupSample& group,
                   const GaussianPrior& prior, const LearnerConfig& cfg);
std::vector<double> policy_loss_grad(const wm::WorldModelParams& wm, const wm::LatentState& z,
                                     const GroupSample& group, const GaussianPrior& prior, const LearnerConfig& cfg);

// Constants of the vanilla objective at one horizon step.
struct VanillaBatch {
  Matrix noise;            // N x action_dim reparameterization noise
  Matrix buffer_pre_squash;  // N x action_dim: atanh of the (clamped) buffer actions
  Matrix log_jacobian;     // N x 1
};
VanillaBatch build_vanilla_batch(const Matrix& buffer_actions, Rng& rng);
// Batch mean of -Q_avg(z, tanh(mean + std * noise)) - beta * log pi(a_buffer | z).
// `q_latent` feeds the value heads (normally a constant copy of z).
ad::Var vanilla_loss_on_tape(const wm::WorldModelParams& wm, ad::ParamHandle& policy, ad::ParamHandle& value1,
                             ad::ParamHandle& value2, ad::Var z, ad::Var q_latent, const VanillaBatch& batch,
                             double beta);

struct LossReport {
  double policy_loss = 0.0;
  double kl_value = 0.0;  // NaN for the vanilla objective
  double model_latent_loss = 0.0;
  double model_reward_loss = 0.0;
  double model_value_loss = 0.0;
  double mean_advantage_entropy = 0.0;  // NaN for the vanilla objective
  std::size_t grad_steps = 0;

  bool operator==(const LossReport&) const = default;
};

// Owns the optimizer state of the two parameter sets: the model objective
// (encoder, dynamics, reward, value heads) and the policy objective (policy
// head, plus encoder and dynamics unless latents are detached).
class Learner {
 public:
  explicit Learner(LearnerConfig cfg);

  const LearnerConfig& config() const { return cfg_; }
  std::size_t grad_steps() const { return grad_steps_; }

  // Throws NotReady when the buffer holds fewer than batch_size segments.
  LossReport learn_round(wm::WorldModelParams& wm, const replay::ReplayBuffer& buffer, std::uint64_t seed);
  // One optimizer step of both objectives on an explicit set of G group batches.
  LossReport update(wm::WorldModelParams& wm, std::span<const replay::SegmentBatch> groups, std::uint64_t seed);

 private:
  void apply(ad::ParamVector& params, std::span<const double> grad, ad::AdamState& state);

  LearnerConfig cfg_;
  std::size_t grad_steps_ = 0;
  ad::AdamState m_encoder_, m_dynamics_, m_reward_, m_value1_, m_value2_;
  ad::AdamState p_policy_, p_encoder_, p_dynamics_;
};

// Synthetic one-dimensional landscapes for the gradient-variance probe.
enum class Landscape { constant, gaussian, bimodal, heavy_tailed };
enum class AdvantageEstimator { softmax, std_norm };

struct VarianceProbe {
  // Trace of the covariance of the per-group score-function gradient with
  // respect to (mean, log_std) of the fixed policy.
  double gradient_variance = 0.0;
  // Mean within-group population variance of the advantage weights.
  double advantage_variance = 0.0;
};
// std_norm uses A_g = (q_g - mean) / (std + 1e-8) with the population std.
VarianceProbe gradient_variance_probe(Landscape landscape, AdvantageEstimator estimator, std::size_t n_samples,
                                      std::uint64_t seed, std::size_t group_size = 3, double tau = 1.0);

}  // namespace doublyaware::grpc
