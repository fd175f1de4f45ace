#pragma once

// Sampling-based latent planner with conformal trajectory filtering.
//
// Each iteration pools policy-prior rollouts with Gaussian (MPPI) candidates,
// scores them by the H-step latent return, converts returns into min-max
// nonconformity scores, keeps the trajectories whose score does not exceed
// the split-conformal (1 - alpha) quantile, and refits the sampling
// distribution with exponentially weighted moments of the kept set.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "doublyaware/tensor.hpp"
#include "doublyaware/world_model.hpp"

namespace doublyaware::planner {

struct PlannerConfig {
  std::size_t horizon = 3;
  std::size_t iterations = 6;
  std::size_t n_policy_prior = 24;
  std::size_t n_mppi = 512;
  double alpha = 0.05;
  double temperature = 0.5;
  double sigma_floor = 0.05;
  double sigma_init = 1.0;
  bool conformal_enabled = true;
  // Elite count for the top-k refit used when conformal filtering is off.
  std::size_t elite_count = 64;

  void validate() const;
};

// Per-step, per-dimension Gaussian moments (horizon x action_dim).
struct ActionDistribution {
  Matrix mu;
  Matrix sigma;

  static ActionDistribution initial(std::size_t horizon, std::size_t action_dim, double sigma_init);
  // Receding-horizon warm start: drop step 0, append (0, sigma_init).
  ActionDistribution shifted(double sigma_init) const;
};

enum class TrajectorySource { policy_prior, mppi };

struct LatentTrajectory {
  Matrix actions;  // horizon x action_dim, within [-1, 1]
  double value = 0.0;
  double score = 0.0;
  TrajectorySource source = TrajectorySource::mppi;
};

struct ConformalReport {
  double q_hat = 0.0;
  std::size_t n_total = 0;
  std::size_t n_kept = 0;
  double kept_fraction = 0.0;
};

// What the planner needs from a model: batched returns of action sequences
// from a fixed start, and rollouts of the learned policy.
class TrajectoryModel {
 public:
  virtual ~TrajectoryModel() = default;
  virtual std::size_t action_dim() const = 0;
  virtual std::vector<double> returns(std::span<const Matrix> action_sequences) const = 0;
  virtual std::vector<Matrix> policy_priors(std::size_t n, std::size_t horizon, std::uint64_t seed) const = 0;
};

// Latent-space model rooted at z0.
class LatentModel : public TrajectoryModel {
 public:
  // deterministic_policy draws priors with the policy log_std pinned at its minimum.
  LatentModel(const wm::WorldModelParams& wm, wm::LatentState z0, bool deterministic_policy = false)
      : wm_(&wm), z0_(std::move(z0)), deterministic_(deterministic_policy) {}
  std::size_t action_dim() const override { return wm_->config.action_dim; }
  std::vector<double> returns(std::span<const Matrix> action_sequences) const override;
  std::vector<Matrix> policy_priors(std::size_t n, std::size_t horizon, std::uint64_t seed) const override;

 private:
  const wm::WorldModelParams* wm_;
  wm::LatentState z0_;
  bool deterministic_;
};

// sum_{t<H} gamma^t R(z_t, a_t) + gamma^H Q_avg(z_H, pi_mean(z_H)), z_{t+1} = d(z_t, a_t).
double rollout_return(const wm::WorldModelParams& wm, const wm::LatentState& z0, const Matrix& actions);
// Batched returns; `parallel` splits trajectories across OpenMP threads.
// Results are identical either way.
std::vector<double> rollout_returns(const wm::WorldModelParams& wm, const wm::LatentState& z0,
                                    std::span<const Matrix> action_sequences, bool parallel);

std::vector<LatentTrajectory> sample_policy_priors(const wm::WorldModelParams& wm, const wm::LatentState& z0,
                                                   std::size_t n, std::size_t horizon, std::uint64_t seed,
                                                   bool min_log_std = false);
std::vector<Matrix> sample_mppi_candidates(const ActionDistribution& dist, std::size_t n, std::uint64_t seed);

// 1 - (v - min) / (max - min); all zeros when max == min.
std::vector<double> nonconformity_scores(std::span<const double> values);
// k = ceil((n + 1)(1 - alpha)); values of k above n mean "keep everything".
std::size_t conformal_rank(std::size_t n, double alpha);
// k-th smallest score, or the maximum when k > n.
double conformal_quantile(std::span<const double> scores, double alpha);
std::vector<LatentTrajectory> conformal_filter(std::span<const LatentTrajectory> trajectories, double q_hat);
ActionDistribution update_moments(std::span<const LatentTrajectory> elites, double temperature, double sigma_floor);

struct PlanResult {
  std::vector<double> action;
  ActionDistribution refit;       // distribution after the last iteration
  ActionDistribution final_dist;  // refit shifted for the next step
  ConformalReport report;         // last iteration
};

// eval = true samples the returned action with sigma_floor instead of sigma_J
// and, for the latent overload, pins the prior policy's log_std at its minimum.
PlanResult plan(const TrajectoryModel& model, const PlannerConfig& cfg, const ActionDistribution* warm_start,
                std::uint64_t seed, bool eval = false);
PlanResult plan(const wm::WorldModelParams& wm, const wm::LatentState& z0, const PlannerConfig& cfg,
                const ActionDistribution* warm_start, std::uint64_t seed, bool eval = false);

}  // namespace doublyaware::planner
