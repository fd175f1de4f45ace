#include "doublyaware/grpc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "doublyaware/common.hpp"

namespace doublyaware::grpc {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
// Buffer actions sit on the bounds whenever the planner clipped them; the
// vanilla log-likelihood evaluates them just inside.
constexpr double kBufferActionLimit = 1.0 - 1e-3;
constexpr double kAtanhLimit = 1.0 - 1e-15;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double log_one_minus_tanh_sq(double u) { return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u)); }

Matrix column(const Matrix& m, std::size_t c) {
  Matrix out(m.rows, 1);
  for (std::size_t r = 0; r < m.rows; ++r) out(r, 0) = m(r, c);
  return out;
}

Matrix map(const Matrix& m, double (*f)(double)) {
  Matrix out = m;
  for (double& v : out.data) v = f(v);
  return out;
}

void softmax_row(std::span<const double> q, double tau, std::span<double> out) {
  const double qmax = *std::max_element(q.begin(), q.end());
  double sum = 0.0;
  for (std::size_t g = 0; g < q.size(); ++g) {
    out[g] = std::exp((q[g] - qmax) / tau);
    sum += out[g];
  }
  for (double& a : out) a /= sum;
}

}  // namespace

void LearnerConfig::validate() const {
  if (group_size < 2) throw ConfigError("learner: group_size must be at least 2");
  if (!(tau_softmax > 0.0)) throw ConfigError("learner: tau_softmax must be positive");
  if (!(beta >= 0.0)) throw ConfigError("learner: beta must be non-negative");
  if (!(epsilon_max > 0.0)) throw ConfigError("learner: epsilon_max must be positive");
  if (!(lr >= 0.0)) throw ConfigError("learner: lr must be non-negative");
  if (batch_size < 1) throw ConfigError("learner: batch_size must be positive");
  if (horizon < 1) throw ConfigError("learner: horizon must be positive");
  if (!(polyak > 0.0 && polyak <= 1.0)) throw ConfigError("learner: polyak must lie in (0, 1]");
  if (!(sigma_floor > 0.0)) throw ConfigError("learner: sigma_floor must be positive");
}

std::vector<double> group_advantages(std::span<const double> q, double tau) {
  require(tau > 0.0, "group_advantages: tau must be positive");
  require(q.size() >= 2, "group_advantages: group needs at least two actions");
  if (!all_finite(q)) throw NumericError("group_advantages", "non-finite q-value");
  std::vector<double> a(q.size());
  softmax_row(q, tau, a);
  return a;
}

Matrix group_threshold(const Matrix& actions, std::span<const double> mu_g, std::span<const double> sigma_g,
                       double epsilon_max) {
  require(mu_g.size() == actions.cols && sigma_g.size() == actions.cols, "group_threshold: dimension mismatch");
  Matrix out = actions;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t d = 0; d < out.cols; ++d) {
      const double lo = mu_g[d] - epsilon_max * sigma_g[d], hi = mu_g[d] + epsilon_max * sigma_g[d];
      out(r, d) = std::clamp(out(r, d), lo, hi);
    }
  return out;
}

double kl_to_prior(const wm::PolicyDistribution& dist, std::span<const double> prior_mu,
                   std::span<const double> prior_sigma) {
  require(dist.mean.size() == prior_mu.size() && prior_sigma.size() == prior_mu.size(),
          "kl_to_prior: dimension mismatch");
  double kl = 0.0;
  for (std::size_t d = 0; d < prior_mu.size(); ++d) {
    require(prior_sigma[d] > 0.0, "kl_to_prior: prior sigma must be positive");
    const double s = std::exp(dist.log_std[d]);
    const double diff = dist.mean[d] - prior_mu[d];
    kl += std::log(prior_sigma[d]) - dist.log_std[d] + (s * s + diff * diff) / (2.0 * prior_sigma[d] * prior_sigma[d]) -
          0.5;
  }
  return kl;
}

double advantage_entropy(std::span<const double> a) {
  double h = 0.0;
  for (double p : a)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

PriorMoments group_prior(std::span<const replay::SegmentBatch> groups, std::size_t t, double sigma_floor) {
  require(!groups.empty(), "group_prior: no groups");
  const Matrix& first = groups[0].actions.at(t);
  const auto g = static_cast<double>(groups.size());
  PriorMoments m{Matrix(first.rows, first.cols), Matrix(first.rows, first.cols)};
  for (const auto& b : groups) require(b.actions.at(t).same_shape(first), "group_prior: group batches differ in shape");
  for (std::size_t k = 0; k < first.data.size(); ++k) {
    double mean = 0.0;
    for (const auto& b : groups) mean += b.actions[t].data[k];
    mean /= g;
    double var = 0.0;
    for (const auto& b : groups) {
      const double d = b.actions[t].data[k] - mean;
      var += d * d;
    }
    m.mu.data[k] = mean;
    m.sigma.data[k] = std::max(std::sqrt(var / g), sigma_floor);
  }
  return m;
}

GroupBatch build_group_batch(const wm::WorldModelParams& wm, const Matrix& z, const PriorMoments& prior,
                             const LearnerConfig& cfg, Rng& rng) {
  const std::size_t n = z.rows, adim = wm.config.action_dim, groups = cfg.group_size;
  require(prior.mu.rows == n && prior.mu.cols == adim && prior.mu.same_shape(prior.sigma),
          "build_group_batch: prior shape mismatch");
  const wm::PolicyMoments m = wm::policy_moments(wm, z);
  GroupBatch b;
  b.log_jacobian = Matrix(n, groups);
  b.q_values = Matrix(n, groups);
  b.advantages = Matrix(n, groups);
  b.prior_mu = prior.mu;
  b.prior_sigma = prior.sigma;
  for (std::size_t g = 0; g < groups; ++g) {
    Matrix u(n, adim), a(n, adim);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t d = 0; d < adim; ++d) {
        const double raw = m.mean(r, d) + std::exp(m.log_std(r, d)) * rng.normal();
        const double act = std::tanh(raw);
        const double lo = prior.mu(r, d) - cfg.epsilon_max * prior.sigma(r, d);
        const double hi = prior.mu(r, d) + cfg.epsilon_max * prior.sigma(r, d);
        const double clipped = std::clamp(act, lo, hi);
        a(r, d) = clipped;
        u(r, d) = clipped == act ? raw : std::atanh(std::clamp(clipped, -kAtanhLimit, kAtanhLimit));
        b.log_jacobian(r, g) -= log_one_minus_tanh_sq(u(r, d));
      }
    const Matrix q = wm::q_batch(wm, z, a, false, wm::QReduce::min);
    if (!all_finite(q.data)) throw NumericError("build_group_batch", "non-finite q-value");
    for (std::size_t r = 0; r < n; ++r) b.q_values(r, g) = q(r, 0);
    b.pre_squash.push_back(std::move(u));
  }
  double entropy = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    softmax_row(b.q_values.row(r), cfg.tau_softmax, b.advantages.row(r));
    entropy += advantage_entropy(b.advantages.row(r));
  }
  b.mean_entropy = entropy / static_cast<double>(n);
  b.kl_noise = Matrix(n, adim);
  for (double& v : b.kl_noise.data) v = rng.normal();
  return b;
}

GroupBatch group_batch_from_sample(const GroupSample& group, const GaussianPrior& prior) {
  const std::size_t groups = group.actions.rows, adim = group.actions.cols;
  require(group.advantages.size() == groups, "group_batch_from_sample: advantage count mismatch");
  require(prior.mu.size() == adim && prior.sigma.size() == adim, "group_batch_from_sample: prior dimension mismatch");
  GroupBatch b;
  b.log_jacobian = Matrix(1, groups);
  b.q_values = Matrix(1, groups, group.q_values.empty() ? std::vector<double>(groups, 0.0) : group.q_values);
  b.advantages = Matrix(1, groups, group.advantages);
  b.prior_mu = Matrix::row_vector(prior.mu);
  b.prior_sigma = Matrix::row_vector(prior.sigma);
  b.kl_noise = Matrix(1, adim);
  for (std::size_t g = 0; g < groups; ++g) {
    Matrix u(1, adim);
    for (std::size_t d = 0; d < adim; ++d) {
      const double a = group.actions(g, d);
      // tanh saturates to +-1 in double precision, so bound actions are pulled just inside.
      require(a >= -1.0 && a <= 1.0, "policy_loss: group action outside [-1, 1]");
      u(0, d) = std::atanh(std::clamp(a, -kAtanhLimit, kAtanhLimit));
      b.log_jacobian(0, g) -= log_one_minus_tanh_sq(u(0, d));
    }
    b.pre_squash.push_back(std::move(u));
  }
  b.mean_entropy = advantage_entropy(group.advantages);
  return b;
}

ad::Var grpc_loss_on_tape(const wm::WorldModelParams& wm, ad::ParamHandle& policy, ad::Var z, const GroupBatch& batch,
                          const LearnerConfig& cfg, PolicyTerms* terms) {
  ad::Tape& tape = policy.tape();
  const wm::PolicyVars pv = wm::policy_on_tape(wm, policy, z);
  const std::size_t n = batch.advantages.rows, groups = batch.advantages.cols;
  const std::size_t adim = wm.config.action_dim;
  require(batch.pre_squash.size() == groups, "grpc_loss: group count mismatch");
  require(tape.value(pv.mean).rows == n, "grpc_loss: latent batch does not match the group batch");

  const ad::Var inv_std = ad::exp(-pv.log_std);
  ad::Var grpo = tape.constant(Matrix(n, 1, 0.0));
  for (std::size_t g = 0; g < groups; ++g) {
    const ad::Var eps = (tape.constant(batch.pre_squash[g]) - pv.mean) * inv_std;
    Matrix offset = column(batch.log_jacobian, g);
    for (double& v : offset.data) v -= static_cast<double>(adim) * kHalfLog2Pi;
    const ad::Var log_prob = ad::row_sum(ad::square(eps) * -0.5 - pv.log_std) + tape.constant(std::move(offset));
    Matrix weight = column(batch.advantages, g);
    for (double& v : weight.data) v *= -1.0 / static_cast<double>(groups);
    grpo = grpo + log_prob * tape.constant(std::move(weight));
  }

  ad::Var kl;
  if (cfg.kl_mode == KlMode::closed_form) {
    Matrix half_inv_var = batch.prior_sigma, offset = batch.prior_sigma;
    for (double& v : half_inv_var.data) v = 0.5 / (v * v);
    for (double& v : offset.data) v = std::log(v) - 0.5;
    const ad::Var c = tape.constant(std::move(half_inv_var));
    kl = ad::row_sum(ad::exp(pv.log_std * 2.0) * c + ad::square(pv.mean - tape.constant(batch.prior_mu)) * c -
                     pv.log_std + tape.constant(std::move(offset)));
  } else {
    const ad::Var noise = tape.constant(batch.kl_noise);
    const ad::Var u = pv.mean + ad::exp(pv.log_std) * noise;
    Matrix half_sq = batch.kl_noise;
    for (double& v : half_sq.data) v = -0.5 * v * v;
    const ad::Var log_pi = ad::row_sum(tape.constant(std::move(half_sq)) - pv.log_std);
    const ad::Var inv_prior = tape.constant(map(batch.prior_sigma, [](double s) { return 1.0 / s; }));
    const ad::Var log_prior = ad::row_sum(ad::square((u - tape.constant(batch.prior_mu)) * inv_prior) * -0.5 -
                                          tape.constant(map(batch.prior_sigma, [](double s) { return std::log(s); })));
    kl = log_pi - log_prior;
  }

  if (terms) {
    const auto& gv = tape.value(grpo).data;
    const auto& kv = tape.value(kl).data;
    terms->grpo = std::accumulate(gv.begin(), gv.end(), 0.0) / static_cast<double>(n);
    terms->kl = std::accumulate(kv.begin(), kv.end(), 0.0) / static_cast<double>(n);
  }
  return ad::mean(grpo + kl * cfg.beta);
}

double policy_loss(const wm::WorldModelParams& wm, const wm::LatentState& z, const GroupSample& group,
                   const GaussianPrior& prior, const LearnerConfig& cfg) {
  const GroupBatch b = group_batch_from_sample(group, prior);
  ad::Tape tape;
  ad::ParamHandle policy(tape, wm.policy_head.params());
  return tape.scalar(grpc_loss_on_tape(wm, policy, tape.constant(Matrix::row_vector(z.z)), b, cfg));
}

std::vector<double> policy_loss_grad(const wm::WorldModelParams& wm, const wm::LatentState& z,
                                     const GroupSample& group, const GaussianPrior& prior, const LearnerConfig& cfg) {
  const GroupBatch b = group_batch_from_sample(group, prior);
  ad::Tape tape;
  ad::ParamHandle policy(tape, wm.policy_head.params());
  tape.backward(grpc_loss_on_tape(wm, policy, tape.constant(Matrix::row_vector(z.z)), b, cfg));
  return policy.gradient();
}

GroupSample sample_group(const wm::WorldModelParams& wm, const wm::LatentState& z, const GaussianPrior& prior,
                         const LearnerConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const PriorMoments pm{Matrix::row_vector(prior.mu), Matrix::row_vector(prior.sigma)};
  const GroupBatch b = build_group_batch(wm, Matrix::row_vector(z.z), pm, cfg, rng);
  const wm::PolicyDistribution dist = wm::policy_distribution(wm, z);
  const std::size_t groups = cfg.group_size, adim = wm.config.action_dim;
  GroupSample s;
  s.actions = Matrix(groups, adim);
  for (std::size_t g = 0; g < groups; ++g) {
    double lp = b.log_jacobian(0, g);
    for (std::size_t d = 0; d < adim; ++d) {
      const double u = b.pre_squash[g](0, d);
      s.actions(g, d) = std::tanh(u);
      const double eps = (u - dist.mean[d]) * std::exp(-dist.log_std[d]);
      lp += -0.5 * eps * eps - dist.log_std[d] - kHalfLog2Pi;
    }
    s.log_probs.push_back(lp);
    s.q_values.push_back(b.q_values(0, g));
    s.advantages.push_back(b.advantages(0, g));
  }
  return s;
}

VanillaBatch build_vanilla_batch(const Matrix& buffer_actions, Rng& rng) {
  VanillaBatch b;
  b.noise = Matrix(buffer_actions.rows, buffer_actions.cols);
  for (double& v : b.noise.data) v = rng.normal();
  b.buffer_pre_squash = buffer_actions;
  b.log_jacobian = Matrix(buffer_actions.rows, 1);
  for (std::size_t r = 0; r < buffer_actions.rows; ++r)
    for (std::size_t d = 0; d < buffer_actions.cols; ++d) {
      const double u = std::atanh(std::clamp(buffer_actions(r, d), -kBufferActionLimit, kBufferActionLimit));
      b.buffer_pre_squash(r, d) = u;
      b.log_jacobian(r, 0) -= log_one_minus_tanh_sq(u);
    }
  return b;
}

ad::Var vanilla_loss_on_tape(const wm::WorldModelParams& wm, ad::ParamHandle& policy, ad::ParamHandle& value1,
                             ad::ParamHandle& value2, ad::Var z, ad::Var q_latent, const VanillaBatch& batch,
                             double beta) {
  ad::Tape& tape = policy.tape();
  const wm::PolicyVars pv = wm::policy_on_tape(wm, policy, z);
  const std::size_t adim = wm.config.action_dim;
  const ad::Var action = ad::tanh(pv.mean + ad::exp(pv.log_std) * tape.constant(batch.noise));
  const ad::Var za = ad::concat_cols(q_latent, action);
  ad::Var q = wm.value_head_1.forward(value1, za);
  if (wm.config.value_heads == 2) q = (q + wm.value_head_2.forward(value2, za)) * 0.5;
  const ad::Var eps = (tape.constant(batch.buffer_pre_squash) - pv.mean) * ad::exp(-pv.log_std);
  Matrix offset = batch.log_jacobian;
  for (double& v : offset.data) v -= static_cast<double>(adim) * kHalfLog2Pi;
  const ad::Var log_prob = ad::row_sum(ad::square(eps) * -0.5 - pv.log_std) + tape.constant(std::move(offset));
  return ad::mean(-q - log_prob * beta);
}

Learner::Learner(LearnerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void Learner::apply(ad::ParamVector& params, std::span<const double> grad, ad::AdamState& state) {
  if (cfg_.optimizer == OptimizerKind::adam)
    ad::adam_step(params, grad, state, cfg_.lr);
  else
    ad::sgd_step(params, grad, cfg_.lr);
}

LossReport Learner::update(wm::WorldModelParams& wm, std::span<const replay::SegmentBatch> groups,
                           std::uint64_t seed) {
  require(groups.size() == cfg_.group_size, "learner: expected one segment batch per group");
  const replay::SegmentBatch& batch = groups[0];
  const std::size_t horizon = batch.horizon();
  require(horizon >= 1, "learner: empty horizon");

  const wm::ModelGradients model = wm::model_loss_grad(wm, batch);

  ad::Tape tape;
  ad::ParamHandle encoder(tape, wm.encoder.params());
  ad::ParamHandle dynamics(tape, wm.dynamics.params());
  ad::ParamHandle policy(tape, wm.policy_head.params());
  ad::ParamHandle value1(tape, wm.value_head_1.params());
  ad::ParamHandle value2(tape, wm.value_head_2.params());
  const bool detach = cfg_.detach_policy_latents;
  const bool grpc = cfg_.objective == PolicyObjective::grpc;

  Rng rng(seed);
  ad::Var z = detach ? tape.constant(wm::encode_batch(wm, batch.observations[0]))
                     : wm.encoder.forward(encoder, tape.constant(batch.observations[0]));
  ad::Var total = tape.constant(Matrix(1, 1, 0.0));
  double kl = 0.0, entropy = 0.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    const Matrix zval = tape.value(z);
    if (grpc) {
      const GroupBatch gb = build_group_batch(wm, zval, group_prior(groups, t, cfg_.sigma_floor), cfg_, rng);
      PolicyTerms terms;
      total = total + grpc_loss_on_tape(wm, policy, z, gb, cfg_, &terms);
      kl += terms.kl;
      entropy += gb.mean_entropy;
    } else {
      const VanillaBatch vb = build_vanilla_batch(batch.actions[t], rng);
      total = total + vanilla_loss_on_tape(wm, policy, value1, value2, z, tape.constant(zval), vb, cfg_.beta);
    }
    if (t + 1 < horizon)
      z = detach ? tape.constant(wm::dynamics_batch(wm, zval, batch.actions[t]))
                 : wm.dynamics.forward(dynamics, ad::concat_cols(z, tape.constant(batch.actions[t])));
  }
  const double inv_h = 1.0 / static_cast<double>(horizon);
  total = total * inv_h;
  tape.backward(total);

  apply(wm.encoder.params(), model.encoder, m_encoder_);
  apply(wm.dynamics.params(), model.dynamics, m_dynamics_);
  apply(wm.reward_head.params(), model.reward, m_reward_);
  apply(wm.value_head_1.params(), model.value1, m_value1_);
  if (wm.config.value_heads == 2) apply(wm.value_head_2.params(), model.value2, m_value2_);
  apply(wm.policy_head.params(), policy.gradient(), p_policy_);
  if (!detach) {
    apply(wm.encoder.params(), encoder.gradient(), p_encoder_);
    apply(wm.dynamics.params(), dynamics.gradient(), p_dynamics_);
  }
  if (wm.config.target_network) wm::soft_update_targets(wm, cfg_.polyak);
  ++grad_steps_;

  LossReport r;
  r.policy_loss = tape.scalar(total);
  r.kl_value = grpc ? kl * inv_h : std::nan("");
  r.mean_advantage_entropy = grpc ? entropy * inv_h : std::nan("");
  r.model_latent_loss = model.terms.latent;
  r.model_reward_loss = model.terms.reward;
  r.model_value_loss = model.terms.value;
  r.grad_steps = grad_steps_;
  return r;
}

LossReport Learner::learn_round(wm::WorldModelParams& wm, const replay::ReplayBuffer& buffer, std::uint64_t seed) {
  const std::size_t available = buffer.segment_count(cfg_.horizon);
  if (available < cfg_.batch_size)
    throw NotReady("learn_round: " + std::to_string(available) + " segments available, " +
                   std::to_string(cfg_.batch_size) + " required");
  LossReport r;
  r.grad_steps = grad_steps_;
  for (std::size_t s = 0; s < cfg_.updates_per_round; ++s) {
    const std::uint64_t step_seed = hash64(seed, s);
    const auto groups = buffer.sample_group_batches(cfg_.group_size, cfg_.batch_size, cfg_.horizon, step_seed);
    r = update(wm, groups, hash64(step_seed, 0x6C));
  }
  return r;
}

// ---- gradient variance probe ----

namespace {

double landscape_q(Landscape l, double a, std::mt19937_64& eng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (l) {
    case Landscape::constant:
      return 1.0;
    case Landscape::gaussian:
      return -a * a + normal(eng);
    case Landscape::bimodal:
      return std::exp(-2.0 * (a - 0.6) * (a - 0.6)) + std::exp(-2.0 * (a + 0.6) * (a + 0.6)) + 0.5 * normal(eng);
    case Landscape::heavy_tailed:
      return -a * a + std::student_t_distribution<double>(2.0)(eng);
  }
  return 0.0;
}

}  // namespace

VarianceProbe gradient_variance_probe(Landscape landscape, AdvantageEstimator estimator, std::size_t n_samples,
                                      std::uint64_t seed, std::size_t group_size, double tau) {
  require(n_samples >= 1000, "gradient_variance_probe: need at least 1000 samples");
  require(group_size >= 2, "gradient_variance_probe: group needs at least two actions");
  // Fixed pre-squash Gaussian policy.
  constexpr double kMean = 0.2;
  const double kStd = 0.5;
  Rng rng(seed);
  std::vector<double> u(group_size), eps(group_size), q(group_size), adv(group_size);
  double s_mu = 0.0, s_ls = 0.0, ss_mu = 0.0, ss_ls = 0.0, adv_var = 0.0;
  const auto gsz = static_cast<double>(group_size);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t g = 0; g < group_size; ++g) {
      eps[g] = rng.normal();
      u[g] = kMean + kStd * eps[g];
      q[g] = landscape_q(landscape, std::tanh(u[g]), rng.engine());
    }
    if (estimator == AdvantageEstimator::softmax) {
      softmax_row(q, tau, adv);
    } else {
      const double m = std::accumulate(q.begin(), q.end(), 0.0) / gsz;
      double v = 0.0;
      for (double x : q) v += (x - m) * (x - m);
      const double sd = std::sqrt(v / gsz);
      for (std::size_t g = 0; g < group_size; ++g) adv[g] = (q[g] - m) / (sd + 1e-8);
    }
    double g_mu = 0.0, g_ls = 0.0;
    for (std::size_t g = 0; g < group_size; ++g) {
      g_mu += adv[g] * eps[g] / kStd;
      g_ls += adv[g] * (eps[g] * eps[g] - 1.0);
    }
    g_mu /= gsz;
    g_ls /= gsz;
    s_mu += g_mu;
    s_ls += g_ls;
    ss_mu += g_mu * g_mu;
    ss_ls += g_ls * g_ls;
    const double am = std::accumulate(adv.begin(), adv.end(), 0.0) / gsz;
    double av = 0.0;
    for (double a : adv) av += (a - am) * (a - am);
    adv_var += av / gsz;
  }
  const auto n = static_cast<double>(n_samples);
  const double var_mu = ss_mu / n - (s_mu / n) * (s_mu / n);
  const double var_ls = ss_ls / n - (s_ls / n) * (s_ls / n);
  return {(var_mu + var_ls) * n / (n - 1.0), adv_var / n};
}

}  // namespace doublyaware::grpc
