#include "doublyaware/world_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "doublyaware/common.hpp"

namespace doublyaware::wm {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// log(1 - tanh(u)^2), stable for large |u|.
double log_one_minus_tanh_sq(double u) { return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u)); }

std::vector<std::size_t> sizes(std::size_t in, std::size_t hidden, std::size_t out) { return {in, hidden, hidden, out}; }

Matrix stack(std::span<const double> v) { return Matrix::row_vector(v); }

}  // namespace

void WorldModelConfig::validate() const {
  if (obs_dim == 0 || action_dim == 0 || latent_dim == 0 || hidden == 0)
    throw ConfigError("world model dimensions must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (value_heads != 1 && value_heads != 2) throw ConfigError("value_heads must be 1 or 2");
  if (!(log_std_min < log_std_max)) throw ConfigError("log_std_min must be below log_std_max");
}

WorldModelParams make_zero_world_model(const WorldModelConfig& cfg) {
  cfg.validate();
  const std::size_t za = cfg.latent_dim + cfg.action_dim;
  WorldModelParams wm;
  wm.config = cfg;
  wm.encoder = ad::Mlp(sizes(cfg.obs_dim, cfg.hidden, cfg.latent_dim));
  wm.dynamics = ad::Mlp(sizes(za, cfg.hidden, cfg.latent_dim));
  wm.reward_head = ad::Mlp(sizes(za, cfg.hidden, 1));
  wm.value_head_1 = ad::Mlp(sizes(za, cfg.hidden, 1));
  wm.value_head_2 = ad::Mlp(sizes(za, cfg.hidden, 1));
  wm.policy_head = ad::Mlp(sizes(cfg.latent_dim, cfg.hidden, 2 * cfg.action_dim));
  wm.target_value_1 = wm.value_head_1;
  wm.target_value_2 = wm.value_head_2;
  return wm;
}

WorldModelParams make_world_model(const WorldModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t za = cfg.latent_dim + cfg.action_dim;
  WorldModelParams wm;
  wm.config = cfg;
  wm.encoder = ad::Mlp::he_uniform(sizes(cfg.obs_dim, cfg.hidden, cfg.latent_dim), hash64(seed, 1));
  wm.dynamics = ad::Mlp::he_uniform(sizes(za, cfg.hidden, cfg.latent_dim), hash64(seed, 2));
  wm.reward_head = ad::Mlp::he_uniform(sizes(za, cfg.hidden, 1), hash64(seed, 3));
  wm.value_head_1 = ad::Mlp::he_uniform(sizes(za, cfg.hidden, 1), hash64(seed, 4));
  wm.value_head_2 = ad::Mlp::he_uniform(sizes(za, cfg.hidden, 1), hash64(seed, 5));
  wm.policy_head = ad::Mlp::he_uniform(sizes(cfg.latent_dim, cfg.hidden, 2 * cfg.action_dim), hash64(seed, 6));
  wm.target_value_1 = wm.value_head_1;
  wm.target_value_2 = wm.value_head_2;
  return wm;
}

double clamp_log_std(double raw, double lo, double hi) { return lo + 0.5 * (hi - lo) * (std::tanh(raw) + 1.0); }

// ---- batched evaluation ----

Matrix encode_batch(const WorldModelParams& wm, const Matrix& obs) {
  require(obs.cols == wm.config.obs_dim, "encode: observation dimension mismatch");
  return wm.encoder.forward(obs);
}

Matrix dynamics_batch(const WorldModelParams& wm, const Matrix& z, const Matrix& a) {
  require(z.cols == wm.config.latent_dim, "dynamics_step: latent dimension mismatch");
  require(a.cols == wm.config.action_dim, "dynamics_step: action dimension mismatch");
  return wm.dynamics.forward(concat_cols(z, a));
}

Matrix reward_batch(const WorldModelParams& wm, const Matrix& z, const Matrix& a) {
  require(z.cols == wm.config.latent_dim && a.cols == wm.config.action_dim, "predict_reward: dimension mismatch");
  return wm.reward_head.forward(concat_cols(z, a));
}

Matrix q_batch(const WorldModelParams& wm, const Matrix& z, const Matrix& a, bool use_target, QReduce reduce) {
  require(z.cols == wm.config.latent_dim && a.cols == wm.config.action_dim, "predict_q: dimension mismatch");
  const bool target = use_target && wm.config.target_network;
  const Matrix za = concat_cols(z, a);
  Matrix q1 = (target ? wm.target_value_1 : wm.value_head_1).forward(za);
  if (wm.config.value_heads == 1 || reduce == QReduce::head1) return q1;
  const Matrix q2 = (target ? wm.target_value_2 : wm.value_head_2).forward(za);
  for (std::size_t i = 0; i < q1.data.size(); ++i)
    q1.data[i] = reduce == QReduce::min ? std::min(q1.data[i], q2.data[i]) : 0.5 * (q1.data[i] + q2.data[i]);
  return q1;
}

PolicyMoments policy_moments(const WorldModelParams& wm, const Matrix& z) {
  require(z.cols == wm.config.latent_dim, "policy: latent dimension mismatch");
  const Matrix out = wm.policy_head.forward(z);
  const std::size_t adim = wm.config.action_dim;
  PolicyMoments m{Matrix(z.rows, adim), Matrix(z.rows, adim)};
  for (std::size_t r = 0; r < z.rows; ++r)
    for (std::size_t d = 0; d < adim; ++d) {
      m.mean(r, d) = out(r, d);
      m.log_std(r, d) = clamp_log_std(out(r, adim + d), wm.config.log_std_min, wm.config.log_std_max);
    }
  return m;
}

Matrix policy_mean_action(const WorldModelParams& wm, const Matrix& z) {
  Matrix a = policy_moments(wm, z).mean;
  for (double& v : a.data) v = std::tanh(v);
  return a;
}

double squashed_log_prob_from_noise(std::span<const double> log_std, std::span<const double> eps,
                                    std::span<const double> pre_squash) {
  double lp = 0.0;
  for (std::size_t d = 0; d < eps.size(); ++d)
    lp += -0.5 * eps[d] * eps[d] - log_std[d] - kHalfLog2Pi - log_one_minus_tanh_sq(pre_squash[d]);
  return lp;
}

double squashed_log_prob(std::span<const double> mean, std::span<const double> log_std,
                         std::span<const double> action) {
  double lp = 0.0;
  for (std::size_t d = 0; d < action.size(); ++d) {
    require(action[d] > -1.0 && action[d] < 1.0, "squashed_log_prob: action outside (-1, 1)");
    const double u = std::atanh(action[d]);
    const double eps = (u - mean[d]) * std::exp(-log_std[d]);
    lp += -0.5 * eps * eps - log_std[d] - kHalfLog2Pi - log_one_minus_tanh_sq(u);
  }
  return lp;
}

PolicyBatchSample sample_policy_batch(const PolicyMoments& m, Rng& rng) {
  const std::size_t rows = m.mean.rows, adim = m.mean.cols;
  PolicyBatchSample s{Matrix(rows, adim), Matrix(rows, 1)};
  std::vector<double> eps(adim), u(adim);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < adim; ++d) {
      eps[d] = rng.normal();
      u[d] = m.mean(r, d) + std::exp(m.log_std(r, d)) * eps[d];
      s.actions(r, d) = std::tanh(u[d]);
    }
    s.log_probs(r, 0) = squashed_log_prob_from_noise(m.log_std.row(r), eps, u);
  }
  return s;
}

// ---- single-state forms ----

LatentState encode(const WorldModelParams& wm, std::span<const double> obs) {
  return {encode_batch(wm, stack(obs)).data};
}

LatentState dynamics_step(const WorldModelParams& wm, const LatentState& z, std::span<const double> a) {
  return {dynamics_batch(wm, stack(z.z), stack(a)).data};
}

double predict_reward(const WorldModelParams& wm, const LatentState& z, std::span<const double> a) {
  return reward_batch(wm, stack(z.z), stack(a)).data[0];
}

double predict_q(const WorldModelParams& wm, const LatentState& z, std::span<const double> a, bool use_target,
                 QReduce reduce) {
  return q_batch(wm, stack(z.z), stack(a), use_target, reduce).data[0];
}

PolicyDistribution policy_distribution(const WorldModelParams& wm, const LatentState& z) {
  const PolicyMoments m = policy_moments(wm, stack(z.z));
  return {m.mean.data, m.log_std.data};
}

PolicySample policy_sample(const WorldModelParams& wm, const LatentState& z, std::uint64_t seed) {
  const PolicyMoments m = policy_moments(wm, stack(z.z));
  Rng rng(seed);
  const PolicyBatchSample s = sample_policy_batch(m, rng);
  return {s.actions.data, s.log_probs.data[0], {m.mean.data, m.log_std.data}};
}

PolicyVars policy_on_tape(const WorldModelParams& wm, ad::ParamHandle& policy, ad::Var z) {
  const std::size_t adim = wm.config.action_dim;
  ad::Var out = wm.policy_head.forward(policy, z);
  ad::Var mean = ad::slice_cols(out, 0, adim);
  ad::Var raw = ad::slice_cols(out, adim, 2 * adim);
  const double lo = wm.config.log_std_min, hi = wm.config.log_std_max;
  ad::Var log_std = (ad::tanh(raw) + 1.0) * (0.5 * (hi - lo)) + lo;
  return {mean, log_std};
}

// ---- model objective ----

ModelHandles::ModelHandles(ad::Tape& tape, const WorldModelParams& wm)
    : encoder(tape, wm.encoder.params()),
      dynamics(tape, wm.dynamics.params()),
      reward(tape, wm.reward_head.params()),
      value1(tape, wm.value_head_1.params()),
      value2(tape, wm.value_head_2.params()) {}

ModelTargets compute_model_targets(const WorldModelParams& wm, const replay::SegmentBatch& batch) {
  const std::size_t horizon = batch.horizon();
  require(horizon >= 1 && batch.observations.size() == horizon + 1 && batch.rewards.size() == horizon,
          "model_loss: malformed segment batch");
  ModelTargets t;
  for (std::size_t i = 0; i < horizon; ++i) {
    Matrix next = encode_batch(wm, batch.observations[i + 1]);
    const Matrix q = q_batch(wm, next, policy_mean_action(wm, next), true, QReduce::min);
    Matrix td = batch.rewards[i];
    for (std::size_t r = 0; r < td.rows; ++r) td(r, 0) += wm.config.gamma * q(r, 0);
    t.next_latents.push_back(std::move(next));
    t.td_targets.push_back(std::move(td));
  }
  return t;
}

ad::Var model_loss_on_tape(const WorldModelParams& wm, ModelHandles& h, const replay::SegmentBatch& batch,
                           const ModelTargets& targets, ModelLossTerms* terms, std::vector<Matrix>* latents) {
  ad::Tape& tape = h.encoder.tape();
  const std::size_t horizon = batch.horizon();
  require(targets.next_latents.size() == horizon && targets.td_targets.size() == horizon,
          "model_loss: targets do not match the segment horizon");
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  ModelLossTerms acc;
  // The reward and value heads read a second rollout through a detached copy
  // of the dynamics parameters: their errors reach the encoder, never d.
  ad::ParamHandle dynamics_copy(tape, wm.dynamics.params());
  ad::Var z = wm.encoder.forward(h.encoder, tape.constant(batch.observations[0]));
  ad::Var z_heads = z;
  ad::Var total = tape.constant(Matrix(1, 1, 0.0));
  for (std::size_t i = 0; i < horizon; ++i) {
    if (latents) latents->push_back(tape.value(z));
    ad::Var a = tape.constant(batch.actions[i]);
    ad::Var z_next = wm.dynamics.forward(h.dynamics, ad::concat_cols(z, a));
    ad::Var za = ad::concat_cols(z_heads, a);
    ad::Var latent = ad::sum(ad::square(z_next - tape.constant(targets.next_latents[i]))) * inv_batch;
    ad::Var reward = ad::mean(ad::square(wm.reward_head.forward(h.reward, za) - tape.constant(batch.rewards[i])));
    ad::Var td = tape.constant(targets.td_targets[i]);
    ad::Var value = ad::mean(ad::square(wm.value_head_1.forward(h.value1, za) - td));
    if (wm.config.value_heads == 2) value = value + ad::mean(ad::square(wm.value_head_2.forward(h.value2, za) - td));
    acc.latent += tape.scalar(latent);
    acc.reward += tape.scalar(reward);
    acc.value += tape.scalar(value);
    total = total + latent + reward + value;
    z = z_next;
    if (i + 1 < horizon) z_heads = wm.dynamics.forward(dynamics_copy, za);
  }
  acc.total = tape.scalar(total);
  if (terms) *terms = acc;
  return total;
}

ModelLossTerms model_loss(const WorldModelParams& wm, const replay::SegmentBatch& batch, const ModelTargets* targets) {
  const ModelTargets own = targets ? ModelTargets{} : compute_model_targets(wm, batch);
  ad::Tape tape;
  ModelHandles h(tape, wm);
  ModelLossTerms terms;
  model_loss_on_tape(wm, h, batch, targets ? *targets : own, &terms);
  return terms;
}

ModelGradients model_loss_grad(const WorldModelParams& wm, const replay::SegmentBatch& batch,
                               const ModelTargets* targets) {
  const ModelTargets own = targets ? ModelTargets{} : compute_model_targets(wm, batch);
  ad::Tape tape;
  ModelHandles h(tape, wm);
  ModelGradients g;
  ad::Var loss = model_loss_on_tape(wm, h, batch, targets ? *targets : own, &g.terms);
  tape.backward(loss);
  g.encoder = h.encoder.gradient();
  g.dynamics = h.dynamics.gradient();
  g.reward = h.reward.gradient();
  g.value1 = h.value1.gradient();
  g.value2 = h.value2.gradient();
  return g;
}

void soft_update_targets(WorldModelParams& wm, double tau) {
  require(tau > 0.0 && tau <= 1.0, "soft_update_targets: tau must lie in (0, 1]");
  auto blend = [tau](ad::Mlp& target, const ad::Mlp& live) {
    auto t = target.params().values();
    const auto l = live.params().values();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (1.0 - tau) * t[i] + tau * l[i];
  };
  blend(wm.target_value_1, wm.value_head_1);
  blend(wm.target_value_2, wm.value_head_2);
}

// ---- checkpoints ----

namespace {

struct HeadRef {
  const char* name;
  ad::Mlp WorldModelParams::*member;
};

constexpr HeadRef kHeads[] = {
    {"encoder", &WorldModelParams::encoder},
    {"dynamics", &WorldModelParams::dynamics},
    {"reward_head", &WorldModelParams::reward_head},
    {"value_head_1", &WorldModelParams::value_head_1},
    {"value_head_2", &WorldModelParams::value_head_2},
    {"policy_head", &WorldModelParams::policy_head},
    {"target_value_1", &WorldModelParams::target_value_1},
    {"target_value_2", &WorldModelParams::target_value_2},
};

}  // namespace

void save_world_model(const std::filesystem::path& dir, const WorldModelParams& wm) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["obs_dim"] = wm.config.obs_dim;
  manifest["action_dim"] = wm.config.action_dim;
  manifest["latent_dim"] = wm.config.latent_dim;
  manifest["hidden"] = wm.config.hidden;
  manifest["gamma"] = wm.config.gamma;
  manifest["value_heads"] = wm.config.value_heads;
  manifest["target_network"] = wm.config.target_network;
  manifest["log_std_min"] = wm.config.log_std_min;
  manifest["log_std_max"] = wm.config.log_std_max;
  auto& heads = manifest["heads"];
  heads = nlohmann::ordered_json::array();
  for (const auto& head : kHeads) {
    const std::string file = std::string(head.name) + ".bin";
    ad::save_params(dir / file, (wm.*head.member).params());
    heads.push_back({{"name", head.name}, {"file", file}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

WorldModelParams load_world_model(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw VersionError("malformed manifest: " + std::string(e.what()));
  }
  if (manifest.value("format_version", 0) != 1) throw VersionError("unsupported checkpoint manifest version");
  WorldModelConfig cfg;
  try {
    cfg.obs_dim = manifest.at("obs_dim");
    cfg.action_dim = manifest.at("action_dim");
    cfg.latent_dim = manifest.at("latent_dim");
    cfg.hidden = manifest.at("hidden");
    cfg.gamma = manifest.at("gamma");
    cfg.value_heads = manifest.at("value_heads");
    cfg.target_network = manifest.at("target_network");
    cfg.log_std_min = manifest.at("log_std_min");
    cfg.log_std_max = manifest.at("log_std_max");
  } catch (const nlohmann::json::exception& e) {
    throw VersionError("incomplete manifest: " + std::string(e.what()));
  }
  WorldModelParams wm = make_zero_world_model(cfg);
  for (const auto& head : kHeads) {
    std::string file;
    for (const auto& entry : manifest.at("heads"))
      if (entry.at("name") == head.name) file = entry.at("file");
    if (file.empty()) throw VersionError(std::string("manifest lacks head ") + head.name);
    ad::load_params_into(dir / file, (wm.*head.member).params());
  }
  return wm;
}

}  // namespace doublyaware::wm
