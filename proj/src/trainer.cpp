#include "doublyaware/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "doublyaware/common.hpp"
#include "doublyaware/replay.hpp"

namespace doublyaware::trainer {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

Mode parse_mode(std::string_view name) {
  if (name == "doublyaware") return Mode::doublyaware;
  if (name == "tdmpc_cp") return Mode::tdmpc_cp;
  if (name == "tdmpc_vanilla") return Mode::tdmpc_vanilla;
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::doublyaware: return "doublyaware";
    case Mode::tdmpc_cp: return "tdmpc_cp";
    case Mode::tdmpc_vanilla: return "tdmpc_vanilla";
  }
  return "unknown";
}

void RunConfig::validate() const {
  if (buffer_capacity < 1) throw ConfigError("buffer_capacity must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (planner.horizon != learner.horizon)
    throw ConfigError("planner.horizon and learner.horizon must agree");
  planner.validate();
  learner.validate();
  world_model.validate();
}

RunConfig effective_config(const RunConfig& cfg) {
  RunConfig out = cfg;
  const env::Environment e(cfg.env_id, cfg.env_options);
  out.world_model.obs_dim = e.spec().obs_dim;
  out.world_model.action_dim = e.spec().action_dim;
  switch (cfg.mode) {
    case Mode::doublyaware:
      out.planner.conformal_enabled = true;
      out.learner.objective = grpc::PolicyObjective::grpc;
      break;
    case Mode::tdmpc_cp:
      out.planner.conformal_enabled = true;
      out.learner.objective = grpc::PolicyObjective::vanilla;
      break;
    case Mode::tdmpc_vanilla:
      out.planner.conformal_enabled = false;
      out.learner.objective = grpc::PolicyObjective::vanilla;
      break;
  }
  return out;
}

// ---- JSON ----

namespace {

const char* kl_name(grpc::KlMode m) { return m == grpc::KlMode::closed_form ? "closed_form" : "sampled"; }
const char* optimizer_name(grpc::OptimizerKind k) { return k == grpc::OptimizerKind::adam ? "adam" : "sgd"; }
const char* objective_name(grpc::PolicyObjective o) { return o == grpc::PolicyObjective::grpc ? "grpc" : "vanilla"; }

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["env_id"] = env::to_string(c.env_id);
  j["env"] = {{"observation_noise", c.env_options.observation_noise},
              {"pendulum_damping", c.env_options.pendulum_damping}};
  j["total_env_steps"] = c.total_env_steps;
  j["seed_episodes"] = c.seed_episodes;
  j["eval_every"] = c.eval_every;
  j["eval_episodes"] = c.eval_episodes;
  j["buffer_capacity"] = c.buffer_capacity;
  j["mode"] = to_string(c.mode);
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir.string();
  const auto& p = c.planner;
  j["planner"] = {{"horizon", p.horizon},
                  {"iterations", p.iterations},
                  {"n_policy_prior", p.n_policy_prior},
                  {"n_mppi", p.n_mppi},
                  {"alpha", p.alpha},
                  {"temperature", p.temperature},
                  {"sigma_floor", p.sigma_floor},
                  {"sigma_init", p.sigma_init},
                  {"conformal_enabled", p.conformal_enabled},
                  {"elite_count", p.elite_count}};
  const auto& l = c.learner;
  j["learner"] = {{"group_size", l.group_size},
                  {"tau_softmax", l.tau_softmax},
                  {"beta", l.beta},
                  {"epsilon_max", l.epsilon_max},
                  {"lr", l.lr},
                  {"batch_size", l.batch_size},
                  {"horizon", l.horizon},
                  {"updates_per_round", l.updates_per_round},
                  {"polyak", l.polyak},
                  {"sigma_floor", l.sigma_floor},
                  {"objective", objective_name(l.objective)},
                  {"kl_mode", kl_name(l.kl_mode)},
                  {"optimizer", optimizer_name(l.optimizer)},
                  {"detach_policy_latents", l.detach_policy_latents}};
  const auto& w = c.world_model;
  j["world_model"] = {{"latent_dim", w.latent_dim},         {"hidden", w.hidden},
                      {"gamma", w.gamma},                   {"value_heads", w.value_heads},
                      {"target_network", w.target_network}, {"log_std_min", w.log_std_min},
                      {"log_std_max", w.log_std_max}};
  return j;
}

RunConfig config_from_json(const json& j) {
  check_keys(j,
             {"env_id", "env", "total_env_steps", "seed_episodes", "eval_every", "eval_episodes", "buffer_capacity",
              "mode", "seed", "out_dir", "planner", "learner", "world_model"},
             "config");
  RunConfig c;
  std::string s;
  if (j.contains("env_id")) {
    read(j, "env_id", s);
    c.env_id = env::parse_env_id(s);
  }
  if (j.contains("env")) {
    const json& e = j.at("env");
    check_keys(e, {"observation_noise", "pendulum_damping"}, "env");
    read(e, "observation_noise", c.env_options.observation_noise);
    read(e, "pendulum_damping", c.env_options.pendulum_damping);
  }
  read(j, "total_env_steps", c.total_env_steps);
  read(j, "seed_episodes", c.seed_episodes);
  read(j, "eval_every", c.eval_every);
  read(j, "eval_episodes", c.eval_episodes);
  read(j, "buffer_capacity", c.buffer_capacity);
  if (j.contains("mode")) {
    read(j, "mode", s);
    c.mode = parse_mode(s);
  }
  read(j, "seed", c.seed);
  if (j.contains("out_dir")) {
    read(j, "out_dir", s);
    c.out_dir = s;
  }
  if (j.contains("planner")) {
    const json& p = j.at("planner");
    check_keys(p,
               {"horizon", "iterations", "n_policy_prior", "n_mppi", "alpha", "temperature", "sigma_floor",
                "sigma_init", "conformal_enabled", "elite_count"},
               "planner");
    read(p, "horizon", c.planner.horizon);
    read(p, "iterations", c.planner.iterations);
    read(p, "n_policy_prior", c.planner.n_policy_prior);
    read(p, "n_mppi", c.planner.n_mppi);
    read(p, "alpha", c.planner.alpha);
    read(p, "temperature", c.planner.temperature);
    read(p, "sigma_floor", c.planner.sigma_floor);
    read(p, "sigma_init", c.planner.sigma_init);
    read(p, "conformal_enabled", c.planner.conformal_enabled);
    read(p, "elite_count", c.planner.elite_count);
  }
  if (j.contains("learner")) {
    const json& l = j.at("learner");
    check_keys(l,
               {"group_size", "tau_softmax", "beta", "epsilon_max", "lr", "batch_size", "horizon",
                "updates_per_round", "polyak", "sigma_floor", "objective", "kl_mode", "optimizer",
                "detach_policy_latents"},
               "learner");
    read(l, "group_size", c.learner.group_size);
    read(l, "tau_softmax", c.learner.tau_softmax);
    read(l, "beta", c.learner.beta);
    read(l, "epsilon_max", c.learner.epsilon_max);
    read(l, "lr", c.learner.lr);
    read(l, "batch_size", c.learner.batch_size);
    read(l, "horizon", c.learner.horizon);
    read(l, "updates_per_round", c.learner.updates_per_round);
    read(l, "polyak", c.learner.polyak);
    read(l, "sigma_floor", c.learner.sigma_floor);
    if (l.contains("objective")) {
      read(l, "objective", s);
      if (s != "grpc" && s != "vanilla") throw ConfigError("learner.objective must be grpc or vanilla");
      c.learner.objective = s == "grpc" ? grpc::PolicyObjective::grpc : grpc::PolicyObjective::vanilla;
    }
    if (l.contains("kl_mode")) {
      read(l, "kl_mode", s);
      if (s != "closed_form" && s != "sampled") throw ConfigError("learner.kl_mode must be closed_form or sampled");
      c.learner.kl_mode = s == "closed_form" ? grpc::KlMode::closed_form : grpc::KlMode::sampled;
    }
    if (l.contains("optimizer")) {
      read(l, "optimizer", s);
      if (s != "adam" && s != "sgd") throw ConfigError("learner.optimizer must be adam or sgd");
      c.learner.optimizer = s == "adam" ? grpc::OptimizerKind::adam : grpc::OptimizerKind::sgd;
    }
    read(l, "detach_policy_latents", c.learner.detach_policy_latents);
  }
  if (j.contains("world_model")) {
    const json& w = j.at("world_model");
    check_keys(w, {"latent_dim", "hidden", "gamma", "value_heads", "target_network", "log_std_min", "log_std_max"},
               "world_model");
    read(w, "latent_dim", c.world_model.latent_dim);
    read(w, "hidden", c.world_model.hidden);
    read(w, "gamma", c.world_model.gamma);
    read(w, "value_heads", c.world_model.value_heads);
    read(w, "target_network", c.world_model.target_network);
    read(w, "log_std_min", c.world_model.log_std_min);
    read(w, "log_std_max", c.world_model.log_std_max);
  }
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---- evaluation ----

std::uint64_t eval_episode_seed(std::uint64_t seed, std::size_t k) { return hash64(hash64(seed, 0xE7A1), k); }

namespace {

EvalSummary summarize(std::vector<double> returns) {
  EvalSummary s;
  s.episodes = returns.size();
  const double n = static_cast<double>(returns.size());
  s.mean = std::accumulate(returns.begin(), returns.end(), 0.0) / n;
  double v = 0.0;
  for (double r : returns) v += (r - s.mean) * (r - s.mean);
  s.std = std::sqrt(v / n);
  s.returns = std::move(returns);
  return s;
}

}  // namespace

EvalSummary evaluate(const wm::WorldModelParams& wm, const planner::PlannerConfig& planner_cfg,
                     const env::Environment& env, std::size_t episodes, std::uint64_t seed, bool policy_only) {
  require(episodes >= 1, "evaluate: need at least one episode");
  std::vector<double> returns;
  for (std::size_t k = 0; k < episodes; ++k) {
    const std::uint64_t ep_seed = eval_episode_seed(seed, k);
    env::EnvState state = env.reset(ep_seed);
    std::optional<planner::ActionDistribution> warm;
    double total = 0.0;
    while (!state.done) {
      const wm::LatentState z = wm::encode(wm, state.observation);
      std::vector<double> action;
      if (policy_only) {
        action = wm::policy_mean_action(wm, Matrix::row_vector(z.z)).data;
      } else {
        const auto res =
            planner::plan(wm, z, planner_cfg, warm ? &*warm : nullptr, hash64(ep_seed, state.time_step), true);
        action = res.action;
        warm = res.final_dist;
      }
      const env::StepResult sr = env.step(state, action);
      total += sr.reward;
      state = sr.state;
    }
    returns.push_back(total);
  }
  return summarize(std::move(returns));
}

EvalSummary evaluate_checkpoint(const fs::path& checkpoint, env::EnvId env_id, std::size_t episodes,
                                std::uint64_t seed, bool policy_only, const planner::PlannerConfig& planner_cfg) {
  require(episodes >= 1, "evaluate: need at least one episode");
  const wm::WorldModelParams wm = wm::load_world_model(checkpoint);
  const env::Environment env(env_id);
  if (wm.config.obs_dim != env.spec().obs_dim || wm.config.action_dim != env.spec().action_dim)
    throw VersionError("checkpoint dimensions do not match environment " + env::to_string(env_id));
  planner::PlannerConfig p = planner_cfg;
  return evaluate(wm, p, env, episodes, seed, policy_only);
}

ordered_json to_json(const EvalSummary& s) {
  ordered_json j;
  j["episodes"] = s.episodes;
  j["mean"] = s.mean;
  j["std"] = s.std;
  j["returns"] = s.returns;
  return j;
}

double trapezoid_auc(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), "trapezoid_auc: length mismatch");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return area;
}

// ---- training ----

namespace {

class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path) : os_(path, std::ios::trunc) {
    if (!os_) throw IoError("cannot open " + path.string() + " for writing");
    os_ << kMetricsHeader << '\n';
    os_.flush();
  }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) os_ << (i ? "," : "") << fields[i];
    os_ << '\n';
    os_.flush();
    if (!os_) throw IoError("failed writing metrics row");
  }

 private:
  std::ofstream os_;
};

struct LastStats {
  planner::ConformalReport report{std::nan(""), 0, 0, std::nan("")};
  grpc::LossReport loss{std::nan(""), std::nan(""), std::nan(""), std::nan(""), std::nan(""), std::nan(""), 0};
};

std::vector<std::string> metrics_fields(std::size_t env_step, std::size_t grad_step, const char* event,
                                        double episode_return, double eval_mean, double eval_std,
                                        const LastStats& s) {
  const bool planned = s.report.n_total > 0;
  return {std::to_string(env_step),
          std::to_string(grad_step),
          event,
          fmt(episode_return),
          fmt(eval_mean),
          fmt(eval_std),
          planned ? fmt(s.report.q_hat) : "",
          planned ? std::to_string(s.report.n_kept) : "",
          planned ? fmt(s.report.kept_fraction) : "",
          fmt(s.loss.policy_loss),
          fmt(s.loss.kl_value),
          fmt(s.loss.model_latent_loss),
          fmt(s.loss.model_reward_loss),
          fmt(s.loss.model_value_loss),
          fmt(s.loss.mean_advantage_entropy)};
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace

TrainResult train(const RunConfig& config) {
  const RunConfig cfg = effective_config(config);
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out_dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
  write_json(cfg.out_dir / "config.json", to_json(cfg));
  MetricsWriter metrics(cfg.out_dir / "metrics.csv");
  std::ofstream timing(cfg.out_dir / "timing.csv", std::ios::trunc);
  if (!timing) throw IoError("cannot open timing.csv");
  timing << "env_step,event,wall_clock_s\n";
  const auto t0 = std::chrono::steady_clock::now();
  auto log_time = [&](std::size_t step, const char* event) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing << step << ',' << event << ',' << fmt(s) << '\n';
    timing.flush();
  };

  const env::Environment env(cfg.env_id, cfg.env_options);
  const std::size_t adim = env.spec().action_dim;
  wm::WorldModelParams model = wm::make_world_model(cfg.world_model, hash64(cfg.seed, 1));
  grpc::Learner learner(cfg.learner);
  replay::ReplayBuffer buffer(env.spec().obs_dim, adim, cfg.buffer_capacity);
  Rng explore(hash64(cfg.seed, 2));

  TrainResult result;
  LastStats last;
  auto run_eval = [&](std::size_t step) {
    const EvalSummary s = evaluate(model, cfg.planner, env, cfg.eval_episodes, cfg.seed);
    result.evals.push_back({step, s.mean, s.std});
    metrics.row(metrics_fields(step, learner.grad_steps(), "eval", std::nan(""), s.mean, s.std, last));
    wm::save_world_model(cfg.out_dir / "checkpoints" / ("step_" + std::to_string(step)), model);
    log_time(step, "eval");
  };

  std::size_t env_step = 0;
  while (env_step < cfg.total_env_steps) {
    env::EnvState state = env.reset(hash64(hash64(cfg.seed, 3), result.episodes));
    std::optional<planner::ActionDistribution> warm;
    const bool seeding = result.episodes < cfg.seed_episodes;
    double episode_return = 0.0;
    while (!state.done && env_step < cfg.total_env_steps) {
      std::vector<double> action(adim);
      if (seeding) {
        for (double& a : action) a = explore.uniform(-1.0, 1.0);
      } else {
        const auto res = planner::plan(model, wm::encode(model, state.observation), cfg.planner,
                                       warm ? &*warm : nullptr, hash64(hash64(cfg.seed, 4), env_step));
        action = res.action;
        warm = res.final_dist;
        last.report = res.report;
      }
      const env::StepResult sr = env.step(state, action);
      buffer.push({state.observation, action, sr.reward, sr.state.observation, sr.done});
      episode_return += sr.reward;
      state = sr.state;
      ++env_step;
      if (!seeding) {
        try {
          last.loss = learner.learn_round(model, buffer, hash64(hash64(cfg.seed, 5), env_step));
        } catch (const NotReady&) {
        }
      }
      if (env_step % cfg.eval_every == 0) run_eval(env_step);
    }
    if (state.done) {
      ++result.episodes;
      result.episode_returns.push_back(episode_return);
      metrics.row(metrics_fields(env_step, learner.grad_steps(), "episode", episode_return, std::nan(""),
                                 std::nan(""), last));
      log_time(env_step, "episode");
    }
  }
  if (cfg.total_env_steps > 0 && cfg.total_env_steps % cfg.eval_every != 0) run_eval(env_step);

  result.env_steps = env_step;
  result.grad_steps = learner.grad_steps();
  if (!result.evals.empty()) {
    result.final_eval_mean = result.evals.back().mean;
    std::vector<double> x, y;
    for (const auto& e : result.evals) {
      x.push_back(static_cast<double>(e.env_step));
      y.push_back(e.mean);
    }
    result.auc = trapezoid_auc(x, y);
  }
  return result;
}

// ---- ablation ----

AblationResult ablate(const RunConfig& base, const std::vector<Mode>& modes, const std::vector<std::uint64_t>& seeds) {
  require(modes.size() >= 2, "ablate: need at least two modes");
  require(seeds.size() >= 3, "ablate: need at least three seeds");
  std::error_code ec;
  fs::create_directories(base.out_dir, ec);
  if (ec) throw IoError("cannot create " + base.out_dir.string() + ": " + ec.message());

  AblationResult out;
  for (Mode m : modes)
    for (std::uint64_t s : seeds) {
      RunConfig c = base;
      c.mode = m;
      c.seed = s;
      c.out_dir = base.out_dir / (to_string(m) + "_seed" + std::to_string(s));
      const TrainResult r = train(c);
      out.rows.push_back({m, s, r.final_eval_mean, r.auc});
    }

  std::ofstream os(base.out_dir / "ablation.csv", std::ios::trunc);
  if (!os) throw IoError("cannot write ablation.csv");
  os << "mode,seed,final_eval_mean,auc_of_curve\n";
  for (const auto& r : out.rows) os << to_string(r.mode) << ',' << r.seed << ',' << fmt(r.final_eval_mean) << ',' << fmt(r.auc) << '\n';

  std::vector<std::pair<double, Mode>> means;
  for (Mode m : modes) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : out.rows)
      if (r.mode == m) {
        sum += r.auc;
        ++n;
      }
    means.push_back({sum / static_cast<double>(n), m});
  }
  std::stable_sort(means.begin(), means.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::ostringstream v;
  v << env::to_string(base.env_id) << ": ";
  for (std::size_t i = 0; i < means.size(); ++i)
    v << (i ? " > " : "") << to_string(means[i].second) << " (mean auc " << fmt(means[i].first) << ")";
  out.verdict = v.str();
  std::ofstream vs(base.out_dir / "verdict.txt", std::ios::trunc);
  vs << out.verdict << '\n';
  return out;
}

// ---- pendulum oracle ----

std::vector<double> pendulum_energy_controller(const env::EnvState& state) {
  constexpr double g = 9.81, max_torque = 2.0;
  const double theta = std::atan2(state.observation[1], state.observation[0]);
  const double w = state.observation[2];
  double torque;
  if (std::cos(theta) > std::cos(0.6)) {
    torque = -(12.0 * theta + 3.0 * w);
  } else {
    const double energy = 0.5 * w * w + g * std::cos(theta);
    torque = 2.0 * (g - energy) * w;
    if (w == 0.0 && energy < g) torque = max_torque;
  }
  return {std::clamp(torque / max_torque, -1.0, 1.0)};
}

EvalSummary evaluate_pendulum_oracle(const env::Environment& env, std::size_t episodes, std::uint64_t seed) {
  require(env.id() == env::EnvId::pendulum, "pendulum oracle needs the pendulum environment");
  require(episodes >= 1, "evaluate: need at least one episode");
  std::vector<double> returns;
  for (std::size_t k = 0; k < episodes; ++k) {
    env::EnvState state = env.reset(eval_episode_seed(seed, k));
    double total = 0.0;
    while (!state.done) {
      const env::StepResult sr = env.step(state, pendulum_energy_controller(state));
      total += sr.reward;
      state = sr.state;
    }
    returns.push_back(total);
  }
  return summarize(std::move(returns));
}

}  // namespace doublyaware::trainer
