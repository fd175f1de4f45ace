#include "doublyaware/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "doublyaware/common.hpp"
#include "doublyaware/tensor.hpp"

namespace doublyaware::env {

namespace {

constexpr double kDt = 0.05;
constexpr std::uint32_t kEpisodeLength = 200;
constexpr double kGravity = 9.81;

namespace pm {
constexpr double kBox = 2.0;
constexpr double kAccel = 2.0;
constexpr double kDrag = 0.5;
}  // namespace pm

namespace pend {
constexpr double kMass = 1.0;
constexpr double kLength = 1.0;
constexpr double kMaxTorque = 2.0;
constexpr double kMaxSpeed = 8.0;
}  // namespace pend

namespace cp {
constexpr double kCartMass = 1.0;
constexpr double kPoleMass = 0.1;
constexpr double kHalfLength = 0.5;
constexpr double kMaxForce = 10.0;
constexpr double kTrack = 3.0;
constexpr double kMaxSpeed = 20.0;
}  // namespace cp

double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2.0 * std::numbers::pi);
  if (a < 0) a += 2.0 * std::numbers::pi;
  return a - std::numbers::pi;
}

EnvSpec make_spec(EnvId id) {
  EnvSpec s;
  s.dt = kDt;
  s.episode_length = kEpisodeLength;
  switch (id) {
    case EnvId::point_mass:
      s.obs_dim = 4;
      s.action_dim = 2;
      s.reward_min = -8.0;
      s.reward_max = 0.0;
      break;
    case EnvId::pendulum:
      s.obs_dim = 3;
      s.action_dim = 1;
      s.reward_min = -1.0 - 0.1 * pend::kMaxSpeed * pend::kMaxSpeed - 0.001 * pend::kMaxTorque * pend::kMaxTorque;
      s.reward_max = 1.0;
      break;
    case EnvId::cartpole:
      s.obs_dim = 5;
      s.action_dim = 1;
      s.reward_min = -1.0 - 0.25 * cp::kTrack * cp::kTrack;
      s.reward_max = 1.0;
      break;
  }
  s.action_low.assign(s.action_dim, -1.0);
  s.action_high.assign(s.action_dim, 1.0);
  return s;
}

}  // namespace

EnvId parse_env_id(std::string_view name) {
  if (name == "point_mass") return EnvId::point_mass;
  if (name == "pendulum") return EnvId::pendulum;
  if (name == "cartpole") return EnvId::cartpole;
  throw ConfigError("unknown env_id '" + std::string(name) + "'");
}

std::string to_string(EnvId id) {
  switch (id) {
    case EnvId::point_mass: return "point_mass";
    case EnvId::pendulum: return "pendulum";
    case EnvId::cartpole: return "cartpole";
  }
  return "unknown";
}

Environment::Environment(EnvId id, EnvOptions options) : id_(id), options_(options), spec_(make_spec(id)) {
  if (!(options_.observation_noise >= 0.0) || !(options_.pendulum_damping >= 0.0))
    throw ConfigError("environment noise and damping must be non-negative");
}

std::vector<double> Environment::observe(const std::vector<double>& physics, std::uint64_t seed,
                                         std::uint32_t t) const {
  std::vector<double> q = physics;
  if (options_.observation_noise > 0.0) {
    Rng rng(hash64(hash64(seed, 0x0B5E), t));
    for (double& v : q) v += options_.observation_noise * rng.normal();
  }
  switch (id_) {
    case EnvId::point_mass:
      return q;
    case EnvId::pendulum:
      return {std::cos(q[0]), std::sin(q[0]), q[1]};
    case EnvId::cartpole:
      return {q[0], q[1], std::cos(q[2]), std::sin(q[2]), q[3]};
  }
  return q;
}

EnvState Environment::from_physics(std::vector<double> physics, std::uint64_t seed, std::uint32_t time_step) const {
  const std::size_t n = id_ == EnvId::pendulum ? 2 : 4;
  require(physics.size() == n, "from_physics: wrong physical state dimension");
  EnvState s;
  s.physics = std::move(physics);
  s.seed = seed;
  s.time_step = time_step;
  s.done = time_step >= spec_.episode_length;
  s.observation = observe(s.physics, seed, time_step);
  return s;
}

EnvState Environment::reset(std::uint64_t seed) const {
  Rng rng(hash64(seed, 0x5E7));
  std::vector<double> q;
  switch (id_) {
    case EnvId::point_mass:
      q = {rng.uniform(-1.8, 1.8), rng.uniform(-1.8, 1.8), 0.0, 0.0};
      break;
    case EnvId::pendulum:
      q = {rng.uniform(-std::numbers::pi, std::numbers::pi), rng.uniform(-1.0, 1.0)};
      break;
    case EnvId::cartpole:
      q = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), wrap_angle(std::numbers::pi + rng.uniform(-0.2, 0.2)),
           rng.uniform(-0.2, 0.2)};
      break;
  }
  return from_physics(std::move(q), seed, 0);
}

StepResult Environment::step(const EnvState& state, std::span<const double> action) const {
  require(!state.done, "step: episode already terminated");
  require(action.size() == spec_.action_dim, "step: action dimension mismatch");
  if (!all_finite(action)) throw ContractViolation("step: non-finite action");
  std::vector<double> a(action.begin(), action.end());
  for (double& v : a) v = std::clamp(v, -1.0, 1.0);

  std::vector<double> q = state.physics;
  const double dt = spec_.dt;
  double reward = 0.0;
  switch (id_) {
    case EnvId::point_mass: {
      reward = -(q[0] * q[0] + q[1] * q[1]);
      for (int d = 0; d < 2; ++d) {
        double& x = q[static_cast<std::size_t>(d)];
        double& v = q[static_cast<std::size_t>(d + 2)];
        v += dt * (pm::kAccel * a[static_cast<std::size_t>(d)] - pm::kDrag * v);
        x += dt * v;
        if (x > pm::kBox || x < -pm::kBox) {
          x = std::clamp(x, -pm::kBox, pm::kBox);
          v = 0.0;
        }
      }
      break;
    }
    case EnvId::pendulum: {
      using namespace pend;
      const double u = kMaxTorque * a[0];
      reward = std::cos(q[0]) - 0.1 * q[1] * q[1] - 0.001 * u * u;
      const double acc = (kGravity / kLength) * std::sin(q[0]) + u / (kMass * kLength * kLength) -
                         options_.pendulum_damping * q[1];
      q[1] = std::clamp(q[1] + dt * acc, -kMaxSpeed, kMaxSpeed);
      q[0] = wrap_angle(q[0] + dt * q[1]);
      break;
    }
    case EnvId::cartpole: {
      using namespace cp;
      reward = std::cos(q[2]) - 0.25 * q[0] * q[0];
      const double force = kMaxForce * a[0];
      const double total = kCartMass + kPoleMass;
      const double s = std::sin(q[2]);
      const double c = std::cos(q[2]);
      const double temp = (force + kPoleMass * kHalfLength * q[3] * q[3] * s) / total;
      const double theta_acc =
          (kGravity * s - c * temp) / (kHalfLength * (4.0 / 3.0 - kPoleMass * c * c / total));
      const double x_acc = temp - kPoleMass * kHalfLength * theta_acc * c / total;
      q[1] += dt * x_acc;
      q[0] += dt * q[1];
      if (q[0] > kTrack || q[0] < -kTrack) {
        q[0] = std::clamp(q[0], -kTrack, kTrack);
        q[1] = 0.0;
      }
      q[3] = std::clamp(q[3] + dt * theta_acc, -kMaxSpeed, kMaxSpeed);
      q[2] = wrap_angle(q[2] + dt * q[3]);
      break;
    }
  }

  StepResult r;
  r.state = from_physics(std::move(q), state.seed, state.time_step + 1);
  r.reward = reward;
  r.done = r.state.done;
  return r;
}

double Environment::pendulum_energy(const EnvState& state) const {
  require(id_ == EnvId::pendulum, "pendulum_energy: not a pendulum");
  using namespace pend;
  const double w = state.physics[1];
  return 0.5 * kMass * kLength * kLength * w * w + kMass * kGravity * kLength * std::cos(state.physics[0]);
}

EnvState reset(EnvId id, std::uint64_t seed) { return Environment(id).reset(seed); }

StepResult step(EnvId id, const EnvState& state, std::span<const double> action) {
  return Environment(id).step(state, action);
}

}  // namespace doublyaware::env
