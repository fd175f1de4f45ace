#pragma once

// Analytic control environments: point-mass navigation, pendulum swing-up,
// cartpole swing-up. Actions are normalized to [-1, 1] and rescaled inside
// each model. Integration is semi-implicit Euler at dt = 0.05 s and every
// episode lasts 200 steps.
//
// Physical constants
//   point_mass: unit mass in a [-2, 2]^2 box, acceleration 2 * a, linear drag
//               0.5 / s, goal at the origin. Walls clamp position and zero the
//               normal velocity.
//   pendulum:   m = 1 kg, l = 1 m, g = 9.81 m/s^2, torque 2 * a N m, angular
//               speed clipped to +-8 rad/s, theta = 0 upright, frictionless
//               unless EnvOptions::pendulum_damping is set.
//   cartpole:   cart 1 kg, pole 0.1 kg with half-length 0.5 m, force 10 * a N,
//               track [-3, 3] m, pole speed clipped to +-20 rad/s, starts
//               hanging.
//
// Rewards (evaluated at the pre-step state and the clipped action)
//   point_mass: -(x^2 + y^2)                          in [-8, 0]
//   pendulum:   cos(theta) - 0.1 w^2 - 0.001 u^2       in [-7.404, 1]
//   cartpole:   cos(theta) - 0.25 x^2                  in [-3.25, 1]

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace doublyaware::env {

enum class EnvId { point_mass, pendulum, cartpole };

EnvId parse_env_id(std::string_view name);
std::string to_string(EnvId id);

struct EnvSpec {
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  std::vector<double> action_low;
  std::vector<double> action_high;
  std::uint32_t episode_length = 200;
  double dt = 0.05;
  // Documented per-step reward interval.
  double reward_min = 0.0;
  double reward_max = 0.0;
};

struct EnvState {
  std::vector<double> observation;
  std::uint32_t time_step = 0;
  bool done = false;
  // Noise-free physical state (point_mass: x y vx vy; pendulum: theta w;
  // cartpole: x v theta w).
  std::vector<double> physics;
  std::uint64_t seed = 0;

  bool operator==(const EnvState&) const = default;
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
};

struct EnvOptions {
  // Standard deviation of seeded Gaussian noise added to the physical
  // quantities before they are rendered into the observation.
  double observation_noise = 0.0;
  double pendulum_damping = 0.0;
};

class Environment {
 public:
  explicit Environment(EnvId id, EnvOptions options = {});

  EnvId id() const { return id_; }
  const EnvSpec& spec() const { return spec_; }
  const EnvOptions& options() const { return options_; }

  EnvState reset(std::uint64_t seed) const;
  StepResult step(const EnvState& state, std::span<const double> action) const;

  // Builds a state from explicit physical coordinates (tests, oracles).
  EnvState from_physics(std::vector<double> physics, std::uint64_t seed = 0, std::uint32_t time_step = 0) const;
  // Pendulum mechanical energy 1/2 m l^2 w^2 + m g l cos(theta).
  double pendulum_energy(const EnvState& state) const;

 private:
  std::vector<double> observe(const std::vector<double>& physics, std::uint64_t seed, std::uint32_t t) const;

  EnvId id_;
  EnvOptions options_;
  EnvSpec spec_;
};

EnvState reset(EnvId id, std::uint64_t seed);
StepResult step(EnvId id, const EnvState& state, std::span<const double> action);

}  // namespace doublyaware::env
