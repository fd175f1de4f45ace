#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "doublyaware/common.hpp"
#include "doublyaware/env.hpp"

using namespace doublyaware;
using env::EnvId;

namespace {

const EnvId kAll[] = {EnvId::point_mass, EnvId::pendulum, EnvId::cartpole};

std::vector<double> random_action(Rng& rng, std::size_t dim, double scale) {
  std::vector<double> a(dim);
  for (double& v : a) v = rng.uniform(-scale, scale);
  return a;
}

}  // namespace

TEST_CASE("specs") {
  CHECK(env::Environment(EnvId::point_mass).spec().obs_dim == 4);
  CHECK(env::Environment(EnvId::pendulum).spec().obs_dim == 3);
  CHECK(env::Environment(EnvId::cartpole).spec().obs_dim == 5);
  for (auto id : kAll) {
    const auto s = env::Environment(id).spec();
    CHECK(s.episode_length == 200);
    CHECK(s.dt == 0.05);
    for (std::size_t i = 0; i < s.action_dim; ++i) {
      CHECK(s.action_low[i] == -1.0);
      CHECK(s.action_high[i] == 1.0);
    }
  }
}

TEST_CASE("environment names round trip and unknown names are config errors") {
  for (auto id : kAll) CHECK(env::parse_env_id(env::to_string(id)) == id);
  CHECK_THROWS_AS(env::parse_env_id("humanoid"), ConfigError);
}

TEST_CASE("reset is deterministic per seed") {
  for (auto id : kAll) {
    CHECK(env::reset(id, 0) == env::reset(id, 0));
    CHECK(env::reset(id, 0).observation != env::reset(id, 1).observation);
    CHECK(env::reset(id, 5).time_step == 0);
    CHECK_FALSE(env::reset(id, 5).done);
  }
}

TEST_CASE("pendulum observations stay on the circle") {
  env::Environment e(EnvId::pendulum);
  Rng rng(3);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto s = e.reset(seed);
    for (int t = 0; t < 200; ++t) {
      const auto& o = s.observation;
      CHECK(std::abs(o[0] * o[0] + o[1] * o[1] - 1.0) < 1e-9);
      if (s.done) break;
      s = e.step(s, random_action(rng, 1, 1.5)).state;
    }
  }
}

TEST_CASE("cartpole seed 7 regression fixture") {
  const std::vector<double> expected = {-0.075236505896662087, -0.059503446321564527, -0.99183379155338691,
                                        -0.12753717078888291, 0.16720909352671326};
  const auto s = env::reset(EnvId::cartpole, 7);
  REQUIRE(s.observation.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(s.observation[i] == doctest::Approx(expected[i]).epsilon(1e-14));
  const auto r = env::step(EnvId::cartpole, s, std::vector<double>{0.3});
  const std::vector<double> next = {-0.071130465812389604, 0.082120801685449621, -0.98992229718853086,
                                    -0.14161160096892486, 0.28407519243383378};
  for (std::size_t i = 0; i < 5; ++i) CHECK(r.state.observation[i] == doctest::Approx(next[i]).epsilon(1e-14));
  CHECK(r.reward == doctest::Approx(-0.99324892450827151).epsilon(1e-14));
}

TEST_CASE("point mass at the goal with zero action is a fixed point") {
  env::Environment e(EnvId::point_mass);
  auto s = e.from_physics({0.0, 0.0, 0.0, 0.0});
  for (int t = 0; t < 10; ++t) {
    const auto r = e.step(s, std::vector<double>{0.0, 0.0});
    CHECK(r.reward == 0.0);
    CHECK(r.state.physics == s.physics);
    s = r.state;
  }
}

TEST_CASE("frictionless pendulum conserves energy per step") {
  env::Environment e(EnvId::pendulum);
  // Hanging at rest, then a small swing around the bottom.
  for (const auto& q : {std::vector<double>{std::numbers::pi, 0.0}, std::vector<double>{std::numbers::pi - 0.05, 0.0},
                        std::vector<double>{std::numbers::pi, 0.1}}) {
    auto s = e.from_physics(q);
    const double e0 = e.pendulum_energy(s);
    for (int t = 0; t < 199; ++t) {
      const auto r = e.step(s, std::vector<double>{0.0});
      CHECK(std::abs(e.pendulum_energy(r.state) - e.pendulum_energy(s)) < 1e-3);
      CHECK(std::abs(e.pendulum_energy(r.state) - e0) < 1e-2);
      s = r.state;
    }
  }
}

TEST_CASE("damping removes energy") {
  env::EnvOptions opts;
  opts.pendulum_damping = 0.5;
  env::Environment e(EnvId::pendulum, opts);
  auto s = e.from_physics({std::numbers::pi - 1.0, 0.0});
  const double e0 = e.pendulum_energy(s);
  for (int t = 0; t < 100; ++t) s = e.step(s, std::vector<double>{0.0}).state;
  CHECK(e.pendulum_energy(s) < e0 - 0.1);
}

TEST_CASE("episodes end at episode_length and stepping after done is a contract violation") {
  for (auto id : kAll) {
    env::Environment e(id);
    auto s = e.reset(1);
    const std::vector<double> zero(e.spec().action_dim, 0.0);
    std::uint32_t steps = 0;
    while (!s.done) {
      const auto r = e.step(s, zero);
      CHECK(r.done == r.state.done);
      s = r.state;
      ++steps;
    }
    CHECK(steps == 200);
    CHECK(s.time_step == 200);
    CHECK_THROWS_AS(e.step(s, zero), ContractViolation);
  }
}

TEST_CASE("action dimension and finiteness are checked") {
  for (auto id : kAll) {
    env::Environment e(id);
    const auto s = e.reset(2);
    CHECK_THROWS_AS(e.step(s, std::vector<double>(e.spec().action_dim + 1, 0.0)), ContractViolation);
    std::vector<double> bad(e.spec().action_dim, 0.0);
    bad[0] = std::nan("");
    CHECK_THROWS_AS(e.step(s, bad), ContractViolation);
    bad[0] = INFINITY;
    CHECK_THROWS_AS(e.step(s, bad), ContractViolation);
  }
}

TEST_CASE("out-of-range actions behave like their clipped versions") {
  Rng rng(9);
  for (auto id : kAll) {
    env::Environment e(id);
    auto s = e.reset(4);
    for (int t = 0; t < 100; ++t) {
      auto a = random_action(rng, e.spec().action_dim, 5.0);
      auto clipped = a;
      for (double& v : clipped) v = std::clamp(v, -1.0, 1.0);
      const auto r1 = e.step(s, a);
      const auto r2 = e.step(s, clipped);
      CHECK(r1.state == r2.state);
      CHECK(r1.reward == r2.reward);
      s = r1.state;
    }
  }
}

TEST_CASE("identical seeds and actions give identical trajectories") {
  for (auto id : kAll) {
    env::EnvOptions opts;
    opts.observation_noise = 0.1;
    env::Environment e(id, opts);
    auto run = [&] {
      Rng rng(21);
      auto s = e.reset(33);
      std::vector<double> trace;
      while (!s.done) {
        const auto r = e.step(s, random_action(rng, e.spec().action_dim, 1.0));
        trace.insert(trace.end(), r.state.observation.begin(), r.state.observation.end());
        trace.push_back(r.reward);
        s = r.state;
      }
      return trace;
    };
    CHECK(run() == run());
  }
}

TEST_CASE("observation noise perturbs observations only") {
  env::EnvOptions opts;
  opts.observation_noise = 0.2;
  env::Environment noisy(EnvId::point_mass, opts);
  env::Environment clean(EnvId::point_mass);
  const auto a = noisy.reset(8);
  const auto b = clean.reset(8);
  CHECK(a.physics == b.physics);
  CHECK(a.observation != b.observation);
  const std::vector<double> act = {0.4, -0.2};
  CHECK(noisy.step(a, act).state.physics == clean.step(b, act).state.physics);
  CHECK(noisy.step(a, act).reward == clean.step(b, act).reward);
}

TEST_CASE("rewards stay inside the documented intervals") {
  Rng rng(12);
  for (auto id : kAll) {
    env::Environment e(id);
    const auto& spec = e.spec();
    for (std::uint64_t ep = 0; ep < 30; ++ep) {
      auto s = e.reset(ep);
      // Bang-bang pushes drive the states towards their extremes.
      const double sign = ep % 2 == 0 ? 1.0 : -1.0;
      while (!s.done) {
        auto a = ep % 3 == 0 ? random_action(rng, spec.action_dim, 2.0) : std::vector<double>(spec.action_dim, sign);
        const auto r = e.step(s, a);
        CHECK(std::isfinite(r.reward));
        CHECK(r.reward >= spec.reward_min);
        CHECK(r.reward <= spec.reward_max);
        for (double v : r.state.observation) CHECK(std::isfinite(v));
        s = r.state;
      }
    }
  }
}
