// Serial reference vs OpenMP kernels, plus end-to-end planning and learning costs.

#include <benchmark/benchmark.h>

#include <vector>

#include "doublyaware/common.hpp"
#include "doublyaware/env.hpp"
#include "doublyaware/grpc.hpp"
#include "doublyaware/kernels.hpp"
#include "doublyaware/planner.hpp"
#include "doublyaware/replay.hpp"
#include "doublyaware/world_model.hpp"

namespace da = doublyaware;

namespace {

struct AffineData {
  std::size_t rows, in, out;
  std::vector<double> x, w, b, y, dy, dx, dw, db;
  AffineData(std::size_t r, std::size_t i, std::size_t o)
      : rows(r), in(i), out(o), x(r * i), w(i * o), b(o), y(r * o), dy(r * o), dx(r * i), dw(i * o), db(o) {
    da::Rng rng(7);
    for (auto* v : {&x, &w, &b, &dy})
      for (double& e : *v) e = rng.normal();
  }
};

template <bool Parallel>
void BM_Affine(benchmark::State& state) {
  AffineData d(static_cast<std::size_t>(state.range(0)), 128, 128);
  for (auto _ : state) {
    if (Parallel)
      da::kernels::omp::affine(d.x, d.rows, d.in, d.w, d.b, d.out, d.y);
    else
      da::kernels::serial::affine(d.x, d.rows, d.in, d.w, d.b, d.out, d.y);
    benchmark::DoNotOptimize(d.y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(d.rows * d.in * d.out));
}

template <bool Parallel>
void BM_AffineBackward(benchmark::State& state) {
  AffineData d(static_cast<std::size_t>(state.range(0)), 128, 128);
  for (auto _ : state) {
    if (Parallel) {
      da::kernels::omp::affine_grad_input(d.dy, d.rows, d.out, d.w, d.in, d.dx);
      da::kernels::omp::affine_grad_params(d.x, d.dy, d.rows, d.in, d.out, d.dw, d.db);
    } else {
      da::kernels::serial::affine_grad_input(d.dy, d.rows, d.out, d.w, d.in, d.dx);
      da::kernels::serial::affine_grad_params(d.x, d.dy, d.rows, d.in, d.out, d.dw, d.db);
    }
    benchmark::DoNotOptimize(d.dw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * d.rows * d.in * d.out));
}

da::wm::WorldModelParams point_mass_model() {
  da::wm::WorldModelConfig cfg;
  cfg.obs_dim = 4;
  cfg.action_dim = 2;
  return da::wm::make_world_model(cfg, 3);
}

template <bool Parallel>
void BM_PlanReturns(benchmark::State& state) {
  const auto wm = point_mass_model();
  const da::wm::LatentState z = da::wm::encode(wm, std::vector<double>{0.5, -0.5, 0.0, 0.0});
  const auto seqs = da::planner::sample_mppi_candidates(da::planner::ActionDistribution::initial(3, 2, 1.0), 536, 1);
  for (auto _ : state) benchmark::DoNotOptimize(da::planner::rollout_returns(wm, z, seqs, Parallel));
}

void BM_PlanStep(benchmark::State& state) {
  const auto wm = point_mass_model();
  const da::wm::LatentState z = da::wm::encode(wm, std::vector<double>{0.5, -0.5, 0.0, 0.0});
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(da::planner::plan(wm, z, {}, nullptr, seed++));
}

void BM_LearnRound(benchmark::State& state) {
  auto wm = point_mass_model();
  const da::env::Environment env(da::env::EnvId::point_mass);
  da::replay::ReplayBuffer buffer(4, 2);
  da::Rng rng(5);
  for (int ep = 0; ep < 3; ++ep) {
    auto s = env.reset(static_cast<std::uint64_t>(ep));
    while (!s.done) {
      std::vector<double> a{rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const auto r = env.step(s, a);
      buffer.push({s.observation, a, r.reward, r.state.observation, r.done});
      s = r.state;
    }
  }
  da::grpc::LearnerConfig cfg;
  if (state.range(0) == 1) cfg.objective = da::grpc::PolicyObjective::vanilla;
  da::grpc::Learner learner(cfg);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(learner.learn_round(wm, buffer, seed++));
}

}  // namespace

BENCHMARK(BM_Affine<false>)->Arg(64)->Arg(512)->Arg(2048);
BENCHMARK(BM_Affine<true>)->Arg(64)->Arg(512)->Arg(2048);
BENCHMARK(BM_AffineBackward<false>)->Arg(512)->Arg(2048);
BENCHMARK(BM_AffineBackward<true>)->Arg(512)->Arg(2048);
BENCHMARK(BM_PlanReturns<false>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PlanReturns<true>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PlanStep)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LearnRound)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
