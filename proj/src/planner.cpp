#include "doublyaware/planner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doublyaware/common.hpp"
#include "doublyaware/kernels.hpp"

namespace doublyaware::planner {

namespace {

constexpr std::size_t kChunk = 32;

Matrix repeat_row(std::span<const double> z, std::size_t n) {
  Matrix m(n, z.size());
  for (std::size_t r = 0; r < n; ++r) std::copy(z.begin(), z.end(), m.row(r).begin());
  return m;
}

void check_finite(const Matrix& m, const char* what) {
  if (!all_finite(m.data)) throw NumericError(what, "non-finite model output");
}

// Returns of sequences [begin, end); each row is independent of the others.
void returns_range(const wm::WorldModelParams& wm, const wm::LatentState& z0, std::span<const Matrix> seqs,
                   std::size_t begin, std::size_t end, double* out) {
  const std::size_t n = end - begin;
  const std::size_t horizon = seqs[begin].rows;
  const std::size_t adim = wm.config.action_dim;
  Matrix z = repeat_row(z0.z, n);
  std::vector<double> acc(n, 0.0);
  double discount = 1.0;
  Matrix a(n, adim);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < n; ++i) std::copy_n(seqs[begin + i].row(t).data(), adim, a.row(i).data());
    const Matrix r = wm::reward_batch(wm, z, a);
    check_finite(r, "rollout_return");
    for (std::size_t i = 0; i < n; ++i) acc[i] += discount * r.data[i];
    z = wm::dynamics_batch(wm, z, a);
    check_finite(z, "rollout_return");
    discount *= wm.gamma();
  }
  const Matrix a_h = wm::policy_mean_action(wm, z);
  const Matrix q = wm::q_batch(wm, z, a_h, false, wm::QReduce::avg);
  check_finite(q, "rollout_return");
  for (std::size_t i = 0; i < n; ++i) out[i] = acc[i] + discount * q.data[i];
}

}  // namespace

void PlannerConfig::validate() const {
  if (horizon < 1) throw ConfigError("planner: horizon must be at least 1");
  if (iterations < 1) throw ConfigError("planner: iterations must be at least 1");
  // A single candidate is accepted so the degenerate one-sample pipeline stays expressible.
  if (n_policy_prior + n_mppi < 1) throw ConfigError("planner: need at least one trajectory");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("planner: alpha must lie in [0, 1)");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw ConfigError("planner: temperature must be non-negative");
  if (!(sigma_floor > 0.0)) throw ConfigError("planner: sigma_floor must be positive");
  if (!(sigma_init > 0.0)) throw ConfigError("planner: sigma_init must be positive");
  if (!conformal_enabled && elite_count < 1) throw ConfigError("planner: elite_count must be positive");
}

ActionDistribution ActionDistribution::initial(std::size_t horizon, std::size_t action_dim, double sigma_init) {
  return {Matrix(horizon, action_dim, 0.0), Matrix(horizon, action_dim, sigma_init)};
}

ActionDistribution ActionDistribution::shifted(double sigma_init) const {
  ActionDistribution out = initial(mu.rows, mu.cols, sigma_init);
  for (std::size_t t = 0; t + 1 < mu.rows; ++t)
    for (std::size_t d = 0; d < mu.cols; ++d) {
      out.mu(t, d) = mu(t + 1, d);
      out.sigma(t, d) = sigma(t + 1, d);
    }
  return out;
}

std::vector<double> rollout_returns(const wm::WorldModelParams& wm, const wm::LatentState& z0,
                                    std::span<const Matrix> seqs, bool parallel) {
  std::vector<double> out(seqs.size());
  if (seqs.empty()) return out;
  for (const auto& s : seqs) {
    require(s.rows == seqs[0].rows && s.cols == wm.config.action_dim, "rollout_return: action shape mismatch");
    require(std::all_of(s.data.begin(), s.data.end(), [](double v) { return v >= -1.0 && v <= 1.0; }),
            "rollout_return: actions outside [-1, 1]");
  }
  const std::size_t chunks = (seqs.size() + kChunk - 1) / kChunk;
  const int threads = parallel ? kernels::thread_count() : 1;
  if (threads <= 1 || chunks == 1) {
    for (std::size_t c = 0; c < chunks; ++c)
      returns_range(wm, z0, seqs, c * kChunk, std::min(seqs.size(), (c + 1) * kChunk), out.data() + c * kChunk);
    return out;
  }
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
    try {
      const auto b = static_cast<std::size_t>(c) * kChunk;
      returns_range(wm, z0, seqs, b, std::min(seqs.size(), b + kChunk), out.data() + b);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

double rollout_return(const wm::WorldModelParams& wm, const wm::LatentState& z0, const Matrix& actions) {
  return rollout_returns(wm, z0, std::span<const Matrix>(&actions, 1), false)[0];
}

std::vector<LatentTrajectory> sample_policy_priors(const wm::WorldModelParams& wm, const wm::LatentState& z0,
                                                   std::size_t n, std::size_t horizon, std::uint64_t seed,
                                                   bool min_log_std) {
  require(n >= 1, "sample_policy_priors: n must be positive");
  require(horizon >= 1, "sample_policy_priors: horizon must be positive");
  const std::size_t adim = wm.config.action_dim;
  std::vector<LatentTrajectory> out(n);
  for (auto& t : out) {
    t.actions = Matrix(horizon, adim);
    t.source = TrajectorySource::policy_prior;
  }
  Rng rng(seed);
  Matrix z = repeat_row(z0.z, n);
  for (std::size_t t = 0; t < horizon; ++t) {
    wm::PolicyMoments m = wm::policy_moments(wm, z);
    if (min_log_std) std::fill(m.log_std.data.begin(), m.log_std.data.end(), wm.config.log_std_min);
    const wm::PolicyBatchSample s = wm::sample_policy_batch(m, rng);
    check_finite(s.actions, "sample_policy_priors");
    for (std::size_t i = 0; i < n; ++i) std::copy_n(s.actions.row(i).data(), adim, out[i].actions.row(t).data());
    if (t + 1 < horizon) z = wm::dynamics_batch(wm, z, s.actions);
  }
  return out;
}

std::vector<Matrix> sample_mppi_candidates(const ActionDistribution& dist, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "sample_mppi_candidates: n must be positive");
  require(dist.mu.same_shape(dist.sigma), "sample_mppi_candidates: mu/sigma shape mismatch");
  Rng rng(seed);
  std::vector<Matrix> out(n, Matrix(dist.mu.rows, dist.mu.cols));
  for (auto& m : out)
    for (std::size_t k = 0; k < m.data.size(); ++k)
      m.data[k] = std::clamp(dist.mu.data[k] + dist.sigma.data[k] * rng.normal(), -1.0, 1.0);
  return out;
}

std::vector<double> LatentModel::returns(std::span<const Matrix> action_sequences) const {
  return rollout_returns(*wm_, z0_, action_sequences, true);
}

std::vector<Matrix> LatentModel::policy_priors(std::size_t n, std::size_t horizon, std::uint64_t seed) const {
  auto trajs = sample_policy_priors(*wm_, z0_, n, horizon, seed, deterministic_);
  std::vector<Matrix> out;
  out.reserve(n);
  for (auto& t : trajs) out.push_back(std::move(t.actions));
  return out;
}

std::vector<double> nonconformity_scores(std::span<const double> values) {
  require(!values.empty(), "nonconformity_scores: empty list");
  if (!all_finite(values)) throw NumericError("nonconformity_scores", "non-finite value");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::vector<double> out(values.size(), 0.0);
  if (*hi == *lo) return out;
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = 1.0 - (values[i] - *lo) / span;
  return out;
}

std::size_t conformal_rank(std::size_t n, double alpha) {
  require(alpha >= 0.0 && alpha < 1.0, "conformal_rank: alpha must lie in [0, 1)");
  const double x = static_cast<double>(n + 1) * (1.0 - alpha);
  // Products such as 20 * 0.95 land a few ulps above an integer.
  const double r = std::round(x);
  const double k = std::abs(x - r) <= 1e-9 * std::max(1.0, x) ? r : std::ceil(x);
  return static_cast<std::size_t>(k);
}

double conformal_quantile(std::span<const double> scores, double alpha) {
  require(!scores.empty(), "conformal_quantile: empty score list");
  const std::size_t k = conformal_rank(scores.size(), alpha);
  std::vector<double> s(scores.begin(), scores.end());
  if (k > s.size() || k == 0) {
    if (k == 0) return *std::min_element(s.begin(), s.end());
    return *std::max_element(s.begin(), s.end());
  }
  std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k - 1), s.end());
  return s[k - 1];
}

std::vector<LatentTrajectory> conformal_filter(std::span<const LatentTrajectory> trajs, double q_hat) {
  require(!trajs.empty(), "conformal_filter: empty trajectory set");
  std::vector<LatentTrajectory> kept;
  for (const auto& t : trajs)
    if (t.score <= q_hat) kept.push_back(t);
  if (kept.empty()) {
    const auto best = std::max_element(trajs.begin(), trajs.end(),
                                       [](const auto& a, const auto& b) { return a.value < b.value; });
    kept.push_back(*best);
  }
  return kept;
}

ActionDistribution update_moments(std::span<const LatentTrajectory> elites, double temperature, double sigma_floor) {
  require(!elites.empty(), "update_moments: empty elite set");
  const std::size_t rows = elites[0].actions.rows, cols = elites[0].actions.cols;
  double vmax = elites[0].value;
  for (const auto& e : elites) {
    require(e.actions.rows == rows && e.actions.cols == cols, "update_moments: action shape mismatch");
    vmax = std::max(vmax, e.value);
  }
  std::vector<double> w(elites.size());
  double wsum = 0.0;
  for (std::size_t i = 0; i < elites.size(); ++i) {
    w[i] = std::exp(temperature * (elites[i].value - vmax));
    wsum += w[i];
  }
  ActionDistribution out{Matrix(rows, cols), Matrix(rows, cols)};
  for (std::size_t k = 0; k < rows * cols; ++k) {
    double m = 0.0;
    for (std::size_t i = 0; i < elites.size(); ++i) m += w[i] * elites[i].actions.data[k];
    m /= wsum;
    double v = 0.0;
    for (std::size_t i = 0; i < elites.size(); ++i) {
      const double d = elites[i].actions.data[k] - m;
      v += w[i] * d * d;
    }
    v /= wsum;
    out.mu.data[k] = std::clamp(m, -1.0, 1.0);
    out.sigma.data[k] = std::max(std::sqrt(v), sigma_floor);
  }
  return out;
}

PlanResult plan(const TrajectoryModel& model, const PlannerConfig& cfg, const ActionDistribution* warm_start,
                std::uint64_t seed, bool eval) {
  cfg.validate();
  const std::size_t adim = model.action_dim();
  ActionDistribution dist = warm_start ? *warm_start : ActionDistribution::initial(cfg.horizon, adim, cfg.sigma_init);
  require(dist.mu.rows == cfg.horizon && dist.mu.cols == adim && dist.mu.same_shape(dist.sigma),
          "plan: warm start shape mismatch");

  ConformalReport report;
  for (std::size_t j = 0; j < cfg.iterations; ++j) {
    std::vector<Matrix> seqs;
    std::vector<TrajectorySource> sources;
    if (cfg.n_policy_prior > 0) {
      seqs = model.policy_priors(cfg.n_policy_prior, cfg.horizon, hash64(seed, 2 * j));
      sources.assign(seqs.size(), TrajectorySource::policy_prior);
    }
    if (cfg.n_mppi > 0) {
      for (auto& m : sample_mppi_candidates(dist, cfg.n_mppi, hash64(seed, 2 * j + 1))) seqs.push_back(std::move(m));
      sources.resize(seqs.size(), TrajectorySource::mppi);
    }
    const std::vector<double> values = model.returns(seqs);

    std::vector<LatentTrajectory> trajs(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) trajs[i] = {std::move(seqs[i]), values[i], 0.0, sources[i]};

    std::vector<LatentTrajectory> elites;
    if (cfg.conformal_enabled) {
      const std::vector<double> scores = nonconformity_scores(values);
      for (std::size_t i = 0; i < trajs.size(); ++i) trajs[i].score = scores[i];
      report.q_hat = conformal_quantile(scores, cfg.alpha);
      elites = conformal_filter(trajs, report.q_hat);
    } else {
      const std::size_t k = std::min(cfg.elite_count, trajs.size());
      std::vector<std::size_t> order(trajs.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
      for (std::size_t i = 0; i < k; ++i) elites.push_back(trajs[order[i]]);
      report.q_hat = std::nan("");
    }
    report.n_total = trajs.size();
    report.n_kept = elites.size();
    report.kept_fraction = static_cast<double>(report.n_kept) / static_cast<double>(report.n_total);
    dist = update_moments(elites, cfg.temperature, cfg.sigma_floor);
  }

  PlanResult res;
  Rng rng(hash64(seed, 0xAC7));
  res.action.resize(adim);
  for (std::size_t d = 0; d < adim; ++d) {
    const double s = eval ? cfg.sigma_floor : dist.sigma(0, d);
    res.action[d] = std::clamp(dist.mu(0, d) + s * rng.normal(), -1.0, 1.0);
  }
  res.final_dist = dist.shifted(cfg.sigma_init);
  res.refit = std::move(dist);
  res.report = report;
  return res;
}

PlanResult plan(const wm::WorldModelParams& wm, const wm::LatentState& z0, const PlannerConfig& cfg,
                const ActionDistribution* warm_start, std::uint64_t seed, bool eval) {
  return plan(LatentModel(wm, z0, eval), cfg, warm_start, seed, eval);
}

}  // namespace doublyaware::planner
