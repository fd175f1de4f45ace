#include "doublyaware/replay.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "doublyaware/common.hpp"

namespace doublyaware::replay {

namespace {

SegmentBatch empty_batch(std::size_t n, std::size_t horizon, std::size_t obs_dim, std::size_t action_dim) {
  SegmentBatch b;
  b.observations.assign(horizon + 1, Matrix(n, obs_dim));
  b.actions.assign(horizon, Matrix(n, action_dim));
  b.rewards.assign(horizon, Matrix(n, 1));
  b.episode_ids.assign(n, 0);
  b.start_indices.assign(n, 0);
  return b;
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

SegmentBatch make_segment(std::span<const Transition> transitions) {
  require(!transitions.empty(), "make_segment: empty segment");
  const std::size_t horizon = transitions.size();
  const std::size_t obs_dim = transitions[0].state.size();
  const std::size_t action_dim = transitions[0].action.size();
  SegmentBatch b = empty_batch(1, horizon, obs_dim, action_dim);
  for (std::size_t t = 0; t < horizon; ++t) {
    const auto& tr = transitions[t];
    require(tr.state.size() == obs_dim && tr.next_state.size() == obs_dim && tr.action.size() == action_dim,
            "make_segment: inconsistent dimensions");
    if (t > 0) {
      require(bit_equal(tr.state, transitions[t - 1].next_state), "make_segment: non-contiguous transitions");
      require(!transitions[t - 1].done, "make_segment: segment crosses an episode boundary");
    }
    std::copy(tr.state.begin(), tr.state.end(), b.observations[t].data.begin());
    std::copy(tr.action.begin(), tr.action.end(), b.actions[t].data.begin());
    b.rewards[t].data[0] = tr.reward;
  }
  const auto& last = transitions.back().next_state;
  std::copy(last.begin(), last.end(), b.observations[horizon].data.begin());
  return b;
}

SegmentBatch concat(std::span<const SegmentBatch> batches) {
  require(!batches.empty(), "concat: no batches");
  SegmentBatch out = batches[0];
  for (std::size_t i = 1; i < batches.size(); ++i) {
    const auto& b = batches[i];
    require(b.horizon() == out.horizon(), "concat: horizon mismatch");
    for (std::size_t t = 0; t <= out.horizon(); ++t) out.observations[t] = concat_rows(out.observations[t], b.observations[t]);
    for (std::size_t t = 0; t < out.horizon(); ++t) {
      out.actions[t] = concat_rows(out.actions[t], b.actions[t]);
      out.rewards[t] = concat_rows(out.rewards[t], b.rewards[t]);
    }
    out.episode_ids.insert(out.episode_ids.end(), b.episode_ids.begin(), b.episode_ids.end());
    out.start_indices.insert(out.start_indices.end(), b.start_indices.begin(), b.start_indices.end());
  }
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t obs_dim, std::size_t action_dim, std::size_t capacity)
    : obs_dim_(obs_dim), action_dim_(action_dim), capacity_(capacity) {
  require(obs_dim > 0 && action_dim > 0, "ReplayBuffer: dimensions must be positive");
  require(capacity > 0, "ReplayBuffer: capacity must be positive");
}

void ReplayBuffer::push(const Transition& t) {
  require(t.state.size() == obs_dim_ && t.next_state.size() == obs_dim_, "push: observation dimension mismatch");
  require(t.action.size() == action_dim_, "push: action dimension mismatch");
  require(all_finite(t.state) && all_finite(t.next_state) && all_finite(t.action) && std::isfinite(t.reward),
          "push: non-finite transition");
  if (episodes_.empty() || episodes_.back().closed) {
    Episode e;
    e.id = next_id_++;
    e.observations = t.state;
    episodes_.push_back(std::move(e));
  } else {
    const auto& obs = episodes_.back().observations;
    require(bit_equal(t.state, std::span<const double>(obs).last(obs_dim_)),
            "push: transition does not continue the open episode");
  }
  Episode& e = episodes_.back();
  e.observations.insert(e.observations.end(), t.next_state.begin(), t.next_state.end());
  e.actions.insert(e.actions.end(), t.action.begin(), t.action.end());
  e.rewards.push_back(t.reward);
  e.closed = t.done;
  ++size_;
  evict();
}

void ReplayBuffer::evict() {
  while (size_ > capacity_ && episodes_.size() > 1) {
    size_ -= episodes_.front().length();
    episodes_.pop_front();
  }
}

std::size_t ReplayBuffer::segment_count(std::size_t horizon) const {
  std::size_t n = 0;
  for (const auto& e : episodes_)
    if (e.length() > horizon) n += e.length() - horizon;
  return n;
}

std::vector<Transition> ReplayBuffer::episode_transitions(std::size_t i) const {
  const Episode& e = episodes_.at(i);
  std::vector<Transition> out(e.length());
  for (std::size_t k = 0; k < e.length(); ++k) {
    auto obs = [&](std::size_t r) {
      const auto* p = e.observations.data() + r * obs_dim_;
      return std::vector<double>(p, p + obs_dim_);
    };
    out[k].state = obs(k);
    out[k].next_state = obs(k + 1);
    const auto* a = e.actions.data() + k * action_dim_;
    out[k].action.assign(a, a + action_dim_);
    out[k].reward = e.rewards[k];
    out[k].done = e.closed && k + 1 == e.length();
  }
  return out;
}

SegmentBatch ReplayBuffer::sample_segments(std::size_t n, std::size_t horizon, std::uint64_t seed) const {
  require(horizon >= 1, "sample_segments: horizon must be positive");
  std::vector<std::size_t> prefix;
  prefix.reserve(episodes_.size() + 1);
  prefix.push_back(0);
  for (const auto& e : episodes_) prefix.push_back(prefix.back() + (e.length() > horizon ? e.length() - horizon : 0));
  const std::size_t total = prefix.back();
  if (total == 0 || total < n)
    throw NotReady("replay buffer holds " + std::to_string(total) + " segments, " + std::to_string(n) + " requested");

  SegmentBatch b = empty_batch(n, horizon, obs_dim_, action_dim_);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t u = rng.below(total);
    const auto it = std::upper_bound(prefix.begin(), prefix.end(), u) - 1;
    const auto ei = static_cast<std::size_t>(it - prefix.begin());
    const Episode& e = episodes_[ei];
    const std::size_t start = u - *it;
    b.episode_ids[i] = e.id;
    b.start_indices[i] = static_cast<std::uint32_t>(start);
    for (std::size_t t = 0; t <= horizon; ++t)
      std::copy_n(e.observations.data() + (start + t) * obs_dim_, obs_dim_, b.observations[t].row(i).data());
    for (std::size_t t = 0; t < horizon; ++t) {
      std::copy_n(e.actions.data() + (start + t) * action_dim_, action_dim_, b.actions[t].row(i).data());
      b.rewards[t](i, 0) = e.rewards[start + t];
    }
  }
  return b;
}

std::vector<SegmentBatch> ReplayBuffer::sample_group_batches(std::size_t groups, std::size_t n, std::size_t horizon,
                                                             std::uint64_t seed) const {
  require(groups >= 1, "sample_group_batches: need at least one group");
  std::vector<SegmentBatch> out;
  out.reserve(groups);
  for (std::size_t g = 0; g < groups; ++g) out.push_back(sample_segments(n, horizon, hash64(seed, g)));
  return out;
}

namespace {

constexpr char kMagic[4] = {'D', 'A', 'R', 'B'};
constexpr std::uint32_t kVersion = 1;

// Host is required to be little-endian for the raw double copies below.
static_assert(std::endian::native == std::endian::little, "replay dump assumes a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_doubles(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("replay dump: truncated file");
  return v;
}
std::vector<double> get_doubles(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw IoError("replay dump: truncated file");
  return v;
}

}  // namespace

void ReplayBuffer::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(obs_dim_));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(action_dim_));
  put<std::uint64_t>(os, capacity_);
  put<std::uint64_t>(os, next_id_);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(episodes_.size()));
  for (const auto& e : episodes_) {
    put<std::uint64_t>(os, e.id);
    put<std::uint8_t>(os, e.closed ? 1 : 0);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.length()));
    put_doubles(os, e.observations);
    put_doubles(os, e.actions);
    put_doubles(os, e.rewards);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

ReplayBuffer ReplayBuffer::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw VersionError(path.string() + ": not a replay dump");
  if (get<std::uint32_t>(is) != kVersion) throw VersionError(path.string() + ": unsupported replay dump version");
  const auto obs_dim = get<std::uint32_t>(is);
  const auto action_dim = get<std::uint32_t>(is);
  const auto capacity = get<std::uint64_t>(is);
  ReplayBuffer buf(obs_dim, action_dim, capacity);
  buf.next_id_ = get<std::uint64_t>(is);
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    Episode e;
    e.id = get<std::uint64_t>(is);
    e.closed = get<std::uint8_t>(is) != 0;
    const auto k = get<std::uint32_t>(is);
    e.observations = get_doubles(is, (k + 1) * obs_dim);
    e.actions = get_doubles(is, k * action_dim);
    e.rewards = get_doubles(is, k);
    buf.size_ += k;
    buf.episodes_.push_back(std::move(e));
  }
  return buf;
}

}  // namespace doublyaware::replay
