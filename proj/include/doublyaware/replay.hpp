#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <span>
#include <vector>

#include "doublyaware/tensor.hpp"

namespace doublyaware::replay {

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool done = false;
};

// B horizon segments stored time-major: observations[t] is B x obs_dim for
// t = 0..H, actions[t] is B x action_dim and rewards[t] is B x 1 for t < H.
struct SegmentBatch {
  std::vector<Matrix> observations;
  std::vector<Matrix> actions;
  std::vector<Matrix> rewards;
  std::vector<std::uint64_t> episode_ids;
  // Index of each segment's first transition within its episode.
  std::vector<std::uint32_t> start_indices;

  std::size_t horizon() const { return actions.size(); }
  std::size_t size() const { return episode_ids.size(); }
};

// One segment from H contiguous transitions; throws ContractViolation when a
// transition's state is not the previous transition's next_state.
SegmentBatch make_segment(std::span<const Transition> transitions);
// Stacks batches with equal horizon along the batch dimension.
SegmentBatch concat(std::span<const SegmentBatch> batches);

// Fixed-capacity episode store. Eviction removes whole episodes, oldest
// first, so a stored segment never straddles a missing transition.
//
// A segment starting at transition j of an episode with k transitions is
// valid when j + H < k: the H transitions it covers plus at least one later
// transition lie inside the same episode, giving k - H valid starts.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t obs_dim, std::size_t action_dim, std::size_t capacity = 1'000'000);

  void push(const Transition& t);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t num_episodes() const { return episodes_.size(); }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t segment_count(std::size_t horizon) const;
  std::uint64_t episode_id(std::size_t i) const { return episodes_.at(i).id; }
  std::vector<Transition> episode_transitions(std::size_t i) const;

  // Uniform over valid start indices; throws NotReady when fewer than n exist.
  SegmentBatch sample_segments(std::size_t n, std::size_t horizon, std::uint64_t seed) const;
  // Group g is sample_segments(n, horizon, hash64(seed, g)).
  std::vector<SegmentBatch> sample_group_batches(std::size_t groups, std::size_t n, std::size_t horizon,
                                                 std::uint64_t seed) const;

  // Binary dump: "DARB" magic, u32 version, then little-endian header and
  // episode records.
  void save(const std::filesystem::path& path) const;
  static ReplayBuffer load(const std::filesystem::path& path);

 private:
  struct Episode {
    std::uint64_t id = 0;
    bool closed = false;
    std::vector<double> observations;  // (k + 1) x obs_dim
    std::vector<double> actions;       // k x action_dim
    std::vector<double> rewards;       // k
    std::size_t length() const { return rewards.size(); }
  };

  void evict();

  std::size_t obs_dim_;
  std::size_t action_dim_;
  std::size_t capacity_;
  std::size_t size_ = 0;
  std::uint64_t next_id_ = 0;
  std::deque<Episode> episodes_;
};

}  // namespace doublyaware::replay
