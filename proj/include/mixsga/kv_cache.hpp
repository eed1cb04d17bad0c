#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "mixsga/tensor.hpp"

namespace mixsga {

struct MemoryReport {
  std::size_t live_tokens = 0;
  std::size_t kv_bytes = 0;     // grouped K and V scalars
  std::size_t index_bytes = 0;  // one expert-index byte per token
  std::size_t bytes = 0;        // kv_bytes + index_bytes
  double ratio = 0.0;           // kv size relative to full-head storage, index excluded
};

template <typename T>
struct ExpandedKv {
  std::vector<std::size_t> positions;  // ascending
  Tensor<T> keys;                      // [H, T, d_head]
  Tensor<T> values;
};

/// KV storage with a per-token head count: a token routed to expert e
/// (0-based) keeps H / 2^e grouped heads. One pool per expert keeps entry
/// shapes homogeneous; an ordered position index points into the pools.
template <typename T>
class RaggedKvCache {
 public:
  RaggedKvCache(std::size_t heads, std::size_t head_dim, std::size_t experts,
                std::size_t bytes_per_scalar = sizeof(T));

  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t experts() const { return pools_.size(); }
  std::size_t heads_for(int expert) const { return heads_ >> expert; }

  /// keys/values hold heads_for(expert) * head_dim scalars.
  void append(std::size_t pos, int expert, std::span<const T> keys, std::span<const T> values);

  /// Live positions <= upto, re-expanded to H heads, ascending by position.
  ExpandedKv<T> gather_expanded(std::size_t upto) const;
  ExpandedKv<T> gather_expanded() const;

  /// Adds attention mass (summed over heads and queries) to live positions.
  void accumulate_attention(std::span<const std::size_t> positions, std::span<const T> mass);

  /// Heavy-hitter eviction. Keeps ceil(keep_ratio * T) positions, T being the
  /// number of positions appended so far: the min(recent_window, budget) most
  /// recent ones, then the highest accumulated mass (ties keep the more
  /// recent). Returns the evicted positions, ascending.
  std::vector<std::size_t> evict_h2o(double keep_ratio, std::size_t recent_window);

  MemoryReport memory_report() const;

  std::size_t live_tokens() const { return index_.size(); }
  std::size_t appended() const { return appended_; }
  std::size_t pool_size(int expert) const { return pools_.at(static_cast<std::size_t>(expert)).positions.size(); }
  bool contains(std::size_t pos) const { return index_.count(pos) != 0; }
  int expert_at(std::size_t pos) const;
  double mass_at(std::size_t pos) const;
  std::vector<T> grouped_keys(std::size_t pos) const;
  std::vector<T> grouped_values(std::size_t pos) const;
  std::vector<std::size_t> positions() const;

  /// Throws std::logic_error if the pools and the index disagree.
  void check_consistency() const;

 private:
  struct Pool {
    std::vector<std::size_t> positions;
    std::vector<T> keys;
    std::vector<T> values;
  };
  struct Slot {
    int expert = 0;
    std::size_t index = 0;
    double mass = 0.0;
  };

  void remove(std::size_t pos);
  std::size_t width(int expert) const { return heads_for(expert) * head_dim_; }

  std::size_t heads_;
  std::size_t head_dim_;
  std::size_t bytes_per_scalar_;
  std::size_t appended_ = 0;
  std::vector<Pool> pools_;
  std::map<std::size_t, Slot> index_;
};

}  // namespace mixsga
