#include "mixsga/kv_cache.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "mixsga/router.hpp"

namespace mixsga {

template <typename T>
RaggedKvCache<T>::RaggedKvCache(std::size_t heads, std::size_t head_dim, std::size_t experts,
                                std::size_t bytes_per_scalar)
    : heads_(heads), head_dim_(head_dim), bytes_per_scalar_(bytes_per_scalar), pools_(experts) {
  if (heads == 0 || head_dim == 0 || experts == 0)
    throw std::invalid_argument("kv cache: heads, head_dim and experts must be positive");
  if (experts > 16 || heads % (std::size_t{1} << (experts - 1)) != 0)
    throw std::invalid_argument("kv cache: " + std::to_string(heads) +
                                " heads cannot be grouped for " + std::to_string(experts) +
                                " experts");
}

template <typename T>
void RaggedKvCache<T>::append(std::size_t pos, int expert, std::span<const T> keys,
                              std::span<const T> values) {
  if (expert < 0 || static_cast<std::size_t>(expert) >= pools_.size())
    throw std::out_of_range("kv cache: expert " + std::to_string(expert) + " out of range");
  if (index_.count(pos)) throw std::invalid_argument("kv cache: position " + std::to_string(pos) + " already cached");
  const std::size_t w = width(expert);
  if (keys.size() != w || values.size() != w)
    throw std::invalid_argument("kv cache: expert " + std::to_string(expert) + " stores " +
                                std::to_string(heads_for(expert)) + " heads (" + std::to_string(w) +
                                " scalars), got " + std::to_string(keys.size()) + "/" +
                                std::to_string(values.size()));
  Pool& pool = pools_[static_cast<std::size_t>(expert)];
  index_[pos] = Slot{expert, pool.positions.size(), 0.0};
  pool.positions.push_back(pos);
  pool.keys.insert(pool.keys.end(), keys.begin(), keys.end());
  pool.values.insert(pool.values.end(), values.begin(), values.end());
  ++appended_;
}

template <typename T>
ExpandedKv<T> RaggedKvCache<T>::gather_expanded(std::size_t upto) const {
  ExpandedKv<T> out;
  for (auto it = index_.begin(); it != index_.end() && it->first <= upto; ++it)
    out.positions.push_back(it->first);
  const std::size_t n = out.positions.size();
  std::vector<T> k(heads_ * n * head_dim_), v(heads_ * n * head_dim_);
  std::size_t t = 0;
  for (auto it = index_.begin(); t < n; ++it, ++t) {
    const Slot& slot = it->second;
    const Pool& pool = pools_[static_cast<std::size_t>(slot.expert)];
    const std::size_t w = width(slot.expert);
    const std::size_t group = std::size_t{1} << slot.expert;
    const T* ks = pool.keys.data() + slot.index * w;
    const T* vs = pool.values.data() + slot.index * w;
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t src = (h / group) * head_dim_;
      const std::size_t dst = (h * n + t) * head_dim_;
      std::copy_n(ks + src, head_dim_, k.data() + dst);
      std::copy_n(vs + src, head_dim_, v.data() + dst);
    }
  }
  out.keys = Tensor<T>({heads_, n, head_dim_}, std::move(k));
  out.values = Tensor<T>({heads_, n, head_dim_}, std::move(v));
  return out;
}

template <typename T>
ExpandedKv<T> RaggedKvCache<T>::gather_expanded() const {
  return gather_expanded(index_.empty() ? 0 : index_.rbegin()->first);
}

template <typename T>
void RaggedKvCache<T>::accumulate_attention(std::span<const std::size_t> positions,
                                            std::span<const T> mass) {
  if (positions.size() != mass.size())
    throw std::invalid_argument("kv cache: attention mass does not match positions");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    auto it = index_.find(positions[i]);
    if (it != index_.end()) it->second.mass += static_cast<double>(mass[i]);
  }
}

template <typename T>
void RaggedKvCache<T>::remove(std::size_t pos) {
  auto it = index_.find(pos);
  const Slot slot = it->second;
  index_.erase(it);
  Pool& pool = pools_[static_cast<std::size_t>(slot.expert)];
  const std::size_t w = width(slot.expert);
  const std::size_t last = pool.positions.size() - 1;
  if (slot.index != last) {
    pool.positions[slot.index] = pool.positions[last];
    std::copy_n(pool.keys.data() + last * w, w, pool.keys.data() + slot.index * w);
    std::copy_n(pool.values.data() + last * w, w, pool.values.data() + slot.index * w);
    index_.at(pool.positions[slot.index]).index = slot.index;
  }
  pool.positions.pop_back();
  pool.keys.resize(last * w);
  pool.values.resize(last * w);
}

template <typename T>
std::vector<std::size_t> RaggedKvCache<T>::evict_h2o(double keep_ratio, std::size_t recent_window) {
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    throw std::invalid_argument("evict_h2o: keep_ratio must lie in (0, 1], got " +
                                std::to_string(keep_ratio));
  const std::size_t budget = expert_capacity(keep_ratio, appended_);
  if (index_.size() <= budget) return {};

  std::vector<std::size_t> live = positions();  // ascending
  const std::size_t recent = std::min(recent_window, budget);
  std::vector<std::size_t> candidates(live.begin(), live.end() - static_cast<std::ptrdiff_t>(recent));
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    const double ma = index_.at(a).mass, mb = index_.at(b).mass;
    if (ma != mb) return ma > mb;
    return a > b;
  });
  std::vector<std::size_t> evicted(candidates.begin() + static_cast<std::ptrdiff_t>(budget - recent),
                                   candidates.end());
  std::sort(evicted.begin(), evicted.end());
  for (std::size_t pos : evicted) remove(pos);
  return evicted;
}

template <typename T>
MemoryReport RaggedKvCache<T>::memory_report() const {
  MemoryReport r;
  r.live_tokens = index_.size();
  std::size_t head_total = 0;
  for (std::size_t e = 0; e < pools_.size(); ++e)
    head_total += pools_[e].positions.size() * heads_for(static_cast<int>(e));
  r.kv_bytes = 2 * head_total * head_dim_ * bytes_per_scalar_;
  r.index_bytes = r.live_tokens;
  r.bytes = r.kv_bytes + r.index_bytes;
  r.ratio = r.live_tokens ? static_cast<double>(head_total) / static_cast<double>(heads_ * r.live_tokens)
                          : 0.0;
  return r;
}

template <typename T>
int RaggedKvCache<T>::expert_at(std::size_t pos) const {
  return index_.at(pos).expert;
}

template <typename T>
double RaggedKvCache<T>::mass_at(std::size_t pos) const {
  return index_.at(pos).mass;
}

template <typename T>
std::vector<T> RaggedKvCache<T>::grouped_keys(std::size_t pos) const {
  const Slot& s = index_.at(pos);
  const auto& pool = pools_[static_cast<std::size_t>(s.expert)];
  const std::size_t w = width(s.expert);
  return {pool.keys.begin() + static_cast<std::ptrdiff_t>(s.index * w),
          pool.keys.begin() + static_cast<std::ptrdiff_t>((s.index + 1) * w)};
}

template <typename T>
std::vector<T> RaggedKvCache<T>::grouped_values(std::size_t pos) const {
  const Slot& s = index_.at(pos);
  const auto& pool = pools_[static_cast<std::size_t>(s.expert)];
  const std::size_t w = width(s.expert);
  return {pool.values.begin() + static_cast<std::ptrdiff_t>(s.index * w),
          pool.values.begin() + static_cast<std::ptrdiff_t>((s.index + 1) * w)};
}

template <typename T>
std::vector<std::size_t> RaggedKvCache<T>::positions() const {
  std::vector<std::size_t> out;
  out.reserve(index_.size());
  for (const auto& [pos, slot] : index_) out.push_back(pos);
  return out;
}

template <typename T>
void RaggedKvCache<T>::check_consistency() const {
  std::size_t pooled = 0;
  for (std::size_t e = 0; e < pools_.size(); ++e) {
    const Pool& pool = pools_[e];
    const std::size_t w = width(static_cast<int>(e));
    if (pool.keys.size() != pool.positions.size() * w || pool.values.size() != pool.keys.size())
      throw std::logic_error("kv cache: pool " + std::to_string(e) + " payload size mismatch");
    for (std::size_t i = 0; i < pool.positions.size(); ++i) {
      auto it = index_.find(pool.positions[i]);
      if (it == index_.end() || it->second.expert != static_cast<int>(e) || it->second.index != i)
        throw std::logic_error("kv cache: position " + std::to_string(pool.positions[i]) +
                               " not indexed at its pool slot");
    }
    pooled += pool.positions.size();
  }
  if (pooled != index_.size()) throw std::logic_error("kv cache: index holds stale positions");
}

template class RaggedKvCache<float>;
template class RaggedKvCache<double>;

}  // namespace mixsga
