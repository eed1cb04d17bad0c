#include "mixsga/experts.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace mixsga {

template <typename T>
void ExpertBank<T>::validate() const {
  const std::size_t d = wq.dim(0);
  for (const Tensor<T>* w : {&wq, &wk, &wv, &wo})
    if (w->shape() != Shape{d, d})
      throw ShapeError("expert bank: weight " + shape_str(w->shape()) + " is not " +
                       shape_str({d, d}));
  for (const Tensor<T>* b : {&bq, &bk, &bv})
    if (b->shape() != Shape{d}) throw ShapeError("expert bank: bias " + shape_str(b->shape()));
  if (heads == 0 || d % heads != 0)
    throw ConfigError("expert bank: D=" + std::to_string(d) + " is not divisible by H=" +
                      std::to_string(heads));
  if (experts == 0 || experts > 16 || heads % group_size(experts) != 0)
    throw ConfigError("expert bank: H=" + std::to_string(heads) + " is not divisible by 2^(E-1) for E=" +
                      std::to_string(experts));
}

namespace {

// [..., L, D] -> [..., H, L, d_head]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& proj, std::size_t heads) {
  Shape s = proj.shape();
  const std::size_t d = s.back();
  s.back() = heads;
  s.push_back(d / heads);
  auto shaped = reshape(proj, s);
  return transpose(shaped, s.size() - 3, s.size() - 2);
}

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() < 2 || x.shape().back() != w.dim(0))
    throw ShapeError("kv_project: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  return add(matmul(x, w), b);
}

}  // namespace

template <typename T>
Tensor<T> kv_project(const Tensor<T>& x, const ExpertBank<T>& bank, KeyValue which) {
  const auto& w = which == KeyValue::key ? bank.wk : bank.wv;
  const auto& b = which == KeyValue::key ? bank.bk : bank.bv;
  return split_heads(project(x, w, b), bank.heads);
}

template <typename T>
Tensor<T> query_project(const Tensor<T>& x, const ExpertBank<T>& bank) {
  return split_heads(project(x, bank.wq, bank.bq), bank.heads);
}

template <typename T>
Tensor<T> group_heads(const Tensor<T>& heads, std::size_t expert) {
  if (expert == 0) throw std::invalid_argument("group_heads: expert index is 1-based");
  return group_mean(heads, 0, ExpertBank<T>::group_size(expert));
}

template <typename T>
Tensor<T> expand_heads(const Tensor<T>& grouped, std::size_t expert) {
  if (expert == 0) throw std::invalid_argument("expand_heads: expert index is 1-based");
  return repeat_interleave(grouped, 0, ExpertBank<T>::group_size(expert));
}

template <typename T>
std::vector<T> GroupedKV<T>::entry(std::size_t row, KeyValue which) const {
  const auto& pool = pools.at(static_cast<std::size_t>(expert_of.at(row)));
  const Tensor<T>& t = which == KeyValue::key ? pool.keys : pool.values;
  const std::size_t width = heads_of(row) * head_dim;
  for (std::size_t i = 0; i < pool.rows.size(); ++i)
    if (pool.rows[i] == row)
      return {t.data().begin() + static_cast<std::ptrdiff_t>(i * width),
              t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * width)};
  throw std::out_of_range("grouped kv: row " + std::to_string(row) + " missing from its pool");
}

template <typename T>
GroupedKV<T> moe_kv(const Tensor<T>& x, std::span<const int> expert_of, const ExpertBank<T>& bank) {
  if (x.rank() != 2 || x.dim(0) != expert_of.size())
    throw ShapeError("moe_kv: rows " + shape_str(x.shape()) + " vs " +
                     std::to_string(expert_of.size()) + " routed tokens");
  GroupedKV<T> kv;
  kv.heads = bank.heads;
  kv.head_dim = bank.head_dim();
  kv.expert_of.assign(expert_of.begin(), expert_of.end());
  kv.pools.resize(bank.experts);
  for (std::size_t e = 0; e < bank.experts; ++e) kv.pools[e].expert = e + 1;
  for (std::size_t r = 0; r < expert_of.size(); ++r) {
    if (expert_of[r] < 0 || static_cast<std::size_t>(expert_of[r]) >= bank.experts)
      throw std::out_of_range("moe_kv: expert index " + std::to_string(expert_of[r]));
    kv.pools[static_cast<std::size_t>(expert_of[r])].rows.push_back(r);
  }

  const std::size_t h = bank.heads, dh = bank.head_dim();
  for (auto& pool : kv.pools) {
    if (pool.rows.empty()) continue;
    const std::size_t n = pool.rows.size();
    const std::size_t g = ExpertBank<T>::group_size(pool.expert);
    auto rows = gather_rows(x, std::span<const std::size_t>(pool.rows));
    auto kproj = reshape(project(rows, bank.wk, bank.bk), {n, h, dh});
    auto vproj = reshape(project(rows, bank.wv, bank.bv), {n, h, dh});
    pool.keys = group_mean(kproj, 1, g);
    pool.values = group_mean(vproj, 1, g);
  }
  return kv;
}

template <typename T>
GroupedKV<T> moe_kv(const Tensor<T>& x, const Assignment& assignment, const ExpertBank<T>& bank) {
  return moe_kv(x, std::span<const int>(assignment.expert_of), bank);
}

template <typename T>
Tensor<T> expand_kv(const GroupedKV<T>& kv, KeyValue which) {
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> order;  // order[i] = row held at position i of the concat
  for (const auto& pool : kv.pools) {
    if (pool.rows.empty()) continue;
    const Tensor<T>& t = which == KeyValue::key ? pool.keys : pool.values;
    parts.push_back(repeat_interleave(t, 1, ExpertBank<T>::group_size(pool.expert)));
    order.insert(order.end(), pool.rows.begin(), pool.rows.end());
  }
  if (parts.empty()) return Tensor<T>::zeros({0, kv.heads, kv.head_dim});
  auto stacked = parts.size() == 1 ? parts.front() : concat(parts, 0);
  std::vector<std::size_t> inverse(order.size());
  bool identity = true;
  for (std::size_t i = 0; i < order.size(); ++i) {
    inverse[order[i]] = i;
    identity = identity && order[i] == i;
  }
  if (identity) return stacked;
  return gather_rows(stacked, std::span<const std::size_t>(inverse));
}

template <typename T>
T attention_scale(const ExpertBank<T>& bank, AttentionScale mode) {
  const std::size_t d = mode == AttentionScale::head_dim ? bank.head_dim() : bank.model_dim();
  return T(1) / std::sqrt(T(d));
}

template <typename T>
Tensor<T> mix_attention(const Tensor<T>& q, const GroupedKV<T>& kv, const ExpertBank<T>& bank,
                        const AttentionOptions& options, Tensor<T>* probs) {
  const bool batched = q.rank() == 4;
  if (!batched && q.rank() != 3) throw ShapeError("mix_attention: query " + shape_str(q.shape()));
  const std::size_t b = batched ? q.dim(0) : 1;
  const std::size_t h = bank.heads, dh = bank.head_dim(), d = bank.model_dim();
  const std::size_t l = q.dim(q.rank() - 2);
  if (q.dim(q.rank() - 3) != h || q.dim(q.rank() - 1) != dh || kv.tokens() != b * l)
    throw ShapeError("mix_attention: query " + shape_str(q.shape()) + " vs " +
                     std::to_string(kv.tokens()) + " cached tokens");
  if (l == 0) throw std::invalid_argument("mix_attention: no positions to attend over");

  auto q4 = batched ? q : reshape(q, {1, h, l, dh});
  auto keys = transpose(reshape(expand_kv(kv, KeyValue::key), {b, l, h, dh}), 1, 2);
  auto values = transpose(reshape(expand_kv(kv, KeyValue::value), {b, l, h, dh}), 1, 2);

  auto logits = scale(matmul(q4, transpose(keys)), attention_scale(bank, options.scale));
  if (options.causal)
    logits = where(causal_mask(l), logits, -std::numeric_limits<T>::infinity());
  auto weights = softmax(logits);
  if (probs) *probs = weights;
  auto heads_out = matmul(weights, values);                        // [B, H, L, dh]
  auto merged = reshape(transpose(heads_out, 1, 2), {b * l, d});   // [B*L, D]
  auto out = matmul(merged, bank.wo);
  return batched ? reshape(out, {b, l, d}) : reshape(out, {l, d});
}

template <typename T>
Tensor<T> decode_attention(const Tensor<T>& q, const Tensor<T>& keys, const Tensor<T>& values,
                           const ExpertBank<T>& bank, AttentionScale scale_mode,
                           std::vector<T>* weights) {
  const std::size_t h = bank.heads, dh = bank.head_dim();
  if (keys.rank() != 3 || keys.dim(1) == 0)
    throw std::invalid_argument("decode_attention: the cache holds no entries to attend over");
  if (q.shape() != Shape{h, 1, dh} || keys.dim(0) != h || keys.dim(2) != dh ||
      values.shape() != keys.shape())
    throw ShapeError("decode_attention: query " + shape_str(q.shape()) + " vs cache " +
                     shape_str(keys.shape()));
  auto w = softmax(scale(matmul(q, transpose(keys)), attention_scale(bank, scale_mode)));  // [H,1,T]
  if (weights) weights->assign(w.data().begin(), w.data().end());
  auto out = matmul(w, values);  // [H, 1, dh]
  return matmul(reshape(out, {1, h * dh}), bank.wo);
}

#define MIXSGA_INSTANTIATE(T)                                                                     \
  template struct ExpertBank<T>;                                                                  \
  template struct GroupedKV<T>;                                                                   \
  template Tensor<T> kv_project(const Tensor<T>&, const ExpertBank<T>&, KeyValue);                \
  template Tensor<T> query_project(const Tensor<T>&, const ExpertBank<T>&);                       \
  template Tensor<T> group_heads(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> expand_heads(const Tensor<T>&, std::size_t);                                 \
  template GroupedKV<T> moe_kv(const Tensor<T>&, std::span<const int>, const ExpertBank<T>&);     \
  template GroupedKV<T> moe_kv(const Tensor<T>&, const Assignment&, const ExpertBank<T>&);        \
  template Tensor<T> expand_kv(const GroupedKV<T>&, KeyValue);                                    \
  template T attention_scale(const ExpertBank<T>&, AttentionScale);                               \
  template Tensor<T> mix_attention(const Tensor<T>&, const GroupedKV<T>&, const ExpertBank<T>&,   \
                                   const AttentionOptions&, Tensor<T>*);                          \
  template Tensor<T> decode_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                      const ExpertBank<T>&, AttentionScale, std::vector<T>*);

MIXSGA_INSTANTIATE(float)
MIXSGA_INSTANTIATE(double)

#undef MIXSGA_INSTANTIATE

}  // namespace mixsga
