#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mixsga/router.hpp"
#include "mixsga/tensor.hpp"

namespace mixsga {

enum class KeyValue { key, value };

/// 1/sqrt(d_head) per head, or the literal 1/sqrt(D).
enum class AttentionScale { head_dim, model_dim };

/// Attention weights with key/value projections shared by every expert.
/// Expert e (1-based) averages heads in contiguous groups of 2^(e-1).
template <typename T>
struct ExpertBank {
  Tensor<T> wq, bq;  // [D, D], [D]
  Tensor<T> wk, bk;
  Tensor<T> wv, bv;
  Tensor<T> wo;      // [D, D]
  std::size_t heads = 1;
  std::size_t experts = 1;

  std::size_t model_dim() const { return wq.dim(0); }
  std::size_t head_dim() const { return model_dim() / heads; }
  /// 1-based expert index.
  static std::size_t group_size(std::size_t expert) { return std::size_t{1} << (expert - 1); }
  std::size_t heads_for(std::size_t expert) const { return heads / group_size(expert); }
  void validate() const;
};

/// Projection to [H, L, d_head] (or [B, H, L, d_head] for batched [B, L, D]).
template <typename T>
Tensor<T> kv_project(const Tensor<T>& x, const ExpertBank<T>& bank, KeyValue which);
template <typename T>
Tensor<T> query_project(const Tensor<T>& x, const ExpertBank<T>& bank);

/// Averages heads (dim 0) in groups of 2^(expert-1); expert is 1-based.
template <typename T>
Tensor<T> group_heads(const Tensor<T>& heads, std::size_t expert);
/// Repeats each grouped head 2^(expert-1) times so the head count is H again.
template <typename T>
Tensor<T> expand_heads(const Tensor<T>& grouped, std::size_t expert);

/// Tokens routed to one expert, with their grouped keys and values
/// [n, H / 2^(e-1), d_head].
template <typename T>
struct ExpertPool {
  std::size_t expert = 1;  // 1-based
  std::vector<std::size_t> rows;
  Tensor<T> keys;
  Tensor<T> values;
};

/// Per-token grouped K/V; only each token's own expert is computed.
template <typename T>
struct GroupedKV {
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::vector<int> expert_of;  // 0-based, one per row
  std::vector<ExpertPool<T>> pools;

  std::size_t tokens() const { return expert_of.size(); }
  std::size_t heads_of(std::size_t row) const {
    return heads >> static_cast<std::size_t>(expert_of.at(row));
  }
  /// Grouped keys or values of one token, [heads_of(row) * d_head].
  std::vector<T> entry(std::size_t row, KeyValue which) const;
};

/// X is [N, D] rows (one sequence, or a flattened batch).
template <typename T>
GroupedKV<T> moe_kv(const Tensor<T>& x, std::span<const int> expert_of, const ExpertBank<T>& bank);
template <typename T>
GroupedKV<T> moe_kv(const Tensor<T>& x, const Assignment& assignment, const ExpertBank<T>& bank);

/// Re-expands every token to H heads, in row order: [N, H, d_head].
template <typename T>
Tensor<T> expand_kv(const GroupedKV<T>& kv, KeyValue which);

struct AttentionOptions {
  bool causal = true;
  AttentionScale scale = AttentionScale::head_dim;
};

/// Q is [H, L, d_head] or [B, H, L, d_head]; kv covers B * L rows.
/// Returns [L, D] or [B, L, D]. `probs`, when given, receives the attention
/// weights [B, H, L, L].
template <typename T>
Tensor<T> mix_attention(const Tensor<T>& q, const GroupedKV<T>& kv, const ExpertBank<T>& bank,
                        const AttentionOptions& options = {}, Tensor<T>* probs = nullptr);

/// Single-query attention over already-expanded keys/values [H, T, d_head].
/// q is [H, 1, d_head]. Returns [1, D]; `weights` receives [H, T].
template <typename T>
Tensor<T> decode_attention(const Tensor<T>& q, const Tensor<T>& keys, const Tensor<T>& values,
                           const ExpertBank<T>& bank, AttentionScale scale,
                           std::vector<T>* weights = nullptr);

template <typename T>
T attention_scale(const ExpertBank<T>& bank, AttentionScale mode);

}  // namespace mixsga
