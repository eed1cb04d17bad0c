#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixsga/config.hpp"
#include "mixsga/experts.hpp"
#include "mixsga/kv_cache.hpp"
#include "mixsga/router.hpp"
#include "mixsga/tensor.hpp"

namespace mixsga {

/// Pre-norm transformer block: LN -> routed grouped attention -> residual,
/// LN -> GELU MLP -> residual.
template <typename T>
struct Block {
  Tensor<T> ln1_gamma, ln1_beta;
  RouterParams<T> router;
  ExpertBank<T> bank;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;
};

/// Per-layer data kept by a forward pass when asked (prefill).
template <typename T>
struct LayerCapture {
  GroupedKV<T> kv;
  Tensor<T> probs;  // [B, H, L, L]
};

struct ForwardOptions {
  std::uint64_t routing_seed = 0;  // random routing only
  bool capture = false;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                            // [B * L, vocab]
  std::vector<Tensor<T>> aux_losses;           // one per layer
  std::vector<std::vector<Assignment>> traces;  // [layer][sequence]
  std::vector<LayerCapture<T>> captures;       // per layer, when requested
  double router_agreement = 0.0;  // argmax(scores) == assigned expert, over layers and tokens
};

/// Incremental decoding state: one ragged cache per layer.
template <typename T>
struct DecodeState {
  std::vector<RaggedKvCache<T>> caches;
  std::size_t next_pos = 0;
  std::mt19937_64 rng;
};

template <typename T>
struct DecodeStep {
  std::vector<T> logits;     // [vocab] prediction for the next position
  std::vector<int> experts;  // one per layer
};

struct EvictionPolicy {
  double keep_ratio = 1.0;
  std::size_t recent_window = 4;
};

template <typename T>
struct GenerateResult {
  std::vector<int> tokens;                   // prompt followed by the continuation
  std::vector<std::vector<T>> step_logits;   // logits that picked each generated token
  std::vector<std::vector<int>> experts;     // [layer][position] routing of cached tokens
  std::vector<MemoryReport> kv_trace;        // layer-0 cache after each step
  std::vector<std::size_t> live_tokens;      // after each eviction
};

template <typename T>
struct SequenceDecode {
  std::vector<std::vector<T>> logits;      // [position][vocab]
  std::vector<std::vector<int>> experts;   // [layer][position]
  std::vector<std::size_t> live_tokens;    // per position, after eviction
  std::vector<MemoryReport> kv_trace;
};

/// mean next-token cross-entropy + (alpha / n_layers) * sum of per-layer aux losses.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const int> targets,
                     const std::vector<Tensor<T>>& aux_losses, double alpha, std::size_t n_layers);
template <typename T>
Tensor<T> total_loss(const Tensor<T>& lm_loss, const std::vector<Tensor<T>>& aux_losses,
                     double alpha, std::size_t n_layers);

template <typename T>
class Model {
 public:
  /// Randomly initialized from cfg.seed.
  explicit Model(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::size_t parameter_count() const;

  /// Causal forward over equal-length sequences.
  ForwardResult<T> forward(const std::vector<std::vector<int>>& batch,
                           const ForwardOptions& options = {}) const;
  ForwardResult<T> forward(std::span<const int> tokens, const ForwardOptions& options = {}) const;

  DecodeState<T> start_decode(std::uint64_t routing_seed = 0) const;
  /// Feeds one token at state.next_pos using decode-phase routing.
  DecodeStep<T> decode_step(DecodeState<T>& state, int token) const;
  /// Runs the prompt through the prefill path and fills the caches.
  /// Returns the logits at the last prompt position.
  DecodeStep<T> prefill(DecodeState<T>& state, std::span<const int> prompt) const;

  /// Greedy continuation of a non-empty prompt.
  GenerateResult<T> generate(std::span<const int> prompt, std::size_t n_tokens,
                             std::optional<EvictionPolicy> eviction = std::nullopt,
                             std::uint64_t routing_seed = 0) const;

  /// Teacher-forced token-by-token decoding from an empty cache.
  SequenceDecode<T> decode_sequence(std::span<const int> tokens,
                                    std::optional<EvictionPolicy> eviction = std::nullopt,
                                    std::uint64_t routing_seed = 0) const;

  void save(const std::filesystem::path& checkpoint) const;
  static Model load(const std::filesystem::path& checkpoint);
  /// Sidecar JSON RunConfig written next to a checkpoint.
  static std::filesystem::path config_path(const std::filesystem::path& checkpoint);

  std::vector<Block<T>>& blocks() { return blocks_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }
  Tensor<T>& token_embedding() { return tok_emb_; }
  Tensor<T>& position_embedding() { return pos_emb_; }

 private:
  Assignment route(const Block<T>& block, std::span<const T> scores, std::size_t length,
                   std::uint64_t seed) const;
  int route_one(const Block<T>& block, std::span<const T> score_row, std::mt19937_64& rng) const;
  void apply_eviction(DecodeState<T>& state, const EvictionPolicy& policy) const;

  RunConfig cfg_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<Block<T>> blocks_;
  Tensor<T> lnf_gamma_, lnf_beta_;
  Tensor<T> head_w_, head_b_;
};

/// exp(mean next-token CE) over non-overlapping seq_len windows, prefill routing.
template <typename T>
double perplexity(const Model<T>& model, std::span<const int> tokens, std::uint64_t routing_seed = 0);

/// Perplexity through the decode path with the ragged cache, optionally evicting.
template <typename T>
double streaming_perplexity(const Model<T>& model, std::span<const int> tokens,
                            std::optional<EvictionPolicy> eviction, std::size_t max_windows = 0,
                            std::uint64_t routing_seed = 0);

struct AgreementReport {
  double agreement = 0.0;                 // decode choice == prefill assignment
  std::vector<double> decode_frequency;   // per expert, over all decoded tokens
  std::vector<double> prefill_frequency;
  std::size_t tokens = 0;
};

/// Compares prefill cascade routing with decode argmax routing, per layer and
/// position, over non-overlapping seq_len windows.
template <typename T>
AgreementReport prefill_decode_agreement(const Model<T>& model, std::span<const int> tokens,
                                         std::size_t max_windows = 0);

}  // namespace mixsga
