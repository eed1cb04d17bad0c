#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mixsga/model.hpp"

namespace mixsga {

/// Byte-level corpus: one token per UTF-8 byte, vocab 256.
struct Corpus {
  std::vector<int> tokens;

  static Corpus from_text(const std::string& text);
  /// Rejects unreadable files and invalid UTF-8.
  static Corpus load(const std::filesystem::path& path);
  std::size_t size() const { return tokens.size(); }
};

bool is_valid_utf8(const std::string& bytes);

struct Batch {
  std::vector<std::vector<int>> inputs;
  std::vector<int> targets;  // flattened, next token of every input position
};

/// Samples random windows of seq_len + 1 tokens.
class BatchSampler {
 public:
  BatchSampler(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);
  Batch next();

 private:
  const Corpus& corpus_;
  std::size_t batch_size_;
  std::size_t seq_len_;
  std::mt19937_64 rng_;
};

/// Decoupled weight decay Adam.
template <typename T>
class AdamW {
 public:
  struct Group {
    Tensor<T> param;
    bool decay = true;
  };

  AdamW(std::vector<Group> params, double beta1, double beta2, double weight_decay, double eps = 1e-8);
  void step(double lr);
  void zero_grad();
  /// Scales gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
  double clip_grad_norm(double max_norm);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Group> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, weight_decay_, eps_;
  std::size_t t_ = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  double lm_loss = 0.0;
  double aux_loss = 0.0;  // mean over layers
  double prefill_decode_agreement = 0.0;
  double learning_rate = 0.0;
  double grad_norm = 0.0;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

std::size_t total_steps(const RunConfig& cfg, std::size_t corpus_tokens);
double learning_rate_at(const RunConfig& cfg, std::size_t step, std::size_t total);

/// Trains in place; returns every step's metrics.
template <typename T>
std::vector<StepMetrics> train(Model<T>& model, const Corpus& corpus, const MetricsSink& sink = {});

}  // namespace mixsga
