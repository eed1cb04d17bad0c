#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mixsga/experts.hpp"

namespace mixsga {

enum class RoutingMode { learned, random, gqa_baseline, mha_baseline };

/// Which router output feeds the consistency loss: the sigmoid scores
/// themselves, or the pre-sigmoid activations.
enum class ConsistencyLogits { sigmoid_scores, pre_sigmoid };

const char* to_string(RoutingMode m);
RoutingMode parse_routing_mode(const std::string& s);

struct RunConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t experts = 3;
  std::size_t n_layers = 2;
  std::size_t mlp_ratio = 4;
  std::vector<double> ratios = {0.3, 0.1, 0.6};
  double alpha = 0.01;
  std::size_t seq_len = 64;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double warmup_ratio = 0.015;
  double min_lr_ratio = 0.1;
  double grad_clip = 1.0;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // overrides epochs when non-zero
  std::uint64_t seed = 0;
  RoutingMode routing_mode = RoutingMode::learned;
  bool aux_loss_enabled = true;
  std::optional<double> h2o_keep_ratio;
  std::size_t h2o_recent_window = 4;
  AttentionScale attention_scale_mode = AttentionScale::head_dim;
  ConsistencyLogits consistency_logits_mode = ConsistencyLogits::sigmoid_scores;

  std::size_t head_dim() const { return d_model / heads; }
  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace mixsga
