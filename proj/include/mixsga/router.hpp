#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixsga/tensor.hpp"

namespace mixsga {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-expert capacity ratios: each in [0, 1], summing to 1 within 1e-9.
void validate_ratios(std::span<const double> ratios);

/// ceil(ratio * length), ignoring floating-point noise below 1e-9.
std::size_t expert_capacity(double ratio, std::size_t length);

/// Expert token counts produced by the cascade: expert e takes
/// min(capacity_e, remaining), the last expert absorbs whatever is left.
std::vector<std::size_t> cascade_counts(std::span<const double> ratios, std::size_t length);

/// Exclusive token-to-expert mapping for one sequence.
struct Assignment {
  std::size_t experts = 0;
  std::vector<std::uint8_t> masks;  // length x experts, row-major, one-hot rows
  std::vector<int> expert_of;       // 0-based expert index per token

  static Assignment from_experts(std::vector<int> expert_of, std::size_t experts);
  static Assignment uniform(std::size_t length, int expert, std::size_t experts);

  std::size_t length() const { return expert_of.size(); }
  std::size_t column_count(std::size_t expert) const;
  bool operator==(const Assignment&) const = default;
};

/// Routing trace CSV: "position,expert_index" header then one row per token.
void write_assignment_csv(std::ostream& out, const Assignment& a);
/// Parses a routing trace; positions must be unique. Returns rows sorted by position.
std::vector<std::pair<std::size_t, int>> read_assignment_csv(std::istream& in);

template <typename T>
struct RouterParams {
  Tensor<T> phi;   // [D, E]
  Tensor<T> beta;  // [E]
  std::vector<double> ratios;

  std::size_t experts() const { return beta.numel(); }
  void validate() const;
};

template <typename T>
struct RouterScores {
  Tensor<T> logits;  // pre-sigmoid, [L, E]
  Tensor<T> scores;  // sigmoid(logits)
};

/// sigmoid(X * phi + beta) for X [L, D].
template <typename T>
RouterScores<T> route_scores(const Tensor<T>& x, const RouterParams<T>& params);

/// Prefill cascade over a row-major L x E score matrix.
template <typename T>
Assignment prefill_assign(std::span<const T> scores, std::size_t experts,
                          std::span<const double> ratios);

/// argmax with ties going to the lowest index.
template <typename T>
int decode_assign(std::span<const T> score_row);

/// Mean softmax cross-entropy of the score rows against `assignment`.
template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& scores, const Assignment& assignment);

/// Random permutation of the cascade counts; reproducible for a given seed.
Assignment random_assign(std::size_t length, std::span<const double> ratios, std::uint64_t seed);

}  // namespace mixsga
