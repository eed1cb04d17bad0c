#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixsga {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform for an op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor handle with reverse-mode autodiff.
///
/// Copies share the underlying node, like a framework tensor. Values are
/// treated as immutable once an op has consumed them; only parameters are
/// updated in place, through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// In-place access for optimizers and checkpoint loading.
  std::span<T> mutable_data() { return node_->data; }
  /// Empty span until a backward pass has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();

  /// Same values, no history.
  Tensor detach() const;

  /// Back-propagates from a scalar. Leaf gradients accumulate across calls;
  /// intermediate gradients are recomputed each call.
  void backward() const;

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node<T>> node);

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Boolean keep-mask broadcast over the leading dims of a where() operand.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;
};

Mask causal_mask(std::size_t length);

// ---- ops ------------------------------------------------------------------
// Broadcasting: `b` may equal `a` in shape, match a trailing suffix of it, or
// hold a single element.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// [..., M, K] x [K, N] or batched [..., M, K] x [..., K, N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
/// Softmax over the last dim.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Contiguous range [start, start + length) along `dim`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t dim, std::size_t start, std::size_t length);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t dim);
/// Swaps the last two dims.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::size_t dim0, std::size_t dim1);

/// Rows of `table` ([V, D]) for each id; result [ids.size(), D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);
/// Rows of `x` along dim 0.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
/// Keeps entries where mask is set, writes `fill` elsewhere.
template <typename T> Tensor<T> where(const Mask& mask, const Tensor<T>& x, T fill);

/// Mean over contiguous blocks of `group` entries along `dim`.
template <typename T>
Tensor<T> group_mean(const Tensor<T>& x, std::size_t dim, std::size_t group);
/// Repeats each entry along `dim` `repeats` times contiguously.
template <typename T>
Tensor<T> repeat_interleave(const Tensor<T>& x, std::size_t dim, std::size_t repeats);

/// Layer normalization over the last dim.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Mean softmax cross-entropy of `logits` [N, C] against class ids.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

}  // namespace mixsga
