#include "mixsga/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "gemm.hpp"

namespace mixsga {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what + " for shape " + shape_str(a));
}

// Builds an op result, recording history only when some input needs it.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (g_grad_enabled)
    for (const auto* in : inputs) track = track || in->requires_grad();
  if (track) {
    node->requires_grad = true;
    for (const auto* in : inputs) node->parents.push_back(in->node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> make_result_n(const char* op, Shape shape, std::vector<T> data,
                        const std::vector<Tensor<T>>& inputs,
                        std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) track = track || in.requires_grad();
  if (track) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

// Grad buffer of a parent, or nullptr when it does not need one.
template <typename T>
T* grad_of(Node<T>& self, std::size_t i) {
  Node<T>& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

template <typename T>
void check_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (b.numel() == 1) return;
  if (sb.size() > sa.size()) shape_fail(op, sa, sb);
  if (!std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size())))
    shape_fail(op, sa, sb);
}

// outer / extent / inner split around `dim`.
struct Split {
  std::size_t outer = 1, extent = 1, inner = 1;
};

Split split_at(const Shape& s, std::size_t dim) {
  Split r;
  for (std::size_t i = 0; i < dim; ++i) r.outer *= s[i];
  r.extent = s[dim];
  for (std::size_t i = dim + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Mask causal_mask(std::size_t length) {
  Mask m{{length, length}, std::vector<std::uint8_t>(length * length, 0)};
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.keep[i * length + j] = 1;
  return m;
}

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  if (numel_of(shape) != data.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) shape_fail("item", shape(), "expected a single element");
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) shape_fail("at", s, "index rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (auto i : index) {
    if (i >= s[d]) shape_fail("at", s, "index out of range");
    flat = flat * s[d] + i;
    ++d;
  }
  return node_->data[flat];
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) shape_fail("backward", shape(), "expected a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; each node is emitted once.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  node_->ensure_grad();
  node_->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf() && n->backward) n->backward(*n);
  }
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("add", a, b);
  const auto n = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i % nb];
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [n, nb](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("sub", a, b);
  const auto n = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i % nb];
  return make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [n, nb](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("mul", a, b);
  const auto n = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % nb];
  return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [n, nb](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    if (T* ga = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i % nb];
    if (T* gb = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto n = a.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {&a}, [n, factor](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto n = x.numel();
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  return make_result<T>("sigmoid", x.shape(), std::move(out), {&x}, [n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* y = self.data.data();
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  const auto n = x.numel();
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = xd[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(k0 * (v + k1 * v * v * v)));
  }
  return make_result<T>("gelu", x.shape(), std::move(out), {&x}, [n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv = self.parents[0]->data.data();
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xv[i];
        const T t = std::tanh(k0 * (v + k1 * v * v * v));
        const T d = T(0.5) * (T(1) + t) +
                    T(0.5) * v * (T(1) - t * t) * k0 * (T(1) + T(3) * k1 * v * v);
        gx[i] += g[i] * d;
      }
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  const auto n = x.numel();
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(xd[i]);
  return make_result<T>("log", x.shape(), std::move(out), {&x}, [n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv = self.parents[0]->data.data();
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xv[i];
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  const auto n = x.numel();
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(xd[i]);
  return make_result<T>("exp", x.shape(), std::move(out), {&x}, [n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* y = self.data.data();
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) shape_fail("softmax", x.shape(), "needs at least one dim");
  const std::size_t c = x.shape().back();
  const std::size_t rows = c ? x.numel() / c : 0;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * c;
    T* o = out.data() + r * c;
    const T mx = *std::max_element(in, in + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= total;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {&x}, [rows, c](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* y = self.data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[o + j] * y[o + j];
      for (std::size_t j = 0; j < c; ++j) gx[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  const auto n = x.numel();
  return make_result<T>("sum", Shape{}, {total}, {&x}, [n](Node<T>& self) {
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const auto n = x.numel();
  if (n == 0) shape_fail("mean", x.shape(), "empty tensor");
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>("mean", Shape{}, {total / T(n)}, {&x}, [n](Node<T>& self) {
    if (T* gx = grad_of(self, 0)) {
      const T g = self.grad[0] / T(n);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    }
  });
}

// ---- matmul ---------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul", sa, sb);
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) shape_fail("matmul", sa, sb);

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);

  if (sb.size() == 2) {
    // Leading dims of `a` fold into rows.
    const std::size_t rows = a.numel() / k;
    std::vector<T> out(rows * n, T(0));
    detail::gemm_nn(rows, n, k, a.data().data(), b.data().data(), out.data());
    return make_result<T>("matmul", std::move(out_shape), std::move(out), {&a, &b},
                          [rows, n, k](Node<T>& self) {
                            const T* g = self.grad.data();
                            if (T* ga = grad_of(self, 0))
                              detail::gemm_nt(rows, k, n, g, self.parents[1]->data.data(), ga);
                            if (T* gb = grad_of(self, 1))
                              detail::gemm_tn(k, n, rows, self.parents[0]->data.data(), g, gb);
                          });
  }

  if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))
    shape_fail("matmul", sa, sb);
  const std::size_t batch = a.numel() / (m * k);
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t bi = 0; bi < batch; ++bi)
    detail::gemm_nn(m, n, k, a.data().data() + bi * m * k, b.data().data() + bi * k * n,
                    out.data() + bi * m * n);
  return make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {&a, &b}, [batch, m, n, k](Node<T>& self) {
        const T* g = self.grad.data();
        const T* av = self.parents[0]->data.data();
        const T* bv = self.parents[1]->data.data();
        T* ga = grad_of(self, 0);
        T* gb = grad_of(self, 1);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          if (ga) detail::gemm_nt(m, k, n, g + bi * m * n, bv + bi * k * n, ga + bi * m * k);
          if (gb) detail::gemm_tn(k, n, m, av + bi * m * k, g + bi * m * n, gb + bi * k * n);
        }
      });
}

// ---- shape ops ------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  const auto n = x.numel();
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [n](Node<T>& self) {
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t dim, std::size_t start, std::size_t length) {
  if (dim >= x.rank()) shape_fail("slice", x.shape(), "dim out of range");
  if (start + length > x.dim(dim)) shape_fail("slice", x.shape(), "range out of bounds");
  const Split s = split_at(x.shape(), dim);
  Shape out_shape = x.shape();
  out_shape[dim] = length;
  std::vector<T> out(s.outer * length * s.inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.data() + (o * s.extent + start) * s.inner, length * s.inner,
                out.data() + o * length * s.inner);
  return make_result<T>("slice", std::move(out_shape), std::move(out), {&x},
                        [s, start, length](Node<T>& self) {
                          T* gx = grad_of(self, 0);
                          if (!gx) return;
                          const T* g = self.grad.data();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            T* dst = gx + (o * s.extent + start) * s.inner;
                            const T* src = g + o * length * s.inner;
                            for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t dim) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (dim >= first.size()) shape_fail("concat", first, "dim out of range");
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != dim && s[i] != first[i]) shape_fail("concat", first, s);
    extents.push_back(s[dim]);
    total += s[dim];
  }
  Shape out_shape = first;
  out_shape[dim] = total;
  const Split s = split_at(out_shape, dim);
  std::vector<T> out(s.outer * total * s.inner);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const std::size_t len = extents[pi] * s.inner;
    auto pd = parts[pi].data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pd.data() + o * len, len, out.data() + (o * total + offset) * s.inner);
    offset += extents[pi];
  }
  return make_result_n<T>("concat", std::move(out_shape), std::move(out), parts,
                          [s, total, extents](Node<T>& self) {
                            const T* g = self.grad.data();
                            std::size_t offset = 0;
                            for (std::size_t pi = 0; pi < extents.size(); ++pi) {
                              const std::size_t len = extents[pi] * s.inner;
                              if (T* gp = grad_of(self, pi))
                                for (std::size_t o = 0; o < s.outer; ++o) {
                                  const T* src = g + (o * total + offset) * s.inner;
                                  for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += src[i];
                                }
                              offset += extents[pi];
                            }
                          });
}

namespace {

// out[a, j, b, i, c] = in[a, i, b, j, c] for the swap of dims d0 < d1.
template <typename T>
void swap_axes_copy(const Shape& in_shape, std::size_t d0, std::size_t d1, const T* in, T* out,
                    bool accumulate) {
  std::size_t a = 1, b = 1, c = 1;
  for (std::size_t i = 0; i < d0; ++i) a *= in_shape[i];
  for (std::size_t i = d0 + 1; i < d1; ++i) b *= in_shape[i];
  for (std::size_t i = d1 + 1; i < in_shape.size(); ++i) c *= in_shape[i];
  const std::size_t n0 = in_shape[d0], n1 = in_shape[d1];
  for (std::size_t ia = 0; ia < a; ++ia)
    for (std::size_t i = 0; i < n0; ++i)
      for (std::size_t ib = 0; ib < b; ++ib)
        for (std::size_t j = 0; j < n1; ++j) {
          const T* src = in + ((((ia * n0 + i) * b + ib) * n1 + j) * c);
          T* dst = out + ((((ia * n1 + j) * b + ib) * n0 + i) * c);
          if (accumulate)
            for (std::size_t ic = 0; ic < c; ++ic) dst[ic] += src[ic];
          else
            std::copy_n(src, c, dst);
        }
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t dim0, std::size_t dim1) {
  if (dim0 >= x.rank() || dim1 >= x.rank()) shape_fail("transpose", x.shape(), "dim out of range");
  if (dim0 == dim1) return reshape(x, x.shape());
  if (dim0 > dim1) std::swap(dim0, dim1);
  Shape out_shape = x.shape();
  std::swap(out_shape[dim0], out_shape[dim1]);
  std::vector<T> out(x.numel());
  swap_axes_copy(x.shape(), dim0, dim1, x.data().data(), out.data(), false);
  return make_result<T>("transpose", out_shape, std::move(out), {&x},
                        [out_shape, dim0, dim1](Node<T>& self) {
                          if (T* gx = grad_of(self, 0))
                            swap_axes_copy(out_shape, dim0, dim1, self.grad.data(), gx, true);
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) shape_fail("transpose", x.shape(), "needs at least two dims");
  return transpose(x, x.rank() - 2, x.rank() - 1);
}

// ---- indexing -------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) shape_fail("embedding", table.shape(), "table must be 2-D");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      shape_fail("embedding", table.shape(), "id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return make_result<T>("embedding", Shape{ids.size(), d}, std::move(out), {&table},
                        [kept = std::move(kept), d](Node<T>& self) {
                          T* gt = grad_of(self, 0);
                          if (!gt) return;
                          for (std::size_t i = 0; i < kept.size(); ++i) {
                            T* dst = gt + static_cast<std::size_t>(kept[i]) * d;
                            const T* src = self.grad.data() + i * d;
                            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) shape_fail("gather_rows", x.shape(), "needs at least one dim");
  const std::size_t n = x.dim(0);
  const std::size_t width = n ? x.numel() / n : 0;
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<T> out(rows.size() * width);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) shape_fail("gather_rows", x.shape(), "row index out of range");
    std::copy_n(xd.data() + rows[i] * width, width, out.data() + i * width);
  }
  std::vector<std::size_t> kept(rows.begin(), rows.end());
  return make_result<T>("gather_rows", std::move(out_shape), std::move(out), {&x},
                        [kept = std::move(kept), width](Node<T>& self) {
                          T* gx = grad_of(self, 0);
                          if (!gx) return;
                          for (std::size_t i = 0; i < kept.size(); ++i) {
                            T* dst = gx + kept[i] * width;
                            const T* src = self.grad.data() + i * width;
                            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> where(const Mask& mask, const Tensor<T>& x, T fill) {
  const Shape& s = x.shape();
  const Shape& ms = mask.shape;
  if (ms.size() > s.size() ||
      !std::equal(ms.begin(), ms.end(), s.end() - static_cast<std::ptrdiff_t>(ms.size())) ||
      mask.keep.size() != numel_of(ms))
    shape_fail("where", s, ms);
  const std::size_t n = x.numel(), nm = mask.keep.size();
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = mask.keep[i % nm] ? xd[i] : fill;
  return make_result<T>("where", s, std::move(out), {&x}, [keep = mask.keep, n, nm](Node<T>& self) {
    if (T* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        if (keep[i % nm]) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> group_mean(const Tensor<T>& x, std::size_t dim, std::size_t group) {
  if (dim >= x.rank()) shape_fail("group_mean", x.shape(), "dim out of range");
  if (group == 0 || x.dim(dim) % group != 0)
    shape_fail("group_mean", x.shape(),
               "extent not divisible by group size " + std::to_string(group));
  const Split s = split_at(x.shape(), dim);
  const std::size_t groups = s.extent / group;
  Shape out_shape = x.shape();
  out_shape[dim] = groups;
  std::vector<T> out(s.outer * groups * s.inner, T(0));
  auto xd = x.data();
  const T inv = T(1) / T(group);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k) {
      const T* src = xd.data() + (o * s.extent + k) * s.inner;
      T* dst = out.data() + (o * groups + k / group) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * inv;
    }
  return make_result<T>("group_mean", std::move(out_shape), std::move(out), {&x},
                        [s, groups, group, inv](Node<T>& self) {
                          T* gx = grad_of(self, 0);
                          if (!gx) return;
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t k = 0; k < s.extent; ++k) {
                              const T* src = self.grad.data() + (o * groups + k / group) * s.inner;
                              T* dst = gx + (o * s.extent + k) * s.inner;
                              for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * inv;
                            }
                        });
}

template <typename T>
Tensor<T> repeat_interleave(const Tensor<T>& x, std::size_t dim, std::size_t repeats) {
  if (dim >= x.rank()) shape_fail("repeat_interleave", x.shape(), "dim out of range");
  if (repeats == 0) shape_fail("repeat_interleave", x.shape(), "zero repeats");
  const Split s = split_at(x.shape(), dim);
  const std::size_t wide = s.extent * repeats;
  Shape out_shape = x.shape();
  out_shape[dim] = wide;
  std::vector<T> out(s.outer * wide * s.inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < wide; ++k)
      std::copy_n(xd.data() + (o * s.extent + k / repeats) * s.inner, s.inner,
                  out.data() + (o * wide + k) * s.inner);
  return make_result<T>("repeat_interleave", std::move(out_shape), std::move(out), {&x},
                        [s, wide, repeats](Node<T>& self) {
                          T* gx = grad_of(self, 0);
                          if (!gx) return;
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t k = 0; k < wide; ++k) {
                              const T* src = self.grad.data() + (o * wide + k) * s.inner;
                              T* dst = gx + (o * s.extent + k / repeats) * s.inner;
                              for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                            }
                        });
}

// ---- fused ----------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) shape_fail("layer_norm", x.shape(), "needs at least one dim");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d}) shape_fail("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{d}) shape_fail("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const T* g = self.grad.data();
        const T* gam = self.parents[1]->data.data();
        T* gx = grad_of(self, 0);
        T* gg = grad_of(self, 1);
        T* gb = grad_of(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * d;
          const T* hr = xhat.data() + r * d;
          if (gg)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
          if (gx) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = gr[j] * gam[j];
              m1 += dh;
              m2 += dh * hr[j];
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += inv_std[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) shape_fail("cross_entropy", logits.shape(), "logits must be 2-D");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n)
    shape_fail("cross_entropy", logits.shape(), Shape{targets.size()});
  if (n == 0) shape_fail("cross_entropy", logits.shape(), "no rows");
  std::vector<T> probs(n * c);
  auto ld = logits.data();
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      shape_fail("cross_entropy", logits.shape(), "target " + std::to_string(t) + " out of range");
    const T* in = ld.data() + r * c;
    const T mx = *std::max_element(in, in + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(in[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    total += std::log(z) + mx - in[t];
  }
  std::vector<int> kept(targets.begin(), targets.end());
  return make_result<T>("cross_entropy", Shape{}, {total / T(n)}, {&logits},
                        [n, c, probs = std::move(probs), kept = std::move(kept)](Node<T>& self) {
                          T* gl = grad_of(self, 0);
                          if (!gl) return;
                          const T g = self.grad[0] / T(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * probs[r * c + j];
                            gl[r * c + static_cast<std::size_t>(kept[r])] -= g;
                          }
                        });
}

// ---- instantiation --------------------------------------------------------

#define MIXSGA_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                     \
  template Tensor<T> exp(const Tensor<T>&);                                                     \
  template Tensor<T> softmax(const Tensor<T>&);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                         \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> where(const Mask&, const Tensor<T>&, T);                                   \
  template Tensor<T> group_mean(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> repeat_interleave(const Tensor<T>&, std::size_t, std::size_t);             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

MIXSGA_INSTANTIATE(float)
MIXSGA_INSTANTIATE(double)

#undef MIXSGA_INSTANTIATE

}  // namespace mixsga
