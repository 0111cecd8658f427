#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node (shape, values, grad). Leaf
// tensors created by the caller accumulate gradients across backward passes;
// intermediate tensors are produced by the operations below, each of which
// records its backward closure on a Tape. Gradients are only computed for
// inputs whose requires_grad flag is set.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ovis {

using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct GraphError : Error {
  using Error::Error;
};
struct LossError : Error {
  using Error::Error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<T>> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->value = std::make_shared<std::vector<T>>(numel(shape), T(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    auto t = zeros(std::move(shape), requires_grad);
    *t.node_->value = std::move(values);
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value->size(); }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }

  std::span<const T> data() const { return *node_->value; }
  std::span<T> mutable_data() const { return *node_->value; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor " + shape_str(shape()));
    return (*node_->value)[0];
  }
  T at(std::size_t r, std::size_t c) const { return (*node_->value)[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Tensor is a handle: const methods may still write the shared node.
  // Allocates a zero gradient on first use.
  std::span<T> grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(size(), T(0));
    return node_->grad;
  }
  void zero_grad() const { node_->grad.clear(); }

  // Same values, independent gradient buffer.
  Tensor shadow() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
  }

  Tensor clone() const {
    auto t = from(node_->shape, *node_->value, node_->requires_grad);
    return t;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Ordered record of executed operations. Backward replays the record in
// exact reverse order, accumulating into parent gradients.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward) {
    if (executed_) throw GraphError("cannot record onto a tape that has already run backward");
    entries_.push_back(std::move(backward));
  }

  void backward(Tensor<T> root, T seed = T(1)) {
    if (executed_) throw GraphError("backward already executed on this tape; reset() first");
    if (root.size() != 1) {
      throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
    }
    executed_ = true;
    if (!root.requires_grad()) return;
    root.grad_buffer()[0] += seed;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  void reset() {
    entries_.clear();
    executed_ = false;
  }

  bool executed() const { return executed_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  bool executed_ = false;
};

namespace detail {

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.dim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transposed(const T* a, std::size_t r, std::size_t c) {
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

}  // namespace detail

// a[m x k] . b[k x n]
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto out = Tensor<T>::zeros({m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const T* dc = out.grad().data();
      if (a.requires_grad()) {
        auto bt = detail::transposed(b.data().data(), k, n);
        detail::gemm_nn(dc, bt.data(), a.grad_buffer().data(), m, n, k);
      }
      if (b.requires_grad()) {
        detail::gemm_tn(a.data().data(), dc, b.grad_buffer().data(), m, k, n);
      }
    });
  }
  return out;
}

// a[m x k] . b[n x k]^T
template <class T>
Tensor<T> matmul_bt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_bt");
  detail::require_matrix(b, "matmul_bt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  auto out = Tensor<T>::zeros({m, n});
  {
    auto bt = detail::transposed(b.data().data(), n, k);
    detail::gemm_nn(a.data().data(), bt.data(), out.mutable_data().data(), m, k, n);
  }
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const T* dc = out.grad().data();
      // dA = dC . B ; dB = dC^T . A
      if (a.requires_grad()) detail::gemm_nn(dc, b.data().data(), a.grad_buffer().data(), m, n, k);
      if (b.requires_grad()) detail::gemm_tn(dc, a.data().data(), b.grad_buffer().data(), m, n, k);
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

// x[n x m] + bias[m], added to every row.
template <class T>
Tensor<T> add_row_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_matrix(x, "add_row_bias");
  if (bias.size() != x.cols()) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.rows(), m = x.cols();
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) o[i * m + j] = xv[i * m + j] + bv[j];
  if (x.requires_grad() || bias.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([x, bias, out, n, m]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto d = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto d = bias.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) d[j] += g[i * m + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto d = a.grad_buffer();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto d = b.grad_buffer();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T s) {
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto d = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    });
  }
  return out;
}

// Sum of all entries, as a scalar tensor.
template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& d : a.grad_buffer()) d += g;
    });
  }
  return out;
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = x[i];
    o[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto x = a.data();
      auto d = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T t = std::tanh(kC * (v + kA * v * v * v));
        const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
        d[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return out;
}

// Normalizes over the last axis, then applies per-feature scale and shift.
template <class T>
Tensor<T> layernorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t m = x.shape().back();
  const std::size_t n = x.size() / m;
  if (gamma.size() != m || beta.size() != m) {
    throw ShapeError("layernorm: scale/shift " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last axis of " + shape_str(x.shape()));
  }
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(n);
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = xv.data() + r * m;
      T mean = 0;
      for (std::size_t j = 0; j < m; ++j) mean += row[j];
      mean /= T(m);
      T var = 0;
      for (std::size_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= T(m);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[r] = is;
      for (std::size_t j = 0; j < m; ++j) {
        const T h = (row[j] - mean) * is;
        xhat[r * m + j] = h;
        o[r * m + j] = h * gv[j] + bv[j];
      }
    }
  }
  if (x.requires_grad() || gamma.requires_grad() || beta.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
                 m]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (gamma.requires_grad()) {
        auto d = gamma.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < m; ++j) d[j] += g[r * m + j] * xhat[r * m + j];
      }
      if (beta.requires_grad()) {
        auto d = beta.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < m; ++j) d[j] += g[r * m + j];
      }
      if (x.requires_grad()) {
        auto d = x.grad_buffer();
        auto gv = gamma.data();
        std::vector<T> dh(m);
        for (std::size_t r = 0; r < n; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < m; ++j) {
            dh[j] = g[r * m + j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * xhat[r * m + j];
          }
          mean_dh /= T(m);
          mean_dh_h /= T(m);
          for (std::size_t j = 0; j < m; ++j) {
            d[r * m + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * m + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto d = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  auto out = Tensor<T>::from({c, r}, detail::transposed(a.data().data(), r, c));
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, out, r, c]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto d = a.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

// Half-open range [begin, end) along axis 0 (rows) or 1 (columns) of a matrix.
template <class T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& a, std::size_t axis, std::size_t begin,
                std::size_t end) {
  detail::require_matrix(a, "slice");
  if (axis > 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t extent = axis == 0 ? r : c;
  if (begin >= end || end > extent) {
    throw IndexError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  const std::size_t orows = axis == 0 ? end - begin : r;
  const std::size_t ocols = axis == 1 ? end - begin : c;
  const std::size_t r0 = axis == 0 ? begin : 0;
  const std::size_t c0 = axis == 1 ? begin : 0;
  auto out = Tensor<T>::zeros({orows, ocols});
  {
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t i = 0; i < orows; ++i)
      for (std::size_t j = 0; j < ocols; ++j) o[i * ocols + j] = x[(i + r0) * c + j + c0];
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([a, out, orows, ocols, r0, c0, c]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto d = a.grad_buffer();
      for (std::size_t i = 0; i < orows; ++i)
        for (std::size_t j = 0; j < ocols; ++j) d[(i + r0) * c + j + c0] += g[i * ocols + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_matrix(p, "concat");
  const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t f = axis == 0 ? p.cols() : p.rows();
    if (f != fixed) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()) + " along axis " + std::to_string(axis));
    }
    total += axis == 0 ? p.rows() : p.cols();
  }
  const std::size_t orows = axis == 0 ? total : fixed;
  const std::size_t ocols = axis == 0 ? fixed : total;
  auto out = Tensor<T>::zeros({orows, ocols});
  bool any_grad = false;
  {
    auto o = out.mutable_data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
      any_grad = any_grad || p.requires_grad();
      auto x = p.data();
      const std::size_t pr = p.rows(), pc = p.cols();
      for (std::size_t i = 0; i < pr; ++i)
        for (std::size_t j = 0; j < pc; ++j) {
          const std::size_t oi = axis == 0 ? i + offset : i;
          const std::size_t oj = axis == 1 ? j + offset : j;
          o[oi * ocols + oj] = x[i * pc + j];
        }
      offset += axis == 0 ? pr : pc;
    }
  }
  if (any_grad) {
    out.set_requires_grad(true);
    tape.record([parts, out, axis, ocols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t pr = p.rows(), pc = p.cols();
        if (p.requires_grad()) {
          auto d = p.grad_buffer();
          for (std::size_t i = 0; i < pr; ++i)
            for (std::size_t j = 0; j < pc; ++j) {
              const std::size_t oi = axis == 0 ? i + offset : i;
              const std::size_t oj = axis == 1 ? j + offset : j;
              d[i * pc + j] += g[oi * ocols + oj];
            }
        }
        offset += axis == 0 ? pr : pc;
      }
    });
  }
  return out;
}

// Gathers rows of table[V x d] by index; backward scatter-accumulates.
template <class T>
Tensor<T> embedding_rows(Tape<T>& tape, const Tensor<T>& table, const std::vector<int>& ids) {
  detail::require_matrix(table, "embedding_rows");
  if (ids.empty()) throw ShapeError("embedding_rows: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("embedding_rows: id " + std::to_string(id) + " out of range for table " +
                       shape_str(table.shape()));
    }
  }
  auto out = Tensor<T>::zeros({ids.size(), d});
  {
    auto o = out.mutable_data();
    auto x = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) o[i * d + j] = x[static_cast<std::size_t>(ids[i]) * d + j];
  }
  if (table.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([table, out, ids, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto dt = table.grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) dt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
    });
  }
  return out;
}

// Row-wise softmax with max subtraction. With causal=true, entry (i, j) for
// j > i is excluded (probability exactly zero).
template <class T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x, bool causal = false) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t n = x.rows(), k = x.cols();
  auto out = Tensor<T>::zeros(x.shape());
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t width = causal ? std::min(k, i + 1) : k;
      const T* row = xv.data() + i * k;
      T* orow = o.data() + i * k;
      T mx = row[0];
      for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
      T total = 0;
      for (std::size_t j = 0; j < width; ++j) {
        orow[j] = std::exp(row[j] - mx);
        total += orow[j];
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < width; ++j) orow[j] *= inv;
    }
  }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([x, out, n, k]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto s = out.data();
      auto d = x.grad_buffer();
      // dx = s * (g - <g, s>) per row; excluded entries have s == 0.
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * s[i * k + j];
        for (std::size_t j = 0; j < k; ++j) d[i * k + j] += s[i * k + j] * (g[i * k + j] - dot);
      }
    });
  }
  return out;
}

// Mean over unmasked rows of -log softmax(logits)[target].
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, const std::vector<int>& targets,
                        const std::vector<bool>& mask) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t l = logits.rows(), v = logits.cols();
  if (targets.size() != l || mask.size() != l) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for logits " +
                     shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range for vocabulary " + std::to_string(v));
    }
  }
  if (count == 0) throw LossError("cross_entropy: every position is masked; loss is undefined");

  std::vector<T> probs(l * v, T(0));
  T loss = 0;
  auto xv = logits.data();
  for (std::size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    const T* row = xv.data() + i * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T total = 0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - mx);
      total += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= total;
    loss += -(row[targets[i]] - mx - std::log(total));
  }
  auto out = Tensor<T>::scalar(loss / T(count));
  if (logits.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([logits, out, targets, mask, probs = std::move(probs), count, l, v]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / T(count);
      auto d = logits.grad_buffer();
      for (std::size_t i = 0; i < l; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < v; ++j) d[i * v + j] += g * probs[i * v + j];
        d[i * v + static_cast<std::size_t>(targets[i])] -= g;
      }
    });
  }
  return out;
}

}  // namespace ovis
