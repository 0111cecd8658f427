#pragma once

// Layers shared by the vision encoder, the connector and the toy decoder.
// Every parameterized struct exposes visit(prefix, f) which calls
// f(name, Tensor&) for each parameter in a fixed order; the order defines
// checkpoint layout and optimizer state layout.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ovis/rng.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

inline constexpr double kInitStd = 0.125;

inline std::string qualify(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = kInitStd) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <class T>
Tensor<T> filled_tensor(Shape shape, T value) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = value;
  return t;
}

// y = x W + b with W stored as [in x out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when bias-free

  static Linear make(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    Linear l;
    l.weight = normal_tensor<T>({in, out}, rng);
    if (with_bias) l.bias = filled_tensor<T>({out}, T(0));
    return l;
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    auto y = matmul(tape, x, weight);
    return bias.defined() ? add_row_bias(tape, y, bias) : y;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(qualify(prefix, "weight"), weight);
    if (bias.defined()) f(qualify(prefix, "bias"), bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm make(std::size_t width) {
    return {filled_tensor<T>({width}, T(1)), filled_tensor<T>({width}, T(0))};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return layernorm(tape, x, gamma, beta, T(1e-5));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(qualify(prefix, "gamma"), gamma);
    f(qualify(prefix, "beta"), beta);
  }
};

// Multi-head softmax attention over the rows of x, with 1/sqrt(d_head) scaling.
template <class T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& x, const Linear<T>& qkv,
                         const Linear<T>& proj, std::size_t heads, bool causal) {
  const std::size_t width = x.cols();
  const std::size_t head_dim = width / heads;
  auto packed = qkv(tape, x);  // [L x 3*width]
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  std::vector<Tensor<T>> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto q = slice(tape, packed, 1, h * head_dim, (h + 1) * head_dim);
    auto k = slice(tape, packed, 1, width + h * head_dim, width + (h + 1) * head_dim);
    auto v = slice(tape, packed, 1, 2 * width + h * head_dim, 2 * width + (h + 1) * head_dim);
    auto scores = scale(tape, matmul_bt(tape, q, k), inv_scale);
    auto weights = softmax_rows(tape, scores, causal);
    outputs.push_back(matmul(tape, weights, v));
  }
  auto merged = heads == 1 ? outputs.front() : concat(tape, outputs, 1);
  return proj(tape, merged);
}

// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(x)). MLP width is 4x.
template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNorm<T> ln2;
  Linear<T> fc;
  Linear<T> out;
  std::size_t heads = 1;

  static TransformerBlock make(std::size_t width, std::size_t heads, Rng& rng) {
    if (heads == 0 || width % heads != 0) {
      throw ShapeError("transformer width " + std::to_string(width) +
                       " is not divisible by head count " + std::to_string(heads));
    }
    TransformerBlock b;
    b.ln1 = LayerNorm<T>::make(width);
    b.qkv = Linear<T>::make(width, 3 * width, rng);
    b.proj = Linear<T>::make(width, width, rng);
    b.ln2 = LayerNorm<T>::make(width);
    b.fc = Linear<T>::make(width, 4 * width, rng);
    b.out = Linear<T>::make(4 * width, width, rng);
    b.heads = heads;
    return b;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool causal) const {
    auto h = add(tape, x, self_attention(tape, ln1(tape, x), qkv, proj, heads, causal));
    auto m = out(tape, gelu(tape, fc(tape, ln2(tape, h))));
    return add(tape, h, m);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(qualify(prefix, "ln1"), f);
    qkv.visit(qualify(prefix, "attn.qkv"), f);
    proj.visit(qualify(prefix, "attn.proj"), f);
    ln2.visit(qualify(prefix, "ln2"), f);
    fc.visit(qualify(prefix, "mlp.fc"), f);
    out.visit(qualify(prefix, "mlp.out"), f);
  }
};

// Deep copy of every parameter reachable through visit().
template <class M>
M deep_copy(const M& model) {
  M copy = model;
  copy.visit("", [](const std::string&, auto& t) { t = t.clone(); });
  return copy;
}

// Parameter count through visit().
template <class M>
std::size_t parameter_count(M& model) {
  std::size_t n = 0;
  model.visit("", [&](const std::string&, auto& t) { n += t.size(); });
  return n;
}

}  // namespace ovis
