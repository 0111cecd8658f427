#pragma once

// Connector baseline: a two-layer GELU MLP whose hidden width equals the
// visual vocabulary size, so its parameter count tracks the tokenizer head
// plus visual embedding table.

#include <cmath>
#include <cstddef>
#include <string>

#include "ovis/nn.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

template <class T>
struct ConnectorMLP {
  Linear<T> fc1;  // d -> K
  Linear<T> fc2;  // K -> d'

  static ConnectorMLP make(std::size_t width, std::size_t hidden, std::size_t embed_dim, Rng& rng,
                           bool with_bias = true) {
    return {Linear<T>::make(width, hidden, rng, with_bias),
            Linear<T>::make(hidden, embed_dim, rng, with_bias)};
  }

  std::size_t hidden() const { return fc1.out_features(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(qualify(prefix, "fc1"), f);
    fc2.visit(qualify(prefix, "fc2"), f);
  }
};

template <class T>
Tensor<T> connect(Tape<T>& tape, const ConnectorMLP<T>& mlp, const Tensor<T>& reps) {
  if (reps.dim() != 2 || reps.cols() != mlp.fc1.in_features()) {
    throw ShapeError("connect: representations " + shape_str(reps.shape()) +
                     " do not match connector input width " + std::to_string(mlp.fc1.in_features()));
  }
  return mlp.fc2(tape, gelu(tape, mlp.fc1(tape, reps)));
}

struct ParityReport {
  std::size_t ovis_params = 0;       // d*K + K*d'
  std::size_t connector_params = 0;  // d*K + K + K*d' + d' (with biases)
  double relative_gap = 0.0;         // |connector - ovis| / ovis
};

inline ParityReport param_parity(std::size_t ovis_visual_params, std::size_t connector_params) {
  ParityReport r;
  r.ovis_params = ovis_visual_params;
  r.connector_params = connector_params;
  const double a = static_cast<double>(ovis_visual_params);
  const double b = static_cast<double>(connector_params);
  r.relative_gap = a == 0.0 ? 0.0 : std::abs(b - a) / a;
  return r;
}

}  // namespace ovis
