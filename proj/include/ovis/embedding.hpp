#pragma once

// Visual and textual embedding tables. A visual embedding is the expectation
// of visual-word rows under a probabilistic token; a textual embedding is a
// plain row look-up.

#include <string>
#include <vector>

#include "ovis/nn.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

template <class T>
struct VisualEmbeddingTable {
  Tensor<T> rows;  // [K x d']

  static VisualEmbeddingTable make(std::size_t vocab, std::size_t dim, Rng& rng) {
    return {normal_tensor<T>({vocab, dim}, rng)};
  }

  std::size_t vocab_size() const { return rows.rows(); }
  std::size_t dim() const { return rows.cols(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix, rows);
  }
};

struct SpecialTokens {
  int pad = 0;
  int bos = 1;
  int eos = 2;
  int image = 3;
};

template <class T>
struct TextualEmbeddingTable {
  Tensor<T> rows;  // [V_text x d']
  SpecialTokens special;

  static TextualEmbeddingTable make(std::size_t vocab, std::size_t dim, Rng& rng) {
    return {normal_tensor<T>({vocab, dim}, rng), {}};
  }

  std::size_t vocab_size() const { return rows.rows(); }
  std::size_t dim() const { return rows.cols(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix, rows);
  }
};

// probs [n x K] . rows [K x d'] -> [n x d']
template <class T>
Tensor<T> visual_embed(Tape<T>& tape, const VisualEmbeddingTable<T>& table, const Tensor<T>& probs) {
  if (probs.dim() != 2 || probs.cols() != table.vocab_size()) {
    throw ShapeError("visual_embed: tokens " + shape_str(probs.shape()) + " do not match table " +
                     shape_str(table.rows.shape()));
  }
  return matmul(tape, probs, table.rows);
}

template <class T>
Tensor<T> text_embed(Tape<T>& tape, const TextualEmbeddingTable<T>& table, const std::vector<int>& ids) {
  return embedding_rows(tape, table.rows, ids);
}

}  // namespace ovis
