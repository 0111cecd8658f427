#pragma once

// Toy decoder-only language model over assembled embedding sequences.

#include <algorithm>
#include <string>
#include <vector>

#include "ovis/embedding.hpp"
#include "ovis/nn.hpp"
#include "ovis/sequence.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

struct LlmConfig {
  std::size_t width = 64;  // d', equal to the embedding tables' width
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t vocab = 256;
  std::size_t max_seq = 128;
};

template <class T>
struct ToyLLM {
  LlmConfig config;
  Tensor<T> pos;  // [max_seq x width]
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_f;
  Linear<T> head;  // width -> vocab, no bias, not tied to the input table

  static ToyLLM make(const LlmConfig& cfg, Rng& rng) {
    ToyLLM llm;
    llm.config = cfg;
    llm.pos = normal_tensor<T>({cfg.max_seq, cfg.width}, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      llm.blocks.push_back(TransformerBlock<T>::make(cfg.width, cfg.heads, rng));
    }
    llm.ln_f = LayerNorm<T>::make(cfg.width);
    llm.head = Linear<T>::make(cfg.width, cfg.vocab, rng, /*with_bias=*/false);
    return llm;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(qualify(prefix, "pos"), pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].visit(qualify(prefix, "block" + std::to_string(i)), f);
    }
    ln_f.visit(qualify(prefix, "ln_f"), f);
    head.visit(qualify(prefix, "head"), f);
  }
};

// [L x d'] embeddings -> [L x V] next-token logits under a causal mask.
template <class T>
Tensor<T> llm_forward(Tape<T>& tape, const ToyLLM<T>& llm, const Tensor<T>& embeddings) {
  const std::size_t len = embeddings.rows();
  if (len > llm.config.max_seq) {
    throw ShapeError("llm_forward: sequence of " + std::to_string(len) +
                     " exceeds positional capacity " + std::to_string(llm.config.max_seq));
  }
  if (embeddings.cols() != llm.config.width) {
    throw ShapeError("llm_forward: embeddings " + shape_str(embeddings.shape()) +
                     " do not match model width " + std::to_string(llm.config.width));
  }
  auto x = add(tape, embeddings, slice(tape, llm.pos, 0, 0, len));
  for (const auto& block : llm.blocks) x = block(tape, x, /*causal=*/true);
  return llm.head(tape, llm.ln_f(tape, x));
}

template <class T>
Tensor<T> llm_forward(Tape<T>& tape, const ToyLLM<T>& llm, const AssembledInput<T>& input) {
  return llm_forward(tape, llm, input.embeddings);
}

// Appends argmax tokens until EOS or max_new tokens. The returned ids include
// the EOS when one is produced.
template <class T>
std::vector<int> generate_greedy(const ToyLLM<T>& llm, const TextualEmbeddingTable<T>& table,
                                 const AssembledInput<T>& prompt, std::size_t max_new) {
  if (max_new == 0) throw Error("generate_greedy: max_new must be at least 1");
  std::vector<int> generated;
  Tensor<T> sequence = prompt.embeddings;
  for (std::size_t step = 0; step < max_new; ++step) {
    if (sequence.rows() >= llm.config.max_seq) break;
    Tape<T> tape;
    auto logits = llm_forward(tape, llm, sequence);
    const std::size_t v = logits.cols();
    auto last = logits.data().subspan((logits.rows() - 1) * v, v);
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    generated.push_back(next);
    if (next == table.special.eos) break;
    auto row = text_embed(tape, table, {next});
    sequence = concat(tape, {sequence, row}, 0);
  }
  return generated;
}

}  // namespace ovis
