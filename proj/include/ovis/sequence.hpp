#pragma once

// Multimodal sequence assembly: the image indicator's slot in the token
// sequence is replaced by the n visual embeddings, and the loss mask covers
// only the target (answer) tokens.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "ovis/embedding.hpp"
#include "ovis/patch.hpp"
#include "ovis/tensor.hpp"
#include "ovis/vocab.hpp"

namespace ovis {

struct MultimodalSample {
  std::vector<int> prompt;
  std::vector<int> target;
  std::optional<ImageTensor> image;
};

template <class T>
struct AssembledInput {
  Tensor<T> embeddings;          // [L x d']
  std::vector<bool> loss_mask;   // true on target positions
  std::vector<int> position_ids;
  std::vector<int> token_ids;    // -1 on visual positions
  std::size_t visual_begin = 0;  // lambda, when visual_count > 0
  std::size_t visual_count = 0;

  std::size_t length() const { return token_ids.size(); }
};

// Index of the image indicator in the prompt, or nullopt. Throws if the
// sample breaks the one-image contract.
inline std::optional<std::size_t> indicator_index(const MultimodalSample& s, int image_id) {
  std::optional<std::size_t> found;
  for (std::size_t i = 0; i < s.prompt.size(); ++i) {
    if (s.prompt[i] != image_id) continue;
    if (found) throw Error("sample has more than one image indicator");
    found = i;
  }
  if (std::find(s.target.begin(), s.target.end(), image_id) != s.target.end()) {
    throw Error("image indicator may not appear in the target");
  }
  if (found && !s.image) throw Error("sample has an image indicator but no image");
  if (!found && s.image) throw Error("sample has an image but no image indicator");
  return found;
}

// visual: [n x d'] embeddings for the sample's image; ignored (may be
// undefined) for text-only samples.
template <class T>
AssembledInput<T> assemble(Tape<T>& tape, const MultimodalSample& sample, const Tensor<T>& visual,
                           const TextualEmbeddingTable<T>& table) {
  const auto lambda = indicator_index(sample, table.special.image);
  std::vector<int> sequence = sample.prompt;
  sequence.insert(sequence.end(), sample.target.begin(), sample.target.end());
  if (sequence.empty()) throw Error("assemble: empty sample");

  AssembledInput<T> out;
  if (!lambda) {
    out.embeddings = text_embed(tape, table, sequence);
    out.token_ids = sequence;
  } else {
    if (!visual.defined() || visual.dim() != 2 || visual.cols() != table.dim()) {
      throw ShapeError("assemble: visual embeddings must be [n x " + std::to_string(table.dim()) + "]");
    }
    const std::size_t n = visual.rows();
    std::vector<int> before(sequence.begin(), sequence.begin() + static_cast<long>(*lambda));
    std::vector<int> after(sequence.begin() + static_cast<long>(*lambda) + 1, sequence.end());
    std::vector<Tensor<T>> parts;
    if (!before.empty()) parts.push_back(text_embed(tape, table, before));
    parts.push_back(visual);
    if (!after.empty()) parts.push_back(text_embed(tape, table, after));
    out.embeddings = parts.size() == 1 ? parts.front() : concat(tape, parts, 0);
    out.token_ids = before;
    out.token_ids.insert(out.token_ids.end(), n, -1);
    out.token_ids.insert(out.token_ids.end(), after.begin(), after.end());
    out.visual_begin = *lambda;
    out.visual_count = n;
  }
  const std::size_t len = out.token_ids.size();
  out.loss_mask.assign(len, false);
  for (std::size_t i = len - sample.target.size(); i < len; ++i) out.loss_mask[i] = true;
  out.position_ids.resize(len);
  for (std::size_t i = 0; i < len; ++i) out.position_ids[i] = static_cast<int>(i);
  return out;
}

// Next-token supervision: logits at position p predict the token at p + 1.
struct NextTokenLabels {
  std::vector<int> targets;
  std::vector<bool> mask;
};

template <class T>
NextTokenLabels next_token_labels(const AssembledInput<T>& input) {
  const std::size_t len = input.length();
  NextTokenLabels labels{std::vector<int>(len, 0), std::vector<bool>(len, false)};
  for (std::size_t p = 0; p + 1 < len; ++p) {
    if (!input.loss_mask[p + 1]) continue;
    labels.targets[p] = input.token_ids[p + 1];
    labels.mask[p] = true;
  }
  return labels;
}

inline constexpr std::string_view kCaptionTemplate = "<image>'s caption:";

inline MultimodalSample build_caption_sample(const ImageTensor& img, const std::vector<int>& caption,
                                             const Vocabulary& vocab) {
  if (caption.empty()) throw Error("build_caption_sample: empty caption");
  MultimodalSample s;
  s.prompt = vocab.encode(kCaptionTemplate);
  s.target = caption;
  s.target.push_back(vocab.special().eos);
  s.image = img;
  return s;
}

}  // namespace ovis
