#pragma once

// The full toy MLLM: vision encoder -> visual bridge -> sequence assembly ->
// decoder. The bridge is either the probabilistic-token path (tokenizer head
// plus visual embedding table) or the MLP connector baseline; everything else
// is shared code.

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ovis/connector.hpp"
#include "ovis/embedding.hpp"
#include "ovis/llm.hpp"
#include "ovis/patch.hpp"
#include "ovis/sequence.hpp"
#include "ovis/visual_tokenizer.hpp"

namespace ovis {

enum class Arch { ovis, connector };

inline std::string arch_name(Arch a) { return a == Arch::ovis ? "ovis" : "connector"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "ovis") return Arch::ovis;
  if (s == "connector") return Arch::connector;
  throw Error("unknown architecture '" + s + "' (expected ovis or connector)");
}

struct ModelConfig {
  Arch arch = Arch::ovis;
  int image_size = 32;
  int channels = 1;
  int patch = 8;
  std::size_t enc_width = 64;  // d
  std::size_t enc_layers = 2;
  std::size_t enc_heads = 4;
  std::size_t visual_vocab = 512;  // K
  std::size_t embed_dim = 64;      // d'
  std::size_t dec_layers = 4;
  std::size_t dec_heads = 4;
  std::size_t text_vocab = 256;
  std::size_t max_seq = 128;

  std::size_t patches() const {
    const auto side = static_cast<std::size_t>(ceil_div(image_size, patch));
    return side * side;
  }

  EncoderConfig encoder() const {
    return {channels, patch, patch, patches(), enc_width, enc_layers, enc_heads};
  }

  LlmConfig llm() const { return {embed_dim, dec_layers, dec_heads, text_vocab, max_seq}; }
};

template <class T>
struct OvisBridge {
  TokenizerHead<T> head;
  VisualEmbeddingTable<T> table;

  template <class F>
  void visit(const std::string&, F&& f) {
    head.visit("tokenizer", f);
    table.visit("visual_table", f);
  }
};

template <class T>
struct ConnectorBridge {
  ConnectorMLP<T> mlp;

  template <class F>
  void visit(const std::string&, F&& f) {
    mlp.visit("connector", f);
  }
};

template <class T>
struct Model {
  ModelConfig config;
  VisualEncoder<T> encoder;
  std::variant<OvisBridge<T>, ConnectorBridge<T>> bridge;
  TextualEmbeddingTable<T> text;
  ToyLLM<T> llm;

  static Model make(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.config = cfg;
    Rng enc_rng(seed, "init.encoder");
    m.encoder = VisualEncoder<T>::make(cfg.encoder(), enc_rng);
    Rng bridge_rng(seed, "init.bridge");
    if (cfg.arch == Arch::ovis) {
      OvisBridge<T> b;
      b.head = TokenizerHead<T>::make(cfg.visual_vocab, cfg.enc_width, bridge_rng);
      b.table = VisualEmbeddingTable<T>::make(cfg.visual_vocab, cfg.embed_dim, bridge_rng);
      m.bridge = std::move(b);
    } else {
      m.bridge = ConnectorBridge<T>{
          ConnectorMLP<T>::make(cfg.enc_width, cfg.visual_vocab, cfg.embed_dim, bridge_rng)};
    }
    Rng text_rng(seed, "init.text_table");
    m.text = TextualEmbeddingTable<T>::make(cfg.text_vocab, cfg.embed_dim, text_rng);
    Rng llm_rng(seed, "init.llm");
    m.llm = ToyLLM<T>::make(cfg.llm(), llm_rng);
    return m;
  }

  // Parameter names: encoder.*, tokenizer.W, visual_table | connector.*,
  // llm.tok_embed, llm.*.
  template <class F>
  void visit(const std::string&, F&& f) {
    encoder.visit("encoder", f);
    std::visit([&](auto& b) { b.visit("", f); }, bridge);
    text.visit("llm.tok_embed", f);
    llm.visit("llm", f);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit("", [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::size_t visual_bridge_parameters() {
    std::size_t n = 0;
    std::visit([&](auto& b) { b.visit("", [&](const std::string&, Tensor<T>& t) { n += t.size(); }); },
               bridge);
    return n;
  }
};

// reps [n x d] -> visual embeddings [n x d'] through whichever bridge is active.
template <class T>
Tensor<T> bridge_embed(Tape<T>& tape, const Model<T>& model, const Tensor<T>& reps) {
  if (const auto* ob = std::get_if<OvisBridge<T>>(&model.bridge)) {
    return visual_embed(tape, ob->table, tokenize(tape, ob->head, reps));
  }
  return connect(tape, std::get<ConnectorBridge<T>>(model.bridge).mlp, reps);
}

template <class T>
Tensor<T> visual_embeddings(Tape<T>& tape, const Model<T>& model, const ImageTensor& img) {
  const auto grid = patchify(img, model.config.patch, model.config.patch);
  return bridge_embed(tape, model, encode(tape, model.encoder, grid));
}

template <class T>
AssembledInput<T> assemble_sample(Tape<T>& tape, const Model<T>& model, const MultimodalSample& s) {
  Tensor<T> visual;
  if (s.image) visual = visual_embeddings(tape, model, *s.image);
  return assemble(tape, s, visual, model.text);
}

struct SampleOutput {
  double loss = 0.0;
  std::size_t target_tokens = 0;
  std::size_t correct = 0;  // argmax hits on supervised positions
};

// Forward pass, masked next-token cross-entropy; optionally backward with the
// loss scaled by grad_scale.
template <class T>
SampleOutput run_sample(const Model<T>& model, const MultimodalSample& s,
                        std::optional<T> grad_scale = std::nullopt) {
  Tape<T> tape;
  auto input = assemble_sample(tape, model, s);
  auto logits = llm_forward(tape, model.llm, input);
  const auto labels = next_token_labels(input);
  auto loss = cross_entropy(tape, logits, labels.targets, labels.mask);
  SampleOutput out;
  out.loss = static_cast<double>(loss.item());
  const std::size_t v = logits.cols();
  auto lv = logits.data();
  for (std::size_t p = 0; p < labels.mask.size(); ++p) {
    if (!labels.mask[p]) continue;
    ++out.target_tokens;
    auto row = lv.subspan(p * v, v);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels.targets[p]) ++out.correct;
  }
  if (grad_scale) tape.backward(loss, *grad_scale);
  return out;
}

}  // namespace ovis
