#pragma once

// Randomized finite-difference cases for every differentiable op and for the
// composed model. Each op output is reduced to a scalar through a fixed random
// weighting so that upstream gradients are non-uniform.

#include <cstdint>
#include <string>
#include <vector>

#include "ovis/connector.hpp"
#include "ovis/embedding.hpp"
#include "ovis/gradcheck.hpp"
#include "ovis/model.hpp"
#include "ovis/nn.hpp"
#include "ovis/visual_tokenizer.hpp"
#include "ovis/vocab.hpp"

namespace ovis {

struct GradCase {
  std::string name;
  GradCheckResult result;
};

namespace detail {

inline Tensor<double> random_input(Rng& rng, Shape shape, double stddev = 1.0) {
  auto t = Tensor<double>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

// sum(out * R) for a fixed R with the same shape as out.
inline Tensor<double> weighted_sum(Tape<double>& tape, const Tensor<double>& out, std::uint64_t seed) {
  Rng rng(seed, "gradcheck.readout");
  auto r = Tensor<double>::zeros(out.shape());
  for (auto& v : r.mutable_data()) v = rng.normal(0.0, 1.0);
  return sum(tape, mul(tape, out, r));
}

inline std::size_t dim_between(Rng& rng, int lo, int hi) { return static_cast<std::size_t>(rng.uniform_int(lo, hi)); }

// Every Tensor reachable through a visit()-able module.
template <class M>
std::vector<Tensor<double>> collect(M& module) {
  std::vector<Tensor<double>> out;
  module.visit("", [&](const std::string&, Tensor<double>& t) { out.push_back(t); });
  return out;
}

}  // namespace detail

// `cases_per_op` randomized instances of each op, double precision.
inline std::vector<GradCase> op_gradient_cases(std::uint64_t seed, std::size_t cases_per_op) {
  using detail::dim_between;
  using detail::random_input;
  using detail::weighted_sum;
  using T = Tensor<double>;
  std::vector<GradCase> out;
  auto run = [&](const std::string& name, std::size_t c, const LossFn& loss, std::vector<T> inputs) {
    out.push_back({name + "#" + std::to_string(c), check_gradients(loss, std::move(inputs))});
  };

  for (std::size_t c = 0; c < cases_per_op; ++c) {
    Rng rng(seed, "gradcheck.ops", c);
    const auto m = dim_between(rng, 1, 4), k = dim_between(rng, 1, 5), n = dim_between(rng, 1, 4);
    const std::uint64_t rs = seed * 1000 + c;

    auto a = random_input(rng, {m, k}), b = random_input(rng, {k, n});
    run("matmul", c, [=](Tape<double>& t) { return weighted_sum(t, matmul(t, a, b), rs); }, {a, b});

    auto bt = random_input(rng, {n, k});
    run("matmul_bt", c, [=](Tape<double>& t) { return weighted_sum(t, matmul_bt(t, a, bt), rs); }, {a, bt});

    auto x = random_input(rng, {m, k}), y = random_input(rng, {m, k});
    run("add", c, [=](Tape<double>& t) { return weighted_sum(t, add(t, x, y), rs); }, {x, y});
    run("mul", c, [=](Tape<double>& t) { return weighted_sum(t, mul(t, x, y), rs); }, {x, y});
    run("scale", c, [=](Tape<double>& t) { return weighted_sum(t, scale(t, x, 1.7), rs); }, {x});
    run("sum", c, [=](Tape<double>& t) { return sum(t, mul(t, x, x)); }, {x});

    auto bias = random_input(rng, {1, k});
    run("add_row_bias", c, [=](Tape<double>& t) { return weighted_sum(t, add_row_bias(t, x, bias), rs); },
        {x, bias});

    auto g = random_input(rng, {m, k}, 2.0);
    run("gelu", c, [=](Tape<double>& t) { return weighted_sum(t, gelu(t, g), rs); }, {g});

    const auto w = dim_between(rng, 2, 6);
    auto ln_x = random_input(rng, {m, w}), gamma = random_input(rng, {1, w}), beta = random_input(rng, {1, w});
    run("layernorm", c,
        [=](Tape<double>& t) { return weighted_sum(t, layernorm(t, ln_x, gamma, beta, 1e-5), rs); },
        {ln_x, gamma, beta});

    run("reshape", c, [=](Tape<double>& t) { return weighted_sum(t, reshape(t, x, {k, m}), rs); }, {x});
    run("transpose", c, [=](Tape<double>& t) { return weighted_sum(t, transpose(t, x), rs); }, {x});

    auto wide = random_input(rng, {m + 2, k + 2});
    const auto r0 = dim_between(rng, 0, static_cast<int>(m)), c0 = dim_between(rng, 0, static_cast<int>(k));
    run("slice_rows", c, [=](Tape<double>& t) { return weighted_sum(t, slice(t, wide, 0, r0, r0 + 2), rs); },
        {wide});
    run("slice_cols", c, [=](Tape<double>& t) { return weighted_sum(t, slice(t, wide, 1, c0, c0 + 2), rs); },
        {wide});

    auto top = random_input(rng, {m, k}), bottom = random_input(rng, {n, k}), right = random_input(rng, {m, n});
    run("concat_rows", c, [=](Tape<double>& t) { return weighted_sum(t, concat(t, {top, bottom}, 0), rs); },
        {top, bottom});
    run("concat_cols", c, [=](Tape<double>& t) { return weighted_sum(t, concat(t, {top, right}, 1), rs); },
        {top, right});

    const auto rows = dim_between(rng, 2, 6);
    auto table = random_input(rng, {rows, k});
    std::vector<int> ids;
    for (std::size_t i = 0; i < m + 2; ++i) ids.push_back(rng.uniform_int(0, static_cast<int>(rows) - 1));
    run("embedding_rows", c, [=](Tape<double>& t) { return weighted_sum(t, embedding_rows(t, table, ids), rs); },
        {table});

    const auto sq = dim_between(rng, 1, 5);
    auto logits = random_input(rng, {sq, sq + 1}, 2.0), square = random_input(rng, {sq, sq}, 2.0);
    run("softmax_rows", c, [=](Tape<double>& t) { return weighted_sum(t, softmax_rows(t, logits), rs); },
        {logits});
    run("softmax_causal", c,
        [=](Tape<double>& t) { return weighted_sum(t, softmax_rows(t, square, true), rs); }, {square});

    const auto vocab = dim_between(rng, 2, 7);
    auto ce_logits = random_input(rng, {m + 1, vocab}, 2.0);
    std::vector<int> targets;
    std::vector<bool> mask;
    for (std::size_t i = 0; i < m + 1; ++i) {
      targets.push_back(rng.uniform_int(0, static_cast<int>(vocab) - 1));
      mask.push_back(i == 0 || rng.uniform() < 0.6);
    }
    run("cross_entropy", c, [=](Tape<double>& t) { return cross_entropy(t, ce_logits, targets, mask); },
        {ce_logits});

    const std::size_t heads = dim_between(rng, 1, 2), width = heads * dim_between(rng, 2, 3);
    auto seq = random_input(rng, {dim_between(rng, 1, 4), width});
    auto block = TransformerBlock<double>::make(width, heads, rng);
    for (auto& p : detail::collect(block))
      for (auto& v : p.mutable_data()) v = rng.normal(0.0, 0.5);
    auto attn_inputs = std::vector<T>{seq, block.qkv.weight, block.qkv.bias, block.proj.weight, block.proj.bias};
    const bool causal = c % 2 == 0;
    run("self_attention", c,
        [=](Tape<double>& t) {
          return weighted_sum(t, self_attention(t, seq, block.qkv, block.proj, heads, causal), rs);
        },
        attn_inputs);
    auto block_inputs = detail::collect(block);
    block_inputs.push_back(seq);
    run("transformer_block", c, [=](Tape<double>& t) { return weighted_sum(t, block(t, seq, causal), rs); },
        block_inputs);

    const auto kv = dim_between(rng, 2, 6), d = dim_between(rng, 2, 5), dp = dim_between(rng, 2, 4);
    auto reps = random_input(rng, {dim_between(rng, 1, 4), d});
    auto head = TokenizerHead<double>::make(kv, d, rng);
    for (auto& v : head.weight.mutable_data()) v = rng.normal(0.0, 1.0);
    run("tokenize", c, [=](Tape<double>& t) { return weighted_sum(t, tokenize(t, head, reps), rs); },
        {reps, head.weight});

    auto probs = random_input(rng, {reps.rows(), kv});
    auto vtable = VisualEmbeddingTable<double>::make(kv, dp, rng);
    for (auto& v : vtable.rows.mutable_data()) v = rng.normal(0.0, 1.0);
    run("visual_embed", c, [=](Tape<double>& t) { return weighted_sum(t, visual_embed(t, vtable, probs), rs); },
        {probs, vtable.rows});

    auto mlp = ConnectorMLP<double>::make(d, kv, dp, rng);
    for (auto& p : detail::collect(mlp))
      for (auto& v : p.mutable_data()) v = rng.normal(0.0, 1.0);
    auto mlp_inputs = detail::collect(mlp);
    mlp_inputs.push_back(reps);
    run("connect", c, [=](Tape<double>& t) { return weighted_sum(t, connect(t, mlp, reps), rs); }, mlp_inputs);
  }
  return out;
}

// Small random configurations of the full pipeline
// (patchify -> encode -> bridge -> assemble -> decoder -> cross-entropy),
// checked along random joint directions and per tensor along a random
// direction restricted to that tensor.
inline std::vector<GradCase> model_gradient_cases(std::uint64_t seed, std::size_t cases) {
  std::vector<GradCase> out;
  const Vocabulary vocab;
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng(seed, "gradcheck.model", c);
    ModelConfig cfg;
    cfg.arch = c % 2 == 0 ? Arch::ovis : Arch::connector;
    cfg.patch = rng.uniform_int(3, 4);
    cfg.image_size = 2 * cfg.patch + rng.uniform_int(0, 2);  // partial patches when not a multiple
    cfg.enc_heads = 2;
    cfg.enc_width = 4 * static_cast<std::size_t>(rng.uniform_int(1, 2));
    cfg.enc_layers = 1;
    cfg.visual_vocab = static_cast<std::size_t>(rng.uniform_int(3, 6));
    cfg.embed_dim = 4 * static_cast<std::size_t>(rng.uniform_int(1, 2));
    cfg.dec_heads = 2;
    cfg.dec_layers = 1;
    cfg.text_vocab = vocab.size();
    cfg.max_seq = 32;
    auto model = Model<double>::make(cfg, seed + c);
    model.visit("", [&](const std::string&, Tensor<double>& t) {
      for (auto& v : t.mutable_data()) v = rng.normal(0.0, 0.3);
    });

    MultimodalSample sample;
    ImageTensor img = ImageTensor::blank(cfg.channels, cfg.image_size, cfg.image_size);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    sample.image = img;
    const auto pre = rng.uniform_int(0, 2), post = rng.uniform_int(1, 3);
    for (int i = 0; i < pre; ++i) sample.prompt.push_back(rng.uniform_int(5, 60));
    sample.prompt.push_back(vocab.special().image);
    for (int i = 0; i < post; ++i) sample.prompt.push_back(rng.uniform_int(5, 60));
    for (int i = 0; i < rng.uniform_int(1, 3); ++i) sample.target.push_back(rng.uniform_int(5, 60));
    sample.target.push_back(vocab.special().eos);

    auto params = detail::collect(model);
    const LossFn loss = [model, sample](Tape<double>& tape) {
      auto input = assemble_sample(tape, model, sample);
      auto logits = llm_forward(tape, model.llm, input);
      const auto labels = next_token_labels(input);
      return cross_entropy(tape, logits, labels.targets, labels.mask);
    };
    const std::string label = std::string(arch_name(cfg.arch)) + "#" + std::to_string(c);
    out.push_back({"model_joint_" + label, check_directional(loss, params, 4, 1e-3, seed + c)});
    GradCheckResult per_tensor;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto r = check_directional(loss, {params[i]}, 1, 1e-3, seed * 7919 + c * 131 + i);
      per_tensor.checked += r.checked;
      if (r.max_rel_error >= per_tensor.max_rel_error) {
        per_tensor.max_rel_error = r.max_rel_error;
        per_tensor.worst = model.named_parameters()[i].first;
      }
    }
    out.push_back({"model_per_tensor_" + label, per_tensor});
  }
  return out;
}

}  // namespace ovis
