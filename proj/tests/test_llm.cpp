#include <gtest/gtest.h>

#include "ovis/llm.hpp"
#include "ovis/train.hpp"

using namespace ovis;

namespace {

LlmConfig tiny(std::size_t vocab = 64) { return {16, 2, 2, vocab, 32}; }

Tensor<double> random_rows(Rng& rng, std::size_t n, std::size_t d) {
  auto t = Tensor<double>::zeros({n, d});
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, 1.0);
  return t;
}

}  // namespace

TEST(ToyLLM, LogitShape) {
  Rng rng(1, "test.llm_shape");
  auto llm = ToyLLM<double>::make(tiny(64), rng);
  Tape<double> tape;
  auto logits = llm_forward(tape, llm, random_rows(rng, 6, 16));
  EXPECT_EQ(logits.shape(), (Shape{6, 64}));
}

TEST(ToyLLM, CausalAtEveryPosition) {
  Rng rng(2, "test.llm_causal");
  auto llm = ToyLLM<double>::make(tiny(), rng);
  auto x = random_rows(rng, 7, 16);
  Tape<double> base_tape;
  auto base = llm_forward(base_tape, llm, x);
  for (std::size_t j = 0; j < 7; ++j) {
    auto perturbed = x.clone();
    for (std::size_t c = 0; c < 16; ++c) perturbed.mutable_data()[j * 16 + c] += rng.normal(0.0, 1.0);
    Tape<double> tape;
    auto out = llm_forward(tape, llm, perturbed);
    for (std::size_t p = 0; p < 7; ++p) {
      bool same = true;
      for (std::size_t v = 0; v < 64; ++v) same = same && out.at(p, v) == base.at(p, v);
      if (p < j) {
        EXPECT_TRUE(same) << "position " << p << " saw a change at " << j;
      } else if (p == j) {
        EXPECT_FALSE(same);
      }
    }
  }
}

TEST(ToyLLM, OverLengthAndWidthMismatchThrow) {
  Rng rng(3, "test.llm_errors");
  auto llm = ToyLLM<double>::make(tiny(), rng);
  Tape<double> tape;
  EXPECT_THROW(llm_forward(tape, llm, random_rows(rng, 33, 16)), ShapeError);
  EXPECT_THROW(llm_forward(tape, llm, random_rows(rng, 3, 8)), ShapeError);
}

TEST(ToyLLM, ArgmaxInvariantUnderConstantShift) {
  Rng rng(4, "test.llm_shift");
  auto llm = ToyLLM<double>::make(tiny(), rng);
  Tape<double> tape;
  auto logits = llm_forward(tape, llm, random_rows(rng, 5, 16));
  for (std::size_t p = 0; p < 5; ++p) {
    const double shift = rng.normal(0.0, 100.0);
    std::size_t a = 0, b = 0;
    for (std::size_t v = 1; v < 64; ++v) {
      if (logits.at(p, v) > logits.at(p, a)) a = v;
      if (logits.at(p, v) + shift > logits.at(p, b) + shift) b = v;
    }
    EXPECT_EQ(a, b);
  }
}

TEST(Generate, ForcedEosStopsImmediately) {
  Rng rng(5, "test.llm_eos");
  auto llm = ToyLLM<double>::make(tiny(), rng);
  auto table = TextualEmbeddingTable<double>::make(64, 16, rng);
  for (auto& v : llm.head.weight.mutable_data()) v = 0.0;
  // ln_f output is zero-mean with unit variance; a large beta column on EOS
  // dominates through a constant unit feature.
  for (auto& v : llm.ln_f.gamma.mutable_data()) v = 0.0;
  for (auto& v : llm.ln_f.beta.mutable_data()) v = 1.0;
  llm.head.weight.mutable_data()[0 * 64 + table.special.eos] = 1e6;
  Tape<double> tape;
  MultimodalSample s{{10, 11}, {}, std::nullopt};
  auto prompt = assemble(tape, s, Tensor<double>{}, table);
  EXPECT_EQ(generate_greedy(llm, table, prompt, 10), (std::vector<int>{table.special.eos}));
  EXPECT_THROW(generate_greedy(llm, table, prompt, 0), Error);
}

TEST(Generate, Deterministic) {
  Rng rng(6, "test.llm_det");
  auto llm = ToyLLM<double>::make(tiny(), rng);
  auto table = TextualEmbeddingTable<double>::make(64, 16, rng);
  Tape<double> tape;
  MultimodalSample s{{10, 11, 12}, {}, std::nullopt};
  auto prompt = assemble(tape, s, Tensor<double>{}, table);
  const auto a = generate_greedy(llm, table, prompt, 8), b = generate_greedy(llm, table, prompt, 8);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a.empty());
  EXPECT_LE(a.size(), 8u);
}

TEST(ToyLLM, OverfittingOneBatchLowersLossEveryStep) {
  Rng rng(7, "test.llm_overfit");
  auto llm = ToyLLM<float>::make(tiny(), rng);
  auto table = TextualEmbeddingTable<float>::make(64, 16, rng);
  std::vector<Tensor<float>> params;
  llm.visit("", [&](const std::string&, Tensor<float>& t) { params.push_back(t); });
  params.push_back(table.rows);
  std::vector<MultimodalSample> batch;
  for (int i = 0; i < 4; ++i) {
    MultimodalSample s;
    for (int k = 0; k < 4; ++k) s.prompt.push_back(rng.uniform_int(5, 63));
    for (int k = 0; k < 3; ++k) s.target.push_back(rng.uniform_int(5, 63));
    batch.push_back(s);
  }
  AdamW<float> opt(params, 0.9, 0.999, 1e-8, 0.0);
  double previous = 1e30;
  for (int step = 0; step < 20; ++step) {
    double loss = 0;
    for (const auto& s : batch) {
      Tape<float> tape;
      auto in = assemble(tape, s, Tensor<float>{}, table);
      auto logits = llm_forward(tape, llm, in);
      auto labels = next_token_labels(in);
      auto l = cross_entropy(tape, logits, labels.targets, labels.mask);
      loss += l.item() / 4;
      tape.backward(l, 0.25f);
    }
    EXPECT_LT(loss, previous) << "step " << step;
    previous = loss;
    opt.step(3e-3);
    opt.zero_grad();
  }
}
