#include <gtest/gtest.h>

#include "ovis/model.hpp"
#include "ovis/sequence.hpp"
#include "ovis/vocab.hpp"

using namespace ovis;

namespace {

constexpr int kImg = 3;

TextualEmbeddingTable<double> table_for_test(std::size_t vocab = 64, std::size_t dim = 4) {
  Rng rng(1, "test.seq_table");
  return TextualEmbeddingTable<double>::make(vocab, dim, rng);
}

Tensor<double> visual_rows(std::size_t n, std::size_t dim, double base = 100.0) {
  std::vector<double> v(n * dim);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = base + static_cast<double>(i);
  return Tensor<double>::from({n, dim}, v);
}

MultimodalSample sample_with_image(std::vector<int> prompt, std::vector<int> target) {
  MultimodalSample s;
  s.prompt = std::move(prompt);
  s.target = std::move(target);
  s.image = ImageTensor::blank(1, 4, 4);
  return s;
}

}  // namespace

TEST(Assemble, TextOnlyPassthrough) {
  auto table = table_for_test();
  MultimodalSample s{{10, 11, 12}, {13, 14}, std::nullopt};
  Tape<double> tape;
  auto in = assemble(tape, s, Tensor<double>{}, table);
  ASSERT_EQ(in.length(), 5u);
  auto direct = text_embed(tape, table, {10, 11, 12, 13, 14});
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_EQ(in.embeddings.data()[i], direct.data()[i]);
  EXPECT_EQ(in.visual_count, 0u);
}

TEST(Assemble, IndicatorIsReplacedByVisualRows) {
  auto table = table_for_test();
  // m = 4 prompt+target tokens, indicator at lambda = 2, n = 3 visual rows
  auto s = sample_with_image({10, 11, kImg}, {12});
  Tape<double> tape;
  auto vis = visual_rows(3, 4);
  auto in = assemble(tape, s, vis, table);
  ASSERT_EQ(in.length(), 6u);
  EXPECT_EQ(in.token_ids, (std::vector<int>{10, 11, -1, -1, -1, 12}));
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(in.embeddings.at(r, c), vis.at(r - 2, c));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(in.embeddings.at(0, c), table.rows.at(10, c));
    EXPECT_EQ(in.embeddings.at(5, c), table.rows.at(12, c));
  }
  EXPECT_EQ(in.position_ids, (std::vector<int>{0, 1, 2, 3, 4, 5}));
}

TEST(Assemble, LossMaskCoversTheTargetOnly) {
  auto table = table_for_test();
  MultimodalSample s{{10, 11, 12, 13}, {14, 15}, std::nullopt};
  Tape<double> tape;
  auto in = assemble(tape, s, Tensor<double>{}, table);
  EXPECT_EQ(in.loss_mask, (std::vector<bool>{false, false, false, false, true, true}));
  auto labels = next_token_labels(in);
  EXPECT_EQ(labels.mask, (std::vector<bool>{false, false, false, true, true, false}));
  EXPECT_EQ(labels.targets[3], 14);
  EXPECT_EQ(labels.targets[4], 15);
}

TEST(Assemble, LengthFormulaExhaustiveSweep) {
  auto table = table_for_test();
  for (std::size_t m = 1; m <= 8; ++m) {
    for (std::size_t n = 1; n <= 8; ++n) {
      for (std::size_t lambda = 0; lambda < m; ++lambda) {
        std::vector<int> prompt(m, 20);
        prompt[lambda] = kImg;
        auto s = sample_with_image(prompt, {});
        Tape<double> tape;
        auto in = assemble(tape, s, visual_rows(n, 4), table);
        EXPECT_EQ(in.length(), m - 1 + n);
        EXPECT_EQ(in.visual_begin, lambda);
        EXPECT_EQ(in.visual_count, n);
      }
    }
  }
}

TEST(Assemble, VisualSpanMapsBackToIndicatorAndCount) {
  auto table = table_for_test();
  Rng rng(2, "test.seq_roundtrip");
  for (int i = 0; i < 500; ++i) {
    const int pre = rng.uniform_int(0, 5), post = rng.uniform_int(0, 5), tgt = rng.uniform_int(1, 4);
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 9));
    std::vector<int> prompt;
    for (int k = 0; k < pre; ++k) prompt.push_back(rng.uniform_int(5, 63));
    prompt.push_back(kImg);
    for (int k = 0; k < post; ++k) prompt.push_back(rng.uniform_int(5, 63));
    std::vector<int> target;
    for (int k = 0; k < tgt; ++k) target.push_back(rng.uniform_int(5, 63));
    auto s = sample_with_image(prompt, target);
    Tape<double> tape;
    auto in = assemble(tape, s, visual_rows(n, 4), table);
    // recover lambda and n from the -1 span
    std::size_t first = in.length(), count = 0;
    for (std::size_t p = 0; p < in.length(); ++p) {
      if (in.token_ids[p] != -1) continue;
      first = std::min(first, p);
      ++count;
    }
    EXPECT_EQ(first, static_cast<std::size_t>(pre));
    EXPECT_EQ(count, n);
    std::size_t true_count = 0;
    for (bool b : in.loss_mask) true_count += b;
    EXPECT_EQ(true_count, target.size());
  }
}

TEST(Assemble, ContractViolationsThrow) {
  auto table = table_for_test();
  Tape<double> tape;
  auto vis = visual_rows(2, 4);
  EXPECT_THROW(assemble(tape, sample_with_image({kImg, 5, kImg}, {6}), vis, table), Error);
  EXPECT_THROW(assemble(tape, sample_with_image({kImg}, {kImg}), vis, table), Error);
  EXPECT_THROW(assemble(tape, MultimodalSample{{kImg, 5}, {6}, std::nullopt}, vis, table), Error);
  EXPECT_THROW(assemble(tape, sample_with_image({5, 6}, {7}), vis, table), Error);
  EXPECT_THROW(assemble(tape, sample_with_image({kImg}, {7}), visual_rows(2, 3), table), ShapeError);
}

TEST(Assemble, GradientsReachBothTablesButNotTheIndicatorRow) {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch = 4;
  cfg.enc_width = 8;
  cfg.enc_layers = 1;
  cfg.enc_heads = 2;
  cfg.visual_vocab = 6;
  cfg.embed_dim = 8;
  cfg.dec_layers = 1;
  cfg.dec_heads = 2;
  cfg.max_seq = 32;
  auto model = Model<double>::make(cfg, 3);
  auto s = sample_with_image({kImg, 20, 21}, {22, 2});
  s.image = ImageTensor::blank(1, 8, 8);
  for (std::size_t i = 0; i < s.image->pixels.size(); ++i) s.image->pixels[i] = static_cast<float>(i % 7) / 7.0f;
  run_sample(model, s, std::optional<double>(1.0));
  const auto& vt = std::get<OvisBridge<double>>(model.bridge).table.rows;
  ASSERT_TRUE(vt.has_grad());
  double vis_norm = 0;
  for (double g : vt.grad()) vis_norm += g * g;
  EXPECT_GT(vis_norm, 0.0);
  ASSERT_TRUE(model.text.rows.has_grad());
  const std::size_t d = model.text.rows.cols();
  double used = 0, indicator = 0;
  for (std::size_t c = 0; c < d; ++c) {
    used += std::abs(model.text.rows.grad()[20 * d + c]);
    indicator += std::abs(model.text.rows.grad()[kImg * d + c]);
  }
  EXPECT_GT(used, 0.0);
  EXPECT_EQ(indicator, 0.0);
}

TEST(CaptionSample, TemplateTokens) {
  const Vocabulary vocab;
  auto img = ImageTensor::blank(1, 4, 4);
  auto s = build_caption_sample(img, vocab.encode("red square"), vocab);
  EXPECT_EQ(s.prompt, (std::vector<int>{vocab.special().image, vocab.id("'s"), vocab.id("caption"), vocab.id(":")}));
  EXPECT_EQ(s.target, (std::vector<int>{vocab.id("red"), vocab.id("square"), vocab.special().eos}));
  EXPECT_THROW(build_caption_sample(img, {}, vocab), Error);
  auto other = build_caption_sample(img, vocab.encode("blue cross"), vocab);
  EXPECT_EQ(other.prompt, s.prompt);
  EXPECT_NE(other.target, s.target);
}

TEST(Vocab, EncodeDecodeRoundTripAndCharacterFallback) {
  const Vocabulary vocab;
  const std::string text = "how many squares ?";
  EXPECT_EQ(vocab.decode(vocab.encode(text)), text);
  auto ids = vocab.encode("zebra");
  EXPECT_EQ(ids.size(), 5u);
  EXPECT_EQ(vocab.decode(ids), "zebra");
  EXPECT_LE(vocab.size(), 256u);
}
