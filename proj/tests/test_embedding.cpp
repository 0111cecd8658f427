#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ovis/embedding.hpp"
#include "ovis/gradcheck.hpp"

using namespace ovis;

namespace {

Tensor<double> randn(Rng& rng, Shape shape, double sd = 1.0) {
  auto t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, sd);
  return t;
}

std::vector<double> random_simplex(Rng& rng, std::size_t k) {
  std::vector<double> p(k);
  double s = 0;
  for (auto& v : p) s += (v = -std::log(1.0 - rng.uniform()));
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

TEST(VisualEmbed, WeightedSumExample) {
  VisualEmbeddingTable<double> table{Tensor<double>::from({3, 2}, {1, 0, 0, 1, 2, 2})};
  Tape<double> tape;
  auto v = visual_embed(tape, table, Tensor<double>::from({1, 3}, {0.5, 0.25, 0.25}));
  EXPECT_DOUBLE_EQ(v.data()[0], 0.5 * 1 + 0.25 * 0 + 0.25 * 2);
  EXPECT_DOUBLE_EQ(v.data()[1], 0.5 * 0 + 0.25 * 1 + 0.25 * 2);
  EXPECT_DOUBLE_EQ(v.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(v.data()[1], 0.75);
}

TEST(VisualEmbed, OneHotEqualsRowLookupExhaustively) {
  Rng rng(1, "test.one_hot");
  VisualEmbeddingTable<double> table{randn(rng, {16, 5})};
  for (std::size_t j = 0; j < 16; ++j) {
    std::vector<double> onehot(16, 0.0);
    onehot[j] = 1.0;
    Tape<double> tape;
    auto v = visual_embed(tape, table, Tensor<double>::from({1, 16}, onehot));
    auto row = embedding_rows(tape, table.rows, {static_cast<int>(j)});
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(v.data()[c], row.data()[c]);
  }
}

TEST(VisualEmbed, UniformTokenGivesColumnMean) {
  Rng rng(2, "test.uniform_token");
  VisualEmbeddingTable<double> table{randn(rng, {8, 3})};
  Tape<double> tape;
  auto v = visual_embed(tape, table, Tensor<double>::from({1, 8}, std::vector<double>(8, 1.0 / 8)));
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < 8; ++r) mean += table.rows.at(r, c);
    EXPECT_NEAR(v.data()[c], mean / 8, 1e-14);
  }
}

TEST(VisualEmbed, LinearInTheToken) {
  Rng rng(3, "test.linearity");
  VisualEmbeddingTable<double> table{randn(rng, {12, 4})};
  for (int i = 0; i < 200; ++i) {
    const auto p = random_simplex(rng, 12), q = random_simplex(rng, 12);
    const double a = rng.uniform();
    std::vector<double> mix(12);
    for (std::size_t k = 0; k < 12; ++k) mix[k] = a * p[k] + (1 - a) * q[k];
    Tape<double> tape;
    auto vm = visual_embed(tape, table, Tensor<double>::from({1, 12}, mix));
    auto vp = visual_embed(tape, table, Tensor<double>::from({1, 12}, p));
    auto vq = visual_embed(tape, table, Tensor<double>::from({1, 12}, q));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(vm.data()[c], a * vp.data()[c] + (1 - a) * vq.data()[c], 1e-6);
  }
}

TEST(VisualEmbed, MonteCarloMeanOfSampledRowsConverges) {
  Rng rng(4, "test.monte_carlo");
  VisualEmbeddingTable<double> table{randn(rng, {10, 3})};
  const auto p = random_simplex(rng, 10);
  Tape<double> tape;
  auto v = visual_embed(tape, table, Tensor<double>::from({1, 10}, p));
  std::discrete_distribution<std::size_t> draw(p.begin(), p.end());
  const int n = 1000;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    Rng sampler(5, "test.monte_carlo.draws", c);
    for (int i = 0; i < n; ++i) {
      const double x = table.rows.at(draw(sampler.engine()), c);
      s += x;
      s2 += x * x;
    }
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / (n - 1));
    EXPECT_LE(std::abs(mean - v.data()[c]), 3 * se) << "column " << c;
  }
}

TEST(VisualEmbed, VocabularyMismatchThrows) {
  VisualEmbeddingTable<double> table{Tensor<double>::zeros({4, 2})};
  Tape<double> tape;
  EXPECT_THROW(visual_embed(tape, table, Tensor<double>::zeros({1, 5})), ShapeError);
}

TEST(VisualEmbed, GradientWrtTableMatchesFiniteDifferences) {
  Rng rng(6, "test.visual_embed_grad");
  for (int i = 0; i < 10; ++i) {
    VisualEmbeddingTable<double> table{randn(rng, {6, 3})};
    auto probs = Tensor<double>::from({2, 6}, [&] {
      auto a = random_simplex(rng, 6), b = random_simplex(rng, 6);
      a.insert(a.end(), b.begin(), b.end());
      return a;
    }());
    auto w = randn(rng, {2, 3});
    const LossFn loss = [=](Tape<double>& t) { return sum(t, mul(t, visual_embed(t, table, probs), w)); };
    EXPECT_LT(check_gradients(loss, {table.rows}).max_rel_error, 1e-4);
  }
}

TEST(TextEmbed, RowGatherAndScatter) {
  Rng rng(7, "test.text_embed");
  TextualEmbeddingTable<double> table{randn(rng, {6, 3}), {}};
  table.rows.set_requires_grad(true);
  Tape<double> tape;
  auto twice = text_embed(tape, table, {0, 0});
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(twice.at(0, c), twice.at(1, c));

  auto one = text_embed(tape, table, {3});
  tape.backward(sum(tape, one));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(table.rows.grad()[r * 3 + c], r == 3 ? 1.0 : 0.0);
}

TEST(TextEmbed, RepeatedIdAccumulatesOneCopyPerOccurrence) {
  Rng rng(8, "test.text_scatter");
  TextualEmbeddingTable<double> table{randn(rng, {5, 2}), {}};
  table.rows.set_requires_grad(true);
  std::vector<int> ids;
  std::vector<double> expected(5, 0.0);
  for (int i = 0; i < 30; ++i) {
    ids.push_back(rng.uniform_int(0, 4));
    expected[static_cast<std::size_t>(ids.back())] += 1.0;
  }
  Tape<double> tape;
  tape.backward(sum(tape, text_embed(tape, table, ids)));
  for (std::size_t r = 0; r < 5; ++r) EXPECT_EQ(table.rows.grad()[r * 2], expected[r]);
}
