#include <gtest/gtest.h>

#include <cmath>

#include "ovis/gradcheck.hpp"
#include "ovis/visual_tokenizer.hpp"

using namespace ovis;

namespace {

Tensor<double> randn(Rng& rng, Shape shape, double sd = 1.0) {
  auto t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, sd);
  return t;
}

std::size_t argmax_row(const Tensor<double>& t, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (t.at(r, c) > t.at(r, best)) best = c;
  return best;
}

}  // namespace

TEST(Tokenize, ZeroHeadGivesUniformTokens) {
  TokenizerHead<double> head{Tensor<double>::zeros({5, 3})};
  Rng rng(1, "test.tok_zero");
  Tape<double> tape;
  auto p = tokenize(tape, head, randn(rng, {4, 3}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Tokenize, HandComputedExample) {
  TokenizerHead<double> head{Tensor<double>::from({3, 2}, {1, 0, 0, 1, 0, 0})};
  Tape<double> tape;
  auto p = tokenize(tape, head, Tensor<double>::from({1, 2}, {1, 2}));
  const double z = std::exp(1.0) + std::exp(2.0) + 1.0;
  const double oracle[] = {std::exp(1.0) / z, std::exp(2.0) / z, 1.0 / z};
  const double literal[] = {0.24472847, 0.66524096, 0.09003057};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(p.data()[i], oracle[i], 1e-15);
    EXPECT_NEAR(p.data()[i], literal[i], 5e-9);
  }
}

TEST(Tokenize, WidthMismatchAndTinyVocabularyThrow) {
  Rng rng(2, "test.tok_errors");
  Tape<double> tape;
  TokenizerHead<double> head{Tensor<double>::zeros({4, 3})};
  EXPECT_THROW(tokenize(tape, head, randn(rng, {2, 5})), ShapeError);
  EXPECT_THROW(TokenizerHead<double>::make(1, 3, rng), Error);
}

TEST(Tokenize, RowsLieOnTheSimplex) {
  Rng rng(3, "test.tok_simplex");
  for (int i = 0; i < 100; ++i) {
    const auto k = static_cast<std::size_t>(rng.uniform_int(2, 40));
    const auto d = static_cast<std::size_t>(rng.uniform_int(1, 12));
    TokenizerHead<float> head{Tensor<float>::zeros({k, d})};
    for (auto& v : head.weight.mutable_data()) v = static_cast<float>(rng.normal(0.0, 4.0));
    auto reps = Tensor<float>::zeros({10, d});
    for (auto& v : reps.mutable_data()) v = static_cast<float>(rng.normal(0.0, 4.0));
    Tape<float> tape;
    auto p = tokenize(tape, head, reps);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < k; ++c) {
        EXPECT_GE(p.at(r, c), 0.0f);
        s += p.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Tokenize, ArgmaxInvariantUnderPositiveScaling) {
  Rng rng(4, "test.tok_argmax");
  TokenizerHead<double> head{randn(rng, {16, 6})};
  for (int i = 0; i < 50; ++i) {
    auto reps = randn(rng, {3, 6});
    const double alpha = std::exp(rng.normal(0.0, 1.5));
    auto scaled = reps.clone();
    for (auto& v : scaled.mutable_data()) v *= alpha;
    Tape<double> tape;
    auto a = tokenize(tape, head, reps), b = tokenize(tape, head, scaled);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(argmax_row(a, r), argmax_row(b, r));
  }
}

TEST(Tokenize, GradientWrtHeadMatchesFiniteDifferences) {
  Rng rng(5, "test.tok_grad");
  for (int i = 0; i < 10; ++i) {
    TokenizerHead<double> head{randn(rng, {7, 4})};
    auto reps = randn(rng, {3, 4});
    auto weights = randn(rng, {3, 7});
    const LossFn loss = [=](Tape<double>& t) { return sum(t, mul(t, tokenize(t, head, reps), weights)); };
    EXPECT_LT(check_gradients(loss, {head.weight}).max_rel_error, 1e-4);
  }
}

TEST(Sparsity, UniformTokenIsAllInTopBucket) {
  auto r = sparsity_stats({ProbabilisticToken{{0.25, 0.25, 0.25, 0.25}}}, {1e-4});
  EXPECT_EQ(r.bucket_counts, (std::vector<std::size_t>{4, 0}));
  EXPECT_DOUBLE_EQ(r.bucket_ratios[0], 1.0);
}

TEST(Sparsity, OneHotLikeToken) {
  auto r = sparsity_stats({ProbabilisticToken{{1 - 3e-7, 1e-7, 1e-7, 1e-7}}}, {1e-4, 1e-5, 1e-6});
  EXPECT_EQ(r.bucket_counts, (std::vector<std::size_t>{1, 0, 0, 3}));
  EXPECT_DOUBLE_EQ(r.bucket_ratios[0], 0.25);
  EXPECT_DOUBLE_EQ(r.bucket_ratios[3], 0.75);
}

TEST(Sparsity, IntervalBoundariesAreHalfOpen) {
  const std::vector<double> th = {1e-4, 1e-5, 1e-6};
  EXPECT_EQ(sparsity_bucket(1e-4, th), 0u);
  EXPECT_EQ(sparsity_bucket(std::nextafter(1e-4, 0.0), th), 1u);
  EXPECT_EQ(sparsity_bucket(1e-6, th), 2u);
  EXPECT_EQ(sparsity_bucket(0.0, th), 3u);
}

TEST(Sparsity, MatchesBruteForceClassifier) {
  Rng rng(6, "test.sparsity_brute");
  const std::vector<double> th = {1e-4, 1e-5, 1e-6};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ProbabilisticToken> tokens(static_cast<std::size_t>(rng.uniform_int(1, 30)));
    const auto k = static_cast<std::size_t>(rng.uniform_int(2, 50));
    std::vector<std::size_t> expected(4, 0);
    for (auto& t : tokens) {
      for (std::size_t j = 0; j < k; ++j) {
        const double v = std::pow(10.0, -8.0 * rng.uniform());
        t.probs.push_back(v);
        if (v >= 1e-4) ++expected[0];
        else if (v >= 1e-5) ++expected[1];
        else if (v >= 1e-6) ++expected[2];
        else ++expected[3];
      }
    }
    auto r = sparsity_stats(tokens, th);
    EXPECT_EQ(r.bucket_counts, expected);
    double total = 0;
    for (double x : r.bucket_ratios) total += x;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Sparsity, TsvLayout) {
  auto r = sparsity_stats({ProbabilisticToken{{1 - 3e-7, 1e-7, 1e-7, 1e-7}}}, {1e-4, 1e-5, 1e-6});
  EXPECT_EQ(r.to_tsv(),
            ">=1e-04\t1\t0.250000000\n"
            "[1e-05,1e-04)\t0\t0.000000000\n"
            "[1e-06,1e-05)\t0\t0.000000000\n"
            "<1e-06\t3\t0.750000000\n");
}

TEST(Sparsity, RejectsBadInput) {
  EXPECT_THROW(sparsity_stats({}, {1e-4}), Error);
  EXPECT_THROW(sparsity_stats({ProbabilisticToken{{0.5, 0.5}}}, {1e-5, 1e-4}), Error);
  EXPECT_THROW(sparsity_stats({ProbabilisticToken{{0.5, 0.5}}}, {1.5}), Error);
}
