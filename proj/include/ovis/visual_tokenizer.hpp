#pragma once

// Probabilistic visual tokens: each representation r is mapped onto the
// visual-vocabulary simplex by softmax(W r), W in R^{K x d}, no bias.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ovis/nn.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

template <class T>
struct TokenizerHead {
  Tensor<T> weight;  // [K x d]

  static TokenizerHead make(std::size_t vocab, std::size_t width, Rng& rng) {
    if (vocab < 2) throw ShapeError("visual vocabulary needs at least 2 words");
    return {normal_tensor<T>({vocab, width}, rng)};
  }

  std::size_t vocab_size() const { return weight.rows(); }
  std::size_t width() const { return weight.cols(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(qualify(prefix, "W"), weight);
  }
};

// Returns [n x K]; row i is the probabilistic token of reps row i.
template <class T>
Tensor<T> tokenize(Tape<T>& tape, const TokenizerHead<T>& head, const Tensor<T>& reps) {
  if (reps.dim() != 2 || reps.cols() != head.width()) {
    throw ShapeError("tokenize: representations " + shape_str(reps.shape()) +
                     " do not match head width " + std::to_string(head.width()));
  }
  return softmax_rows(tape, matmul_bt(tape, reps, head.weight));
}

struct ProbabilisticToken {
  std::vector<double> probs;
};

template <class T>
std::vector<ProbabilisticToken> to_tokens(const Tensor<T>& probs) {
  std::vector<ProbabilisticToken> out(probs.rows());
  const std::size_t k = probs.cols();
  auto v = probs.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i].probs.assign(v.begin() + i * k, v.begin() + (i + 1) * k);
  return out;
}

// Fraction of probability entries in the intervals
// [t1, inf), [t2, t1), ..., [-inf, t_last).
struct SparsityReport {
  std::vector<double> thresholds;
  std::vector<std::size_t> bucket_counts;  // thresholds.size() + 1 entries
  std::vector<double> bucket_ratios;
  std::size_t token_count = 0;
  std::size_t vocab_size = 0;

  std::string interval_label(std::size_t bucket) const {
    auto fmt = [](double t) {
      std::ostringstream os;
      os << std::scientific << std::setprecision(0) << t;
      return os.str();
    };
    if (bucket == 0) return ">=" + fmt(thresholds.front());
    if (bucket == thresholds.size()) return "<" + fmt(thresholds.back());
    return "[" + fmt(thresholds[bucket]) + "," + fmt(thresholds[bucket - 1]) + ")";
  }

  // interval<TAB>count<TAB>ratio, one line per interval.
  std::string to_tsv() const {
    std::ostringstream os;
    for (std::size_t b = 0; b < bucket_counts.size(); ++b) {
      char ratio[32];
      std::snprintf(ratio, sizeof ratio, "%.9f", bucket_ratios[b]);
      os << interval_label(b) << '\t' << bucket_counts[b] << '\t' << ratio << '\n';
    }
    return os.str();
  }
};

inline std::size_t sparsity_bucket(double value, const std::vector<double>& thresholds) {
  std::size_t b = 0;
  while (b < thresholds.size() && value < thresholds[b]) ++b;
  return b;
}

inline SparsityReport sparsity_stats(const std::vector<ProbabilisticToken>& tokens,
                                     const std::vector<double>& thresholds) {
  if (tokens.empty()) throw Error("sparsity_stats: no tokens");
  if (thresholds.empty()) throw Error("sparsity_stats: no thresholds");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) {
      throw Error("sparsity_stats: thresholds must lie in (0, 1)");
    }
    if (i > 0 && !(thresholds[i] < thresholds[i - 1])) {
      throw Error("sparsity_stats: thresholds must be strictly decreasing");
    }
  }
  SparsityReport report;
  report.thresholds = thresholds;
  report.token_count = tokens.size();
  report.vocab_size = tokens.front().probs.size();
  report.bucket_counts.assign(thresholds.size() + 1, 0);
  std::size_t total = 0;
  for (const auto& tok : tokens) {
    if (tok.probs.size() != report.vocab_size) throw ShapeError("sparsity_stats: ragged tokens");
    for (double p : tok.probs) {
      ++report.bucket_counts[sparsity_bucket(p, thresholds)];
      ++total;
    }
  }
  for (auto c : report.bucket_counts) report.bucket_ratios.push_back(static_cast<double>(c) / total);
  return report;
}

}  // namespace ovis
