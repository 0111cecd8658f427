#pragma once

// Three-stage training: per-stage trainable sets, warmup + cosine schedule,
// global-norm clipping and AdamW on the trainable parameters only.
//
//   stage 1: encoder last block (re-initialized), visual bridge   (captions)
//   stage 2: whole encoder, visual bridge                         (descriptions)
//   stage 3: everything                                           (instructions)
//
// The decoder and its token table stay frozen in stages 1 and 2.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <numbers>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ovis/config.hpp"
#include "ovis/data.hpp"
#include "ovis/model.hpp"
#include "ovis/vocab.hpp"

namespace ovis {

struct StageConfig {
  int stage = 1;
  DataKind kind = DataKind::caption;
  std::set<std::string> trainable;  // parameter names
  StageSettings schedule;
  std::size_t batch = 32;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t grad_shards = 4;
  std::size_t probe_steps = 20;
};

inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

template <class T>
StageConfig build_stage(int stage, Model<T>& model, const RunConfig& run) {
  if (stage < 1 || stage > 3) throw Error("unknown stage " + std::to_string(stage) + " (expected 1, 2 or 3)");
  StageConfig cfg;
  cfg.stage = stage;
  cfg.kind = stage == 1 ? DataKind::caption : stage == 2 ? DataKind::description : DataKind::instruction;
  cfg.schedule = run.stages[static_cast<std::size_t>(stage - 1)];
  cfg.batch = run.batch;
  cfg.grad_clip = run.grad_clip;
  cfg.weight_decay = run.weight_decay;
  cfg.beta1 = run.beta1;
  cfg.beta2 = run.beta2;
  cfg.adam_eps = run.adam_eps;
  cfg.grad_shards = run.grad_shards;
  cfg.probe_steps = run.probe_steps;
  const std::string last_block =
      "encoder." + VisualEncoder<T>::block_name(model.encoder.blocks.size() - 1) + ".";
  model.visit("", [&](const std::string& name, Tensor<T>&) {
    const bool bridge = starts_with(name, "tokenizer.") || name == "visual_table" || starts_with(name, "connector.");
    bool on = false;
    switch (stage) {
      case 1: on = bridge || starts_with(name, last_block); break;
      case 2: on = bridge || starts_with(name, "encoder."); break;
      case 3: on = true; break;
    }
    if (on) cfg.trainable.insert(name);
  });
  return cfg;
}

template <class T>
std::size_t trainable_count(Model<T>& model, const StageConfig& cfg) {
  std::size_t n = 0;
  model.visit("", [&](const std::string& name, Tensor<T>& t) {
    if (cfg.trainable.count(name)) n += t.size();
  });
  return n;
}

template <class T>
void apply_freeze(Model<T>& model, const StageConfig& cfg) {
  model.visit("", [&](const std::string& name, Tensor<T>& t) {
    t.set_requires_grad(cfg.trainable.count(name) > 0);
    t.zero_grad();
  });
}

// ----------------------------- schedule -----------------------------

struct ScheduleState {
  double base_lr = 0.0;
  double warmup_ratio = 0.0;
  std::size_t total_steps = 0;

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  }
};

// Linear warmup from 0 to base over ceil(ratio * total) steps, then cosine
// decay to 0 at step == total.
inline double lr_at(const ScheduleState& s, std::size_t step) {
  if (step > s.total_steps) {
    throw Error("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  const std::size_t warm = s.warmup_steps();
  if (step < warm) return s.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (s.total_steps == warm) return s.base_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(s.total_steps - warm);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ----------------------------- optimizer -----------------------------

// Scales all gradients by min(1, max_norm / norm) and returns the pre-clip
// global L2 norm.
template <class T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.grad_buffer()) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

template <class T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double beta1, double beta2, double eps, double weight_decay)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        double wi = static_cast<double>(w[i]) * (1.0 - lr * weight_decay_);
        wi -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  std::size_t state_size() const { return m_.size(); }
  std::vector<Tensor<T>>& params() { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

// ----------------------------- training loop -----------------------------

inline std::size_t supervised_tokens(const MultimodalSample& s) {
  return s.target.size() - (s.prompt.empty() ? 1 : 0);
}

inline std::size_t thread_budget() {
  if (const char* env = std::getenv("OVIS_TOY_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

struct StepRecord {
  std::size_t step = 0;
  int stage = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline std::string format_metrics_line(const StepRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%d\t%.9g\t%.9g\n", r.step, r.stage, r.lr, r.loss);
  return buf;
}

struct StageResult {
  std::vector<StepRecord> steps;
  std::vector<double> probe_losses;  // fixed first batch, before step 1 and after each of the first probe_steps
};

struct TrainOptions {
  std::ostream* metrics = nullptr;  // step<TAB>stage<TAB>lr<TAB>loss, flushed per line
  std::size_t threads = 0;          // 0: OVIS_TOY_THREADS or 1
};

namespace detail {

// Batch forward/backward with gradients accumulated per shard on parameter
// shadows, then summed into the master gradients in shard order; the result
// does not depend on the number of worker threads.
template <class T>
class BatchRunner {
 public:
  BatchRunner(Model<T>& model, std::size_t shards, std::size_t threads) : model_(model), threads_(threads) {
    for (std::size_t s = 0; s < shards; ++s) {
      Model<T> replica = model;
      replica.visit("", [](const std::string&, Tensor<T>& t) { t = t.shadow(); });
      replicas_.push_back(std::move(replica));
    }
    model_.visit("", [&](const std::string&, Tensor<T>& t) { master_.push_back(t); });
  }

  // Returns token-weighted mean loss over the batch; with train=true the
  // master parameters receive the gradient of that loss.
  double run(const std::vector<const MultimodalSample*>& batch, bool train) {
    std::size_t total_tokens = 0;
    for (const auto* s : batch) total_tokens += supervised_tokens(*s);
    if (total_tokens == 0) throw LossError("batch has no supervised tokens");
    const std::size_t shards = std::min(replicas_.size(), batch.size());
    std::vector<double> shard_loss(shards, 0.0);
    std::vector<std::exception_ptr> errors(shards);
    auto work = [&](std::size_t s) {
      try {
        const std::size_t lo = s * batch.size() / shards, hi = (s + 1) * batch.size() / shards;
        for (std::size_t i = lo; i < hi; ++i) {
          const double w = static_cast<double>(supervised_tokens(*batch[i])) / static_cast<double>(total_tokens);
          auto out = run_sample(replicas_[s], *batch[i], train ? std::optional<T>(static_cast<T>(w)) : std::nullopt);
          shard_loss[s] += w * out.loss;
        }
      } catch (...) {
        errors[s] = std::current_exception();
      }
    };
    const std::size_t workers = std::min(threads_, shards);
    if (workers <= 1) {
      for (std::size_t s = 0; s < shards; ++s) work(s);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t s = w; s < shards; s += workers) work(s);
        });
      }
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    double loss = 0.0;
    for (double l : shard_loss) loss += l;
    if (train) reduce(shards);
    return loss;
  }

 private:
  void reduce(std::size_t shards) {
    std::vector<std::vector<Tensor<T>>> shadow(shards);
    for (std::size_t s = 0; s < shards; ++s) {
      replicas_[s].visit("", [&](const std::string&, Tensor<T>& t) { shadow[s].push_back(t); });
    }
    for (std::size_t k = 0; k < master_.size(); ++k) {
      if (!master_[k].requires_grad()) continue;
      auto g = master_[k].grad_buffer();
      for (std::size_t s = 0; s < shards; ++s) {
        auto& sh = shadow[s][k];
        if (!sh.has_grad()) continue;
        auto src = sh.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        sh.zero_grad();
      }
    }
  }

  Model<T>& model_;
  std::size_t threads_;
  std::vector<Model<T>> replicas_;
  std::vector<Tensor<T>> master_;
};

}  // namespace detail

// Trains the parameters named in cfg.trainable on `samples` (already matched
// to the stage's data kind). Frozen parameters are never written.
template <class T>
StageResult train_stage(Model<T>& model, const StageConfig& cfg, const std::vector<MultimodalSample>& samples,
                        std::uint64_t seed, const TrainOptions& opts = {}) {
  if (samples.empty()) throw Error("train_stage: empty dataset");
  if (cfg.stage == 1) {
    model.encoder = reinit_last_block(model.encoder, seed + 1);
  }
  apply_freeze(model, cfg);

  std::vector<Tensor<T>> trainable;
  model.visit("", [&](const std::string& name, Tensor<T>& t) {
    if (cfg.trainable.count(name)) trainable.push_back(t);
  });
  AdamW<T> opt(trainable, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  const ScheduleState sched{cfg.schedule.lr, cfg.schedule.warmup_ratio, cfg.schedule.steps};
  const std::size_t threads = opts.threads ? opts.threads : thread_budget();
  detail::BatchRunner<T> runner(model, std::max<std::size_t>(1, std::min(cfg.grad_shards, cfg.batch)), threads);

  // Epoch-wise shuffled order; each epoch's permutation has its own stream.
  std::vector<std::size_t> order;
  std::size_t cursor = 0, epoch = 0;
  auto next_batch = [&] {
    std::vector<const MultimodalSample*> batch;
    while (batch.size() < cfg.batch) {
      if (cursor == order.size()) {
        order.resize(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(seed, "data.order.stage" + std::to_string(cfg.stage), epoch++);
        std::shuffle(order.begin(), order.end(), rng.engine());
        cursor = 0;
      }
      batch.push_back(&samples[order[cursor++]]);
    }
    return batch;
  };

  StageResult result;
  std::vector<const MultimodalSample*> probe;
  for (std::size_t step = 1; step <= cfg.schedule.steps; ++step) {
    auto batch = next_batch();
    if (step == 1 && cfg.probe_steps > 0) {
      probe = batch;
      result.probe_losses.push_back(runner.run(probe, false));
    }
    const double loss = runner.run(batch, true);
    if (!std::isfinite(loss)) {
      throw LossError("non-finite loss at stage " + std::to_string(cfg.stage) + " step " + std::to_string(step));
    }
    clip_grad_norm(opt.params(), cfg.grad_clip);
    const double lr = lr_at(sched, step);
    opt.step(lr);
    opt.zero_grad();
    StepRecord rec{step, cfg.stage, lr, loss};
    result.steps.push_back(rec);
    if (opts.metrics) {
      *opts.metrics << format_metrics_line(rec);
      opts.metrics->flush();
    }
    if (step <= cfg.probe_steps) result.probe_losses.push_back(runner.run(probe, false));
  }
  return result;
}

// ----------------------------- evaluation -----------------------------

struct EvalResult {
  double token_accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t tokens = 0;
  std::size_t samples = 0;
};

// Teacher-forced next-token accuracy over target tokens (including EOS).
template <class T>
EvalResult evaluate(const Model<T>& model, const std::vector<MultimodalSample>& samples) {
  EvalResult r;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (const auto& s : samples) {
    auto out = run_sample(model, s);
    correct += out.correct;
    r.tokens += out.target_tokens;
    loss_sum += out.loss * static_cast<double>(out.target_tokens);
  }
  r.samples = samples.size();
  if (r.tokens) {
    r.token_accuracy = static_cast<double>(correct) / static_cast<double>(r.tokens);
    r.mean_loss = loss_sum / static_cast<double>(r.tokens);
  }
  return r;
}

// Fraction of samples whose greedy continuation of the prompt equals the
// target exactly.
template <class T>
double answer_accuracy(const Model<T>& model, const std::vector<MultimodalSample>& samples) {
  std::size_t hits = 0;
  for (const auto& s : samples) {
    MultimodalSample prompt_only = s;
    prompt_only.target.clear();
    Tape<T> tape;
    auto input = assemble_sample(tape, model, prompt_only);
    const auto out = generate_greedy(model.llm, model.text, input, s.target.size() + 2);
    if (out == s.target) ++hits;
  }
  return samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace ovis
