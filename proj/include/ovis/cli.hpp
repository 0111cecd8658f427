#pragma once

// ovis-toy command line: gen-data, train, eval, grad-check, sparsity,
// compare, compare-report. Exit status 0 on success, 2 on usage errors,
// 1 on any other failure; failures print one diagnostic line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ovis/checkpoint.hpp"
#include "ovis/config.hpp"
#include "ovis/data.hpp"
#include "ovis/gradcheck_suite.hpp"
#include "ovis/model.hpp"
#include "ovis/train.hpp"
#include "ovis/vocab.hpp"

namespace ovis {

struct UsageError : Error {
  using Error::Error;
};

// ----------------------------- run configuration -----------------------------

// Default < config file < --set pairs < dedicated flags.
struct ConfigSources {
  std::string file;
  std::vector<std::string> sets;  // key=value
};

inline RunConfig resolve_config(const ConfigSources& src) {
  RunConfig cfg;
  if (!src.file.empty()) apply_config_file(cfg, src.file);
  for (const auto& kv : src.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

inline std::set<std::string> explicit_keys(const ConfigSources& src) {
  std::set<std::string> keys;
  if (!src.file.empty()) {
    std::ifstream in(src.file);
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    for (const auto& kv : parse_config_text(text)) keys.insert(kv.first);
  }
  for (const auto& kv : src.sets) keys.insert(kv.substr(0, kv.find('=')));
  return keys;
}

inline Arch checkpoint_arch(const Checkpoint& ckpt) {
  if (ckpt.find("tokenizer.W")) return Arch::ovis;
  if (ckpt.find("connector.fc1.weight")) return Arch::connector;
  throw Error("checkpoint has neither tokenizer.W nor connector.fc1.weight");
}

// Fills every model dimension recoverable from parameter shapes; head counts
// and image size come from `base`.
inline ModelConfig config_from_checkpoint(ModelConfig base, const Checkpoint& ckpt) {
  auto shape_of = [&](const std::string& name) -> const Shape& {
    const auto* e = ckpt.find(name);
    if (!e) throw Error("checkpoint is missing " + name);
    return e->shape;
  };
  auto count_blocks = [&](const std::string& prefix) {
    std::size_t n = 0;
    while (ckpt.find(prefix + ".block" + std::to_string(n) + ".ln1.gamma")) ++n;
    return n;
  };
  base.arch = checkpoint_arch(ckpt);
  const auto& proj = shape_of("encoder.patch_proj.weight");
  base.enc_width = proj[1];
  const auto patch_area = proj[0] / static_cast<std::size_t>(base.channels);
  base.patch = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_area))));
  base.enc_layers = count_blocks("encoder");
  base.visual_vocab = base.arch == Arch::ovis ? shape_of("tokenizer.W")[0] : shape_of("connector.fc1.weight")[1];
  const auto& tok = shape_of("llm.tok_embed");
  base.text_vocab = tok[0];
  base.embed_dim = tok[1];
  base.dec_layers = count_blocks("llm");
  base.max_seq = shape_of("llm.pos")[0];
  return base;
}

inline Model<float> model_from_checkpoint(const ModelConfig& base, const Checkpoint& ckpt) {
  auto model = Model<float>::make(config_from_checkpoint(base, ckpt), 0);
  load_into(model, ckpt);
  return model;
}

// ----------------------------- data -----------------------------

inline std::filesystem::path split_path(const std::filesystem::path& dir, const std::string& split) {
  if (split == "heldout") return dir / kHeldoutFile;
  return dir / dataset_file_name(parse_kind(split));
}

inline std::vector<MultimodalSample> load_samples(const std::filesystem::path& file, const Vocabulary& vocab) {
  std::vector<MultimodalSample> out;
  for (const auto& r : read_records(file)) out.push_back(to_sample(r, vocab));
  return out;
}

inline const char* question_type(const std::string& prompt) {
  if (prompt.find("how many") != std::string::npos) return "count";
  if (prompt.find("what color") != std::string::npos) return "color";
  if (prompt.find("what shape") != std::string::npos) return "shape";
  if (prompt.find("where") != std::string::npos) return "where";
  return "other";
}

// ----------------------------- full pipeline -----------------------------

struct PipelineOptions {
  std::filesystem::path data;
  std::ostream* metrics = nullptr;
  std::filesystem::path ckpt_dir;  // stage checkpoints when nonempty
};

struct PipelineResult {
  std::vector<StageResult> stages;
};

// Stages 1..3 in sequence on the standard dataset files.
inline PipelineResult run_pipeline(Model<float>& model, const RunConfig& cfg, const PipelineOptions& opts) {
  const Vocabulary vocab;
  PipelineResult result;
  for (int stage = 1; stage <= 3; ++stage) {
    auto sc = build_stage(stage, model, cfg);
    const auto samples = load_samples(opts.data / dataset_file_name(sc.kind), vocab);
    TrainOptions topts;
    topts.metrics = opts.metrics;
    result.stages.push_back(train_stage(model, sc, samples, cfg.seed, topts));
    if (!opts.ckpt_dir.empty()) {
      save_checkpoint(opts.ckpt_dir / ("stage" + std::to_string(stage) + ".ckpt"), checkpoint_from(model));
    }
  }
  return result;
}

// ----------------------------- comparison rows -----------------------------

inline const std::vector<std::string>& comparison_columns() {
  static const std::vector<std::string> cols = {"count", "color", "shape", "where", "answer", "token"};
  return cols;
}

struct ComparisonRow {
  std::string arch;
  std::size_t bridge_params = 0;
  std::map<std::string, double> scores;  // keyed by comparison_columns()
};

template <class T>
ComparisonRow comparison_row(const Model<T>& model, const std::vector<DatasetRecord>& heldout) {
  const Vocabulary vocab;
  ComparisonRow row;
  row.arch = arch_name(model.config.arch);
  auto copy = model;
  row.bridge_params = copy.visual_bridge_parameters();
  std::map<std::string, std::vector<MultimodalSample>> by_type;
  std::vector<MultimodalSample> all;
  for (const auto& r : heldout) {
    auto s = to_sample(r, vocab);
    by_type[question_type(r.prompt)].push_back(s);
    all.push_back(std::move(s));
  }
  for (const char* t : {"count", "color", "shape", "where"}) {
    row.scores[t] = by_type.count(t) ? answer_accuracy(model, by_type[t]) : 0.0;
  }
  row.scores["answer"] = answer_accuracy(model, all);
  row.scores["token"] = evaluate(model, all).token_accuracy;
  return row;
}

inline std::string format_row(const ComparisonRow& row) {
  std::ostringstream os;
  os << "arch\tbridge_params";
  for (const auto& c : comparison_columns()) os << '\t' << c;
  os << '\n' << row.arch << '\t' << row.bridge_params;
  for (const auto& c : comparison_columns()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", row.scores.at(c));
    os << '\t' << buf;
  }
  os << '\n';
  return os.str();
}

inline ComparisonRow parse_row(const std::string& text) {
  std::istringstream in(text);
  std::string header, values;
  if (!std::getline(in, header) || !std::getline(in, values)) throw Error("comparison row: expected two lines");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string f;
    while (std::getline(ss, f, '\t')) out.push_back(f);
    return out;
  };
  const auto keys = split(header), vals = split(values);
  if (keys.size() != vals.size() || keys.size() < 2 || keys[0] != "arch") throw Error("comparison row: bad layout");
  ComparisonRow row;
  row.arch = vals[0];
  row.bridge_params = std::stoull(vals[1]);
  for (std::size_t i = 2; i < keys.size(); ++i) row.scores[keys[i]] = std::stod(vals[i]);
  for (const auto& c : comparison_columns())
    if (!row.scores.count(c)) throw Error("comparison row: missing column " + c);
  return row;
}

// Connector / Ovis / Improvement table; scores in percent, improvement
// relative to the connector.
inline std::string comparison_report(const std::vector<ComparisonRow>& rows) {
  const ComparisonRow* ovis = nullptr;
  const ComparisonRow* conn = nullptr;
  for (const auto& r : rows) {
    if (r.arch == "ovis") ovis = &r;
    if (r.arch == "connector") conn = &r;
  }
  if (!ovis || !conn) throw Error("compare-report needs one ovis row and one connector row");
  std::ostringstream os;
  auto line = [&](const std::string& label, auto cell) {
    os << label;
    for (const auto& c : comparison_columns()) os << '\t' << cell(c);
    os << '\n';
  };
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  line("Architecture", [](const std::string& c) { return c; });
  line("Connector", [&](const std::string& c) { return pct(conn->scores.at(c)); });
  line("Ovis", [&](const std::string& c) { return pct(ovis->scores.at(c)); });
  line("Improvement", [&](const std::string& c) -> std::string {
    const double base = conn->scores.at(c);
    if (base <= 0.0) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * (ovis->scores.at(c) - base) / base);
    return buf;
  });
  const double gap = ovis->scores.at("answer") - conn->scores.at("answer");
  char buf[160];
  std::snprintf(buf, sizeof buf, "bridge parameters: connector %zu, ovis %zu\n", conn->bridge_params,
                ovis->bridge_params);
  os << buf;
  std::snprintf(buf, sizeof buf, "direction (ovis >= connector - 2pp on answer accuracy): %s (%+.1f pp)\n",
                gap >= -0.02 ? "yes" : "no", 100.0 * gap);
  os << buf;
  os << "full-scale reference: average margin 8.8%\n";
  return os.str();
}

// ----------------------------- subcommands -----------------------------

namespace detail {

inline std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad threshold '" + item + "'");
    }
  }
  return out;
}

}  // namespace detail

// argv-style arguments without the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"ovis-toy: structured visual embeddings at desk scale", "ovis-toy"};
  app.require_subcommand(1);

  // gen-data
  std::uint64_t seed = 0;
  DataCounts counts;
  std::string out_dir;
  auto* gen = app.add_subcommand("gen-data", "write synthetic caption/description/instruction datasets");
  gen->add_option("--seed", seed)->required();
  gen->add_option("--captions", counts.captions)->required();
  gen->add_option("--descriptions", counts.descriptions)->required();
  gen->add_option("--instructions", counts.instructions)->required();
  gen->add_option("--heldout", counts.heldout, "held-out instruction records")->capture_default_str();
  gen->add_option("--out", out_dir)->required();

  // train
  int stage = 0;
  ConfigSources src;
  std::string data_dir, ckpt_in, ckpt_out, log_path;
  std::optional<std::uint64_t> seed_flag;
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage)->required()->check(CLI::Range(1, 3));
  train->add_option("--config", src.file);
  train->add_option("--set", src.sets, "override a config key (key=value)");
  train->add_option("--data", data_dir)->required();
  train->add_option("--ckpt-in", ckpt_in);
  train->add_option("--ckpt-out", ckpt_out)->required();
  train->add_option("--seed", seed_flag);
  train->add_option("--log", log_path, "metrics log (step, stage, lr, loss)");

  // eval
  std::string ckpt, metric = "token-accuracy", split = "heldout";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--metric", metric)
      ->check(CLI::IsMember({"token-accuracy", "answer-accuracy", "loss"}))
      ->capture_default_str();
  eval->add_option("--split", split)->capture_default_str();
  eval->add_option("--config", src.file);
  eval->add_option("--set", src.sets);

  // grad-check
  std::string scope;
  double tol = 1e-4;
  std::size_t cases = 5;
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gc->add_option("--scope", scope)->required()->check(CLI::IsMember({"ops", "model"}));
  gc->add_option("--tol", tol)->capture_default_str();
  gc->add_option("--seed", seed)->capture_default_str();
  gc->add_option("--cases", cases, "randomized cases per op (ops) or configurations (model)")
      ->capture_default_str();

  // sparsity
  std::string thresholds = "1e-4,1e-5,1e-6";
  std::size_t limit = 0;
  auto* sp = app.add_subcommand("sparsity", "bucket probabilistic-token entries by magnitude");
  sp->add_option("--ckpt", ckpt)->required();
  sp->add_option("--data", data_dir)->required();
  sp->add_option("--thresholds", thresholds)->capture_default_str();
  sp->add_option("--split", split)->capture_default_str();
  sp->add_option("--limit", limit, "use only the first N images (0: all)");
  sp->add_option("--config", src.file);
  sp->add_option("--set", src.sets);

  // compare
  std::string arch, row_out, ckpt_dir;
  auto* cmp = app.add_subcommand("compare", "train one bridge through all stages and emit a comparison row");
  cmp->add_option("--arch", arch)->required()->check(CLI::IsMember({"ovis", "connector"}));
  cmp->add_option("--config", src.file);
  cmp->add_option("--set", src.sets);
  cmp->add_option("--data", data_dir)->required();
  cmp->add_option("--seed", seed_flag);
  cmp->add_option("--out", row_out)->required();
  cmp->add_option("--log", log_path);
  cmp->add_option("--ckpt-dir", ckpt_dir, "write per-stage checkpoints here");

  // compare-report
  std::vector<std::string> rows;
  auto* rep = app.add_subcommand("compare-report", "merge comparison rows into a table");
  rep->add_option("rows", rows)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "ovis-toy: " << e.what() << '\n';
    return 2;
  }

  try {
    const Vocabulary vocab;
    if (*gen) {
      gen_data(seed, counts, out_dir);
      out << "wrote " << counts.captions << " caption, " << counts.descriptions << " description, "
          << counts.instructions << " instruction and " << counts.heldout << " held-out records to " << out_dir
          << '\n';
      return 0;
    }

    if (*train) {
      if (stage > 1 && ckpt_in.empty()) throw UsageError("train: --stage " + std::to_string(stage) + " requires --ckpt-in");
      RunConfig cfg = resolve_config(src);
      if (seed_flag) cfg.seed = *seed_flag;
      validate(cfg);
      Model<float> model = Model<float>::make(cfg.model, cfg.seed);
      if (!ckpt_in.empty()) {
        const auto ck = load_checkpoint(ckpt_in);
        const Arch found = checkpoint_arch(ck);
        if (explicit_keys(src).count("arch") && found != cfg.model.arch) {
          throw Error("checkpoint architecture " + arch_name(found) + " does not match configured " +
                      arch_name(cfg.model.arch));
        }
        cfg.model.arch = found;
        model = Model<float>::make(cfg.model, cfg.seed);
        load_into(model, ck);
      }
      auto sc = build_stage(stage, model, cfg);
      const auto samples = load_samples(std::filesystem::path(data_dir) / dataset_file_name(sc.kind), vocab);
      std::ofstream log;
      TrainOptions topts;
      if (!log_path.empty()) {
        log.open(log_path, std::ios::binary | std::ios::trunc);
        if (!log) throw Error("cannot write " + log_path);
        topts.metrics = &log;
      }
      const auto result = train_stage(model, sc, samples, cfg.seed, topts);
      save_checkpoint(ckpt_out, checkpoint_from(model));
      char buf[160];
      std::snprintf(buf, sizeof buf, "stage %d: %zu steps, final loss %.6f, trainable parameters %zu\n", stage,
                    result.steps.size(), result.steps.empty() ? 0.0 : result.steps.back().loss,
                    trainable_count(model, sc));
      out << buf;
      return 0;
    }

    if (*eval) {
      const RunConfig cfg = resolve_config(src);
      const auto model = model_from_checkpoint(cfg.model, load_checkpoint(ckpt));
      const auto samples = load_samples(split_path(data_dir, split), vocab);
      double value = 0.0;
      if (metric == "token-accuracy") value = evaluate(model, samples).token_accuracy;
      if (metric == "loss") value = evaluate(model, samples).mean_loss;
      if (metric == "answer-accuracy") value = answer_accuracy(model, samples);
      char buf[96];
      std::snprintf(buf, sizeof buf, "%s\t%.6f\n", metric.c_str(), value);
      out << buf;
      return 0;
    }

    if (*gc) {
      const auto results = scope == "ops" ? op_gradient_cases(seed, cases) : model_gradient_cases(seed, cases);
      std::size_t failed = 0;
      double worst = 0.0;
      for (const auto& r : results) {
        const bool ok = r.result.max_rel_error < tol;
        failed += ok ? 0 : 1;
        worst = std::max(worst, r.result.max_rel_error);
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s\t%.3e\t%zu\t%s\n", r.name.c_str(), r.result.max_rel_error,
                      r.result.checked, ok ? "ok" : "FAIL");
        out << buf;
      }
      char buf[160];
      std::snprintf(buf, sizeof buf, "%zu cases, %zu failed, max relative error %.3e (tol %.1e)\n",
                    results.size(), failed, worst, tol);
      out << buf;
      return failed == 0 ? 0 : 1;
    }

    if (*sp) {
      const RunConfig cfg = resolve_config(src);
      const auto model = model_from_checkpoint(cfg.model, load_checkpoint(ckpt));
      const auto* ob = std::get_if<OvisBridge<float>>(&model.bridge);
      if (!ob) throw Error("sparsity needs a checkpoint with a visual tokenizer");
      auto records = read_records(split_path(data_dir, split));
      if (limit > 0 && records.size() > limit) records.resize(limit);
      std::vector<ProbabilisticToken> tokens;
      for (const auto& r : records) {
        Tape<float> tape;
        const auto grid = patchify(render(r.image), model.config.patch, model.config.patch);
        for (auto& t : to_tokens(tokenize(tape, ob->head, encode(tape, model.encoder, grid)))) {
          tokens.push_back(std::move(t));
        }
      }
      out << sparsity_stats(tokens, detail::parse_thresholds(thresholds)).to_tsv();
      return 0;
    }

    if (*cmp) {
      src.sets.push_back("arch=" + arch);
      RunConfig cfg = resolve_config(src);
      if (seed_flag) cfg.seed = *seed_flag;
      validate(cfg);
      auto model = Model<float>::make(cfg.model, cfg.seed);
      std::ofstream log;
      PipelineOptions popts;
      popts.data = data_dir;
      popts.ckpt_dir = ckpt_dir;
      if (!ckpt_dir.empty()) std::filesystem::create_directories(ckpt_dir);
      if (!log_path.empty()) {
        log.open(log_path, std::ios::binary | std::ios::trunc);
        if (!log) throw Error("cannot write " + log_path);
        popts.metrics = &log;
      }
      run_pipeline(model, cfg, popts);
      const auto row = comparison_row(model, read_records(std::filesystem::path(data_dir) / kHeldoutFile));
      std::ofstream f(row_out, std::ios::binary | std::ios::trunc);
      if (!f) throw Error("cannot write " + row_out);
      f << format_row(row);
      out << format_row(row);
      return 0;
    }

    if (*rep) {
      std::vector<ComparisonRow> parsed;
      for (const auto& path : rows) parsed.push_back(parse_row(read_file_bytes(path)));
      out << comparison_report(parsed);
      return 0;
    }
  } catch (const UsageError& e) {
    err << "ovis-toy: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "ovis-toy: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace ovis
