#pragma once

// Flat key=value configuration with '#' comments. Values resolve as
// command-line flag > config file > built-in default.

#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ovis/model.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

struct StageSettings {
  std::size_t steps = 0;
  double lr = 0.0;
  double warmup_ratio = 0.0;
};

// Every knob of a toy run. Full-scale reference values for the stage
// schedule: batch 8192/1024/1024, lr 1e-4/1e-4/2e-5, warmup 0.1/0.1/0.05,
// one epoch over 10M/2M/3M samples.
struct RunConfig {
  ModelConfig model;
  std::array<StageSettings, 3> stages = {
      StageSettings{500, 1e-3, 0.1}, StageSettings{500, 1e-3, 0.1}, StageSettings{1000, 5e-4, 0.05}};
  std::size_t batch = 32;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t grad_shards = 4;  // fixed accumulation partition, independent of thread count
  std::size_t probe_steps = 20;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

template <class I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw Error("config: bad integer for " + key + ": '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error("config: bad number for " + key + ": '" + v + "'");
  }
}

}  // namespace detail

using ConfigSetter = std::function<void(RunConfig&, const std::string&)>;

inline const std::map<std::string, ConfigSetter>& config_keys() {
  using detail::parse_int;
  using detail::parse_real;
  static const std::map<std::string, ConfigSetter> keys = [] {
    std::map<std::string, ConfigSetter> k;
    auto size_key = [&](const std::string& name, auto member) {
      k[name] = [name, member](RunConfig& c, const std::string& v) {
        std::invoke(member, c) = parse_int<std::size_t>(name, v);
      };
    };
    k["arch"] = [](RunConfig& c, const std::string& v) { c.model.arch = parse_arch(v); };
    k["image_size"] = [](RunConfig& c, const std::string& v) { c.model.image_size = parse_int<int>("image_size", v); };
    k["channels"] = [](RunConfig& c, const std::string& v) { c.model.channels = parse_int<int>("channels", v); };
    k["patch"] = [](RunConfig& c, const std::string& v) { c.model.patch = parse_int<int>("patch", v); };
    size_key("enc_width", [](RunConfig& c) -> std::size_t& { return c.model.enc_width; });
    size_key("enc_layers", [](RunConfig& c) -> std::size_t& { return c.model.enc_layers; });
    size_key("enc_heads", [](RunConfig& c) -> std::size_t& { return c.model.enc_heads; });
    size_key("visual_vocab", [](RunConfig& c) -> std::size_t& { return c.model.visual_vocab; });
    size_key("embed_dim", [](RunConfig& c) -> std::size_t& { return c.model.embed_dim; });
    size_key("dec_layers", [](RunConfig& c) -> std::size_t& { return c.model.dec_layers; });
    size_key("dec_heads", [](RunConfig& c) -> std::size_t& { return c.model.dec_heads; });
    size_key("text_vocab", [](RunConfig& c) -> std::size_t& { return c.model.text_vocab; });
    size_key("max_seq", [](RunConfig& c) -> std::size_t& { return c.model.max_seq; });
    size_key("batch", [](RunConfig& c) -> std::size_t& { return c.batch; });
    size_key("grad_shards", [](RunConfig& c) -> std::size_t& { return c.grad_shards; });
    size_key("probe_steps", [](RunConfig& c) -> std::size_t& { return c.probe_steps; });
    k["grad_clip"] = [](RunConfig& c, const std::string& v) { c.grad_clip = parse_real("grad_clip", v); };
    k["weight_decay"] = [](RunConfig& c, const std::string& v) { c.weight_decay = parse_real("weight_decay", v); };
    k["beta1"] = [](RunConfig& c, const std::string& v) { c.beta1 = parse_real("beta1", v); };
    k["beta2"] = [](RunConfig& c, const std::string& v) { c.beta2 = parse_real("beta2", v); };
    k["adam_eps"] = [](RunConfig& c, const std::string& v) { c.adam_eps = parse_real("adam_eps", v); };
    k["seed"] = [](RunConfig& c, const std::string& v) { c.seed = parse_int<std::uint64_t>("seed", v); };
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string n = std::to_string(s + 1);
      k["steps_stage" + n] = [s, n](RunConfig& c, const std::string& v) {
        c.stages[s].steps = parse_int<std::size_t>("steps_stage" + n, v);
      };
      k["lr_stage" + n] = [s, n](RunConfig& c, const std::string& v) { c.stages[s].lr = parse_real("lr_stage" + n, v); };
      k["warmup_stage" + n] = [s, n](RunConfig& c, const std::string& v) {
        c.stages[s].warmup_ratio = parse_real("warmup_stage" + n, v);
      };
    }
    return k;
  }();
  return keys;
}

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw Error("config: unknown key '" + key + "'");
  it->second(cfg, value);
}

// "key=value" lines; blank lines and text after '#' are ignored.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t lineno = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  for (const auto& [k, v] : parse_config_text(text)) apply_setting(cfg, k, v);
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  apply_config_text(cfg, std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
}

inline void validate(const RunConfig& cfg) {
  const auto& m = cfg.model;
  if (m.image_size <= 0 || m.patch <= 0 || m.channels <= 0) throw Error("config: image geometry must be positive");
  if (m.enc_width % m.enc_heads != 0) throw Error("config: enc_width must be divisible by enc_heads");
  if (m.embed_dim % m.dec_heads != 0) throw Error("config: embed_dim must be divisible by dec_heads");
  if (m.visual_vocab < 2) throw Error("config: visual_vocab must be at least 2");
  if (cfg.batch == 0) throw Error("config: batch must be positive");
  if (cfg.grad_shards == 0) throw Error("config: grad_shards must be positive");
  for (const auto& s : cfg.stages) {
    if (s.warmup_ratio < 0.0 || s.warmup_ratio > 1.0) throw Error("config: warmup ratio must lie in [0, 1]");
  }
}

}  // namespace ovis
