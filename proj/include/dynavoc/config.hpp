#pragma once

// Run configuration: an INI-style file with nested sections. Every field has
// a default and can be overridden by file or --set; unknown sections or keys
// are rejected outright. The resolved configuration is dumped next to outputs
// so a run can always be replayed.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dynavoc/decoding.hpp"
#include "dynavoc/negatives.hpp"
#include "dynavoc/sample.hpp"
#include "dynavoc/training.hpp"
#include "dynavoc/transformer.hpp"

namespace dynavoc {

struct RunConfig {
  // [model]
  ModelConfig model{64, 2, 4, 256, 256, 0};  // vocab_size 0: derive from tokenizer
  // [encoder]
  ModelConfig encoder{64, 2, 4, 256, 64, 0};
  std::string encoder_projection = "linear";
  // [tokenizer]
  long tokenizer_merges = 2048;
  // [data]
  std::string data_mode = "nwords";
  double data_q = 0.5;
  long data_gap = 5;
  long data_run_min = 2;
  long data_run_max = 5;
  // [negatives]
  std::string negative_strategies = "in_batch,prefix,self_retrieval,generation";
  long pre_batch_depth = 1;
  long snapshot_interval = 500;
  long corpus_retrieval_limit = 4;
  long generation_count = 3;
  // [optimizer]
  double lr = 5e-5;
  double clip = 1.0;
  long accum = 2;
  long batch = 4;
  long warmup = 0;  // 0: one percent of total steps
  long total_steps = 10000;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  // [decode]
  std::string decode_mode = "greedy";
  double nucleus_p = 0.95;
  long budget = 128;
  long retrieve_k = 32;
  long phrase_cap = 8192;
  long prefix_tokens = 32;
  double extend_rate = 0.05;
  long extend_interval = 10;
  // top level
  std::uint64_t seed = 42;

  long resolved_warmup() const {
    return warmup > 0 ? warmup : std::max<long>(1, total_steps / 100);
  }

  SampleMode mode() const { return sample_mode_from(data_mode); }

  SampleBuildOptions sample_options() const {
    SampleBuildOptions opts;
    opts.accept_prob = data_q;
    opts.gap = data_gap;
    opts.run_min = data_run_min;
    opts.run_max = data_run_max;
    return opts;
  }

  NegativeStrategySet strategies() const {
    return NegativeStrategySet::parse(negative_strategies);
  }

  NegativeLimits negative_limits() const {
    return {corpus_retrieval_limit, generation_count};
  }

  OptimizerConfig optimizer() const {
    OptimizerConfig cfg;
    cfg.lr = lr;
    cfg.beta1 = beta1;
    cfg.beta2 = beta2;
    cfg.weight_decay = weight_decay;
    cfg.clip_norm = clip;
    cfg.warmup_steps = resolved_warmup();
    cfg.total_steps = total_steps;
    cfg.grad_accum = accum;
    return cfg;
  }

  ProjectionKind projection() const {
    if (encoder_projection == "linear") return ProjectionKind::linear;
    if (encoder_projection == "mlp") return ProjectionKind::mlp;
    throw DataError("encoder.projection must be linear or mlp");
  }

  DecodeMode decode_kind() const {
    if (decode_mode == "greedy") return DecodeMode::greedy;
    if (decode_mode == "nucleus") return DecodeMode::nucleus;
    throw DataError("decode.mode must be greedy or nucleus");
  }

  void validate() const {
    // vocab_size 0 is the derive-from-tokenizer sentinel in both configs
    ModelConfig m = model;
    ModelConfig e = encoder;
    if (m.vocab_size == 0) m.vocab_size = 1;
    if (e.vocab_size == 0) e.vocab_size = 1;
    m.validate();
    e.validate();
    projection();
    mode();
    decode_kind();
    strategies();
    if (data_q < 0.0 || data_q > 1.0) throw DataError("data.q must lie in [0, 1]");
    if (data_gap < 0) throw DataError("data.gap must be non-negative");
    if (data_run_min < 2 || data_run_max < data_run_min)
      throw DataError("data.run_min/run_max must satisfy 2 <= min <= max");
    if (tokenizer_merges < 1) throw DataError("tokenizer.merges must be positive");
    if (batch < 1 || accum < 1) throw DataError("optimizer.batch/accum must be positive");
    if (total_steps < 1) throw DataError("optimizer.total_steps must be positive");
    if (nucleus_p <= 0.0 || nucleus_p > 1.0) throw DataError("decode.p must be in (0, 1]");
    if (budget < 0) throw DataError("decode.budget must be non-negative");
    if (retrieve_k < 1) throw DataError("decode.k must be positive");
    if (phrase_cap < 0) throw DataError("decode.phrase_cap must be non-negative");
    if (prefix_tokens < 1) throw DataError("decode.prefix_tokens must be positive");
    if (extend_rate < 0.0 || extend_rate > 1.0)
      throw DataError("decode.extend_rate must lie in [0, 1]");
    if (extend_interval < 1) throw DataError("decode.extend_interval must be positive");
  }
};

namespace detail {

struct ConfigBinding {
  std::string key;  // "section.name" or bare name for top-level keys
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline long parse_long(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw DataError("config: " + key + " expects an integer, got '" + value + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw DataError("config: " + key + " expects a number, got '" + value + "'");
  }
}

inline std::vector<ConfigBinding> config_bindings() {
  std::vector<ConfigBinding> b;
  auto add_long = [&](const std::string& key, long RunConfig::* field) {
    b.push_back({key,
                 [key, field](RunConfig& c, const std::string& v) {
                   c.*field = parse_long(key, v);
                 },
                 [field](const RunConfig& c) { return std::to_string(c.*field); }});
  };
  auto add_double = [&](const std::string& key, double RunConfig::* field) {
    b.push_back({key,
                 [key, field](RunConfig& c, const std::string& v) {
                   c.*field = parse_double(key, v);
                 },
                 [field](const RunConfig& c) {
                   char buf[40];
                   std::snprintf(buf, sizeof buf, "%g", c.*field);
                   return std::string(buf);
                 }});
  };
  auto add_string = [&](const std::string& key, std::string RunConfig::* field) {
    b.push_back({key,
                 [field](RunConfig& c, const std::string& v) { c.*field = v; },
                 [field](const RunConfig& c) { return c.*field; }});
  };
  auto add_model = [&](const std::string& section, ModelConfig RunConfig::* field) {
    auto sub = [&](const std::string& name, long ModelConfig::* inner) {
      b.push_back({section + "." + name,
                   [name, field, inner](RunConfig& c, const std::string& v) {
                     (c.*field).*inner = parse_long(name, v);
                   },
                   [field, inner](const RunConfig& c) {
                     return std::to_string((c.*field).*inner);
                   }});
    };
    sub("d_model", &ModelConfig::d_model);
    sub("n_layers", &ModelConfig::n_layers);
    sub("n_heads", &ModelConfig::n_heads);
    sub("d_ff", &ModelConfig::d_ff);
    sub("max_seq", &ModelConfig::max_seq);
    sub("vocab_size", &ModelConfig::vocab_size);
  };

  b.push_back({"seed",
               [](RunConfig& c, const std::string& v) {
                 c.seed = static_cast<std::uint64_t>(std::stoull(v));
               },
               [](const RunConfig& c) { return std::to_string(c.seed); }});
  add_model("model", &RunConfig::model);
  add_model("encoder", &RunConfig::encoder);
  add_string("encoder.projection", &RunConfig::encoder_projection);
  add_long("tokenizer.merges", &RunConfig::tokenizer_merges);
  add_string("data.mode", &RunConfig::data_mode);
  add_double("data.q", &RunConfig::data_q);
  add_long("data.gap", &RunConfig::data_gap);
  add_long("data.run_min", &RunConfig::data_run_min);
  add_long("data.run_max", &RunConfig::data_run_max);
  add_string("negatives.strategies", &RunConfig::negative_strategies);
  add_long("negatives.pre_batch_depth", &RunConfig::pre_batch_depth);
  add_long("negatives.snapshot_interval", &RunConfig::snapshot_interval);
  add_long("negatives.corpus_retrieval_limit", &RunConfig::corpus_retrieval_limit);
  add_long("negatives.generation_count", &RunConfig::generation_count);
  add_double("optimizer.lr", &RunConfig::lr);
  add_double("optimizer.clip", &RunConfig::clip);
  add_long("optimizer.accum", &RunConfig::accum);
  add_long("optimizer.batch", &RunConfig::batch);
  add_long("optimizer.warmup", &RunConfig::warmup);
  add_long("optimizer.total_steps", &RunConfig::total_steps);
  add_double("optimizer.weight_decay", &RunConfig::weight_decay);
  add_double("optimizer.beta1", &RunConfig::beta1);
  add_double("optimizer.beta2", &RunConfig::beta2);
  add_string("decode.mode", &RunConfig::decode_mode);
  add_double("decode.p", &RunConfig::nucleus_p);
  add_long("decode.budget", &RunConfig::budget);
  add_long("decode.k", &RunConfig::retrieve_k);
  add_long("decode.phrase_cap", &RunConfig::phrase_cap);
  add_long("decode.prefix_tokens", &RunConfig::prefix_tokens);
  add_double("decode.extend_rate", &RunConfig::extend_rate);
  add_long("decode.extend_interval", &RunConfig::extend_interval);
  return b;
}

}  // namespace detail

// Parses config text and applies extra "section.key=value" overrides on top.
// Records which keys were explicitly set so the resolved dump can mark them.
struct LoadedConfig {
  RunConfig config;
  std::map<std::string, bool> explicitly_set;
};

inline LoadedConfig parse_config(std::string_view text,
                                 const std::vector<std::string>& overrides = {}) {
  LoadedConfig loaded;
  auto bindings = detail::config_bindings();
  auto apply = [&](const std::string& key, const std::string& value) {
    for (const auto& binding : bindings) {
      if (binding.key == key) {
        binding.set(loaded.config, value);
        loaded.explicitly_set[key] = true;
        return;
      }
    }
    throw DataError("config: unknown key '" + key + "'");
  };

  std::string section;
  for (const std::string& raw : split_lines(text)) {
    std::string line = raw.substr(0, raw.find('#'));
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back())))
      line.pop_back();
    std::size_t first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    line = line.substr(first);
    if (line.front() == '[') {
      if (line.back() != ']') throw DataError("config: bad section header '" + line + "'");
      section = line.substr(1, line.size() - 2);
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("config: expected key = value, got '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(0, 1);
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    };
    trim(key);
    trim(value);
    apply(section.empty() ? key : section + "." + key, value);
  }

  for (const std::string& override_spec : overrides) {
    std::size_t eq = override_spec.find('=');
    if (eq == std::string::npos)
      throw DataError("override must look like section.key=value: " + override_spec);
    apply(override_spec.substr(0, eq), override_spec.substr(eq + 1));
  }

  loaded.config.validate();
  return loaded;
}

inline LoadedConfig load_config_file(const std::string& path,
                                     const std::vector<std::string>& overrides = {}) {
  std::string text = path.empty() ? "" : read_text_file(path);
  return parse_config(text, overrides);
}

// Full resolved dump, one key per line grouped by section, marking overridden
// values. Written next to every command's outputs.
inline std::string dump_config(const LoadedConfig& loaded) {
  auto bindings = detail::config_bindings();
  std::string out;
  std::string section;
  for (const auto& binding : bindings) {
    std::string this_section;
    std::string name = binding.key;
    if (auto dot = binding.key.find('.'); dot != std::string::npos) {
      this_section = binding.key.substr(0, dot);
      name = binding.key.substr(dot + 1);
    }
    if (this_section != section) {
      section = this_section;
      if (!out.empty()) out += '\n';
      if (!section.empty()) out += "[" + section + "]\n";
    }
    bool set = loaded.explicitly_set.count(binding.key) > 0;
    out += name + " = " + binding.get(loaded.config) + (set ? "  # set" : "  # default");
    out += '\n';
  }
  // derived values that commands actually use
  out += "\n# resolved\n";
  out += "# warmup -> " + std::to_string(loaded.config.resolved_warmup()) + "\n";
  return out;
}

}  // namespace dynavoc
