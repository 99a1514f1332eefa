#pragma once

// Joint training of the language model and the phrase encoder. Each sample is
// scored twice: once over the mixed oracle with the union softmax (gold
// phrases plus negatives in the denominator), once over the token oracle with
// the static vocabulary. A KL term ties the two passes together at the
// positions the alignment map pairs up. The total is the unweighted sum.

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dynavoc/dynamic_vocab.hpp"
#include "dynavoc/negatives.hpp"
#include "dynavoc/sample.hpp"
#include "dynavoc/transformer.hpp"

namespace dynavoc {

struct LossBreakdown {
  double mixed_nll = 0.0;    // union-softmax NLL over the mixed oracle
  double token_nll = 0.0;    // vanilla NLL over the token oracle
  double alignment_kl = 0.0; // KL between the two passes' static distributions
  double total = 0.0;        // unweighted sum of the three
};

struct LossGraph {
  Tensor mixed_nll, token_nll, alignment_kl, total;

  LossBreakdown values() const {
    return {mixed_nll.item(), token_nll.item(), alignment_kl.item(), total.item()};
  }
};

namespace detail {

inline Tensor zero_scalar() { return Tensor::zeros({1}); }

}  // namespace detail

// All three loss terms for one sample. The mixed pass feeds gold phrases as
// atomic input rows straight from the encoder, so gradients reach the encoder
// through both the input embeddings and the output bank.
inline LossGraph sample_losses(const PhraseSample& sample, const TransformerWeights& lm,
                               const PhraseEncoder& encoder, const NegativePool& pool) {
  const long n = static_cast<long>(sample.token_ids.size());
  const long m = static_cast<long>(sample.units.size());
  const long vocab = lm.config.vocab_size;

  LossGraph g;
  if (n < 2) {
    g.mixed_nll = detail::zero_scalar();
    g.token_nll = detail::zero_scalar();
    g.alignment_kl = detail::zero_scalar();
    g.total = detail::zero_scalar();
    return g;
  }

  // ---- token-oracle pass (P = empty) ----
  Tensor token_hidden = forward_hidden(embed_tokens(sample.token_ids, lm), lm);
  Tensor token_logits =
      matmul(slice_rows(token_hidden, 0, n - 1), transpose(lm.output_embedding));
  Tensor token_logprob = log_softmax_rows(token_logits);
  std::vector<long> token_targets(n - 1);
  for (long j = 1; j < n; ++j) token_targets[j - 1] = sample.token_ids[j];
  g.token_nll = scale(mean_all(take_per_row(token_logprob, token_targets)), -1.0);

  // ---- mixed-oracle pass over V union {golds, negatives} ----
  std::vector<Phrase> train_phrases;
  for (const Phrase& gold : sample.gold_phrases()) {
    bool dup = false;
    for (const Phrase& p : train_phrases) dup = dup || p == gold;
    if (!dup) train_phrases.push_back(gold);
  }
  const std::size_t gold_count = train_phrases.size();
  for (const NegativeEntry& e : pool.entries) {
    for (std::size_t g = 0; g < gold_count; ++g)
      if (train_phrases[g] == e.ids)
        throw std::invalid_argument(
            "sample_losses: a negative duplicates a gold phrase of this sample");
    train_phrases.push_back(e.ids);
  }

  EncodedPhraseSet encoded;
  Tensor output_bank = lm.output_embedding;
  if (!train_phrases.empty()) {
    encoded = encode_phrase_set(train_phrases, encoder);
    output_bank = concat_rows(lm.output_embedding, encoded.rows);
  }

  std::vector<RowRef> unit_rows;
  std::vector<long> positions(m);
  unit_rows.reserve(m);
  for (long i = 0; i < m; ++i) {
    const SampleUnit& u = sample.units[i];
    if (u.is_phrase)
      unit_rows.push_back({encoded.rows, encoded.row_of.at(sample.unit_tokens(i))});
    else
      unit_rows.push_back({lm.token_embedding, sample.token_ids[u.start]});
    positions[i] = i;
  }
  Tensor mixed_inputs =
      add(compose_rows(unit_rows), gather_rows(lm.position_embedding, positions));
  Tensor mixed_hidden = forward_hidden(mixed_inputs, lm);

  Tensor mixed_logits = matmul(slice_rows(mixed_hidden, 0, m - 1), transpose(output_bank));
  std::vector<long> mixed_targets(m - 1);
  for (long i = 1; i < m; ++i) {
    const SampleUnit& u = sample.units[i];
    mixed_targets[i - 1] = u.is_phrase
                               ? vocab + encoded.row_of.at(sample.unit_tokens(i))
                               : sample.token_ids[u.start];
  }
  g.mixed_nll =
      scale(mean_all(take_per_row(log_softmax_rows(mixed_logits), mixed_targets)), -1.0);

  // ---- alignment KL ----
  // Mixed-pass distribution restricted to V and renormalized; restriction at
  // the logit level is the same quantity computed stably, and the static mass
  // can never vanish this way, so no epsilon floor is needed.
  Tensor restricted = slice_cols(mixed_logits, 0, vocab);
  Tensor p = softmax_rows(restricted);
  Tensor log_p = log_softmax_rows(restricted);
  std::vector<long> aligned_rows(m - 1);
  for (long i = 1; i < m; ++i) aligned_rows[i - 1] = sample.sigma[i] - 1;
  Tensor log_q = gather_rows(token_logprob, aligned_rows);
  g.alignment_kl = mean_all(sum_rows(mul(p, sub(log_p, log_q))));

  g.total = add(add(g.mixed_nll, g.token_nll), g.alignment_kl);
  return g;
}

inline Tensor loss_phrase(const PhraseSample& s, const TransformerWeights& lm,
                          const PhraseEncoder& enc, const NegativePool& pool) {
  return sample_losses(s, lm, enc, pool).mixed_nll;
}
inline Tensor loss_token(const PhraseSample& s, const TransformerWeights& lm,
                         const PhraseEncoder& enc) {
  return sample_losses(s, lm, enc, {}).token_nll;
}
inline Tensor loss_kl(const PhraseSample& s, const TransformerWeights& lm,
                      const PhraseEncoder& enc, const NegativePool& pool) {
  return sample_losses(s, lm, enc, pool).alignment_kl;
}

// Mean of the per-sample losses across a batch slice.
inline LossGraph batch_losses(const std::vector<PhraseSample>& samples,
                              const std::vector<NegativePool>& pools,
                              const TransformerWeights& lm, const PhraseEncoder& encoder,
                              std::size_t begin, std::size_t end) {
  if (begin >= end || end > samples.size() || pools.size() != samples.size())
    throw std::invalid_argument("batch_losses: bad slice");
  LossGraph acc;
  for (std::size_t s = begin; s < end; ++s) {
    LossGraph g = sample_losses(samples[s], lm, encoder, pools[s]);
    if (s == begin) {
      acc = g;
    } else {
      acc.mixed_nll = add(acc.mixed_nll, g.mixed_nll);
      acc.token_nll = add(acc.token_nll, g.token_nll);
      acc.alignment_kl = add(acc.alignment_kl, g.alignment_kl);
      acc.total = add(acc.total, g.total);
    }
  }
  const double inv = 1.0 / static_cast<double>(end - begin);
  acc.mixed_nll = scale(acc.mixed_nll, inv);
  acc.token_nll = scale(acc.token_nll, inv);
  acc.alignment_kl = scale(acc.alignment_kl, inv);
  acc.total = scale(acc.total, inv);
  return acc;
}

// --------------------------------------------------------------------------
// optimizer
// --------------------------------------------------------------------------

struct OptimizerConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  long warmup_steps = 100;
  long total_steps = 10000;
  long grad_accum = 2;
};

// AdamW with decoupled weight decay, global-norm clipping, and a linear
// warmup followed by linear decay to zero at total_steps.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  long step_count() const { return step_; }
  long fault_count() const { return faults_; }
  void note_fault() { ++faults_; }
  void restore_counters(long step, long faults) {
    step_ = step;
    faults_ = faults;
  }

  void register_params(const std::vector<std::pair<std::string, Tensor>>& named) {
    for (const auto& [name, t] : named) {
      (void)name;
      params_.push_back(t);
      first_moment_.emplace_back(t.size(), 0.0);
      second_moment_.emplace_back(t.size(), 0.0);
    }
  }

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return first_moment_; }
  std::vector<std::vector<double>>& second_moments() { return second_moment_; }
  const std::vector<std::vector<double>>& first_moments() const { return first_moment_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_moment_; }

  double learning_rate(long step) const {
    if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
      return cfg_.lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
    if (step >= cfg_.total_steps) return 0.0;
    const long span = std::max<long>(1, cfg_.total_steps - cfg_.warmup_steps);
    return cfg_.lr * static_cast<double>(cfg_.total_steps - step) /
           static_cast<double>(span);
  }

  void zero_grads() {
    for (Tensor& t : params_) t.clear_grad();
  }

  bool gradients_finite() const {
    for (const Tensor& t : params_)
      for (double g : t.grad())
        if (!std::isfinite(g)) return false;
    return true;
  }

  // Scales every gradient so the global norm is at most clip_norm; returns
  // the pre-clip norm.
  double clip_gradients() {
    double sq = 0.0;
    for (const Tensor& t : params_)
      for (double g : t.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm && norm > 0.0) {
      double factor = cfg_.clip_norm / norm;
      for (Tensor& t : params_) {
        auto& grad = t.mut_node().grad;
        for (double& g : grad) g *= factor;
      }
    }
    return norm;
  }

  // One update at the schedule's current learning rate; advances the step.
  void apply_update() {
    const double lr = learning_rate(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& node = params_[k].mut_node();
      if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
      auto& m = first_moment_[k];
      auto& v = second_moment_[k];
      for (std::size_t i = 0; i < node.value.size(); ++i) {
        const double grad = node.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad * grad;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        node.value[i] -=
            lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * node.value[i]);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  long step_ = 0;
  long faults_ = 0;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
};

struct TrainStepResult {
  LossBreakdown losses;
  double grad_norm = 0.0;
  bool applied = false;
  bool numeric_fault = false;
};

// One optimizer step over a logical batch: gradients accumulate across
// grad_accum equal micro-batches, get clipped globally, and both the LM and
// the encoder update together. A non-finite loss or gradient skips the update
// and bumps the fault counter.
inline TrainStepResult train_step(const std::vector<PhraseSample>& batch,
                                  const std::vector<NegativePool>& pools,
                                  const TransformerWeights& lm,
                                  const PhraseEncoder& encoder, AdamW& opt) {
  const long accum = std::max<long>(1, opt.config().grad_accum);
  if (batch.empty() || batch.size() % accum != 0)
    throw std::invalid_argument("train_step: batch must split evenly into micro-batches");
  const std::size_t micro = batch.size() / accum;

  TrainStepResult result;
  opt.zero_grads();
  try {
    for (long chunk = 0; chunk < accum; ++chunk) {
      LossGraph g = batch_losses(batch, pools, lm, encoder, chunk * micro,
                                 (chunk + 1) * micro);
      backward(scale(g.total, 1.0 / accum));
      LossBreakdown b = g.values();
      result.losses.mixed_nll += b.mixed_nll / accum;
      result.losses.token_nll += b.token_nll / accum;
      result.losses.alignment_kl += b.alignment_kl / accum;
      result.losses.total += b.total / accum;
    }
  } catch (const NumericError&) {
    opt.note_fault();
    opt.zero_grads();
    result.numeric_fault = true;
    return result;
  }

  if (!opt.gradients_finite()) {
    opt.note_fault();
    opt.zero_grads();
    result.numeric_fault = true;
    return result;
  }
  result.grad_norm = opt.clip_gradients();
  opt.apply_update();
  result.applied = true;
  return result;
}

// --------------------------------------------------------------------------
// checkpoints: text header, then named raw little-endian double arrays in the
// order the header declares. Layout is documented in docs/FORMATS.md.
// --------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct Checkpoint {
  ModelConfig lm_config;
  ModelConfig encoder_config;
  ProjectionKind projection = ProjectionKind::linear;
  std::string tokenizer_ref;
  OptimizerConfig opt_config;
  long step = 0;
  long faults = 0;
  TransformerWeights lm;
  PhraseEncoder encoder;
  std::vector<std::pair<std::string, std::vector<double>>> moments;  // adam state
};

namespace detail {

inline void header_config(std::string& out, const std::string& prefix,
                          const ModelConfig& c) {
  out += prefix + ".d_model " + std::to_string(c.d_model) + "\n";
  out += prefix + ".n_layers " + std::to_string(c.n_layers) + "\n";
  out += prefix + ".n_heads " + std::to_string(c.n_heads) + "\n";
  out += prefix + ".d_ff " + std::to_string(c.d_ff) + "\n";
  out += prefix + ".max_seq " + std::to_string(c.max_seq) + "\n";
  out += prefix + ".vocab_size " + std::to_string(c.vocab_size) + "\n";
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TransformerWeights& lm,
                            const PhraseEncoder& encoder, const AdamW& opt,
                            const std::string& tokenizer_ref) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (auto& [name, t] : lm.named_parameters()) tensors.emplace_back("lm." + name, t);
  for (auto& [name, t] : encoder.named_parameters()) tensors.emplace_back(name, t);
  if (opt.params().size() != tensors.size())
    throw std::invalid_argument(
        "save_checkpoint: optimizer was not registered over these parameters");

  const OptimizerConfig& oc = opt.config();
  std::string header = "dynavoc-checkpoint v1\n";
  header += "step " + std::to_string(opt.step_count()) + "\n";
  header += "faults " + std::to_string(opt.fault_count()) + "\n";
  detail::header_config(header, "lm", lm.config);
  detail::header_config(header, "encoder", encoder.transformer.config);
  header += std::string("encoder.projection ") +
            (encoder.projection == ProjectionKind::linear ? "linear" : "mlp") + "\n";
  header += "tokenizer " + tokenizer_ref + "\n";
  header += "opt.lr " + detail::format_double(oc.lr) + "\n";
  header += "opt.beta1 " + detail::format_double(oc.beta1) + "\n";
  header += "opt.beta2 " + detail::format_double(oc.beta2) + "\n";
  header += "opt.eps " + detail::format_double(oc.eps) + "\n";
  header += "opt.weight_decay " + detail::format_double(oc.weight_decay) + "\n";
  header += "opt.clip_norm " + detail::format_double(oc.clip_norm) + "\n";
  header += "opt.warmup_steps " + std::to_string(oc.warmup_steps) + "\n";
  header += "opt.total_steps " + std::to_string(oc.total_steps) + "\n";
  header += "opt.grad_accum " + std::to_string(oc.grad_accum) + "\n";

  // Array directory: parameters first, then optimizer moments, in order.
  std::vector<std::pair<std::string, const std::vector<double>*>> arrays;
  for (auto& [name, t] : tensors) arrays.emplace_back(name, &t.node()->value);
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    arrays.emplace_back("adam.m." + tensors[k].first, &opt.first_moments()[k]);
    arrays.emplace_back("adam.v." + tensors[k].first, &opt.second_moments()[k]);
  }

  header += "arrays " + std::to_string(arrays.size()) + "\n";
  for (auto& [name, data] : arrays)
    header += name + " " + std::to_string(data->size()) + "\n";
  header += "data\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out << header;
  for (auto& [name, data] : arrays)
    out.write(reinterpret_cast<const char*>(data->data()),
              static_cast<std::streamsize>(data->size() * sizeof(double)));
  if (!out) throw DataError("failed writing checkpoint payload: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);

  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw DataError("checkpoint header truncated");
    return line;
  };
  if (next_line() != "dynavoc-checkpoint v1")
    throw DataError("not a dynavoc checkpoint: " + path);

  std::unordered_map<std::string, std::string> fields;
  std::vector<std::pair<std::string, std::size_t>> directory;
  while (true) {
    std::string l = next_line();
    if (l == "data") break;
    auto space = l.find(' ');
    if (space == std::string::npos) throw DataError("bad checkpoint header line: " + l);
    std::string key = l.substr(0, space);
    std::string value = l.substr(space + 1);
    if (key == "arrays") {
      long count = std::stol(value);
      for (long i = 0; i < count; ++i) {
        std::string entry = next_line();
        auto sp = entry.rfind(' ');
        if (sp == std::string::npos) throw DataError("bad array directory line: " + entry);
        directory.emplace_back(entry.substr(0, sp), std::stoul(entry.substr(sp + 1)));
      }
    } else {
      fields[key] = value;
    }
  }

  auto field = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw DataError("checkpoint missing field: " + key);
    return it->second;
  };
  auto config_of = [&](const std::string& prefix) {
    ModelConfig c;
    c.d_model = std::stol(field(prefix + ".d_model"));
    c.n_layers = std::stol(field(prefix + ".n_layers"));
    c.n_heads = std::stol(field(prefix + ".n_heads"));
    c.d_ff = std::stol(field(prefix + ".d_ff"));
    c.max_seq = std::stol(field(prefix + ".max_seq"));
    c.vocab_size = std::stol(field(prefix + ".vocab_size"));
    return c;
  };

  Checkpoint ck;
  ck.step = std::stol(field("step"));
  ck.faults = std::stol(field("faults"));
  ck.lm_config = config_of("lm");
  ck.encoder_config = config_of("encoder");
  ck.projection =
      field("encoder.projection") == "mlp" ? ProjectionKind::mlp : ProjectionKind::linear;
  ck.tokenizer_ref = field("tokenizer");
  ck.opt_config.lr = std::stod(field("opt.lr"));
  ck.opt_config.beta1 = std::stod(field("opt.beta1"));
  ck.opt_config.beta2 = std::stod(field("opt.beta2"));
  ck.opt_config.eps = std::stod(field("opt.eps"));
  ck.opt_config.weight_decay = std::stod(field("opt.weight_decay"));
  ck.opt_config.clip_norm = std::stod(field("opt.clip_norm"));
  ck.opt_config.warmup_steps = std::stol(field("opt.warmup_steps"));
  ck.opt_config.total_steps = std::stol(field("opt.total_steps"));
  ck.opt_config.grad_accum = std::stol(field("opt.grad_accum"));

  std::unordered_map<std::string, std::vector<double>> arrays;
  for (auto& [name, count] : directory) {
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw DataError("checkpoint payload truncated at array " + name);
    arrays.emplace(name, std::move(data));
  }

  ck.lm = TransformerWeights::init(ck.lm_config, 0);
  ck.encoder = PhraseEncoder::init(ck.encoder_config, ck.lm_config.d_model,
                                   ck.projection, 0);
  auto fill = [&](const std::string& name, const Tensor& t) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw DataError("checkpoint missing array: " + name);
    if (it->second.size() != t.node()->value.size())
      throw DataError("checkpoint array size mismatch: " + name);
    t.mut_node().value = it->second;
  };
  for (auto& [name, t] : ck.lm.named_parameters()) fill("lm." + name, t);
  for (auto& [name, t] : ck.encoder.named_parameters()) fill(name, t);
  for (auto& [name, count] : directory) {
    (void)count;
    if (name.rfind("adam.", 0) == 0)
      ck.moments.emplace_back(name, std::move(arrays.at(name)));
  }
  return ck;
}

// Rebuilds the optimizer (moments and counters) stored in a checkpoint.
inline AdamW restore_optimizer(const Checkpoint& ck) {
  AdamW opt(ck.opt_config);
  std::vector<std::pair<std::string, Tensor>> named;
  for (auto& [name, t] : ck.lm.named_parameters()) named.emplace_back("lm." + name, t);
  for (auto& [name, t] : ck.encoder.named_parameters()) named.emplace_back(name, t);
  opt.register_params(named);
  std::unordered_map<std::string, const std::vector<double>*> by_name;
  for (auto& [name, data] : ck.moments) by_name[name] = &data;
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto m = by_name.find("adam.m." + named[k].first);
    auto v = by_name.find("adam.v." + named[k].first);
    if (m != by_name.end()) opt.first_moments()[k] = *m->second;
    if (v != by_name.end()) opt.second_moments()[k] = *v->second;
  }
  opt.restore_counters(ck.step, ck.faults);
  return opt;
}

}  // namespace dynavoc
