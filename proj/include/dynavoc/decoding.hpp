#pragma once

// Autoregressive decoding over the union vocabulary. Every step selects one
// unit: a static token or an active phrase consumed atomically (one position,
// several tokens of output). Generation is budgeted in static tokens, so a
// final phrase that overshoots the budget is truncated in the reported text
// but still recorded as one step.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "dynavoc/dynamic_vocab.hpp"
#include "dynavoc/tokenizer.hpp"
#include "dynavoc/transformer.hpp"

namespace dynavoc {

enum class DecodeMode { greedy, nucleus };

struct TraceStep {
  long unit_id = 0;
  bool is_phrase = false;
  std::vector<TokenId> covered;  // token ids counted toward the budget
  long full_token_count = 0;     // unit length before any truncation
  std::string doc_id;            // phrase provenance, empty for static units
  double probability = 0.0;
};

struct GenerationTrace {
  std::vector<TraceStep> steps;
  long emitted_static_tokens = 0;
  std::string text;

  long step_count() const { return static_cast<long>(steps.size()); }
  long phrase_steps() const {
    long c = 0;
    for (const TraceStep& s : steps) c += s.is_phrase;
    return c;
  }
  std::vector<TokenId> covered_ids() const {
    std::vector<TokenId> out;
    for (const TraceStep& s : steps) out.insert(out.end(), s.covered.begin(), s.covered.end());
    return out;
  }
};

// Staged activation for real-time vocabulary growth: after every `interval`
// emitted static tokens, the next rate-sized slice of the pending phrase list
// becomes active.
struct ExtendSchedule {
  std::vector<VocabPhrase> pending;
  double rate = 0.05;
  long interval = 10;

  long slice_size() const {
    return static_cast<long>(rate * static_cast<double>(pending.size()));
  }
};

struct DecodeOptions {
  DecodeMode mode = DecodeMode::greedy;
  double nucleus_p = 0.95;
  long budget = 128;
  std::uint64_t seed = 0;
};

namespace detail {

inline long pick_unit(const std::vector<double>& probs, DecodeMode mode, double top_p,
                      std::mt19937_64& rng) {
  const long n = static_cast<long>(probs.size());
  if (mode == DecodeMode::greedy) {
    long best = 0;
    for (long i = 1; i < n; ++i)
      if (probs[i] > probs[best]) best = i;  // ties keep the lower id
    return best;
  }
  // nucleus: smallest probability mass >= top_p, renormalized
  std::vector<long> order(n);
  for (long i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](long a, long b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size() && mass < top_p) mass += probs[order[keep++]];
  double u = std::uniform_real_distribution<double>(0.0, mass)(rng);
  double cum = 0.0;
  for (std::size_t k = 0; k < keep; ++k) {
    cum += probs[order[k]];
    if (u < cum) return order[k];
  }
  return order[keep - 1];
}

}  // namespace detail

// Concatenates the decoded text of every step's counted tokens.
inline std::string detokenize_trace(const GenerationTrace& trace, const Tokenizer& tok) {
  std::string out;
  for (const TraceStep& s : trace.steps) out += tok.decode(s.covered);
  return out;
}

// Decodes a continuation of `prefix` worth `budget` static tokens. The vocab
// is taken by mutable reference because an extension schedule grows it
// mid-decode; pass a schedule only together with the encoder that embeds the
// pending phrases.
inline GenerationTrace decode(const std::vector<TokenId>& prefix,
                              const TransformerWeights& lm, DynamicVocab& vocab,
                              const Tokenizer& tokenizer, const DecodeOptions& opts,
                              const ExtendSchedule* schedule = nullptr,
                              const PhraseEncoder* encoder = nullptr) {
  if (prefix.empty()) throw std::invalid_argument("decode: empty prefix");
  if (schedule != nullptr && encoder == nullptr)
    throw std::invalid_argument("decode: an extension schedule needs the phrase encoder");

  GenerationTrace trace;
  if (opts.budget <= 0) return trace;

  autograd::NoGradGuard guard;
  std::mt19937_64 rng(opts.seed);

  // Under a schedule nothing is active until the first interval completes.
  long activated = 0;
  EmbeddingBank bank = expand_bank(lm, vocab);
  std::vector<TokenId> units(prefix.begin(), prefix.end());
  if (static_cast<long>(units.size()) >= lm.config.max_seq)
    throw std::length_error("decode: prefix fills the whole context window");

  while (trace.emitted_static_tokens < opts.budget &&
         static_cast<long>(units.size()) < lm.config.max_seq) {
    Tensor inputs = embed_units(units, bank.input, lm.position_embedding);
    Tensor hidden = forward_hidden(inputs, lm);
    std::vector<double> h(hidden.values().end() - lm.config.d_model,
                          hidden.values().end());
    std::vector<double> probs = next_unit_distribution(h, bank);
    long unit = detail::pick_unit(probs, opts.mode, opts.nucleus_p, rng);

    TraceStep step;
    step.unit_id = unit;
    step.probability = probs[unit];
    std::vector<TokenId> covered;
    if (vocab.has_phrase_id(unit)) {
      const VocabPhrase& vp = vocab.phrase(vocab.slot_of(unit));
      step.is_phrase = true;
      step.doc_id = vp.doc_id;
      covered = vp.ids;
    } else {
      covered = {static_cast<TokenId>(unit)};
    }
    step.full_token_count = static_cast<long>(covered.size());
    long counted = std::min<long>(step.full_token_count,
                                  opts.budget - trace.emitted_static_tokens);
    step.covered.assign(covered.begin(), covered.begin() + counted);
    trace.emitted_static_tokens += counted;
    trace.steps.push_back(std::move(step));
    units.push_back(static_cast<TokenId>(unit));

    if (schedule != nullptr && schedule->interval > 0) {
      long events_due = trace.emitted_static_tokens / schedule->interval;
      long target = std::min<long>(static_cast<long>(schedule->pending.size()),
                                   events_due * schedule->slice_size());
      if (activated < target) {
        std::vector<VocabPhrase> chunk(schedule->pending.begin() + activated,
                                       schedule->pending.begin() + target);
        vocab.extend(chunk, *encoder);
        activated = target;
        bank = expand_bank(lm, vocab);
      }
    }
  }

  trace.text = detokenize_trace(trace, tokenizer);
  return trace;
}

// Vanilla decoding (P = empty) without touching any vocabulary object.
inline GenerationTrace decode_vanilla(const std::vector<TokenId>& prefix,
                                      const TransformerWeights& lm,
                                      const Tokenizer& tokenizer,
                                      const DecodeOptions& opts) {
  DynamicVocab empty(lm.config.vocab_size, lm.config.d_model);
  return decode(prefix, lm, empty, tokenizer, opts);
}

// --------------------------------------------------------------------------
// trace files: "dynavoc-trace v1", the prefix ids, one tab-separated record
// per step (index, kind, covered count, doc or -1, probability), then the
// final text with backslash escapes. Details in docs/FORMATS.md.
// --------------------------------------------------------------------------

namespace detail {

inline std::string escape_text(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else if (c == '\t') out += "\\t";
    else if (c == '\r') out += "\\r";
    else out += c;
  }
  return out;
}

inline std::string unescape_text(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out += s[i];
      continue;
    }
    char next = s[++i];
    if (next == 'n') out += '\n';
    else if (next == 't') out += '\t';
    else if (next == 'r') out += '\r';
    else out += next;
  }
  return out;
}

}  // namespace detail

struct TraceFile {
  std::vector<TokenId> prefix;
  GenerationTrace trace;
};

inline std::string serialize_trace(const std::vector<TokenId>& prefix,
                                   const GenerationTrace& trace) {
  std::string out = "dynavoc-trace v1\n";
  out += "prefix";
  for (TokenId t : prefix) out += " " + std::to_string(t);
  out += "\n";
  for (long i = 0; i < trace.step_count(); ++i) {
    const TraceStep& s = trace.steps[i];
    out += std::to_string(i);
    out += '\t';
    out += s.is_phrase ? "phrase" : "static";
    out += '\t';
    out += std::to_string(s.covered.size());
    out += '\t';
    out += s.is_phrase && !s.doc_id.empty() ? s.doc_id : "-1";
    out += '\t';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", s.probability);
    out += buf;
    out += '\t';
    for (std::size_t k = 0; k < s.covered.size(); ++k) {
      if (k) out += ' ';
      out += std::to_string(s.covered[k]);
    }
    out += '\n';
  }
  out += "text\t" + detail::escape_text(trace.text) + "\n";
  return out;
}

inline TraceFile parse_trace(std::string_view text) {
  auto lines = split_lines(text);
  if (lines.empty() || lines[0] != "dynavoc-trace v1")
    throw DataError("not a dynavoc trace file");
  TraceFile out;
  std::size_t i = 1;
  if (i < lines.size() && lines[i].rfind("prefix", 0) == 0) {
    for (const std::string& part : split_ws(lines[i].substr(6)))
      out.prefix.push_back(static_cast<TokenId>(std::stol(part)));
    ++i;
  }
  for (; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    if (line.rfind("text\t", 0) == 0) {
      out.trace.text = detail::unescape_text(std::string_view(line).substr(5));
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 6) throw DataError("trace step record needs 6 fields: " + line);
    TraceStep s;
    s.is_phrase = fields[1] == "phrase";
    if (!s.is_phrase && fields[1] != "static")
      throw DataError("trace step kind must be static or phrase");
    s.doc_id = fields[3] == "-1" ? "" : fields[3];
    s.probability = std::stod(fields[4]);
    for (const std::string& part : split_ws(fields[5]))
      s.covered.push_back(static_cast<TokenId>(std::stol(part)));
    if (s.covered.size() != std::stoul(fields[2]))
      throw DataError("trace covered count disagrees with ids: " + line);
    s.full_token_count = static_cast<long>(s.covered.size());
    out.trace.emitted_static_tokens += static_cast<long>(s.covered.size());
    out.trace.steps.push_back(std::move(s));
  }
  return out;
}

}  // namespace dynavoc
