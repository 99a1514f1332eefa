#pragma once

// Quantitative evaluation: n-gram repetition and diversity, self-scored
// perplexity in vanilla mode, sequence-compression metrics over decode
// traces, wall-clock latency, and the analytic cost model for the overhead of
// carrying a phrase bank.

#include <chrono>
#include <functional>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dynavoc/decoding.hpp"
#include "dynavoc/transformer.hpp"

namespace dynavoc {

// 100 * (1 - unique/total) over the sequence's n-grams; 0 when fewer than n
// tokens exist.
inline double rep_n(const std::vector<TokenId>& tokens, long n) {
  if (n < 2) throw std::invalid_argument("rep_n: n must be at least 2");
  const long total = static_cast<long>(tokens.size()) - n + 1;
  if (total <= 0) return 0.0;
  std::map<std::vector<TokenId>, bool> unique;
  for (long i = 0; i < total; ++i)
    unique.emplace(std::vector<TokenId>(tokens.begin() + i, tokens.begin() + i + n), true);
  return 100.0 * (1.0 - static_cast<double>(unique.size()) / static_cast<double>(total));
}

inline double diversity(double rep2, double rep3, double rep4) {
  for (double r : {rep2, rep3, rep4})
    if (r < 0.0 || r > 100.0)
      throw std::invalid_argument("diversity: inputs must be percentages");
  return 100.0 * (1.0 - rep2 / 100.0) * (1.0 - rep3 / 100.0) * (1.0 - rep4 / 100.0);
}

// Total negative log-likelihood of `continuation` under the model in vanilla
// mode (static vocabulary only), conditioned on `prefix`.
inline std::pair<double, long> sequence_nll(const std::vector<TokenId>& prefix,
                                            const std::vector<TokenId>& continuation,
                                            const TransformerWeights& lm) {
  if (continuation.empty()) return {0.0, 0};
  autograd::NoGradGuard guard;
  std::vector<TokenId> all(prefix);
  all.insert(all.end(), continuation.begin(), continuation.end());
  Tensor hidden = forward_hidden(embed_tokens(all, lm), lm);
  const long start = static_cast<long>(prefix.size());
  const long n = static_cast<long>(all.size());
  if (start < 1)
    throw std::invalid_argument("sequence_nll: need at least one prefix token");
  Tensor logits = matmul(slice_rows(hidden, start - 1, n - start),
                         transpose(lm.output_embedding));
  Tensor logprob = log_softmax_rows(logits);
  double total = 0.0;
  for (long i = 0; i < n - start; ++i) total -= logprob.at(i, all[start + i]);
  return {total, n - start};
}

inline double perplexity_from_nll(double total_nll, long tokens) {
  if (tokens <= 0) throw std::invalid_argument("perplexity: no scored tokens");
  return std::exp(total_nll / static_cast<double>(tokens));
}

struct ScoredText {
  std::vector<TokenId> prefix;
  std::vector<TokenId> continuation;
};

// exp of the mean per-token NLL across all continuations; absent when there
// is nothing to score.
inline std::optional<double> perplexity(const std::vector<ScoredText>& texts,
                                        const TransformerWeights& lm) {
  double total = 0.0;
  long count = 0;
  for (const ScoredText& t : texts) {
    auto [nll, n] = sequence_nll(t.prefix, t.continuation, lm);
    total += nll;
    count += n;
  }
  if (count == 0) return std::nullopt;
  return perplexity_from_nll(total, count);
}

// (steps, UTF-8 bytes of the text per step); bytes are absent for an empty
// trace.
inline std::pair<long, std::optional<double>> nsl_and_bytes(const GenerationTrace& trace) {
  const long steps = trace.step_count();
  if (steps == 0) return {0, std::nullopt};
  return {steps, static_cast<double>(trace.text.size()) / static_cast<double>(steps)};
}

struct LatencyReport {
  double mean_ms = 0.0;
  double mean_steps = 0.0;
  long generations = 0;
};

// Wall-clock decode timing over prefixes x repetitions; the first `warmup`
// decodes are run but not recorded. Step counts ride along so compression
// context is visible next to the time.
inline LatencyReport latency_bench(const TransformerWeights& lm, DynamicVocab& vocab,
                                   const Tokenizer& tokenizer,
                                   const std::vector<std::vector<TokenId>>& prefixes,
                                   const DecodeOptions& opts, long repetitions,
                                   long warmup = 3) {
  if (prefixes.empty() || repetitions < 1)
    throw std::invalid_argument("latency_bench: nothing to run");
  for (long w = 0; w < warmup; ++w)
    decode(prefixes[w % prefixes.size()], lm, vocab, tokenizer, opts);

  LatencyReport report;
  double total_ms = 0.0, total_steps = 0.0;
  for (long rep = 0; rep < repetitions; ++rep) {
    for (const auto& prefix : prefixes) {
      auto begin = std::chrono::steady_clock::now();
      GenerationTrace trace = decode(prefix, lm, vocab, tokenizer, opts);
      auto end = std::chrono::steady_clock::now();
      total_ms += std::chrono::duration<double, std::milli>(end - begin).count();
      total_steps += static_cast<double>(trace.step_count());
      report.generations += 1;
    }
  }
  report.mean_ms = total_ms / static_cast<double>(report.generations);
  report.mean_steps = total_steps / static_cast<double>(report.generations);
  return report;
}

// --------------------------------------------------------------------------
// external scorer hook
// --------------------------------------------------------------------------

// Corpus-level similarity scorers that need a large external model (reference
// text vs generations) are not bundled; callers plug one in here and its
// score rides along wherever an optional metric fits.
using ExternalScorer = std::function<double(const std::vector<std::string>& references,
                                            const std::vector<std::string>& generations)>;

inline std::optional<double> run_external_scorer(const ExternalScorer& scorer,
                                                 const std::vector<std::string>& references,
                                                 const std::vector<std::string>& generations) {
  if (!scorer) return std::nullopt;
  return scorer(references, generations);
}

// --------------------------------------------------------------------------
// analytic cost model
// --------------------------------------------------------------------------

struct CostModelInput {
  double n = 0;         // sequence length
  double vocab = 0;     // static vocabulary size
  double phrases = 0;   // active phrase count
  double d_model = 0;   // embedding width
  double layers = 0;    // layer count
  double encoder_bytes = 0;  // phrase-encoder memory footprint
  double lm_bytes = 0;       // language-model memory footprint
};

struct CostModelOutput {
  double flops_forward = 0.0;
  double extra_compute_fraction = 0.0;  // relative overhead of the phrase bank
  double extra_memory_fraction = 0.0;
};

inline CostModelOutput cost_model(const CostModelInput& in) {
  for (double v : {in.n, in.vocab, in.phrases, in.d_model, in.layers, in.encoder_bytes,
                   in.lm_bytes})
    if (v < 0) throw std::invalid_argument("cost_model: inputs must be non-negative");
  CostModelOutput out;
  const double n = in.n, v = in.vocab, p = in.phrases, d = in.d_model, l = in.layers;
  out.flops_forward = 2.0 * (n * (v + p) * d + (24.0 * n * d * d + 4.0 * n * n * d) * l);
  const double compute_denom = v + p + (12.0 * d + 2.0 * n) * l;
  out.extra_compute_fraction = compute_denom == 0.0 ? 0.0 : p / compute_denom;
  // phrase rows are stored in 4-byte floats in the deployed bank
  const double phrase_bytes = p * d * 4.0;
  const double mem_denom = in.encoder_bytes + phrase_bytes + in.lm_bytes;
  out.extra_memory_fraction =
      mem_denom == 0.0 ? 0.0 : (in.encoder_bytes + phrase_bytes) / mem_denom;
  return out;
}

// --------------------------------------------------------------------------
// metric reports: tab-separated, one row per configuration
// --------------------------------------------------------------------------

struct MetricReport {
  double rep_2 = 0.0;
  double rep_3 = 0.0;
  double rep_4 = 0.0;
  double diversity = 100.0;
  std::optional<double> ppl;
  double nsl = 0.0;             // mean steps per generation
  std::optional<double> bytes_per_token;
  std::optional<double> latency_ms;
};

struct ReportRow {
  std::string label;
  MetricReport metrics;
};

namespace detail {

inline std::string metric_cell(std::optional<double> v) {
  if (!v) return "-";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

inline std::optional<double> parse_cell(const std::string& s) {
  if (s == "-") return std::nullopt;
  return std::stod(s);
}

}  // namespace detail

inline const char* kReportHeader =
    "label\trep_2\trep_3\trep_4\tdiversity\tppl\tnsl\tbytes_per_token\tlatency_ms";

inline std::string serialize_report(const std::vector<ReportRow>& rows) {
  std::string out = kReportHeader;
  out += '\n';
  for (const ReportRow& row : rows) {
    const MetricReport& m = row.metrics;
    out += row.label;
    out += '\t' + detail::metric_cell(m.rep_2);
    out += '\t' + detail::metric_cell(m.rep_3);
    out += '\t' + detail::metric_cell(m.rep_4);
    out += '\t' + detail::metric_cell(m.diversity);
    out += '\t' + detail::metric_cell(m.ppl);
    out += '\t' + detail::metric_cell(m.nsl);
    out += '\t' + detail::metric_cell(m.bytes_per_token);
    out += '\t' + detail::metric_cell(m.latency_ms);
    out += '\n';
  }
  return out;
}

inline std::vector<ReportRow> parse_report(std::string_view text) {
  auto lines = split_lines(text);
  if (lines.empty() || lines[0] != kReportHeader)
    throw DataError("not a dynavoc metric report");
  std::vector<ReportRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = lines[i].find('\t', start);
      cells.push_back(lines[i].substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cells.size() != 9) throw DataError("report row needs 9 cells: " + lines[i]);
    ReportRow row;
    row.label = cells[0];
    row.metrics.rep_2 = *detail::parse_cell(cells[1]);
    row.metrics.rep_3 = *detail::parse_cell(cells[2]);
    row.metrics.rep_4 = *detail::parse_cell(cells[3]);
    row.metrics.diversity = *detail::parse_cell(cells[4]);
    row.metrics.ppl = detail::parse_cell(cells[5]);
    row.metrics.nsl = *detail::parse_cell(cells[6]);
    row.metrics.bytes_per_token = detail::parse_cell(cells[7]);
    row.metrics.latency_ms = detail::parse_cell(cells[8]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dynavoc
