#pragma once

// Turns a tokenized sentence into a training sample with two readings of the
// same text: the token oracle (every unit one static token) and the mixed
// oracle (some spans grouped into atomic phrase units). Phrase sites are
// accepted with probability q and consecutive phrases are separated by at
// least `gap` token-oracle tokens.

#include <random>
#include <string>
#include <vector>

#include "dynavoc/phrase_table.hpp"
#include "dynavoc/tokenizer.hpp"
#include "dynavoc/util.hpp"

namespace dynavoc {

enum class SampleMode { fmm, nwords, nids };

inline const char* to_string(SampleMode mode) {
  switch (mode) {
    case SampleMode::fmm: return "fmm";
    case SampleMode::nwords: return "nwords";
    case SampleMode::nids: return "nids";
  }
  return "?";
}

inline SampleMode sample_mode_from(const std::string& name) {
  if (name == "fmm") return SampleMode::fmm;
  if (name == "nwords") return SampleMode::nwords;
  if (name == "nids") return SampleMode::nids;
  throw DataError("unknown sample mode: " + name);
}

struct SampleUnit {
  long start = 0;
  long length = 1;
  bool is_phrase = false;
};

struct PhraseSample {
  std::vector<TokenId> token_ids;  // token oracle
  std::vector<SampleUnit> units;   // mixed oracle, tiles token_ids exactly
  std::vector<long> sigma;         // unit index -> token-oracle position
  SampleMode mode = SampleMode::nids;
  std::uint64_t seed = 0;

  long phrase_count() const {
    long c = 0;
    for (const SampleUnit& u : units) c += u.is_phrase;
    return c;
  }

  Phrase unit_tokens(std::size_t i) const {
    const SampleUnit& u = units[i];
    return Phrase(token_ids.begin() + u.start, token_ids.begin() + u.start + u.length);
  }

  std::vector<Phrase> gold_phrases() const {
    std::vector<Phrase> out;
    for (std::size_t i = 0; i < units.size(); ++i)
      if (units[i].is_phrase) out.push_back(unit_tokens(i));
    return out;
  }
};

// sigma maps each mixed-oracle unit to a token-oracle position: a token unit
// to its own position, a phrase unit to its last token's position. Verifies
// that the units tile token_ids before trusting them.
inline std::vector<long> compute_sigma(const std::vector<SampleUnit>& units,
                                       const std::vector<TokenId>& token_ids) {
  long cursor = 0;
  std::vector<long> sigma;
  sigma.reserve(units.size());
  for (const SampleUnit& u : units) {
    if (u.start != cursor || u.length < 1 ||
        u.start + u.length > static_cast<long>(token_ids.size()) ||
        (u.is_phrase && u.length < 2))
      throw DataError("compute_sigma: units do not reassemble the token oracle");
    sigma.push_back(u.start + u.length - 1);
    cursor += u.length;
  }
  if (cursor != static_cast<long>(token_ids.size()))
    throw DataError("compute_sigma: units do not cover the token oracle");
  return sigma;
}

struct SampleBuildOptions {
  double accept_prob = 0.5;  // q: chance of taking an eligible phrase site
  long gap = 5;              // token-oracle tokens required between phrases
  long run_min = 2;          // n-gram run bounds for nwords / nids
  long run_max = 5;
};

namespace detail {

// Token index ranges of "words" (pretokens containing an alphanumeric byte).
// Returns an empty list when the ids do not line up with pretoken boundaries,
// in which case the sentence simply yields no word-run candidates.
inline std::vector<std::pair<long, long>> word_token_ranges(
    const std::vector<TokenId>& ids, const Tokenizer& tokenizer) {
  std::string text = tokenizer.decode(ids);
  std::vector<std::size_t> token_ends;
  std::size_t offset = 0;
  for (TokenId id : ids) {
    offset += tokenizer.decode({id}).size();
    token_ends.push_back(offset);
  }
  std::vector<std::pair<long, long>> ranges;
  std::size_t byte_pos = 0;
  long token_pos = 0;
  for (std::string_view piece : pretokenize(text)) {
    std::size_t piece_end = byte_pos + piece.size();
    bool is_word = false;
    for (unsigned char c : piece)
      if (std::isalnum(c) || c >= 0x80) is_word = true;
    long first_token = token_pos;
    while (token_pos < static_cast<long>(token_ends.size()) &&
           token_ends[token_pos] <= piece_end)
      ++token_pos;
    if (token_pos > first_token && token_ends[token_pos - 1] != piece_end)
      return {};  // token straddles a pretoken boundary; no safe word spans
    if (token_pos == first_token) return {};
    if (is_word) ranges.emplace_back(first_token, token_pos);
    byte_pos = piece_end;
  }
  return ranges;
}

}  // namespace detail

// Builds one training sample. fmm mode needs the phrase table; nwords needs
// the tokenizer for word boundaries; nids works on raw ids.
inline PhraseSample build_sample(const std::vector<TokenId>& token_ids, SampleMode mode,
                                 std::uint64_t seed, const SampleBuildOptions& opts = {},
                                 const PhraseTable* table = nullptr,
                                 const Tokenizer* tokenizer = nullptr) {
  if (mode == SampleMode::fmm && table == nullptr)
    throw std::invalid_argument("build_sample: fmm mode requires a phrase table");
  if (mode == SampleMode::nwords && tokenizer == nullptr)
    throw std::invalid_argument("build_sample: nwords mode requires the tokenizer");

  PhraseSample sample;
  sample.token_ids = token_ids;
  sample.mode = mode;
  sample.seed = seed;

  const long n = static_cast<long>(token_ids.size());
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution accept(opts.accept_prob);

  // nwords candidates: map word-run starts to available word indices.
  std::vector<std::pair<long, long>> words;
  std::vector<long> word_at_start(n, -1);
  if (mode == SampleMode::nwords) {
    words = detail::word_token_ranges(token_ids, *tokenizer);
    for (std::size_t wi = 0; wi < words.size(); ++wi)
      if (words[wi].first < n) word_at_start[words[wi].first] = static_cast<long>(wi);
  }

  long i = 0;
  long next_allowed = 0;
  while (i < n) {
    long phrase_len = 0;
    if (i >= next_allowed) {
      switch (mode) {
        case SampleMode::fmm: {
          long len = table->longest_match(token_ids, i);
          if (len >= 2 && accept(rng)) phrase_len = len;
          break;
        }
        case SampleMode::nids: {
          if (n - i >= opts.run_min && accept(rng)) {
            std::uniform_int_distribution<long> len_dist(
                opts.run_min, std::min(opts.run_max, n - i));
            phrase_len = len_dist(rng);
          }
          break;
        }
        case SampleMode::nwords: {
          long wi = word_at_start[i];
          if (wi >= 0) {
            long available = static_cast<long>(words.size()) - wi;
            if (available >= opts.run_min && accept(rng)) {
              std::uniform_int_distribution<long> run_dist(
                  opts.run_min, std::min(opts.run_max, available));
              long run = run_dist(rng);
              phrase_len = words[wi + run - 1].second - i;
            }
          }
          break;
        }
      }
    }
    if (phrase_len >= 2) {
      sample.units.push_back({i, phrase_len, true});
      i += phrase_len;
      next_allowed = i + opts.gap;
    } else {
      sample.units.push_back({i, 1, false});
      i += 1;
    }
  }

  sample.sigma = compute_sigma(sample.units, sample.token_ids);
  return sample;
}

// --------------------------------------------------------------------------
// sample cache: one line per sample, enough to replay batches bit-exactly.
// <mode>\t<seed>\t<id id ...>\t<unit spec>  where the unit spec is "t" for a
// token unit and "p<len>" for a phrase unit, in order.
// --------------------------------------------------------------------------

inline std::string serialize_sample(const PhraseSample& s) {
  std::string out = std::string(to_string(s.mode)) + "\t" + std::to_string(s.seed) + "\t";
  for (std::size_t i = 0; i < s.token_ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(s.token_ids[i]);
  }
  out += '\t';
  for (std::size_t i = 0; i < s.units.size(); ++i) {
    if (i) out += ' ';
    out += s.units[i].is_phrase ? "p" + std::to_string(s.units[i].length) : "t";
  }
  return out;
}

inline PhraseSample parse_sample(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 4) throw DataError("sample cache: expected 4 tab-separated fields");
  PhraseSample s;
  s.mode = sample_mode_from(fields[0]);
  s.seed = std::stoull(fields[1]);
  for (const std::string& part : split_ws(fields[2]))
    s.token_ids.push_back(static_cast<TokenId>(std::stol(part)));
  long cursor = 0;
  for (const std::string& part : split_ws(fields[3])) {
    if (part == "t") {
      s.units.push_back({cursor, 1, false});
      cursor += 1;
    } else if (part.size() > 1 && part[0] == 'p') {
      long len = std::stol(part.substr(1));
      s.units.push_back({cursor, len, true});
      cursor += len;
    } else {
      throw DataError("sample cache: bad unit spec '" + part + "'");
    }
  }
  s.sigma = compute_sigma(s.units, s.token_ids);
  return s;
}

inline std::string serialize_samples(const std::vector<PhraseSample>& samples) {
  std::string out;
  for (const PhraseSample& s : samples) {
    out += serialize_sample(s);
    out += '\n';
  }
  return out;
}

inline std::vector<PhraseSample> parse_samples(std::string_view text) {
  std::vector<PhraseSample> out;
  for (const std::string& line : split_lines(text))
    if (!line.empty()) out.push_back(parse_sample(line));
  return out;
}

}  // namespace dynavoc
