#pragma once

// Byte-level BPE shared by the language model and the phrase encoder.
// Text is pre-split into class runs (letters, digits, punctuation, whitespace,
// with one leading space glued to the following run) and merges never cross a
// pre-split boundary. That keeps token boundaries aligned with word
// boundaries, which the word-run sample builder relies on.

#include <cctype>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dynavoc/util.hpp"

namespace dynavoc {

struct Document {
  std::string doc_id;
  std::string text;
};

// Corpus file: one record per line, either raw text (doc_id = line number,
// 1-based) or "<doc_id>\t<text>".
inline std::vector<Document> parse_corpus(std::string_view text) {
  std::vector<Document> docs;
  std::unordered_map<std::string, bool> seen;
  auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    Document doc;
    auto tab = line.find('\t');
    if (tab != std::string::npos) {
      doc.doc_id = line.substr(0, tab);
      doc.text = line.substr(tab + 1);
    } else {
      doc.doc_id = std::to_string(i + 1);
      doc.text = line;
    }
    if (!seen.emplace(doc.doc_id, true).second)
      throw DataError("duplicate doc_id in corpus: " + doc.doc_id);
    docs.push_back(std::move(doc));
  }
  return docs;
}

inline std::vector<Document> read_corpus_file(const std::string& path) {
  return parse_corpus(read_text_file(path));
}

namespace detail {

enum class CharClass { space, letter, digit, punct };

inline CharClass classify(unsigned char c) {
  if (std::isspace(c)) return CharClass::space;
  if (std::isdigit(c)) return CharClass::digit;
  // Multi-byte UTF-8 units group with letters so codepoints never split
  // against ASCII punctuation.
  if (std::isalpha(c) || c >= 0x80) return CharClass::letter;
  return CharClass::punct;
}

}  // namespace detail

// Splits text into the runs BPE merges are confined to.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t start = i;
    detail::CharClass cls = detail::classify(text[i]);
    if (cls == detail::CharClass::space) {
      // A single space followed by a visible character glues onto that run.
      if (text[i] == ' ' && i + 1 < text.size() &&
          detail::classify(text[i + 1]) != detail::CharClass::space) {
        cls = detail::classify(text[i + 1]);
        i += 1;
      } else {
        while (i < text.size() && detail::classify(text[i]) == detail::CharClass::space)
          ++i;
        out.push_back(text.substr(start, i - start));
        continue;
      }
    }
    while (i < text.size() && detail::classify(text[i]) == cls) ++i;
    out.push_back(text.substr(start, i - start));
  }
  return out;
}

struct TokenizerTrainResult;

class Tokenizer {
 public:
  struct MergeRule {
    TokenId left = 0;
    TokenId right = 0;
  };

  Tokenizer() { reset_symbols({}); }
  explicit Tokenizer(std::vector<MergeRule> merges) { reset_symbols(std::move(merges)); }

  long vocab_size() const { return 256 + static_cast<long>(merges_.size()); }
  const std::vector<MergeRule>& merges() const { return merges_; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (std::string_view piece : pretokenize(text)) encode_piece(piece, out);
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || id >= vocab_size())
        throw std::out_of_range("decode: id " + std::to_string(id) +
                                " is not a static vocabulary entry");
      out += symbol_bytes_[id];
    }
    return out;
  }

  // Tokenizer with only the first k merge rules; used by the compression
  // monotonicity property.
  Tokenizer truncated(std::size_t k) const {
    std::vector<MergeRule> head(merges_.begin(),
                                merges_.begin() + std::min(k, merges_.size()));
    return Tokenizer(std::move(head));
  }

  std::string serialize() const {
    std::string out = std::to_string(merges_.size()) + "\n";
    for (const MergeRule& m : merges_)
      out += std::to_string(m.left) + " " + std::to_string(m.right) + "\n";
    return out;
  }

  static Tokenizer deserialize(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.empty()) throw DataError("tokenizer file: missing merge count");
    long count = 0;
    try {
      count = std::stol(lines[0]);
    } catch (const std::exception&) {
      throw DataError("tokenizer file: bad merge count '" + lines[0] + "'");
    }
    if (count < 0 || static_cast<std::size_t>(count) + 1 > lines.size())
      throw DataError("tokenizer file: truncated merge list");
    std::vector<MergeRule> merges;
    merges.reserve(count);
    for (long i = 0; i < count; ++i) {
      auto parts = split_ws(lines[i + 1]);
      if (parts.size() != 2)
        throw DataError("tokenizer file: bad merge line '" + lines[i + 1] + "'");
      MergeRule rule;
      rule.left = static_cast<TokenId>(std::stol(parts[0]));
      rule.right = static_cast<TokenId>(std::stol(parts[1]));
      if (rule.left < 0 || rule.left >= 256 + i || rule.right < 0 || rule.right >= 256 + i)
        throw DataError("tokenizer file: merge refers to unknown symbol");
      merges.push_back(rule);
    }
    return Tokenizer(std::move(merges));
  }

  void save(const std::string& path) const { write_text_file(path, serialize()); }
  static Tokenizer load(const std::string& path) {
    return deserialize(read_text_file(path));
  }

  // Greedy highest-frequency pair merging over the corpus until target_vocab
  // symbols exist or no adjacent pair repeats. Ties break on the smaller
  // (left, right) id pair, so training is deterministic.
  static TokenizerTrainResult train(const std::vector<Document>& corpus,
                                    long target_vocab);

 private:
  static void apply_merge(std::vector<TokenId>& seq, std::pair<TokenId, TokenId> pair,
                          TokenId merged) {
    std::size_t write = 0;
    for (std::size_t read = 0; read < seq.size(); ++read) {
      if (read + 1 < seq.size() && seq[read] == pair.first && seq[read + 1] == pair.second) {
        seq[write++] = merged;
        ++read;
      } else {
        seq[write++] = seq[read];
      }
    }
    seq.resize(write);
  }

  void encode_piece(std::string_view piece, std::vector<TokenId>& out) const {
    std::vector<TokenId> seq;
    seq.reserve(piece.size());
    for (unsigned char c : piece) seq.push_back(static_cast<TokenId>(c));
    // Repeatedly apply the lowest-ranked merge present. Merges only ever
    // create pairs of higher rank, so this reproduces training order.
    while (seq.size() >= 2) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
        auto it = merge_rank_.find(pair_key(seq[i], seq[i + 1]));
        if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      const MergeRule& rule = merges_[best_rank];
      apply_merge(seq, {rule.left, rule.right}, static_cast<TokenId>(256 + best_rank));
    }
    out.insert(out.end(), seq.begin(), seq.end());
  }

  static std::uint64_t pair_key(TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) |
           static_cast<std::uint32_t>(r);
  }

  void reset_symbols(std::vector<MergeRule> merges) {
    merges_ = std::move(merges);
    symbol_bytes_.clear();
    symbol_bytes_.reserve(256 + merges_.size());
    for (int c = 0; c < 256; ++c) symbol_bytes_.emplace_back(1, static_cast<char>(c));
    merge_rank_.clear();
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      symbol_bytes_.push_back(symbol_bytes_[merges_[i].left] +
                              symbol_bytes_[merges_[i].right]);
      merge_rank_[pair_key(merges_[i].left, merges_[i].right)] = i;
    }
  }

  std::vector<MergeRule> merges_;
  std::vector<std::string> symbol_bytes_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
};

struct TokenizerTrainResult {
  Tokenizer tokenizer;
  bool reached_target = false;
};

inline TokenizerTrainResult Tokenizer::train(const std::vector<Document>& corpus,
                                             long target_vocab) {
  if (corpus.empty()) throw DataError("train_bpe: empty corpus");
  if (target_vocab <= 256)
    throw std::invalid_argument("train_bpe: target vocabulary must exceed 256");

  // Distinct pre-split pieces with multiplicities; merges act on these.
  std::map<std::string, long> piece_counts;
  for (const Document& doc : corpus)
    for (std::string_view piece : pretokenize(doc.text))
      piece_counts[std::string(piece)] += 1;
  std::vector<std::pair<std::vector<TokenId>, long>> sequences;
  sequences.reserve(piece_counts.size());
  for (const auto& [piece, count] : piece_counts) {
    std::vector<TokenId> ids;
    ids.reserve(piece.size());
    for (unsigned char c : piece) ids.push_back(static_cast<TokenId>(c));
    sequences.emplace_back(std::move(ids), count);
  }

  std::vector<MergeRule> merges;
  while (256 + static_cast<long>(merges.size()) < target_vocab) {
    std::map<std::pair<TokenId, TokenId>, long> pair_freq;
    for (const auto& [seq, count] : sequences)
      for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        pair_freq[{seq[i], seq[i + 1]}] += count;

    std::pair<TokenId, TokenId> best{0, 0};
    long best_freq = 0;
    for (const auto& [pair, freq] : pair_freq) {
      // std::map iterates pairs in ascending lexicographic order, so the
      // first maximum seen is the lexicographically smallest.
      if (freq > best_freq) {
        best = pair;
        best_freq = freq;
      }
    }
    if (best_freq < 2) break;

    TokenId merged = static_cast<TokenId>(256 + merges.size());
    merges.push_back({best.first, best.second});
    for (auto& [seq, count] : sequences) {
      (void)count;
      apply_merge(seq, best, merged);
    }
  }

  TokenizerTrainResult result;
  result.reached_target = 256 + static_cast<long>(merges.size()) >= target_vocab;
  result.tokenizer = Tokenizer(std::move(merges));
  return result;
}

}  // namespace dynavoc
