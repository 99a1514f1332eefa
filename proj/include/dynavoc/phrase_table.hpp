#pragma once

// Phrase table for forward maximum matching: token n-grams of a support
// corpus that clear a frequency threshold, keyed by id sequence.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "dynavoc/util.hpp"

namespace dynavoc {

struct PhraseHash {
  std::size_t operator()(const Phrase& p) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (TokenId id : p) {
      h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(id));
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

enum class SpanSource { fmm, nwords, nids, harvested };

struct PhraseSpan {
  long start = 0;
  long length = 0;
  SpanSource source = SpanSource::fmm;
  std::string doc_id;  // provenance, empty when unknown
};

class PhraseTable {
 public:
  PhraseTable() = default;
  PhraseTable(long min_freq, long max_len) : min_freq_(min_freq), max_len_(max_len) {}

  long min_freq() const { return min_freq_; }
  long max_len() const { return max_len_; }
  std::size_t size() const { return entries_.size(); }

  long frequency(const Phrase& p) const {
    auto it = entries_.find(p);
    return it == entries_.end() ? 0 : it->second;
  }
  bool contains(const Phrase& p) const { return entries_.count(p) > 0; }

  const std::unordered_map<Phrase, long, PhraseHash>& entries() const { return entries_; }

  // Longest table entry starting at `pos`, or 0 when none matches.
  long longest_match(const std::vector<TokenId>& tokens, long pos) const {
    long limit = std::min<long>(max_len_, static_cast<long>(tokens.size()) - pos);
    Phrase probe;
    for (long len = limit; len >= 2; --len) {
      probe.assign(tokens.begin() + pos, tokens.begin() + pos + len);
      if (entries_.count(probe)) return len;
    }
    return 0;
  }

  // Counts every n-gram of length 2..max_len across the corpus and keeps the
  // ones at or above min_freq. Counting shards across workers and merges.
  static PhraseTable build(const std::vector<std::vector<TokenId>>& corpus, long min_freq,
                           long max_len = 8, unsigned workers = 1) {
    if (min_freq < 1) throw std::invalid_argument("min_freq must be at least 1");
    if (max_len < 2) throw std::invalid_argument("max_len must be at least 2");
    PhraseTable table(min_freq, max_len);

    workers = std::max(1u, workers);
    std::vector<std::unordered_map<Phrase, long, PhraseHash>> partial(workers);
    auto count_range = [&](unsigned shard) {
      auto& counts = partial[shard];
      for (std::size_t s = shard; s < corpus.size(); s += workers) {
        const auto& tokens = corpus[s];
        const long n = static_cast<long>(tokens.size());
        for (long len = 2; len <= max_len; ++len)
          for (long i = 0; i + len <= n; ++i)
            counts[Phrase(tokens.begin() + i, tokens.begin() + i + len)] += 1;
      }
    };
    if (workers == 1) {
      count_range(0);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < workers; ++t) pool.emplace_back(count_range, t);
      for (auto& t : pool) t.join();
    }

    auto& merged = table.entries_;
    for (auto& counts : partial)
      for (auto& [phrase, count] : counts) merged[phrase] += count;
    for (auto it = merged.begin(); it != merged.end();)
      it = it->second < min_freq ? merged.erase(it) : std::next(it);
    return table;
  }

  // Text format: one line per entry, "<freq>\t<id id id ...>", sorted by
  // descending frequency then ascending id sequence.
  std::string serialize() const {
    std::vector<std::pair<long, const Phrase*>> rows;
    rows.reserve(entries_.size());
    for (const auto& [phrase, freq] : entries_) rows.emplace_back(freq, &phrase);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return *a.second < *b.second;
    });
    std::string out;
    for (const auto& [freq, phrase] : rows) {
      out += std::to_string(freq);
      out += '\t';
      for (std::size_t i = 0; i < phrase->size(); ++i) {
        if (i) out += ' ';
        out += std::to_string((*phrase)[i]);
      }
      out += '\n';
    }
    return out;
  }

  static PhraseTable deserialize(std::string_view text, long min_freq, long max_len) {
    PhraseTable table(min_freq, max_len);
    for (const std::string& line : split_lines(text)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError("phrase table: missing tab in line '" + line + "'");
      long freq = 0;
      try {
        freq = std::stol(line.substr(0, tab));
      } catch (const std::exception&) {
        throw DataError("phrase table: bad frequency in line '" + line + "'");
      }
      Phrase phrase;
      for (const std::string& part : split_ws(line.substr(tab + 1)))
        phrase.push_back(static_cast<TokenId>(std::stol(part)));
      if (phrase.size() < 2)
        throw DataError("phrase table: entries need at least 2 tokens");
      table.entries_[phrase] = freq;
    }
    return table;
  }

  void save(const std::string& path) const { write_text_file(path, serialize()); }

 private:
  std::unordered_map<Phrase, long, PhraseHash> entries_;
  long min_freq_ = 3;
  long max_len_ = 8;
};

// Forward maximum matching: left-to-right scan taking the longest table entry
// at each position, advancing past each match.
inline std::vector<PhraseSpan> fmm_segment(const std::vector<TokenId>& tokens,
                                           const PhraseTable& table) {
  std::vector<PhraseSpan> spans;
  long i = 0;
  const long n = static_cast<long>(tokens.size());
  while (i < n) {
    long len = table.longest_match(tokens, i);
    if (len >= 2) {
      spans.push_back({i, len, SpanSource::fmm, ""});
      i += len;
    } else {
      i += 1;
    }
  }
  return spans;
}

}  // namespace dynavoc
