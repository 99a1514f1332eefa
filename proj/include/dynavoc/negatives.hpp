#pragma once

// Negative-phrase assembly for training. A positive phrase is hard to learn
// against generic competitors, so each sample's softmax denominator is padded
// with informative negatives: prefixes of its gold phrases, extensions of
// them by successor tokens (from the sample itself, a support corpus, or a
// frozen model rollout), other samples' golds, and the previous batches'
// golds.

#include <deque>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dynavoc/sample.hpp"
#include "dynavoc/transformer.hpp"
#include "dynavoc/util.hpp"

namespace dynavoc {

constexpr long kMaxNegativeLen = 8;

enum class NegativeSource {
  in_batch,
  pre_batch,
  prefix,
  self_retrieval,
  corpus_retrieval,
  generation,
};

inline const char* to_string(NegativeSource s) {
  switch (s) {
    case NegativeSource::in_batch: return "in_batch";
    case NegativeSource::pre_batch: return "pre_batch";
    case NegativeSource::prefix: return "prefix";
    case NegativeSource::self_retrieval: return "self_retrieval";
    case NegativeSource::corpus_retrieval: return "corpus_retrieval";
    case NegativeSource::generation: return "generation";
  }
  return "?";
}

struct NegativeStrategySet {
  bool in_batch = false;
  bool pre_batch = false;
  bool prefix = false;
  bool self_retrieval = false;
  bool corpus_retrieval = false;
  bool generation = false;

  bool any() const {
    return in_batch || pre_batch || prefix || self_retrieval || corpus_retrieval ||
           generation;
  }

  static NegativeStrategySet defaults() {
    NegativeStrategySet s;
    s.in_batch = s.prefix = s.self_retrieval = s.generation = true;
    return s;
  }

  // Comma-separated source names, or "none".
  static NegativeStrategySet parse(const std::string& spec) {
    NegativeStrategySet s;
    if (spec == "none") return s;
    std::string token;
    auto flush = [&]() {
      if (token.empty()) return;
      if (token == "in_batch") s.in_batch = true;
      else if (token == "pre_batch") s.pre_batch = true;
      else if (token == "prefix") s.prefix = true;
      else if (token == "self_retrieval") s.self_retrieval = true;
      else if (token == "corpus_retrieval") s.corpus_retrieval = true;
      else if (token == "generation") s.generation = true;
      else throw DataError("unknown negative strategy: " + token);
      token.clear();
    };
    for (char c : spec) {
      if (c == ',') flush();
      else if (!std::isspace(static_cast<unsigned char>(c))) token += c;
    }
    flush();
    return s;
  }

  std::string describe() const {
    std::string out;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!out.empty()) out += ',';
      out += name;
    };
    add(in_batch, "in_batch");
    add(pre_batch, "pre_batch");
    add(prefix, "prefix");
    add(self_retrieval, "self_retrieval");
    add(corpus_retrieval, "corpus_retrieval");
    add(generation, "generation");
    return out.empty() ? "none" : out;
  }
};

struct NegativeEntry {
  Phrase ids;
  NegativeSource source = NegativeSource::in_batch;
};

// Per-sample competitor set: negatives only, already deduplicated, none equal
// to a gold phrase of the owning sample (those sit in the gold block of the
// training-time vocabulary).
struct NegativePool {
  std::vector<NegativeEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool contains(const Phrase& p) const {
    for (const NegativeEntry& e : entries)
      if (e.ids == p) return true;
    return false;
  }
};

// All proper prefixes of p with length >= 2.
inline std::vector<Phrase> prefix_negatives(const Phrase& p) {
  std::vector<Phrase> out;
  for (long len = 2; len < static_cast<long>(p.size()); ++len)
    out.emplace_back(p.begin(), p.begin() + len);
  return out;
}

// Extensions of p by its successor tokens inside the same sentence, lengths
// |p|+1 .. min(8, tokens remaining from the occurrence).
inline std::vector<Phrase> self_retrieval_negatives(const Phrase& p,
                                                    const std::vector<TokenId>& sentence,
                                                    long span_start) {
  const long n = static_cast<long>(sentence.size());
  const long plen = static_cast<long>(p.size());
  if (span_start < 0 || span_start + plen > n ||
      !std::equal(p.begin(), p.end(), sentence.begin() + span_start))
    throw std::invalid_argument("self_retrieval_negatives: phrase not at given span");
  std::vector<Phrase> out;
  long max_len = std::min<long>(kMaxNegativeLen, n - span_start);
  for (long len = plen + 1; len <= max_len; ++len)
    out.emplace_back(sentence.begin() + span_start, sentence.begin() + span_start + len);
  return out;
}

// Exact-match occurrences of a phrase in a tokenized support corpus, found
// through postings keyed on the first two token ids.
class CorpusIndex {
 public:
  explicit CorpusIndex(std::vector<std::vector<TokenId>> sentences)
      : sentences_(std::move(sentences)) {
    for (std::size_t s = 0; s < sentences_.size(); ++s) {
      const auto& sent = sentences_[s];
      for (std::size_t i = 0; i + 1 < sent.size(); ++i)
        postings_[key(sent[i], sent[i + 1])].emplace_back(s, i);
    }
  }

  // Distinct successor extensions of p across all occurrences, shortest
  // lengths first, capped at `limit` entries and 8 tokens each.
  std::vector<Phrase> successor_extensions(const Phrase& p, long limit) const {
    std::vector<Phrase> out;
    if (limit <= 0 || p.size() < 2 ||
        static_cast<long>(p.size()) >= kMaxNegativeLen)
      return out;
    auto it = postings_.find(key(p[0], p[1]));
    if (it == postings_.end()) return out;

    std::vector<std::pair<std::size_t, std::size_t>> occurrences;
    for (const auto& [s, i] : it->second) {
      const auto& sent = sentences_[s];
      if (i + p.size() <= sent.size() &&
          std::equal(p.begin(), p.end(), sent.begin() + i))
        occurrences.emplace_back(s, i);
    }

    std::unordered_set<Phrase, PhraseHash> seen;
    for (long len = static_cast<long>(p.size()) + 1; len <= kMaxNegativeLen; ++len) {
      for (const auto& [s, i] : occurrences) {
        const auto& sent = sentences_[s];
        if (i + len > sent.size()) continue;
        Phrase ext(sent.begin() + i, sent.begin() + i + len);
        if (seen.insert(ext).second) {
          out.push_back(std::move(ext));
          if (static_cast<long>(out.size()) >= limit) return out;
        }
      }
    }
    return out;
  }

 private:
  static std::uint64_t key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  std::vector<std::vector<TokenId>> sentences_;
  std::unordered_map<std::uint64_t, std::vector<std::pair<std::size_t, std::size_t>>>
      postings_;
};

// Greedy vanilla continuation of p under a frozen weight snapshot; returns
// the extended sequences, one per truncation length, shortest first.
inline std::vector<Phrase> generation_negatives(const Phrase& p,
                                                const TransformerWeights& snapshot,
                                                long count) {
  std::vector<Phrase> out;
  const long plen = static_cast<long>(p.size());
  if (count <= 0 || plen >= kMaxNegativeLen) return out;

  autograd::NoGradGuard guard;
  Phrase rollout = p;
  const long target = std::min<long>(kMaxNegativeLen, plen + count);
  while (static_cast<long>(rollout.size()) < target) {
    Tensor hidden = forward_hidden(embed_tokens(rollout, snapshot), snapshot);
    Tensor last = slice_rows(hidden, hidden.rows() - 1, 1);
    Tensor logits = matmul(last, transpose(snapshot.output_embedding));
    long best = 0;
    for (long i = 1; i < logits.cols(); ++i)
      if (logits.at(0, i) > logits.at(0, best)) best = i;
    rollout.push_back(static_cast<TokenId>(best));
    out.emplace_back(rollout);
  }
  return out;
}

// Ring of the previous `depth` batches' gold phrases and their prefixes.
class PreBatchBuffer {
 public:
  explicit PreBatchBuffer(long depth = 1) : depth_(depth) {}

  long depth() const { return depth_; }
  long batches_held() const { return static_cast<long>(ring_.size()); }

  void push_batch(const std::vector<PhraseSample>& batch) {
    std::vector<Phrase> stored;
    for (const PhraseSample& s : batch)
      for (const Phrase& gold : s.gold_phrases()) {
        stored.push_back(gold);
        for (Phrase& pre : prefix_negatives(gold)) stored.push_back(std::move(pre));
      }
    ring_.push_back(std::move(stored));
    while (static_cast<long>(ring_.size()) > depth_) ring_.pop_front();
  }

  std::vector<Phrase> contents() const {
    std::vector<Phrase> out;
    for (const auto& batch : ring_) out.insert(out.end(), batch.begin(), batch.end());
    return out;
  }

 private:
  long depth_ = 1;
  std::deque<std::vector<Phrase>> ring_;
};

struct NegativeLimits {
  long corpus_retrieval_limit = 4;  // distinct extensions per gold
  long generation_count = 3;        // rollout truncations per gold
};

// Builds one pool per batch sample. A sample's own golds are excluded (they
// are the positives and already members of its training-time vocabulary);
// everything else is deduplicated with the first source tag winning.
inline std::vector<NegativePool> assemble_pools(
    const std::vector<PhraseSample>& batch, const NegativeStrategySet& strategies,
    const PreBatchBuffer* pre_batch = nullptr, const CorpusIndex* corpus_index = nullptr,
    const TransformerWeights* lm_snapshot = nullptr, const NegativeLimits& limits = {}) {
  if (!strategies.any())
    throw std::invalid_argument("assemble_pools: strategy set is empty");
  if (strategies.pre_batch && pre_batch == nullptr)
    throw std::invalid_argument("assemble_pools: pre_batch strategy needs the buffer");
  if (strategies.corpus_retrieval && corpus_index == nullptr)
    throw std::invalid_argument("assemble_pools: corpus_retrieval needs an index");
  if (strategies.generation && lm_snapshot == nullptr)
    throw std::invalid_argument("assemble_pools: generation needs an LM snapshot");

  // Rollouts are deterministic, so share them across samples with equal golds.
  std::unordered_map<Phrase, std::vector<Phrase>, PhraseHash> rollout_cache;

  std::vector<NegativePool> pools(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    std::unordered_set<Phrase, PhraseHash> own_golds;
    for (const Phrase& g : batch[s].gold_phrases()) own_golds.insert(g);

    NegativePool& pool = pools[s];
    std::unordered_set<Phrase, PhraseHash> seen;
    auto offer = [&](Phrase ids, NegativeSource source) {
      if (static_cast<long>(ids.size()) < 2 ||
          static_cast<long>(ids.size()) > kMaxNegativeLen)
        return;
      if (own_golds.count(ids)) return;
      if (!seen.insert(ids).second) return;
      pool.entries.push_back({std::move(ids), source});
    };

    if (strategies.in_batch) {
      for (std::size_t other = 0; other < batch.size(); ++other) {
        if (other == s) continue;
        for (const Phrase& g : batch[other].gold_phrases())
          offer(g, NegativeSource::in_batch);
      }
    }
    if (strategies.pre_batch) {
      for (const Phrase& g : pre_batch->contents()) offer(g, NegativeSource::pre_batch);
    }
    for (std::size_t u = 0; u < batch[s].units.size(); ++u) {
      if (!batch[s].units[u].is_phrase) continue;
      Phrase gold = batch[s].unit_tokens(u);
      if (strategies.prefix) {
        for (Phrase& p : prefix_negatives(gold))
          offer(std::move(p), NegativeSource::prefix);
      }
      if (strategies.self_retrieval) {
        for (Phrase& p :
             self_retrieval_negatives(gold, batch[s].token_ids, batch[s].units[u].start))
          offer(std::move(p), NegativeSource::self_retrieval);
      }
      if (strategies.corpus_retrieval) {
        for (Phrase& p :
             corpus_index->successor_extensions(gold, limits.corpus_retrieval_limit))
          offer(std::move(p), NegativeSource::corpus_retrieval);
      }
      if (strategies.generation && static_cast<long>(gold.size()) < kMaxNegativeLen) {
        auto it = rollout_cache.find(gold);
        if (it == rollout_cache.end())
          it = rollout_cache
                   .emplace(gold, generation_negatives(gold, *lm_snapshot,
                                                       limits.generation_count))
                   .first;
        for (const Phrase& p : it->second) offer(p, NegativeSource::generation);
      }
    }
  }
  return pools;
}

}  // namespace dynavoc
