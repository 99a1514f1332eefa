#pragma once

// Lexical document retrieval (BM25 over token ids) for test-time phrase
// harvesting, plus the citation-generation mode: harvested phrases carry a
// 1-based document label, and emitting a phrase during decoding appends its
// "[j]" marker to the surface text.

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynavoc/decoding.hpp"
#include "dynavoc/dynamic_vocab.hpp"
#include "dynavoc/tokenizer.hpp"

namespace dynavoc {

struct Bm25Params {
  double k1 = 1.2;  // term-frequency saturation
  double b = 0.75;  // length normalization
};

class Bm25Index {
 public:
  Bm25Index(std::vector<Document> docs, const Tokenizer& tokenizer,
            Bm25Params params = {})
      : docs_(std::move(docs)), params_(params) {
    doc_tokens_.reserve(docs_.size());
    double total_len = 0.0;
    for (std::size_t d = 0; d < docs_.size(); ++d) {
      doc_tokens_.push_back(tokenizer.encode(docs_[d].text));
      total_len += static_cast<double>(doc_tokens_.back().size());
      std::unordered_map<TokenId, long> tf;
      for (TokenId t : doc_tokens_.back()) tf[t] += 1;
      for (auto& [term, count] : tf) postings_[term].emplace_back(d, count);
    }
    avg_len_ = docs_.empty() ? 0.0 : total_len / static_cast<double>(docs_.size());
  }

  std::size_t size() const { return docs_.size(); }
  const Document& doc(long index) const { return docs_.at(index); }
  const std::vector<TokenId>& doc_tokens(long index) const { return doc_tokens_.at(index); }

  // Top-k document indices by BM25 score of the query text; ties break on the
  // lower document index, k clamps to the corpus size.
  std::vector<long> retrieve_topk(const std::string& query,
                                  const Tokenizer& tokenizer, long k) const {
    if (k < 1) throw std::invalid_argument("retrieve_topk: k must be at least 1");
    if (docs_.empty()) return {};

    std::vector<TokenId> terms = tokenizer.encode(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

    const double n_docs = static_cast<double>(docs_.size());
    std::vector<double> scores(docs_.size(), 0.0);
    for (TokenId term : terms) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      const double df = static_cast<double>(it->second.size());
      const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
      for (const auto& [d, tf] : it->second) {
        const double len_norm =
            1.0 - params_.b + params_.b * static_cast<double>(doc_tokens_[d].size()) /
                                  std::max(avg_len_, 1e-9);
        scores[d] += idf * (tf * (params_.k1 + 1.0)) / (tf + params_.k1 * len_norm);
      }
    }

    std::vector<long> order(docs_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(k)));
    return order;
  }

 private:
  std::vector<Document> docs_;
  std::vector<std::vector<TokenId>> doc_tokens_;
  std::unordered_map<TokenId, std::vector<std::pair<std::size_t, long>>> postings_;
  Bm25Params params_;
  double avg_len_ = 0.0;
};

struct CandidatePhrase {
  Phrase ids;
  std::string doc_id;  // source document's id
  long doc_label = 0;  // 1-based position in the retrieved list

  std::string marker() const { return "[" + std::to_string(doc_label) + "]"; }
};

// All token n-grams of length min_len..max_len from the given documents (in
// retrieval order: the first document seen owns a duplicated n-gram), ranked
// by in-document frequency then first occurrence, truncated to cap.
inline std::vector<CandidatePhrase> harvest_phrases(
    const std::vector<std::vector<TokenId>>& doc_tokens,
    const std::vector<std::string>& doc_ids, long cap, long min_len = 2,
    long max_len = 8) {
  if (doc_tokens.size() != doc_ids.size())
    throw std::invalid_argument("harvest_phrases: ids and token lists disagree");
  struct Entry {
    CandidatePhrase phrase;
    long freq = 0;
    long order = 0;  // first-occurrence rank across (doc, position, length)
  };
  std::vector<Entry> entries;
  std::unordered_map<Phrase, std::size_t, PhraseHash> seen;

  long order = 0;
  for (std::size_t d = 0; d < doc_tokens.size(); ++d) {
    const auto& tokens = doc_tokens[d];
    const long n = static_cast<long>(tokens.size());
    for (long pos = 0; pos < n; ++pos) {
      for (long len = min_len; len <= max_len && pos + len <= n; ++len) {
        Phrase gram(tokens.begin() + pos, tokens.begin() + pos + len);
        auto it = seen.find(gram);
        if (it == seen.end()) {
          Entry e;
          e.phrase.ids = std::move(gram);
          e.phrase.doc_id = doc_ids[d];
          e.phrase.doc_label = static_cast<long>(d) + 1;
          e.freq = 1;
          e.order = order++;
          seen.emplace(e.phrase.ids, entries.size());
          entries.push_back(std::move(e));
        } else if (entries[it->second].phrase.doc_label ==
                   static_cast<long>(d) + 1) {
          // in-document frequency counts repeats within the owning doc only
          entries[it->second].freq += 1;
        }
      }
    }
  }

  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.freq != b.freq) return a.freq > b.freq;
    return a.order < b.order;
  });
  std::vector<CandidatePhrase> out;
  for (const Entry& e : entries) {
    if (static_cast<long>(out.size()) >= cap) break;
    out.push_back(e.phrase);
  }
  return out;
}

struct CitationResult {
  std::string answer;  // surface text with inline markers
  GenerationTrace trace;
};

// Answer text with markers: the trace is a plain decode; whenever a phrase
// unit is emitted its document marker follows the phrase text immediately.
inline std::string render_with_markers(const GenerationTrace& trace,
                                       const Tokenizer& tokenizer) {
  std::string out;
  for (const TraceStep& s : trace.steps) {
    out += tokenizer.decode(s.covered);
    if (s.is_phrase && !s.doc_id.empty()) out += "[" + s.doc_id + "]";
  }
  return out;
}

// Decodes an answer to `question` over a vocabulary harvested from the
// labeled documents. Phrase provenance in the vocab is the 1-based label.
inline CitationResult cite_decode(const std::string& question,
                                  const std::vector<Document>& docs,
                                  const TransformerWeights& lm,
                                  const PhraseEncoder& encoder,
                                  const Tokenizer& tokenizer, long phrase_cap,
                                  const DecodeOptions& opts) {
  std::vector<std::vector<TokenId>> doc_tokens;
  std::vector<std::string> labels;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    doc_tokens.push_back(tokenizer.encode(docs[d].text));
    labels.push_back(std::to_string(d + 1));  // marker labels, not raw doc ids
  }
  std::vector<CandidatePhrase> harvested =
      harvest_phrases(doc_tokens, labels, phrase_cap);

  DynamicVocab vocab(lm.config.vocab_size, lm.config.d_model);
  std::vector<VocabPhrase> additions;
  additions.reserve(harvested.size());
  for (CandidatePhrase& c : harvested) additions.push_back({std::move(c.ids), c.doc_id});
  vocab.extend(additions, encoder);

  CitationResult result;
  result.trace = decode(tokenizer.encode(question), lm, vocab, tokenizer, opts);
  result.answer = render_with_markers(result.trace, tokenizer);
  return result;
}

struct CitationScores {
  double precision_pct = 0.0;  // markers whose phrase appears verbatim in the cited doc
  double recall_pct = 0.0;     // answer sentences containing at least one valid marker
  long total_markers = 0;
  long valid_markers = 0;
  long total_sentences = 0;
  long cited_sentences = 0;
};

namespace detail {

inline bool contains_contiguous(const std::vector<TokenId>& haystack, const Phrase& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i)
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + i)) return true;
  return false;
}

}  // namespace detail

// Verbatim-support surrogate metrics. Precision: fraction of emitted markers
// whose covered tokens occur contiguously in the labeled document. Recall:
// fraction of answer sentences (split on . ! ?) holding at least one valid
// marker.
inline CitationScores citation_metrics(const std::vector<GenerationTrace>& traces,
                                       const std::vector<std::vector<TokenId>>& docs_by_label,
                                       const Tokenizer& tokenizer) {
  CitationScores scores;
  for (const GenerationTrace& trace : traces) {
    // Rebuild the surface text, remembering where markers land and whether
    // each one checks out against its document.
    std::string text;
    std::vector<std::pair<std::size_t, bool>> markers;  // (offset in text, valid)
    for (const TraceStep& s : trace.steps) {
      text += tokenizer.decode(s.covered);
      if (!s.is_phrase || s.doc_id.empty()) continue;
      long label = 0;
      try {
        label = std::stol(s.doc_id);
      } catch (const std::exception&) {
        label = 0;
      }
      bool valid = label >= 1 && label <= static_cast<long>(docs_by_label.size()) &&
                   detail::contains_contiguous(docs_by_label[label - 1],
                                               Phrase(s.covered));
      markers.emplace_back(text.size(), valid);
      text += "[" + s.doc_id + "]";
      scores.total_markers += 1;
      scores.valid_markers += valid;
    }

    // Sentence spans over the marker-free interpretation: a sentence ends at
    // . ! or ? and runs to the next boundary.
    std::size_t start = 0;
    auto flush_sentence = [&](std::size_t end) {
      bool has_content = false;
      for (std::size_t i = start; i < end; ++i)
        if (!std::isspace(static_cast<unsigned char>(text[i]))) has_content = true;
      if (!has_content) {
        start = end;
        return;
      }
      scores.total_sentences += 1;
      for (const auto& [offset, valid] : markers)
        if (valid && offset > start && offset <= end) {
          scores.cited_sentences += 1;
          break;
        }
      start = end;
    };
    for (std::size_t i = 0; i < text.size(); ++i)
      if (text[i] == '.' || text[i] == '!' || text[i] == '?') flush_sentence(i + 1);
    flush_sentence(text.size());
  }

  scores.precision_pct = scores.total_markers == 0
                             ? 0.0
                             : 100.0 * scores.valid_markers / scores.total_markers;
  scores.recall_pct = scores.total_sentences == 0
                          ? 0.0
                          : 100.0 * scores.cited_sentences / scores.total_sentences;
  return scores;
}

}  // namespace dynavoc
