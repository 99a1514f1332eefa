#pragma once

// The dynamic vocabulary mechanism: a causal phrase encoder maps arbitrary
// token spans to single embedding rows; those rows extend both the input and
// output embedding banks (tied), and next-unit probabilities come from one
// softmax over the union of static tokens and active phrases.

#include <atomic>
#include <cstdint>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "dynavoc/phrase_table.hpp"
#include "dynavoc/tensor.hpp"
#include "dynavoc/transformer.hpp"
#include "dynavoc/util.hpp"

namespace dynavoc {

enum class ProjectionKind { linear, mlp };

// Causal transformer plus projection head. A phrase is encoded from its own
// tokens only (no context), and the projected hidden state at position t is
// the embedding of the length-(t+1) prefix, so one forward pass yields the
// embeddings of every prefix of the longest phrase fed in.
struct PhraseEncoder {
  TransformerWeights transformer;
  ProjectionKind projection = ProjectionKind::linear;
  Tensor proj_hidden_w, proj_hidden_b;  // only used by the mlp head
  Tensor proj_w, proj_b;
  // Counts transformer passes; atomic because phrase encoding may shard
  // across workers. Instrumentation only.
  mutable std::atomic<std::uint64_t> forward_passes{0};

  PhraseEncoder() = default;
  PhraseEncoder(const PhraseEncoder& o)
      : transformer(o.transformer),
        projection(o.projection),
        proj_hidden_w(o.proj_hidden_w),
        proj_hidden_b(o.proj_hidden_b),
        proj_w(o.proj_w),
        proj_b(o.proj_b),
        forward_passes(o.forward_passes.load()) {}
  PhraseEncoder& operator=(const PhraseEncoder& o) {
    transformer = o.transformer;
    projection = o.projection;
    proj_hidden_w = o.proj_hidden_w;
    proj_hidden_b = o.proj_hidden_b;
    proj_w = o.proj_w;
    proj_b = o.proj_b;
    forward_passes = o.forward_passes.load();
    return *this;
  }

  long output_width() const { return proj_w.cols(); }

  static PhraseEncoder init(const ModelConfig& cfg, long lm_width, ProjectionKind kind,
                            std::uint64_t seed) {
    cfg.validate();
    PhraseEncoder enc;
    enc.transformer = TransformerWeights::init(cfg, seed);
    enc.projection = kind;
    std::mt19937_64 rng(derive_seed(seed, 0x70726f6a));
    if (kind == ProjectionKind::mlp) {
      enc.proj_hidden_w = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.02, true);
      enc.proj_hidden_b = Tensor::zeros({cfg.d_model}, true);
    }
    enc.proj_w = Tensor::randn({cfg.d_model, lm_width}, rng, 0.02, true);
    enc.proj_b = Tensor::zeros({lm_width}, true);
    return enc;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    auto out = transformer.named_parameters();
    for (auto& [name, t] : out) name = "encoder." + name;
    if (projection == ProjectionKind::mlp) {
      out.emplace_back("encoder.proj_hidden_w", proj_hidden_w);
      out.emplace_back("encoder.proj_hidden_b", proj_hidden_b);
    }
    out.emplace_back("encoder.proj_w", proj_w);
    out.emplace_back("encoder.proj_b", proj_b);
    return out;
  }
};

namespace detail {

inline Tensor project_hidden(const PhraseEncoder& enc, const Tensor& hidden) {
  Tensor h = hidden;
  if (enc.projection == ProjectionKind::mlp)
    h = gelu(add_row_broadcast(matmul(h, enc.proj_hidden_w), enc.proj_hidden_b));
  return add_row_broadcast(matmul(h, enc.proj_w), enc.proj_b);
}

}  // namespace detail

// One forward pass over the phrase; row t is the embedding of the prefix of
// length t+1 (projected causal hidden states).
inline Tensor encode_with_prefixes(const Phrase& phrase, const PhraseEncoder& enc) {
  if (phrase.empty()) throw std::invalid_argument("encode: empty phrase");
  if (static_cast<long>(phrase.size()) > enc.transformer.config.max_seq)
    throw std::length_error("encode: phrase longer than encoder max_seq");
  Tensor inputs = embed_tokens(phrase, enc.transformer);
  Tensor hidden = forward_hidden(inputs, enc.transformer);
  enc.forward_passes += 1;
  return detail::project_hidden(enc, hidden);
}

// Embedding of one phrase: projected hidden state of its last token.
inline Tensor encode_phrase(const Phrase& phrase, const PhraseEncoder& enc) {
  if (phrase.empty()) throw std::invalid_argument("encode: empty phrase");
  if (static_cast<long>(phrase.size()) > enc.transformer.config.max_seq)
    throw std::length_error("encode: phrase longer than encoder max_seq");
  Tensor inputs = embed_tokens(phrase, enc.transformer);
  Tensor hidden = forward_hidden(inputs, enc.transformer);
  enc.forward_passes += 1;
  Tensor last = slice_rows(hidden, hidden.rows() - 1, 1);
  return detail::project_hidden(enc, last);
}

// Embeddings for a set of phrases with one encoder pass per *maximal*
// sequence: any phrase that is a prefix of a longer one reads its row from
// the longer phrase's pass. Returns a [K x d] tensor plus phrase -> row map.
struct EncodedPhraseSet {
  std::vector<Phrase> phrases;  // unique, first-seen order
  std::unordered_map<Phrase, long, PhraseHash> row_of;
  Tensor rows;  // graph-connected to the encoder parameters

  bool empty() const { return phrases.empty(); }
};

inline EncodedPhraseSet encode_phrase_set(const std::vector<Phrase>& wanted,
                                          const PhraseEncoder& enc) {
  EncodedPhraseSet out;
  for (const Phrase& p : wanted) {
    if (p.empty()) throw std::invalid_argument("encode: empty phrase");
    if (!out.row_of.count(p)) {
      out.row_of.emplace(p, static_cast<long>(out.phrases.size()));
      out.phrases.push_back(p);
    }
  }
  if (out.phrases.empty()) return out;

  std::vector<long> order(out.phrases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    return out.phrases[a].size() > out.phrases[b].size();
  });

  std::vector<RowRef> refs(out.phrases.size());
  std::vector<bool> assigned(out.phrases.size(), false);
  for (long idx : order) {
    if (assigned[idx]) continue;
    const Phrase& longest = out.phrases[idx];
    Tensor pass = encode_with_prefixes(longest, enc);
    Phrase prefix;
    prefix.reserve(longest.size());
    for (std::size_t t = 0; t < longest.size(); ++t) {
      prefix.push_back(longest[t]);
      auto it = out.row_of.find(prefix);
      if (it != out.row_of.end() && !assigned[it->second]) {
        refs[it->second] = {pass, static_cast<long>(t)};
        assigned[it->second] = true;
      }
    }
  }
  out.rows = compose_rows(refs);
  return out;
}

// --------------------------------------------------------------------------
// test-time vocabulary
// --------------------------------------------------------------------------

struct VocabPhrase {
  Phrase ids;
  std::string doc_id;  // empty when the phrase has no document provenance
};

// The active phrase set during decoding. Phrase j occupies unit id
// static_size + j; ids are append-only and stable under extension.
class DynamicVocab {
 public:
  DynamicVocab(long static_size, long width)
      : static_size_(static_size), width_(width) {}

  long static_size() const { return static_size_; }
  long width() const { return width_; }
  long phrase_count() const { return static_cast<long>(phrases_.size()); }
  long total_size() const { return static_size_ + phrase_count(); }

  const VocabPhrase& phrase(long slot) const { return phrases_.at(slot); }
  bool has_phrase_id(long unit_id) const {
    return unit_id >= static_size_ && unit_id < total_size();
  }
  long slot_of(long unit_id) const { return unit_id - static_size_; }

  // Appends encodings of new phrases; duplicates are ignored and existing
  // slots never move. Returns the number of phrases actually added.
  long extend(const std::vector<VocabPhrase>& additions, const PhraseEncoder& encoder,
              unsigned workers = 1) {
    std::vector<long> fresh;
    for (const VocabPhrase& vp : additions) {
      if (vp.ids.size() < 2 || vp.ids.size() > 8)
        throw std::invalid_argument("dynamic vocabulary phrases must be 2..8 tokens");
      if (index_.count(vp.ids)) continue;
      index_.emplace(vp.ids, phrase_count());
      phrases_.push_back(vp);
      fresh.push_back(phrase_count() - 1);
    }
    if (fresh.empty()) return 0;

    embedding_rows_.resize(static_cast<std::size_t>(phrase_count()) * width_);
    auto encode_slot = [&](long slot) {
      Tensor e = encode_phrase(phrases_[slot].ids, encoder);
      std::copy(e.values().begin(), e.values().end(),
                embedding_rows_.begin() + slot * width_);
    };
    workers = std::max(1u, workers);
    if (workers == 1 || fresh.size() < 2) {
      autograd::NoGradGuard guard;
      for (long slot : fresh) encode_slot(slot);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < workers; ++t)
        pool.emplace_back([&, t]() {
          autograd::NoGradGuard guard;  // grad mode is thread-local
          for (std::size_t k = t; k < fresh.size(); k += workers) encode_slot(fresh[k]);
        });
      for (auto& th : pool) th.join();
    }
    return static_cast<long>(fresh.size());
  }

  // Direct row overwrite, for refreshing embeddings without changing ids.
  void overwrite_phrase_embedding(long slot, const std::vector<double>& row) {
    if (slot < 0 || slot >= phrase_count() || static_cast<long>(row.size()) != width_)
      throw std::invalid_argument("overwrite_phrase_embedding: bad slot or width");
    std::copy(row.begin(), row.end(), embedding_rows_.begin() + slot * width_);
  }

  // Snapshot of the phrase embedding block as a plain [P x d] tensor.
  Tensor phrase_matrix() const {
    return Tensor::from_values({phrase_count(), width_}, embedding_rows_);
  }

 private:
  long static_size_ = 0;
  long width_ = 0;
  std::vector<VocabPhrase> phrases_;
  std::unordered_map<Phrase, long, PhraseHash> index_;
  std::vector<double> embedding_rows_;
};

// Input and output banks share the identical phrase block: both are built by
// appending the same matrix, so phrase embeddings are tied across sides while
// the static rows stay independent.
struct EmbeddingBank {
  Tensor input;   // [V+P x d]
  Tensor output;  // [V+P x d]
  long static_size = 0;

  long total_size() const { return input.rows(); }
};

inline EmbeddingBank expand_bank(const TransformerWeights& lm, const Tensor& phrase_block) {
  if (phrase_block.rank() != 2 || phrase_block.cols() != lm.config.d_model)
    throw std::invalid_argument("expand_bank: phrase block width must equal d_model");
  EmbeddingBank bank;
  bank.static_size = lm.config.vocab_size;
  bank.input = concat_rows(lm.token_embedding, phrase_block);
  bank.output = concat_rows(lm.output_embedding, phrase_block);
  return bank;
}

inline EmbeddingBank expand_bank(const TransformerWeights& lm, const DynamicVocab& vocab) {
  return expand_bank(lm, vocab.phrase_matrix());
}

// Next-unit probabilities over the union vocabulary (plain arithmetic; the
// training path builds the same quantity with graph ops instead).
inline std::vector<double> next_unit_distribution(const std::vector<double>& hidden,
                                                  const EmbeddingBank& bank) {
  const long n = bank.total_size();
  const long d = bank.output.cols();
  if (static_cast<long>(hidden.size()) != d)
    throw std::invalid_argument("next_unit_distribution: hidden width mismatch");
  std::vector<double> logits(n);
  const auto& w = bank.output.values();
  for (long i = 0; i < n; ++i) {
    double dot = 0.0;
    for (long j = 0; j < d; ++j) dot += hidden[j] * w[i * d + j];
    logits[i] = dot;
  }
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (long i = 0; i < n; ++i) {
    logits[i] = std::exp(logits[i] - mx);
    z += logits[i];
  }
  for (long i = 0; i < n; ++i) logits[i] /= z;
  return logits;
}

}  // namespace dynavoc
