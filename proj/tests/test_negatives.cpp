#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dynavoc/negatives.hpp"

using namespace dynavoc;

namespace {

PhraseSample sample_with_phrase(std::vector<TokenId> ids, long start, long len) {
  PhraseSample s;
  s.token_ids = std::move(ids);
  long i = 0;
  while (i < static_cast<long>(s.token_ids.size())) {
    if (i == start) {
      s.units.push_back({i, len, true});
      i += len;
    } else {
      s.units.push_back({i, 1, false});
      i += 1;
    }
  }
  s.sigma = compute_sigma(s.units, s.token_ids);
  return s;
}

TransformerWeights tiny_snapshot() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 16;
  cfg.max_seq = 16;
  cfg.vocab_size = 30;
  return TransformerWeights::init(cfg, 5).detached_copy();
}

}  // namespace

TEST_CASE("prefix negatives enumerate proper prefixes of length two or more") {
  REQUIRE(prefix_negatives({1, 2, 3, 4}) ==
          std::vector<Phrase>{{1, 2}, {1, 2, 3}});
  REQUIRE(prefix_negatives({1, 2}).empty());
  Phrase eight = {1, 2, 3, 4, 5, 6, 7, 8};
  REQUIRE(prefix_negatives(eight).size() == 6);
}

TEST_CASE("self retrieval extends up to the length cap and sentence end") {
  std::vector<TokenId> sentence(12);
  for (int i = 0; i < 12; ++i) sentence[i] = i + 100;
  Phrase p = {100, 101, 102};

  auto exts = self_retrieval_negatives(p, sentence, 0);
  REQUIRE(exts.size() == 5);  // lengths 4..8
  for (std::size_t k = 0; k < exts.size(); ++k) {
    REQUIRE(exts[k].size() == 4 + k);
    REQUIRE(std::equal(p.begin(), p.end(), exts[k].begin()));
  }

  Phrase tail = {110, 111};
  REQUIRE(self_retrieval_negatives(tail, sentence, 10).empty());

  Phrase eight(sentence.begin(), sentence.begin() + 8);
  REQUIRE(self_retrieval_negatives(eight, sentence, 0).empty());

  REQUIRE_THROWS_AS(self_retrieval_negatives({9, 9}, sentence, 0),
                    std::invalid_argument);
}

TEST_CASE("corpus retrieval pools distinct extensions across occurrences") {
  std::vector<std::vector<TokenId>> corpus = {
      {9, 1, 2, 3, 4, 9},
      {8, 8, 1, 2, 3, 5, 8},
      {1, 2, 3, 4, 7},
  };
  CorpusIndex index(corpus);
  Phrase p = {1, 2, 3};

  auto exts = index.successor_extensions(p, 4);
  REQUIRE(exts.size() == 4);
  // shortest extensions first, distinct, occurrence order within a length
  REQUIRE(exts[0] == Phrase{1, 2, 3, 4});
  REQUIRE(exts[1] == Phrase{1, 2, 3, 5});
  REQUIRE(exts[2] == Phrase{1, 2, 3, 4, 9});
  REQUIRE(exts[3] == Phrase{1, 2, 3, 5, 8});

  REQUIRE(index.successor_extensions(p, 0).empty());
  REQUIRE(index.successor_extensions({6, 6}, 4).empty());
}

TEST_CASE("generation negatives roll the snapshot out greedily") {
  TransformerWeights snap = tiny_snapshot();
  Phrase p = {2, 3, 4, 5, 6};

  auto negs = generation_negatives(p, snap, 3);
  REQUIRE(negs.size() == 3);  // lengths 6, 7, 8
  for (std::size_t k = 0; k < negs.size(); ++k) {
    REQUIRE(negs[k].size() == 6 + k);
    REQUIRE(std::equal(p.begin(), p.end(), negs[k].begin()));
    for (TokenId t : negs[k]) {
      REQUIRE(t >= 0);
      REQUIRE(t < 30);
    }
  }
  // one per truncation length of a single rollout
  REQUIRE(std::equal(negs[0].begin(), negs[0].end(), negs[1].begin()));

  Phrase eight = {1, 2, 3, 4, 5, 6, 7, 8};
  REQUIRE(generation_negatives(eight, snap, 3).empty());
  REQUIRE(generation_negatives(p, snap, 0).empty());
}

TEST_CASE("in-batch pools hold the other samples' golds only") {
  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 2, 3);
  PhraseSample b = sample_with_phrase({21, 22, 23, 24, 25, 26, 27, 28}, 0, 2);
  NegativeStrategySet only_in_batch;
  only_in_batch.in_batch = true;

  auto pools = assemble_pools({a, b}, only_in_batch);
  REQUIRE(pools.size() == 2);
  REQUIRE(pools[0].size() == 1);
  REQUIRE(pools[0].entries[0].ids == Phrase{21, 22});
  REQUIRE(pools[0].entries[0].source == NegativeSource::in_batch);
  REQUIRE(pools[1].size() == 1);
  REQUIRE(pools[1].entries[0].ids == Phrase{3, 4, 5});
  // a sample's own gold never appears in its pool
  REQUIRE_FALSE(pools[0].contains({3, 4, 5}));
  REQUIRE_FALSE(pools[1].contains({21, 22}));
}

TEST_CASE("prefix-only strategy with length-2 golds yields empty pools") {
  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7}, 1, 2);
  NegativeStrategySet only_prefix;
  only_prefix.prefix = true;
  auto pools = assemble_pools({a}, only_prefix);
  REQUIRE(pools[0].size() == 0);
}

TEST_CASE("default strategies produce only the expected source tags") {
  TransformerWeights snap = tiny_snapshot();
  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, 1, 4);
  PhraseSample b = sample_with_phrase({5, 6, 7, 8, 9, 10, 11, 12}, 0, 3);

  auto pools = assemble_pools({a, b}, NegativeStrategySet::defaults(), nullptr, nullptr,
                              &snap);
  bool any = false;
  for (const NegativePool& pool : pools)
    for (const NegativeEntry& e : pool.entries) {
      any = true;
      bool expected = e.source == NegativeSource::in_batch ||
                      e.source == NegativeSource::prefix ||
                      e.source == NegativeSource::self_retrieval ||
                      e.source == NegativeSource::generation;
      REQUIRE(expected);
    }
  REQUIRE(any);
}

TEST_CASE("pools are deduplicated, length-capped, and exclude own golds") {
  TransformerWeights snap = tiny_snapshot();
  std::vector<std::vector<TokenId>> support = {{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}};
  CorpusIndex index(support);
  PreBatchBuffer buffer(1);
  PhraseSample prev = sample_with_phrase({14, 15, 16, 17, 18, 19, 20}, 0, 3);
  buffer.push_batch({prev});

  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, 0, 4);
  NegativeStrategySet all;
  all.in_batch = all.pre_batch = all.prefix = all.self_retrieval =
      all.corpus_retrieval = all.generation = true;

  auto pools = assemble_pools({a, a}, all, &buffer, &index, &snap);
  for (const NegativePool& pool : pools) {
    std::set<Phrase> unique;
    for (const NegativeEntry& e : pool.entries) {
      REQUIRE(e.ids.size() >= 2);
      REQUIRE(e.ids.size() <= 8);
      REQUIRE(unique.insert(e.ids).second);
      REQUIRE(e.ids != Phrase{1, 2, 3, 4});
    }
    // self-retrieval and corpus-retrieval agree here; first source tag wins
    REQUIRE(pool.contains({1, 2, 3, 4, 5}));
    REQUIRE(pool.contains({14, 15}));  // prefix of the pre-batch gold
  }
}

TEST_CASE("pool assembly is deterministic") {
  TransformerWeights snap = tiny_snapshot();
  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7, 8, 9}, 2, 3);
  PhraseSample b = sample_with_phrase({9, 8, 7, 6, 5, 4, 3, 2, 1}, 0, 2);
  auto once = assemble_pools({a, b}, NegativeStrategySet::defaults(), nullptr, nullptr,
                             &snap);
  auto twice = assemble_pools({a, b}, NegativeStrategySet::defaults(), nullptr, nullptr,
                              &snap);
  REQUIRE(once.size() == twice.size());
  for (std::size_t s = 0; s < once.size(); ++s) {
    REQUIRE(once[s].size() == twice[s].size());
    for (std::size_t i = 0; i < once[s].entries.size(); ++i) {
      REQUIRE(once[s].entries[i].ids == twice[s].entries[i].ids);
      REQUIRE(once[s].entries[i].source == twice[s].entries[i].source);
    }
  }
}

TEST_CASE("strategy parsing and preconditions") {
  auto set = NegativeStrategySet::parse("self_retrieval, generation");
  REQUIRE(set.self_retrieval);
  REQUIRE(set.generation);
  REQUIRE_FALSE(set.in_batch);
  REQUIRE(set.describe() == "self_retrieval,generation");
  REQUIRE_FALSE(NegativeStrategySet::parse("none").any());
  REQUIRE_THROWS_AS(NegativeStrategySet::parse("bogus"), DataError);

  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7}, 0, 2);
  REQUIRE_THROWS_AS(assemble_pools({a}, NegativeStrategySet{}), std::invalid_argument);
  NegativeStrategySet wants_buffer;
  wants_buffer.pre_batch = true;
  REQUIRE_THROWS_AS(assemble_pools({a}, wants_buffer), std::invalid_argument);
}

TEST_CASE("pre-batch ring holds exactly the configured depth") {
  PreBatchBuffer buffer(2);
  PhraseSample a = sample_with_phrase({1, 2, 3, 4, 5, 6, 7, 8}, 0, 3);
  PhraseSample b = sample_with_phrase({11, 12, 13, 14, 15, 16}, 0, 2);
  PhraseSample c = sample_with_phrase({21, 22, 23, 24, 25, 26}, 0, 2);
  buffer.push_batch({a});
  buffer.push_batch({b});
  buffer.push_batch({c});
  REQUIRE(buffer.batches_held() == 2);
  auto contents = buffer.contents();
  // oldest ring entry dropped: a's gold {1,2,3} and its prefix {1,2} are gone
  for (const Phrase& p : contents) REQUIRE(p[0] != 1);
  bool has_b = false, has_c = false;
  for (const Phrase& p : contents) {
    if (p == Phrase{11, 12}) has_b = true;
    if (p == Phrase{21, 22}) has_c = true;
  }
  REQUIRE(has_b);
  REQUIRE(has_c);
}
