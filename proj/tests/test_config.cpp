#include <catch2/catch_amalgamated.hpp>

#include "dynavoc/config.hpp"

using namespace dynavoc;

TEST_CASE("defaults carry the documented values") {
  LoadedConfig loaded = parse_config("");
  const RunConfig& c = loaded.config;
  REQUIRE(c.lr == 5e-5);
  REQUIRE(c.clip == 1.0);
  REQUIRE(c.accum == 2);
  REQUIRE(c.batch == 4);
  REQUIRE(c.nucleus_p == 0.95);
  REQUIRE(c.budget == 128);
  REQUIRE(c.retrieve_k == 32);
  REQUIRE(c.phrase_cap == 8192);
  REQUIRE(c.data_gap == 5);
  REQUIRE(c.data_q == 0.5);
  REQUIRE(c.pre_batch_depth == 1);
  REQUIRE(c.snapshot_interval == 500);
  REQUIRE(c.tokenizer_merges == 2048);
  REQUIRE(c.negative_strategies == "in_batch,prefix,self_retrieval,generation");
  // warmup defaults to one percent of total steps
  REQUIRE(c.resolved_warmup() == c.total_steps / 100);
}

TEST_CASE("file values and overrides override in order") {
  std::string text =
      "seed = 7\n"
      "[model]\n"
      "d_model = 32\n"
      "n_heads = 2  # trailing comment\n"
      "[optimizer]\n"
      "lr = 1e-3\n";
  LoadedConfig loaded = parse_config(text, {"optimizer.lr=2e-3", "data.q=0.9"});
  REQUIRE(loaded.config.seed == 7);
  REQUIRE(loaded.config.model.d_model == 32);
  REQUIRE(loaded.config.model.n_heads == 2);
  REQUIRE(loaded.config.lr == 2e-3);
  REQUIRE(loaded.config.data_q == 0.9);
  REQUIRE(loaded.explicitly_set.count("optimizer.lr") == 1);
  REQUIRE(loaded.explicitly_set.count("optimizer.clip") == 0);
}

TEST_CASE("unknown keys and malformed lines are rejected") {
  REQUIRE_THROWS_AS(parse_config("[model]\nwidth = 3\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("[mystery]\nd_model = 3\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("just words\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("[model\nd_model = 3\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("", {"nonsense"}), DataError);
  REQUIRE_THROWS_AS(parse_config("", {"model.bogus=1"}), DataError);
}

TEST_CASE("validation catches bad values") {
  REQUIRE_THROWS_AS(parse_config("[data]\nq = 1.5\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("[data]\nmode = magic\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("[decode]\np = 0\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("[model]\nd_model = -4\n"), std::invalid_argument);
  REQUIRE_THROWS_AS(parse_config("[model]\nd_model = abc\n"), DataError);
  REQUIRE_THROWS_AS(parse_config("[negatives]\nstrategies = sorcery\n"), DataError);
}

TEST_CASE("dump marks defaults and set keys and reparses to the same config") {
  LoadedConfig loaded = parse_config("[optimizer]\nlr = 9e-4\n");
  std::string dump = dump_config(loaded);
  REQUIRE(dump.find("lr = 0.0009  # set") != std::string::npos);
  REQUIRE(dump.find("clip = 1  # default") != std::string::npos);
  REQUIRE(dump.find("# resolved") != std::string::npos);

  // strip markers and comments, reparse, values survive the round trip
  std::string cleaned;
  for (const std::string& line : split_lines(dump)) {
    if (line.rfind("#", 0) == 0) continue;
    cleaned += line.substr(0, line.find("  #")) + "\n";
  }
  LoadedConfig again = parse_config(cleaned);
  REQUIRE(again.config.lr == loaded.config.lr);
  REQUIRE(again.config.seed == loaded.config.seed);
  REQUIRE(again.config.negative_strategies == loaded.config.negative_strategies);
}

TEST_CASE("derived accessors translate into module options") {
  LoadedConfig loaded = parse_config(
      "[data]\nmode = fmm\nq = 0.25\ngap = 6\n[negatives]\nstrategies = "
      "self_retrieval,generation\n[optimizer]\nwarmup = 12\n");
  REQUIRE(loaded.config.mode() == SampleMode::fmm);
  SampleBuildOptions opts = loaded.config.sample_options();
  REQUIRE(opts.accept_prob == 0.25);
  REQUIRE(opts.gap == 6);
  NegativeStrategySet set = loaded.config.strategies();
  REQUIRE(set.self_retrieval);
  REQUIRE(set.generation);
  REQUIRE_FALSE(set.in_batch);
  OptimizerConfig oc = loaded.config.optimizer();
  REQUIRE(oc.warmup_steps == 12);
  REQUIRE(oc.grad_accum == 2);
}
