// dynavoc command-line interface: tokenizer and phrase-table construction,
// sample building, joint LM + phrase-encoder training, generation with a
// dynamic vocabulary, citation-mode decoding, metric evaluation, report
// comparison, and the analytic cost model.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric fault.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynavoc/config.hpp"
#include "dynavoc/decoding.hpp"
#include "dynavoc/dynamic_vocab.hpp"
#include "dynavoc/eval.hpp"
#include "dynavoc/negatives.hpp"
#include "dynavoc/phrase_table.hpp"
#include "dynavoc/retrieval.hpp"
#include "dynavoc/sample.hpp"
#include "dynavoc/tokenizer.hpp"
#include "dynavoc/training.hpp"

namespace fs = std::filesystem;
using namespace dynavoc;

namespace {

unsigned env_workers() {
  const char* raw = std::getenv("DYNAVOC_WORKERS");
  if (raw == nullptr) return 1;
  long v = std::strtol(raw, nullptr, 10);
  return static_cast<unsigned>(std::clamp<long>(v, 1, 64));
}

long resolve_vocab_size(long configured, const Tokenizer& tok) {
  if (configured == 0) return tok.vocab_size();
  if (configured < tok.vocab_size())
    throw DataError("model.vocab_size " + std::to_string(configured) +
                    " is smaller than the tokenizer's " +
                    std::to_string(tok.vocab_size()) + " symbols");
  return configured;
}

std::vector<std::vector<TokenId>> tokenize_corpus(const std::vector<Document>& docs,
                                                  const Tokenizer& tok) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(docs.size());
  for (const Document& d : docs) out.push_back(tok.encode(d.text));
  return out;
}

PhraseTable load_phrase_table(const std::string& path) {
  std::string text = read_text_file(path);
  // stored entries already passed their threshold; infer max_len for matching
  PhraseTable probe = PhraseTable::deserialize(text, 1, 8);
  long max_len = 2;
  for (const auto& [phrase, freq] : probe.entries())
    max_len = std::max<long>(max_len, static_cast<long>(phrase.size()));
  return PhraseTable::deserialize(text, 1, max_len);
}

std::vector<PhraseSample> build_corpus_samples(
    const std::vector<std::vector<TokenId>>& corpus_ids, const RunConfig& cfg,
    const PhraseTable* table, const Tokenizer& tok) {
  std::vector<PhraseSample> samples;
  samples.reserve(corpus_ids.size());
  for (std::size_t i = 0; i < corpus_ids.size(); ++i) {
    if (corpus_ids[i].empty()) continue;
    samples.push_back(build_sample(corpus_ids[i], cfg.mode(), derive_seed(cfg.seed, i),
                                   cfg.sample_options(), table, &tok));
  }
  if (samples.empty()) throw DataError("corpus produced no usable samples");
  return samples;
}

std::string escape_line(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') out += "\\n";
    else if (c == '\\') out += "\\\\";
    else out += c;
  }
  return out;
}

struct PrefixSet {
  std::vector<std::vector<TokenId>> ids;    // truncated to prefix_tokens
  std::vector<std::string> source_lines;
};

PrefixSet load_prefixes(const std::string& path, const Tokenizer& tok, long prefix_tokens) {
  PrefixSet set;
  for (const Document& doc : read_corpus_file(path)) {
    std::vector<TokenId> ids = tok.encode(doc.text);
    if (ids.empty()) {
      std::cerr << "warning: skipping empty prefix line (doc " << doc.doc_id << ")\n";
      continue;
    }
    if (static_cast<long>(ids.size()) > prefix_tokens) ids.resize(prefix_tokens);
    set.ids.push_back(std::move(ids));
    set.source_lines.push_back(doc.text);
  }
  if (set.ids.empty()) throw DataError("no usable prefixes in " + path);
  return set;
}

std::vector<VocabPhrase> load_phrase_set(const std::string& path) {
  std::vector<VocabPhrase> out;
  for (const std::string& line : split_lines(read_text_file(path))) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("phrase-set line needs <doc_id>\\t<ids>: " + line);
    VocabPhrase vp;
    vp.doc_id = line.substr(0, tab);
    for (const std::string& part : split_ws(line.substr(tab + 1)))
      vp.ids.push_back(static_cast<TokenId>(std::stol(part)));
    out.push_back(std::move(vp));
  }
  return out;
}

void write_resolved_config(const fs::path& out_dir, const LoadedConfig& loaded) {
  write_text_file((out_dir / "resolved_config.txt").string(), dump_config(loaded));
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;

  LoadedConfig load() const { return load_config_file(config_path, overrides); }
  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration file");
    cmd->add_option("--set", overrides, "override a config key (section.key=value)")
        ->take_all();
  }
};

// ---------------------------------------------------------------------------

int cmd_tokenizer_train(const CommonArgs& common, const std::string& corpus_path,
                        const std::string& out_path) {
  LoadedConfig loaded = common.load();
  auto docs = read_corpus_file(corpus_path);
  auto result = Tokenizer::train(docs, 256 + loaded.config.tokenizer_merges);
  if (!result.reached_target)
    std::cerr << "warning: corpus supports only "
              << result.tokenizer.vocab_size() - 256 << " merges of the requested "
              << loaded.config.tokenizer_merges << "\n";
  result.tokenizer.save(out_path);
  std::cout << "tokenizer: " << result.tokenizer.vocab_size() << " symbols ("
            << result.tokenizer.merges().size() << " merges) -> " << out_path << "\n";
  return 0;
}

int cmd_phrase_table(const std::string& corpus_path, const std::string& tokenizer_path,
                     const std::string& out_path, long min_freq, long max_len) {
  Tokenizer tok = Tokenizer::load(tokenizer_path);
  auto corpus_ids = tokenize_corpus(read_corpus_file(corpus_path), tok);
  PhraseTable table = PhraseTable::build(corpus_ids, min_freq, max_len, env_workers());
  table.save(out_path);
  std::cout << "phrase table: " << table.size() << " entries -> " << out_path << "\n";
  return 0;
}

int cmd_data_build(const CommonArgs& common, const std::string& corpus_path,
                   const std::string& tokenizer_path, const std::string& table_path,
                   const std::string& out_path, const std::string& phrases_out) {
  LoadedConfig loaded = common.load();
  Tokenizer tok = Tokenizer::load(tokenizer_path);
  auto corpus_ids = tokenize_corpus(read_corpus_file(corpus_path), tok);
  PhraseTable table;
  const PhraseTable* table_ptr = nullptr;
  if (loaded.config.mode() == SampleMode::fmm) {
    if (table_path.empty()) throw DataError("data.mode=fmm requires --table");
    table = load_phrase_table(table_path);
    table_ptr = &table;
  }
  auto samples = build_corpus_samples(corpus_ids, loaded.config, table_ptr, tok);
  write_text_file(out_path, serialize_samples(samples));
  long phrases = 0;
  for (const PhraseSample& s : samples) phrases += s.phrase_count();

  if (!phrases_out.empty()) {
    // unique gold phrases as a test-time phrase-set file (doc = sample index)
    std::unordered_set<Phrase, PhraseHash> seen;
    std::string out;
    for (std::size_t s = 0; s < samples.size(); ++s) {
      for (const Phrase& gold : samples[s].gold_phrases()) {
        if (!seen.insert(gold).second) continue;
        out += std::to_string(s + 1);
        out += '\t';
        for (std::size_t i = 0; i < gold.size(); ++i) {
          if (i) out += ' ';
          out += std::to_string(gold[i]);
        }
        out += '\n';
      }
    }
    write_text_file(phrases_out, out);
    std::cout << "gold phrase set: " << seen.size() << " phrases -> " << phrases_out
              << "\n";
  }

  std::cout << "samples: " << samples.size() << " (" << phrases << " phrase units) -> "
            << out_path << "\n";
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& corpus_path,
              const std::string& tokenizer_path, const std::string& table_path,
              const std::string& cache_path, const std::string& out_dir_str) {
  LoadedConfig loaded = common.load();
  RunConfig& cfg = loaded.config;
  fs::path out_dir(out_dir_str);
  fs::create_directories(out_dir);

  Tokenizer tok = Tokenizer::load(tokenizer_path);
  auto corpus_ids = tokenize_corpus(read_corpus_file(corpus_path), tok);

  std::vector<PhraseSample> samples;
  if (!cache_path.empty()) {
    samples = parse_samples(read_text_file(cache_path));
  } else {
    PhraseTable table;
    const PhraseTable* table_ptr = nullptr;
    if (cfg.mode() == SampleMode::fmm) {
      if (table_path.empty()) throw DataError("data.mode=fmm requires --table");
      table = load_phrase_table(table_path);
      table_ptr = &table;
    }
    samples = build_corpus_samples(corpus_ids, cfg, table_ptr, tok);
  }

  ModelConfig lm_cfg = cfg.model;
  lm_cfg.vocab_size = resolve_vocab_size(lm_cfg.vocab_size, tok);
  ModelConfig enc_cfg = cfg.encoder;
  enc_cfg.vocab_size = lm_cfg.vocab_size;
  TransformerWeights lm = TransformerWeights::init(lm_cfg, derive_seed(cfg.seed, 100));
  PhraseEncoder encoder = PhraseEncoder::init(enc_cfg, lm_cfg.d_model, cfg.projection(),
                                              derive_seed(cfg.seed, 200));

  AdamW opt(cfg.optimizer());
  {
    std::vector<std::pair<std::string, Tensor>> named;
    for (auto& [name, t] : lm.named_parameters()) named.emplace_back("lm." + name, t);
    for (auto& [name, t] : encoder.named_parameters()) named.emplace_back(name, t);
    opt.register_params(named);
  }

  NegativeStrategySet strategies = cfg.strategies();
  CorpusIndex corpus_index(corpus_ids);
  PreBatchBuffer pre_batch(cfg.pre_batch_depth);
  TransformerWeights snapshot = lm.detached_copy();

  const long logical_batch = cfg.batch * cfg.accum;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  long epoch = 0;
  auto next_batch = [&]() {
    std::vector<PhraseSample> batch;
    while (static_cast<long>(batch.size()) < logical_batch) {
      if (cursor >= order.size()) {
        order.resize(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 5000 + epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
        ++epoch;
      }
      batch.push_back(samples[order[cursor++]]);
    }
    return batch;
  };

  std::string log = "step\tlr\ttotal\tmixed_nll\ttoken_nll\talignment_kl\tgrad_norm\n";
  long consecutive_faults = 0;
  for (long step = 0; step < cfg.total_steps; ++step) {
    if (strategies.generation && cfg.snapshot_interval > 0 &&
        step % cfg.snapshot_interval == 0)
      snapshot = lm.detached_copy();

    std::vector<PhraseSample> batch = next_batch();
    auto pools = assemble_pools(batch, strategies, &pre_batch,
                                strategies.corpus_retrieval ? &corpus_index : nullptr,
                                strategies.generation ? &snapshot : nullptr,
                                cfg.negative_limits());
    double lr_now = opt.learning_rate(opt.step_count());
    TrainStepResult r = train_step(batch, pools, lm, encoder, opt);
    pre_batch.push_batch(batch);

    if (r.numeric_fault) {
      ++consecutive_faults;
      std::cerr << "numeric fault at step " << step << " (total "
                << opt.fault_count() << ")\n";
      if (consecutive_faults > 5)
        throw NumericError("training aborted: repeated non-finite losses");
      continue;
    }
    consecutive_faults = 0;

    char line[256];
    std::snprintf(line, sizeof line, "%ld\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.6g\n", step,
                  lr_now, r.losses.total, r.losses.mixed_nll, r.losses.token_nll,
                  r.losses.alignment_kl, r.grad_norm);
    log += line;
    if (step % 50 == 0 || step + 1 == cfg.total_steps)
      std::cout << "step " << step << " total " << r.losses.total << " (mixed "
                << r.losses.mixed_nll << ", token " << r.losses.token_nll << ", kl "
                << r.losses.alignment_kl << ")\n";
  }

  write_text_file((out_dir / "loss_log.tsv").string(), log);
  save_checkpoint((out_dir / "checkpoint.bin").string(), lm, encoder, opt,
                  tokenizer_path);
  write_resolved_config(out_dir, loaded);
  std::cout << "checkpoint -> " << (out_dir / "checkpoint.bin").string() << "\n";
  return 0;
}

struct LoadedModel {
  Checkpoint ck;
  Tokenizer tok;
};

LoadedModel load_model(const std::string& checkpoint_path, const std::string& tokenizer_path) {
  LoadedModel m;
  m.ck = load_checkpoint(checkpoint_path);
  std::string tok_path = tokenizer_path.empty() ? m.ck.tokenizer_ref : tokenizer_path;
  m.tok = Tokenizer::load(tok_path);
  return m;
}

int cmd_generate(const CommonArgs& common, const std::string& checkpoint_path,
                 const std::string& tokenizer_path, const std::string& prefix_path,
                 const std::string& phrases_spec, const std::string& retrieve_corpus,
                 bool extend_schedule, long bench_reps, const std::string& out_dir_str) {
  LoadedConfig loaded = common.load();
  RunConfig& cfg = loaded.config;
  fs::path out_dir(out_dir_str);
  fs::create_directories(out_dir);

  LoadedModel m = load_model(checkpoint_path, tokenizer_path);
  PrefixSet prefixes = load_prefixes(prefix_path, m.tok, cfg.prefix_tokens);

  DecodeOptions opts;
  opts.mode = cfg.decode_kind();
  opts.nucleus_p = cfg.nucleus_p;
  opts.budget = cfg.budget;
  opts.seed = cfg.seed;

  // phrase sources: a phrase-set file, per-prefix retrieval, or none
  std::vector<VocabPhrase> shared_phrases;
  std::optional<Bm25Index> index;
  if (!retrieve_corpus.empty()) {
    index.emplace(read_corpus_file(retrieve_corpus), m.tok);
  } else if (phrases_spec != "none" && !phrases_spec.empty()) {
    shared_phrases = load_phrase_set(phrases_spec);
    if (static_cast<long>(shared_phrases.size()) > cfg.phrase_cap)
      shared_phrases.resize(cfg.phrase_cap);
  }

  auto vocab_for_prefix = [&](std::size_t i) {
    DynamicVocab vocab(m.ck.lm_config.vocab_size, m.ck.lm_config.d_model);
    std::vector<VocabPhrase> additions;
    if (index) {
      auto top = index->retrieve_topk(prefixes.source_lines[i], m.tok, cfg.retrieve_k);
      std::vector<std::vector<TokenId>> doc_tokens;
      std::vector<std::string> doc_ids;
      for (long d : top) {
        doc_tokens.push_back(index->doc_tokens(d));
        doc_ids.push_back(index->doc(d).doc_id);
      }
      for (CandidatePhrase& c : harvest_phrases(doc_tokens, doc_ids, cfg.phrase_cap))
        additions.push_back({std::move(c.ids), c.doc_id});
    } else {
      additions = shared_phrases;
    }
    return std::pair{std::move(vocab), std::move(additions)};
  };

  std::string generations;
  double total_ms = 0.0;
  long total_steps_count = 0, total_phrase_steps = 0;
  for (std::size_t i = 0; i < prefixes.ids.size(); ++i) {
    auto [vocab, additions] = vocab_for_prefix(i);
    ExtendSchedule schedule;
    GenerationTrace trace;
    auto begin = std::chrono::steady_clock::now();
    if (extend_schedule) {
      schedule.pending = additions;
      schedule.rate = cfg.extend_rate;
      schedule.interval = cfg.extend_interval;
      trace = decode(prefixes.ids[i], m.ck.lm, vocab, m.tok, opts, &schedule,
                     &m.ck.encoder);
    } else {
      vocab.extend(additions, m.ck.encoder, env_workers());
      trace = decode(prefixes.ids[i], m.ck.lm, vocab, m.tok, opts);
    }
    auto end = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(end - begin).count();
    total_steps_count += trace.step_count();
    total_phrase_steps += trace.phrase_steps();

    char name[32];
    std::snprintf(name, sizeof name, "trace_%04zu.txt", i);
    write_text_file((out_dir / name).string(), serialize_trace(prefixes.ids[i], trace));
    generations += escape_line(trace.text) + "\n";
  }
  write_text_file((out_dir / "generations.txt").string(), generations);
  write_resolved_config(out_dir, loaded);

  const double n = static_cast<double>(prefixes.ids.size());
  std::cout << "generated " << prefixes.ids.size() << " continuations: mean steps "
            << total_steps_count / n << ", phrase steps " << total_phrase_steps / n
            << ", mean wall ms " << total_ms / n << "\n";

  if (bench_reps > 0) {
    // timed bench over the same prefixes and a shared vocabulary
    DynamicVocab vocab(m.ck.lm_config.vocab_size, m.ck.lm_config.d_model);
    if (!index && !shared_phrases.empty()) vocab.extend(shared_phrases, m.ck.encoder);
    LatencyReport rep =
        latency_bench(m.ck.lm, vocab, m.tok, prefixes.ids, opts, bench_reps);
    char line[128];
    std::snprintf(line, sizeof line, "mean_ms\t%.6g\nmean_steps\t%.6g\ngenerations\t%ld\n",
                  rep.mean_ms, rep.mean_steps, rep.generations);
    write_text_file((out_dir / "latency.txt").string(), line);
    std::cout << "latency bench: mean " << rep.mean_ms << " ms over "
              << rep.generations << " generations\n";
  }
  return 0;
}

int cmd_cite(const CommonArgs& common, const std::string& checkpoint_path,
             const std::string& tokenizer_path, const std::string& questions_path,
             const std::string& docs_path, const std::string& out_dir_str) {
  LoadedConfig loaded = common.load();
  RunConfig& cfg = loaded.config;
  fs::path out_dir(out_dir_str);
  fs::create_directories(out_dir);

  LoadedModel m = load_model(checkpoint_path, tokenizer_path);
  auto corpus = read_corpus_file(docs_path);
  std::unordered_map<std::string, const Document*> by_id;
  for (const Document& d : corpus) by_id[d.doc_id] = &d;

  DecodeOptions opts;
  opts.mode = cfg.decode_kind();
  opts.nucleus_p = cfg.nucleus_p;
  opts.budget = cfg.budget;
  opts.seed = cfg.seed;

  CitationScores totals;
  std::string answers;
  long q_index = 0;
  for (const std::string& line : split_lines(read_text_file(questions_path))) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("questions file needs <question>\\t<doc,doc,...>: " + line);
    std::string question = line.substr(0, tab);
    std::vector<Document> docs;
    std::string id;
    auto flush_id = [&]() {
      if (id.empty()) return;
      auto it = by_id.find(id);
      if (it == by_id.end()) throw DataError("unknown doc_id in questions file: " + id);
      docs.push_back(*it->second);
      id.clear();
    };
    for (char c : line.substr(tab + 1)) {
      if (c == ',') flush_id();
      else if (!std::isspace(static_cast<unsigned char>(c))) id += c;
    }
    flush_id();
    if (docs.empty()) throw DataError("question without documents: " + question);

    CitationResult result = cite_decode(question, docs, m.ck.lm, m.ck.encoder, m.tok,
                                        cfg.phrase_cap, opts);
    answers += escape_line(result.answer) + "\n";
    std::vector<std::vector<TokenId>> docs_by_label;
    for (const Document& d : docs) docs_by_label.push_back(m.tok.encode(d.text));
    CitationScores s = citation_metrics({result.trace}, docs_by_label, m.tok);
    totals.total_markers += s.total_markers;
    totals.valid_markers += s.valid_markers;
    totals.total_sentences += s.total_sentences;
    totals.cited_sentences += s.cited_sentences;

    char name[32];
    std::snprintf(name, sizeof name, "trace_q%03ld.txt", q_index++);
    write_text_file((out_dir / name).string(),
                    serialize_trace(m.tok.encode(question), result.trace));
  }

  totals.precision_pct =
      totals.total_markers ? 100.0 * totals.valid_markers / totals.total_markers : 0.0;
  totals.recall_pct =
      totals.total_sentences ? 100.0 * totals.cited_sentences / totals.total_sentences
                             : 0.0;

  write_text_file((out_dir / "answers.txt").string(), answers);
  char metrics[160];
  std::snprintf(metrics, sizeof metrics,
                "precision\t%.4g\nrecall\t%.4g\nmarkers\t%ld\nvalid\t%ld\nsentences\t%ld\n",
                totals.precision_pct, totals.recall_pct, totals.total_markers,
                totals.valid_markers, totals.total_sentences);
  write_text_file((out_dir / "citations.tsv").string(), metrics);
  write_resolved_config(out_dir, loaded);
  std::cout << "citations: precision " << totals.precision_pct << "%, recall "
            << totals.recall_pct << "% over " << q_index << " questions\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& tokenizer_path,
             const std::vector<std::string>& trace_paths, const std::string& latency_path,
             const std::string& label, const std::string& out_path) {
  if (trace_paths.empty()) throw DataError("eval: no trace files given");
  std::vector<TraceFile> traces;
  for (const std::string& p : trace_paths) traces.push_back(parse_trace(read_text_file(p)));

  // repetition over the concatenation is dominated by long generations, so
  // average per-generation percentages instead
  double r2 = 0, r3 = 0, r4 = 0, nsl_sum = 0;
  double bytes_sum = 0;
  long bytes_n = 0;
  for (const TraceFile& t : traces) {
    std::vector<TokenId> ids = t.trace.covered_ids();
    r2 += rep_n(ids, 2);
    r3 += rep_n(ids, 3);
    r4 += rep_n(ids, 4);
    auto [steps, bytes] = nsl_and_bytes(t.trace);
    nsl_sum += static_cast<double>(steps);
    if (bytes) {
      bytes_sum += *bytes;
      ++bytes_n;
    }
  }
  const double n = static_cast<double>(traces.size());

  ReportRow row;
  row.label = label;
  row.metrics.rep_2 = r2 / n;
  row.metrics.rep_3 = r3 / n;
  row.metrics.rep_4 = r4 / n;
  row.metrics.diversity = diversity(r2 / n, r3 / n, r4 / n);
  row.metrics.nsl = nsl_sum / n;
  if (bytes_n > 0) row.metrics.bytes_per_token = bytes_sum / bytes_n;

  if (!checkpoint_path.empty()) {
    LoadedModel m = load_model(checkpoint_path, tokenizer_path);
    std::vector<ScoredText> texts;
    for (const TraceFile& t : traces) texts.push_back({t.prefix, t.trace.covered_ids()});
    row.metrics.ppl = perplexity(texts, m.ck.lm);
  }
  if (!latency_path.empty()) {
    for (const std::string& line : split_lines(read_text_file(latency_path)))
      if (line.rfind("mean_ms\t", 0) == 0) row.metrics.latency_ms = std::stod(line.substr(8));
  }

  std::string report = serialize_report({row});
  if (!out_path.empty()) write_text_file(out_path, report);
  std::cout << report;
  return 0;
}

int cmd_compare(const std::vector<std::string>& report_paths, const std::string& out_path) {
  if (report_paths.size() < 2) throw DataError("compare: need at least two reports");
  std::vector<ReportRow> rows;
  for (const std::string& p : report_paths)
    for (ReportRow& row : parse_report(read_text_file(p))) rows.push_back(std::move(row));
  std::string merged = serialize_report(rows);
  if (!out_path.empty()) write_text_file(out_path, merged);

  // aligned view for the terminal
  auto cells_of = [](const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      cells.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    return cells;
  };
  std::vector<std::vector<std::string>> grid;
  for (const std::string& line : split_lines(merged))
    if (!line.empty()) grid.push_back(cells_of(line));
  std::vector<std::size_t> width(grid[0].size(), 0);
  for (const auto& row : grid)
    for (std::size_t c = 0; c < row.size(); ++c)
      width[c] = std::max(width[c], row[c].size());
  for (const auto& row : grid) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::cout << row[c];
      if (c + 1 < row.size())
        std::cout << std::string(width[c] - row[c].size() + 2, ' ');
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_cost(double n, double vocab, double phrases, double d_model, double layers,
             double encoder_bytes, double lm_bytes) {
  CostModelInput in;
  in.n = n;
  in.vocab = vocab;
  in.phrases = phrases;
  in.d_model = d_model;
  in.layers = layers;
  in.encoder_bytes = encoder_bytes;
  in.lm_bytes = lm_bytes;
  CostModelOutput out = cost_model(in);
  std::printf("flops_forward\t%.6g\n", out.flops_forward);
  std::printf("extra_compute_fraction\t%.6g\n", out.extra_compute_fraction);
  std::printf("extra_memory_fraction\t%.6g\n", out.extra_memory_fraction);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"language modeling with a dynamic phrase vocabulary"};
  app.require_subcommand(1);

  // tokenizer-train
  auto* tok_cmd = app.add_subcommand("tokenizer-train", "train the byte-level BPE tokenizer");
  CommonArgs tok_common;
  tok_common.attach(tok_cmd);
  std::string tok_corpus, tok_out;
  tok_cmd->add_option("--corpus", tok_corpus, "training corpus")->required();
  tok_cmd->add_option("--out", tok_out, "tokenizer output file")->required();

  // phrase-table
  auto* table_cmd = app.add_subcommand("phrase-table", "build the frequent-n-gram table");
  std::string table_corpus, table_tok, table_out;
  long table_min_freq = 3, table_max_len = 8;
  table_cmd->add_option("--corpus", table_corpus)->required();
  table_cmd->add_option("--tokenizer", table_tok)->required();
  table_cmd->add_option("--out", table_out)->required();
  table_cmd->add_option("--min-freq", table_min_freq, "inclusion threshold");
  table_cmd->add_option("--max-len", table_max_len, "max tokens per entry");

  // data-build
  auto* data_cmd = app.add_subcommand("data-build", "build the training sample cache");
  CommonArgs data_common;
  data_common.attach(data_cmd);
  std::string data_corpus, data_tok, data_table, data_out, data_phrases_out;
  data_cmd->add_option("--corpus", data_corpus)->required();
  data_cmd->add_option("--tokenizer", data_tok)->required();
  data_cmd->add_option("--table", data_table, "phrase table (fmm mode)");
  data_cmd->add_option("--out", data_out)->required();
  data_cmd->add_option("--phrases-out", data_phrases_out,
                       "also write the unique gold phrases as a phrase-set file");

  // train
  auto* train_cmd = app.add_subcommand("train", "train the LM and phrase encoder jointly");
  CommonArgs train_common;
  train_common.attach(train_cmd);
  std::string train_corpus, train_tok, train_table, train_cache, train_out;
  train_cmd->add_option("--corpus", train_corpus)->required();
  train_cmd->add_option("--tokenizer", train_tok)->required();
  train_cmd->add_option("--table", train_table, "phrase table (fmm mode)");
  train_cmd->add_option("--cache", train_cache, "pre-built sample cache");
  train_cmd->add_option("--out-dir", train_out)->required();

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "decode continuations for prefixes");
  CommonArgs gen_common;
  gen_common.attach(gen_cmd);
  std::string gen_ckpt, gen_tok, gen_prefixes, gen_phrases = "none", gen_retrieve,
                                 gen_out;
  bool gen_extend = false;
  long gen_bench = 0;
  gen_cmd->add_option("--checkpoint", gen_ckpt)->required();
  gen_cmd->add_option("--tokenizer", gen_tok, "override the checkpoint's tokenizer path");
  gen_cmd->add_option("--prefix-file", gen_prefixes)->required();
  gen_cmd->add_option("--phrases", gen_phrases, "phrase-set file, or 'none'");
  gen_cmd->add_option("--retrieve", gen_retrieve, "retrieval corpus for per-prefix phrases");
  gen_cmd->add_flag("--extend-schedule", gen_extend,
                    "activate phrases gradually while decoding");
  gen_cmd->add_option("--bench-reps", gen_bench, "timed repetitions for the latency bench");
  gen_cmd->add_option("--out-dir", gen_out)->required();

  // cite
  auto* cite_cmd = app.add_subcommand("cite", "answer questions with inline citations");
  CommonArgs cite_common;
  cite_common.attach(cite_cmd);
  std::string cite_ckpt, cite_tok, cite_questions, cite_docs, cite_out;
  cite_cmd->add_option("--checkpoint", cite_ckpt)->required();
  cite_cmd->add_option("--tokenizer", cite_tok);
  cite_cmd->add_option("--questions", cite_questions)->required();
  cite_cmd->add_option("--docs", cite_docs)->required();
  cite_cmd->add_option("--out-dir", cite_out)->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score trace files into a metric report");
  std::string eval_ckpt, eval_tok, eval_latency, eval_label = "run", eval_out;
  std::vector<std::string> eval_traces;
  eval_cmd->add_option("--trace", eval_traces, "trace files")->required()->take_all();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "scorer for perplexity");
  eval_cmd->add_option("--tokenizer", eval_tok);
  eval_cmd->add_option("--latency", eval_latency, "latency.txt from generate --bench-reps");
  eval_cmd->add_option("--label", eval_label);
  eval_cmd->add_option("--out", eval_out, "report file to write");

  // compare
  auto* cmp_cmd = app.add_subcommand("compare", "merge metric reports side by side");
  std::vector<std::string> cmp_reports;
  std::string cmp_out;
  cmp_cmd->add_option("reports", cmp_reports, "two or more report files")->required();
  cmp_cmd->add_option("--out", cmp_out);

  // cost
  auto* cost_cmd = app.add_subcommand("cost", "analytic flops and memory overhead");
  double cost_n = 160, cost_v = 32000, cost_p = 0, cost_d = 2048, cost_l = 22;
  double cost_enc = 0, cost_lm = 0;
  cost_cmd->add_option("--n", cost_n, "sequence length");
  cost_cmd->add_option("--vocab", cost_v, "static vocabulary size");
  cost_cmd->add_option("--p", cost_p, "phrase count");
  cost_cmd->add_option("--d-model", cost_d);
  cost_cmd->add_option("--layers", cost_l);
  cost_cmd->add_option("--encoder-bytes", cost_enc);
  cost_cmd->add_option("--lm-bytes", cost_lm);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (tok_cmd->parsed()) return cmd_tokenizer_train(tok_common, tok_corpus, tok_out);
    if (table_cmd->parsed())
      return cmd_phrase_table(table_corpus, table_tok, table_out, table_min_freq,
                              table_max_len);
    if (data_cmd->parsed())
      return cmd_data_build(data_common, data_corpus, data_tok, data_table, data_out,
                            data_phrases_out);
    if (train_cmd->parsed())
      return cmd_train(train_common, train_corpus, train_tok, train_table, train_cache,
                       train_out);
    if (gen_cmd->parsed())
      return cmd_generate(gen_common, gen_ckpt, gen_tok, gen_prefixes, gen_phrases,
                          gen_retrieve, gen_extend, gen_bench, gen_out);
    if (cite_cmd->parsed())
      return cmd_cite(cite_common, cite_ckpt, cite_tok, cite_questions, cite_docs,
                      cite_out);
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_tok, eval_traces, eval_latency, eval_label,
                      eval_out);
    if (cmp_cmd->parsed()) return cmd_compare(cmp_reports, cmp_out);
    if (cost_cmd->parsed())
      return cmd_cost(cost_n, cost_v, cost_p, cost_d, cost_l, cost_enc, cost_lm);
  } catch (const NumericError& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::length_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
