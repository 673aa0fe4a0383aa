// slm: train, decode and inspect spiral language models.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "slm/config.hpp"
#include "slm/corpus.hpp"
#include "slm/error.hpp"
#include "slm/inference.hpp"
#include "slm/model.hpp"
#include "slm/ordering.hpp"
#include "slm/training.hpp"

#ifndef SLM_DEFAULT_STOPWORDS
#define SLM_DEFAULT_STOPWORDS ""
#endif

namespace fs = std::filesystem;
using namespace slm;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// Flags shared by several subcommands; unset values leave the config alone.
struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::size_t> steps;
  std::optional<double> stage_boundary;
  std::optional<std::size_t> top_k;
  std::optional<double> data_fraction;
  std::optional<std::size_t> beam;
  std::optional<double> alpha;
  std::optional<std::size_t> threads;
  std::optional<std::string> checkpoint;
  std::optional<std::string> metrics_out;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "key = value config file");
  app->add_option("--set", f.sets, "override one config key (key=value)");
  app->add_option("--seed", f.seed, "random seed (falls back to SLM_SEED)");
  app->add_option("--threads", f.threads, "worker threads for decoding");
  app->add_option("--checkpoint", f.checkpoint, "model checkpoint path");
}

RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  apply_environment(cfg);
  if (!f.config.empty()) apply_settings(cfg, read_config_file(f.config));
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  auto put = [&](const char* key, const auto& opt) {
    if (!opt) return;
    std::ostringstream v;
    v.precision(17);
    v << *opt;
    apply_setting(cfg, key, v.str());
  };
  put("seed", f.seed);
  put("strategy", f.strategy);
  put("steps", f.steps);
  put("stage_boundary", f.stage_boundary);
  put("top_k", f.top_k);
  put("data_fraction", f.data_fraction);
  put("beam", f.beam);
  put("alpha", f.alpha);
  put("threads", f.threads);
  put("checkpoint", f.checkpoint);
  put("metrics_out", f.metrics_out);
  finalize(cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

ParallelCorpus read_prefix(const std::string& prefix) {
  return read_parallel(prefix + ".src", prefix + ".tgt");
}

void write_stopwords(const fs::path& path, const StopWords& words) {
  std::vector<std::string> sorted(words.begin(), words.end());
  std::sort(sorted.begin(), sorted.end());
  std::string text;
  for (const auto& w : sorted) text += w + "\n";
  write_text(path, text);
}

int cmd_generate(const Flags& f, const std::string& out_dir) {
  const RunConfig cfg = resolve(f);
  const TaskCorpus corpus = generate(cfg.task);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_parallel(corpus.train, dir / "train.src", dir / "train.tgt");
  write_parallel(corpus.dev, dir / "dev.src", dir / "dev.tgt");
  write_parallel(corpus.test, dir / "test.src", dir / "test.tgt");
  write_stopwords(dir / "stopwords.txt", corpus.stop_words);
  std::string lex;
  for (const auto& [s, t] : corpus.lexicon) lex += s + "\t" + t + "\n";
  write_text(dir / "lexicon.tsv", lex);
  std::printf("wrote %zu/%zu/%zu pairs to %s\n", corpus.train.size(), corpus.dev.size(),
              corpus.test.size(), out_dir.c_str());
  return kOk;
}

int cmd_train(const Flags& f) {
  const RunConfig cfg = resolve(f);
  ParallelCorpus train_corpus;
  ParallelCorpus dev_corpus;
  StopWords stop_words;
  if (cfg.train_data.empty()) {
    TaskCorpus task = generate(cfg.task);
    train_corpus = std::move(task.train);
    dev_corpus = std::move(task.dev);
    stop_words = std::move(task.stop_words);
  } else {
    train_corpus = read_prefix(cfg.train_data);
    if (!cfg.dev_data.empty()) dev_corpus = read_prefix(cfg.dev_data);
  }
  std::string stop_path = cfg.stopwords;
  if (stop_path.empty() && !cfg.train_data.empty()) stop_path = SLM_DEFAULT_STOPWORDS;
  if (!stop_path.empty()) {
    for (auto& w : load_stopwords(stop_path)) stop_words.insert(w);
  }

  std::vector<MetricsRow> rows;
  const auto on_row = [&](const MetricsRow& row) {
    std::fprintf(stderr, "step %zu %s loss %.4f dev_bleu %.2f\n", row.step, row.phase.c_str(),
                 row.train_loss, row.dev_bleu);
    rows.push_back(row);
    if (!cfg.metrics_out.empty()) write_text(cfg.metrics_out, metrics_csv(rows));
  };
  const TrainResult result =
      train(train_corpus, dev_corpus, stop_words, cfg.model, cfg.train, on_row);
  save_bundle(cfg.checkpoint, result.bundle);
  std::printf("saved %s\n", cfg.checkpoint.c_str());
  return kOk;
}

struct DecodeFlags {
  std::string input;
  std::string output;
  std::string start;
  bool start_prob_one = false;
  bool emit_order = false;
  bool emit_score = false;
  bool l2r = false;
};

int cmd_decode(const Flags& f, const DecodeFlags& d) {
  const RunConfig cfg = resolve(f);
  const ModelBundle bundle = load_bundle(cfg.checkpoint);
  BeamConfig beam = beam_for(bundle, cfg.beam);
  if (d.l2r) beam.l2r = true;
  beam.forced_start_prob_one = d.start_prob_one;

  std::string forced_error;
  const Sentence forced = tokenize(d.start);
  for (const auto& t : forced) {
    if (auto id = bundle.target_vocab.find(t); id && !is_special(*id)) {
      beam.forced_start.push_back(*id);
    } else {
      forced_error = "forced start token '" + t + "' is not in the target vocabulary";
    }
  }
  beam.validate();

  const auto lines = read_lines(d.input);
  const auto stop_mask = make_stop_mask(bundle.target_vocab, bundle.stop_words);
  const auto decoded = decode_all(
      lines.size(),
      [&](std::size_t i) -> std::unique_ptr<SourceScorer> {
        if (!forced_error.empty()) throw DataError(forced_error);
        const auto source = bundle.source_vocab.encode(tokenize(lines[i]));
        if (source.empty()) throw DataError("empty source line");
        return std::make_unique<ModelScorer>(bundle.model, source);
      },
      beam, stop_mask, cfg.threads);

  const auto name = [&](TokenId id) { return bundle.target_vocab.token(id); };
  std::string out;
  for (const auto& rec : decoded) {
    if (!rec.result) {
      out += "# error: " + rec.error + "\n";
      continue;
    }
    out += detokenize(bundle.target_vocab.decode(rec.result->tokens)) + "\n";
    if (d.emit_order) out += "# order: " + format_trace(rec.result->trace, name) + "\n";
    if (d.emit_score) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "# score: %.6f", rec.result->score);
      out += buf;
      out += rec.result->truncated ? " truncated\n" : "\n";
    }
  }
  if (d.output.empty()) {
    std::fwrite(out.data(), 1, out.size(), stdout);
  } else {
    write_text(d.output, out);
  }
  return kOk;
}

struct EvalFlags {
  std::string hyp;
  std::string ref;
  std::string data;
  std::string report;
};

int cmd_evaluate(const Flags& f, const EvalFlags& e) {
  std::vector<Sentence> hyps;
  std::vector<Sentence> refs;
  if (!e.hyp.empty() || !e.ref.empty()) {
    if (e.hyp.empty() || e.ref.empty()) throw ConfigError("--hyp and --ref go together");
    for (const auto& l : read_lines(e.hyp)) hyps.push_back(tokenize(l));
    for (const auto& l : read_lines(e.ref)) refs.push_back(tokenize(l));
  } else {
    const RunConfig cfg = resolve(f);
    const std::string prefix = e.data.empty() ? cfg.dev_data : e.data;
    if (prefix.empty()) throw ConfigError("evaluate needs --input <prefix> or --hyp/--ref");
    const ModelBundle bundle = load_bundle(cfg.checkpoint);
    const ParallelCorpus corpus = read_prefix(prefix);
    const BeamConfig beam = beam_for(bundle, cfg.beam);
    const auto stop_mask = make_stop_mask(bundle.target_vocab, bundle.stop_words);
    const auto decoded = decode_all(
        corpus.size(),
        [&](std::size_t i) -> std::unique_ptr<SourceScorer> {
          return std::make_unique<ModelScorer>(bundle.model,
                                               bundle.source_vocab.encode(corpus[i].source));
        },
        beam, stop_mask, cfg.threads);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      hyps.push_back(decoded[i].result ? bundle.target_vocab.decode(decoded[i].result->tokens)
                                       : Sentence{});
      refs.push_back(corpus[i].target);
    }
  }
  const double score = 100.0 * bleu(hyps, refs);
  std::printf("BLEU = %.2f\n", score);
  if (!e.report.empty()) {
    std::string text = "index,exact,sentence_bleu,hypothesis\n";
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      double sb = 0.0;
      if (!hyps[i].empty()) {
        sb = 100.0 * bleu(std::span<const Sentence>(&hyps[i], 1),
                          std::span<const Sentence>(&refs[i], 1));
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "%zu,%d,%.2f,", i, hyps[i] == refs[i] ? 1 : 0, sb);
      text += buf;
      text += "\"" + detokenize(hyps[i]) + "\"\n";
    }
    write_text(e.report, text);
  }
  return kOk;
}

int cmd_orderings(const Flags& f, int length, bool enumerate, std::size_t sample) {
  const RunConfig cfg = resolve(f);
  if (length < 0) throw ConfigError("length must be >= 0");
  std::printf("%llu\n", static_cast<unsigned long long>(count_orderings(length)));
  std::vector<TokenId> tokens;
  for (int i = 0; i < length; ++i) tokens.push_back(kFirstRealId + i);
  const auto name = [](TokenId id) -> std::string {
    if (is_special(id)) return id == kEolId ? kEolToken : id == kEorId ? kEorToken : kPadToken;
    return "x" + std::to_string(id - kFirstRealId + 1);
  };
  if (enumerate) {
    for (const auto& z : enumerate_orderings(length)) {
      std::printf("%s\n", format_trace(reform(tokens, z), name).c_str());
    }
  }
  if (sample > 0) {
    Rng rng = derive_rng(cfg.seed, 0x5a3e);
    for (std::size_t i = 0; i < sample; ++i) {
      const auto z = sample_uniform_ordering(length, rng);
      std::printf("%s\n", format_trace(reform(tokens, z), name).c_str());
    }
  }
  return kOk;
}

int cmd_attn_dump(const Flags& f, const std::string& input, const std::string& output,
                  double threshold) {
  const RunConfig cfg = resolve(f);
  const ModelBundle bundle = load_bundle(cfg.checkpoint);
  std::string text = "src_token,tgt_vocab_token,alpha\n";
  const std::size_t v = bundle.target_vocab.size();
  for (const auto& line : read_lines(input)) {
    const Sentence src = tokenize(line);
    if (src.empty()) continue;
    ad::NoGradGuard no_grad;
    const auto memory = bundle.model.encode(bundle.source_vocab.encode(src));
    const auto pred = bundle.model.start_probs(bundle.model.start_potentials(memory.states));
    for (std::size_t t = 0; t < src.size(); ++t) {
      for (std::size_t k = kFirstRealId; k < v; ++k) {
        const double a = pred.alpha[t * v + k];
        if (a < threshold) continue;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", a);
        text += src[t] + "," + bundle.target_vocab.token(static_cast<TokenId>(k)) + "," + buf + "\n";
      }
    }
  }
  if (output.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
  } else {
    write_text(output, text);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiral language modeling toolkit"};
  app.require_subcommand(1);
  Flags flags;

  std::string gen_out = "data";
  auto* gen = app.add_subcommand("generate", "write a synthetic parallel task");
  add_common(gen, flags);
  gen->add_option("--output", gen_out, "output directory");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, flags);
  tr->add_option("--strategy", flags.strategy, "l2r, slm-random or slm-twostage");
  tr->add_option("--steps", flags.steps, "optimizer steps");
  tr->add_option("--stage-boundary", flags.stage_boundary, "fraction of steps before stage 2");
  tr->add_option("--top-k", flags.top_k, "start tokens fixed in stage 2");
  tr->add_option("--data-fraction", flags.data_fraction, "fraction of training pairs used");
  tr->add_option("--metrics-out", flags.metrics_out, "metrics CSV path");

  DecodeFlags dflags;
  auto* dec = app.add_subcommand("decode", "decode source sentences");
  add_common(dec, flags);
  dec->add_option("--input", dflags.input, "source file, one sentence per line")->required();
  dec->add_option("--output", dflags.output, "output file (default stdout)");
  dec->add_option("--beam", flags.beam, "beam size");
  dec->add_option("--alpha", flags.alpha, "length penalty exponent");
  dec->add_option("--start", dflags.start, "forced start tokens");
  dec->add_flag("--start-prob-one", dflags.start_prob_one, "score the forced start as certain");
  dec->add_flag("--emit-order", dflags.emit_order, "print the generation order");
  dec->add_flag("--emit-score", dflags.emit_score, "print the penalized score");
  dec->add_flag("--l2r", dflags.l2r, "decode left to right from [EOL]");

  EvalFlags eflags;
  auto* ev = app.add_subcommand("evaluate", "corpus BLEU");
  add_common(ev, flags);
  ev->add_option("--input", eflags.data, "corpus prefix (<prefix>.src, <prefix>.tgt)");
  ev->add_option("--hyp", eflags.hyp, "hypothesis file");
  ev->add_option("--ref", eflags.ref, "reference file");
  ev->add_option("--output", eflags.report, "per-sentence report CSV");
  ev->add_option("--beam", flags.beam, "beam size");
  ev->add_option("--alpha", flags.alpha, "length penalty exponent");

  int length = 0;
  bool enumerate = false;
  std::size_t sample = 0;
  auto* ord = app.add_subcommand("orderings", "count, list or sample spiral orderings");
  add_common(ord, flags);
  ord->add_option("length", length, "sentence length T")->required();
  ord->add_flag("--enumerate", enumerate, "list every ordering");
  ord->add_option("--sample", sample, "print this many uniform samples");

  std::string attn_in;
  std::string attn_out;
  double threshold = 0.0;
  auto* attn = app.add_subcommand("attn-dump", "start-head attention map CSV");
  add_common(attn, flags);
  attn->add_option("--input", attn_in, "source file")->required();
  attn->add_option("--output", attn_out, "CSV path (default stdout)");
  attn->add_option("--threshold", threshold, "minimum alpha to print");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(flags, gen_out);
    if (tr->parsed()) return cmd_train(flags);
    if (dec->parsed()) return cmd_decode(flags, dflags);
    if (ev->parsed()) return cmd_evaluate(flags, eflags);
    if (ord->parsed()) return cmd_orderings(flags, length, enumerate, sample);
    if (attn->parsed()) return cmd_attn_dump(flags, attn_in, attn_out, threshold);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const PreconditionError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kOther;
  }
  return kOther;
}
