// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli_runner.hpp"
#include "slm/corpus.hpp"
#include "slm/error.hpp"
#include "slm/inference.hpp"
#include "slm/model.hpp"
#include "slm/ordering.hpp"
#include "slm/random.hpp"
#include "slm/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace slm;
using testing::run_cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

const fs::path kWork = SLM_ACCEPTANCE_WORK;
const fs::path kConfigs = SLM_ACCEPTANCE_CONFIGS;
constexpr std::uint64_t kSeed = 11;

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Generates a task and trains one model through the CLI.
struct TrainedRun {
  fs::path checkpoint;
  fs::path metrics;
  bool ok = false;
  double seconds = 0.0;
};

fs::path task_dir(const std::string& task) { return kWork / task; }

bool ensure_task(const std::string& task) {
  if (fs::exists(task_dir(task) / "train.src")) return true;
  const auto r = run_cli("generate --config " + q(kConfigs / (task + ".cfg")) + " --output " +
                         q(task_dir(task)) + " --seed " + std::to_string(kSeed));
  return r.exit_code == 0;
}

TrainedRun train_run(const std::string& task, const std::string& strategy, double fraction,
                     const std::string& extra = "") {
  TrainedRun run;
  const std::string tag = task + "-" + strategy + "-" + fmt("%.2f", fraction);
  run.checkpoint = kWork / (tag + ".slmc");
  run.metrics = kWork / (tag + ".csv");
  if (!ensure_task(task)) return run;
  const fs::path dir = task_dir(task);
  const std::string stop = task == "lexicon" ? q(dir / "stopwords.txt") : std::string();
  const auto t0 = Clock::now();
  const auto r = run_cli("train --config " + q(kConfigs / (task + ".cfg")) + " --seed " +
                         std::to_string(kSeed) + " --strategy " + strategy +
                         " --data-fraction " + fmt("%.2f", fraction) +
                         " --set train_data=" + q(dir / "train") + " --set dev_data=" +
                         q(dir / "dev") + " --set stopwords=" + stop + " --checkpoint " +
                         q(run.checkpoint) + " --metrics-out " + q(run.metrics) + " " + extra);
  run.seconds = seconds_since(t0);
  run.ok = r.exit_code == 0;
  return run;
}

// Corpus BLEU (0..100) and exact-match rate of a checkpoint on a split.
struct Score {
  bool ok = false;
  double bleu = 0.0;
  double exact = 0.0;
};

Score evaluate(const fs::path& checkpoint, const fs::path& prefix) {
  Score s;
  const fs::path report = kWork / (checkpoint.stem().string() + "." + prefix.filename().string() +
                                   ".report.csv");
  const auto r = run_cli("evaluate --input " + q(prefix) + " --checkpoint " + q(checkpoint) +
                         " --output " + q(report));
  if (r.exit_code != 0) return s;
  const auto pos = r.out.find("BLEU = ");
  if (pos == std::string::npos) return s;
  s.bleu = std::stod(r.out.substr(pos + 7));
  const auto lines = read_lines(report);
  std::size_t n = 0;
  std::size_t exact = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto a = lines[i].find(',');
    if (a == std::string::npos) continue;
    ++n;
    exact += lines[i].substr(a + 1, 1) == "1";
  }
  s.exact = n == 0 ? 0.0 : static_cast<double>(exact) / static_cast<double>(n);
  s.ok = n > 0;
  return s;
}

// 1. Ordering count law against an independent expansion search.
void grow(std::vector<int>& seq, int lo, int hi, int last, std::set<std::vector<int>>& out) {
  if (lo == 0 && hi == last) {
    out.insert(seq);
    return;
  }
  if (lo > 0) {
    seq.push_back(lo - 1);
    grow(seq, lo - 1, hi, last, out);
    seq.pop_back();
  }
  if (hi < last) {
    seq.push_back(hi + 1);
    grow(seq, lo, hi + 1, last, out);
    seq.pop_back();
  }
}

Outcome count_law() {
  const auto t0 = Clock::now();
  for (int t = 0; t <= 8; ++t) {
    std::set<std::vector<int>> brute;
    const int last = t + 1;
    for (int s = 0; s <= last; ++s) {
      std::vector<int> seq = {s};
      grow(seq, s, s, last, brute);
    }
    std::set<std::vector<int>> listed;
    for (const auto& z : enumerate_orderings(t)) {
      listed.emplace(z.positions().begin(), z.positions().end());
    }
    const std::size_t law = std::size_t{1} << (t + 1);
    if (brute.size() != law || listed != brute || count_orderings(t) != law) {
      return {false, "mismatch at T=" + std::to_string(t)};
    }
  }
  const double secs = seconds_since(t0);
  return {secs < 10.0, "T=0..8 match 2^(T+1), " + fmt("%.2f s", secs)};
}

// 2. Round trip.
Outcome round_trip() {
  std::size_t checked = 0;
  std::size_t failures = 0;
  auto check = [&](const std::vector<TokenId>& x, const SpiralOrdering& z) {
    ++checked;
    try {
      const auto back = restore(reform(x, z));
      if (back.tokens != x || back.ordering != z) ++failures;
    } catch (const std::exception&) {
      ++failures;
    }
  };
  Rng rng = derive_rng(kSeed, 0x2001);
  for (int t = 0; t <= 6; ++t) {
    std::vector<TokenId> x;
    for (int i = 0; i < t; ++i) x.push_back(static_cast<TokenId>(kFirstRealId + uniform_below(rng, 5)));
    for (const auto& z : enumerate_orderings(t)) check(x, z);
  }
  for (int i = 0; i < 1000; ++i) {
    const int t = static_cast<int>(uniform_below(rng, 65));
    std::vector<TokenId> x;
    for (int k = 0; k < t; ++k) x.push_back(static_cast<TokenId>(kFirstRealId + uniform_below(rng, 50)));
    check(x, sample_uniform_ordering(t, rng));
  }
  return {failures == 0, std::to_string(checked) + " pairs, " + std::to_string(failures) +
                             " failures"};
}

// 3. Printed generation-order traces.
Outcome printed_traces() {
  struct Case {
    std::string trace;
    std::string sentence;
  };
  const std::vector<Case> cases = {
      {"digital/+ media/- the/- to/- directly/- ideas/+ ./+ [EOR]/- our/- transfer/- to/- "
       "able/- be/- 'll/- we/- [EOL]",
       "we 'll be able to transfer our ideas directly to the digital media ."},
      {"dump/- to/+ our/- able/- be/+ ideas/+ directly/+ to/- 'll/- we/+ digital/+ media/+ ./+ "
       "[EOR]/- [EOL]",
       "we 'll be able to dump our ideas directly to digital media ."},
  };
  for (const auto& c : cases) {
    Vocab v;
    const auto lookup = [&v](std::string_view s) { return v.add(s); };
    const auto name = [&v](TokenId id) { return v.token(id); };
    try {
      const ReformedSequence x = parse_trace(c.trace, lookup);
      const auto back = restore(x);
      const auto words = v.decode(back.tokens);
      if (detokenize(words) != c.sentence) return {false, "restored '" + detokenize(words) + "'"};
      if (format_trace(x, name) != c.trace) return {false, "re-serialization differs"};
      if (format_trace(reform(back.tokens, back.ordering), name) != c.trace) {
        return {false, "reform of restored pair differs"};
      }
    } catch (const std::exception& e) {
      return {false, e.what()};
    }
  }
  return {true, "2 traces restore and re-serialize byte-identically"};
}

// 4. Uniform sampler chi-square.
Outcome chi_square() {
  constexpr int kT = 5;
  constexpr std::size_t kDraws = 64000;
  constexpr double kCritical = 103.442;  // chi-square, 63 dof, upper 0.001
  const auto all = enumerate_orderings(kT);
  std::map<SpiralOrdering, std::size_t> counts;
  for (const auto& z : all) counts[z] = 0;
  Rng rng = derive_rng(kSeed, 0x2004);
  for (std::size_t i = 0; i < kDraws; ++i) ++counts.at(sample_uniform_ordering(kT, rng));
  const double expected = static_cast<double>(kDraws) / static_cast<double>(all.size());
  double stat = 0.0;
  for (const auto& [z, n] : counts) stat += (n - expected) * (n - expected) / expected;
  return {all.size() == 64 && stat < kCritical,
          "chi2 = " + fmt("%.2f", stat) + " < " + fmt("%.2f", kCritical)};
}

// 5. Finite differences through both loss heads.
Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto f = testing::make_grad_fixture(seed);
    const std::span<const TrainingInstance> batch(f.batch);
    using Fn = std::function<ad::Tensor<double>()>;
    const std::vector<Fn> losses = {
        [&] { return batch_loss(f.model, batch, {}).total; },
        [&] { return batch_loss(f.model, batch, {}).translation; },
        [&] { return batch_loss(f.model, batch, {}).start; },
    };
    for (const auto& fn : losses) {
      const auto r = testing::finite_difference_check(f.model, fn, 1u << 20, 1e-5);
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 120.0, "max rel error " + fmt("%.2e", worst) + " over " +
                                              std::to_string(checked) + " entries, " +
                                              fmt("%.1f s", secs)};
}

// 6. Beam search against exhaustive search.
Outcome beam_oracle() {
  std::size_t agree = 0;
  constexpr std::size_t kInstances = 24;
  double worst = 0.0;
  for (std::uint64_t i = 0; i < kInstances; ++i) {
    testing::TableScorer table(5 + i % 2, 100 + i);
    BeamConfig cfg;
    cfg.beam = 1u << 20;
    cfg.alpha = i % 3 == 0 ? 0.0 : 0.6;
    cfg.max_steps = 6;
    const auto best = testing::exhaustive_best(table, 4, cfg.alpha);
    const auto got = decode(table, cfg);
    const double gap = std::abs(got.score - best.score);
    worst = std::max(worst, gap);
    agree += got.tokens == best.tokens && gap <= 1e-6;
  }
  return {agree == kInstances, std::to_string(agree) + "/" + std::to_string(kInstances) +
                                   " agree, max score gap " + fmt("%.1e", worst)};
}

// Shared lexicon runs.
struct LexiconRuns {
  TrainedRun l2r;
  TrainedRun slm;
  Score l2r_dev;
  Score slm_dev;
};

LexiconRuns& lexicon_runs() {
  static LexiconRuns runs = [] {
    LexiconRuns r;
    r.l2r = train_run("lexicon", "l2r", 1.0);
    r.slm = train_run("lexicon", "slm-twostage", 1.0);
    if (r.l2r.ok) r.l2r_dev = evaluate(r.l2r.checkpoint, task_dir("lexicon") / "dev");
    if (r.slm.ok) r.slm_dev = evaluate(r.slm.checkpoint, task_dir("lexicon") / "dev");
    return r;
  }();
  return runs;
}

// 7a. Copy task.
Outcome copy_gate() {
  const auto run = train_run("copy", "slm-random", 1.0);
  if (!run.ok) return {false, "training failed"};
  const auto s = evaluate(run.checkpoint, task_dir("copy") / "test");
  return {s.ok && s.exact >= 0.99 && run.seconds <= 900.0,
          "exact " + fmt("%.1f%%", 100 * s.exact) + ", BLEU " + fmt("%.2f", s.bleu) + ", " +
              fmt("%.0f s", run.seconds)};
}

// 7b. Lexicon task.
Outcome lexicon_gate() {
  const auto& r = lexicon_runs();
  if (!r.l2r.ok || !r.slm.ok || !r.l2r_dev.ok || !r.slm_dev.ok) return {false, "run failed"};
  const double gap = r.slm_dev.bleu - r.l2r_dev.bleu;
  const bool fast = r.l2r.seconds <= 900.0 && r.slm.seconds <= 900.0;
  return {gap >= -2.0 && fast, "dev BLEU slm-twostage " + fmt("%.2f", r.slm_dev.bleu) +
                                   " vs l2r " + fmt("%.2f", r.l2r_dev.bleu) + " (gap " +
                                   fmt("%+.2f", gap) + "), " + fmt("%.0f s", r.slm.seconds) +
                                   " / " + fmt("%.0f s", r.l2r.seconds)};
}

// 8. Start head occurrence AUC and attention alignment.
double auc(std::vector<std::pair<double, bool>> scored) {
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j) + 1) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (scored[k].second) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scored.size() - pos;
  if (pos == 0 || neg == 0) return 0.0;
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1) / 2) / (p * static_cast<double>(neg));
}

Outcome start_head() {
  const auto& r = lexicon_runs();
  if (!r.slm.ok) return {false, "training failed"};
  const ModelBundle bundle = load_bundle(r.slm.checkpoint);
  std::map<std::string, std::string> lexicon;
  for (const auto& line : read_lines(task_dir("lexicon") / "lexicon.tsv")) {
    const auto tab = line.find('\t');
    if (tab != std::string::npos) lexicon[line.substr(0, tab)] = line.substr(tab + 1);
  }
  const auto dev = read_parallel(task_dir("lexicon") / "dev.src", task_dir("lexicon") / "dev.tgt");
  const std::size_t v = bundle.target_vocab.size();
  // Labels exclude stop words, so the AUC that counts is over the rest; the
  // all-token figure is reported alongside.
  std::vector<std::pair<double, bool>> scored;
  std::vector<std::pair<double, bool>> scored_all;
  std::size_t aligned = 0;
  std::size_t total = 0;
  for (const auto& pair : dev) {
    const auto src = bundle.source_vocab.encode(pair.source);
    const auto mem = bundle.model.encode(src);
    const auto pred = bundle.model.start_probs(bundle.model.start_potentials(mem.states));
    std::set<std::string> present(pair.target.begin(), pair.target.end());
    for (std::size_t k = kFirstRealId; k < v; ++k) {
      const auto& tok = bundle.target_vocab.token(static_cast<TokenId>(k));
      scored_all.emplace_back(pred.probabilities[k], present.contains(tok));
      if (!is_stop_word(bundle.stop_words, tok)) {
        scored.emplace_back(pred.probabilities[k], present.contains(tok));
      }
    }
    for (const auto& y : pair.target) {
      if (is_stop_word(bundle.stop_words, y)) continue;
      const auto k = static_cast<std::size_t>(bundle.target_vocab.id(y));
      std::size_t best = 0;
      for (std::size_t t = 1; t < src.size(); ++t) {
        if (pred.alpha[t * v + k] > pred.alpha[best * v + k]) best = t;
      }
      ++total;
      const auto it = lexicon.find(pair.source[best]);
      aligned += it != lexicon.end() && it->second == y;
    }
  }
  const double a = auc(scored);
  const double rate = total == 0 ? 0.0 : static_cast<double>(aligned) / static_cast<double>(total);
  return {a >= 0.95 && rate >= 0.80,
          "AUC " + fmt("%.4f", a) + " (all tokens " + fmt("%.4f", auc(scored_all)) +
              "), alignment " + fmt("%.1f%%", 100 * rate) + " of " +
              std::to_string(total) + " tokens"};
}

// 9. Forced start through the CLI.
Outcome forced_start() {
  const auto& r = lexicon_runs();
  if (!r.slm.ok) return {false, "training failed"};
  const ModelBundle bundle = load_bundle(r.slm.checkpoint);
  const fs::path input = kWork / "forced.src";
  {
    const auto lines = read_lines(task_dir("lexicon") / "dev.src");
    std::ofstream out(input);
    for (std::size_t i = 0; i < std::min<std::size_t>(lines.size(), 40); ++i) out << lines[i] << "\n";
  }
  const std::size_t n_inputs = read_lines(input).size();
  std::size_t outputs = 0;
  std::size_t contained = 0;
  std::size_t forced = 0;
  const auto regular = bundle.target_vocab.regular_tokens();
  for (std::size_t i = 0; i < regular.size(); ++i) {
    // Alternate single tokens and two-token spans.
    std::vector<std::string> want = {regular[i]};
    if (i % 2 == 1) want.push_back(regular[(i + 3) % regular.size()]);
    std::string joined;
    for (const auto& w : want) joined += (joined.empty() ? "" : " ") + w;
    const auto run = run_cli("decode --input " + q(input) + " --checkpoint " +
                             q(r.slm.checkpoint) + " --start '" + joined + "'");
    ++forced;
    std::istringstream lines(run.out);
    std::size_t seen = 0;
    for (std::string line; std::getline(lines, line);) {
      ++seen;
      const auto toks = tokenize(line);
      contained += std::search(toks.begin(), toks.end(), want.begin(), want.end()) != toks.end();
    }
    outputs += seen;
    if (run.exit_code != 0 || seen != n_inputs) return {false, "decode failed for '" + joined + "'"};
  }
  return {outputs > 0 && contained == outputs,
          std::to_string(contained) + "/" + std::to_string(outputs) + " outputs over " +
              std::to_string(forced) + " forced starts"};
}

// 10. Data-fraction curve.
Outcome data_fraction() {
  const std::vector<double> fractions = {0.25, 0.5, 0.75, 1.0};
  const fs::path csv = kWork / "data_fraction.csv";
  std::string text = "data_fraction,strategy,dev_bleu\n";
  std::string gaps;
  for (double f : fractions) {
    std::map<std::string, double> bleu;
    for (const std::string strategy : {"l2r", "slm-twostage"}) {
      Score s;
      if (f == 1.0) {
        const auto& r = lexicon_runs();
        s = strategy == "l2r" ? r.l2r_dev : r.slm_dev;
      } else {
        const auto run = train_run("lexicon", strategy, f);
        if (!run.ok) return {false, "training failed at fraction " + fmt("%.2f", f)};
        s = evaluate(run.checkpoint, task_dir("lexicon") / "dev");
      }
      if (!s.ok) return {false, "evaluation failed at fraction " + fmt("%.2f", f)};
      bleu[strategy] = s.bleu;
      text += fmt("%.2f", f) + "," + strategy + "," + fmt("%.2f", s.bleu) + "\n";
    }
    gaps += (gaps.empty() ? "" : " ") + fmt("%.2f:", f) +
            fmt("%+.2f", bleu["slm-twostage"] - bleu["l2r"]);
  }
  {
    std::ofstream out(csv);
    out << text;
  }
  const auto lines = read_lines(csv);
  bool ok = lines.size() == 1 + 2 * fractions.size() && lines[0] == "data_fraction,strategy,dev_bleu";
  for (std::size_t i = 1; ok && i < lines.size(); ++i) {
    ok = std::count(lines[i].begin(), lines[i].end(), ',') == 2;
  }
  return {ok, "wrote " + csv.filename().string() + "; SLM-L2R gap by fraction " + gaps};
}

// 11. Determinism of every subcommand.
Outcome determinism() {
  std::vector<std::string> outputs[2];
  const std::string small =
      " --set train_count=200 --set dev_count=20 --set test_count=20 --set eval_interval=50"
      " --set eval_sentences=10 --set d_model=32 --set d_ff=64";
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = kWork / ("det" + std::to_string(rep));
    fs::remove_all(dir);
    const std::string cfg = " --config " + q(kConfigs / "lexicon.cfg") + " --seed 5" + small;
    auto& out = outputs[rep];
    out.push_back(std::to_string(run_cli("generate" + cfg + " --output " + q(dir)).exit_code));
    out.push_back(std::to_string(
        run_cli("train" + cfg + " --steps 120 --set train_data=" + q(dir / "train") +
                " --set dev_data=" + q(dir / "dev") + " --set stopwords=" +
                q(dir / "stopwords.txt") + " --checkpoint " + q(dir / "m.slmc") +
                " --metrics-out " + q(dir / "m.csv"))
            .exit_code));
    out.push_back(run_cli("decode --input " + q(dir / "test.src") + " --checkpoint " +
                          q(dir / "m.slmc") + " --emit-order --emit-score")
                      .out);
    out.push_back(run_cli("evaluate --input " + q(dir / "test") + " --checkpoint " +
                          q(dir / "m.slmc") + " --output " + q(dir / "rep.csv"))
                      .out);
    out.push_back(run_cli("orderings 6 --sample 20 --seed 5").out);
    out.push_back(run_cli("attn-dump --input " + q(dir / "test.src") + " --checkpoint " +
                          q(dir / "m.slmc"))
                      .out);
    for (const char* f : {"train.src", "train.tgt", "dev.src", "test.tgt", "lexicon.tsv",
                          "m.slmc", "m.csv", "rep.csv"}) {
      out.push_back(read_file(dir / f));
    }
  }
  std::size_t same = 0;
  bool nonempty = true;
  for (std::size_t i = 0; i < outputs[0].size(); ++i) {
    same += outputs[0][i] == outputs[1][i];
    nonempty = nonempty && !outputs[0][i].empty();
  }
  const bool ok = same == outputs[0].size() && nonempty && outputs[0][0] == "0" &&
                  outputs[0][1] == "0";
  return {ok, std::to_string(same) + "/" + std::to_string(outputs[0].size()) +
                  " artifacts bit-identical across reruns"};
}

}  // namespace

// Optional arguments select criteria by number, e.g. `slm_acceptance 1 7`.
int main(int argc, char** argv) {
  fs::create_directories(kWork);
  const std::vector<std::string> only(argv + 1, argv + argc);
  auto selected = [&](const char* name) {
    const std::string id(name, std::strchr(name, ' '));
    return only.empty() || std::ranges::any_of(only, [&](const std::string& o) {
             return o == id || o == id.substr(0, id.find_first_not_of("0123456789"));
           });
  };
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"1 ordering count law", count_law},
      {"2 reform/restore round trip", round_trip},
      {"3 printed trace fidelity", printed_traces},
      {"4 sampler uniformity", chi_square},
      {"5 gradient suite", gradients},
      {"6 beam-oracle equivalence", beam_oracle},
      {"7a copy task gate", copy_gate},
      {"7b lexicon task gate", lexicon_gate},
      {"8 start head AUC and alignment", start_head},
      {"9 forced start guarantee", forced_start},
      {"10 data-fraction curve", data_fraction},
      {"11 determinism", determinism},
  };
  int failed = 0;
  std::size_t ran = 0;
  for (const auto& c : criteria) {
    if (!selected(c.name)) continue;
    ++ran;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, ran);
  return failed == 0 ? 0 : 1;
}
