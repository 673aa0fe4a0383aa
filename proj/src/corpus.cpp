#include "slm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "slm/error.hpp"
#include "slm/random.hpp"

namespace slm {

Vocab::Vocab() {
  for (const char* t : {kPadToken, kEolToken, kEorToken}) add(t);
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (v.find(t)) throw DataError("duplicate vocabulary token '" + t + "'");
    v.add(t);
  }
  return v;
}

TokenId Vocab::add(std::string_view token) {
  if (auto id = find(token)) return *id;
  if (frozen_) throw DataError("unknown token '" + std::string(token) + "'");
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view token) const {
  if (auto id = find(token)) return *id;
  throw DataError("unknown token '" + std::string(token) + "'");
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId i : ids) out.push_back(token(i));
  return out;
}

Sentence tokenize(std::string_view line) {
  Sentence out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.emplace_back(line.substr(start, i - start));
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

namespace {

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

// FNV-1a, stable across platforms and runs.
std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

StopWords load_stopwords(const std::filesystem::path& path) {
  StopWords out;
  for (const auto& raw : read_lines(path)) {
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    for (const auto& tok : tokenize(line)) out.insert(lowercase(tok));
  }
  return out;
}

bool is_stop_word(const StopWords& stop_words, std::string_view token) {
  return !stop_words.empty() && stop_words.contains(lowercase(token));
}

ParallelCorpus read_parallel(const std::filesystem::path& source_path,
                             const std::filesystem::path& target_path) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw DataError("parallel files differ in line count: " + source_path.string() + " (" +
                    std::to_string(src.size()) + ") vs " + target_path.string() + " (" +
                    std::to_string(tgt.size()) + ")");
  }
  ParallelCorpus out;
  out.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    out.push_back({tokenize(src[i]), tokenize(tgt[i])});
  }
  return out;
}

void write_parallel(const ParallelCorpus& corpus,
                    const std::filesystem::path& source_path,
                    const std::filesystem::path& target_path) {
  std::ofstream src(source_path);
  std::ofstream tgt(target_path);
  if (!src || !tgt) throw DataError("cannot write corpus to " + source_path.string());
  for (const auto& p : corpus) {
    src << detokenize(p.source) << '\n';
    tgt << detokenize(p.target) << '\n';
  }
  if (!src || !tgt) throw DataError("failed writing corpus " + source_path.string());
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy:
      return "copy";
    case TaskKind::Reverse:
      return "reverse";
    case TaskKind::Lexicon:
      return "lexicon";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "reverse") return TaskKind::Reverse;
  if (name == "lexicon") return TaskKind::Lexicon;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

void swap_adjacent_pairs(Sentence& s) {
  for (std::size_t i = 0; i + 1 < s.size(); i += 2) std::swap(s[i], s[i + 1]);
}

TaskCorpus generate(const TaskSpec& spec) {
  if (spec.vocab_size < 1 || spec.min_length < 1 || spec.min_length > spec.max_length) {
    throw ConfigError("task needs vocab_size >= 1 and 1 <= min_length <= max_length");
  }
  if (spec.max_length > spec.vocab_size) {
    throw ConfigError("vocabulary of " + std::to_string(spec.vocab_size) +
                      " tokens cannot fill sentences of " + std::to_string(spec.max_length) +
                      " distinct tokens");
  }
  if (spec.stop_word_count < 0 || spec.stop_word_count >= spec.vocab_size) {
    throw ConfigError("stop_word_count must lie in [0, vocab_size)");
  }

  Rng rng = derive_rng(spec.seed, 0x7a5c);
  const auto n = static_cast<std::size_t>(spec.vocab_size);
  std::vector<std::string> source_tokens(n);
  std::vector<std::string> target_tokens(n);
  TaskCorpus corpus;
  if (spec.kind == TaskKind::Lexicon) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_below(rng, i)]);
    for (std::size_t i = 0; i < n; ++i) {
      source_tokens[i] = "s" + std::to_string(i);
      target_tokens[i] = "t" + std::to_string(perm[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) source_tokens[i] = target_tokens[i] = "w" + std::to_string(i);
  }
  for (std::size_t i = 0; i < n; ++i) corpus.lexicon[source_tokens[i]] = target_tokens[i];
  for (int i = 0; i < spec.stop_word_count; ++i) {
    const std::string name = (spec.kind == TaskKind::Lexicon ? "t" : "w") + std::to_string(i);
    corpus.stop_words.insert(lowercase(name));
  }

  const std::size_t want[3] = {spec.train_count, spec.dev_count, spec.test_count};
  ParallelCorpus* splits[3] = {&corpus.train, &corpus.dev, &corpus.test};
  std::unordered_set<std::string> seen;
  const std::size_t total = want[0] + want[1] + want[2];
  const std::size_t max_attempts = 200 * total + 10000;
  std::vector<std::size_t> pool(n);
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    if (corpus.train.size() == want[0] && corpus.dev.size() == want[1] &&
        corpus.test.size() == want[2]) {
      break;
    }
    const auto span = static_cast<std::uint64_t>(spec.max_length - spec.min_length + 1);
    const std::size_t len = static_cast<std::size_t>(spec.min_length) + uniform_below(rng, span);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    SentencePair pair;
    for (std::size_t i = 0; i < len; ++i) {
      std::swap(pool[i], pool[i + uniform_below(rng, n - i)]);
      pair.source.push_back(source_tokens[pool[i]]);
      pair.target.push_back(target_tokens[pool[i]]);
    }
    if (spec.kind == TaskKind::Reverse) {
      std::reverse(pair.target.begin(), pair.target.end());
    } else if (spec.kind == TaskKind::Lexicon) {
      swap_adjacent_pairs(pair.target);
    }
    const std::string key = detokenize(pair.source);
    const std::uint64_t bucket = stable_hash(key) % 10;
    const std::size_t split = bucket == 0 ? 1 : bucket == 1 ? 2 : 0;
    if (splits[split]->size() >= want[split] || !seen.insert(key).second) continue;
    splits[split]->push_back(std::move(pair));
  }
  if (corpus.train.size() != want[0] || corpus.dev.size() != want[1] ||
      corpus.test.size() != want[2]) {
    throw ConfigError("vocabulary too small to produce the requested number of distinct sentences");
  }
  return corpus;
}

double bleu(std::span<const Sentence> candidates, std::span<const Sentence> references,
            int max_order) {
  if (candidates.empty()) throw DataError("BLEU needs a nonempty corpus");
  if (candidates.size() != references.size()) {
    throw DataError("BLEU: " + std::to_string(candidates.size()) + " candidates vs " +
                    std::to_string(references.size()) + " references");
  }
  if (max_order < 1) throw PreconditionError("BLEU max order must be >= 1");
  std::vector<double> matches(static_cast<std::size_t>(max_order), 0.0);
  std::vector<double> totals(static_cast<std::size_t>(max_order), 0.0);
  double cand_len = 0;
  double ref_len = 0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    const auto& ref = references[s];
    cand_len += static_cast<double>(cand.size());
    ref_len += static_cast<double>(ref.size());
    for (int n = 1; n <= max_order; ++n) {
      const auto nn = static_cast<std::size_t>(n);
      std::map<std::vector<std::string>, int> ref_counts;
      for (std::size_t i = 0; i + nn <= ref.size(); ++i) {
        ++ref_counts[std::vector<std::string>(ref.begin() + static_cast<std::ptrdiff_t>(i),
                                              ref.begin() + static_cast<std::ptrdiff_t>(i + nn))];
      }
      std::map<std::vector<std::string>, int> cand_counts;
      for (std::size_t i = 0; i + nn <= cand.size(); ++i) {
        ++cand_counts[std::vector<std::string>(cand.begin() + static_cast<std::ptrdiff_t>(i),
                                               cand.begin() + static_cast<std::ptrdiff_t>(i + nn))];
      }
      for (const auto& [gram, count] : cand_counts) {
        totals[nn - 1] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[nn - 1] += std::min(count, it->second);
      }
    }
  }
  double log_precision = 0;
  for (int n = 0; n < max_order; ++n) {
    const auto i = static_cast<std::size_t>(n);
    if (totals[i] == 0 || matches[i] == 0) return 0.0;
    log_precision += std::log(matches[i] / totals[i]);
  }
  log_precision /= max_order;
  const double brevity = cand_len < ref_len ? 1.0 - ref_len / cand_len : 0.0;
  return std::exp(log_precision + brevity);
}

}  // namespace slm
