#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "slm/tokens.hpp"

namespace slm {

// Token <-> id bijection. Ids 0, 1, 2 are always <pad>, [EOL], [EOR].
class Vocab {
 public:
  Vocab();
  // Vocabulary holding the reserved rows followed by `tokens` in order.
  static Vocab from_tokens(std::span<const std::string> tokens);

  // Adds when unknown; throws DataError for unknown tokens once frozen.
  TokenId add(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  // Throws DataError for unknown tokens.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  std::size_t size() const { return tokens_.size(); }
  // Non-reserved tokens in id order.
  std::span<const std::string> regular_tokens() const {
    return std::span<const std::string>(tokens_).subspan(kFirstRealId);
  }
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  bool frozen_ = false;
};

using Sentence = std::vector<std::string>;

struct SentencePair {
  Sentence source;
  Sentence target;
};

using ParallelCorpus = std::vector<SentencePair>;

// Whitespace tokenization.
Sentence tokenize(std::string_view line);
std::string detokenize(std::span<const std::string> tokens);

using StopWords = std::unordered_set<std::string>;

// One token per line; '#' starts a comment; entries are lowercased.
StopWords load_stopwords(const std::filesystem::path& path);
bool is_stop_word(const StopWords& stop_words, std::string_view token);

ParallelCorpus read_parallel(const std::filesystem::path& source_path,
                             const std::filesystem::path& target_path);
void write_parallel(const ParallelCorpus& corpus,
                    const std::filesystem::path& source_path,
                    const std::filesystem::path& target_path);

enum class TaskKind { Copy, Reverse, Lexicon };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int vocab_size = 20;
  int min_length = 3;
  int max_length = 10;
  std::uint64_t seed = 1;
  std::size_t train_count = 2000;
  std::size_t dev_count = 200;
  std::size_t test_count = 200;
  // The first `stop_word_count` target tokens are treated as stop words.
  int stop_word_count = 0;
};

struct TaskCorpus {
  ParallelCorpus train;
  ParallelCorpus dev;
  ParallelCorpus test;
  StopWords stop_words;
  // Source token -> target token; identity for copy and reverse.
  std::map<std::string, std::string> lexicon;
};

// Sentences hold distinct tokens drawn uniformly from the task vocabulary.
// Splits are disjoint: a source string's hash fixes its split. Throws
// ConfigError when the vocabulary cannot supply the requested lengths and
// counts.
TaskCorpus generate(const TaskSpec& spec);

// Target-side rearrangement used by the lexicon task: swap (0,1), (2,3), ...
void swap_adjacent_pairs(Sentence& s);

// Corpus-level BLEU in [0, 1]: clipped n-gram precisions summed over the
// corpus, geometric mean over orders 1..max_order, brevity penalty
// exp(1 - r/c) when the candidate total c is shorter than the reference r.
double bleu(std::span<const Sentence> candidates,
            std::span<const Sentence> references, int max_order = 4);

}  // namespace slm
