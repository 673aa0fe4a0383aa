#pragma once

// Direction-branching beam search.
//
// A hypothesis is a contiguous segment grown from a start token. Each round,
// every incomplete hypothesis forks into a Left and a Right context (when
// legal), each context is scored once, and the pooled continuations are
// pruned to the beam size by length-penalized score:
//
//   score = sum_logprob / ((5 + |Y|) / 6)^alpha,  |Y| = real tokens only.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slm/model.hpp"
#include "slm/ordering.hpp"

namespace slm {

struct BeamConfig {
  std::size_t beam = 5;
  double alpha = 0.6;
  // Tuple budget per hypothesis, both end markers included.
  std::size_t max_steps = 64;
  std::vector<TokenId> forced_start;
  bool forced_start_prob_one = false;
  // Start pinned to [EOL], Left branches disabled.
  bool l2r = false;

  // Throws PreconditionError.
  void validate() const;
};

// Everything the search needs from a model for one source sentence.
class SourceScorer {
 public:
  virtual ~SourceScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Head probability per target id; entries for special ids are ignored.
  virtual std::vector<double> start_probabilities() const = 0;
  // One row of next-token logits per context. The last tuple of each
  // context names the side being extended.
  virtual std::vector<std::vector<double>> next_logits(
      const std::vector<std::vector<DirectedToken>>& contexts) const = 0;
};

// Scorer over a frozen float model; the source is encoded once.
class ModelScorer final : public SourceScorer {
 public:
  ModelScorer(const SpiralModel<float>& model, std::span<const TokenId> source);
  std::size_t vocab_size() const override;
  std::vector<double> start_probabilities() const override;
  std::vector<std::vector<double>> next_logits(
      const std::vector<std::vector<DirectedToken>>& contexts) const override;

 private:
  const SpiralModel<float>& model_;
  SpiralModel<float>::Memory memory_;
  std::vector<double> start_;
};

struct Hypothesis {
  // The last tuple's direction is a placeholder (Right) until the next branch.
  std::vector<DirectedToken> trace;
  std::deque<TokenId> segment;
  bool eol_done = false;
  bool eor_done = false;
  double sum_logprob = 0.0;
  std::size_t real_tokens = 0;
  bool complete = false;
  bool truncated = false;
};

double length_penalty(std::size_t real_tokens, double alpha);
double penalized_score(const Hypothesis& h, double alpha);

// `stop_mask[id]` marks target ids that may not seed a hypothesis; it may be
// empty. Throws DataError for special or out-of-range forced tokens.
std::vector<Hypothesis> init_beams(const SourceScorer& scorer, const BeamConfig& cfg,
                                   const std::vector<bool>& stop_mask = {});

struct StepResult {
  std::vector<Hypothesis> beams;
  std::vector<Hypothesis> completed;
};

// One round of branching, scoring and pruning.
StepResult expand_step(const std::vector<Hypothesis>& beams, const SourceScorer& scorer,
                       const BeamConfig& cfg);

struct DecodeResult {
  std::vector<TokenId> tokens;  // real tokens, left to right
  std::vector<DirectedToken> trace;
  double score = 0.0;
  double sum_logprob = 0.0;
  bool truncated = false;
};

DecodeResult decode(const SourceScorer& scorer, const BeamConfig& cfg,
                    const std::vector<bool>& stop_mask = {});

// Single-hypothesis search written independently of the beam machinery.
DecodeResult greedy_decode(const SourceScorer& scorer, const BeamConfig& cfg,
                           const std::vector<bool>& stop_mask = {});

// Outcome for one sentence of a batch decode; `error` is set instead of
// `result` when the sentence could not be decoded.
struct SentenceDecode {
  std::optional<DecodeResult> result;
  std::string error;
};

using ScorerFactory = std::function<std::unique_ptr<SourceScorer>(std::size_t index)>;

// Decodes `count` sentences on up to `threads` workers; results by index.
std::vector<SentenceDecode> decode_all(std::size_t count, const ScorerFactory& make_scorer,
                                       const BeamConfig& cfg, const std::vector<bool>& stop_mask,
                                       std::size_t threads);

}  // namespace slm
