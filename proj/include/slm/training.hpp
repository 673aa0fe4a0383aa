#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "slm/adam.hpp"
#include "slm/corpus.hpp"
#include "slm/inference.hpp"
#include "slm/model.hpp"
#include "slm/ordering.hpp"

namespace slm {

enum class Strategy { L2R, SlmRandom, SlmTwoStage };

std::string to_string(Strategy s);
// Accepts "l2r", "slm-random", "slm-twostage"; throws ConfigError.
Strategy parse_strategy(std::string_view name);

struct TrainConfig {
  std::size_t total_steps = 2000;
  std::size_t batch_size = 32;  // sentence pairs per step, before replication
  AdamOptions adam;
  double stage_boundary = 0.9;
  std::size_t top_k = 3;
  Strategy strategy = Strategy::SlmTwoStage;
  std::uint64_t seed = 1;
  double data_fraction = 1.0;
  // A metrics row every `eval_interval` steps (0: final row only).
  std::size_t eval_interval = 0;
  // Dev sentences decoded per metrics row (0: all).
  std::size_t eval_sentences = 0;
  BeamConfig eval_beam;
  std::size_t threads = 1;

  // Throws ConfigError.
  void validate() const;
};

struct EncodedPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

struct TrainingInstance {
  std::vector<TokenId> source;
  std::vector<DirectedToken> inputs;  // x̂_1 .. x̂_{n-1}
  std::vector<TokenId> targets;       // tokens of x̂_2 .. x̂_n
  std::vector<float> start_labels;    // one per target vocab id
};

// stop_mask[id] is true for target stop words.
std::vector<bool> make_stop_mask(const Vocab& target_vocab, const StopWords& stop_words);

// 1 for every regular, non-stop token occurring in `target`.
std::vector<float> start_labels(std::span<const TokenId> target, std::size_t vocab_size,
                                const std::vector<bool>& stop_mask);

// Throws PreconditionError when z does not fit the target.
TrainingInstance make_training_instance(const EncodedPair& pair, const SpiralOrdering& z,
                                        std::size_t vocab_size,
                                        const std::vector<bool>& stop_mask);

template <typename T>
struct LossTerms {
  ad::Tensor<T> translation;
  ad::Tensor<T> start;
  ad::Tensor<T> total;
};

// Mean cross-entropy over steps; throws DimensionError on shape mismatch.
template <typename T>
ad::Tensor<T> translation_loss(const ad::Tensor<T>& logits, std::span<const TokenId> targets);
// Mean binary cross-entropy over the pooled start logits.
template <typename T>
ad::Tensor<T> start_loss(const ad::Tensor<T>& pooled, std::span<const T> labels);

// Both heads on a packed batch. Consecutive instances with equal sources
// share one encoder pass and one start-loss row.
template <typename T>
LossTerms<T> batch_loss(const SpiralModel<T>& model, std::span<const TrainingInstance> batch,
                        ForwardMode mode);

SpiralOrdering sample_ordering_stage1(const EncodedPair& pair, Rng& rng);

// Orderings fixed at the start-head's top-k tokens that occur in the target.
std::vector<SpiralOrdering> sample_orderings_stage2(std::span<const double> start_probs,
                                                    const EncodedPair& pair, std::size_t k,
                                                    const std::vector<bool>& stop_mask, Rng& rng);
std::vector<SpiralOrdering> sample_orderings_stage2(const SpiralModel<float>& model,
                                                    const EncodedPair& pair, std::size_t k,
                                                    const std::vector<bool>& stop_mask, Rng& rng);

// First stage-2 step (0-based) for a boundary fraction.
std::size_t stage2_first_step(double boundary, std::size_t total_steps);

struct MetricsRow {
  std::size_t step = 0;
  std::string phase;
  double train_loss = 0.0;
  double dev_bleu = 0.0;  // 0..100
};

std::string metrics_csv(std::span<const MetricsRow> rows);

// Deterministic ceil(fraction * N) subset, kept in corpus order.
ParallelCorpus subset_corpus(const ParallelCorpus& corpus, double fraction, std::uint64_t seed);

struct TrainResult {
  ModelBundle bundle;
  std::vector<MetricsRow> metrics;
};

using MetricsCallback = std::function<void(const MetricsRow&)>;

// Vocabularies come from train plus dev. Throws NumericError naming the
// offending batch when a loss or gradient turns non-finite.
TrainResult train(const ParallelCorpus& train_corpus, const ParallelCorpus& dev_corpus,
                  const StopWords& stop_words, ModelConfig model_config,
                  const TrainConfig& config, const MetricsCallback& on_row = {});

// Decodes `sources` with the bundle's strategy and returns corpus BLEU (0..100).
double corpus_bleu(const ModelBundle& bundle, const ParallelCorpus& corpus, const BeamConfig& beam,
                   std::size_t threads);

// Beam settings appropriate for a bundle (L2R mode for l2r-trained models).
BeamConfig beam_for(const ModelBundle& bundle, BeamConfig beam);

extern template ad::Tensor<float> translation_loss(const ad::Tensor<float>&, std::span<const TokenId>);
extern template ad::Tensor<double> translation_loss(const ad::Tensor<double>&, std::span<const TokenId>);
extern template ad::Tensor<float> start_loss(const ad::Tensor<float>&, std::span<const float>);
extern template ad::Tensor<double> start_loss(const ad::Tensor<double>&, std::span<const double>);
extern template LossTerms<float> batch_loss(const SpiralModel<float>&, std::span<const TrainingInstance>, ForwardMode);
extern template LossTerms<double> batch_loss(const SpiralModel<double>&, std::span<const TrainingInstance>, ForwardMode);

}  // namespace slm
