#include "slm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "slm/error.hpp"

namespace slm {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::L2R:
      return "l2r";
    case Strategy::SlmRandom:
      return "slm-random";
    case Strategy::SlmTwoStage:
      return "slm-twostage";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "l2r") return Strategy::L2R;
  if (name == "slm-random") return Strategy::SlmRandom;
  if (name == "slm-twostage") return Strategy::SlmTwoStage;
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (expected l2r, slm-random or slm-twostage)");
}

void TrainConfig::validate() const {
  if (total_steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(stage_boundary > 0.0 && stage_boundary <= 1.0)) {
    throw ConfigError("stage boundary must lie in (0, 1]");
  }
  if (top_k < 1) throw ConfigError("top-k must be >= 1");
  if (!(data_fraction > 0.0 && data_fraction <= 1.0)) {
    throw ConfigError("data fraction must lie in (0, 1]");
  }
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (adam.clip_norm < 0.0) throw ConfigError("clip norm must be >= 0");
  try {
    eval_beam.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<bool> make_stop_mask(const Vocab& target_vocab, const StopWords& stop_words) {
  std::vector<bool> mask(target_vocab.size(), false);
  for (std::size_t i = kFirstRealId; i < target_vocab.size(); ++i) {
    mask[i] = is_stop_word(stop_words, target_vocab.token(static_cast<TokenId>(i)));
  }
  return mask;
}

std::vector<float> start_labels(std::span<const TokenId> target, std::size_t vocab_size,
                                const std::vector<bool>& stop_mask) {
  std::vector<float> labels(vocab_size, 0.0f);
  for (TokenId t : target) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw DataError("target id " + std::to_string(t) + " out of range");
    }
    const auto i = static_cast<std::size_t>(t);
    if (is_special(t) || (i < stop_mask.size() && stop_mask[i])) continue;
    labels[i] = 1.0f;
  }
  return labels;
}

TrainingInstance make_training_instance(const EncodedPair& pair, const SpiralOrdering& z,
                                        std::size_t vocab_size,
                                        const std::vector<bool>& stop_mask) {
  if (z.length() != static_cast<int>(pair.target.size())) {
    throw PreconditionError("ordering of length " + std::to_string(z.length()) +
                            " does not fit a target of " + std::to_string(pair.target.size()) +
                            " tokens");
  }
  const ReformedSequence x = reform(pair.target, z);
  TrainingInstance inst;
  inst.source = pair.source;
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    inst.inputs.push_back(x[i]);
    inst.targets.push_back(x[i + 1].token);
  }
  inst.start_labels = start_labels(pair.target, vocab_size, stop_mask);
  return inst;
}

template <typename T>
ad::Tensor<T> translation_loss(const ad::Tensor<T>& logits, std::span<const TokenId> targets) {
  if (logits.rows() != targets.size()) {
    throw DimensionError("translation loss: " + std::to_string(logits.rows()) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  return ad::cross_entropy(logits, std::span<const int>(targets.data(), targets.size()));
}

template <typename T>
ad::Tensor<T> start_loss(const ad::Tensor<T>& pooled, std::span<const T> labels) {
  if (pooled.size() != labels.size()) {
    throw DimensionError("start loss: " + std::to_string(pooled.size()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  }
  return ad::bce_with_logits(pooled, labels);
}

template <typename T>
LossTerms<T> batch_loss(const SpiralModel<T>& model, std::span<const TrainingInstance> batch,
                        ForwardMode mode) {
  if (batch.empty()) throw PreconditionError("empty batch");
  std::vector<std::span<const TokenId>> sources;
  std::vector<std::size_t> memory_index;
  std::vector<std::vector<DirectedToken>> prefixes;
  std::vector<TokenId> targets;
  std::vector<T> labels;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& inst = batch[i];
    if (i == 0 || inst.source != batch[i - 1].source) {
      sources.emplace_back(inst.source);
      labels.insert(labels.end(), inst.start_labels.begin(), inst.start_labels.end());
    }
    memory_index.push_back(sources.size() - 1);
    prefixes.push_back(inst.inputs);
    targets.insert(targets.end(), inst.targets.begin(), inst.targets.end());
  }
  const auto memory = model.encode_batch(sources, mode);
  const auto logits = model.decode_batch(memory, memory_index, prefixes, mode);
  LossTerms<T> out;
  out.translation = translation_loss(logits, targets);
  const auto pooled = model.start_logits(model.start_potentials(memory.states), memory.segments);
  out.start = start_loss(pooled, std::span<const T>(labels));
  out.total = ad::add(out.translation, out.start);
  return out;
}

template ad::Tensor<float> translation_loss(const ad::Tensor<float>&, std::span<const TokenId>);
template ad::Tensor<double> translation_loss(const ad::Tensor<double>&, std::span<const TokenId>);
template ad::Tensor<float> start_loss(const ad::Tensor<float>&, std::span<const float>);
template ad::Tensor<double> start_loss(const ad::Tensor<double>&, std::span<const double>);
template LossTerms<float> batch_loss(const SpiralModel<float>&, std::span<const TrainingInstance>,
                                     ForwardMode);
template LossTerms<double> batch_loss(const SpiralModel<double>&,
                                      std::span<const TrainingInstance>, ForwardMode);

SpiralOrdering sample_ordering_stage1(const EncodedPair& pair, Rng& rng) {
  return sample_uniform_ordering(static_cast<int>(pair.target.size()), rng);
}

std::vector<SpiralOrdering> sample_orderings_stage2(std::span<const double> start_probs,
                                                    const EncodedPair& pair, std::size_t k,
                                                    const std::vector<bool>& stop_mask, Rng& rng) {
  if (k < 1) throw PreconditionError("top-k must be >= 1");
  std::vector<TokenId> ids;
  for (std::size_t i = kFirstRealId; i < start_probs.size(); ++i) {
    if (i < stop_mask.size() && stop_mask[i]) continue;
    ids.push_back(static_cast<TokenId>(i));
  }
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    return start_probs[static_cast<std::size_t>(a)] > start_probs[static_cast<std::size_t>(b)];
  });
  if (ids.size() > k) ids.resize(k);

  const int length = static_cast<int>(pair.target.size());
  std::vector<SpiralOrdering> out;
  for (TokenId id : ids) {
    std::vector<int> positions;
    for (int p = 0; p < length; ++p) {
      if (pair.target[static_cast<std::size_t>(p)] == id) positions.push_back(p + 1);
    }
    if (positions.empty()) continue;
    const int pos = positions[uniform_below(rng, positions.size())];
    out.push_back(sample_constrained_ordering(length, {pos, pos}, rng));
  }
  if (out.empty()) out.push_back(sample_ordering_stage1(pair, rng));
  return out;
}

std::vector<SpiralOrdering> sample_orderings_stage2(const SpiralModel<float>& model,
                                                    const EncodedPair& pair, std::size_t k,
                                                    const std::vector<bool>& stop_mask, Rng& rng) {
  ad::NoGradGuard no_grad;
  const auto memory = model.encode(pair.source);
  const auto pred = model.start_probs(model.start_potentials(memory.states));
  const std::vector<double> probs(pred.probabilities.begin(), pred.probabilities.end());
  return sample_orderings_stage2(probs, pair, k, stop_mask, rng);
}

std::size_t stage2_first_step(double boundary, std::size_t total_steps) {
  return static_cast<std::size_t>(std::ceil(boundary * static_cast<double>(total_steps) - 1e-9));
}

std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::string out = "step,phase,train_loss,dev_bleu\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.2f\n", r.step, r.phase.c_str(), r.train_loss,
                  r.dev_bleu);
    out += buf;
  }
  return out;
}

ParallelCorpus subset_corpus(const ParallelCorpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must lie in (0, 1]");
  const auto n = corpus.size();
  const auto keep = std::min(
      n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(seed, 0xf4ac);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  ParallelCorpus out;
  out.reserve(keep);
  for (auto i : order) out.push_back(corpus[i]);
  return out;
}

BeamConfig beam_for(const ModelBundle& bundle, BeamConfig beam) {
  if (bundle.strategy == "l2r") beam.l2r = true;
  beam.max_steps = std::min(beam.max_steps, static_cast<std::size_t>(bundle.model.config().max_steps));
  return beam;
}

double corpus_bleu(const ModelBundle& bundle, const ParallelCorpus& corpus, const BeamConfig& beam,
                   std::size_t threads) {
  if (corpus.empty()) return 0.0;
  const BeamConfig cfg = beam_for(bundle, beam);
  const auto stop_mask = make_stop_mask(bundle.target_vocab, bundle.stop_words);
  const auto decoded = decode_all(
      corpus.size(),
      [&](std::size_t i) -> std::unique_ptr<SourceScorer> {
        const auto ids = bundle.source_vocab.encode(corpus[i].source);
        return std::make_unique<ModelScorer>(bundle.model, ids);
      },
      cfg, stop_mask, threads);
  std::vector<Sentence> candidates;
  std::vector<Sentence> references;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    candidates.push_back(decoded[i].result ? bundle.target_vocab.decode(decoded[i].result->tokens)
                                           : Sentence{});
    references.push_back(corpus[i].target);
  }
  return 100.0 * bleu(candidates, references);
}

namespace {

Vocab build_vocab(const ParallelCorpus& a, const ParallelCorpus& b, bool source_side) {
  Vocab v;
  for (const auto* corpus : {&a, &b}) {
    for (const auto& pair : *corpus) {
      for (const auto& t : source_side ? pair.source : pair.target) v.add(t);
    }
  }
  v.freeze();
  return v;
}

const char* phase_name(Strategy s, bool stage2) {
  if (s == Strategy::L2R) return "l2r";
  return stage2 ? "stage2" : "stage1";
}

}  // namespace

TrainResult train(const ParallelCorpus& train_corpus, const ParallelCorpus& dev_corpus,
                  const StopWords& stop_words, ModelConfig model_config,
                  const TrainConfig& config, const MetricsCallback& on_row) {
  config.validate();
  if (train_corpus.empty()) throw DataError("training corpus is empty");
  Vocab src_vocab = build_vocab(train_corpus, dev_corpus, true);
  Vocab tgt_vocab = build_vocab(train_corpus, dev_corpus, false);
  model_config.source_vocab = static_cast<int>(src_vocab.size());
  model_config.target_vocab = static_cast<int>(tgt_vocab.size());

  const ParallelCorpus subset = subset_corpus(train_corpus, config.data_fraction, config.seed);
  std::vector<EncodedPair> pairs;
  for (const auto& p : subset) {
    if (p.source.empty() || p.target.empty()) throw DataError("empty sentence in training corpus");
    if (static_cast<int>(p.target.size()) + 2 > model_config.max_steps ||
        static_cast<int>(p.source.size()) > model_config.max_steps) {
      throw ConfigError("a training sentence exceeds max_steps " +
                        std::to_string(model_config.max_steps));
    }
    pairs.push_back({src_vocab.encode(p.source), tgt_vocab.encode(p.target)});
  }
  ParallelCorpus dev = dev_corpus;
  if (config.eval_sentences > 0 && dev.size() > config.eval_sentences) {
    dev.resize(config.eval_sentences);
  }

  TrainResult result{ModelBundle{SpiralModel<float>(model_config, derive_rng(config.seed, 0x30d)()),
                                 std::move(src_vocab), std::move(tgt_vocab), stop_words,
                                 to_string(config.strategy)},
                     {}};
  ModelBundle& bundle = result.bundle;
  SpiralModel<float>& model = bundle.model;
  const auto stop_mask = make_stop_mask(bundle.target_vocab, stop_words);
  const std::size_t vocab = bundle.target_vocab.size();

  AdamState<float> adam{config.adam, 0, {}, {}};
  Rng batch_rng = derive_rng(config.seed, 0xba7c);
  Rng order_rng = derive_rng(config.seed, 0x0dde);
  Rng dropout_rng = derive_rng(config.seed, 0xd20f);

  std::vector<std::size_t> epoch(pairs.size());
  std::iota(epoch.begin(), epoch.end(), std::size_t{0});
  std::size_t cursor = epoch.size();
  const std::size_t first_stage2 = config.strategy == Strategy::SlmTwoStage
                                       ? stage2_first_step(config.stage_boundary, config.total_steps)
                                       : config.total_steps;

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (std::size_t step = 0; step < config.total_steps; ++step) {
    const bool stage2 = step >= first_stage2;
    std::vector<std::size_t> chosen;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      if (cursor == epoch.size()) {
        for (std::size_t i = epoch.size(); i > 1; --i) {
          std::swap(epoch[i - 1], epoch[uniform_below(batch_rng, i)]);
        }
        cursor = 0;
      }
      chosen.push_back(epoch[cursor++]);
    }

    std::vector<std::vector<double>> head_probs;
    if (stage2) {
      ad::NoGradGuard no_grad;
      std::vector<std::span<const TokenId>> sources;
      for (auto i : chosen) sources.emplace_back(pairs[i].source);
      const auto memory = model.encode_batch(sources, {});
      const auto pooled = model.start_logits(model.start_potentials(memory.states), memory.segments);
      for (std::size_t r = 0; r < chosen.size(); ++r) {
        std::vector<double> probs(vocab);
        for (std::size_t k = 0; k < vocab; ++k) {
          probs[k] = 1.0 / (1.0 + std::exp(-static_cast<double>(pooled.at(r, k))));
        }
        head_probs.push_back(std::move(probs));
      }
    }

    std::vector<TrainingInstance> batch;
    for (std::size_t r = 0; r < chosen.size(); ++r) {
      const EncodedPair& pair = pairs[chosen[r]];
      std::vector<SpiralOrdering> orderings;
      if (config.strategy == Strategy::L2R) {
        orderings.push_back(l2r_ordering(static_cast<int>(pair.target.size())));
      } else if (stage2) {
        orderings = sample_orderings_stage2(head_probs[r], pair, config.top_k, stop_mask, order_rng);
      } else {
        orderings.push_back(sample_ordering_stage1(pair, order_rng));
      }
      for (const auto& z : orderings) {
        batch.push_back(make_training_instance(pair, z, vocab, stop_mask));
      }
    }

    try {
      const auto loss = batch_loss(model, std::span<const TrainingInstance>(batch),
                                   ForwardMode{true, &dropout_rng});
      ad::backward(loss.total);
      adam_step(model.parameters(), adam);
      loss_sum += loss.total.item();
      ++loss_count;
    } catch (const NumericError& e) {
      throw NumericError("batch " + std::to_string(step) + ": " + e.what());
    }

    const bool last = step + 1 == config.total_steps;
    if (last || (config.eval_interval > 0 && (step + 1) % config.eval_interval == 0)) {
      MetricsRow row;
      row.step = step + 1;
      row.phase = phase_name(config.strategy, stage2);
      row.train_loss = loss_sum / static_cast<double>(loss_count);
      row.dev_bleu = corpus_bleu(bundle, dev, config.eval_beam, config.threads);
      loss_sum = 0.0;
      loss_count = 0;
      if (on_row) on_row(row);
      result.metrics.push_back(std::move(row));
    }
  }
  return result;
}

}  // namespace slm
