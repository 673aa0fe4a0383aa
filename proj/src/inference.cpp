#include "slm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "slm/error.hpp"

namespace slm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool allowed(TokenId id, Direction d) {
  if (id >= kFirstRealId) return true;
  if (id == kEolId) return d == Direction::Left;
  if (id == kEorId) return d == Direction::Right;
  return false;
}

// Log-softmax over the tokens legal on side `d`; illegal entries are -inf.
std::vector<double> masked_log_probs(std::span<const double> logits, Direction d) {
  double hi = kNegInf;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed(static_cast<TokenId>(i), d)) hi = std::max(hi, logits[i]);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed(static_cast<TokenId>(i), d)) total += std::exp(logits[i] - hi);
  }
  const double log_z = hi + std::log(total);
  std::vector<double> out(logits.size(), kNegInf);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed(static_cast<TokenId>(i), d)) out[i] = logits[i] - log_z;
  }
  return out;
}

std::vector<Direction> legal_directions(const Hypothesis& h, const BeamConfig& cfg) {
  std::vector<Direction> out;
  if (!h.eol_done && !cfg.l2r) out.push_back(Direction::Left);
  if (!h.eor_done) out.push_back(Direction::Right);
  return out;
}

std::vector<DirectedToken> branch_context(const Hypothesis& h, Direction d) {
  std::vector<DirectedToken> ctx = h.trace;
  ctx.back().direction = d;
  return ctx;
}

Hypothesis extend(const Hypothesis& h, Direction d, TokenId token, double logp) {
  Hypothesis out = h;
  out.trace.back().direction = d;
  out.trace.push_back({token, Direction::Right});
  if (d == Direction::Left) {
    out.segment.push_front(token);
  } else {
    out.segment.push_back(token);
  }
  if (token == kEolId) {
    out.eol_done = true;
  } else if (token == kEorId) {
    out.eor_done = true;
  } else {
    ++out.real_tokens;
  }
  out.sum_logprob = h.sum_logprob + logp;
  out.complete = out.eol_done && out.eor_done;
  return out;
}

DecodeResult to_result(const Hypothesis& h, double alpha) {
  DecodeResult r;
  for (TokenId t : h.segment) {
    if (!is_special(t)) r.tokens.push_back(t);
  }
  r.trace = h.trace;
  r.score = penalized_score(h, alpha);
  r.sum_logprob = h.sum_logprob;
  r.truncated = h.truncated || !h.complete;
  return r;
}

// Index of the best hypothesis by penalized score, earliest on ties.
std::size_t best_index(const std::vector<Hypothesis>& hs, double alpha) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < hs.size(); ++i) {
    if (penalized_score(hs[i], alpha) > penalized_score(hs[best], alpha)) best = i;
  }
  return best;
}

bool eligible_start(TokenId id, const std::vector<bool>& stop_mask) {
  if (is_special(id)) return false;
  return stop_mask.empty() || static_cast<std::size_t>(id) >= stop_mask.size() ||
         !stop_mask[static_cast<std::size_t>(id)];
}

}  // namespace

void BeamConfig::validate() const {
  if (beam < 1) throw PreconditionError("beam size must be >= 1");
  if (!(alpha >= 0.0)) throw PreconditionError("length penalty alpha must be >= 0");
  if (max_steps < 3) throw PreconditionError("max decode steps must be >= 3");
  if (l2r && !forced_start.empty()) {
    throw PreconditionError("a forced start cannot be combined with left-to-right decoding");
  }
}

ModelScorer::ModelScorer(const SpiralModel<float>& model, std::span<const TokenId> source)
    : model_(model) {
  ad::NoGradGuard no_grad;
  memory_ = model_.encode(source);
  const auto pred = model_.start_probs(model_.start_potentials(memory_.states));
  start_.assign(pred.probabilities.begin(), pred.probabilities.end());
}

std::size_t ModelScorer::vocab_size() const {
  return static_cast<std::size_t>(model_.config().target_vocab);
}

std::vector<double> ModelScorer::start_probabilities() const { return start_; }

std::vector<std::vector<double>> ModelScorer::next_logits(
    const std::vector<std::vector<DirectedToken>>& contexts) const {
  if (contexts.empty()) return {};
  ad::NoGradGuard no_grad;
  const std::vector<std::size_t> index(contexts.size(), 0);
  const auto logits = model_.decode_batch(memory_, index, contexts, {});
  const std::size_t v = logits.cols();
  std::vector<std::vector<double>> out;
  out.reserve(contexts.size());
  std::size_t row = 0;
  for (const auto& ctx : contexts) {
    row += ctx.size();
    const auto values = logits.value().subspan((row - 1) * v, v);
    out.emplace_back(values.begin(), values.end());
  }
  return out;
}

double length_penalty(std::size_t real_tokens, double alpha) {
  return std::pow((5.0 + static_cast<double>(real_tokens)) / 6.0, alpha);
}

double penalized_score(const Hypothesis& h, double alpha) {
  return h.sum_logprob / length_penalty(h.real_tokens, alpha);
}

std::vector<Hypothesis> init_beams(const SourceScorer& scorer, const BeamConfig& cfg,
                                   const std::vector<bool>& stop_mask) {
  cfg.validate();
  const std::size_t v = scorer.vocab_size();
  if (cfg.l2r) {
    Hypothesis h;
    h.trace.push_back({kEolId, Direction::Right});
    h.segment.push_back(kEolId);
    h.eol_done = true;
    return {h};
  }
  if (!cfg.forced_start.empty()) {
    if (cfg.forced_start.size() + 2 > cfg.max_steps) {
      throw DataError("forced start longer than the decode budget");
    }
    Hypothesis h;
    for (TokenId t : cfg.forced_start) {
      if (t < kFirstRealId || static_cast<std::size_t>(t) >= v) {
        throw DataError("forced start token id " + std::to_string(t) + " is not a regular token");
      }
      h.trace.push_back({t, Direction::Right});
      h.segment.push_back(t);
      ++h.real_tokens;
    }
    if (!cfg.forced_start_prob_one) {
      h.sum_logprob = std::log(scorer.start_probabilities()[static_cast<std::size_t>(cfg.forced_start[0])]);
    }
    return {h};
  }
  const auto probs = scorer.start_probabilities();
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < v; ++i) {
    if (eligible_start(static_cast<TokenId>(i), stop_mask)) ids.push_back(static_cast<TokenId>(i));
  }
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  if (ids.size() > cfg.beam) ids.resize(cfg.beam);
  std::vector<Hypothesis> out;
  for (TokenId id : ids) {
    Hypothesis h;
    h.trace.push_back({id, Direction::Right});
    h.segment.push_back(id);
    h.real_tokens = 1;
    h.sum_logprob = std::log(probs[static_cast<std::size_t>(id)]);
    out.push_back(std::move(h));
  }
  return out;
}

StepResult expand_step(const std::vector<Hypothesis>& beams, const SourceScorer& scorer,
                       const BeamConfig& cfg) {
  struct Branch {
    std::size_t parent;
    Direction direction;
  };
  std::vector<Branch> branches;
  std::vector<std::vector<DirectedToken>> contexts;
  for (std::size_t i = 0; i < beams.size(); ++i) {
    if (beams[i].complete) continue;
    for (Direction d : legal_directions(beams[i], cfg)) {
      branches.push_back({i, d});
      contexts.push_back(branch_context(beams[i], d));
    }
  }
  if (branches.empty()) throw PreconditionError("expand_step needs an incomplete hypothesis");
  const auto logits = scorer.next_logits(contexts);

  struct Candidate {
    std::size_t branch;
    TokenId token;
    double logp;
    double score;
  };
  std::vector<Candidate> pool;
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const Hypothesis& parent = beams[branches[b].parent];
    const auto logp = masked_log_probs(logits[b], branches[b].direction);
    for (std::size_t id = 0; id < logp.size(); ++id) {
      if (logp[id] == kNegInf) continue;
      const std::size_t real = parent.real_tokens + (is_special(static_cast<TokenId>(id)) ? 0 : 1);
      const double sum = parent.sum_logprob + logp[id];
      pool.push_back({b, static_cast<TokenId>(id), logp[id], sum / length_penalty(real, cfg.alpha)});
    }
  }
  std::stable_sort(pool.begin(), pool.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (pool.size() > cfg.beam) pool.resize(cfg.beam);

  StepResult out;
  for (const auto& c : pool) {
    const Branch& br = branches[c.branch];
    Hypothesis h = extend(beams[br.parent], br.direction, c.token, c.logp);
    (h.complete ? out.completed : out.beams).push_back(std::move(h));
  }
  return out;
}

DecodeResult decode(const SourceScorer& scorer, const BeamConfig& cfg,
                    const std::vector<bool>& stop_mask) {
  std::vector<Hypothesis> beams = init_beams(scorer, cfg, stop_mask);
  if (beams.empty()) throw DataError("no eligible start token");
  std::vector<Hypothesis> completed;
  const double max_lp =
      length_penalty(cfg.max_steps > 2 ? cfg.max_steps - 2 : 0, cfg.alpha);
  while (!beams.empty()) {
    if (beams.front().trace.size() >= cfg.max_steps) {
      for (auto& h : beams) h.truncated = true;
      break;
    }
    StepResult step = expand_step(beams, scorer, cfg);
    for (auto& h : step.completed) completed.push_back(std::move(h));
    beams = std::move(step.beams);
    if (!completed.empty() && !beams.empty()) {
      const double best = penalized_score(completed[best_index(completed, cfg.alpha)], cfg.alpha);
      double bound = kNegInf;
      for (const auto& h : beams) bound = std::max(bound, h.sum_logprob / max_lp);
      if (best >= bound) break;
    }
  }
  if (!completed.empty()) return to_result(completed[best_index(completed, cfg.alpha)], cfg.alpha);
  return to_result(beams[best_index(beams, cfg.alpha)], cfg.alpha);
}

DecodeResult greedy_decode(const SourceScorer& scorer, const BeamConfig& cfg,
                           const std::vector<bool>& stop_mask) {
  cfg.validate();
  Hypothesis h;
  if (cfg.l2r || !cfg.forced_start.empty()) {
    h = init_beams(scorer, cfg, stop_mask).front();
  } else {
    const auto probs = scorer.start_probabilities();
    std::optional<TokenId> best;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const auto id = static_cast<TokenId>(i);
      if (!eligible_start(id, stop_mask)) continue;
      if (!best || probs[i] > probs[static_cast<std::size_t>(*best)]) best = id;
    }
    if (!best) throw DataError("no eligible start token");
    h.trace.push_back({*best, Direction::Right});
    h.segment.push_back(*best);
    h.real_tokens = 1;
    h.sum_logprob = std::log(probs[static_cast<std::size_t>(*best)]);
  }
  while (!h.complete) {
    if (h.trace.size() >= cfg.max_steps) {
      h.truncated = true;
      break;
    }
    std::optional<Hypothesis> next;
    double next_score = kNegInf;
    for (Direction d : legal_directions(h, cfg)) {
      const auto row = scorer.next_logits({branch_context(h, d)}).front();
      const auto logp = masked_log_probs(row, d);
      for (std::size_t id = 0; id < logp.size(); ++id) {
        if (logp[id] == kNegInf) continue;
        Hypothesis cand = extend(h, d, static_cast<TokenId>(id), logp[id]);
        const double s = penalized_score(cand, cfg.alpha);
        if (!next || s > next_score) {
          next_score = s;
          next = std::move(cand);
        }
      }
    }
    h = std::move(*next);
  }
  return to_result(h, cfg.alpha);
}

std::vector<SentenceDecode> decode_all(std::size_t count, const ScorerFactory& make_scorer,
                                       const BeamConfig& cfg, const std::vector<bool>& stop_mask,
                                       std::size_t threads) {
  std::vector<SentenceDecode> out(count);
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < count; i += stride) {
      try {
        auto scorer = make_scorer(i);
        out[i].result = decode(*scorer, cfg, stop_mask);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  for (auto& th : pool) th.join();
  return out;
}

}  // namespace slm
