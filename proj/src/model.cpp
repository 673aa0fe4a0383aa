#include "slm/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "slm/error.hpp"

namespace slm {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model must be a positive multiple of n_heads");
  }
  if (n_layers < 1 || d_ff < 1) throw ConfigError("n_layers and d_ff must be positive");
  if (source_vocab <= kFirstRealId || target_vocab <= kFirstRealId) {
    throw ConfigError("vocabularies need at least one regular token");
  }
  if (max_steps < 3) throw ConfigError("max_steps must be >= 3 (start plus both ends)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::make_param(std::string name, std::size_t rows,
                                                           std::size_t cols, double stddev,
                                                           Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<T> values(rows * cols);
  for (auto& v : values) v = static_cast<T>(normal(rng));
  Tensor t = Tensor::parameter(rows, cols, std::move(values));
  params_.push_back(t);
  names_.push_back(std::move(name));
  return t;
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::make_param_constant(std::string name,
                                                                    std::size_t rows,
                                                                    std::size_t cols, T value) {
  Tensor t = Tensor::parameter(rows, cols, std::vector<T>(rows * cols, value));
  params_.push_back(t);
  names_.push_back(std::move(name));
  return t;
}

template <typename T>
SpiralModel<T>::SpiralModel(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = derive_rng(seed, 0x1417);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto vs = static_cast<std::size_t>(config_.source_vocab);
  const auto vt = static_cast<std::size_t>(config_.target_vocab);
  const auto steps = static_cast<std::size_t>(config_.max_steps);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_std = 1.0 / std::sqrt(static_cast<double>(ff));
  const double out_std = in_std / std::sqrt(2.0 * config_.n_layers);

  src_embed_ = make_param("src_embed", vs, d, 1.0, rng);
  src_pos_ = make_param("src_pos", steps, d, 1.0, rng);
  tgt_embed_ = make_param("tgt_embed", vt, d, 1.0, rng);
  dir_embed_ = make_param("dir_embed", 2, d, 1.0, rng);
  dec_pos_ = make_param("dec_pos", steps, d, 1.0, rng);

  auto attention = [&](const std::string& prefix) {
    Attention a;
    a.wq = make_param(prefix + ".wq", d, d, in_std, rng);
    a.wk = make_param(prefix + ".wk", d, d, in_std, rng);
    a.wv = make_param(prefix + ".wv", d, d, in_std, rng);
    a.wo = make_param(prefix + ".wo", d, d, out_std, rng);
    return a;
  };
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayer layer;
    layer.norm_self = make_param_constant(p + ".norm_self", 1, d, T(1));
    layer.self = attention(p + ".self");
    layer.norm_ff = make_param_constant(p + ".norm_ff", 1, d, T(1));
    layer.ff_in = make_param(p + ".ff_in", d, ff, in_std, rng);
    layer.ff_out = make_param(p + ".ff_out", ff, d, ff_std / std::sqrt(2.0 * config_.n_layers), rng);
    encoder_.push_back(std::move(layer));
  }
  enc_norm_ = make_param_constant("enc.norm", 1, d, T(1));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.norm_self = make_param_constant(p + ".norm_self", 1, d, T(1));
    layer.self = attention(p + ".self");
    layer.norm_cross = make_param_constant(p + ".norm_cross", 1, d, T(1));
    layer.cross = attention(p + ".cross");
    layer.norm_ff = make_param_constant(p + ".norm_ff", 1, d, T(1));
    layer.ff_in = make_param(p + ".ff_in", d, ff, in_std, rng);
    layer.ff_out = make_param(p + ".ff_out", ff, d, ff_std / std::sqrt(2.0 * config_.n_layers), rng);
    decoder_.push_back(std::move(layer));
  }
  dec_norm_ = make_param_constant("dec.norm", 1, d, T(1));
  if (!config_.tie_embeddings) out_proj_ = make_param("out_proj", d, vt, in_std, rng);
  start_w1_ = make_param("start.w1", d, d, in_std, rng);
  start_b1_ = make_param_constant("start.b1", 1, d, T(0));
  start_w2_ = make_param("start.w2", d, vt, in_std, rng);
}

template <typename T>
typename SpiralModel<T>::Tensor& SpiralModel<T>::parameter(std::string_view name) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return params_[i];
  }
  throw PreconditionError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::project_attention(
    const Attention& w, const Tensor& normed_q, const Tensor& keys, const Tensor& values,
    std::span<const ad::Segment> q_segments, std::span<const ad::Segment> k_segments,
    bool causal) const {
  Tensor q = ad::matmul(normed_q, w.wq);
  Tensor mixed = ad::attention(q, keys, values, q_segments, k_segments,
                               static_cast<std::size_t>(config_.n_heads), causal);
  return ad::matmul(mixed, w.wo);
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::feed_forward(const Tensor& x, const Tensor& w_in,
                                                             const Tensor& w_out) const {
  return ad::matmul(ad::relu(ad::matmul(x, w_in)), w_out);
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::residual(const Tensor& x, const Tensor& branch,
                                                         ForwardMode mode) const {
  if (!mode.training || config_.dropout == 0.0) return ad::add(x, branch);
  return ad::add(x, ad::dropout(branch, config_.dropout, true, *mode.rng));
}

template <typename T>
typename SpiralModel<T>::Memory SpiralModel<T>::encode_batch(
    const std::vector<std::span<const TokenId>>& sources, ForwardMode mode) const {
  if (mode.training && mode.rng == nullptr) {
    throw PreconditionError("training forward pass needs an rng");
  }
  Memory memory;
  std::vector<int> ids;
  std::vector<int> positions;
  for (const auto& src : sources) {
    if (src.empty()) throw DataError("empty source sentence");
    if (src.size() > static_cast<std::size_t>(config_.max_steps)) {
      throw DataError("source of " + std::to_string(src.size()) + " tokens exceeds max_steps " +
                      std::to_string(config_.max_steps));
    }
    memory.segments.push_back({ids.size(), src.size()});
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] < 0 || src[i] >= config_.source_vocab) {
        throw DataError("source id " + std::to_string(src[i]) + " out of range");
      }
      ids.push_back(src[i]);
      positions.push_back(static_cast<int>(i));
    }
  }
  Tensor x = ad::add(ad::gather_rows(src_embed_, std::span<const int>(ids)),
                     ad::gather_rows(src_pos_, std::span<const int>(positions)));
  if (mode.training) x = ad::dropout(x, config_.dropout, true, *mode.rng);
  for (const auto& layer : encoder_) {
    Tensor n = ad::rms_norm(x, layer.norm_self);
    Tensor a = project_attention(layer.self, n, ad::matmul(n, layer.self.wk),
                                 ad::matmul(n, layer.self.wv), memory.segments, memory.segments,
                                 false);
    x = residual(x, a, mode);
    x = residual(x, feed_forward(ad::rms_norm(x, layer.norm_ff), layer.ff_in, layer.ff_out), mode);
  }
  memory.states = ad::rms_norm(x, enc_norm_);
  for (const auto& layer : decoder_) {
    memory.cross_keys.push_back(ad::matmul(memory.states, layer.cross.wk));
    memory.cross_values.push_back(ad::matmul(memory.states, layer.cross.wv));
  }
  return memory;
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::decode_batch(
    const Memory& memory, std::span<const std::size_t> memory_index,
    const std::vector<std::vector<DirectedToken>>& prefixes, ForwardMode mode) const {
  if (mode.training && mode.rng == nullptr) {
    throw PreconditionError("training forward pass needs an rng");
  }
  if (memory_index.size() != prefixes.size()) {
    throw DimensionError("decode_batch: one memory index per prefix required");
  }
  std::vector<int> tokens;
  std::vector<int> dirs;
  std::vector<int> steps;
  std::vector<ad::Segment> segments;
  std::vector<ad::Segment> key_segments;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto& prefix = prefixes[i];
    if (prefix.empty()) throw DataError("decoder prefix is empty");
    if (prefix.size() > static_cast<std::size_t>(config_.max_steps)) {
      throw DataError("decoder prefix of " + std::to_string(prefix.size()) +
                      " tuples exceeds max_steps " + std::to_string(config_.max_steps));
    }
    if (memory_index[i] >= memory.segments.size()) {
      throw DimensionError("decode_batch: memory index out of range");
    }
    segments.push_back({tokens.size(), prefix.size()});
    key_segments.push_back(memory.segments[memory_index[i]]);
    for (std::size_t t = 0; t < prefix.size(); ++t) {
      if (prefix[t].token < 0 || prefix[t].token >= config_.target_vocab) {
        throw DataError("target id " + std::to_string(prefix[t].token) + " out of range");
      }
      tokens.push_back(prefix[t].token);
      dirs.push_back(prefix[t].direction == Direction::Left ? 0 : 1);
      steps.push_back(static_cast<int>(t));
    }
  }
  Tensor y = ad::add(ad::add(ad::gather_rows(tgt_embed_, std::span<const int>(tokens)),
                             ad::gather_rows(dir_embed_, std::span<const int>(dirs))),
                     ad::gather_rows(dec_pos_, std::span<const int>(steps)));
  if (mode.training) y = ad::dropout(y, config_.dropout, true, *mode.rng);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& layer = decoder_[l];
    Tensor n = ad::rms_norm(y, layer.norm_self);
    y = residual(y,
                 project_attention(layer.self, n, ad::matmul(n, layer.self.wk),
                                   ad::matmul(n, layer.self.wv), segments, segments, true),
                 mode);
    n = ad::rms_norm(y, layer.norm_cross);
    y = residual(y,
                 project_attention(layer.cross, n, memory.cross_keys[l], memory.cross_values[l],
                                   segments, key_segments, false),
                 mode);
    y = residual(y, feed_forward(ad::rms_norm(y, layer.norm_ff), layer.ff_in, layer.ff_out), mode);
  }
  y = ad::rms_norm(y, dec_norm_);
  if (config_.tie_embeddings) {
    return ad::scale(ad::matmul(y, tgt_embed_, true),
                     T(1) / std::sqrt(static_cast<T>(config_.d_model)));
  }
  return ad::matmul(y, out_proj_);
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::decode_forward(std::span<const DirectedToken> prefix,
                                                               const Memory& memory) const {
  const std::size_t index = 0;
  return decode_batch(memory, std::span<const std::size_t>(&index, 1),
                      {std::vector<DirectedToken>(prefix.begin(), prefix.end())}, {});
}

template <typename T>
std::vector<T> SpiralModel<T>::embed_tuple(TokenId token, Direction direction, int step) const {
  if (token < 0 || token >= config_.target_vocab) {
    throw DataError("target id " + std::to_string(token) + " out of range");
  }
  if (step < 0 || step >= config_.max_steps) {
    throw DataError("decode step " + std::to_string(step) + " out of range");
  }
  const auto d = static_cast<std::size_t>(config_.d_model);
  const std::size_t dir_row = direction == Direction::Left ? 0 : 1;
  std::vector<T> out(d);
  for (std::size_t c = 0; c < d; ++c) {
    out[c] = tgt_embed_.value()[static_cast<std::size_t>(token) * d + c] +
             dir_embed_.value()[dir_row * d + c] +
             dec_pos_.value()[static_cast<std::size_t>(step) * d + c];
  }
  return out;
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::start_potentials(const Tensor& states) const {
  return ad::matmul(ad::add_row(ad::matmul(states, start_w1_), start_b1_), start_w2_);
}

template <typename T>
typename SpiralModel<T>::Tensor SpiralModel<T>::start_logits(
    const Tensor& potentials, std::span<const ad::Segment> segments) const {
  return ad::attention_pool(potentials, segments);
}

template <typename T>
StartPrediction<T> SpiralModel<T>::start_probs(const Tensor& potentials) const {
  const ad::Segment all{0, potentials.rows()};
  Tensor alpha = ad::softmax(potentials, 0);
  Tensor pooled = ad::attention_pool(potentials, std::span<const ad::Segment>(&all, 1));
  Tensor probs = ad::sigmoid(pooled);
  StartPrediction<T> out;
  out.probabilities.assign(probs.value().begin(), probs.value().end());
  out.pooled.assign(pooled.value().begin(), pooled.value().end());
  out.alpha.assign(alpha.value().begin(), alpha.value().end());
  return out;
}

template <typename T>
std::vector<ParameterRecord> SpiralModel<T>::export_parameters() const {
  std::vector<ParameterRecord> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ParameterRecord rec;
    rec.name = names_[i];
    rec.shape = {static_cast<std::uint32_t>(params_[i].rows()),
                 static_cast<std::uint32_t>(params_[i].cols())};
    rec.values.assign(params_[i].value().begin(), params_[i].value().end());
    out.push_back(std::move(rec));
  }
  return out;
}

template <typename T>
void SpiralModel<T>::import_parameters(std::span<const ParameterRecord> records) {
  std::map<std::string, const ParameterRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto it = by_name.find(names_[i]);
    if (it == by_name.end()) throw DataError("checkpoint lacks parameter '" + names_[i] + "'");
    const ParameterRecord& rec = *it->second;
    std::size_t rows = rec.shape.size() == 2 ? rec.shape[0] : 1;
    std::size_t cols = rec.shape.back();
    if (rows != params_[i].rows() || cols != params_[i].cols()) {
      throw DataError("checkpoint parameter '" + names_[i] + "' has the wrong shape");
    }
    auto dst = params_[i].mutable_value();
    for (std::size_t j = 0; j < dst.size(); ++j) {
      if (!std::isfinite(rec.values[j])) {
        throw NumericError("checkpoint parameter '" + names_[i] + "' holds non-finite values");
      }
      dst[j] = static_cast<T>(rec.values[j]);
    }
  }
  if (by_name.size() != params_.size()) throw DataError("checkpoint holds unexpected parameters");
}

template class SpiralModel<float>;
template class SpiralModel<double>;

namespace {

std::string join(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

std::string serialize_bundle_config(const ModelBundle& bundle) {
  const ModelConfig& c = bundle.model.config();
  std::ostringstream out;
  out << "d_model = " << c.d_model << '\n'
      << "n_heads = " << c.n_heads << '\n'
      << "n_layers = " << c.n_layers << '\n'
      << "d_ff = " << c.d_ff << '\n'
      << "max_steps = " << c.max_steps << '\n'
      << "dropout = " << c.dropout << '\n'
      << "tie_embeddings = " << (c.tie_embeddings ? "true" : "false") << '\n'
      << "strategy = " << bundle.strategy << '\n'
      << "source_tokens = " << join(bundle.source_vocab.regular_tokens()) << '\n'
      << "target_tokens = " << join(bundle.target_vocab.regular_tokens()) << '\n';
  std::vector<std::string> stops(bundle.stop_words.begin(), bundle.stop_words.end());
  std::sort(stops.begin(), stops.end());
  out << "stop_words = " << join(stops) << '\n';
  return out.str();
}

Checkpoint to_checkpoint(const ModelBundle& bundle) {
  return {serialize_bundle_config(bundle), bundle.model.export_parameters()};
}

ModelBundle from_checkpoint(const Checkpoint& ckpt) {
  std::map<std::string, std::string> kv;
  std::istringstream in(ckpt.config);
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) {
      const auto bare = line.find(" =");
      if (bare == std::string::npos) throw DataError("malformed checkpoint config line: " + line);
      kv[line.substr(0, bare)] = "";
      continue;
    }
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("checkpoint config lacks '" + key + "'");
    return it->second;
  };
  auto as_int = [&](const std::string& key) {
    try {
      return std::stoi(get(key));
    } catch (const std::logic_error&) {
      throw DataError("checkpoint config '" + key + "' is not an integer");
    }
  };
  const Sentence src_tokens = tokenize(get("source_tokens"));
  const Sentence tgt_tokens = tokenize(get("target_tokens"));
  Vocab src = Vocab::from_tokens(src_tokens);
  Vocab tgt = Vocab::from_tokens(tgt_tokens);
  src.freeze();
  tgt.freeze();

  ModelConfig c;
  c.d_model = as_int("d_model");
  c.n_heads = as_int("n_heads");
  c.n_layers = as_int("n_layers");
  c.d_ff = as_int("d_ff");
  c.max_steps = as_int("max_steps");
  c.dropout = std::stod(get("dropout"));
  c.tie_embeddings = get("tie_embeddings") == "true";
  c.source_vocab = static_cast<int>(src.size());
  c.target_vocab = static_cast<int>(tgt.size());

  ModelBundle bundle{SpiralModel<float>(c, 0), std::move(src), std::move(tgt), {},
                     get("strategy")};
  bundle.model.import_parameters(ckpt.parameters);
  for (const auto& s : tokenize(get("stop_words"))) bundle.stop_words.insert(s);
  return bundle;
}

void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle) {
  write_checkpoint(path, to_checkpoint(bundle));
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  return from_checkpoint(read_checkpoint(path));
}

}  // namespace slm
