#pragma once

// Encoder-decoder transformer for spiral generation.
//
// The decoder reads reformed tuples <token, direction> in decode order; each
// input row is the sum of a token row, a direction row and a decode-step
// position row. Output logits at step t score the token attached on the side
// named by tuple t's direction.
//
// A start head on top of the encoder predicts which target tokens occur:
//   v      = (h W1 + b1) W2                      per source position
//   alpha  = softmax over source positions of v, separately per vocab column
//   pooled = sum_t alpha_t v_t
//   p      = sigmoid(pooled)

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slm/checkpoint.hpp"
#include "slm/corpus.hpp"
#include "slm/ordering.hpp"
#include "slm/tensor.hpp"

namespace slm {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;  // encoder and decoder each
  int d_ff = 256;
  int source_vocab = 0;
  int target_vocab = 0;
  // Longest decode (tuples including both end markers) and longest source.
  int max_steps = 64;
  double dropout = 0.3;
  bool tie_embeddings = true;

  // Throws ConfigError.
  void validate() const;
};

// Dropout switch and randomness for one forward pass.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename T>
struct StartPrediction {
  std::vector<T> probabilities;  // |V|
  std::vector<T> pooled;         // |V|, the sigmoid inputs
  std::vector<T> alpha;          // S x |V| row-major
};

template <typename T>
class SpiralModel {
 public:
  using Tensor = ad::Tensor<T>;

  struct Attention {
    Tensor wq, wk, wv, wo;
  };
  struct EncoderLayer {
    Tensor norm_self, norm_ff;
    Attention self;
    Tensor ff_in, ff_out;
  };
  struct DecoderLayer {
    Tensor norm_self, norm_cross, norm_ff;
    Attention self, cross;
    Tensor ff_in, ff_out;
  };

  // Encoder states plus per-layer cross-attention keys and values.
  struct Memory {
    Tensor states;
    std::vector<ad::Segment> segments;
    std::vector<Tensor> cross_keys;
    std::vector<Tensor> cross_values;
  };

  SpiralModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::span<Tensor> parameters() { return params_; }
  std::span<const Tensor> parameters() const { return params_; }
  std::span<const std::string> parameter_names() const { return names_; }
  Tensor& parameter(std::string_view name);

  // Packs several sources; returns final-normalized states (sum S x d).
  Memory encode_batch(const std::vector<std::span<const TokenId>>& sources,
                      ForwardMode mode) const;
  Memory encode(std::span<const TokenId> source, ForwardMode mode = {}) const {
    return encode_batch({source}, mode);
  }

  // Logits (sum of prefix lengths x |V|) for every step of every prefix.
  // Prefix i attends to memory segment memory_index[i].
  Tensor decode_batch(const Memory& memory,
                      std::span<const std::size_t> memory_index,
                      const std::vector<std::vector<DirectedToken>>& prefixes,
                      ForwardMode mode) const;
  Tensor decode_forward(std::span<const DirectedToken> prefix,
                        const Memory& memory) const;

  std::vector<T> embed_tuple(TokenId token, Direction direction,
                             int step) const;

  // S x |V| potentials for packed states.
  Tensor start_potentials(const Tensor& states) const;
  // One row of pooled potentials per segment.
  Tensor start_logits(const Tensor& potentials,
                      std::span<const ad::Segment> segments) const;
  // Probabilities and attention map for a single sentence's potentials.
  StartPrediction<T> start_probs(const Tensor& potentials) const;

  Tensor& source_embedding() { return src_embed_; }
  Tensor& target_embedding() { return tgt_embed_; }
  Tensor& direction_embedding() { return dir_embed_; }
  Tensor& position_embedding() { return dec_pos_; }
  Tensor& start_w1() { return start_w1_; }
  Tensor& start_b1() { return start_b1_; }
  Tensor& start_w2() { return start_w2_; }

  // Float32 records for the checkpoint writer.
  std::vector<ParameterRecord> export_parameters() const;
  // Copies values by name; throws DataError on missing names or shapes.
  void import_parameters(std::span<const ParameterRecord> records);

 private:
  Tensor make_param(std::string name, std::size_t rows, std::size_t cols,
                    double stddev, Rng& rng);
  Tensor make_param_constant(std::string name, std::size_t rows,
                             std::size_t cols, T value);
  Tensor project_attention(const Attention& w, const Tensor& normed_q,
                           const Tensor& keys, const Tensor& values,
                           std::span<const ad::Segment> q_segments,
                           std::span<const ad::Segment> k_segments,
                           bool causal) const;
  Tensor feed_forward(const Tensor& x, const Tensor& w_in,
                      const Tensor& w_out) const;
  Tensor residual(const Tensor& x, const Tensor& branch,
                  ForwardMode mode) const;

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;

  Tensor src_embed_, src_pos_, tgt_embed_, dir_embed_, dec_pos_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Tensor enc_norm_, dec_norm_, out_proj_;
  Tensor start_w1_, start_b1_, start_w2_;
};

extern template class SpiralModel<float>;
extern template class SpiralModel<double>;

// A trained float model together with everything needed to use it.
struct ModelBundle {
  SpiralModel<float> model;
  Vocab source_vocab;
  Vocab target_vocab;
  StopWords stop_words;
  std::string strategy;  // training strategy, decides the decode mode
};

std::string serialize_bundle_config(const ModelBundle& bundle);
Checkpoint to_checkpoint(const ModelBundle& bundle);
ModelBundle from_checkpoint(const Checkpoint& ckpt);
void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::filesystem::path& path);

}  // namespace slm
