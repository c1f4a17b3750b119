#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "melt/ops.hpp"
#include "melt/tensor.hpp"

namespace melt {

using Rng = std::mt19937_64;

/// Uniform double in [lo, hi) built from the top 53 bits of one draw, so the
/// stream is identical across standard libraries.
double uniform(Rng& rng, double lo, double hi);

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 4;
  std::size_t loops = 3;
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 512;
  std::size_t ffn_dim = 128;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return hidden_dim / n_heads; }
  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

using NamedTensor = std::pair<std::string, Tensor>;

struct LayerParams {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor ffn_norm, w1, b1, w2, b2;
};

struct LoopLMParams {
  Tensor embedding;  // [vocab x d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [d x vocab], untied from the embedding

  /// Stable names: "embedding", "layers.<l>.<w>", "final_norm", "lm_head".
  std::vector<NamedTensor> named() const;
  LoopLMParams clone() const;
};

/// `weight_scale` multiplies every random init range.
LoopLMParams init_looplm_params(const ModelConfig& cfg, std::uint64_t seed,
                                double weight_scale = 1.0);

/// All-zero weights with unit norm gains.
LoopLMParams zero_looplm_params(const ModelConfig& cfg);

struct BlockOutput {
  Tensor x_attn;  // post-attention residual stream, o^(l,t)
  Tensor x_next;
};

/// Pre-attention normalization; this is what K/V (or the MELT latent) read.
Tensor attn_input(const LayerParams& p, const ModelConfig& cfg, const Tensor& x);
Tensor project_key(const LayerParams& p, const ModelConfig& cfg, const Tensor& src,
                   std::size_t pos0);
Tensor project_value(const LayerParams& p, const Tensor& src);

/// One transformer block given the full key/value rows for positions
/// 0..q_pos0+rows(x)-1 (already including the rows of x itself):
///   x_attn = Attn(q, K, V) + x,  x_next = FFN(x_attn) + x_attn.
BlockOutput block_forward(const LayerParams& p, const ModelConfig& cfg, const Tensor& x,
                          const Tensor& normed, const Tensor& keys, const Tensor& values,
                          std::size_t q_pos0);

Tensor lm_logits(const LoopLMParams& p, const ModelConfig& cfg, const Tensor& x);

}  // namespace melt
