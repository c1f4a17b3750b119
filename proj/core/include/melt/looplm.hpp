#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "melt/model.hpp"

namespace melt {

/// Append-only KV cache of a looped transformer: one K/V row per layer, per
/// loop and per token. Under a sharing strategy, tokens past the exact prefix
/// keep a single shared row per layer instead of one per loop.
class LoopKVCache {
 public:
  LoopKVCache() = default;
  LoopKVCache(std::size_t n_layers, std::size_t loops, std::size_t dim);

  std::size_t n_layers() const { return exact_k_.size(); }
  std::size_t loops() const { return exact_k_.empty() ? 0 : exact_k_.front().size(); }
  std::size_t tokens() const { return exact_tokens_ + shared_tokens_; }
  std::size_t exact_tokens() const { return exact_tokens_; }
  std::size_t shared_tokens() const { return shared_tokens_; }

  /// Stored K and V values summed over every layer and loop.
  std::size_t element_count() const;

  /// Keys/values visible at (layer, loop) for positions 0..tokens()-1.
  Tensor keys(std::size_t layer, std::size_t loop) const;
  Tensor values(std::size_t layer, std::size_t loop) const;

  /// Rows for one token: k[l][t], v[l][t] over every layer and loop.
  void append_exact(const std::vector<std::vector<Tensor>>& k,
                    const std::vector<std::vector<Tensor>>& v);
  /// One row per layer, reused by all loops of later tokens.
  void append_shared(const std::vector<Tensor>& k, const std::vector<Tensor>& v);

  /// Whole-sequence rows from a teacher-forced forward.
  void set_exact(std::vector<std::vector<Tensor>> k, std::vector<std::vector<Tensor>> v,
                 std::size_t tokens);

 private:
  std::vector<std::vector<Tensor>> exact_k_, exact_v_;  // [layer][loop]
  std::vector<Tensor> shared_k_, shared_v_;             // [layer]
  std::size_t dim_ = 0;
  std::size_t exact_tokens_ = 0;
  std::size_t shared_tokens_ = 0;
};

enum class ShareKind { none, first_loop, last_loop };

struct ShareStrategy {
  ShareKind kind = ShareKind::none;
  bool keep_prompt_cache = false;  // prefill: prompt keeps its exact per-loop cache
};

ShareKind parse_share_kind(const std::string& s);
std::string to_string(ShareKind k);

struct LoopForward {
  std::vector<Tensor> logits;                  // [loop] -> [L x vocab]
  std::vector<std::vector<Tensor>> post_attn;  // [layer][loop] -> [L x d]
  LoopKVCache cache;
};

class LoopLM {
 public:
  LoopLM(ModelConfig cfg, LoopLMParams params);
  static LoopLM random(const ModelConfig& cfg, std::uint64_t seed, double weight_scale = 1.0);

  const ModelConfig& config() const { return cfg_; }
  const LoopLMParams& params() const { return params_; }
  LoopLMParams& params() { return params_; }
  std::vector<NamedTensor> named_parameters() const { return params_.named(); }
  LoopLM clone() const { return LoopLM(cfg_, params_.clone()); }

  Tensor embed(std::span<const TokenId> tokens) const;

  /// Block `layer` over x whose rows start at position q_pos0; keys/values
  /// must already contain the rows of x.
  BlockOutput block_forward(std::size_t layer, const Tensor& x, const Tensor& keys,
                            const Tensor& values, std::size_t q_pos0) const;

  /// Teacher-forced forward over all tokens with `loops` passes of the layer
  /// stack (defaults to config().loops). Logits are produced for every loop.
  LoopForward forward(std::span<const TokenId> tokens, std::optional<std::size_t> loops = {}) const;

 private:
  ModelConfig cfg_;
  LoopLMParams params_;
};

struct SamplingOptions {
  bool greedy = true;
  double temperature = 1.0;
  double top_p = 0.7;
};

/// Picks the next token from one row of logits.
TokenId sample_token(std::span<const double> logits, const SamplingOptions& opts, Rng& rng);

/// Incremental decoding state of one LoopLM generation.
class LoopLMSession {
 public:
  LoopLMSession(const LoopLM& model, ShareStrategy strategy);

  /// Run every loop for the next token and store its KV per the strategy.
  /// Returns per-loop logits, each [1 x vocab].
  std::vector<Tensor> step(TokenId token, bool is_prompt);

  const LoopKVCache& cache() const { return cache_; }
  std::size_t position() const { return cache_.tokens(); }

 private:
  const LoopLM* model_;
  ShareStrategy strategy_;
  LoopKVCache cache_;
};

struct GenerateResult {
  std::vector<TokenId> tokens;  // generated continuation only
  std::size_t kv_elements = 0;
};

GenerateResult generate(const LoopLM& model, std::span<const TokenId> prompt, std::size_t max_new,
                        ShareStrategy strategy, const SamplingOptions& sampling,
                        std::uint64_t seed);

}  // namespace melt
