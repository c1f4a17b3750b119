#include "melt/model.hpp"

#include <cmath>
#include <stdexcept>

namespace melt {

double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (hidden_dim == 0) fail("hidden_dim must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (hidden_dim % n_heads != 0) fail("hidden_dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (loops == 0) fail("loops must be >= 1");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (max_seq_len == 0) fail("max_seq_len must be positive");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (!(rope_base > 1.0)) fail("rope_base must exceed 1");
}

std::vector<NamedTensor> LoopLMParams::named() const {
  std::vector<NamedTensor> out;
  out.emplace_back("embedding", embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "attn_norm", p.attn_norm);
    out.emplace_back(pre + "wq", p.wq);
    out.emplace_back(pre + "wk", p.wk);
    out.emplace_back(pre + "wv", p.wv);
    out.emplace_back(pre + "wo", p.wo);
    out.emplace_back(pre + "ffn_norm", p.ffn_norm);
    out.emplace_back(pre + "w1", p.w1);
    out.emplace_back(pre + "b1", p.b1);
    out.emplace_back(pre + "w2", p.w2);
    out.emplace_back(pre + "b2", p.b2);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("lm_head", lm_head);
  return out;
}

LoopLMParams LoopLMParams::clone() const {
  LoopLMParams c;
  c.embedding = embedding.clone();
  for (const auto& p : layers) {
    c.layers.push_back(LayerParams{p.attn_norm.clone(), p.wq.clone(), p.wk.clone(),
                                   p.wv.clone(), p.wo.clone(), p.ffn_norm.clone(),
                                   p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()});
  }
  c.final_norm = final_norm.clone();
  c.lm_head = lm_head.clone();
  return c;
}

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double bound) {
  Tensor t(Shape{r, c});
  for (auto& v : t.mutable_data()) v = uniform(rng, -bound, bound);
  return t;
}

}  // namespace

LoopLMParams init_looplm_params(const ModelConfig& cfg, std::uint64_t seed, double weight_scale) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.hidden_dim;
  const double in_d = std::sqrt(3.0 / static_cast<double>(d)) * weight_scale;
  const double in_f = std::sqrt(3.0 / static_cast<double>(cfg.ffn_dim)) * weight_scale;
  // residual branches are applied n_layers * loops times per token
  const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers * cfg.loops));

  LoopLMParams p;
  p.embedding = random_matrix(rng, cfg.vocab_size, d, std::sqrt(3.0) * weight_scale);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.attn_norm = Tensor::full(Shape{d}, 1.0);
    lp.wq = random_matrix(rng, d, d, in_d);
    lp.wk = random_matrix(rng, d, d, in_d);
    lp.wv = random_matrix(rng, d, d, in_d);
    lp.wo = random_matrix(rng, d, d, in_d * depth);
    lp.ffn_norm = Tensor::full(Shape{d}, 1.0);
    lp.w1 = random_matrix(rng, d, cfg.ffn_dim, in_d);
    lp.b1 = Tensor::zeros(Shape{cfg.ffn_dim});
    lp.w2 = random_matrix(rng, cfg.ffn_dim, d, in_f * depth);
    lp.b2 = Tensor::zeros(Shape{d});
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = Tensor::full(Shape{d}, 1.0);
  p.lm_head = random_matrix(rng, d, cfg.vocab_size, in_d);
  for (auto& [name, t] : p.named()) t.set_requires_grad(true);
  return p;
}

LoopLMParams zero_looplm_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim;
  LoopLMParams p;
  p.embedding = Tensor::zeros(Shape{cfg.vocab_size, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    p.layers.push_back(LayerParams{
        Tensor::full(Shape{d}, 1.0), Tensor::zeros(Shape{d, d}), Tensor::zeros(Shape{d, d}),
        Tensor::zeros(Shape{d, d}), Tensor::zeros(Shape{d, d}), Tensor::full(Shape{d}, 1.0),
        Tensor::zeros(Shape{d, cfg.ffn_dim}), Tensor::zeros(Shape{cfg.ffn_dim}),
        Tensor::zeros(Shape{cfg.ffn_dim, d}), Tensor::zeros(Shape{d})});
  }
  p.final_norm = Tensor::full(Shape{d}, 1.0);
  p.lm_head = Tensor::zeros(Shape{d, cfg.vocab_size});
  for (auto& [name, t] : p.named()) t.set_requires_grad(true);
  return p;
}

Tensor attn_input(const LayerParams& p, const ModelConfig& cfg, const Tensor& x) {
  return rms_norm(x, p.attn_norm, cfg.norm_eps);
}

Tensor project_key(const LayerParams& p, const ModelConfig& cfg, const Tensor& src,
                   std::size_t pos0) {
  return rope(matmul(src, p.wk), cfg.n_heads, pos0, cfg.rope_base);
}

Tensor project_value(const LayerParams& p, const Tensor& src) { return matmul(src, p.wv); }

BlockOutput block_forward(const LayerParams& p, const ModelConfig& cfg, const Tensor& x,
                          const Tensor& normed, const Tensor& keys, const Tensor& values,
                          std::size_t q_pos0) {
  const Tensor q = rope(matmul(normed, p.wq), cfg.n_heads, q_pos0, cfg.rope_base);
  const Tensor attn = matmul(attention(q, keys, values, cfg.n_heads, q_pos0), p.wo);
  Tensor x_attn = add(x, attn);
  const Tensor hidden = gelu(add(matmul(rms_norm(x_attn, p.ffn_norm, cfg.norm_eps), p.w1), p.b1));
  Tensor x_next = add(x_attn, add(matmul(hidden, p.w2), p.b2));
  return {std::move(x_attn), std::move(x_next)};
}

Tensor lm_logits(const LoopLMParams& p, const ModelConfig& cfg, const Tensor& x) {
  return matmul(rms_norm(x, p.final_norm, cfg.norm_eps), p.lm_head);
}

}  // namespace melt
