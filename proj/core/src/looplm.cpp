#include "melt/looplm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace melt {

LoopKVCache::LoopKVCache(std::size_t n_layers, std::size_t loops, std::size_t dim) : dim_(dim) {
  exact_k_.assign(n_layers, std::vector<Tensor>(loops));
  exact_v_.assign(n_layers, std::vector<Tensor>(loops));
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t t = 0; t < loops; ++t) {
      exact_k_[l][t] = Tensor(Shape{0, dim});
      exact_v_[l][t] = Tensor(Shape{0, dim});
    }
    shared_k_.emplace_back(Shape{0, dim});
    shared_v_.emplace_back(Shape{0, dim});
  }
}

std::size_t LoopKVCache::element_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < exact_k_.size(); ++l) {
    for (std::size_t t = 0; t < exact_k_[l].size(); ++t) {
      n += exact_k_[l][t].size() + exact_v_[l][t].size();
    }
    n += shared_k_[l].size() + shared_v_[l].size();
  }
  return n;
}

Tensor LoopKVCache::keys(std::size_t layer, std::size_t loop) const {
  if (shared_tokens_ == 0) return exact_k_.at(layer).at(loop);
  return concat_rows(exact_k_.at(layer).at(loop), shared_k_.at(layer));
}

Tensor LoopKVCache::values(std::size_t layer, std::size_t loop) const {
  if (shared_tokens_ == 0) return exact_v_.at(layer).at(loop);
  return concat_rows(exact_v_.at(layer).at(loop), shared_v_.at(layer));
}

void LoopKVCache::append_exact(const std::vector<std::vector<Tensor>>& k,
                               const std::vector<std::vector<Tensor>>& v) {
  if (shared_tokens_ != 0) {
    throw std::logic_error("LoopKVCache: exact rows must precede shared rows");
  }
  for (std::size_t l = 0; l < exact_k_.size(); ++l) {
    for (std::size_t t = 0; t < exact_k_[l].size(); ++t) {
      exact_k_[l][t].append_rows(k.at(l).at(t));
      exact_v_[l][t].append_rows(v.at(l).at(t));
    }
  }
  ++exact_tokens_;
}

void LoopKVCache::append_shared(const std::vector<Tensor>& k, const std::vector<Tensor>& v) {
  for (std::size_t l = 0; l < shared_k_.size(); ++l) {
    shared_k_[l].append_rows(k.at(l));
    shared_v_[l].append_rows(v.at(l));
  }
  ++shared_tokens_;
}

void LoopKVCache::set_exact(std::vector<std::vector<Tensor>> k, std::vector<std::vector<Tensor>> v,
                            std::size_t tokens) {
  exact_k_ = std::move(k);
  exact_v_ = std::move(v);
  exact_tokens_ = tokens;
  shared_tokens_ = 0;
  dim_ = exact_k_.empty() || exact_k_.front().empty() ? 0 : exact_k_.front().front().cols();
  shared_k_.assign(exact_k_.size(), Tensor(Shape{0, dim_}));
  shared_v_.assign(exact_k_.size(), Tensor(Shape{0, dim_}));
  for (auto& s : shared_k_) s = Tensor(Shape{0, dim_});
  for (auto& s : shared_v_) s = Tensor(Shape{0, dim_});
}

ShareKind parse_share_kind(const std::string& s) {
  if (s == "none") return ShareKind::none;
  if (s == "first_loop") return ShareKind::first_loop;
  if (s == "last_loop") return ShareKind::last_loop;
  throw std::invalid_argument("unknown share strategy '" + s + "'");
}

std::string to_string(ShareKind k) {
  switch (k) {
    case ShareKind::none: return "none";
    case ShareKind::first_loop: return "first_loop";
    case ShareKind::last_loop: return "last_loop";
  }
  return "?";
}

LoopLM::LoopLM(ModelConfig cfg, LoopLMParams params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  if (params_.layers.size() != cfg_.n_layers) {
    throw std::invalid_argument("LoopLM: parameter layers do not match n_layers");
  }
}

LoopLM LoopLM::random(const ModelConfig& cfg, std::uint64_t seed, double weight_scale) {
  return LoopLM(cfg, init_looplm_params(cfg, seed, weight_scale));
}

Tensor LoopLM::embed(std::span<const TokenId> tokens) const {
  return embedding(params_.embedding, tokens);
}

BlockOutput LoopLM::block_forward(std::size_t layer, const Tensor& x, const Tensor& keys,
                                  const Tensor& values, std::size_t q_pos0) const {
  const auto& p = params_.layers.at(layer);
  return melt::block_forward(p, cfg_, x, attn_input(p, cfg_, x), keys, values, q_pos0);
}

LoopForward LoopLM::forward(std::span<const TokenId> tokens, std::optional<std::size_t> loops) const {
  const std::size_t n_loops = loops.value_or(cfg_.loops);
  if (n_loops == 0) throw std::invalid_argument("LoopLM::forward: loops must be >= 1");
  if (tokens.size() > cfg_.max_seq_len) {
    throw std::invalid_argument("LoopLM::forward: sequence longer than max_seq_len");
  }
  const std::size_t n_layers = cfg_.n_layers;
  LoopForward out;
  out.post_attn.assign(n_layers, {});
  std::vector<std::vector<Tensor>> ks(n_layers), vs(n_layers);
  Tensor x = embed(tokens);
  for (std::size_t t = 0; t < n_loops; ++t) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto& p = params_.layers[l];
      const Tensor normed = attn_input(p, cfg_, x);
      Tensor k = project_key(p, cfg_, normed, 0);
      Tensor v = project_value(p, normed);
      BlockOutput b = melt::block_forward(p, cfg_, x, normed, k, v, 0);
      ks[l].push_back(std::move(k));
      vs[l].push_back(std::move(v));
      out.post_attn[l].push_back(std::move(b.x_attn));
      x = std::move(b.x_next);
    }
    out.logits.push_back(lm_logits(params_, cfg_, x));
  }
  out.cache.set_exact(std::move(ks), std::move(vs), tokens.size());
  return out;
}

TokenId sample_token(std::span<const double> logits, const SamplingOptions& opts, Rng& rng) {
  if (logits.empty()) throw std::invalid_argument("sample_token: empty logits");
  if (opts.greedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  if (!(opts.temperature > 0.0)) throw std::invalid_argument("sample_token: temperature <= 0");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / opts.temperature);
    z += p[i];
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });
  double kept = 0.0;
  std::size_t n_keep = 0;
  while (n_keep < order.size()) {
    kept += p[order[n_keep]] / z;
    ++n_keep;
    if (kept >= opts.top_p) break;
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < n_keep; ++i) mass += p[order[i]];
  double u = uniform(rng, 0.0, mass);
  for (std::size_t i = 0; i < n_keep; ++i) {
    u -= p[order[i]];
    if (u < 0.0) return order[i];
  }
  return order[n_keep - 1];
}

LoopLMSession::LoopLMSession(const LoopLM& model, ShareStrategy strategy)
    : model_(&model),
      strategy_(strategy),
      cache_(model.config().n_layers, model.config().loops, model.config().hidden_dim) {}

std::vector<Tensor> LoopLMSession::step(TokenId token, bool is_prompt) {
  NoGradScope no_grad;
  const auto& cfg = model_->config();
  const std::size_t pos = cache_.tokens();
  if (pos >= cfg.max_seq_len) throw std::length_error("LoopLMSession: max_seq_len exceeded");
  const TokenId ids[] = {token};
  Tensor x = model_->embed(ids);
  std::vector<std::vector<Tensor>> ks(cfg.n_layers), vs(cfg.n_layers);
  std::vector<Tensor> logits;
  for (std::size_t t = 0; t < cfg.loops; ++t) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& p = model_->params().layers[l];
      const Tensor normed = attn_input(p, cfg, x);
      Tensor k = project_key(p, cfg, normed, pos);
      Tensor v = project_value(p, normed);
      const Tensor keys = concat_rows(cache_.keys(l, t), k);
      const Tensor vals = concat_rows(cache_.values(l, t), v);
      x = melt::block_forward(p, cfg, x, normed, keys, vals, pos).x_next;
      ks[l].push_back(std::move(k));
      vs[l].push_back(std::move(v));
    }
    logits.push_back(lm_logits(model_->params(), cfg, x));
  }
  const bool exact = strategy_.kind == ShareKind::none || (is_prompt && strategy_.keep_prompt_cache);
  if (exact) {
    cache_.append_exact(ks, vs);
  } else {
    const std::size_t keep = strategy_.kind == ShareKind::first_loop ? 0 : cfg.loops - 1;
    std::vector<Tensor> sk, sv;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      sk.push_back(ks[l][keep]);
      sv.push_back(vs[l][keep]);
    }
    cache_.append_shared(sk, sv);
  }
  return logits;
}

GenerateResult generate(const LoopLM& model, std::span<const TokenId> prompt, std::size_t max_new,
                        ShareStrategy strategy, const SamplingOptions& sampling,
                        std::uint64_t seed) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  Rng rng(seed);
  LoopLMSession session(model, strategy);
  std::vector<Tensor> logits;
  for (TokenId tok : prompt) logits = session.step(tok, true);
  GenerateResult res;
  for (std::size_t i = 0; i < max_new; ++i) {
    const TokenId next = sample_token(logits.back().row(0), sampling, rng);
    res.tokens.push_back(next);
    logits = session.step(next, false);
  }
  res.kv_elements = session.cache().element_count();
  return res;
}

}  // namespace melt
