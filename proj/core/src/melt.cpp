#include "melt/melt.hpp"

#include <stdexcept>

namespace melt {

GateParams init_gate_params(std::size_t dim, Rng& rng, double weight_bound, double bias) {
  GateParams gp{Tensor(Shape{dim, dim}), Tensor(Shape{dim, dim}), Tensor::full(Shape{dim}, bias)};
  for (auto& v : gp.w_z.mutable_data()) v = uniform(rng, -weight_bound, weight_bound);
  for (auto& v : gp.u_z.mutable_data()) v = uniform(rng, -weight_bound, weight_bound);
  gp.w_z.set_requires_grad(true);
  gp.u_z.set_requires_grad(true);
  gp.b_z.set_requires_grad(true);
  return gp;
}

GateVariant parse_gate_variant(const std::string& s) {
  if (s == "gated") return GateVariant::gated;
  if (s == "mean") return GateVariant::mean;
  if (s == "ema") return GateVariant::ema;
  if (s == "last") return GateVariant::last;
  if (s == "single_gated") return GateVariant::single_gated;
  throw std::invalid_argument("unknown gate variant '" + s + "'");
}

std::string to_string(GateVariant v) {
  switch (v) {
    case GateVariant::gated: return "gated";
    case GateVariant::mean: return "mean";
    case GateVariant::ema: return "ema";
    case GateVariant::last: return "last";
    case GateVariant::single_gated: return "single_gated";
  }
  return "?";
}

namespace {

Tensor gate_preactivation(const Tensor& x, const Tensor& h_prev, const GateParams& gp) {
  if (x.shape() != h_prev.shape()) {
    throw DimensionError("gated update: x " + to_string(x.shape()) + " vs h_prev " +
                         to_string(h_prev.shape()));
  }
  return add(add(matmul(x, gp.w_z), matmul(h_prev, gp.u_z)), gp.b_z);
}

Tensor mix(const Tensor& z, const Tensor& keep, const Tensor& input) {
  return add(mul(z, keep), mul(affine(z, -1.0, 1.0), input));
}

}  // namespace

GateOutput gated_update(const Tensor& x, const Tensor& h_prev, const GateParams& gp) {
  Tensor z = sigmoid(gate_preactivation(x, h_prev, gp));
  Tensor h = mix(z, h_prev, x);
  return {std::move(h), std::move(z)};
}

Tensor fixed_gate_update(const Tensor& x, const Tensor& h_prev, double z) {
  return mix(Tensor::full(x.shape(), z), h_prev, x);
}

Tensor variant_update(GateVariant variant, const Tensor& x, const Tensor& h_prev,
                      std::size_t loop, const GateParams& gp, const VariantOptions& opts) {
  if (loop < 2) {
    throw std::invalid_argument("variant_update: loop " + std::to_string(loop) +
                                " (loop 1 initializes h = x)");
  }
  switch (variant) {
    case GateVariant::gated: {
      if (opts.fault == GateFault::swapped) {
        const Tensor z = sigmoid(gate_preactivation(x, h_prev, gp));
        return mix(z, x, h_prev);
      }
      return gated_update(x, h_prev, gp).h;
    }
    case GateVariant::mean: {
      const double t = static_cast<double>(loop);
      return add(scale(h_prev, (t - 1.0) / t), scale(x, 1.0 / t));
    }
    case GateVariant::ema:
      return add(scale(h_prev, opts.ema_decay), scale(x, 1.0 - opts.ema_decay));
    case GateVariant::last:
      return x;
    case GateVariant::single_gated: {
      if (x.dim() != 2) {
        throw DimensionError("single_gated update expects row blocks, got " + to_string(x.shape()));
      }
      const Tensor zs = sigmoid(row_mean(gate_preactivation(x, h_prev, gp)));
      return mix(repeat_cols(zs, x.cols()), h_prev, x);
    }
  }
  throw std::invalid_argument("variant_update: unknown variant");
}

Tensor interpolate_kv(const Tensor& kv_melt, const Tensor& kv_base, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("interpolate_kv: alpha " + std::to_string(alpha) +
                                " outside [0, 1]");
  }
  if (kv_melt.shape() != kv_base.shape()) {
    throw DimensionError("interpolate_kv: " + to_string(kv_melt.shape()) + " vs " +
                         to_string(kv_base.shape()));
  }
  return add(scale(kv_melt, alpha), scale(kv_base, 1.0 - alpha));
}

// --- LatentKVState ----------------------------------------------------------

LatentKVState::LatentKVState(std::size_t n_layers, std::size_t dim, std::size_t loops,
                             bool chunk_mode)
    : dim_(dim), loops_(loops), chunk_mode_(chunk_mode) {
  layers_.resize(n_layers);
  for (auto& ly : layers_) {
    ly.h = Tensor(Shape{0, dim});
    ly.k = Tensor(Shape{0, dim});
    ly.v = Tensor(Shape{0, dim});
  }
}

std::size_t LatentKVState::element_count(bool include_latent) const {
  std::size_t n = 0;
  for (const auto& ly : layers_) {
    n += ly.k.size() + ly.v.size();
    if (include_latent) n += ly.h.size();
  }
  return n;
}

void LatentKVState::open(std::size_t rows) {
  if (pending_rows_ != 0) throw std::logic_error("LatentKVState: pending block not committed");
  if (rows == 0) throw std::invalid_argument("LatentKVState: empty block");
  if (!chunk_mode_ && rows != 1) {
    throw std::logic_error("LatentKVState: inference mode admits one new token at a time");
  }
  pending_rows_ = rows;
  for (auto& ly : layers_) ly.pending_loop = 0;
}

void LatentKVState::write(std::size_t layer, std::size_t first_pos, Tensor h, Tensor k, Tensor v,
                          std::uint32_t loop) {
  if (pending_rows_ == 0) throw std::logic_error("LatentKVState: write without an open block");
  if (first_pos != committed_) {
    if (!chunk_mode_) {
      throw std::logic_error("LatentKVState: update of position " + std::to_string(first_pos) +
                             " but the newest token is " + std::to_string(committed_) +
                             "; only chunk-wise mode may touch other rows");
    }
    throw std::logic_error("LatentKVState: write must target the pending block at " +
                           std::to_string(committed_));
  }
  auto& ly = layers_.at(layer);
  if (loop != ly.pending_loop + 1 || loop > loops_) {
    throw std::logic_error("LatentKVState: loop " + std::to_string(loop) + " after loop " +
                           std::to_string(ly.pending_loop));
  }
  for (const Tensor* t : {&h, &k, &v}) {
    if (t->dim() != 2 || t->rows() != pending_rows_ || t->cols() != dim_) {
      throw DimensionError("LatentKVState: pending rows " + to_string(t->shape()) + ", expected [" +
                           std::to_string(pending_rows_) + " x " + std::to_string(dim_) + "]");
    }
  }
  ly.ph = std::move(h);
  ly.pk = std::move(k);
  ly.pv = std::move(v);
  ly.pending_loop = loop;
}

void LatentKVState::commit() {
  if (pending_rows_ == 0) throw std::logic_error("LatentKVState: nothing to commit");
  const bool recording = active_tape() != nullptr;
  for (auto& ly : layers_) {
    if (ly.pending_loop != loops_) {
      throw std::logic_error("LatentKVState: commit after " + std::to_string(ly.pending_loop) +
                             " of " + std::to_string(loops_) + " loops");
    }
    if (recording) {
      ly.h = concat_rows(ly.h, ly.ph);
      ly.k = concat_rows(ly.k, ly.pk);
      ly.v = concat_rows(ly.v, ly.pv);
    } else {
      ly.h.append_rows(ly.ph);
      ly.k.append_rows(ly.pk);
      ly.v.append_rows(ly.pv);
    }
    ly.loops_done.insert(ly.loops_done.end(), pending_rows_, ly.pending_loop);
    ly.ph = ly.pk = ly.pv = Tensor();
    ly.pending_loop = 0;
  }
  committed_ += pending_rows_;
  pending_rows_ = 0;
}

void LatentKVState::note_committed_read(std::size_t layer) {
  ++committed_reads_;
  for (auto done : layers_.at(layer).loops_done) {
    if (done != loops_) ++nonfinal_reads_;
  }
}

// --- MeltModel --------------------------------------------------------------

MeltModel::MeltModel(LoopLM base, std::vector<GateParams> gates, MeltOptions opts)
    : base_(std::move(base)), gates_(std::move(gates)), opts_(opts) {
  if (gates_.size() != base_.config().n_layers) {
    throw std::invalid_argument("MeltModel: one GateParams per layer required");
  }
}

MeltModel MeltModel::from_looplm(const LoopLM& base, std::uint64_t gate_seed, MeltOptions opts) {
  Rng rng(gate_seed);
  std::vector<GateParams> gates;
  for (std::size_t l = 0; l < base.config().n_layers; ++l) {
    gates.push_back(init_gate_params(base.config().hidden_dim, rng));
  }
  LoopLM copy = base.clone();
  for (auto& [name, t] : copy.named_parameters()) t.set_requires_grad(true);
  return MeltModel(std::move(copy), std::move(gates), opts);
}

std::vector<NamedTensor> MeltModel::gate_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < gates_.size(); ++l) {
    const std::string pre = "gate." + std::to_string(l) + ".";
    out.emplace_back(pre + "w_z", gates_[l].w_z);
    out.emplace_back(pre + "u_z", gates_[l].u_z);
    out.emplace_back(pre + "b_z", gates_[l].b_z);
  }
  return out;
}

std::vector<NamedTensor> MeltModel::named_parameters() const {
  auto out = base_.named_parameters();
  for (auto& g : gate_parameters()) out.push_back(std::move(g));
  return out;
}

MeltModel MeltModel::clone() const {
  std::vector<GateParams> gates;
  for (const auto& g : gates_) gates.push_back({g.w_z.clone(), g.u_z.clone(), g.b_z.clone()});
  return MeltModel(base_.clone(), std::move(gates), opts_);
}

Tensor MeltModel::update_latent(std::size_t layer, const Tensor& x, const Tensor& h_prev,
                                std::size_t loop) const {
  return variant_update(opts_.variant, x, h_prev, loop, gates_[layer],
                        VariantOptions{opts_.ema_decay, opts_.fault});
}

MeltForward MeltModel::forward_chunked(std::span<const TokenId> tokens, std::size_t chunk_size,
                                       double alpha) const {
  if (chunk_size == 0) throw std::invalid_argument("forward_chunked: chunk_size must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("forward_chunked: alpha outside [0, 1]");
  }
  const auto& cfg = config();
  if (tokens.size() > cfg.max_seq_len) {
    throw std::invalid_argument("forward_chunked: sequence longer than max_seq_len");
  }
  const std::size_t n_layers = cfg.n_layers, n_loops = cfg.loops, d = cfg.hidden_dim;
  const std::size_t len = tokens.size();
  const bool blend = alpha < 1.0;

  MeltForward out;
  out.state = LatentKVState(n_layers, d, n_loops, true);
  auto& state = out.state;

  // Per-loop LoopLM K/V of committed tokens, only needed while blending.
  std::vector<std::vector<Tensor>> base_k(n_layers), base_v(n_layers);
  if (blend) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      base_k[l].assign(n_loops, Tensor(Shape{0, d}));
      base_v[l].assign(n_loops, Tensor(Shape{0, d}));
    }
  }
  std::vector<std::vector<Tensor>> logit_parts(n_loops);
  std::vector<std::vector<std::vector<Tensor>>> post_parts(
      n_layers, std::vector<std::vector<Tensor>>(n_loops));

  for (std::size_t s = 0; s < len; s += chunk_size) {
    const std::size_t e = std::min(len, s + chunk_size);
    state.open(e - s);
    ++out.chunks;
    Tensor x = base_.embed(tokens.subspan(s, e - s));
    std::vector<Tensor> h(n_layers);
    std::vector<std::vector<Tensor>> chunk_bk(n_layers), chunk_bv(n_layers);
    for (std::size_t t = 0; t < n_loops; ++t) {
      for (std::size_t l = 0; l < n_layers; ++l) {
        const auto& p = base_.params().layers[l];
        const Tensor normed = attn_input(p, cfg, x);
        h[l] = t == 0 ? normed : update_latent(l, normed, h[l], t + 1);
        Tensor k_cur = project_key(p, cfg, h[l], s);
        Tensor v_cur = project_value(p, h[l]);
        state.write(l, s, h[l], k_cur, v_cur, static_cast<std::uint32_t>(t + 1));
        state.note_committed_read(l);
        Tensor k_prior = state.K(l);
        Tensor v_prior = state.V(l);
        if (blend) {
          Tensor kb = project_key(p, cfg, normed, s);
          Tensor vb = project_value(p, normed);
          k_cur = interpolate_kv(k_cur, kb, alpha);
          v_cur = interpolate_kv(v_cur, vb, alpha);
          k_prior = interpolate_kv(k_prior, base_k[l][t], alpha);
          v_prior = interpolate_kv(v_prior, base_v[l][t], alpha);
          chunk_bk[l].push_back(std::move(kb));
          chunk_bv[l].push_back(std::move(vb));
        }
        const Tensor keys = s == 0 ? k_cur : concat_rows(k_prior, k_cur);
        const Tensor vals = s == 0 ? v_cur : concat_rows(v_prior, v_cur);
        BlockOutput b = block_forward(p, cfg, x, normed, keys, vals, s);
        post_parts[l][t].push_back(std::move(b.x_attn));
        x = std::move(b.x_next);
      }
      logit_parts[t].push_back(lm_logits(base_.params(), cfg, x));
    }
    state.commit();
    if (blend) {
      for (std::size_t l = 0; l < n_layers; ++l) {
        for (std::size_t t = 0; t < n_loops; ++t) {
          base_k[l][t] = concat_rows(base_k[l][t], chunk_bk[l][t]);
          base_v[l][t] = concat_rows(base_v[l][t], chunk_bv[l][t]);
        }
      }
    }
  }

  auto join = [](std::vector<Tensor>& parts, std::size_t cols) {
    if (parts.empty()) return Tensor(Shape{0, cols});
    if (parts.size() == 1) return parts.front();
    return concat_rows(std::span<const Tensor>(parts));
  };
  for (std::size_t t = 0; t < n_loops; ++t) out.logits.push_back(join(logit_parts[t], cfg.vocab_size));
  out.post_attn.assign(n_layers, {});
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t t = 0; t < n_loops; ++t) out.post_attn[l].push_back(join(post_parts[l][t], d));
  }
  return out;
}

// --- MeltSession ------------------------------------------------------------

MeltSession::MeltSession(const MeltModel& model)
    : model_(&model),
      state_(model.config().n_layers, model.config().hidden_dim, model.config().loops, false) {}

std::vector<Tensor> MeltSession::step(TokenId token) {
  NoGradScope no_grad;
  const auto& cfg = model_->config();
  const std::size_t pos = state_.tokens();
  if (pos >= cfg.max_seq_len) throw std::length_error("MeltSession: max_seq_len exceeded");
  state_.open(1);
  const TokenId ids[] = {token};
  Tensor x = model_->base().embed(ids);
  std::vector<Tensor> h(cfg.n_layers);
  std::vector<Tensor> logits;
  for (std::size_t t = 0; t < cfg.loops; ++t) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& p = model_->base().params().layers[l];
      const Tensor normed = attn_input(p, cfg, x);
      h[l] = t == 0 ? normed : model_->update_latent(l, normed, h[l], t + 1);
      Tensor k = project_key(p, cfg, h[l], pos);
      Tensor v = project_value(p, h[l]);
      const Tensor keys = concat_rows(state_.K(l), k);
      const Tensor vals = concat_rows(state_.V(l), v);
      state_.write(l, pos, h[l], std::move(k), std::move(v), static_cast<std::uint32_t>(t + 1));
      x = block_forward(p, cfg, x, normed, keys, vals, pos).x_next;
    }
    logits.push_back(lm_logits(model_->base().params(), cfg, x));
  }
  state_.commit();
  return logits;
}

GenerateResult generate(const MeltModel& model, std::span<const TokenId> prompt,
                        std::size_t max_new, const SamplingOptions& sampling, std::uint64_t seed) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  Rng rng(seed);
  MeltSession session(model);
  std::vector<Tensor> logits;
  for (TokenId tok : prompt) logits = session.step(tok);
  GenerateResult res;
  for (std::size_t i = 0; i < max_new; ++i) {
    const TokenId next = sample_token(logits.back().row(0), sampling, rng);
    res.tokens.push_back(next);
    logits = session.step(next);
  }
  res.kv_elements = session.state().element_count(false);
  return res;
}

}  // namespace melt
