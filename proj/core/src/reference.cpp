#include "melt/reference.hpp"

#include <cmath>
#include <stdexcept>

namespace melt::reference {

namespace {

using Vec = std::vector<double>;

// x[k] * W[k x n]
Vec vecmat(const Vec& x, const Tensor& w) {
  const std::size_t k = w.rows(), n = w.cols();
  Vec out(n, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i] * w.at(i, j);
  }
  return out;
}

Vec rmsnorm(const Vec& x, const Tensor& w, double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(ms + eps);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * w.at(i);
  return out;
}

Vec rotate(const Vec& x, std::size_t heads, std::size_t pos, double base) {
  const std::size_t dh = x.size() / heads;
  Vec out(x);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const double th = static_cast<double>(pos) *
                        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const std::size_t a = h * dh + 2 * i;
      out[a] = x[a] * std::cos(th) - x[a + 1] * std::sin(th);
      out[a + 1] = x[a] * std::sin(th) + x[a + 1] * std::cos(th);
    }
  }
  return out;
}

double sigm(double u) { return 1.0 / (1.0 + std::exp(-u)); }

double gelu1(double x) {
  return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

// Attention for one query over keys/values rows 0..n-1 (all visible).
Vec attend(const Vec& q, const std::vector<Vec>& keys, const std::vector<Vec>& vals,
           std::size_t heads) {
  const std::size_t d = q.size(), dh = d / heads;
  Vec out(d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    Vec s(keys.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < keys.size(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < dh; ++c) dot += q[h * dh + c] * keys[j][h * dh + c];
      s[j] = dot / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& v : s) {
      v = std::exp(v - mx);
      z += v;
    }
    for (std::size_t j = 0; j < keys.size(); ++j) {
      for (std::size_t c = 0; c < dh; ++c) out[h * dh + c] += s[j] / z * vals[j][h * dh + c];
    }
  }
  return out;
}

// Rest of the block once K/V are known: attention, residual, FFN.
Vec finish_block(const LayerParams& p, const ModelConfig& cfg, const Vec& x, const Vec& normed,
                 const std::vector<Vec>& keys, const std::vector<Vec>& vals, std::size_t pos) {
  const Vec q = rotate(vecmat(normed, p.wq), cfg.n_heads, pos, cfg.rope_base);
  const Vec a = vecmat(attend(q, keys, vals, cfg.n_heads), p.wo);
  Vec xa(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xa[i] = x[i] + a[i];
  Vec hid = vecmat(rmsnorm(xa, p.ffn_norm, cfg.norm_eps), p.w1);
  for (std::size_t i = 0; i < hid.size(); ++i) hid[i] = gelu1(hid[i] + p.b1.at(i));
  const Vec f = vecmat(hid, p.w2);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = xa[i] + f[i] + p.b2.at(i);
  return out;
}

Vec logits_of(const LoopLMParams& p, const ModelConfig& cfg, const Vec& x) {
  return vecmat(rmsnorm(x, p.final_norm, cfg.norm_eps), p.lm_head);
}

Vec embed_row(const LoopLMParams& p, TokenId tok) {
  if (tok >= p.embedding.rows()) throw std::out_of_range("reference: token out of range");
  auto r = p.embedding.row(tok);
  return Vec(r.begin(), r.end());
}

Vec latent_update(const MeltModel& m, std::size_t layer, const Vec& x, const Vec& hp,
                  std::size_t loop) {
  const std::size_t d = x.size();
  const auto& g = m.gates()[layer];
  Vec h(d);
  auto pre = [&] {
    Vec u(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) u[j] += x[i] * g.w_z.at(i, j) + hp[i] * g.u_z.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) u[j] += g.b_z.at(j);
    return u;
  };
  switch (m.options().variant) {
    case GateVariant::gated: {
      const Vec u = pre();
      for (std::size_t j = 0; j < d; ++j) {
        const double z = sigm(u[j]);
        h[j] = z * hp[j] + (1.0 - z) * x[j];
      }
      break;
    }
    case GateVariant::single_gated: {
      const Vec u = pre();
      double s = 0.0;
      for (double v : u) s += v;
      const double z = sigm(s / static_cast<double>(d));
      for (std::size_t j = 0; j < d; ++j) h[j] = z * hp[j] + (1.0 - z) * x[j];
      break;
    }
    case GateVariant::mean: {
      const double t = static_cast<double>(loop);
      for (std::size_t j = 0; j < d; ++j) h[j] = (hp[j] * (t - 1.0) + x[j]) / t;
      break;
    }
    case GateVariant::ema: {
      const double a = m.options().ema_decay;
      for (std::size_t j = 0; j < d; ++j) h[j] = a * hp[j] + (1.0 - a) * x[j];
      break;
    }
    case GateVariant::last:
      h = x;
      break;
  }
  return h;
}

}  // namespace

LoopLogits looplm_logits(const LoopLM& model, std::span<const TokenId> tokens) {
  const auto& cfg = model.config();
  const auto& P = model.params();
  // cache[layer][loop] -> rows
  std::vector<std::vector<std::vector<Vec>>> kc(cfg.n_layers,
                                                std::vector<std::vector<Vec>>(cfg.loops));
  auto vc = kc;
  LoopLogits out;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    Vec x = embed_row(P, tokens[pos]);
    std::vector<Vec> per_loop;
    for (std::size_t t = 0; t < cfg.loops; ++t) {
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& p = P.layers[l];
        const Vec n = rmsnorm(x, p.attn_norm, cfg.norm_eps);
        kc[l][t].push_back(rotate(vecmat(n, p.wk), cfg.n_heads, pos, cfg.rope_base));
        vc[l][t].push_back(vecmat(n, p.wv));
        x = finish_block(p, cfg, x, n, kc[l][t], vc[l][t], pos);
      }
      per_loop.push_back(logits_of(P, cfg, x));
    }
    out.push_back(std::move(per_loop));
  }
  return out;
}

LoopLogits melt_logits(const MeltModel& model, std::span<const TokenId> tokens,
                       LatentProbe* probe) {
  const auto& cfg = model.config();
  const auto& P = model.base().params();
  std::vector<std::vector<Vec>> kc(cfg.n_layers), vc(cfg.n_layers);  // final rows per layer
  LoopLogits out;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    Vec x = embed_row(P, tokens[pos]);
    std::vector<Vec> h(cfg.n_layers);
    std::vector<Vec> per_loop;
    for (std::size_t t = 1; t <= cfg.loops; ++t) {
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& p = P.layers[l];
        const Vec n = rmsnorm(x, p.attn_norm, cfg.norm_eps);
        h[l] = t == 1 ? n : latent_update(model, l, n, h[l], t);
        if (probe && probe->position == pos && probe->layer == l) {
          if (probe->loop == t) {
            probe->h_before = h[l];
            for (std::size_t i = 0; i < h[l].size() && i < probe->delta.size(); ++i) {
              h[l][i] += probe->delta[i];
            }
          } else if (probe->loop + 1 == t) {
            probe->h_after = h[l];
            probe->x_after = n;
          }
        }
        auto keys = kc[l];
        auto vals = vc[l];
        keys.push_back(rotate(vecmat(h[l], p.wk), cfg.n_heads, pos, cfg.rope_base));
        vals.push_back(vecmat(h[l], p.wv));
        x = finish_block(p, cfg, x, n, keys, vals, pos);
        if (t == cfg.loops) {
          kc[l].push_back(keys.back());
          vc[l].push_back(vals.back());
        }
      }
      per_loop.push_back(logits_of(P, cfg, x));
    }
    out.push_back(std::move(per_loop));
  }
  return out;
}

}  // namespace melt::reference
