#include "melt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace melt {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Attach a backward rule to `out` when recording is active and some input
// needs a gradient. `bw` receives the output node (with its grad filled in).
template <class F>
Tensor record(std::string_view op, Tensor out, std::initializer_list<const Tensor*> inputs,
              F&& bw) {
  Tape* tape = active_tape();
  if (tape == nullptr || !any_requires_grad(inputs)) return out;
  NodePtr o = out.node();
  o->requires_grad = true;
  o->is_leaf = false;
  std::vector<NodePtr> in;
  in.reserve(inputs.size());
  for (const Tensor* t : inputs) in.push_back(t->node());
  tape->record(Tape::Record{op, std::move(in), o,
                            [o, fn = std::forward<F>(bw)]() { fn(*o); }});
  return out;
}

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) +
                       " and " + to_string(b.shape()));
}

bool is_trailing(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + to_string(t.shape()));
  }
}

enum class BinOp { add, sub, mul };

Tensor binary(std::string_view name, BinOp op, const Tensor& a, const Tensor& b) {
  if (!is_trailing(a.shape(), b.shape())) shape_error(name, a, b);
  const std::size_t n = a.size();
  const std::size_t nb = b.size();
  Tensor out(a.shape());
  if (n == 0) return out;
  auto o = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double y = bv[i % nb];
    switch (op) {
      case BinOp::add: o[i] = av[i] + y; break;
      case BinOp::sub: o[i] = av[i] - y; break;
      case BinOp::mul: o[i] = av[i] * y; break;
    }
  }
  NodePtr an = a.node(), bn = b.node();
  return record(name, std::move(out), {&a, &b}, [an, bn, op, n, nb](TensorNode& o) {
    const auto& g = o.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += op == BinOp::mul ? g[i] * bn->value[i % nb] : g[i];
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (op == BinOp::sub) d = -d;
        if (op == BinOp::mul) d *= an->value[i];
        gb[i % nb] += d;
      }
    }
  });
}

// c[m x n] += a[m x k] b[k x n]; four rows of a share each load of b.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a[i * k + p], a1 = a[(i + 1) * k + p];
      const double a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = bp[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// ga[m x k] += g[m x n] b^T, as dot products with four partial sums.
void gemm_nt_acc(const double* g, const double* b, double* ga, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        s0 += gi[j] * bp[j];
        s1 += gi[j + 1] * bp[j + 1];
        s2 += gi[j + 2] * bp[j + 2];
        s3 += gi[j + 3] * bp[j + 3];
      }
      for (; j < n; ++j) s0 += gi[j] * bp[j];
      ga[i * k + p] += (s0 + s1) + (s2 + s3);
    }
  }
}

// gb[k x n] += a^T g
void gemm_tn_acc(const double* a, const double* g, double* gb, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    double* gbp = gb + p * n;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      const double a0 = a[i * k + p], a1 = a[(i + 1) * k + p];
      const double a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
      const double* g0 = g + i * n;
      const double* g1 = g0 + n;
      const double* g2 = g1 + n;
      const double* g3 = g2 + n;
      for (std::size_t j = 0; j < n; ++j) gbp[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
    }
    for (; i < m; ++i) {
      const double aip = a[i * k + p];
      const double* gi = g + i * n;
      for (std::size_t j = 0; j < n; ++j) gbp[j] += aip * gi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.dim() != 2 || (a.dim() != 1 && a.dim() != 2)) shape_error("matmul", a, b);
  const std::size_t m = a.dim() == 2 ? a.shape()[0] : 1;
  const std::size_t k = a.cols();
  const std::size_t n = b.shape()[1];
  if (b.shape()[0] != k) shape_error("matmul", a, b);
  Tensor out(a.dim() == 2 ? Shape{m, n} : Shape{n});
  gemm_acc(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  NodePtr an = a.node(), bn = b.node();
  return record("matmul", std::move(out), {&a, &b}, [an, bn, m, k, n](TensorNode& o) {
    if (an->requires_grad) {
      gemm_nt_acc(o.grad.data(), bn->value.data(), an->ensure_grad().data(), m, k, n);
    }
    if (bn->requires_grad) {
      gemm_tn_acc(an->value.data(), o.grad.data(), bn->ensure_grad().data(), m, k, n);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::mul, a, b); }

Tensor affine(const Tensor& a, double s, double shift) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) o[i] = s * av[i] + shift;
  NodePtr an = a.node();
  return record("affine", std::move(out), {&a}, [an, s](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * o.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    if (x >= 0) {
      o[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      o[i] = e / (1.0 + e);
    }
  }
  NodePtr an = a.node();
  return record("sigmoid", std::move(out), {&a}, [an](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double y = o.value[i];
      ga[i] += o.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    o[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  NodePtr an = a.node();
  return record("gelu", std::move(out), {&a}, [an](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = an->value[i];
      const double u = kC * (x + kA * x * x * x);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * x * x);
      ga[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

Tensor softmax_rows(const Tensor& x, std::optional<CausalMask> mask) {
  if (x.dim() == 0 || x.cols() == 0) {
    throw DimensionError("softmax_rows: last dimension must be >= 1, got " + to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t visible = n;
    if (mask) {
      const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(r) + mask->offset;
      visible = last < 0 ? 0 : std::min<std::size_t>(n, static_cast<std::size_t>(last) + 1);
    }
    double mx = kNegInf;
    for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, xv[r * n + j]);
    if (mx == kNegInf) {
      throw NumericError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < visible; ++j) {
      const double e = std::exp(xv[r * n + j] - mx);
      o[r * n + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < visible; ++j) o[r * n + j] /= s;
  }
  NodePtr xn = x.node();
  return record("softmax_rows", std::move(out), {&x}, [xn, n, rows](TensorNode& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = o.value.data() + r * n;
      const double* g = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  if (x.dim() == 0 || x.cols() == 0) {
    throw DimensionError("log_softmax_rows: last dimension must be >= 1, got " +
                         to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = xr[j] - lse;
  }
  NodePtr xn = x.node();
  return record("log_softmax_rows", std::move(out), {&x}, [xn, n, rows](TensorNode& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* ls = o.value.data() + r * n;
      const double* g = o.grad.data() + r * n;
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[j] - std::exp(ls[j]) * gs;
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  if (x.dim() == 0 || weight.dim() != 1 || weight.size() != x.cols() || x.cols() == 0) {
    shape_error("rms_norm", x, weight);
  }
  if (!(eps > 0.0)) throw std::invalid_argument("rms_norm: eps must be positive");
  const std::size_t d = x.cols();
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  std::vector<double> inv(rows);
  auto o = out.mutable_data();
  auto xv = x.data();
  auto w = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xv[r * d + j] * xv[r * d + j];
    ms /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = xv[r * d + j] * inv[r] * w[j];
  }
  NodePtr xn = x.node(), wn = weight.node();
  return record("rms_norm", std::move(out), {&x, &weight},
                [xn, wn, inv = std::move(inv), d, rows](TensorNode& o) {
                  const double* g = o.grad.data();
                  if (wn->requires_grad) {
                    auto& gw = wn->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < d; ++j) {
                        gw[j] += g[r * d + j] * xn->value[r * d + j] * inv[r];
                      }
                    }
                  }
                  if (xn->requires_grad) {
                    auto& gx = xn->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double xh = xn->value[r * d + j] * inv[r];
                        dot += g[r * d + j] * wn->value[j] * xh;
                      }
                      dot /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const double xh = xn->value[r * d + j] * inv[r];
                        gx[r * d + j] += inv[r] * (g[r * d + j] * wn->value[j] - xh * dot);
                      }
                    }
                  }
                });
}

Tensor rope(const Tensor& x, std::size_t n_heads, std::size_t pos0, double base) {
  require_matrix("rope", x);
  const std::size_t d = x.cols();
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(d) + " does not split into " +
                         std::to_string(n_heads) + " even-sized heads");
  }
  const std::size_t rows = x.rows();
  const std::size_t dh = d / n_heads;
  const std::size_t half = dh / 2;
  std::vector<double> cs(rows * half), sn(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(pos0 + r);
    for (std::size_t i = 0; i < half; ++i) {
      const double theta =
          pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cs[r * half + i] = std::cos(theta);
      sn[r * half + i] = std::sin(theta);
    }
  }
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t j = r * d + h * dh + 2 * i;
        const double c = cs[r * half + i], s = sn[r * half + i];
        o[j] = xv[j] * c - xv[j + 1] * s;
        o[j + 1] = xv[j] * s + xv[j + 1] * c;
      }
    }
  }
  NodePtr xn = x.node();
  return record("rope", std::move(out), {&x},
                [xn, cs = std::move(cs), sn = std::move(sn), rows, n_heads, d, dh,
                 half](TensorNode& o) {
                  auto& gx = xn->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      for (std::size_t i = 0; i < half; ++i) {
                        const std::size_t j = r * d + h * dh + 2 * i;
                        const double c = cs[r * half + i], s = sn[r * half + i];
                        gx[j] += o.grad[j] * c + o.grad[j + 1] * s;
                        gx[j + 1] += -o.grad[j] * s + o.grad[j + 1] * c;
                      }
                    }
                  }
                });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::size_t q_pos0) {
  require_matrix("attention", q);
  require_matrix("attention", k);
  require_matrix("attention", v);
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != m) shape_error("attention", q, k);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (m != q_pos0 + n) {
    throw DimensionError("attention: cache holds " + std::to_string(m) + " positions but " +
                         std::to_string(n) + " queries start at position " +
                         std::to_string(q_pos0));
  }
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h][i][j], j limited to the visible prefix q_pos0 + i + 1
  std::vector<double> probs(n_heads * n * m, 0.0);
  Tensor out(Shape{n, d});
  auto o = out.mutable_data();
  auto qv = q.data(), kv = k.data(), vv = v.data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t vis = q_pos0 + i + 1;
      double* p = probs.data() + (h * n + i) * m;
      const double* qi = qv.data() + i * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < vis; ++j) {
        const double* kj = kv.data() + j * d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < vis; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < vis; ++j) p[j] /= z;
      double* oi = o.data() + i * d + h * dh;
      for (std::size_t j = 0; j < vis; ++j) {
        const double* vj = vv.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  NodePtr qn = q.node(), kn = k.node(), vn = v.node();
  return record(
      "attention", std::move(out), {&q, &k, &v},
      [qn, kn, vn, probs = std::move(probs), n, m, d, dh, n_heads, q_pos0, sc](TensorNode& o) {
        const double* g = o.grad.data();
        const bool need_q = qn->requires_grad, need_k = kn->requires_grad,
                   need_v = vn->requires_grad;
        double* gq = need_q ? qn->ensure_grad().data() : nullptr;
        double* gk = need_k ? kn->ensure_grad().data() : nullptr;
        double* gv = need_v ? vn->ensure_grad().data() : nullptr;
        std::vector<double> dp(m);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t vis = q_pos0 + i + 1;
            const double* p = probs.data() + (h * n + i) * m;
            const double* gi = g + i * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < vis; ++j) {
              const double* vj = vn->value.data() + j * d + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              if (gv) {
                double* gvj = gv + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * gi[c];
              }
            }
            const double* qi = qn->value.data() + i * d + h * dh;
            for (std::size_t j = 0; j < vis; ++j) {
              const double ds = p[j] * (dp[j] - dot) * sc;
              if (ds == 0.0) continue;
              const double* kj = kn->value.data() + j * d + h * dh;
              if (gq) {
                double* gqi = gq + i * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                double* gkj = gk + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_matrix("embedding", table);
  const std::size_t vocab = table.rows(), d = table.cols();
  Tensor out(Shape{ids.size(), d});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    auto r = table.row(ids[i]);
    std::copy(r.begin(), r.end(), o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  NodePtr tn = table.node();
  std::vector<TokenId> idv(ids.begin(), ids.end());
  return record("embedding", std::move(out), {&table}, [tn, idv = std::move(idv), d](TensorNode& o) {
    auto& gt = tn->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += o.grad[i * d + j];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p);
    if (p.cols() != d) shape_error("concat_rows", parts.front(), p);
    rows += p.rows();
  }
  Tensor out(Shape{rows, d});
  auto o = out.mutable_data();
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(at));
    at += p.size();
  }
  Tape* tape = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape == nullptr || !any) return out;
  NodePtr on = out.node();
  on->requires_grad = true;
  on->is_leaf = false;
  std::vector<NodePtr> in;
  for (const auto& p : parts) in.push_back(p.node());
  tape->record(Tape::Record{"concat_rows", in, on, [on, in]() {
                              std::size_t at = 0;
                              for (const auto& p : in) {
                                const std::size_t sz = p->value.size();
                                if (p->requires_grad) {
                                  auto& gp = p->ensure_grad();
                                  for (std::size_t i = 0; i < sz; ++i) gp[i] += on->grad[at + i];
                                }
                                at += sz;
                              }
                            }});
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_rows(std::span<const Tensor>(parts));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix("slice_rows", a);
  if (begin > end || end > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + to_string(a.shape()));
  }
  const std::size_t d = a.cols();
  Tensor out(Shape{end - begin, d},
             std::vector<double>(a.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                                 a.data().begin() + static_cast<std::ptrdiff_t>(end * d)));
  NodePtr an = a.node();
  return record("slice_rows", std::move(out), {&a}, [an, begin, d](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[begin * d + i] += o.grad[i];
  });
}

Tensor repeat_cols(const Tensor& a, std::size_t cols) {
  require_matrix("repeat_cols", a);
  if (a.cols() != 1) throw DimensionError("repeat_cols: expected [n x 1], got " + to_string(a.shape()));
  const std::size_t n = a.rows();
  Tensor out(Shape{n, cols});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cols; ++j) o[i * cols + j] = a.at(i);
  }
  NodePtr an = a.node();
  return record("repeat_cols", std::move(out), {&a}, [an, n, cols](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cols; ++j) ga[i] += o.grad[i * cols + j];
    }
  });
}

Tensor row_mean(const Tensor& a) {
  require_matrix("row_mean", a);
  const std::size_t n = a.rows(), d = a.cols();
  if (d == 0) throw DimensionError("row_mean: zero-width rows");
  Tensor out(Shape{n, 1});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a.at(i, j);
    o[i] = s / static_cast<double>(d);
  }
  NodePtr an = a.node();
  return record("row_mean", std::move(out), {&a}, [an, n, d](TensorNode& o) {
    auto& ga = an->ensure_grad();
    const double inv = 1.0 / static_cast<double>(d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += o.grad[i] * inv;
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  NodePtr an = a.node();
  return record("sum", Tensor::scalar(s), {&a}, [an](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (auto& g : ga) g += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor pick(const Tensor& a, std::span<const std::size_t> idx) {
  require_matrix("pick", a);
  const std::size_t n = a.rows(), c = a.cols();
  if (idx.size() != n) {
    throw DimensionError("pick: " + std::to_string(idx.size()) + " indices for " +
                         to_string(a.shape()));
  }
  Tensor out(Shape{n});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= c) throw std::out_of_range("pick: column index out of range");
    o[i] = a.at(i, idx[i]);
  }
  NodePtr an = a.node();
  std::vector<std::size_t> iv(idx.begin(), idx.end());
  return record("pick", std::move(out), {&a}, [an, iv = std::move(iv), c](TensorNode& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < iv.size(); ++i) ga[i * c + iv[i]] += o.grad[i];
  });
}

}  // namespace melt
