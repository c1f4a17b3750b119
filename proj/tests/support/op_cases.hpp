#pragma once

// One random-input generator and op per differentiable primitive, shared by
// the unit tests and the acceptance runner.

#include <functional>
#include <vector>

#include "gradcheck.hpp"
#include "melt/ops.hpp"

namespace melt::testing {

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
};

inline std::vector<OpCase> op_cases() {
  auto shape2 = [](Rng& rng) {
    return Shape{1 + rng() % 4, 1 + rng() % 5};
  };
  std::vector<OpCase> c;
  c.push_back({"matmul",
               [](Rng& r) {
                 const std::size_t n = 1 + r() % 4, k = 1 + r() % 4, m = 1 + r() % 4;
                 return std::vector{random_tensor({n, k}, r), random_tensor({k, m}, r)};
               },
               [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }});
  c.push_back({"add_broadcast",
               [shape2](Rng& r) {
                 const Shape s = shape2(r);
                 return std::vector{random_tensor(s, r), random_tensor({s[1]}, r)};
               },
               [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }});
  c.push_back({"sub",
               [shape2](Rng& r) {
                 const Shape s = shape2(r);
                 return std::vector{random_tensor(s, r), random_tensor(s, r)};
               },
               [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); }});
  c.push_back({"mul_broadcast",
               [shape2](Rng& r) {
                 const Shape s = shape2(r);
                 return std::vector{random_tensor(s, r), random_tensor({s[1]}, r)};
               },
               [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }});
  c.push_back({"affine", [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r)}; },
               [](const std::vector<Tensor>& in) { return affine(in[0], -1.7, 0.3); }});
  c.push_back({"sigmoid", [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r, -4, 4)}; },
               [](const std::vector<Tensor>& in) { return sigmoid(in[0]); }});
  c.push_back({"gelu", [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r, -3, 3)}; },
               [](const std::vector<Tensor>& in) { return gelu(in[0]); }});
  c.push_back({"softmax_rows", [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r, -3, 3)}; },
               [](const std::vector<Tensor>& in) { return softmax_rows(in[0]); }});
  c.push_back({"softmax_rows_causal",
               [](Rng& r) {
                 const std::size_t n = 1 + r() % 4;
                 return std::vector{random_tensor({n, n + 2}, r, -3, 3)};
               },
               [](const std::vector<Tensor>& in) { return softmax_rows(in[0], CausalMask{2}); }});
  c.push_back({"log_softmax_rows",
               [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r, -3, 3)}; },
               [](const std::vector<Tensor>& in) { return log_softmax_rows(in[0]); }});
  c.push_back({"rms_norm",
               [shape2](Rng& r) {
                 const Shape s = shape2(r);
                 return std::vector{random_tensor(s, r), random_tensor({s[1]}, r)};
               },
               [](const std::vector<Tensor>& in) { return rms_norm(in[0], in[1], 1e-6); }});
  c.push_back({"rope",
               [](Rng& r) {
                 const std::size_t heads = 1 + r() % 2, hd = 2 * (1 + r() % 2);
                 return std::vector{random_tensor({1 + r() % 4, heads * hd}, r),
                                    Tensor::scalar(static_cast<double>(heads))};
               },
               [](const std::vector<Tensor>& in) {
                 return rope(in[0], static_cast<std::size_t>(in[1].item()), 3, 10000.0);
               }});
  c.push_back({"attention",
               [](Rng& r) {
                 const std::size_t heads = 1 + r() % 2, hd = 1 + r() % 3, d = heads * hd;
                 const std::size_t n = 1 + r() % 3, pos0 = r() % 3;
                 return std::vector{random_tensor({n, d}, r), random_tensor({n + pos0, d}, r),
                                    random_tensor({n + pos0, d}, r),
                                    Tensor::scalar(static_cast<double>(heads)),
                                    Tensor::scalar(static_cast<double>(pos0))};
               },
               [](const std::vector<Tensor>& in) {
                 return attention(in[0], in[1], in[2], static_cast<std::size_t>(in[3].item()),
                                  static_cast<std::size_t>(in[4].item()));
               }});
  c.push_back({"embedding",
               [](Rng& r) { return std::vector{random_tensor({5, 1 + r() % 4}, r)}; },
               [](const std::vector<Tensor>& in) {
                 const std::vector<TokenId> ids{4, 0, 4, 2};
                 return embedding(in[0], ids);
               }});
  c.push_back({"concat_rows",
               [](Rng& r) {
                 const std::size_t d = 1 + r() % 4;
                 return std::vector{random_tensor({1 + r() % 3, d}, r), random_tensor({1 + r() % 3, d}, r)};
               },
               [](const std::vector<Tensor>& in) { return concat_rows(in[0], in[1]); }});
  c.push_back({"slice_rows", [](Rng& r) { return std::vector{random_tensor({4, 1 + r() % 4}, r)}; },
               [](const std::vector<Tensor>& in) { return slice_rows(in[0], 1, 3); }});
  c.push_back({"repeat_cols", [](Rng& r) { return std::vector{random_tensor({1 + r() % 4, 1}, r)}; },
               [](const std::vector<Tensor>& in) { return repeat_cols(in[0], 3); }});
  c.push_back({"row_mean", [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r)}; },
               [](const std::vector<Tensor>& in) { return row_mean(in[0]); }});
  c.push_back({"mean", [shape2](Rng& r) { return std::vector{random_tensor(shape2(r), r)}; },
               [](const std::vector<Tensor>& in) { return mean(in[0]); }});
  c.push_back({"pick",
               [](Rng& r) { return std::vector{random_tensor({3, 4}, r)}; },
               [](const std::vector<Tensor>& in) {
                 const std::vector<std::size_t> idx{3, 0, 2};
                 return pick(in[0], idx);
               }});
  return c;
}

/// sum(op(inputs) * r) for fixed random r; scalar inputs are passed through
/// undifferentiated as integer configuration.
inline GradCheck check_op(const OpCase& oc, Rng& rng) {
  auto inputs = oc.inputs(rng);
  std::vector<Tensor> params, fixed;
  for (auto& t : inputs) (t.dim() == 0 ? fixed : params).push_back(t);
  Tensor probe;
  {
    NoGradScope ng;
    probe = oc.op(inputs);
  }
  const Tensor r = random_tensor(probe.shape(), rng);
  auto loss = [&](const std::vector<Tensor>& p) {
    std::vector<Tensor> all = p;
    all.insert(all.end(), fixed.begin(), fixed.end());
    return sum(mul(oc.op(all), r));
  };
  return check_gradients(loss, params);
}

}  // namespace melt::testing
