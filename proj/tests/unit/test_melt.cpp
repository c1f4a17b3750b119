#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "melt/melt.hpp"
#include "melt/reference.hpp"

namespace melt {
namespace {

ModelConfig tiny(std::size_t loops = 3) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 16;
  c.n_heads = 2;
  c.loops = loops;
  c.vocab_size = 11;
  c.ffn_dim = 24;
  c.max_seq_len = 64;
  return c;
}

MeltModel tiny_melt(std::size_t loops, std::uint64_t seed, MeltOptions opts = {}) {
  return MeltModel::from_looplm(LoopLM::random(tiny(loops), seed), seed + 1, opts);
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = rng() % 11;
  return t;
}

GateParams constant_gate(std::size_t d, double w, double u, double b) {
  return {Tensor({d, d}, w), Tensor({d, d}, u), Tensor({d}, b)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

TEST(Gate, SaturatedOpenKeepsState) {
  Rng rng(1);
  const Tensor x = testing::random_tensor({4}, rng), h = testing::random_tensor({4}, rng);
  EXPECT_LE(max_abs_diff(gated_update(x, h, constant_gate(4, 0, 0, 40)).h, h), 1e-12);
  EXPECT_LE(max_abs_diff(gated_update(x, h, constant_gate(4, 0, 0, -40)).h, x), 1e-12);
}

TEST(Gate, ZeroParamsGiveMidpoint) {
  const auto out = gated_update(Tensor(Shape{1}, 1.0), Tensor(Shape{1}, 0.0), constant_gate(1, 0, 0, 0));
  EXPECT_EQ(out.z.item(), 0.5);
  EXPECT_EQ(out.h.item(), 0.5);
}

TEST(Gate, EveryGateInOpenUnitInterval) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng() % 8;
    Rng init(trial);
    const GateParams gp = init_gate_params(d, init, 0.5, uniform(rng, -3, 3));
    const auto out = gated_update(testing::random_tensor({3, d}, rng), testing::random_tensor({3, d}, rng), gp);
    for (double z : out.z.data()) {
      ASSERT_GT(z, 0.0);
      ASSERT_LT(z, 1.0);
    }
  }
}

TEST(Gate, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng() % 5;
    Rng init(trial);
    const GateParams gp = init_gate_params(d, init, 0.5, 0.3);
    const Tensor r = testing::random_tensor({2, d}, rng);
    auto loss = [&](const std::vector<Tensor>& in) {
      return sum(mul(gated_update(in[0], in[1], {in[2], in[3], in[4]}).h, r));
    };
    const auto res = testing::check_gradients(
        loss, {testing::random_tensor({2, d}, rng), testing::random_tensor({2, d}, rng), gp.w_z, gp.u_z, gp.b_z});
    ASSERT_LT(res.max_rel_error, testing::kFdRelTol) << "trial " << trial;
  }
}

TEST(Variants, Examples) {
  const GateParams gp = constant_gate(1, 0, 0, 0);
  const Tensor x(Shape{1, 1}, 0.0), one(Shape{1, 1}, 1.0);
  EXPECT_EQ(variant_update(GateVariant::ema, x, one, 2, gp, {0.2}).item(), 0.2);
  EXPECT_EQ(variant_update(GateVariant::last, x, one, 2, gp).item(), 0.0);
  EXPECT_EQ(variant_update(GateVariant::mean, one, one, 2, gp).item(), 1.0);
  // Running mean over loop inputs 1..3: h_prev holds the mean of two.
  EXPECT_NEAR(variant_update(GateVariant::mean, Tensor(Shape{1, 1}, 4.0), one, 3, gp).item(), 2.0, 1e-15);
  EXPECT_THROW((void)variant_update(GateVariant::gated, x, one, 1, gp), std::invalid_argument);
}

TEST(Variants, EmaEqualsFixedGate) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng() % 8;
    const Tensor x = testing::random_tensor({2, d}, rng), h = testing::random_tensor({2, d}, rng);
    const Tensor a = variant_update(GateVariant::ema, x, h, 2, constant_gate(d, 0, 0, 0), {0.2});
    ASSERT_LE(max_abs_diff(a, fixed_gate_update(x, h, 0.2)), 1e-12);
  }
}

TEST(Variants, ParseRoundTrip) {
  for (auto v : {GateVariant::gated, GateVariant::mean, GateVariant::ema, GateVariant::last,
                 GateVariant::single_gated}) {
    EXPECT_EQ(parse_gate_variant(to_string(v)), v);
  }
  EXPECT_THROW((void)parse_gate_variant("bogus"), std::invalid_argument);
}

TEST(Interpolate, Examples) {
  const Tensor base(Shape{1, 2}, {3.0, -1.0}), m(Shape{1, 2}, {2.0, 2.0});
  EXPECT_EQ(max_abs_diff(interpolate_kv(m, base, 0.0), base), 0.0);
  EXPECT_EQ(max_abs_diff(interpolate_kv(m, base, 1.0), m), 0.0);
  EXPECT_EQ(interpolate_kv(Tensor(Shape{1}, 2.0), Tensor(Shape{1}, 0.0), 0.5).item(), 1.0);
  EXPECT_THROW((void)interpolate_kv(m, base, 1.5), std::invalid_argument);
  EXPECT_THROW((void)interpolate_kv(m, Tensor(Shape{2, 2}), 0.5), DimensionError);
}

TEST(LatentState, InferenceModeRejectsOtherPositions) {
  LatentKVState s(1, 4, 2, false);
  EXPECT_THROW(s.open(2), std::logic_error);
  s.open(1);
  const Tensor row(Shape{1, 4}, 1.0);
  EXPECT_THROW(s.write(0, 3, row, row, row, 1), std::logic_error);
  s.write(0, 0, row, row, row, 1);
  EXPECT_THROW(s.commit(), std::logic_error);  // loop 2 missing
  s.write(0, 0, row, row, row, 2);
  s.commit();
  EXPECT_EQ(s.tokens(), 1u);
  EXPECT_EQ(s.element_count(), 8u);
  EXPECT_EQ(s.element_count(true), 12u);
}

TEST(Melt, ConstantMemoryLaw) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = 1 + rng() % 10;
    const auto toks = random_tokens(rng, len);
    std::size_t first = 0;
    for (std::size_t loops : {1, 2, 4}) {
      const MeltModel m = tiny_melt(loops, 10 + trial % 5);
      const auto f = m.forward_chunked(toks, 1 + rng() % 4);
      for (std::size_t l = 0; l < 2; ++l) ASSERT_EQ(f.state.K(l).rows(), len);
      if (loops == 1) first = f.state.element_count();
      ASSERT_EQ(f.state.element_count(), first);
      ASSERT_EQ(first, 2 * len * 2 * 16);
    }
  }
}

TEST(Melt, SingleLoopIsBitIdenticalToLoopLM) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const MeltModel m = tiny_melt(1, 20 + trial);
    const auto toks = random_tokens(rng, 1 + rng() % 9);
    const auto a = m.forward_chunked(toks, 1 + rng() % 5).logits.back();
    const auto b = m.base().forward(toks).logits.back();
    ASSERT_EQ(max_abs_diff(a, b), 0.0);
  }
}

TEST(Melt, AlphaZeroIsTheLoopLM) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const MeltModel m = tiny_melt(3, 40 + trial);
    const auto toks = random_tokens(rng, 1 + rng() % 9);
    const auto f = m.forward_chunked(toks, toks.size(), 0.0);
    const auto g = m.base().forward(toks);
    for (std::size_t t = 0; t < 3; ++t) ASSERT_LE(max_abs_diff(f.logits[t], g.logits[t]), 1e-9);
  }
}

TEST(Melt, ChunkCountAndBoundary) {
  const MeltModel m = tiny_melt(3, 8);
  const std::vector<TokenId> toks{1, 2, 3, 4};
  EXPECT_EQ(m.forward_chunked(toks, 2).chunks, 2u);
  EXPECT_EQ(m.forward_chunked(toks, 4).chunks, 1u);
  EXPECT_EQ(m.forward_chunked(toks, 3).chunks, 2u);
}

TEST(Melt, ChunksNeverReadUnfinishedLatents) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const MeltModel m = tiny_melt(1 + rng() % 3, 60 + trial % 7);
    const auto toks = random_tokens(rng, 1 + rng() % 10);
    const auto f = m.forward_chunked(toks, 1 + rng() % 5);
    ASSERT_EQ(f.state.nonfinal_reads(), 0u);
    for (std::size_t l = 0; l < 2; ++l) {
      for (auto done : f.state.loops_done(l)) ASSERT_EQ(done, m.config().loops);
    }
  }
}

TEST(Melt, ChunkOneMatchesAutoregressiveReplay) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const MeltModel m = tiny_melt(3, 80 + trial);
    const auto toks = random_tokens(rng, 1 + rng() % 9);
    const auto f = m.forward_chunked(toks, 1);
    MeltSession s(m);
    for (std::size_t p = 0; p < toks.size(); ++p) {
      const auto logits = s.step(toks[p]);
      for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t v = 0; v < 11; ++v) ASSERT_NEAR(logits[t].at(v), f.logits[t].at(p, v), 1e-10);
      }
    }
  }
}

TEST(Melt, MatchesScalarReference) {
  const MeltModel m = tiny_melt(3, 90);
  const std::vector<TokenId> toks{3, 1, 4, 1, 5};
  const auto ref = reference::melt_logits(m, toks);
  const auto f = m.forward_chunked(toks, 1);
  for (std::size_t p = 0; p < toks.size(); ++p) {
    for (std::size_t v = 0; v < 11; ++v) ASSERT_NEAR(ref[p][2][v], f.logits[2].at(p, v), 1e-10);
  }
}

TEST(Melt, SaturatedGatesFreezeLoopOneKv) {
  MeltModel m3 = tiny_melt(3, 91);
  for (auto& g : m3.gates()) g = constant_gate(16, 0, 0, 40);
  const MeltModel m1(LoopLM(tiny(1), m3.base().params().clone()), m3.gates());
  const std::vector<TokenId> toks{2, 7, 1, 8};
  const auto a = m3.forward_chunked(toks, 1), b = m1.forward_chunked(toks, 1);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_LE(max_abs_diff(a.state.K(l), b.state.K(l)), 1e-12);
    EXPECT_LE(max_abs_diff(a.state.V(l), b.state.V(l)), 1e-12);
  }
}

TEST(Melt, GenerateKeepsOneLatentRowPerToken) {
  for (std::size_t loops : {1, 2, 4, 8}) {
    const MeltModel m = tiny_melt(loops, 92);
    const std::vector<TokenId> prompt{1, 2, 3};
    const auto g = generate(m, prompt, 5, {}, 0);
    EXPECT_EQ(g.kv_elements, 2u * 8 * 2 * 16) << "T=" << loops;
  }
}

TEST(Melt, TinyLossGradientMatchesFiniteDifferences) {
  ModelConfig c = tiny(2);
  c.hidden_dim = 8;
  c.ffn_dim = 8;
  c.vocab_size = 5;
  c.n_layers = 1;
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    MeltModel m = MeltModel::from_looplm(LoopLM::random(c, 300 + trial), trial);
    std::vector<TokenId> toks{rng() % 5, rng() % 5, rng() % 5, rng() % 5};
    std::vector<Tensor> params;
    for (auto& [name, t] : m.named_parameters()) params.push_back(t);
    const double alpha = 0.25 * static_cast<double>(trial + 1);
    auto loss = [&](const std::vector<Tensor>&) {
      const auto f = m.forward_chunked(toks, 2, alpha);
      Tensor l = Tensor::scalar(0.0);
      for (const auto& lg : f.logits) l = add(l, mean(log_softmax_rows(lg)));
      return l;
    };
    EXPECT_LT(testing::check_gradients(loss, params).max_rel_error, testing::kFdRelTol);
  }
}

}  // namespace
}  // namespace melt
