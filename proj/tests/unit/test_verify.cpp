#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "gradcheck.hpp"
#include "melt/verify.hpp"

namespace melt::verify {
namespace {

Tensor random_symmetric(std::size_t n, Rng& rng) {
  Tensor m(Shape{n, n});
  auto d = m.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) d[i * n + j] = d[j * n + i] = uniform(rng, -1, 1);
  }
  return m;
}

double eigen_spectral_radius(const Tensor& m) {
  const auto n = static_cast<Eigen::Index>(m.rows());
  Eigen::MatrixXd e(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) e(i, j) = m.at(i, j);
  }
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(e).eigenvalues().cwiseAbs().maxCoeff();
}

GateParams random_gate(std::size_t d, Rng& rng, double bound, double bias) {
  return init_gate_params(d, rng, bound, bias);
}

TEST(Jacobian, DecompositionMatchesFiniteDifferences) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng() % 7;
    const GateParams gp = random_gate(d, rng, 0.5, uniform(rng, -2, 2));
    const Tensor x = testing::random_tensor({d}, rng), h = testing::random_tensor({d}, rng);
    const auto rep = gate_jacobian(x, h, gp);
    ASSERT_LT(relative_error(rep.jacobian, finite_difference_jacobian(x, h, gp)), 1e-5);
    for (double v : rep.term3.data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(Jacobian, TermsSumToTheJacobian) {
  Rng rng(2);
  const std::size_t d = 5;
  const GateParams gp = random_gate(d, rng, 0.5, 0.0);
  const Tensor x = testing::random_tensor({d}, rng), h = testing::random_tensor({d}, rng);
  const Tensor dx = testing::random_tensor({d, d}, rng);
  const auto rep = gate_jacobian(x, h, gp, &dx);
  for (std::size_t i = 0; i < d * d; ++i) {
    EXPECT_NEAR(rep.jacobian.at(i), rep.term1.at(i) + rep.term2.at(i) + rep.term3.at(i), 1e-15);
  }
}

TEST(Jacobian, HardSaturation) {
  Rng rng(3);
  const std::size_t d = 8;
  const Tensor x = testing::random_tensor({d}, rng), h = testing::random_tensor({d}, rng);
  GateParams open = random_gate(d, rng, 0.01, 40.0);
  EXPECT_LE(gate_jacobian(x, h, open).deviation_from_identity, 1e-10);
  GateParams shut = random_gate(d, rng, 0.01, -40.0);
  EXPECT_LE(frobenius(gate_jacobian(x, h, shut).jacobian), 1e-10);
}

TEST(Jacobian, SpectralRadiusBoundedForSmallRecurrentWeights) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 8;
    const GateParams gp = random_gate(d, rng, 0.01, uniform(rng, -3, 3));
    const Tensor x = testing::random_tensor({d}, rng), h = testing::random_tensor({d}, rng);
    ASSERT_LE(gate_jacobian(x, h, gp).spectral_radius, 1.0 + 1e-9);
  }
}

TEST(PowerIteration, MatchesDenseEigensolver) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor m = random_symmetric(8, rng);
    const double want = eigen_spectral_radius(m);
    ASSERT_LT(std::abs(spectral_radius(m) - want) / want, 1e-6) << "trial " << trial;
  }
}

TEST(PowerIteration, DiagonalAndZero) {
  EXPECT_NEAR(spectral_radius(Tensor::from_rows({{0.5, 0}, {0, -2}})), 2.0, 1e-12);
  EXPECT_EQ(spectral_radius(Tensor(Shape{3, 3}, 0.0)), 0.0);
}

TEST(Superhighway, ClampedGateIsExactlyLossless) {
  Rng rng(6);
  const std::size_t d = 16;
  const GateParams gp = random_gate(d, rng, 0.1, 0.0);
  const Tensor x = testing::random_tensor({d}, rng), h = testing::random_tensor({d}, rng);
  for (std::size_t t = 1; t <= 64; ++t) {
    ASSERT_EQ(superhighway_check(gp, x, h, {t, 1e-3, true}).ratio, 1.0) << "T=" << t;
  }
}

TEST(Superhighway, SaturatedRatioMeetsTheBound) {
  Rng rng(7);
  const std::size_t d = 16;
  const double eps = 1e-3;
  const GateParams gp = random_gate(d, rng, 1e-4, std::log((1 - eps / 2) / (eps / 2)));
  const Tensor x = testing::random_tensor({d}, rng), h = testing::random_tensor({d}, rng);
  const auto r = superhighway_check(gp, x, h, {8, eps, false});
  EXPECT_GE(r.ratio, std::pow(1 - eps, 8) - 1e-6);
  const double control = gradient_norm_ratio(random_gate(d, rng, 0.1, 0.0), x, h, 8);
  EXPECT_LT(control, r.ratio);
}

TEST(Superhighway, UnsaturatedGateIsReportedByLoopAndDimension) {
  Rng rng(8);
  const GateParams gp = random_gate(4, rng, 0.1, 0.0);
  const Tensor x = testing::random_tensor({4}, rng), h = testing::random_tensor({4}, rng);
  try {
    (void)superhighway_check(gp, x, h, {4, 1e-3, false});
    FAIL() << "expected SaturationError";
  } catch (const SaturationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("loop"), std::string::npos) << msg;
    EXPECT_NE(msg.find("dimension"), std::string::npos) << msg;
  }
}

TEST(Suites, AllChecksPassOnHealthyModels) {
  for (const auto& suite : {jacobian_suite(), superhighway_suite(), equivalence_suite()}) {
    for (const auto& c : suite) EXPECT_TRUE(c.ok()) << to_json_line(c);
  }
}

TEST(Suites, InjectedFaultIsCaughtByName) {
  EquivalenceOptions o;
  o.fault = GateFault::swapped;
  bool caught = false;
  for (const auto& c : equivalence_suite(o)) {
    if (c.name == "melt_matches_reference") caught = !c.ok();
  }
  EXPECT_TRUE(caught);
}

TEST(Suites, ReportLinesAreJson) {
  const CheckResult c{"x", "pass", 0.5, 1.0, "d"};
  EXPECT_EQ(to_json_line(c), R"({"detail":"d","metric":0.5,"name":"x","status":"pass","tolerance":1.0})");
}

}  // namespace
}  // namespace melt::verify
