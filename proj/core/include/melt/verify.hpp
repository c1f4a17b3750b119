#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "melt/melt.hpp"

namespace melt::verify {

/// Jacobian of the gated update with respect to the previous latent,
/// J[i][j] = dh_i / dh_prev_j, split as
///   term1 = diag(z)
///   term2 = diag(h_prev - x) * diag(z (1 - z)) * U_z^T      (= diag(h_prev - x) dz/dh_prev)
///   term3 = diag(1 - z) * dx/dh_prev                        (zero when x is held fixed)
struct JacobianReport {
  Tensor jacobian;  // [d x d]
  Tensor term1, term2, term3;
  Tensor gate;      // z, [d]
  double spectral_radius = 0.0;
  double deviation_from_identity = 0.0;  // ||J - I||_F
};

/// `dx_dh` is the optional [d x d] Jacobian of x with respect to h_prev; the
/// idealized setting passes none and Term 3 vanishes.
JacobianReport gate_jacobian(const Tensor& x, const Tensor& h_prev, const GateParams& gp,
                             const Tensor* dx_dh = nullptr);

/// Central finite differences of gated_update with respect to h_prev.
Tensor finite_difference_jacobian(const Tensor& x, const Tensor& h_prev, const GateParams& gp,
                                  double step = 1e-6);

double frobenius(const Tensor& m);
/// ||a - b||_F / max(||b||_F, 1e-300)
double relative_error(const Tensor& a, const Tensor& b);

struct PowerIterationOptions {
  double tolerance = 1e-14;      // relative change of the estimate between iterations
  std::size_t max_iterations = 200000;
  std::uint64_t seed = 0x5eed;   // start vector
};

struct PowerIterationResult {
  double radius = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// max |eigenvalue| by power iteration on ||M v||. Converges when the
/// dominant eigenvalue magnitude is isolated; a real +-lambda pair is fine.
PowerIterationResult power_iteration(const Tensor& m, const PowerIterationOptions& opts = {});
double spectral_radius(const Tensor& m, const PowerIterationOptions& opts = {});

class SaturationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SuperhighwayOptions {
  std::size_t loops = 8;
  double epsilon = 1e-3;
  bool clamp_gate = false;  // force z = 1 exactly
};

struct SuperhighwayResult {
  double ratio = 0.0;        // ||dL/dh_0|| / ||dL/dh_T||, L = 0.5 ||h_T||^2
  double min_gate = 1.0;
  double lower_bound = 0.0;  // (1 - epsilon)^T
};

/// Runs `loops` gated updates of one layer's latent with x held fixed, then
/// backpropagates L = 0.5 ||h_T||^2. Unless `clamp_gate`, every gate
/// component must stay >= 1 - epsilon; otherwise SaturationError names the
/// offending loop and dimension.
SuperhighwayResult superhighway_check(const GateParams& gp, const Tensor& x, const Tensor& h0,
                                      const SuperhighwayOptions& opts);

/// Same dynamics, no saturation precondition (for unsaturated controls).
double gradient_norm_ratio(const GateParams& gp, const Tensor& x, const Tensor& h0,
                           std::size_t loops, bool clamp_gate = false);

struct CheckResult {
  std::string name;
  std::string status;  // pass | fail | info
  double metric = 0.0;
  double tolerance = 0.0;
  std::string detail;

  bool ok() const { return status != "fail"; }
};

std::string to_json_line(const CheckResult& c);

struct EquivalenceOptions {
  ModelConfig config{};  // tiny: N=2, d=64, T=3
  std::uint64_t seed = 7;
  std::size_t sequence_length = 10;
  GateFault fault = GateFault::none;
  /// When set, checks that need a MELT model use this one instead of a
  /// fresh random model.
  const MeltModel* trained = nullptr;
};

std::vector<CheckResult> jacobian_suite(std::uint64_t seed = 11);
std::vector<CheckResult> superhighway_suite(std::uint64_t seed = 13);
std::vector<CheckResult> equivalence_suite(const EquivalenceOptions& opts = {});

/// Finite-difference Jacobian of h^(l)_{t+1} with respect to h^(l)_t through
/// the full network (x depends on h via attention), on the newest token of
/// `tokens`, computed with the scalar reference implementation.
Tensor full_network_jacobian(const MeltModel& model, const std::vector<TokenId>& tokens,
                             std::size_t layer, std::size_t loop, double step = 1e-6);

}  // namespace melt::verify
