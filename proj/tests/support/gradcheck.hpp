#pragma once

// Central finite-difference gradient checking, shared by the unit tests and
// the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "melt/model.hpp"
#include "melt/tensor.hpp"

namespace melt::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdRelTol = 1e-4;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor) per input.
/// `loss` must build a scalar from `inputs` on the active tape.
inline GradCheck check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& loss,
                                 std::vector<Tensor> inputs, double step = kFdStep,
                                 double floor = 1e-8) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor l = loss(inputs);
    tape.backward(l);
  }
  GradCheck out;
  NoGradScope no_grad;
  for (auto& t : inputs) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(t.size(), 0.0);
    auto values = t.mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = loss(inputs).item();
      values[i] = orig - step;
      const double down = loss(inputs).item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    out.max_rel_error = std::max(out.max_rel_error, std::sqrt(diff2) / denom);
    out.entries += values.size();
  }
  return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = uniform(rng, lo, hi);
  return t;
}

}  // namespace melt::testing
