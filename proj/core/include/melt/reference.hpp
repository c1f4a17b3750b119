#pragma once

// Straight-line scalar re-implementation of LoopLM and MELT inference. It
// shares no code with the tensor engine beyond reading parameter values, and
// exists to serve as an independent oracle for the equivalence checks.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "melt/looplm.hpp"
#include "melt/melt.hpp"

namespace melt::reference {

/// logits[position][loop][vocab]
using LoopLogits = std::vector<std::vector<std::vector<double>>>;

/// Token-by-token LoopLM with a full per-loop cache.
LoopLogits looplm_logits(const LoopLM& model, std::span<const TokenId> tokens);

/// Perturbs the latent of (position, layer) right after loop `loop` (1-based)
/// and captures the latent produced at loop + 1, plus that loop's layer input.
struct LatentProbe {
  std::size_t position = 0;
  std::size_t layer = 0;
  std::size_t loop = 1;
  std::vector<double> delta;
  std::vector<double> h_before;  // latent after loop `loop`, before delta
  std::vector<double> h_after;   // latent after loop `loop` + 1
  std::vector<double> x_after;   // normalized layer input at loop `loop` + 1
};

/// Token-by-token MELT inference (no fault injection is honoured here).
LoopLogits melt_logits(const MeltModel& model, std::span<const TokenId> tokens,
                       LatentProbe* probe = nullptr);

}  // namespace melt::reference
