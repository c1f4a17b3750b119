#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "melt/tensor.hpp"

namespace melt::optim {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay. Parameters are registered in groups,
/// each with its own base learning rate; step() scales every group by the
/// same schedule multiplier.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  void add_group(std::vector<Tensor> params, double lr);
  void step(double lr_multiplier = 1.0);
  void zero_grad();

  std::size_t steps() const { return t_; }
  /// Every registered parameter, in registration order.
  std::vector<Tensor> parameters() const;

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  struct Group {
    double lr;
    std::vector<Slot> slots;
  };

  AdamWOptions opts_;
  std::vector<Group> groups_;
  std::size_t t_ = 0;
};

/// L2 norm over the gradients of all params (missing gradients count as 0).
double global_grad_norm(std::span<const Tensor> params);

/// Rescales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

/// Linear warmup over `warmup` steps, then cosine decay to min_ratio at
/// `total`. Returns a multiplier in [min_ratio, 1].
double warmup_cosine(std::size_t step, std::size_t warmup, std::size_t total, double min_ratio);

}  // namespace melt::optim
