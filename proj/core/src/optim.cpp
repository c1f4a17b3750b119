#include "melt/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace melt::optim {

void AdamW::add_group(std::vector<Tensor> params, double lr) {
  Group g{lr, {}};
  for (auto& p : params) {
    const std::size_t n = p.size();
    g.slots.push_back({std::move(p), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
  groups_.push_back(std::move(g));
}

void AdamW::step(double lr_multiplier) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (auto& g : groups_) {
    const double lr = g.lr * lr_multiplier;
    for (auto& s : g.slots) {
      auto& node = *s.param.node();
      if (node.grad.empty()) continue;
      for (std::size_t i = 0; i < node.value.size(); ++i) {
        const double gr = node.grad[i];
        s.m[i] = opts_.beta1 * s.m[i] + (1.0 - opts_.beta1) * gr;
        s.v[i] = opts_.beta2 * s.v[i] + (1.0 - opts_.beta2) * gr * gr;
        const double mh = s.m[i] / bc1, vh = s.v[i] / bc2;
        node.value[i] -= lr * (mh / (std::sqrt(vh) + opts_.eps) + opts_.weight_decay * node.value[i]);
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_) {
    for (auto& s : g.slots) s.param.zero_grad();
  }
}

std::vector<Tensor> AdamW::parameters() const {
  std::vector<Tensor> out;
  for (const auto& g : groups_) {
    for (const auto& s : g.slots) out.push_back(s.param);
  }
  return out;
}

double global_grad_norm(std::span<const Tensor> params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (auto& p : params) {
      for (double& g : p.node()->grad) g *= k;
    }
  }
  return norm;
}

double warmup_cosine(std::size_t step, std::size_t warmup, std::size_t total, double min_ratio) {
  if (min_ratio < 0.0 || min_ratio > 1.0) {
    throw std::invalid_argument("warmup_cosine: min_ratio must lie in [0, 1]");
  }
  if (warmup > 0 && step < warmup) {
    return static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total <= warmup) return 1.0;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace melt::optim
