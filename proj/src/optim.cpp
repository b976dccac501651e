#include "autoadr/optim.hpp"

#include <cmath>
#include <numbers>

#include "autoadr/errors.hpp"

namespace autoadr {

double cosine_lr(double lr_max, double lr_min, std::int64_t t_cur, std::int64_t cycle) {
  require(lr_min <= lr_max, "cosine_lr: lr_min must not exceed lr_max");
  require(lr_min > 0.0, "cosine_lr: learning rates must be positive");
  require(cycle > 0, "cosine_lr: cycle length must be positive");
  require(t_cur >= 0, "cosine_lr: T_cur must be non-negative");
  const std::int64_t position = t_cur > cycle ? t_cur % cycle : t_cur;
  const double phase =
      std::numbers::pi * static_cast<double>(position) / static_cast<double>(cycle);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  require(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (!p->has_grad()) continue;
    for (double g : p->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->has_grad()) continue;
      for (double& g : p->grad.data()) g *= factor;
    }
  }
  return norm;
}

void Adam::step(std::span<Parameter* const> params, double lr) {
  require(lr > 0.0, "adam: learning rate must be positive");
  ++step_count_;
  for (Parameter* p : params) {
    require(p->has_grad(), "adam: parameter " + p->name + " has no gradient");
    auto [it, inserted] = moments_.try_emplace(p->name);
    AdamMoments& m = it->second;
    if (inserted || m.first.shape() != p->value.shape()) {
      m.first = Tensor(p->value.shape());
      m.second = Tensor(p->value.shape());
      m.steps = 0;
    }
    ++m.steps;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(m.steps));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(m.steps));
    auto value = p->value.data();
    auto grad = p->grad.data();
    auto first = m.first.data();
    auto second = m.second.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      first[i] = options_.beta1 * first[i] + (1.0 - options_.beta1) * g;
      second[i] = options_.beta2 * second[i] + (1.0 - options_.beta2) * g * g;
      const double mhat = first[i] / c1;
      const double vhat = second[i] / c2;
      value[i] -= lr * (mhat / (std::sqrt(vhat) + options_.eps) + options_.weight_decay * value[i]);
    }
    p->zero_grad();
  }
}

}  // namespace autoadr
