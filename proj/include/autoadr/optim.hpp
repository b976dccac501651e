#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "autoadr/graph.hpp"

namespace autoadr {

// Cosine annealing: lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi * T_cur / T)),
// with T_cur taken modulo the cycle once it passes T.
double cosine_lr(double lr_max, double lr_min, std::int64_t t_cur, std::int64_t cycle);

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

struct AdamMoments {
  Tensor first;
  Tensor second;
  std::int64_t steps = 0;
};

// Adam with bias correction and decoupled weight decay. Moments are keyed by
// parameter name so the state survives rebuilding the model objects.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double base_lr = 1e-3;
  };

  Adam() = default;
  explicit Adam(Options options) : options_(options) {}

  // Applies one update to every parameter in `params` and zeroes its grad.
  void step(std::span<Parameter* const> params, double lr);

  const Options& options() const { return options_; }
  std::int64_t step_count() const { return step_count_; }
  const std::map<std::string, AdamMoments>& moments() const { return moments_; }
  std::map<std::string, AdamMoments>& mutable_moments() { return moments_; }
  void set_step_count(std::int64_t steps) { step_count_ = steps; }

 private:
  Options options_{};
  std::int64_t step_count_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace autoadr
