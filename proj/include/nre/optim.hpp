#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nre/tensor.hpp"

namespace nre {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update. Moment buffers are sized on the first
// step; later steps require matching sizes.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

// Plain SGD with L2 weight decay folded into the gradient.
void sgd_step(std::span<double> params, std::span<const double> grads, double lr, double weight_decay);

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string optimizer_kind_name(OptimizerKind kind);

// Applies the chosen rule to a fixed parameter list. Parameters without an
// accumulated gradient are skipped (their Adam step count does not move).
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<Tensor> params, double lr, double weight_decay);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  OptimizerKind kind_;
  std::vector<Tensor> params_;
  std::vector<AdamState> adam_;
  double lr_;
  double weight_decay_;
};

}  // namespace nre
