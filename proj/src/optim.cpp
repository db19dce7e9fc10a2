#include "nre/optim.hpp"

#include <cmath>

#include "nre/error.hpp"

namespace nre {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size()) {
    fail(ErrorCode::kDimension, "adam_step: " + std::to_string(params.size()) + " parameters, " +
                                    std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    fail(ErrorCode::kDimension, "adam_step: moment buffers do not match parameter size");
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr, double weight_decay) {
  if (params.size() != grads.size()) {
    fail(ErrorCode::kDimension, "sgd_step: " + std::to_string(params.size()) + " parameters, " +
                                    std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * (grads[i] + weight_decay * params[i]);
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  fail(ErrorCode::kConfig, "unknown optimizer '" + name + "'");
}

std::string optimizer_kind_name(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerKind kind, std::vector<Tensor> params, double lr, double weight_decay)
    : kind_(kind), params_(std::move(params)), adam_(params_.size()), lr_(lr), weight_decay_(weight_decay) {
  for (auto& s : adam_) s.lr = lr;
}

void Optimizer::step() {
  std::vector<double> decayed;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    if (kind_ == OptimizerKind::kSgd) {
      sgd_step(p.mutable_data(), p.grad(), lr_, weight_decay_);
    } else if (weight_decay_ == 0.0) {
      adam_step(p.mutable_data(), p.grad(), adam_[i]);
    } else {
      auto g = p.grad();
      auto w = p.data();
      decayed.assign(g.begin(), g.end());
      for (std::size_t k = 0; k < decayed.size(); ++k) decayed[k] += weight_decay_ * w[k];
      adam_step(p.mutable_data(), decayed, adam_[i]);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace nre
