#include "pmerge/optim.hpp"

#include <cmath>

#include "pmerge/error.hpp"

namespace pmerge {

AdamW::AdamW(std::vector<Tensor> params, const AdamWConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) {
    fail(ErrorKind::Config, "learning rate must be positive, got " + std::to_string(cfg_.learning_rate));
  }
  if (cfg_.weight_decay < 0.0 || cfg_.eps <= 0.0 || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 ||
      cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
    fail(ErrorKind::Config, "invalid AdamW hyperparameters");
  }
  state_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].is_leaf()) fail(ErrorKind::Contract, "AdamW parameters must be leaves");
    state_[i].m.assign(params_[i].numel(), 0.0);
    state_[i].v.assign(params_[i].numel(), 0.0);
  }
}

void AdamW::set_row_mask(std::size_t param_index, std::vector<std::uint8_t> mask) {
  const Tensor& p = params_.at(param_index);
  if (p.rank() != 2 || mask.size() != p.dim(0)) {
    fail(ErrorKind::Dimension, "row mask of size " + std::to_string(mask.size()) +
                                   " does not fit parameter " + shape_str(p.shape()));
  }
  state_[param_index].row_mask = std::move(mask);
}

void AdamW::step(std::span<const std::vector<double>> grads) {
  if (grads.size() != params_.size()) {
    fail(ErrorKind::Dimension, "AdamW: " + std::to_string(grads.size()) + " gradients for " +
                                   std::to_string(params_.size()) + " parameters");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = cfg_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_data();
    const auto& g = grads[i];
    if (g.size() != theta.size()) {
      fail(ErrorKind::Dimension, "AdamW: gradient size mismatch for parameter " + std::to_string(i));
    }
    auto& st = state_[i];
    const std::size_t width = st.row_mask.empty() ? theta.size() : params_[i].dim(1);
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (!st.row_mask.empty() && !st.row_mask[j / width]) continue;
      st.m[j] = cfg_.beta1 * st.m[j] + (1.0 - cfg_.beta1) * g[j];
      st.v[j] = cfg_.beta2 * st.v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = st.m[j] / bc1;
      const double vhat = st.v[j] / bc2;
      theta[j] -= lr * cfg_.weight_decay * theta[j];
      theta[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

GradientAccumulator::GradientAccumulator(std::vector<Tensor> params) : params_(std::move(params)) {
  reset();
}

void GradientAccumulator::reset() {
  grads_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) grads_[i].assign(params_[i].numel(), 0.0);
}

void GradientAccumulator::add(const GradientMap& grads) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto* g = grads.find(params_[i]);
    if (!g) continue;
    auto& acc = grads_[i];
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += (*g)[j];
  }
}

bool GradientAccumulator::all_finite() const {
  for (const auto& g : grads_)
    for (double x : g)
      if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace pmerge
