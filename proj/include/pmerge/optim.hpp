#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pmerge/tensor.hpp"

namespace pmerge {

struct AdamWConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Parameters
/// are updated in place; an optional row mask freezes rows of a matrix
/// parameter (no moment update, no decay).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const AdamWConfig& cfg);

  /// `grads[i]` belongs to `params()[i]`.
  void step(std::span<const std::vector<double>> grads);

  /// Rows with mask[r] == 0 stay untouched. `param` must be a matrix.
  void set_row_mask(std::size_t param_index, std::vector<std::uint8_t> mask);

  const std::vector<Tensor>& params() const { return params_; }
  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct State {
    std::vector<double> m;
    std::vector<double> v;
    std::vector<std::uint8_t> row_mask;
  };

  std::vector<Tensor> params_;
  std::vector<State> state_;
  AdamWConfig cfg_;
  std::size_t t_ = 0;
};

/// Sums per-example gradients for a fixed parameter list.
class GradientAccumulator {
 public:
  explicit GradientAccumulator(std::vector<Tensor> params);

  void add(const GradientMap& grads);
  void reset();

  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& grads() const { return grads_; }
  std::span<const double> grad(std::size_t i) const { return grads_[i]; }
  bool all_finite() const;

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> grads_;
};

}  // namespace pmerge
