#pragma once

// Diagonal empirical Fisher information of prefix rows:
//
//   F_i = 1/(p q) * sum_{j in row i} sum_{k=1..q} (d log p(y_k | x_k) / d theta_j)^2
//
// with p parameters per row and q samples. Each sample is a batch of one, and
// the sequence log-likelihood sums over target tokens.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "pmerge/prefix_store.hpp"
#include "pmerge/transformer.hpp"

namespace pmerge {

struct Example;

class FisherAccumulator {
 public:
  FisherAccumulator(std::size_t task_id, std::size_t rows, std::size_t params_per_row);

  /// Adds the squared per-parameter gradient of one sample.
  void add_gradient(std::span<const double> grad, std::size_t sample_id = 0);

  std::size_t task_id() const { return task_id_; }
  std::size_t samples() const { return count_; }
  std::size_t params_per_row() const { return params_per_row_; }
  std::size_t rows() const { return rows_; }
  /// Running (compensated) sum of squared gradients per parameter.
  std::vector<double> sum_sq() const;

 private:
  std::size_t task_id_;
  std::size_t rows_;
  std::size_t params_per_row_;
  std::size_t count_ = 0;
  std::vector<double> sum_;
  std::vector<double> carry_;
};

/// log p(target | input) of one example under the model with the task's
/// prefix rows: -T * cross_entropy.
Tensor sequence_log_likelihood(const Transformer& model, const PrefixMatrix& prefix,
                               std::span<const std::size_t> indices, const Example& sample);

/// One Fisher sample: gradient of the sequence log-likelihood w.r.t. the
/// prefix tensor, squared into `acc`. Throws a numeric error naming
/// `sample_id` on non-finite gradients.
void accumulate(FisherAccumulator& acc, const Transformer& model, const PrefixMatrix& prefix,
                std::span<const std::size_t> indices, const Example& sample,
                std::size_t sample_id = 0);

FisherReport finalize(const FisherAccumulator& acc);

/// CSV with header "task_id,row_index,score".
void export_fisher_csv(std::span<const FisherReport> reports, const std::filesystem::path& path);

/// Indices of the top `n` scores (descending, ties to lower index).
std::vector<std::size_t> top_n_indices(std::span<const double> scores, std::size_t n);

}  // namespace pmerge
