#include "pmerge/fisher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "pmerge/error.hpp"
#include "pmerge/tasks.hpp"

namespace pmerge {

FisherAccumulator::FisherAccumulator(std::size_t task_id, std::size_t rows,
                                     std::size_t params_per_row)
    : task_id_(task_id),
      rows_(rows),
      params_per_row_(params_per_row),
      sum_(rows * params_per_row, 0.0),
      carry_(rows * params_per_row, 0.0) {
  if (rows == 0 || params_per_row == 0) {
    fail(ErrorKind::Dimension, "Fisher accumulator needs positive rows and params per row");
  }
}

void FisherAccumulator::add_gradient(std::span<const double> grad, std::size_t sample_id) {
  if (grad.size() != sum_.size()) {
    fail(ErrorKind::Dimension, "Fisher gradient has " + std::to_string(grad.size()) +
                                   " entries, expected " + std::to_string(sum_.size()));
  }
  for (double g : grad) {
    if (!std::isfinite(g)) {
      fail(ErrorKind::Numeric, "non-finite gradient in Fisher sample " + std::to_string(sample_id) +
                                   " of task " + std::to_string(task_id_));
    }
  }
  // Neumaier summation keeps the total insensitive to sample order.
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double x = grad[i] * grad[i];
    const double t = sum_[i] + x;
    if (std::abs(sum_[i]) >= x) {
      carry_[i] += (sum_[i] - t) + x;
    } else {
      carry_[i] += (x - t) + sum_[i];
    }
    sum_[i] = t;
  }
  ++count_;
}

std::vector<double> FisherAccumulator::sum_sq() const {
  std::vector<double> out(sum_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sum_[i] + carry_[i];
  return out;
}

Tensor sequence_log_likelihood(const Transformer& model, const PrefixMatrix& prefix,
                               std::span<const std::size_t> indices, const Example& sample) {
  const auto acts = gather(prefix, indices);
  const auto labels = decoder_labels(sample);
  auto fwd = model.forward(sample.input, labels, acts.length ? &acts : nullptr);
  return scale(cross_entropy(fwd.logits, labels), -static_cast<double>(labels.size()));
}

void accumulate(FisherAccumulator& acc, const Transformer& model, const PrefixMatrix& prefix,
                std::span<const std::size_t> indices, const Example& sample,
                std::size_t sample_id) {
  if (acc.rows() != prefix.rows() || acc.params_per_row() != prefix.row_dim()) {
    fail(ErrorKind::Dimension, "Fisher accumulator does not match the prefix shape");
  }
  Tensor ll = sequence_log_likelihood(model, prefix, indices, sample);
  const Tensor& rows = prefix.tensor();
  GradientMap grads = backward(ll, std::span<const Tensor>(&rows, 1));
  acc.add_gradient(*grads.find(rows), sample_id);
}

FisherReport finalize(const FisherAccumulator& acc) {
  if (acc.samples() == 0) {
    fail(ErrorKind::EmptyData, "Fisher report for task " + std::to_string(acc.task_id()) +
                                   " has no samples");
  }
  const auto sums = acc.sum_sq();
  const double denom = static_cast<double>(acc.params_per_row()) * static_cast<double>(acc.samples());
  FisherReport report;
  report.task_id = acc.task_id();
  report.scores.resize(acc.rows());
  for (std::size_t r = 0; r < acc.rows(); ++r) {
    const double* row = sums.data() + r * acc.params_per_row();
    // Row total, also compensated.
    double s = 0.0, c = 0.0;
    for (std::size_t j = 0; j < acc.params_per_row(); ++j) {
      const double t = s + row[j];
      c += std::abs(s) >= std::abs(row[j]) ? (s - t) + row[j] : (row[j] - t) + s;
      s = t;
    }
    report.scores[r] = (s + c) / denom;
  }
  return report;
}

void export_fisher_csv(std::span<const FisherReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "task_id,row_index,score\n" << std::setprecision(17);
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
      out << r.task_id << ',' << i << ',' << r.scores[i] << '\n';
    }
  }
}

std::vector<std::size_t> top_n_indices(std::span<const double> scores, std::size_t n) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(n, order.size()));
  return order;
}

}  // namespace pmerge
