#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pmerge/tensor.hpp"
#include "pmerge/transformer.hpp"

namespace pmerge {

/// Shared rows [0, shared_len) followed by one contiguous unique block per
/// task, in task order.
struct ManualDesign {
  std::size_t shared_len = 0;
  std::size_t unique_len_per_task = 0;
  std::size_t n_tasks = 1;

  /// From the "Unq(m)+Sha(s)" labelling, where m counts unique rows over all
  /// tasks and must split evenly.
  static ManualDesign from_totals(std::size_t unique_total, std::size_t shared,
                                  std::size_t n_tasks);

  std::size_t total_rows() const { return shared_len + unique_len_per_task * n_tasks; }
  bool operator==(const ManualDesign&) const = default;
};

struct SelfAdaptiveDesign {
  std::size_t init_len = 0;
  std::size_t top_n = 0;
  std::size_t n_tasks = 1;

  std::size_t total_rows() const { return init_len; }
  bool operator==(const SelfAdaptiveDesign&) const = default;
};

using PrefixDesign = std::variant<ManualDesign, SelfAdaptiveDesign>;

void validate(const PrefixDesign& design);
std::size_t total_rows(const PrefixDesign& design);
std::size_t task_count(const PrefixDesign& design);
/// e.g. "Unq(10)+Sha(20)" or "SelfAdaptive(40,25)".
std::string design_label(const PrefixDesign& design);

/// Ordered row indices for one task of a manual design: shared rows first,
/// then the task's unique block.
std::vector<std::size_t> indices_for_task(const ManualDesign& design, std::size_t task_id);

/// Per-row importance for one task.
struct FisherReport {
  std::size_t task_id = 0;
  std::vector<double> scores;
};

/// The trainable prefix matrix P_theta with its per-task index maps and the
/// active-row mask.
class PrefixMatrix {
 public:
  /// Rows drawn from N(0, init_std^2). Manual designs get their layout maps;
  /// self-adaptive designs start fully shared (every task maps every row).
  PrefixMatrix(const PrefixDesign& design, const ModelConfig& model, std::uint64_t seed,
               double init_std = 0.02);

  // Copies get their own row storage; Tensor itself is a shared handle.
  PrefixMatrix(const PrefixMatrix& other);
  PrefixMatrix& operator=(const PrefixMatrix& other);
  PrefixMatrix(PrefixMatrix&&) noexcept = default;
  PrefixMatrix& operator=(PrefixMatrix&&) noexcept = default;

  const PrefixDesign& design() const { return design_; }
  std::size_t rows() const { return rows_.dim(0); }
  std::size_t row_dim() const { return rows_.dim(1); }
  std::size_t n_layers() const { return n_layers_; }
  std::size_t d_model() const { return d_model_; }

  const Tensor& tensor() const { return rows_; }
  Tensor& tensor() { return rows_; }

  const std::vector<std::vector<std::size_t>>& task_maps() const { return maps_; }
  const std::vector<std::size_t>& task_map(std::size_t task_id) const;
  const std::vector<std::uint8_t>& active_mask() const { return active_; }
  bool is_active(std::size_t row) const { return active_.at(row) != 0; }
  std::size_t active_count() const;

  /// Replace maps and mask; rows used by no map become inactive.
  void set_task_maps(std::vector<std::vector<std::size_t>> maps);

  /// Checks this prefix can drive `model`.
  void check_compatible(const ModelConfig& model) const;

  /// SHA-256 over the row payload.
  std::string checksum() const;

  void save(const std::filesystem::path& path) const;
  static PrefixMatrix load(const std::filesystem::path& path);

  bool operator==(const PrefixMatrix& other) const;

 private:
  PrefixMatrix() = default;

  PrefixDesign design_;
  std::size_t n_layers_ = 0;
  std::size_t d_model_ = 0;
  Tensor rows_;
  std::vector<std::vector<std::size_t>> maps_;
  std::vector<std::uint8_t> active_;
};

/// Rows `indices` sliced into per-site, per-layer key/value blocks, linked
/// to the prefix tensor for gradients. An inactive or out-of-range index is
/// a mask violation / index error.
PrefixActivations gather(const PrefixMatrix& prefix, std::span<const std::size_t> indices);

/// Per task, the top_n rows by descending score (ties to the lower index).
/// The active mask becomes the union of the new maps.
void apply_selection(PrefixMatrix& prefix, std::span<const FisherReport> reports,
                     std::size_t top_n);

/// Rows used for the target task: every row for manual designs, the sorted
/// union of the task maps for self-adaptive ones.
std::vector<std::size_t> merge_for_target(const PrefixMatrix& prefix);

/// Number of rows used by more than one task and by exactly one task.
struct SharingSummary {
  std::size_t shared = 0;
  std::size_t unique = 0;
  std::size_t inactive = 0;
};
SharingSummary sharing_summary(const PrefixMatrix& prefix);

/// "shared" when a row belongs to more than one task map, "unique(t)" when
/// only to task t, "inactive" otherwise.
std::string region_label(const PrefixMatrix& prefix, std::size_t row);

}  // namespace pmerge
