#pragma once

// Two-stage pipeline: merge auxiliary-task knowledge into a prefix with the
// language model frozen, then continue prefix-tuning on the target task from
// the merged prefix. Fine-tuning variants share the same data routing.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmerge/eval.hpp"
#include "pmerge/fisher.hpp"
#include "pmerge/optim.hpp"
#include "pmerge/prefix_store.hpp"
#include "pmerge/tasks.hpp"
#include "pmerge/transformer.hpp"

namespace pmerge {

enum class Stage { MergeManual, MergeSelfAdaptive, Transfer, FineTune };
enum class TrainableScope { PrefixOnly, All };

std::string_view to_string(Stage stage);
std::string_view to_string(TrainableScope scope);

struct Ablations {
  bool no_prefix = false;
  bool no_prompt = false;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  double weight_decay = 0.01;
  /// 0 means min(16, training set size).
  std::size_t batch_size = 48;
  /// Optimizer steps; when 0, `epochs` full passes over the data are used.
  std::size_t steps = 0;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  Stage stage = Stage::MergeManual;
  TrainableScope scope = TrainableScope::PrefixOnly;
  Ablations ablations;
  std::size_t eval_max_len = 8;
  std::size_t eval_min_len = 1;

  /// Defaults per stage: 5e-5 / batch 48 for prefix stages, 2e-5 / batch 48
  /// for fine-tuning, batch min(16, n) for transfer.
  static TrainConfig defaults_for(Stage stage);
  void validate() const;
};

struct TaskData {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> test;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;                      // summed over the batch
  std::vector<std::size_t> task_counts;   // examples per task in the batch
};

struct TrainLog {
  std::vector<StepRecord> steps;

  /// step,loss,count_task0,count_task1,...
  void write_csv(const std::filesystem::path& path) const;
};

struct StepContext {
  std::size_t step = 0;
  double loss = 0.0;
  const GradientAccumulator* grads = nullptr;
  const PrefixMatrix* prefix = nullptr;
  /// Summed batch gradient of the prefix tensor; empty when it is not trained.
  std::span<const double> prefix_grad;
};

/// Called after gradients are summed and before the optimizer step.
using StepObserver = std::function<void(const StepContext&)>;

/// Mixed-task prefix training: every batch holds floor(B/n) examples per task
/// (remainder round-robin), each routed through its task's index map and
/// prompt; summed cross-entropy; one AdamW step on the trainable scope.
TrainLog merge_train(Transformer& model, PrefixMatrix& prefix, std::span<const TaskData> tasks,
                     const TrainConfig& cfg, const StepObserver& observer = {});

struct SelfAdaptiveResult {
  TrainLog warmup;
  std::vector<FisherReport> reports;
  SharingSummary sharing;
  TrainLog continued;
};

/// Fully shared warm-up epoch, one measurement-only Fisher pass per task,
/// top-n selection, then merge training on the selected maps for cfg.steps.
SelfAdaptiveResult self_adaptive_train(Transformer& model, PrefixMatrix& prefix,
                                       std::span<const TaskData> tasks, const TrainConfig& cfg,
                                       const StepObserver& observer = {});

/// Fisher reports for each task over its full training split, using the
/// prefix's current maps. No parameter changes.
std::vector<FisherReport> fisher_reports(const Transformer& model, const PrefixMatrix& prefix,
                                         std::span<const TaskData> tasks);

struct EvalResult {
  RougeSummary rouge;
  double mean_loss = 0.0;
  std::vector<std::string> predictions;
  std::vector<std::string> references;

  nlohmann::json to_json() const;
};

/// Greedy decoding + ROUGE, plus mean teacher-forced loss.
EvalResult evaluate(const Transformer& model, const PrefixMatrix* prefix,
                    std::span<const std::size_t> indices, std::span<const Example> examples,
                    const Vocabulary& vocab, std::size_t max_len, std::size_t min_len);

/// Mean per-example cross-entropy with teacher forcing.
double mean_loss(const Transformer& model, const PrefixMatrix* prefix,
                 std::span<const std::size_t> indices, std::span<const Example> examples);

struct TransferResult {
  TrainLog log;
  EvalResult eval;
  std::vector<std::size_t> indices;
};

/// Target-task tuning over merge_for_target(prefix). A null prefix or the
/// no_prefix ablation means L_p = 0. The target examples carry the target
/// prompt; no_prompt strips it. Scope All also trains the LM.
TransferResult transfer(Transformer& model, PrefixMatrix* prefix, const TaskData& target,
                        const Vocabulary& vocab, const TrainConfig& cfg,
                        const StepObserver& observer = {});

/// Mixed-task training with the LM trainable (and the prefix, when given).
TrainLog fine_tune(Transformer& model, PrefixMatrix* prefix, std::span<const TaskData> tasks,
                   const TrainConfig& cfg, const StepObserver& observer = {});

enum class Recipe { Fine, Prefix };

/// Two-stage variants "Fine+Fine", "Fine+Prefix", "Prefix+Fine",
/// "Prefix+Prefix" on a private copy of `base`.
struct CombinationConfig {
  Recipe stage1 = Recipe::Prefix;
  Recipe stage2 = Recipe::Prefix;
  PrefixDesign design = ManualDesign{20, 5, 2};
  std::uint64_t prefix_seed = 0;
  TrainConfig stage1_prefix;
  TrainConfig stage1_fine;
  TrainConfig stage2_prefix;
  TrainConfig stage2_fine;
};

std::string combination_label(Recipe stage1, Recipe stage2);
TransferResult run_combination(const Transformer& base, std::span<const TaskData> aux,
                               const TaskData& target, const Vocabulary& vocab,
                               const CombinationConfig& cfg);

// --- multi-seed reporting ---------------------------------------------------

using Metrics = std::map<std::string, double>;

struct SeedRow {
  std::uint64_t seed = 0;
  Metrics metrics;
  bool diverged = false;
  std::string note;
};

struct RunReport {
  std::vector<SeedRow> rows;
  Metrics mean;
  Metrics std;  // population standard deviation over non-diverged seeds
  std::vector<std::uint64_t> diverged;

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
};

/// Runs `run` per seed. A seed whose run throws a numeric error or returns a
/// non-finite metric is kept in `rows`, flagged, and excluded from mean/std.
RunReport multi_seed_report(const std::function<Metrics(std::uint64_t)>& run,
                            std::span<const std::uint64_t> seeds);

}  // namespace pmerge
