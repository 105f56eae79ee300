#pragma once

// End-to-end toy harness: backbone pretraining, synthetic task data, and the
// gradient-check routine shared by the CLI and the acceptance suite.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pmerge/tasks.hpp"
#include "pmerge/trainer.hpp"
#include "pmerge/transformer.hpp"

namespace pmerge {

/// Generic pretraining of the backbone on unprompted generator sources. Most
/// examples are denoising (tokens replaced by <unk> at `mask_prob`, target =
/// clean source); a `cue_prob` share are continuations (input = one content
/// word followed by the source, target = up to `cue_span` tokens after that
/// word's first occurrence). A prefix can only steer an LM that already reads,
/// copies and looks things up in its input.
struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double mask_prob = 0.15;
  /// Share of continuation examples (see denoising_dataset).
  double cue_prob = 0.5;
  std::size_t cue_span = 3;
  /// Cue on any source token (markers included) instead of content words only.
  bool cue_any_token = false;
  std::size_t data_size = 40000;
  std::uint64_t data_seed = 1;
  std::uint64_t model_seed = 7;
};

std::vector<Example> denoising_dataset(const Vocabulary& vocab, const GeneratorParams& params,
                                       std::uint64_t seed, std::size_t size, double mask_prob,
                                       double cue_prob = 0.0, std::size_t cue_span = 3,
                                       bool cue_any_token = false);

/// Returns the pretrained model, frozen.
Transformer pretrain_backbone(const ModelConfig& model, const Vocabulary& vocab,
                              const GeneratorParams& params, const PretrainConfig& cfg,
                              TrainLog* log = nullptr);

/// Synthetic dataset with its prompt; sizes and seeds per split.
TaskData make_task_data(const TaskSpec& spec, const Vocabulary& vocab, std::uint64_t train_seed,
                        std::size_t train_size, std::uint64_t test_seed, std::size_t test_size);

// --- gradient check ---------------------------------------------------------

struct GradCheckResult {
  std::size_t configs = 0;
  std::size_t params_checked = 0;  // scalar entries
  double max_rel_error = 0.0;      // over entries whose difference exceeds the floor
  double max_abs_error = 0.0;
  std::string worst;               // "config <i>: <param name>"
  bool passed = false;

  nlohmann::json to_json() const;
};

/// For `n_configs` random toy models (<= 2 layers, d_model <= 32) with a random
/// prefix, compares backward() against central differences for every entry of
/// every parameter, including the prefix rows.
GradCheckResult grad_check(std::size_t n_configs, std::uint64_t seed, double tolerance = 1e-5,
                           double abs_floor = 1e-8, double eps = 1e-6);

}  // namespace pmerge
