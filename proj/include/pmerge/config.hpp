#pragma once

// INI run configuration. Sections: [model] [pretrain] [data] [prefix]
// [stage1] [stage2] [eval] [paths]. Overrides use "section.key=value".

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmerge/pipeline.hpp"
#include "pmerge/prefix_store.hpp"
#include "pmerge/trainer.hpp"

namespace pmerge {

struct DataConfig {
  std::vector<std::string> aux_tasks{"sum", "qa"};
  std::string target = "qfs";
  GeneratorParams generator;
  std::size_t aux_train_size = 3000;
  std::size_t aux_test_size = 100;
  std::size_t target_train_size = 32;
  std::size_t target_test_size = 200;
  std::uint64_t aux_seed = 11;
  std::uint64_t target_seed = 100;
  std::uint64_t test_seed = 22;
  /// Optional JSONL overrides for the target splits.
  std::filesystem::path target_train_jsonl;
  std::filesystem::path target_test_jsonl;
};

struct PrefixConfig {
  std::string design = "manual";  // manual | self_adaptive
  std::size_t unique_total = 10;
  std::size_t shared = 20;
  std::size_t init_len = 40;
  std::size_t top_n = 25;
  double init_std = 0.02;
  std::uint64_t seed = 5;

  PrefixDesign make(std::size_t n_tasks) const;
};

struct EvalConfig {
  std::size_t max_len = 4;
  std::size_t min_len = 1;
  std::size_t n_samples = 100;
};

struct RunConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  DataConfig data;
  PrefixConfig prefix;
  TrainConfig stage1;
  TrainConfig stage2;
  EvalConfig eval;
  std::filesystem::path backbone = "backbone.ckpt";
  std::filesystem::path out_dir = "runs/default";

  RunConfig();

  /// Defaults, then the file (if non-empty), then the overrides in order.
  static RunConfig load(const std::filesystem::path& path, std::span<const std::string> overrides = {});
  static RunConfig parse(const std::string& ini_text, std::span<const std::string> overrides = {});

  nlohmann::json to_json() const;
};

}  // namespace pmerge
