// pmerge: command-line driver for the prefix-merging pipeline.
//
//   pmerge pretrain      --config run.ini
//   pmerge merge-train   --config run.ini
//   pmerge adapt         --config run.ini
//   pmerge transfer      --config run.ini [--prefix merged.ckpt]
//   pmerge eval          --config run.ini --prefix transfer.ckpt
//   pmerge viz           --config run.ini --prefix transfer.ckpt
//   pmerge leakage-check --train a.jsonl --test b.jsonl
//   pmerge grad-check    [--configs 20]
//
// Every subcommand accepts --set section.key=value overrides. Results are JSON
// on stdout; failures exit nonzero with {"error", "message"} on stderr.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "pmerge/config.hpp"
#include "pmerge/error.hpp"
#include "pmerge/eval.hpp"
#include "pmerge/fisher.hpp"
#include "pmerge/pipeline.hpp"
#include "pmerge/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pmerge;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;

  RunConfig load() const {
    RunConfig c = RunConfig::load(config, overrides);
    if (!out.empty()) c.out_dir = out;
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "INI run configuration");
  cmd->add_option("--set", c.overrides, "Override, e.g. stage1.steps=200");
  cmd->add_option("-o,--out", c.out, "Run artifacts directory (overrides paths.out_dir)");
}

Transformer load_backbone(const RunConfig& cfg) {
  Transformer model = Transformer::load(cfg.backbone);
  if (!(model.config() == cfg.model)) {
    fail(ErrorKind::Compatibility, "backbone " + cfg.backbone.string() +
                                       " does not match the [model] section of the config");
  }
  model.set_trainable(false);
  return model;
}

std::vector<TaskData> aux_tasks(const RunConfig& cfg, const Vocabulary& vocab) {
  std::vector<TaskData> out;
  for (std::size_t i = 0; i < cfg.data.aux_tasks.size(); ++i) {
    const auto spec = make_task(task_kind_from_string(cfg.data.aux_tasks[i]), i, vocab, cfg.data.generator);
    out.push_back(make_task_data(spec, vocab, cfg.data.aux_seed + 2 * i, cfg.data.aux_train_size,
                                 cfg.data.aux_seed + 2 * i + 1, cfg.data.aux_test_size));
  }
  return out;
}

TaskData target_task(const RunConfig& cfg, const Vocabulary& vocab) {
  TaskData d;
  d.spec = make_task(task_kind_from_string(cfg.data.target), 0, vocab, cfg.data.generator);
  auto from_jsonl = [&](const fs::path& p) {
    auto ds = load_jsonl(p, FieldMap{}, vocab, d.spec.prompt_tokens);
    std::vector<Example> out;
    for (const auto& ex : ds.examples) out.push_back(truncate(ex, cfg.model.max_src_len, cfg.model.max_tgt_len));
    return out;
  };
  d.train = cfg.data.target_train_jsonl.empty()
                ? generate_dataset(d.spec, vocab, cfg.data.target_seed, cfg.data.target_train_size)
                : from_jsonl(cfg.data.target_train_jsonl);
  d.test = cfg.data.target_test_jsonl.empty()
               ? generate_dataset(d.spec, vocab, cfg.data.test_seed, cfg.data.target_test_size)
               : from_jsonl(cfg.data.target_test_jsonl);
  return d;
}

fs::path prepare_out(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

json eval_aux(const Transformer& model, const PrefixMatrix& prefix, const std::vector<TaskData>& tasks,
              const Vocabulary& vocab, const RunConfig& cfg) {
  json per_task = json::array();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (tasks[t].test.empty()) continue;
    const auto r = evaluate(model, &prefix, prefix.task_map(t), tasks[t].test, vocab, cfg.eval.max_len,
                            cfg.eval.min_len);
    per_task.push_back({{"task", tasks[t].spec.name}, {"rouge", r.rouge.to_json()}, {"mean_loss", r.mean_loss}});
  }
  return per_task;
}

int cmd_pretrain(const Common& common) {
  const RunConfig cfg = common.load();
  Vocabulary vocab(cfg.model.vocab_size);
  TrainLog log;
  Transformer model = pretrain_backbone(cfg.model, vocab, cfg.data.generator, cfg.pretrain, &log);
  if (cfg.backbone.has_parent_path()) fs::create_directories(cfg.backbone.parent_path());
  model.save(cfg.backbone);
  const auto out = prepare_out(cfg);
  log.write_csv(out / "pretrain_loss.csv");
  json j{{"backbone", cfg.backbone.string()}, {"checksum", model.checksum()}, {"steps", log.steps.size()},
         {"final_loss", log.steps.empty() ? 0.0 : log.steps.back().loss}};
  export_metrics(j, out / "pretrain.json");
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_merge_train(const Common& common, bool self_adaptive) {
  RunConfig cfg = common.load();
  if (self_adaptive) cfg.prefix.design = "self_adaptive";
  Vocabulary vocab(cfg.model.vocab_size);
  Transformer model = load_backbone(cfg);
  const auto tasks = aux_tasks(cfg, vocab);
  PrefixMatrix prefix(cfg.prefix.make(tasks.size()), cfg.model, cfg.prefix.seed, cfg.prefix.init_std);
  const auto out = prepare_out(cfg);
  const std::string lm_before = model.checksum();

  json j{{"design", design_label(prefix.design())}};
  if (cfg.prefix.design == "self_adaptive") {
    cfg.stage1.stage = Stage::MergeSelfAdaptive;
    auto res = self_adaptive_train(model, prefix, tasks, cfg.stage1);
    export_fisher_csv(res.reports, out / "fisher.csv");
    TrainLog all = res.warmup;
    for (auto s : res.continued.steps) {
      s.step += res.warmup.steps.size();
      all.steps.push_back(std::move(s));
    }
    all.write_csv(out / "loss.csv");
    j["sharing"] = {{"shared", res.sharing.shared}, {"unique", res.sharing.unique},
                    {"inactive", res.sharing.inactive}, {"active", prefix.active_count()}};
    j["steps"] = all.steps.size();
  } else {
    auto log = merge_train(model, prefix, tasks, cfg.stage1);
    log.write_csv(out / "loss.csv");
    j["steps"] = log.steps.size();
  }
  prefix.save(out / "prefix.ckpt");
  j["lm_checksum_unchanged"] = model.checksum() == lm_before;
  j["prefix_checksum"] = prefix.checksum();
  j["tasks"] = eval_aux(model, prefix, tasks, vocab, cfg);
  j["prefix"] = (out / "prefix.ckpt").string();
  export_metrics(j, out / "metrics.json");
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_transfer(const Common& common, const std::string& prefix_path) {
  const RunConfig cfg = common.load();
  Vocabulary vocab(cfg.model.vocab_size);
  Transformer model = load_backbone(cfg);
  const TaskData target = target_task(cfg, vocab);
  std::optional<PrefixMatrix> prefix;
  if (!prefix_path.empty()) {
    prefix = PrefixMatrix::load(prefix_path);
  } else {
    // Random baseline: the stage-1 layout, freshly initialized.
    prefix.emplace(cfg.prefix.make(cfg.data.aux_tasks.size()), cfg.model, cfg.prefix.seed, cfg.prefix.init_std);
  }
  const auto out = prepare_out(cfg);
  const std::string lm_before = model.checksum();
  auto res = transfer(model, &*prefix, target, vocab, cfg.stage2);
  res.log.write_csv(out / "loss.csv");
  prefix->save(out / "prefix.ckpt");
  json j{{"init", prefix_path.empty() ? "random" : prefix_path},
         {"rows_used", res.indices.size()},
         {"steps", res.log.steps.size()},
         {"lm_checksum_unchanged", model.checksum() == lm_before},
         {"prefix_checksum", prefix->checksum()},
         {"eval", res.eval.to_json()}};
  export_metrics(j, out / "metrics.json");
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_eval(const Common& common, const std::string& prefix_path) {
  const RunConfig cfg = common.load();
  Vocabulary vocab(cfg.model.vocab_size);
  Transformer model = load_backbone(cfg);
  const TaskData target = target_task(cfg, vocab);
  std::optional<PrefixMatrix> prefix;
  std::vector<std::size_t> indices;
  if (!prefix_path.empty() && !cfg.stage2.ablations.no_prefix) {
    prefix = PrefixMatrix::load(prefix_path);
    prefix->check_compatible(cfg.model);
    indices = merge_for_target(*prefix);
  }
  std::vector<Example> test = target.test;
  if (cfg.stage2.ablations.no_prompt)
    for (auto& ex : test) ex = ex.without_prompt();
  const auto r = evaluate(model, prefix ? &*prefix : nullptr, indices, test, vocab, cfg.eval.max_len,
                          cfg.eval.min_len);
  const auto out = prepare_out(cfg);
  json j = r.to_json();
  export_metrics(j, out / "eval.json");
  std::cout << json{{"rouge", j["rouge"]}, {"mean_loss", r.mean_loss}}.dump(2) << '\n';
  return 0;
}

int cmd_viz(const Common& common, const std::string& prefix_path) {
  const RunConfig cfg = common.load();
  Vocabulary vocab(cfg.model.vocab_size);
  Transformer model = load_backbone(cfg);
  const TaskData target = target_task(cfg, vocab);
  const PrefixMatrix prefix = PrefixMatrix::load(prefix_path);
  prefix.check_compatible(cfg.model);
  const auto indices = merge_for_target(prefix);
  const auto profiles = attention_profile(model, prefix, indices, target.test, cfg.eval.n_samples,
                                          cfg.eval.max_len, cfg.eval.min_len);
  const auto out = prepare_out(cfg);
  export_profile(profiles, out / "profile.csv");
  json j = json::array();
  for (const auto& p : profiles) {
    std::map<std::string, double> by_region;
    for (std::size_t i = 0; i < p.scores.size(); ++i) by_region[p.regions[i]] += p.scores[i];
    j.push_back({{"site", to_string(p.site)}, {"samples", p.samples}, {"regions", by_region}});
  }
  std::cout << json{{"profile", (out / "profile.csv").string()}, {"sites", j}}.dump(2) << '\n';
  return 0;
}

int cmd_leakage(const std::string& train, const std::string& test, std::size_t max_diff,
                const std::string& field) {
  auto targets = [&](const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot read " + path);
    std::vector<std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto rec = json::parse(line);
        if (rec.contains(field) && rec[field].is_string()) out.push_back(rec[field].get<std::string>());
      } catch (const json::parse_error&) {
        fail(ErrorKind::Load, path + ":" + std::to_string(line_no) + ": malformed JSON");
      }
    }
    return out;
  };
  const auto report = leakage_check(targets(train), targets(test), max_diff);
  std::cout << report.to_json().dump(2) << '\n';
  return 0;
}

int cmd_grad_check(std::size_t configs, std::uint64_t seed) {
  const auto res = grad_check(configs, seed);
  std::cout << res.to_json().dump(2) << '\n';
  if (!res.passed) fail(ErrorKind::Numeric, "gradient check failed: " + res.worst);
  return 0;
}

void print_error(std::string_view kind, std::string_view message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prefix-merging toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string prefix_path, train_path, test_path, field = "target";
  std::size_t max_diff = 2, configs = 20;
  std::uint64_t seed = 0;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the frozen backbone (denoising + cue continuation)");
  add_common(pretrain, common);
  auto* merge = app.add_subcommand("merge-train", "Stage 1: manual prefix-merging on auxiliary tasks");
  add_common(merge, common);
  auto* adapt = app.add_subcommand("adapt", "Stage 1: self-adaptive prefix-merging");
  add_common(adapt, common);
  auto* xfer = app.add_subcommand("transfer", "Stage 2: prefix-tuning on the target task");
  add_common(xfer, common);
  xfer->add_option("--prefix", prefix_path, "Merged prefix checkpoint (random init if omitted)");
  auto* eval = app.add_subcommand("eval", "Greedy decoding + ROUGE on the target test split");
  add_common(eval, common);
  eval->add_option("--prefix", prefix_path, "Prefix checkpoint");
  auto* viz = app.add_subcommand("viz", "Prefix attention profile CSV");
  add_common(viz, common);
  viz->add_option("--prefix", prefix_path, "Prefix checkpoint")->required();
  auto* leak = app.add_subcommand("leakage-check", "Near-duplicate targets between splits");
  leak->add_option("--train", train_path, "Train JSONL")->required();
  leak->add_option("--test", test_path, "Test JSONL")->required();
  leak->add_option("--max-word-diff", max_diff, "Leak when word edit distance is below this");
  leak->add_option("--field", field, "JSON field holding the target text");
  auto* grad = app.add_subcommand("grad-check", "Backward vs finite differences on random toy models");
  grad->add_option("--configs", configs, "Number of random configs");
  grad->add_option("--seed", seed, "Seed for the random configs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*merge) return cmd_merge_train(common, false);
    if (*adapt) return cmd_merge_train(common, true);
    if (*xfer) return cmd_transfer(common, prefix_path);
    if (*eval) return cmd_eval(common, prefix_path);
    if (*viz) return cmd_viz(common, prefix_path);
    if (*leak) return cmd_leakage(train_path, test_path, max_diff, field);
    if (*grad) return cmd_grad_check(configs, seed);
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("internal_error", e.what());
    return 3;
  }
  return 1;
}
