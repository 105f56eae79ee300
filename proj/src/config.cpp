#include "pmerge/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pmerge/error.hpp"

namespace pmerge {

namespace pt = boost::property_tree;

PrefixDesign PrefixConfig::make(std::size_t n_tasks) const {
  PrefixDesign d;
  if (design == "manual") {
    d = ManualDesign::from_totals(unique_total, shared, n_tasks);
  } else if (design == "self_adaptive") {
    d = SelfAdaptiveDesign{init_len, top_n, n_tasks};
  } else {
    fail(ErrorKind::Config, "prefix.design must be manual or self_adaptive, got '" + design + "'");
  }
  validate(d);
  return d;
}

RunConfig::RunConfig() {
  // Toy-scale defaults; the large-model values live in TrainConfig::defaults_for.
  stage1 = TrainConfig::defaults_for(Stage::MergeManual);
  stage1.learning_rate = 1e-2;
  stage1.batch_size = 16;
  stage1.steps = 1500;
  stage1.weight_decay = 0.0;
  stage2 = TrainConfig::defaults_for(Stage::Transfer);
  stage2.learning_rate = 1e-2;
  stage2.steps = 100;
  stage2.weight_decay = 0.0;
  stage2.eval_max_len = eval.max_len;
  stage2.eval_min_len = eval.min_len;
}

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"model", {"n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_src_len", "max_tgt_len"}},
      {"pretrain",
       {"steps", "batch_size", "learning_rate", "mask_prob", "cue_prob", "cue_span", "cue_any_token", "data_size",
        "data_seed", "model_seed"}},
      {"data", {"aux_tasks", "target", "segment_len", "segment_pool", "n_segments", "summary_len",
                "answer_len", "copy_len", "content_limit", "aux_train_size", "aux_test_size",
                "target_train_size", "target_test_size", "aux_seed", "target_seed", "test_seed",
                "target_train_jsonl", "target_test_jsonl"}},
      {"prefix", {"design", "unique_total", "shared", "init_len", "top_n", "init_std", "seed"}},
      {"stage1", {"learning_rate", "weight_decay", "batch_size", "steps", "epochs", "seed", "scope",
                  "no_prefix", "no_prompt"}},
      {"stage2", {"learning_rate", "weight_decay", "batch_size", "steps", "epochs", "seed", "scope",
                  "no_prefix", "no_prompt"}},
      {"eval", {"max_len", "min_len", "n_samples"}},
      {"paths", {"backbone", "out_dir"}},
  };
  return keys;
}

void check_key(const std::string& section, const std::string& key) {
  auto it = known_keys().find(section);
  if (it == known_keys().end()) fail(ErrorKind::Config, "unknown config section [" + section + "]");
  if (!it->second.count(key)) fail(ErrorKind::Config, "unknown config key " + section + "." + key);
}

template <typename T>
void read(const pt::ptree& tree, const std::string& path, T& out) {
  auto node = tree.get_optional<std::string>(path);
  if (!node) return;
  try {
    out = tree.get<T>(path);
  } catch (const pt::ptree_bad_data&) {
    fail(ErrorKind::Config, "bad value '" + *node + "' for " + path);
  }
  if constexpr (std::is_unsigned_v<T>) {
    if (node->find('-') != std::string::npos) fail(ErrorKind::Config, path + " must be non-negative");
  }
}

void read_bool(const pt::ptree& tree, const std::string& path, bool& out) {
  auto node = tree.get_optional<std::string>(path);
  if (!node) return;
  if (*node == "true" || *node == "1") out = true;
  else if (*node == "false" || *node == "0") out = false;
  else fail(ErrorKind::Config, "bad boolean '" + *node + "' for " + path);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

void read_stage(const pt::ptree& tree, const std::string& s, TrainConfig& c) {
  read(tree, s + ".learning_rate", c.learning_rate);
  read(tree, s + ".weight_decay", c.weight_decay);
  read(tree, s + ".batch_size", c.batch_size);
  read(tree, s + ".steps", c.steps);
  read(tree, s + ".epochs", c.epochs);
  read(tree, s + ".seed", c.seed);
  if (auto scope = tree.get_optional<std::string>(s + ".scope")) {
    if (*scope == "prefix_only") c.scope = TrainableScope::PrefixOnly;
    else if (*scope == "all") c.scope = TrainableScope::All;
    else fail(ErrorKind::Config, s + ".scope must be prefix_only or all");
  }
  read_bool(tree, s + ".no_prefix", c.ablations.no_prefix);
  read_bool(tree, s + ".no_prompt", c.ablations.no_prompt);
}

nlohmann::json stage_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},       {"steps", c.steps},
          {"epochs", c.epochs},               {"seed", c.seed},
          {"scope", to_string(c.scope)},      {"no_prefix", c.ablations.no_prefix},
          {"no_prompt", c.ablations.no_prompt}};
}

}  // namespace

RunConfig RunConfig::parse(const std::string& ini_text, std::span<const std::string> overrides) {
  pt::ptree tree;
  try {
    std::istringstream in(ini_text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::Config, std::string("config parse error: ") + e.what());
  }
  for (const auto& [section, keys] : tree) {
    if (keys.empty()) fail(ErrorKind::Config, "config key '" + section + "' outside any section");
    for (const auto& [key, value] : keys) check_key(section, key);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    const auto dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      fail(ErrorKind::Config, "override '" + ov + "' must look like section.key=value");
    }
    check_key(ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1));
    tree.put(ov.substr(0, eq), ov.substr(eq + 1));
  }

  RunConfig c;
  auto& m = c.model;
  read(tree, "model.n_layers", m.n_layers);
  read(tree, "model.n_heads", m.n_heads);
  read(tree, "model.d_model", m.d_model);
  read(tree, "model.d_ff", m.d_ff);
  read(tree, "model.vocab_size", m.vocab_size);
  read(tree, "model.max_src_len", m.max_src_len);
  read(tree, "model.max_tgt_len", m.max_tgt_len);
  m.validate();

  auto& p = c.pretrain;
  read(tree, "pretrain.steps", p.steps);
  read(tree, "pretrain.batch_size", p.batch_size);
  read(tree, "pretrain.learning_rate", p.learning_rate);
  read(tree, "pretrain.mask_prob", p.mask_prob);
  read(tree, "pretrain.cue_prob", p.cue_prob);
  read(tree, "pretrain.cue_span", p.cue_span);
  read_bool(tree, "pretrain.cue_any_token", p.cue_any_token);
  read(tree, "pretrain.data_size", p.data_size);
  read(tree, "pretrain.data_seed", p.data_seed);
  read(tree, "pretrain.model_seed", p.model_seed);

  auto& d = c.data;
  if (auto aux = tree.get_optional<std::string>("data.aux_tasks")) d.aux_tasks = split_list(*aux);
  read(tree, "data.target", d.target);
  auto& g = d.generator;
  read(tree, "data.segment_len", g.segment_len);
  read(tree, "data.segment_pool", g.segment_pool);
  read(tree, "data.n_segments", g.n_segments);
  read(tree, "data.summary_len", g.summary_len);
  read(tree, "data.answer_len", g.answer_len);
  read(tree, "data.copy_len", g.copy_len);
  read(tree, "data.content_limit", g.content_limit);
  read(tree, "data.aux_train_size", d.aux_train_size);
  read(tree, "data.aux_test_size", d.aux_test_size);
  read(tree, "data.target_train_size", d.target_train_size);
  read(tree, "data.target_test_size", d.target_test_size);
  read(tree, "data.aux_seed", d.aux_seed);
  read(tree, "data.target_seed", d.target_seed);
  read(tree, "data.test_seed", d.test_seed);
  if (auto v = tree.get_optional<std::string>("data.target_train_jsonl")) d.target_train_jsonl = *v;
  if (auto v = tree.get_optional<std::string>("data.target_test_jsonl")) d.target_test_jsonl = *v;
  if (d.aux_tasks.empty()) fail(ErrorKind::Config, "data.aux_tasks is empty");

  auto& x = c.prefix;
  read(tree, "prefix.design", x.design);
  read(tree, "prefix.unique_total", x.unique_total);
  read(tree, "prefix.shared", x.shared);
  read(tree, "prefix.init_len", x.init_len);
  read(tree, "prefix.top_n", x.top_n);
  read(tree, "prefix.init_std", x.init_std);
  read(tree, "prefix.seed", x.seed);
  x.make(d.aux_tasks.size());

  read_stage(tree, "stage1", c.stage1);
  read_stage(tree, "stage2", c.stage2);
  c.stage1.stage = x.design == "self_adaptive" ? Stage::MergeSelfAdaptive : Stage::MergeManual;
  c.stage2.stage = Stage::Transfer;

  read(tree, "eval.max_len", c.eval.max_len);
  read(tree, "eval.min_len", c.eval.min_len);
  read(tree, "eval.n_samples", c.eval.n_samples);
  c.stage1.eval_max_len = c.stage2.eval_max_len = c.eval.max_len;
  c.stage1.eval_min_len = c.stage2.eval_min_len = c.eval.min_len;

  if (auto v = tree.get_optional<std::string>("paths.backbone")) c.backbone = *v;
  if (auto v = tree.get_optional<std::string>("paths.out_dir")) c.out_dir = *v;

  c.stage1.validate();
  c.stage2.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, std::span<const std::string> overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse(text, overrides);
}

nlohmann::json RunConfig::to_json() const {
  const auto& g = data.generator;
  return {
      {"model", {{"n_layers", model.n_layers}, {"n_heads", model.n_heads}, {"d_model", model.d_model},
                 {"d_ff", model.d_ff}, {"vocab_size", model.vocab_size},
                 {"max_src_len", model.max_src_len}, {"max_tgt_len", model.max_tgt_len}}},
      {"pretrain", {{"steps", pretrain.steps}, {"batch_size", pretrain.batch_size},
                    {"learning_rate", pretrain.learning_rate}, {"mask_prob", pretrain.mask_prob},
                    {"cue_prob", pretrain.cue_prob}, {"cue_span", pretrain.cue_span},
                    {"cue_any_token", pretrain.cue_any_token},
                    {"data_size", pretrain.data_size}, {"data_seed", pretrain.data_seed},
                    {"model_seed", pretrain.model_seed}}},
      {"data", {{"aux_tasks", data.aux_tasks}, {"target", data.target},
                {"segment_len", g.segment_len}, {"segment_pool", g.segment_pool},
                {"n_segments", g.n_segments}, {"summary_len", g.summary_len},
                {"answer_len", g.answer_len}, {"copy_len", g.copy_len},
                {"content_limit", g.content_limit}, {"aux_train_size", data.aux_train_size},
                {"aux_test_size", data.aux_test_size}, {"target_train_size", data.target_train_size},
                {"target_test_size", data.target_test_size}, {"aux_seed", data.aux_seed},
                {"target_seed", data.target_seed}, {"test_seed", data.test_seed},
                {"target_train_jsonl", data.target_train_jsonl.string()},
                {"target_test_jsonl", data.target_test_jsonl.string()}}},
      {"prefix", {{"design", prefix.design}, {"unique_total", prefix.unique_total},
                  {"shared", prefix.shared}, {"init_len", prefix.init_len}, {"top_n", prefix.top_n},
                  {"init_std", prefix.init_std}, {"seed", prefix.seed}}},
      {"stage1", stage_json(stage1)},
      {"stage2", stage_json(stage2)},
      {"eval", {{"max_len", eval.max_len}, {"min_len", eval.min_len}, {"n_samples", eval.n_samples}}},
      {"paths", {{"backbone", backbone.string()}, {"out_dir", out_dir.string()}}},
  };
}

}  // namespace pmerge
