#include "pmerge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

#include "pmerge/error.hpp"

namespace pmerge {

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::MergeManual: return "merge_manual";
    case Stage::MergeSelfAdaptive: return "merge_self_adaptive";
    case Stage::Transfer: return "transfer";
    case Stage::FineTune: return "fine_tune";
  }
  return "?";
}

std::string_view to_string(TrainableScope scope) {
  return scope == TrainableScope::All ? "all" : "prefix_only";
}

TrainConfig TrainConfig::defaults_for(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::MergeManual:
    case Stage::MergeSelfAdaptive:
      break;
    case Stage::Transfer:
      c.batch_size = 0;
      break;
    case Stage::FineTune:
      c.learning_rate = 2e-5;
      c.scope = TrainableScope::All;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    fail(ErrorKind::Config, "learning_rate must be positive, got " + std::to_string(learning_rate));
  }
  if (weight_decay < 0.0) fail(ErrorKind::Config, "weight_decay must be >= 0");
  if (steps == 0 && epochs == 0) fail(ErrorKind::Config, "either steps or epochs must be positive");
  if (eval_max_len == 0) fail(ErrorKind::Config, "eval_max_len must be positive");
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  const std::size_t n = steps.empty() ? 0 : steps.front().task_counts.size();
  out << "step,loss";
  for (std::size_t t = 0; t < n; ++t) out << ",count_task" << t;
  out << '\n' << std::setprecision(17);
  for (const auto& s : steps) {
    out << s.step << ',' << s.loss;
    for (auto c : s.task_counts) out << ',' << c;
    out << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

namespace {

// One data stream of a mixed batch: examples plus the prefix rows they read.
struct Route {
  const std::vector<Example>* data = nullptr;
  std::vector<std::size_t> indices;
};

// Endless shuffled pass over one task's examples.
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::size_t next() {
    if (cursor_ == order_.size()) reshuffle();
    return order_[cursor_++];
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

Tensor example_loss(const Transformer& model, const PrefixMatrix* prefix,
                    std::span<const std::size_t> indices, const Example& ex) {
  const auto labels = decoder_labels(ex);
  if (prefix && !indices.empty()) {
    const auto acts = gather(*prefix, indices);
    return cross_entropy(model.forward(ex.input, labels, &acts).logits, labels);
  }
  return cross_entropy(model.forward(ex.input, labels, nullptr).logits, labels);
}

std::size_t resolve_batch(const TrainConfig& cfg, std::size_t total) {
  return cfg.batch_size == 0 ? std::min<std::size_t>(16, total) : cfg.batch_size;
}

// Shared loop behind merge_train, fine_tune and transfer.
TrainLog run_mixed(Transformer& model, PrefixMatrix* prefix, const std::vector<Route>& routes,
                   const TrainConfig& cfg, bool train_lm, const StepObserver& observer) {
  cfg.validate();
  const std::size_t n = routes.size();
  if (n == 0) fail(ErrorKind::Config, "no tasks to train on");
  std::size_t total = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (routes[t].data->empty()) {
      fail(ErrorKind::Config, "task " + std::to_string(t) + " has an empty training set");
    }
    total += routes[t].data->size();
  }
  const std::size_t batch = resolve_batch(cfg, total);
  if (batch < n) {
    fail(ErrorKind::Config, "batch_size " + std::to_string(batch) + " is smaller than the " +
                                std::to_string(n) + " tasks it must mix");
  }
  const std::size_t steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * ((total + batch - 1) / batch);

  const bool uses_prefix =
      prefix && std::any_of(routes.begin(), routes.end(), [](const Route& r) { return !r.indices.empty(); });
  model.set_trainable(train_lm);
  std::vector<Tensor> params;
  std::vector<std::uint8_t> row_mask;
  if (uses_prefix) {
    prefix->tensor().set_requires_grad(true);
    params.push_back(prefix->tensor());
    row_mask.assign(prefix->rows(), 0);
    for (const auto& r : routes)
      for (auto i : r.indices) row_mask.at(i) = 1;
  }
  if (train_lm) {
    for (auto& t : model.param_tensors()) params.push_back(t);
  }

  TrainLog log;
  if (params.empty()) return log;  // nothing trainable (e.g. frozen LM without prefix)

  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = cfg.learning_rate;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(params, opt_cfg);
  if (uses_prefix) opt.set_row_mask(0, row_mask);
  GradientAccumulator acc(params);

  std::vector<Sampler> samplers;
  for (std::size_t t = 0; t < n; ++t) samplers.emplace_back(routes[t].data->size(), cfg.seed * 1000003 + t);

  const std::size_t share = batch / n;
  const std::size_t extra = batch % n;
  std::size_t rr = 0;  // round-robin cursor for the remainder
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::size_t> counts(n, share);
    for (std::size_t j = 0; j < extra; ++j) ++counts[(rr + j) % n];
    rr = (rr + extra) % n;

    acc.reset();
    double batch_loss = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < counts[t]; ++k) {
        const Example& ex = (*routes[t].data)[samplers[t].next()];
        Tensor loss = example_loss(model, prefix, routes[t].indices, ex);
        const double v = loss.item();
        if (!std::isfinite(v)) {
          fail(ErrorKind::Numeric, "non-finite loss at step " + std::to_string(step) + " (task " +
                                       std::to_string(t) + ")");
        }
        batch_loss += v;
        acc.add(backward(loss, params));
      }
    }
    if (!acc.all_finite()) fail(ErrorKind::Numeric, "non-finite gradient at step " + std::to_string(step));
    if (observer) {
      StepContext ctx;
      ctx.step = step;
      ctx.loss = batch_loss;
      ctx.grads = &acc;
      ctx.prefix = prefix;
      if (uses_prefix) ctx.prefix_grad = acc.grad(0);
      observer(ctx);
    }
    opt.step(acc.grads());
    log.steps.push_back({step, batch_loss, std::move(counts)});
  }
  return log;
}

std::vector<Route> task_routes(const PrefixMatrix* prefix, std::span<const TaskData> tasks) {
  std::vector<Route> routes;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    Route r;
    r.data = &tasks[t].train;
    if (prefix) r.indices = prefix->task_map(t);
    routes.push_back(std::move(r));
  }
  return routes;
}

void check_task_count(const PrefixMatrix& prefix, std::size_t n_tasks) {
  if (prefix.task_maps().size() != n_tasks) {
    fail(ErrorKind::Config, "prefix design has " + std::to_string(prefix.task_maps().size()) +
                                " task maps but " + std::to_string(n_tasks) + " tasks were given");
  }
}

}  // namespace

TrainLog merge_train(Transformer& model, PrefixMatrix& prefix, std::span<const TaskData> tasks,
                     const TrainConfig& cfg, const StepObserver& observer) {
  if (cfg.scope != TrainableScope::PrefixOnly) {
    fail(ErrorKind::Config, "merge_train trains the prefix only; use fine_tune for scope all");
  }
  prefix.check_compatible(model.config());
  check_task_count(prefix, tasks.size());
  return run_mixed(model, &prefix, task_routes(&prefix, tasks), cfg, false, observer);
}

std::vector<FisherReport> fisher_reports(const Transformer& model, const PrefixMatrix& prefix,
                                         std::span<const TaskData> tasks) {
  check_task_count(prefix, tasks.size());
  std::vector<FisherReport> reports;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (tasks[t].train.empty()) fail(ErrorKind::Config, "task " + std::to_string(t) + " has no data");
    FisherAccumulator acc(t, prefix.rows(), prefix.row_dim());
    for (std::size_t k = 0; k < tasks[t].train.size(); ++k) {
      accumulate(acc, model, prefix, prefix.task_map(t), tasks[t].train[k], k);
    }
    reports.push_back(finalize(acc));
    for (std::size_t i = 0; i < reports.back().scores.size(); ++i) {
      if (!std::isfinite(reports.back().scores[i])) {
        fail(ErrorKind::Numeric, "non-finite Fisher score for task " + std::to_string(t) + ", row " +
                                     std::to_string(i));
      }
    }
  }
  return reports;
}

SelfAdaptiveResult self_adaptive_train(Transformer& model, PrefixMatrix& prefix,
                                       std::span<const TaskData> tasks, const TrainConfig& cfg,
                                       const StepObserver& observer) {
  const auto* design = std::get_if<SelfAdaptiveDesign>(&prefix.design());
  if (!design) fail(ErrorKind::Design, "self_adaptive_train needs a self-adaptive prefix design");
  check_task_count(prefix, tasks.size());

  // Phase A: every task reads every row for one epoch.
  std::vector<std::vector<std::size_t>> all(tasks.size());
  for (auto& m : all) {
    m.resize(prefix.rows());
    std::iota(m.begin(), m.end(), std::size_t{0});
  }
  prefix.set_task_maps(all);
  TrainConfig warm = cfg;
  warm.steps = 0;
  warm.epochs = 1;

  SelfAdaptiveResult out;
  out.warmup = merge_train(model, prefix, tasks, warm, observer);
  // Phase B/C: measurement-only Fisher pass, then per-task top-n.
  out.reports = fisher_reports(model, prefix, tasks);
  apply_selection(prefix, out.reports, design->top_n);
  out.sharing = sharing_summary(prefix);
  // Phase D.
  out.continued = merge_train(model, prefix, tasks, cfg, observer);
  return out;
}

nlohmann::json EvalResult::to_json() const {
  return {{"rouge", rouge.to_json()}, {"mean_loss", mean_loss}, {"predictions", predictions},
          {"references", references}};
}

double mean_loss(const Transformer& model, const PrefixMatrix* prefix,
                 std::span<const std::size_t> indices, std::span<const Example> examples) {
  if (examples.empty()) fail(ErrorKind::EmptyData, "mean_loss: no examples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& ex : examples) total += example_loss(model, prefix, indices, ex).item();
  return total / static_cast<double>(examples.size());
}

EvalResult evaluate(const Transformer& model, const PrefixMatrix* prefix,
                    std::span<const std::size_t> indices, std::span<const Example> examples,
                    const Vocabulary& vocab, std::size_t max_len, std::size_t min_len) {
  if (examples.empty()) fail(ErrorKind::EmptyData, "evaluate: no examples");
  NoGradGuard no_grad;
  EvalResult r;
  PrefixActivations acts;
  const bool with_prefix = prefix && !indices.empty();
  if (with_prefix) acts = gather(*prefix, indices);
  for (const auto& ex : examples) {
    auto out = model.greedy_decode(ex.input, with_prefix ? &acts : nullptr, max_len, min_len);
    if (!out.empty() && out.back() == Transformer::kEos) out.pop_back();
    r.predictions.push_back(vocab.decode(out));
    r.references.push_back(vocab.decode(ex.target));
  }
  r.rouge = corpus_rouge(r.predictions, r.references);
  r.mean_loss = mean_loss(model, prefix, indices, examples);
  return r;
}

TransferResult transfer(Transformer& model, PrefixMatrix* prefix, const TaskData& target,
                        const Vocabulary& vocab, const TrainConfig& cfg,
                        const StepObserver& observer) {
  PrefixMatrix* used = cfg.ablations.no_prefix ? nullptr : prefix;
  TransferResult out;
  if (used) {
    used->check_compatible(model.config());
    out.indices = merge_for_target(*used);
  }
  std::vector<Example> train = target.train;
  std::vector<Example> test = target.test;
  if (cfg.ablations.no_prompt) {
    for (auto& ex : train) ex = ex.without_prompt();
    for (auto& ex : test) ex = ex.without_prompt();
  }
  std::vector<Route> routes(1);
  routes[0].data = &train;
  routes[0].indices = out.indices;
  out.log = run_mixed(model, used, routes, cfg, cfg.scope == TrainableScope::All, observer);
  if (!test.empty()) {
    out.eval = evaluate(model, used, out.indices, test, vocab, cfg.eval_max_len, cfg.eval_min_len);
  }
  return out;
}

TrainLog fine_tune(Transformer& model, PrefixMatrix* prefix, std::span<const TaskData> tasks,
                   const TrainConfig& cfg, const StepObserver& observer) {
  if (prefix) {
    prefix->check_compatible(model.config());
    check_task_count(*prefix, tasks.size());
  }
  return run_mixed(model, prefix, task_routes(prefix, tasks), cfg, true, observer);
}

std::string combination_label(Recipe stage1, Recipe stage2) {
  auto name = [](Recipe r) { return r == Recipe::Fine ? std::string("Fine") : std::string("Prefix"); };
  return name(stage1) + "+" + name(stage2);
}

TransferResult run_combination(const Transformer& base, std::span<const TaskData> aux,
                               const TaskData& target, const Vocabulary& vocab,
                               const CombinationConfig& cfg) {
  Transformer model = base.clone();
  std::optional<PrefixMatrix> prefix;
  if (cfg.stage1 == Recipe::Prefix) {
    prefix.emplace(cfg.design, model.config(), cfg.prefix_seed);
    merge_train(model, *prefix, aux, cfg.stage1_prefix);
  } else {
    fine_tune(model, nullptr, aux, cfg.stage1_fine);
    if (cfg.stage2 == Recipe::Prefix) prefix.emplace(cfg.design, model.config(), cfg.prefix_seed);
  }
  TrainConfig stage2 = cfg.stage2 == Recipe::Prefix ? cfg.stage2_prefix : cfg.stage2_fine;
  stage2.scope = cfg.stage2 == Recipe::Prefix ? TrainableScope::PrefixOnly : TrainableScope::All;
  return transfer(model, prefix ? &*prefix : nullptr, target, vocab, stage2);
}

// --- multi-seed reporting ---------------------------------------------------

namespace {

nlohmann::json metric_json(const Metrics& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  return j;
}

Metrics metric_from_json(const nlohmann::json& j) {
  Metrics m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    m[it.key()] = it.value().is_null() ? std::numeric_limits<double>::quiet_NaN() : it.value().get<double>();
  }
  return m;
}

}  // namespace

nlohmann::json RunReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"seed", r.seed}, {"metrics", metric_json(r.metrics)}, {"diverged", r.diverged},
                      {"note", r.note}});
  }
  return {{"rows", rows_j}, {"mean", metric_json(mean)}, {"std", metric_json(std)},
          {"diverged", diverged}};
}

RunReport RunReport::from_json(const nlohmann::json& j) {
  RunReport r;
  try {
    for (const auto& row : j.at("rows")) {
      r.rows.push_back({row.at("seed").get<std::uint64_t>(), metric_from_json(row.at("metrics")),
                        row.at("diverged").get<bool>(), row.at("note").get<std::string>()});
    }
    r.mean = metric_from_json(j.at("mean"));
    r.std = metric_from_json(j.at("std"));
    r.diverged = j.at("diverged").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, std::string("malformed run report: ") + e.what());
  }
  return r;
}

RunReport multi_seed_report(const std::function<Metrics(std::uint64_t)>& run,
                            std::span<const std::uint64_t> seeds) {
  if (seeds.size() < 2) fail(ErrorKind::Config, "multi_seed_report needs at least 2 seeds");
  RunReport report;
  for (auto seed : seeds) {
    SeedRow row;
    row.seed = seed;
    try {
      row.metrics = run(seed);
      for (const auto& [k, v] : row.metrics) {
        if (!std::isfinite(v)) {
          row.diverged = true;
          row.note = "non-finite metric " + k;
          break;
        }
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) throw;
      row.diverged = true;
      row.note = e.what();
    }
    if (row.diverged) report.diverged.push_back(seed);
    report.rows.push_back(std::move(row));
  }
  std::map<std::string, std::vector<double>> values;
  for (const auto& row : report.rows) {
    if (row.diverged) continue;
    for (const auto& [k, v] : row.metrics) values[k].push_back(v);
  }
  for (const auto& [k, vs] : values) {
    const double n = static_cast<double>(vs.size());
    const double mean = std::accumulate(vs.begin(), vs.end(), 0.0) / n;
    double var = 0.0;
    for (double v : vs) var += (v - mean) * (v - mean);
    report.mean[k] = mean;
    report.std[k] = std::sqrt(var / n);
  }
  return report;
}

}  // namespace pmerge
