#include <gtest/gtest.h>

#include <optional>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "pmerge/error.hpp"
#include "pmerge/trainer.hpp"

using namespace pmerge;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 60;
  c.max_src_len = 24;
  c.max_tgt_len = 6;
  return c;
}

struct Fixture {
  ModelConfig cfg = tiny();
  Vocabulary vocab{60, 4};
  std::vector<TaskData> aux;
  TaskData target;

  Fixture() {
    GeneratorParams gp;
    gp.segment_len = 5;
    gp.segment_pool = 3;
    auto sum = make_task(TaskKind::Summarize, 0, vocab, gp);
    auto qa = make_task(TaskKind::Answer, 1, vocab, gp);
    auto qfs = make_task(TaskKind::QuerySummarize, 0, vocab, gp);
    aux.push_back({sum, generate_dataset(sum, vocab, 1, 20), generate_dataset(sum, vocab, 2, 5)});
    aux.push_back({qa, generate_dataset(qa, vocab, 3, 20), generate_dataset(qa, vocab, 4, 5)});
    target = {qfs, generate_dataset(qfs, vocab, 5, 8), generate_dataset(qfs, vocab, 6, 6)};
  }
};

TrainConfig quick(std::size_t steps, std::size_t batch = 4) {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.weight_decay = 0.0;
  c.batch_size = batch;
  c.steps = steps;
  c.eval_max_len = 3;
  return c;
}

template <typename Fn>
std::optional<ErrorKind> error_kind(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

double row_mass(std::span<const double> g, std::size_t row, std::size_t width) {
  double m = 0.0;
  for (std::size_t j = 0; j < width; ++j) m += std::abs(g[row * width + j]);
  return m;
}

}  // namespace

TEST(TrainConfig, StageDefaultsAndValidation) {
  EXPECT_EQ(TrainConfig::defaults_for(Stage::MergeManual).learning_rate, 5e-5);
  EXPECT_EQ(TrainConfig::defaults_for(Stage::MergeManual).batch_size, 48u);
  EXPECT_EQ(TrainConfig::defaults_for(Stage::FineTune).learning_rate, 2e-5);
  EXPECT_EQ(TrainConfig::defaults_for(Stage::FineTune).scope, TrainableScope::All);
  EXPECT_EQ(TrainConfig::defaults_for(Stage::Transfer).batch_size, 0u);
  TrainConfig bad;
  bad.learning_rate = 0.0;
  EXPECT_EQ(error_kind([&] { bad.validate(); }), ErrorKind::Config);
}

TEST(MergeTrain, FrozenLanguageModelChecksumUnchanged) {
  Fixture f;
  Transformer model(f.cfg, 1);
  model.set_trainable(false);
  const auto before = model.checksum();
  PrefixMatrix p(ManualDesign{2, 2, 2}, f.cfg, 2);
  const auto prefix_before = p.checksum();
  merge_train(model, p, f.aux, quick(10));
  EXPECT_EQ(model.checksum(), before);
  EXPECT_NE(p.checksum(), prefix_before);
}

TEST(MergeTrain, EqualMixingWithRoundRobinRemainder) {
  Fixture f;
  Transformer model(f.cfg, 1);
  PrefixMatrix p(ManualDesign{2, 1, 2}, f.cfg, 2);
  auto log = merge_train(model, p, f.aux, quick(4, 5));
  ASSERT_EQ(log.steps.size(), 4u);
  EXPECT_EQ(log.steps[0].task_counts, (std::vector<std::size_t>{3, 2}));
  EXPECT_EQ(log.steps[1].task_counts, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(log.steps[2].task_counts, (std::vector<std::size_t>{3, 2}));
  auto even = merge_train(model, p, f.aux, quick(2, 4));
  EXPECT_EQ(even.steps[0].task_counts, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(error_kind([&] { merge_train(model, p, f.aux, quick(2, 1)); }), ErrorKind::Config);
}

TEST(MergeTrain, PureTaskBatchesTouchOnlyTheirRows) {
  Fixture f;
  Transformer model(f.cfg, 1);
  PrefixMatrix p(ManualDesign{2, 2, 2}, f.cfg, 3);
  // A single-task route through task 0's map: rows 4,5 (task 1's unique rows) stay silent.
  std::vector<TaskData> only_sum{f.aux[0], f.aux[0]};
  only_sum[1].train = f.aux[0].train;
  bool checked = false;
  auto observer = [&](const StepContext& ctx) {
    ASSERT_FALSE(ctx.prefix_grad.empty());
    const std::size_t w = p.row_dim();
    for (std::size_t r = 0; r < p.rows(); ++r) EXPECT_GT(row_mass(ctx.prefix_grad, r, w), 0.0) << r;
    checked = true;
  };
  merge_train(model, p, only_sum, quick(1), observer);
  EXPECT_TRUE(checked);

  PrefixMatrix single(ManualDesign{2, 2, 2}, f.cfg, 3);
  single.set_task_maps({{0, 1, 2, 3}, {0, 1, 2, 3}});
  merge_train(model, single, only_sum, quick(3), [&](const StepContext& ctx) {
    const std::size_t w = single.row_dim();
    EXPECT_EQ(row_mass(ctx.prefix_grad, 4, w), 0.0);
    EXPECT_EQ(row_mass(ctx.prefix_grad, 5, w), 0.0);
    EXPECT_GT(row_mass(ctx.prefix_grad, 2, w), 0.0);
  });
  // Rows 4,5 are outside every map, so the row mask keeps them bit-identical.
  PrefixMatrix ref(ManualDesign{2, 2, 2}, f.cfg, 3);
  for (std::size_t j = 4 * ref.row_dim(); j < 6 * ref.row_dim(); ++j)
    EXPECT_EQ(single.tensor().data()[j], ref.tensor().data()[j]);
}

TEST(MergeTrain, DeterministicGivenSeed) {
  Fixture f;
  auto run = [&](std::uint64_t seed) {
    Transformer model(f.cfg, 1);
    PrefixMatrix p(ManualDesign{2, 2, 2}, f.cfg, 2);
    auto c = quick(5);
    c.seed = seed;
    auto log = merge_train(model, p, f.aux, c);
    return std::make_pair(p.checksum(), log.steps.back().loss);
  };
  EXPECT_EQ(run(3), run(3));
  EXPECT_NE(run(3).first, run(4).first);
}

TEST(MergeTrain, RejectsScopeAllAndTaskCountMismatch) {
  Fixture f;
  Transformer model(f.cfg, 1);
  PrefixMatrix p(ManualDesign{2, 2, 2}, f.cfg, 2);
  auto c = quick(1);
  c.scope = TrainableScope::All;
  EXPECT_EQ(error_kind([&] { merge_train(model, p, f.aux, c); }), ErrorKind::Config);
  PrefixMatrix three(ManualDesign{2, 1, 3}, f.cfg, 2);
  EXPECT_EQ(error_kind([&] { merge_train(model, three, f.aux, quick(1)); }), ErrorKind::Config);
  std::vector<TaskData> empty_task = f.aux;
  empty_task[1].train.clear();
  EXPECT_EQ(error_kind([&] { merge_train(model, p, empty_task, quick(1)); }), ErrorKind::Config);
}

TEST(MergeTrain, LossDecreasesOnTinyProblem) {
  Fixture f;
  Transformer model(f.cfg, 1);
  PrefixMatrix p(ManualDesign{4, 2, 2}, f.cfg, 2, 0.1);
  const auto before = mean_loss(model, &p, p.task_map(0), f.aux[0].train);
  merge_train(model, p, f.aux, quick(40));
  EXPECT_LT(mean_loss(model, &p, p.task_map(0), f.aux[0].train), before);
}

TEST(SelfAdaptive, IdenticalTasksShareEverything) {
  Fixture f;
  Transformer model(f.cfg, 1);
  PrefixMatrix p(SelfAdaptiveDesign{6, 3, 2}, f.cfg, 4);
  std::vector<TaskData> same{f.aux[0], f.aux[0]};
  same[1].spec.task_id = 1;
  auto r = self_adaptive_train(model, p, same, quick(5));
  ASSERT_EQ(r.reports.size(), 2u);
  EXPECT_EQ(r.reports[0].scores, r.reports[1].scores);
  EXPECT_EQ(p.task_map(0), p.task_map(1));
  EXPECT_EQ(r.sharing.shared, 3u);
  EXPECT_EQ(r.sharing.inactive, 3u);
  EXPECT_EQ(r.continued.steps.size(), 5u);
  EXPECT_EQ(r.warmup.steps.size(), 10u);  // one epoch of 40 examples at batch 4
}

TEST(SelfAdaptive, InactiveRowsGetZeroGradientAfterSelection) {
  Fixture f;
  Transformer model(f.cfg, 1);
  PrefixMatrix p(SelfAdaptiveDesign{8, 3, 2}, f.cfg, 4);
  std::size_t phase = 0;
  std::vector<std::uint8_t> active;
  self_adaptive_train(model, p, f.aux, quick(6), [&](const StepContext& ctx) {
    if (active.empty() && ctx.prefix->active_count() < ctx.prefix->rows()) active = ctx.prefix->active_mask();
    if (active.empty()) return;
    ++phase;
    for (std::size_t r = 0; r < p.rows(); ++r)
      if (!active[r]) EXPECT_EQ(row_mass(ctx.prefix_grad, r, p.row_dim()), 0.0);
  });
  EXPECT_EQ(phase, 6u);
  EXPECT_EQ(error_kind([&] {
              PrefixMatrix m(ManualDesign{2, 2, 2}, f.cfg, 1);
              self_adaptive_train(model, m, f.aux, quick(1));
            }),
            ErrorKind::Design);
}

TEST(Transfer, NoPrefixWithFrozenModelTrainsNothing) {
  Fixture f;
  Transformer model(f.cfg, 1);
  model.set_trainable(false);
  PrefixMatrix p(ManualDesign{2, 2, 2}, f.cfg, 2);
  auto c = quick(3);
  c.ablations.no_prefix = true;
  auto r = transfer(model, &p, f.target, f.vocab, c);
  EXPECT_TRUE(r.log.steps.empty());
  EXPECT_TRUE(r.indices.empty());
  EXPECT_EQ(r.eval.rouge.count, f.target.test.size());
}

TEST(Transfer, UsesUnionOfMapsAndEvaluates) {
  Fixture f;
  Transformer model(f.cfg, 1);
  model.set_trainable(false);
  const auto lm = model.checksum();
  PrefixMatrix p(ManualDesign{2, 2, 2}, f.cfg, 2);
  auto r = transfer(model, &p, f.target, f.vocab, quick(3));
  EXPECT_EQ(r.indices, merge_for_target(p));
  EXPECT_EQ(r.log.steps.size(), 3u);
  EXPECT_EQ(r.eval.predictions.size(), f.target.test.size());
  EXPECT_EQ(model.checksum(), lm);

  auto c = quick(2);
  c.ablations.no_prompt = true;
  auto np = transfer(model, &p, f.target, f.vocab, c);
  EXPECT_EQ(np.eval.references, r.eval.references);

  auto all = quick(2);
  all.scope = TrainableScope::All;
  transfer(model, &p, f.target, f.vocab, all);
  EXPECT_NE(model.checksum(), lm);
}

TEST(Combinations, AllFourRecipesRunAndLeaveBaseUntouched) {
  Fixture f;
  Transformer base(f.cfg, 1);
  base.set_trainable(false);
  const auto sum = base.checksum();
  CombinationConfig cc;
  cc.design = ManualDesign{2, 1, 2};
  cc.stage1_prefix = cc.stage1_fine = quick(2);
  cc.stage2_prefix = cc.stage2_fine = quick(2);
  for (auto s1 : {Recipe::Fine, Recipe::Prefix}) {
    for (auto s2 : {Recipe::Fine, Recipe::Prefix}) {
      cc.stage1 = s1;
      cc.stage2 = s2;
      auto r = run_combination(base, f.aux, f.target, f.vocab, cc);
      EXPECT_EQ(r.log.steps.size(), 2u) << combination_label(s1, s2);
      EXPECT_EQ(r.indices.empty(), s1 == Recipe::Fine && s2 == Recipe::Fine);
    }
  }
  EXPECT_EQ(base.checksum(), sum);
  EXPECT_EQ(combination_label(Recipe::Fine, Recipe::Prefix), "Fine+Prefix");
}

TEST(MultiSeed, MeanAndPopulationStd) {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  auto r = multi_seed_report([](std::uint64_t s) { return Metrics{{"r1", double(s)}}; }, seeds);
  EXPECT_DOUBLE_EQ(r.mean.at("r1"), 2.0);
  EXPECT_NEAR(r.std.at("r1"), std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_TRUE(r.diverged.empty());
  std::vector<std::uint64_t> one{1};
  EXPECT_EQ(error_kind([&] { multi_seed_report([](std::uint64_t) { return Metrics{}; }, one); }),
            ErrorKind::Config);
}

TEST(MultiSeed, DivergedSeedsFlaggedAndExcluded) {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4};
  auto r = multi_seed_report(
      [](std::uint64_t s) -> Metrics {
        if (s == 2) fail(ErrorKind::Numeric, "boom");
        if (s == 4) return {{"r1", NAN}};
        return {{"r1", double(s)}};
      },
      seeds);
  EXPECT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.diverged, (std::vector<std::uint64_t>{2, 4}));
  EXPECT_DOUBLE_EQ(r.mean.at("r1"), 2.0);
  EXPECT_DOUBLE_EQ(r.std.at("r1"), 1.0);

  auto back = RunReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.diverged, r.diverged);
  EXPECT_EQ(back.mean, r.mean);
  EXPECT_EQ(back.rows.size(), 4u);
  EXPECT_TRUE(back.rows[1].diverged);
  EXPECT_TRUE(std::isnan(back.rows[3].metrics.at("r1")));
  EXPECT_EQ(back.to_json().dump(), r.to_json().dump());
}

TEST(TrainLog, CsvHasTaskCountColumns) {
  TrainLog log;
  log.steps.push_back({0, 1.5, {2, 3}});
  const auto path = std::filesystem::temp_directory_path() / "pmerge_log_test.csv";
  log.write_csv(path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,loss,count_task0,count_task1");
  EXPECT_EQ(row.substr(0, 2), "0,");
  std::filesystem::remove(path);
}
