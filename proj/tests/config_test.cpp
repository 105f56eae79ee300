#include <gtest/gtest.h>

#include <optional>

#include "pmerge/config.hpp"
#include "pmerge/error.hpp"

using namespace pmerge;

namespace {

std::optional<ErrorKind> parse_error(const std::string& text, std::vector<std::string> overrides = {}) {
  try {
    RunConfig::parse(text, overrides);
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace

TEST(RunConfig, ToyDefaults) {
  auto c = RunConfig::parse("");
  EXPECT_EQ(c.model.n_layers, 2u);
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.model.vocab_size, 200u);
  EXPECT_EQ(c.stage1.steps, 1500u);
  EXPECT_EQ(c.stage2.batch_size, 0u);
  EXPECT_EQ(c.data.target_train_size, 32u);
  EXPECT_EQ(c.data.aux_tasks, (std::vector<std::string>{"sum", "qa"}));
  EXPECT_TRUE(std::holds_alternative<ManualDesign>(c.prefix.make(2)));
  EXPECT_EQ(design_label(c.prefix.make(2)), "Unq(10)+Sha(20)");
}

TEST(RunConfig, FileValuesThenOverrides) {
  const std::string ini =
      "[model]\nd_model = 32\nd_ff = 64\n"
      "[prefix]\ndesign = self_adaptive\ninit_len = 12\ntop_n = 6\n"
      "[stage2]\nscope = all\nno_prompt = true\n"
      "[data]\naux_tasks = sum, copy\n"
      "[pretrain]\ncue_prob = 0.25\ncue_span = 2\ncue_any_token = true\n";
  std::vector<std::string> ov{"model.d_model=16", "stage1.steps=7", "paths.out_dir=/tmp/x"};
  auto c = RunConfig::parse(ini, ov);
  EXPECT_EQ(c.model.d_model, 16u);
  EXPECT_EQ(c.model.d_ff, 64u);
  EXPECT_EQ(c.stage1.steps, 7u);
  EXPECT_EQ(c.stage1.stage, Stage::MergeSelfAdaptive);
  EXPECT_EQ(c.stage2.scope, TrainableScope::All);
  EXPECT_TRUE(c.stage2.ablations.no_prompt);
  EXPECT_EQ(c.out_dir, "/tmp/x");
  EXPECT_EQ(c.data.aux_tasks, (std::vector<std::string>{"sum", "copy"}));
  auto d = std::get<SelfAdaptiveDesign>(c.prefix.make(2));
  EXPECT_EQ(d.init_len, 12u);
  EXPECT_EQ(d.top_n, 6u);
  EXPECT_EQ(c.pretrain.cue_prob, 0.25);
  EXPECT_EQ(c.pretrain.cue_span, 2u);
  EXPECT_TRUE(c.pretrain.cue_any_token);
  EXPECT_EQ(c.to_json()["model"]["d_model"], 16);
}

TEST(RunConfig, RejectsUnknownAndMalformed) {
  EXPECT_EQ(parse_error("[model]\nwidth = 3\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[nonsense]\na = 1\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[model]\nd_model = abc\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[model]\nd_model = -4\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[stage1]\nscope = everything\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[stage1]\nno_prefix = maybe\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[prefix]\ndesign = magic\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("[stage2]\nlearning_rate = 0\n"), ErrorKind::Config);
  EXPECT_EQ(parse_error("", {"d_model=3"}), ErrorKind::Config);
  EXPECT_EQ(parse_error("", {"model.nope=3"}), ErrorKind::Config);
}

TEST(RunConfig, MissingFileIsIoError) {
  try {
    RunConfig::load("/nonexistent/pmerge.ini");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}
