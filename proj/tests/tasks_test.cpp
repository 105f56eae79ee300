#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "pmerge/error.hpp"
#include "pmerge/tasks.hpp"

using namespace pmerge;

namespace {

template <typename Fn>
void expect_error(ErrorKind kind, Fn&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

std::vector<TokenId> ids(const Vocabulary& v, std::string_view text) { return v.encode(text); }

// Independent counting oracle: rank tokens by (count desc, first position asc).
std::vector<TokenId> frequency_oracle(std::span<const TokenId> tokens, std::size_t k) {
  std::map<TokenId, std::pair<std::size_t, std::size_t>> stats;  // id -> (count, first)
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [it, fresh] = stats.try_emplace(tokens[i], 0, i);
    ++it->second.first;
  }
  std::vector<std::pair<TokenId, std::pair<std::size_t, std::size_t>>> v(stats.begin(), stats.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    if (a.second.first != b.second.first) return a.second.first > b.second.first;
    return a.second.second < b.second.second;
  });
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < std::min(k, v.size()); ++i) out.push_back(v[i].first);
  return out;
}

class TempDir {
 public:
  TempDir() : path_(std::filesystem::temp_directory_path() / ("pmerge_tasks_" + std::to_string(::getpid()))) {
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace

TEST(Vocabulary, LayoutAndRoundTrip) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 200u);
  EXPECT_EQ(v.word(Vocabulary::kEos), "<eos>");
  EXPECT_EQ(v.id("nonsense"), Vocabulary::kOov);
  EXPECT_TRUE(v.is_marker(v.marker(0)));
  EXPECT_TRUE(v.is_content(v.content(0)));
  EXPECT_EQ(v.decode(v.encode("w1 m2 w3")), "w1 m2 w3");
  expect_error(ErrorKind::Index, [&] { v.word(500); });
  expect_error(ErrorKind::Config, [] { Vocabulary(10, 8); });
}

TEST(GenSum, HandFrequencyExamples) {
  Vocabulary v;
  EXPECT_EQ(top_k_frequent(ids(v, "w0 w0 w1 w1 w1 w2"), 2), ids(v, "w1 w0"));
  EXPECT_EQ(top_k_frequent(ids(v, "w5 w3 w9"), 1), ids(v, "w5"));
  EXPECT_EQ(top_k_frequent(ids(v, "w2 w1 w1 w2 w3"), 3), ids(v, "w2 w1 w3"));
}

TEST(GenSum, TargetsMatchCountingOracle) {
  Vocabulary v;
  GeneratorParams p;
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    auto ex = gen_sum(p, v, rng);
    EXPECT_EQ(ex.target, frequency_oracle(ex.source(), p.summary_len));
    EXPECT_EQ(ex.target.size(), p.summary_len);
  }
}

TEST(GenQa, HandExampleAndOracle) {
  Vocabulary v;
  const auto src = ids(v, "m1 w0 w1 w2 m2 w5 w6 w7");
  EXPECT_EQ(*tokens_after(src, v.id("m2"), 2), ids(v, "w5 w6"));
  EXPECT_FALSE(tokens_after(src, v.id("m3"), 2));
  EXPECT_FALSE(tokens_after(ids(v, "w1 m1 w2"), v.id("m1"), 2));

  GeneratorParams p;
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    auto ex = gen_qa(p, v, rng);
    ASSERT_EQ(ex.query_len, 1u);
    const TokenId q = ex.query()[0];
    auto s = ex.source();
    auto at = std::find(s.begin(), s.end(), q);
    ASSERT_NE(at, s.end());
    ASSERT_EQ(ex.target.size(), p.answer_len);
    EXPECT_TRUE(std::equal(ex.target.begin(), ex.target.end(), at + 1));
  }
}

TEST(GenQa, SingleSegmentIgnoresDistractors) {
  Vocabulary v;
  GeneratorParams p;
  p.n_segments = 1;
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    auto ex = gen_qa(p, v, rng);
    EXPECT_EQ(ex.source()[0], ex.query()[0]);
    EXPECT_TRUE(std::equal(ex.target.begin(), ex.target.end(), ex.source().begin() + 1));
  }
}

TEST(GenQfs, CompositionOfLocateAndCompress) {
  Vocabulary v;
  GeneratorParams p;
  p.n_segments = 3;
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    auto ex = gen_qfs(p, v, rng);
    const TokenId q = ex.query()[0];
    // Locate: walk the source by hand to the queried segment.
    auto s = ex.source();
    std::vector<TokenId> segment;
    bool inside = false;
    for (auto t : s) {
      if (v.is_marker(t)) {
        inside = t == q;
        continue;
      }
      if (inside) segment.push_back(t);
    }
    ASSERT_FALSE(segment.empty());
    EXPECT_EQ(ex.target, frequency_oracle(segment, p.summary_len));
  }
}

TEST(GenQfs, SingleSegmentReducesToSummarization) {
  Vocabulary v;
  GeneratorParams p;
  p.n_segments = 1;
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    auto ex = gen_qfs(p, v, rng);
    auto seg = ex.source().subspan(1);
    EXPECT_EQ(ex.target, top_k_frequent(seg, p.summary_len));
  }
}

TEST(GenCopy, TargetIsSource) {
  Vocabulary v;
  GeneratorParams p;
  Rng rng(8);
  auto ex = gen_copy(p, v, rng);
  EXPECT_EQ(ex.target, ex.input);
  p.copy_len = 0;
  expect_error(ErrorKind::Config, [&] { gen_copy(p, v, rng); });
  auto cut = truncate(gen_copy(GeneratorParams{}, v, rng), 20, 4);
  EXPECT_EQ(cut.target.size(), 3u);
}

TEST(Generators, DeterministicAndPromptsConfined) {
  Vocabulary v;
  for (auto kind : {TaskKind::Summarize, TaskKind::Answer, TaskKind::QuerySummarize, TaskKind::Copy}) {
    auto spec = make_task(kind, 0, v);
    auto a = generate_dataset(spec, v, 42, 200);
    auto b = generate_dataset(spec, v, 42, 200);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].input, b[i].input);
      EXPECT_EQ(a[i].target, b[i].target);
      EXPECT_TRUE(std::equal(spec.prompt_tokens.begin(), spec.prompt_tokens.end(), a[i].input.begin()));
      for (auto t : a[i].source()) EXPECT_FALSE(v.is_prompt(t));
      for (auto t : a[i].target) EXPECT_FALSE(v.is_prompt(t));
      EXPECT_FALSE(a[i].target.empty());
    }
    EXPECT_NE(generate_dataset(spec, v, 43, 5)[0].input, a[0].input);
  }
}

TEST(Generators, DistinctPrompts) {
  Vocabulary v;
  std::vector<std::vector<TokenId>> prompts;
  for (auto kind : {TaskKind::Summarize, TaskKind::Answer, TaskKind::QuerySummarize, TaskKind::Copy})
    prompts.push_back(make_task(kind, 0, v).prompt_tokens);
  for (std::size_t i = 0; i < prompts.size(); ++i)
    for (std::size_t j = i + 1; j < prompts.size(); ++j) EXPECT_NE(prompts[i], prompts[j]);
  EXPECT_EQ(task_kind_from_string("qfs"), TaskKind::QuerySummarize);
}

TEST(Truncate, KeepsRoomForEos) {
  Example ex;
  ex.input = {4, 5, 30, 31, 32, 33};
  ex.prompt_len = 2;
  ex.target = {30, 31, 32, 33};
  auto t = truncate(ex, 4, 3);
  EXPECT_EQ(t.input, (std::vector<TokenId>{4, 5, 30, 31}));
  EXPECT_EQ(t.target.size(), 2u);
  EXPECT_EQ(decoder_labels(t).back(), Vocabulary::kEos);
  expect_error(ErrorKind::Length, [&] { truncate(ex, 2, 3); });
}

TEST(Jsonl, LoadSkipAndRoundTrip) {
  TempDir dir;
  Vocabulary v;
  {
    std::ofstream f(dir / "a.jsonl");
    f << R"({"input": "w1 w2 w3", "query": "m1", "target": "w2"})" << '\n'
      << R"({"input": "w4 unknownword", "target": "w4"})" << '\n'
      << '\n'
      << R"({"input": "w5"})" << '\n'
      << R"({"input": "w6", "target": "w6 w7"})" << '\n';
  }
  auto d = load_jsonl(dir / "a.jsonl", {}, v, v.prompt("summarize"));
  ASSERT_EQ(d.examples.size(), 3u);
  EXPECT_EQ(d.skipped, 1u);
  EXPECT_EQ(d.examples[0].query_len, 1u);
  EXPECT_EQ(d.examples[1].source()[1], Vocabulary::kOov);
  EXPECT_EQ(d.examples[2].target, ids(v, "w6 w7"));

  auto spec = make_task(TaskKind::QuerySummarize, 0, v);
  auto gen = generate_dataset(spec, v, 9, 30);
  export_jsonl(gen, v, dir / "b.jsonl");
  auto back = load_jsonl(dir / "b.jsonl", {}, v, spec.prompt_tokens);
  ASSERT_EQ(back.examples.size(), gen.size());
  for (std::size_t i = 0; i < gen.size(); ++i) {
    EXPECT_EQ(back.examples[i].input, gen[i].input);
    EXPECT_EQ(back.examples[i].target, gen[i].target);
  }

  FieldMap renamed{"document", "question", "summary"};
  {
    std::ofstream f(dir / "c.jsonl");
    f << R"({"document": "w1", "summary": "w1"})" << '\n';
  }
  EXPECT_EQ(load_jsonl(dir / "c.jsonl", renamed, v).examples.size(), 1u);
}

TEST(Jsonl, MalformedLineNamesLineNumber) {
  TempDir dir;
  Vocabulary v;
  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"input": "w1", "target": "w1"})" << '\n' << "{not json" << '\n';
  }
  try {
    load_jsonl(dir / "bad.jsonl", {}, v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Load);
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  expect_error(ErrorKind::Io, [&] { load_jsonl(dir / "missing.jsonl", {}, v); });
}

TEST(Leakage, HandExamples) {
  std::vector<std::string> train{"the cat sat"}, test{"the cat sits"};
  auto r = leakage_check(train, test);
  EXPECT_EQ(r.n_leaked, 1u);
  EXPECT_EQ(r.pairs[0].word_diff, 1u);

  std::vector<std::string> disjoint{"a b c"}, other{"x y z"};
  EXPECT_EQ(leakage_check(disjoint, other).ratio, 0.0);
  EXPECT_EQ(leakage_check(disjoint, disjoint).ratio, 1.0);
  EXPECT_EQ(leakage_check(train, std::vector<std::string>{"the dog sits"}).n_leaked, 0u);
  expect_error(ErrorKind::Contract, [&] { leakage_check(train, std::vector<std::string>{}); });
}

TEST(Leakage, EditDistanceMatchesHandValues) {
  auto d = [](std::string_view a, std::string_view b) {
    return word_edit_distance(split_words(a), split_words(b));
  };
  EXPECT_EQ(d("", "a b"), 2u);
  EXPECT_EQ(d("a b c", "a c"), 1u);
  EXPECT_EQ(d("a b c", "c b a"), 2u);
  EXPECT_EQ(d("kitten sitting on", "sitting kitten on"), 2u);
}

TEST(Leakage, ConstructedSixtyFourPercent) {
  std::vector<std::string> train, test;
  for (int i = 0; i < 100; ++i) train.push_back("t" + std::to_string(i) + " alpha beta gamma");
  for (int i = 0; i < 100; ++i) {
    if (i < 64) test.push_back("t" + std::to_string(i) + " alpha beta delta");  // one substitution
    else test.push_back("u" + std::to_string(i) + " x y z w");
  }
  auto r = leakage_check(train, test);
  EXPECT_EQ(r.n_leaked, 64u);
  EXPECT_EQ(r.ratio, 0.64);
  for (const auto& p : r.pairs) {
    EXPECT_LT(p.word_diff, 2u);
    EXPECT_EQ(p.train_idx, p.test_idx);
  }
  EXPECT_EQ(r.to_json()["n_leaked"], 64);
}
