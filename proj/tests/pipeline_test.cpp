#include <gtest/gtest.h>

#include <algorithm>

#include "pmerge/error.hpp"
#include "pmerge/pipeline.hpp"

using namespace pmerge;

TEST(PretrainData, DenoisingKeepsCleanTarget) {
  Vocabulary vocab(60, 4);
  GeneratorParams gp;
  gp.segment_len = 5;
  auto data = denoising_dataset(vocab, gp, 3, 50, 0.3);
  ASSERT_EQ(data.size(), 50u);
  for (const auto& ex : data) {
    ASSERT_EQ(ex.input.size(), ex.target.size());
    for (std::size_t i = 0; i < ex.input.size(); ++i)
      EXPECT_TRUE(ex.input[i] == ex.target[i] || ex.input[i] == Vocabulary::kOov);
  }
}

TEST(PretrainData, ContinuationTargetFollowsFirstOccurrence) {
  Vocabulary vocab(60, 4);
  GeneratorParams gp;
  gp.segment_len = 5;
  auto data = denoising_dataset(vocab, gp, 4, 200, 0.0, 1.0, 3);
  ASSERT_EQ(data.size(), 200u);
  for (const auto& ex : data) {
    ASSERT_EQ(ex.query_len, 1u);
    const auto cue = ex.input[0];
    EXPECT_TRUE(vocab.is_content(cue));
    const auto first = std::find(ex.input.begin() + 1, ex.input.end(), cue);
    ASSERT_NE(first, ex.input.end());
    ASSERT_GE(ex.target.size(), 1u);
    ASSERT_LE(ex.target.size(), 3u);
    EXPECT_TRUE(std::equal(ex.target.begin(), ex.target.end(), first + 1));
  }
}

TEST(PretrainData, RejectsBadProbabilities) {
  Vocabulary vocab(60, 4);
  GeneratorParams gp;
  EXPECT_THROW(denoising_dataset(vocab, gp, 1, 5, 1.0), Error);
  EXPECT_THROW(denoising_dataset(vocab, gp, 1, 5, 0.1, 1.5), Error);
  EXPECT_THROW(denoising_dataset(vocab, gp, 1, 5, 0.1, 0.5, 0), Error);
}

TEST(PretrainData, AnyTokenCuesIncludeMarkers) {
  Vocabulary vocab(60, 4);
  GeneratorParams gp;
  gp.segment_len = 5;
  auto data = denoising_dataset(vocab, gp, 5, 400, 0.0, 1.0, 2, true);
  std::size_t marker_cues = 0;
  for (const auto& ex : data) {
    const auto first = std::find(ex.input.begin() + 1, ex.input.end(), ex.input[0]);
    ASSERT_NE(first, ex.input.end());
    EXPECT_TRUE(std::equal(ex.target.begin(), ex.target.end(), first + 1));
    if (vocab.is_marker(ex.input[0])) ++marker_cues;
  }
  EXPECT_GT(marker_cues, 0u);
}
