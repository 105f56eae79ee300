#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmerge/prefix_store.hpp"
#include "pmerge/tasks.hpp"
#include "pmerge/transformer.hpp"

namespace pmerge {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct RougeScore {
  PRF r1, r2, rl;
};

/// Clipped n-gram overlap. Either side shorter than n scores 0.
PRF rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference,
            std::size_t n);
/// Sentence-level LCS-based score.
PRF rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
/// Lowercased whitespace tokenization, no stemming.
std::vector<std::string> rouge_tokens(std::string_view text);
RougeScore rouge(std::string_view candidate, std::string_view reference);

/// Mean F1 (as fractions) over a corpus, with per-metric precision/recall.
struct RougeSummary {
  RougeScore mean;
  std::size_t count = 0;

  nlohmann::json to_json() const;
};

RougeSummary corpus_rouge(std::span<const std::string> candidates,
                          std::span<const std::string> references);

// --- attention profile ------------------------------------------------------

struct AttentionProfile {
  AttentionSite site = AttentionSite::EncoderSelf;
  std::vector<std::size_t> rows;      // prefix row index per profile entry
  std::vector<std::string> regions;   // region label per entry
  std::vector<double> scores;         // sums to 1
  std::size_t samples = 0;
};

/// Aggregates per-sample traces of one site. Each query row is renormalized
/// over its prefix columns, then averaged over query positions, heads,
/// layers and finally samples. `rows[i]` is the prefix row behind prefix
/// column i.
AttentionProfile profile_from_traces(AttentionSite site, std::span<const AttentionTrace> traces,
                                     std::span<const std::size_t> rows,
                                     std::span<const std::string> regions);

/// Encoder self-attention and decoder cross-attention profiles from greedy
/// decodes of the first min(n_samples, |dataset|) examples.
std::vector<AttentionProfile> attention_profile(const Transformer& model,
                                                const PrefixMatrix& prefix,
                                                std::span<const std::size_t> indices,
                                                std::span<const Example> dataset,
                                                std::size_t n_samples = 100,
                                                std::size_t max_len = 8, std::size_t min_len = 1);

/// CSV columns: site,row_index,region,score.
void export_profile(std::span<const AttentionProfile> profiles, const std::filesystem::path& path);
std::vector<AttentionProfile> read_profile_csv(const std::filesystem::path& path);

void export_metrics(const nlohmann::json& metrics, const std::filesystem::path& path);

}  // namespace pmerge
