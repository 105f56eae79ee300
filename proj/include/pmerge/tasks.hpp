#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "json.hpp"
#include "pmerge/transformer.hpp"

namespace pmerge {

using Rng = std::mt19937_64;

/// Fixed word-level vocabulary:
///   [0,4)            <pad> <bos> <eos> <unk>
///   prompt words     summarize answer the question and copy sentence
///   markers          m0 .. m{n_markers-1}
///   content words    w0 .. (rest of the vocab)
class Vocabulary {
 public:
  static constexpr TokenId kPad = Transformer::kPad;
  static constexpr TokenId kBos = Transformer::kBos;
  static constexpr TokenId kEos = Transformer::kEos;
  static constexpr TokenId kOov = 3;

  explicit Vocabulary(std::size_t size = 200, std::size_t n_markers = 8);

  std::size_t size() const { return words_.size(); }
  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;

  /// Whitespace tokenization, unknown words map to <unk>.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Space-joined words; special tokens (<pad>, <bos>, <eos>) are dropped.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t n_markers() const { return n_markers_; }
  TokenId marker(std::size_t i) const;
  std::size_t n_content() const { return words_.size() - content_begin_; }
  TokenId content(std::size_t i) const;

  bool is_prompt(TokenId id) const { return id >= prompt_begin_ && id < marker_begin_; }
  bool is_marker(TokenId id) const { return id >= marker_begin_ && id < content_begin_; }
  bool is_content(TokenId id) const { return id >= content_begin_ && id < words_.size(); }

  /// Prompt token ids for a space-separated phrase of prompt words.
  std::vector<TokenId> prompt(std::string_view phrase) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId prompt_begin_ = 4;
  TokenId marker_begin_ = 0;
  TokenId content_begin_ = 0;
  std::size_t n_markers_ = 0;
};

/// input = prompt ++ query ++ source.
struct Example {
  std::vector<TokenId> input;
  std::vector<TokenId> target;
  std::size_t prompt_len = 0;
  std::size_t query_len = 0;

  std::span<const TokenId> prompt() const { return {input.data(), prompt_len}; }
  std::span<const TokenId> query() const { return {input.data() + prompt_len, query_len}; }
  std::span<const TokenId> source() const {
    return std::span<const TokenId>(input).subspan(prompt_len + query_len);
  }
  /// Same example with the prompt removed.
  Example without_prompt() const;
  /// Same example with `prompt` replacing the current one.
  Example with_prompt(std::span<const TokenId> prompt) const;
};

enum class TaskKind { Summarize, Answer, QuerySummarize, Copy, Jsonl };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

/// Knobs shared by the synthetic generators.
struct GeneratorParams {
  std::size_t segment_len = 8;     // content tokens per segment / summarization source
  std::size_t segment_pool = 4;    // distinct content tokens drawn per segment
  std::size_t n_segments = 2;      // marked segments for QA and QFS sources
  std::size_t summary_len = 2;     // k for frequency summaries
  std::size_t answer_len = 2;      // w for QA answers
  std::size_t copy_len = 8;        // source length for copying
  std::size_t content_limit = 0;   // 0 = whole content vocabulary
};

struct SyntheticSource {
  std::uint64_t seed = 0;
  std::size_t size = 0;
};

struct JsonlSource {
  std::filesystem::path path;
};

using DatasetSource = std::variant<SyntheticSource, JsonlSource>;

struct TaskSpec {
  std::size_t task_id = 0;
  std::string name;
  TaskKind kind = TaskKind::Summarize;
  std::vector<TokenId> prompt_tokens;
  GeneratorParams params;
  DatasetSource source = SyntheticSource{};
};

/// Standard task specs with their prompts ("summarize", "answer the
/// question", "summarize and answer the question", "copy the sentence").
TaskSpec make_task(TaskKind kind, std::size_t task_id, const Vocabulary& vocab,
                   const GeneratorParams& params = {});

// --- generators (prompt-free; callers add prompts via with_prompt) ----------

/// The k most frequent tokens, by descending count, ties by first occurrence.
std::vector<TokenId> top_k_frequent(std::span<const TokenId> tokens, std::size_t k);
/// The `w` tokens right after `marker` in `source`, if present and complete.
std::optional<std::vector<TokenId>> tokens_after(std::span<const TokenId> source, TokenId marker,
                                                 std::size_t w);
/// Tokens after `marker` up to the next marker or the end.
std::optional<std::vector<TokenId>> marked_segment(std::span<const TokenId> source, TokenId marker,
                                                   const Vocabulary& vocab);

Example gen_sum(const GeneratorParams& params, const Vocabulary& vocab, Rng& rng);
Example gen_qa(const GeneratorParams& params, const Vocabulary& vocab, Rng& rng);
Example gen_qfs(const GeneratorParams& params, const Vocabulary& vocab, Rng& rng);
Example gen_copy(const GeneratorParams& params, const Vocabulary& vocab, Rng& rng);

/// Deterministic dataset for a synthetic task: `size` examples from `seed`,
/// with the task prompt attached.
std::vector<Example> generate_dataset(const TaskSpec& task, const Vocabulary& vocab,
                                      std::uint64_t seed, std::size_t size);

/// Training labels for the decoder: target followed by EOS.
std::vector<TokenId> decoder_labels(const Example& ex);

/// Explicit truncation to model limits; target keeps room for EOS.
Example truncate(const Example& ex, std::size_t max_src_len, std::size_t max_tgt_len);

// --- JSONL ------------------------------------------------------------------

struct FieldMap {
  std::string input = "input";
  std::string query = "query";
  std::string target = "target";
};

struct JsonlDataset {
  std::vector<Example> examples;
  std::size_t skipped = 0;
};

/// One JSON object per line. Records missing input or target are skipped
/// and counted; malformed JSON is a load error naming the line.
JsonlDataset load_jsonl(const std::filesystem::path& path, const FieldMap& fields,
                        const Vocabulary& vocab, std::span<const TokenId> prompt = {});
void export_jsonl(std::span<const Example> examples, const Vocabulary& vocab,
                  const std::filesystem::path& path, const FieldMap& fields = {});

// --- leakage ----------------------------------------------------------------

struct LeakedPair {
  std::size_t test_idx = 0;
  std::size_t train_idx = 0;
  std::size_t word_diff = 0;
};

struct LeakageReport {
  std::size_t n_test = 0;
  std::size_t n_leaked = 0;
  double ratio = 0.0;
  std::vector<LeakedPair> pairs;

  nlohmann::json to_json() const;
};

std::size_t word_edit_distance(std::span<const std::string> a, std::span<const std::string> b);
std::vector<std::string> split_words(std::string_view text);

/// A test target leaks when some train target is within word edit distance
/// strictly below `max_word_diff`. Each leaked test target reports its
/// closest train target (lowest index on ties).
LeakageReport leakage_check(std::span<const std::string> train_targets,
                            std::span<const std::string> test_targets,
                            std::size_t max_word_diff = 2);

}  // namespace pmerge
