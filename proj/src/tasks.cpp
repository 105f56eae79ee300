#include "pmerge/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pmerge/error.hpp"

namespace pmerge {

namespace {

const std::vector<std::string> kPromptWords = {"summarize", "answer", "the",     "question",
                                               "and",       "copy",   "sentence"};

constexpr std::size_t kMaxAttempts = 10000;

}  // namespace

// --- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary(std::size_t size, std::size_t n_markers) : n_markers_(n_markers) {
  words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  prompt_begin_ = words_.size();
  words_.insert(words_.end(), kPromptWords.begin(), kPromptWords.end());
  marker_begin_ = words_.size();
  for (std::size_t i = 0; i < n_markers; ++i) words_.push_back("m" + std::to_string(i));
  content_begin_ = words_.size();
  if (size <= content_begin_) {
    fail(ErrorKind::Config, "vocabulary size " + std::to_string(size) + " leaves no content words");
  }
  for (std::size_t i = 0; words_.size() < size; ++i) words_.push_back("w" + std::to_string(i));
  for (TokenId id = 0; id < words_.size(); ++id) index_.emplace(words_[id], id);
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kOov : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) {
    fail(ErrorKind::Index, "token " + std::to_string(id) + " outside vocabulary of " +
                               std::to_string(words_.size()));
  }
  return words_[id];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += word(id);
  }
  return out;
}

TokenId Vocabulary::marker(std::size_t i) const {
  if (i >= n_markers_) fail(ErrorKind::Index, "marker " + std::to_string(i) + " out of range");
  return marker_begin_ + i;
}

TokenId Vocabulary::content(std::size_t i) const {
  if (i >= n_content()) fail(ErrorKind::Index, "content word " + std::to_string(i) + " out of range");
  return content_begin_ + i;
}

std::vector<TokenId> Vocabulary::prompt(std::string_view phrase) const {
  std::vector<TokenId> out;
  for (const auto& w : split_words(phrase)) {
    const TokenId t = id(w);
    if (!is_prompt(t)) fail(ErrorKind::Config, "'" + w + "' is not a prompt word");
    out.push_back(t);
  }
  return out;
}

// --- Example ----------------------------------------------------------------

Example Example::without_prompt() const {
  Example out = *this;
  out.input.erase(out.input.begin(), out.input.begin() + static_cast<std::ptrdiff_t>(prompt_len));
  out.prompt_len = 0;
  return out;
}

Example Example::with_prompt(std::span<const TokenId> prompt) const {
  Example out = without_prompt();
  out.input.insert(out.input.begin(), prompt.begin(), prompt.end());
  out.prompt_len = prompt.size();
  return out;
}

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Summarize: return "sum";
    case TaskKind::Answer: return "qa";
    case TaskKind::QuerySummarize: return "qfs";
    case TaskKind::Copy: return "copy";
    case TaskKind::Jsonl: return "jsonl";
  }
  return "unknown";
}

TaskKind task_kind_from_string(std::string_view name) {
  for (auto k : {TaskKind::Summarize, TaskKind::Answer, TaskKind::QuerySummarize, TaskKind::Copy,
                 TaskKind::Jsonl}) {
    if (to_string(k) == name) return k;
  }
  fail(ErrorKind::Config, "unknown task kind '" + std::string(name) + "'");
}

TaskSpec make_task(TaskKind kind, std::size_t task_id, const Vocabulary& vocab,
                   const GeneratorParams& params) {
  TaskSpec t;
  t.task_id = task_id;
  t.kind = kind;
  t.name = std::string(to_string(kind));
  t.params = params;
  switch (kind) {
    case TaskKind::Summarize: t.prompt_tokens = vocab.prompt("summarize"); break;
    case TaskKind::Answer: t.prompt_tokens = vocab.prompt("answer the question"); break;
    case TaskKind::QuerySummarize:
      t.prompt_tokens = vocab.prompt("summarize and answer the question");
      break;
    case TaskKind::Copy: t.prompt_tokens = vocab.prompt("copy the sentence"); break;
    case TaskKind::Jsonl: break;
  }
  return t;
}

// --- generators -------------------------------------------------------------

std::vector<TokenId> top_k_frequent(std::span<const TokenId> tokens, std::size_t k) {
  std::vector<TokenId> order;
  std::unordered_map<TokenId, std::size_t> counts;
  for (auto t : tokens) {
    if (counts[t]++ == 0) order.push_back(t);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](TokenId a, TokenId b) { return counts[a] > counts[b]; });
  if (order.size() > k) order.resize(k);
  return order;
}

std::optional<std::vector<TokenId>> tokens_after(std::span<const TokenId> source, TokenId marker,
                                                 std::size_t w) {
  auto it = std::find(source.begin(), source.end(), marker);
  if (it == source.end()) return std::nullopt;
  const auto pos = static_cast<std::size_t>(it - source.begin()) + 1;
  if (pos + w > source.size()) return std::nullopt;
  return std::vector<TokenId>(source.begin() + static_cast<std::ptrdiff_t>(pos),
                              source.begin() + static_cast<std::ptrdiff_t>(pos + w));
}

std::optional<std::vector<TokenId>> marked_segment(std::span<const TokenId> source, TokenId marker,
                                                   const Vocabulary& vocab) {
  auto it = std::find(source.begin(), source.end(), marker);
  if (it == source.end()) return std::nullopt;
  std::vector<TokenId> out;
  for (++it; it != source.end() && !vocab.is_marker(*it); ++it) out.push_back(*it);
  return out;
}

namespace {

std::size_t content_range(const GeneratorParams& p, const Vocabulary& vocab) {
  const std::size_t n = p.content_limit == 0 ? vocab.n_content()
                                             : std::min(p.content_limit, vocab.n_content());
  return n;
}

/// `len` tokens drawn uniformly from a random pool of `pool` distinct content words.
std::vector<TokenId> pooled_tokens(const GeneratorParams& p, const Vocabulary& vocab, Rng& rng) {
  const std::size_t range = content_range(p, vocab);
  if (p.segment_pool == 0 || p.segment_pool > range) {
    fail(ErrorKind::Config, "segment_pool must be in [1, " + std::to_string(range) + "]");
  }
  std::vector<TokenId> pool;
  std::uniform_int_distribution<std::size_t> pick(0, range - 1);
  while (pool.size() < p.segment_pool) {
    const TokenId t = vocab.content(pick(rng));
    if (std::find(pool.begin(), pool.end(), t) == pool.end()) pool.push_back(t);
  }
  std::uniform_int_distribution<std::size_t> draw(0, pool.size() - 1);
  std::vector<TokenId> out(p.segment_len);
  for (auto& t : out) t = pool[draw(rng)];
  return out;
}

struct MarkedSource {
  std::vector<TokenId> tokens;
  std::vector<TokenId> markers;
};

MarkedSource marked_source(const GeneratorParams& p, const Vocabulary& vocab, Rng& rng) {
  if (p.n_segments == 0 || p.n_segments > vocab.n_markers()) {
    fail(ErrorKind::Config, "n_segments must be in [1, " + std::to_string(vocab.n_markers()) + "]");
  }
  MarkedSource s;
  std::vector<std::size_t> ids(vocab.n_markers());
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  for (std::size_t i = 0; i < p.n_segments; ++i) {
    const TokenId m = vocab.marker(ids[i]);
    s.markers.push_back(m);
    s.tokens.push_back(m);
    auto seg = pooled_tokens(p, vocab, rng);
    s.tokens.insert(s.tokens.end(), seg.begin(), seg.end());
  }
  return s;
}

[[noreturn]] void give_up(const char* what) {
  fail(ErrorKind::Config, std::string(what) + ": parameters never yield a valid example");
}

}  // namespace

Example gen_sum(const GeneratorParams& p, const Vocabulary& vocab, Rng& rng) {
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto src = pooled_tokens(p, vocab, rng);
    auto target = top_k_frequent(src, p.summary_len);
    if (target.size() < p.summary_len || target.empty()) continue;
    return {std::move(src), std::move(target), 0, 0};
  }
  give_up("gen_sum");
}

Example gen_qa(const GeneratorParams& p, const Vocabulary& vocab, Rng& rng) {
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto src = marked_source(p, vocab, rng);
    std::uniform_int_distribution<std::size_t> pick(0, src.markers.size() - 1);
    const TokenId query = src.markers[pick(rng)];
    auto answer = tokens_after(src.tokens, query, p.answer_len);
    if (!answer || answer->empty()) continue;
    Example ex;
    ex.input.push_back(query);
    ex.input.insert(ex.input.end(), src.tokens.begin(), src.tokens.end());
    ex.query_len = 1;
    ex.target = std::move(*answer);
    return ex;
  }
  give_up("gen_qa");
}

Example gen_qfs(const GeneratorParams& p, const Vocabulary& vocab, Rng& rng) {
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto src = marked_source(p, vocab, rng);
    std::uniform_int_distribution<std::size_t> pick(0, src.markers.size() - 1);
    const TokenId query = src.markers[pick(rng)];
    auto segment = marked_segment(src.tokens, query, vocab);
    if (!segment) continue;
    auto target = top_k_frequent(*segment, p.summary_len);
    if (target.size() < p.summary_len || target.empty()) continue;
    Example ex;
    ex.input.push_back(query);
    ex.input.insert(ex.input.end(), src.tokens.begin(), src.tokens.end());
    ex.query_len = 1;
    ex.target = std::move(target);
    return ex;
  }
  give_up("gen_qfs");
}

Example gen_copy(const GeneratorParams& p, const Vocabulary& vocab, Rng& rng) {
  if (p.copy_len == 0) fail(ErrorKind::Config, "gen_copy: copy_len must be positive");
  const std::size_t range = content_range(p, vocab);
  std::uniform_int_distribution<std::size_t> pick(0, range - 1);
  Example ex;
  ex.input.resize(p.copy_len);
  for (auto& t : ex.input) t = vocab.content(pick(rng));
  ex.target = ex.input;
  return ex;
}

std::vector<Example> generate_dataset(const TaskSpec& task, const Vocabulary& vocab,
                                      std::uint64_t seed, std::size_t size) {
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Example ex;
    switch (task.kind) {
      case TaskKind::Summarize: ex = gen_sum(task.params, vocab, rng); break;
      case TaskKind::Answer: ex = gen_qa(task.params, vocab, rng); break;
      case TaskKind::QuerySummarize: ex = gen_qfs(task.params, vocab, rng); break;
      case TaskKind::Copy: ex = gen_copy(task.params, vocab, rng); break;
      case TaskKind::Jsonl:
        fail(ErrorKind::Config, "task '" + task.name + "' is JSONL-backed, not synthetic");
    }
    out.push_back(ex.with_prompt(task.prompt_tokens));
  }
  return out;
}

std::vector<TokenId> decoder_labels(const Example& ex) {
  std::vector<TokenId> out = ex.target;
  out.push_back(Vocabulary::kEos);
  return out;
}

Example truncate(const Example& ex, std::size_t max_src_len, std::size_t max_tgt_len) {
  if (max_tgt_len < 2) fail(ErrorKind::Config, "max_tgt_len must leave room for EOS");
  if (max_src_len <= ex.prompt_len + ex.query_len) {
    fail(ErrorKind::Length, "max_src_len leaves no room for source tokens");
  }
  Example out = ex;
  if (out.input.size() > max_src_len) out.input.resize(max_src_len);
  if (out.target.size() > max_tgt_len - 1) out.target.resize(max_tgt_len - 1);
  return out;
}

// --- JSONL ------------------------------------------------------------------

JsonlDataset load_jsonl(const std::filesystem::path& path, const FieldMap& fields,
                        const Vocabulary& vocab, std::span<const TokenId> prompt) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read " + path.string());
  JsonlDataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Load, path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " +
                                e.what());
    }
    auto text_field = [&](const std::string& name) -> std::optional<std::string> {
      if (!rec.is_object() || !rec.contains(name) || !rec[name].is_string()) return std::nullopt;
      return rec[name].get<std::string>();
    };
    const auto input = text_field(fields.input);
    const auto target = text_field(fields.target);
    if (!input || !target || split_words(*target).empty()) {
      ++out.skipped;
      continue;
    }
    Example ex;
    ex.input.assign(prompt.begin(), prompt.end());
    ex.prompt_len = prompt.size();
    if (auto q = text_field(fields.query)) {
      auto qt = vocab.encode(*q);
      ex.input.insert(ex.input.end(), qt.begin(), qt.end());
      ex.query_len = qt.size();
    }
    auto src = vocab.encode(*input);
    ex.input.insert(ex.input.end(), src.begin(), src.end());
    ex.target = vocab.encode(*target);
    out.examples.push_back(std::move(ex));
  }
  return out;
}

void export_jsonl(std::span<const Example> examples, const Vocabulary& vocab,
                  const std::filesystem::path& path, const FieldMap& fields) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json rec;
    rec[fields.input] = vocab.decode(ex.source());
    if (ex.query_len > 0) rec[fields.query] = vocab.decode(ex.query());
    rec[fields.target] = vocab.decode(ex.target);
    out << rec.dump() << '\n';
  }
}

// --- leakage ----------------------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::size_t word_edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t subst = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, subst});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

LeakageReport leakage_check(std::span<const std::string> train_targets,
                            std::span<const std::string> test_targets, std::size_t max_word_diff) {
  if (test_targets.empty()) fail(ErrorKind::Contract, "leakage_check: empty test set");
  std::vector<std::vector<std::string>> train;
  train.reserve(train_targets.size());
  for (const auto& t : train_targets) train.push_back(split_words(t));
  LeakageReport report;
  report.n_test = test_targets.size();
  for (std::size_t i = 0; i < test_targets.size(); ++i) {
    const auto words = split_words(test_targets[i]);
    std::optional<LeakedPair> best;
    for (std::size_t j = 0; j < train.size(); ++j) {
      const auto d = word_edit_distance(words, train[j]);
      if (d < max_word_diff && (!best || d < best->word_diff)) best = LeakedPair{i, j, d};
      if (best && best->word_diff == 0) break;
    }
    if (best) report.pairs.push_back(*best);
  }
  report.n_leaked = report.pairs.size();
  report.ratio = static_cast<double>(report.n_leaked) / static_cast<double>(report.n_test);
  return report;
}

nlohmann::json LeakageReport::to_json() const {
  nlohmann::json j;
  j["n_test"] = n_test;
  j["n_leaked"] = n_leaked;
  j["ratio"] = ratio;
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) {
    j["pairs"].push_back({{"test_idx", p.test_idx}, {"train_idx", p.train_idx},
                          {"word_diff", p.word_diff}});
  }
  return j;
}

}  // namespace pmerge
