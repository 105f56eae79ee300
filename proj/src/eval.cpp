#include "pmerge/eval.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "pmerge/error.hpp"

namespace pmerge {

namespace {

PRF make_prf(double overlap, double cand_total, double ref_total) {
  PRF s;
  s.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  const double denom = s.precision + s.recall;
  s.f1 = denom > 0 ? 2.0 * s.precision * s.recall / denom : 0.0;
  return s;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(std::span<const std::string> seq,
                                                             std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[std::vector<std::string>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                      seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

PRF rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference,
            std::size_t n) {
  if (n == 0) fail(ErrorKind::Contract, "rouge_n: n must be >= 1");
  if (candidate.size() < n || reference.size() < n) return {};
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return make_prf(static_cast<double>(overlap), static_cast<double>(candidate.size() - n + 1),
                  static_cast<double>(reference.size() - n + 1));
}

PRF rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return {};
  std::vector<std::size_t> prev(reference.size() + 1, 0), cur(reference.size() + 1, 0);
  for (std::size_t i = 1; i <= candidate.size(); ++i) {
    for (std::size_t j = 1; j <= reference.size(); ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return make_prf(static_cast<double>(prev[reference.size()]), static_cast<double>(candidate.size()),
                  static_cast<double>(reference.size()));
}

std::vector<std::string> rouge_tokens(std::string_view text) {
  auto words = split_words(text);
  for (auto& w : words) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  }
  return words;
}

RougeScore rouge(std::string_view candidate, std::string_view reference) {
  const auto c = rouge_tokens(candidate);
  const auto r = rouge_tokens(reference);
  return {rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r)};
}

RougeSummary corpus_rouge(std::span<const std::string> candidates,
                          std::span<const std::string> references) {
  if (candidates.size() != references.size()) {
    fail(ErrorKind::Dimension, "corpus_rouge: candidate/reference counts differ");
  }
  RougeSummary s;
  s.count = candidates.size();
  if (s.count == 0) return s;
  auto add = [](PRF& acc, const PRF& x) {
    acc.precision += x.precision;
    acc.recall += x.recall;
    acc.f1 += x.f1;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto r = rouge(candidates[i], references[i]);
    add(s.mean.r1, r.r1);
    add(s.mean.r2, r.r2);
    add(s.mean.rl, r.rl);
  }
  const double n = static_cast<double>(s.count);
  for (PRF* p : {&s.mean.r1, &s.mean.r2, &s.mean.rl}) {
    p->precision /= n;
    p->recall /= n;
    p->f1 /= n;
  }
  return s;
}

nlohmann::json RougeSummary::to_json() const {
  auto prf = [](const PRF& p) {
    return nlohmann::json{{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
  };
  return {{"count", count}, {"rouge1", prf(mean.r1)}, {"rouge2", prf(mean.r2)},
          {"rougeL", prf(mean.rl)}};
}

// --- attention profile ------------------------------------------------------

AttentionProfile profile_from_traces(AttentionSite site, std::span<const AttentionTrace> traces,
                                     std::span<const std::size_t> rows,
                                     std::span<const std::string> regions) {
  if (rows.empty()) fail(ErrorKind::Contract, "attention profile needs a non-empty prefix");
  if (regions.size() != rows.size()) {
    fail(ErrorKind::Dimension, "attention profile: one region label per prefix row required");
  }
  if (traces.empty()) fail(ErrorKind::EmptyData, "attention profile: no traces");
  const std::size_t lp = rows.size();
  std::vector<double> total(lp, 0.0);
  for (const auto& trace : traces) {
    if (trace.prefix_len != lp) {
      fail(ErrorKind::Contract, "attention trace has prefix length " +
                                    std::to_string(trace.prefix_len) + ", expected " +
                                    std::to_string(lp));
    }
    if (trace.layers.empty()) fail(ErrorKind::EmptyData, "attention trace has no layers");
    std::vector<double> per_sample(lp, 0.0);
    for (const auto& heads : trace.layers) {
      std::vector<double> per_layer(lp, 0.0);
      for (const auto& head : heads) {
        std::vector<double> per_head(lp, 0.0);
        for (std::size_t q = 0; q < head.rows; ++q) {
          double mass = 0.0;
          for (std::size_t c = 0; c < lp; ++c) mass += head.at(q, c);
          if (!(mass > 0.0)) fail(ErrorKind::Numeric, "attention row has no prefix mass");
          for (std::size_t c = 0; c < lp; ++c) per_head[c] += head.at(q, c) / mass;
        }
        for (std::size_t c = 0; c < lp; ++c) per_layer[c] += per_head[c] / static_cast<double>(head.rows);
      }
      for (std::size_t c = 0; c < lp; ++c) per_sample[c] += per_layer[c] / static_cast<double>(heads.size());
    }
    for (std::size_t c = 0; c < lp; ++c) total[c] += per_sample[c] / static_cast<double>(trace.layers.size());
  }
  AttentionProfile p;
  p.site = site;
  p.rows.assign(rows.begin(), rows.end());
  p.regions.assign(regions.begin(), regions.end());
  p.samples = traces.size();
  p.scores.resize(lp);
  for (std::size_t c = 0; c < lp; ++c) p.scores[c] = total[c] / static_cast<double>(traces.size());
  return p;
}

std::vector<AttentionProfile> attention_profile(const Transformer& model, const PrefixMatrix& prefix,
                                                std::span<const std::size_t> indices,
                                                std::span<const Example> dataset,
                                                std::size_t n_samples, std::size_t max_len,
                                                std::size_t min_len) {
  if (indices.empty()) fail(ErrorKind::Contract, "attention_profile: prefix length is 0");
  if (dataset.empty() || n_samples == 0) fail(ErrorKind::EmptyData, "attention_profile: no samples");
  const std::size_t n = std::min(n_samples, dataset.size());
  std::vector<std::string> regions;
  for (auto r : indices) regions.push_back(region_label(prefix, r));

  NoGradGuard no_grad;
  const auto acts = gather(prefix, indices);
  std::vector<AttentionTrace> enc, cross;
  for (std::size_t i = 0; i < n; ++i) {
    const auto decoded = model.greedy_decode(dataset[i].input, &acts, max_len, min_len);
    auto fwd = model.forward(dataset[i].input, decoded, &acts, true);
    enc.push_back(std::move(fwd.traces.sites[static_cast<std::size_t>(AttentionSite::EncoderSelf)]));
    cross.push_back(std::move(fwd.traces.sites[static_cast<std::size_t>(AttentionSite::DecoderCross)]));
  }
  return {profile_from_traces(AttentionSite::EncoderSelf, enc, indices, regions),
          profile_from_traces(AttentionSite::DecoderCross, cross, indices, regions)};
}

void export_profile(std::span<const AttentionProfile> profiles, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "site,row_index,region,score\n" << std::setprecision(17);
  for (const auto& p : profiles) {
    for (std::size_t i = 0; i < p.scores.size(); ++i) {
      out << to_string(p.site) << ',' << p.rows[i] << ',' << p.regions[i] << ',' << p.scores[i]
          << '\n';
    }
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<AttentionProfile> read_profile_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "site,row_index,region,score") {
    fail(ErrorKind::Load, path.string() + ": unexpected profile header");
  }
  std::vector<AttentionProfile> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 4) {
      fail(ErrorKind::Load, path.string() + ":" + std::to_string(line_no) + ": expected 4 columns");
    }
    AttentionSite site;
    if (cols[0] == to_string(AttentionSite::EncoderSelf)) site = AttentionSite::EncoderSelf;
    else if (cols[0] == to_string(AttentionSite::DecoderSelf)) site = AttentionSite::DecoderSelf;
    else if (cols[0] == to_string(AttentionSite::DecoderCross)) site = AttentionSite::DecoderCross;
    else fail(ErrorKind::Load, path.string() + ":" + std::to_string(line_no) + ": unknown site");
    if (out.empty() || out.back().site != site) {
      out.emplace_back();
      out.back().site = site;
    }
    try {
      out.back().rows.push_back(std::stoul(cols[1]));
      out.back().regions.push_back(cols[2]);
      out.back().scores.push_back(std::stod(cols[3]));
    } catch (const std::exception&) {
      fail(ErrorKind::Load, path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
  }
  return out;
}

void export_metrics(const nlohmann::json& metrics, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << metrics.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace pmerge
