#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pmerge/error.hpp"
#include "pmerge/fisher.hpp"
#include "pmerge/tasks.hpp"

using namespace pmerge;

namespace {

// d/dtheta log p(y | x; theta) for p(y=1|x) = sigmoid(theta x), via autodiff on
// a two-class softmax with logits [0, theta x].
double logistic_grad(double theta, double x, std::size_t y) {
  Tensor t = Tensor::scalar(theta, true);
  Tensor logits = concat({Tensor::zeros({1, 1}), reshape(scale(t, x), {1, 1})}, 1);
  std::vector<std::size_t> target{y};
  Tensor ll = scale(cross_entropy(logits, target), -1.0);
  return backward(ll).get(t)[0];
}

double closed_form_fisher(double theta, std::span<const double> xs, std::span<const std::size_t> ys) {
  double total = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double p = 1.0 / (1.0 + std::exp(-theta * xs[k]));
    const double g = (static_cast<double>(ys[k]) - p) * xs[k];
    total += g * g;
  }
  return total / static_cast<double>(xs.size());
}

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 40;
  c.max_src_len = 24;
  c.max_tgt_len = 6;
  return c;
}

}  // namespace

TEST(Fisher, LogisticSingleParameterClosedForm) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  std::bernoulli_distribution b(0.4);
  for (double theta : {-1.3, 0.0, 0.7, 2.5}) {
    std::vector<double> xs(50);
    std::vector<std::size_t> ys(50);
    FisherAccumulator acc(0, 1, 1);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      xs[k] = n(rng);
      ys[k] = b(rng) ? 1 : 0;
      const double g = logistic_grad(theta, xs[k], ys[k]);
      acc.add_gradient(std::span<const double>(&g, 1), k);
    }
    const auto report = finalize(acc);
    ASSERT_EQ(report.scores.size(), 1u);
    EXPECT_NEAR(report.scores[0], closed_form_fisher(theta, xs, ys), 1e-10);
  }
}

TEST(Fisher, ScalingGradientsScalesScoresQuadratically) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t rows = 6, per_row = 5;
  std::vector<std::vector<double>> grads(20, std::vector<double>(rows * per_row));
  for (auto& g : grads)
    for (auto& x : g) x = n(rng);
  for (double c : {0.5, 3.0, -7.0}) {
    FisherAccumulator base(0, rows, per_row), scaled(0, rows, per_row);
    for (const auto& g : grads) {
      base.add_gradient(g);
      std::vector<double> s(g);
      for (auto& x : s) x *= c;
      scaled.add_gradient(s);
    }
    const auto f = finalize(base), fs = finalize(scaled);
    for (std::size_t r = 0; r < rows; ++r) EXPECT_NEAR(fs.scores[r], c * c * f.scores[r], 1e-12 * c * c * f.scores[r]);
    EXPECT_EQ(top_n_indices(f.scores, 3), top_n_indices(fs.scores, 3));
  }
}

TEST(Fisher, NonFiniteGradientNamesSample) {
  FisherAccumulator acc(0, 1, 2);
  std::vector<double> bad{1.0, NAN};
  try {
    acc.add_gradient(bad, 17);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
}

TEST(Fisher, EmptyAccumulatorCannotFinalize) {
  FisherAccumulator acc(3, 2, 2);
  try {
    finalize(acc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyData);
  }
}

TEST(Fisher, TopNTiesToLowerIndex) {
  std::vector<double> s{0.1, 0.5, 0.5, 0.2, 0.5};
  EXPECT_EQ(top_n_indices(s, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_n_indices(s, 4), (std::vector<std::size_t>{1, 2, 4, 3}));
}

TEST(Fisher, StubModelDependingOnEvenRowsSelectsEvenRows) {
  ModelConfig c = tiny();
  PrefixMatrix p(SelfAdaptiveDesign{8, 4, 2}, c, 3, 0.5);
  std::vector<std::size_t> even{0, 2, 4, 6}, odd{1, 3, 5, 7};
  auto report_for = [&](const std::vector<std::size_t>& used, std::size_t task) {
    FisherAccumulator acc(task, p.rows(), p.row_dim());
    for (int k = 0; k < 5; ++k) {
      // Stub "model": loss reads only the gathered rows.
      auto acts = gather(p, used);
      Tensor loss = scale(sum(mul(acts.at(AttentionSite::EncoderSelf, 0).key,
                                  acts.at(AttentionSite::EncoderSelf, 0).key)),
                          1.0 + k);
      acc.add_gradient(backward(loss).get(p.tensor()), static_cast<std::size_t>(k));
    }
    return finalize(acc);
  };
  std::vector<FisherReport> reports{report_for(even, 0), report_for(odd, 1)};
  for (auto r : odd) EXPECT_EQ(reports[0].scores[r], 0.0);
  apply_selection(p, reports, 4);
  auto m0 = p.task_map(0);
  std::sort(m0.begin(), m0.end());
  EXPECT_EQ(m0, even);
  auto m1 = p.task_map(1);
  std::sort(m1.begin(), m1.end());
  EXPECT_EQ(m1, odd);
}

TEST(Fisher, AccumulateMatchesDirectSquaredGradients) {
  ModelConfig c = tiny();
  Vocabulary vocab(c.vocab_size, 4);
  GeneratorParams gp;
  gp.segment_len = 4;
  gp.segment_pool = 3;
  auto spec = make_task(TaskKind::Answer, 0, vocab, gp);
  auto data = generate_dataset(spec, vocab, 5, 6);
  Transformer model(c, 4);
  model.set_trainable(false);
  PrefixMatrix p(ManualDesign{2, 1, 2}, c, 6, 0.3);
  const auto& idx = p.task_map(0);

  FisherAccumulator acc(0, p.rows(), p.row_dim());
  std::vector<double> direct(p.rows() * p.row_dim(), 0.0);
  for (std::size_t k = 0; k < data.size(); ++k) {
    accumulate(acc, model, p, idx, data[k], k);
    auto g = backward(sequence_log_likelihood(model, p, idx, data[k])).get(p.tensor());
    for (std::size_t j = 0; j < g.size(); ++j) direct[j] += g[j] * g[j];
  }
  const auto report = finalize(acc);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < p.row_dim(); ++j) s += direct[r * p.row_dim() + j];
    s /= static_cast<double>(p.row_dim() * data.size());
    EXPECT_NEAR(report.scores[r], s, 1e-12 * std::max(1.0, s));
    EXPECT_GE(report.scores[r], 0.0);
  }
  EXPECT_EQ(report.scores[3], 0.0);  // row 3 is task 1's unique row
  EXPECT_GT(report.scores[0], 0.0);
}

TEST(Fisher, LogLikelihoodIsNegatedSummedCrossEntropy) {
  ModelConfig c = tiny();
  Vocabulary vocab(c.vocab_size, 4);
  Transformer model(c, 8);
  PrefixMatrix p(ManualDesign{2, 0, 1}, c, 9);
  Example ex;
  ex.input = {10, 11, 12};
  ex.target = {13, 14};
  const auto labels = decoder_labels(ex);
  const auto acts = gather(p, p.task_map(0));
  const double ce = cross_entropy(model.forward(ex.input, labels, &acts).logits, labels).item();
  EXPECT_NEAR(sequence_log_likelihood(model, p, p.task_map(0), ex).item(), -3.0 * ce, 1e-12);
}

TEST(Fisher, CsvExport) {
  const auto path = std::filesystem::temp_directory_path() / "pmerge_fisher_test.csv";
  std::vector<FisherReport> reports{{0, {0.5, 0.25}}, {1, {1.0, 0.0}}};
  export_fisher_csv(reports, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "task_id,row_index,score");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4u);
  std::filesystem::remove(path);
}
