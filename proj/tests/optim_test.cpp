#include <gtest/gtest.h>

#include <cmath>

#include "pmerge/error.hpp"
#include "pmerge/optim.hpp"

using namespace pmerge;

namespace {

AdamWConfig cfg(double lr, double wd = 0.0) {
  AdamWConfig c;
  c.learning_rate = lr;
  c.weight_decay = wd;
  return c;
}

}  // namespace

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
  Tensor p = Tensor::from({2, 2}, {1, -2, 3, 4}, true);
  AdamW opt({p}, cfg(0.1));
  std::vector<std::vector<double>> g{{0, 0, 0, 0}};
  for (int i = 0; i < 5; ++i) opt.step(g);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, -2, 3, 4}));
}

TEST(AdamW, FirstStepMovesByLearningRateTimesSign) {
  // Bias correction makes the first update lr * g / (|g| + eps).
  Tensor p = Tensor::from({3}, {0.0, 1.0, -1.0}, true);
  AdamW opt({p}, cfg(0.1));
  std::vector<std::vector<double>> g{{2.0, -0.5, 1e3}};
  opt.step(g);
  EXPECT_NEAR(p.data()[0], -0.1, 1e-8);
  EXPECT_NEAR(p.data()[1], 1.1, 1e-7);
  EXPECT_NEAR(p.data()[2], -1.1, 1e-10);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, DecoupledWeightDecay) {
  Tensor p = Tensor::from({1}, {2.0}, true);
  AdamW opt({p}, cfg(0.1, 0.5));
  std::vector<std::vector<double>> g{{0.0}};
  opt.step(g);
  EXPECT_NEAR(p.data()[0], 2.0 * (1.0 - 0.05), 1e-15);
}

TEST(AdamW, ReferenceRecurrenceOverSeveralSteps) {
  Tensor p = Tensor::from({1}, {0.5}, true);
  AdamWConfig c = cfg(0.01, 0.1);
  AdamW opt({p}, c);
  double theta = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 10; ++t) {
    const double g = std::sin(t) + theta;
    std::vector<std::vector<double>> gs{{g}};
    opt.step(gs);
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
    theta -= c.learning_rate * c.weight_decay * theta;
    theta -= c.learning_rate * mh / (std::sqrt(vh) + c.eps);
    EXPECT_NEAR(p.data()[0], theta, 1e-14);
  }
}

TEST(AdamW, DeterministicAcrossInstances) {
  auto run = [] {
    Tensor p = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    AdamW opt({p}, cfg(0.05, 0.01));
    for (int t = 0; t < 20; ++t) {
      std::vector<std::vector<double>> g{{0.1 * t, -1, 2, 0.5, -0.3 * t, 7}};
      opt.step(g);
    }
    return std::vector<double>(p.data().begin(), p.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, RowMaskFreezesRows) {
  Tensor p = Tensor::from({3, 2}, {1, 1, 2, 2, 3, 3}, true);
  AdamW opt({p}, cfg(0.1, 0.1));
  opt.set_row_mask(0, {1, 0, 1});
  std::vector<std::vector<double>> g{{1, 1, 1, 1, 1, 1}};
  for (int i = 0; i < 3; ++i) opt.step(g);
  EXPECT_EQ(p.data()[2], 2.0);
  EXPECT_EQ(p.data()[3], 2.0);
  EXPECT_NE(p.data()[0], 1.0);
  EXPECT_NE(p.data()[4], 3.0);
}

TEST(AdamW, InvalidConfigAndShapes) {
  Tensor p = Tensor::from({2}, {1, 2}, true);
  for (double lr : {0.0, -1e-3}) {
    try {
      AdamW opt({p}, cfg(lr));
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
  }
  AdamW opt({p}, cfg(0.1));
  std::vector<std::vector<double>> wrong{{1.0}};
  EXPECT_THROW(opt.step(wrong), Error);
  EXPECT_THROW(opt.set_row_mask(0, {1, 1}), Error);  // not a matrix
}

TEST(GradientAccumulator, SumsAndSkipsUnreachable) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor b = Tensor::from({1}, {3}, true);
  GradientAccumulator acc({a, b});
  acc.add(backward(sum(mul(a, a))));
  acc.add(backward(sum(a)));
  EXPECT_EQ(acc.grads()[0], (std::vector<double>{3, 5}));
  EXPECT_EQ(acc.grads()[1], (std::vector<double>{0}));
  EXPECT_TRUE(acc.all_finite());
  acc.reset();
  EXPECT_EQ(acc.grads()[0], (std::vector<double>{0, 0}));
}
