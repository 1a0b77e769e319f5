#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/finite_difference.hpp"
#include "gaussproto/linalg.hpp"
#include "gaussproto/nn_ops.hpp"
#include "gaussproto/ops.hpp"
#include "gaussproto/optim.hpp"
#include "support/gradcheck.hpp"

namespace gp = gaussproto;
using gp::Shape;
using gp::Tensor;

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), gp::ShapeMismatch);
  EXPECT_THROW(Tensor<double>(Shape{0, 2}), gp::ShapeMismatch);
  Tensor<double> t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_DOUBLE_EQ(t(1, 2), 1.5);
}

TEST(Cholesky, Identity) {
  Tensor<double> eye(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_EQ(gp::cholesky(eye), eye);
}

TEST(Cholesky, TwoByTwoReproducesInput) {
  Tensor<double> a(Shape{2, 2}, std::vector<double>{4, 2, 2, 3});
  const auto l = gp::cholesky(a);
  EXPECT_NEAR(l(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(l(0, 1), 0.0, 0.0);
  EXPECT_NEAR(l(1, 0), 1.0, 1e-12);
  EXPECT_NEAR(l(1, 1), std::sqrt(2.0), 1e-12);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 2; ++k) s += l(i, k) * l(j, k);
      EXPECT_NEAR(s, a(i, j), 1e-12);
    }
}

TEST(Cholesky, IndefiniteMatrixIsRejected) {
  Tensor<double> a(Shape{2, 2}, std::vector<double>{1, 2, 2, 1});
  EXPECT_THROW(gp::cholesky(a), gp::NotPositiveDefinite);
}

TEST(Cholesky, RoundTripOnRandomFactors) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1), pos(0.2, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 6;
    Tensor<double> l(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) l(i, j) = i == j ? pos(rng) : u(rng);
    Tensor<double> a(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) a(i, j) += l(i, k) * l(j, k);
    EXPECT_LT(gp::max_abs_diff(gp::cholesky(a), l), 1e-9);
  }
}

TEST(LogSumExp, Examples) {
  EXPECT_NEAR(gp::log_sum_exp(Tensor<double>(Shape{2}, {0, 0}), 0).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(gp::log_sum_exp(Tensor<double>(Shape{2}, {1000, 1000}), 0).item(), 1000 + std::log(2.0), 1e-12);
  const long double expected = std::log1p(std::exp(-2.0L));
  EXPECT_NEAR(gp::log_sum_exp(Tensor<double>(Shape{2}, {0, -2}), 0).item(), static_cast<double>(expected), 1e-15);
  EXPECT_NEAR(static_cast<double>(expected), 0.126928, 1e-6);
}

TEST(LogSumExp, BoundedByMaxAndLength) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-700, 700);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 9;
    Tensor<double> v(Shape{n});
    for (auto& x : v.data()) x = u(rng);
    const double m = *std::max_element(v.data().begin(), v.data().end());
    const double lse = gp::log_sum_exp(v, 0).item();
    EXPECT_GE(lse, m);
    EXPECT_LE(lse, m + std::log(double(n)) + 1e-12);
  }
}

TEST(LogSumExp, ReducesSelectedAxis) {
  Tensor<double> v(Shape{2, 3}, {0, 0, 0, 1, 2, 3});
  const auto rows = gp::log_sum_exp(v, 1);
  ASSERT_EQ(rows.shape(), (Shape{2}));
  EXPECT_NEAR(rows[0], std::log(3.0), 1e-15);
  const auto cols = gp::log_sum_exp(v, 0);
  ASSERT_EQ(cols.shape(), (Shape{3}));
  EXPECT_NEAR(cols[2], std::log(1 + std::exp(3.0)), 1e-12);
}

TEST(Backward, Quadratic) {
  gp::Graph<double> g;
  auto x = g.variable(Tensor<double>::scalar(3.0));
  auto y = gp::ops::square(x);
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 6.0);
}

TEST(Backward, Bilinear) {
  gp::Graph<double> g;
  auto x = g.variable(Tensor<double>::scalar(2.0));
  auto y = g.variable(Tensor<double>::scalar(5.0));
  g.backward(gp::ops::mul(x, y));
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 5.0);
  EXPECT_DOUBLE_EQ(g.grad(y).item(), 2.0);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
  gp::Parameter<double> used("used", Tensor<double>::scalar(2.0));
  gp::Parameter<double> unused("unused", Tensor<double>(Shape{3}, 1.0));
  gp::Graph<double> g;
  auto u = g.parameter(used);
  g.parameter(unused);
  g.backward(gp::ops::square(u));
  EXPECT_DOUBLE_EQ(used.grad.item(), 4.0);
  for (double v : unused.grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarOutputIsRejected) {
  gp::Graph<double> g;
  auto x = g.variable(Tensor<double>(Shape{2}, 1.0));
  EXPECT_THROW(g.backward(x), gp::NonScalarOutput);
}

TEST(Backward, NonFiniteValuesSurface) {
  gp::Graph<double> g;
  auto x = g.variable(Tensor<double>::scalar(800.0));
  EXPECT_THROW(gp::ops::exp(x), gp::NotFinite);
}

TEST(Backward, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(5);
    auto x = gp::testing::random_tensor(Shape{2, 3, 6, 6}, rng);
    auto w = gp::testing::random_tensor(Shape{4, 3, 3, 3}, rng);
    gp::Graph<double> g;
    auto xv = g.variable(x);
    auto wv = g.variable(w);
    auto y = gp::ops::sum(gp::ops::square(gp::ops::conv2d(xv, wv, nullptr, 2, 1)));
    g.backward(y);
    return std::make_pair(y.value(), g.grad(wv));
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDifference, Examples) {
  auto sq = [](const Tensor<double>& x) { return x[0] * x[0]; };
  EXPECT_NEAR(gp::finite_difference_gradient(sq, Tensor<double>::scalar(3.0), 1e-5).item(), 6.0, 1e-8);
  auto sn = [](const Tensor<double>& x) { return std::sin(x[0]); };
  EXPECT_NEAR(gp::finite_difference_gradient(sn, Tensor<double>::scalar(0.0), 1e-5).item(), 1.0, 1e-9);
  auto norm2 = [](const Tensor<double>& x) { return x[0] * x[0] + x[1] * x[1] + x[2] * x[2]; };
  const auto g = gp::finite_difference_gradient(norm2, Tensor<double>(Shape{3}, {1, 2, 3}), 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  EXPECT_NEAR(g[2], 6.0, 1e-8);
}

TEST(Optimizer, SgdSingleStep) {
  gp::Parameter<double> p("p", Tensor<double>::scalar(3.0));
  gp::Optimizer<double> opt({gp::OptimizerKind::kSgd, 0.1}, {&p});
  p.grad = Tensor<double>::scalar(6.0);
  opt.step();
  EXPECT_NEAR(p.value.item(), 2.4, 1e-15);
}

TEST(Optimizer, ZeroGradientIsAFixpoint) {
  for (auto kind : {gp::OptimizerKind::kSgd, gp::OptimizerKind::kAdam}) {
    gp::Parameter<double> p("p", Tensor<double>(Shape{3}, {1, -2, 3}));
    gp::OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.momentum = 0.9;
    gp::Optimizer<double> opt(cfg, {&p});
    opt.step();
    EXPECT_EQ(p.value, Tensor<double>(Shape{3}, {1, -2, 3}));
  }
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  gp::Parameter<double> p("p", Tensor<double>::scalar(3.0));
  gp::OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  gp::Optimizer<double> opt(cfg, {&p});
  p.grad = Tensor<double>::scalar(6.0);
  opt.step();
  // m = 0.6, v = 0.036; bias-corrected 6 and 36; step = 0.1 * 6 / (6 + 1e-8).
  EXPECT_NEAR(p.value.item(), 3.0 - 0.1 * 6.0 / (6.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value.item(), 2.9, 1e-8);
}

TEST(Optimizer, ShapeMismatchIsRejected) {
  gp::Parameter<double> p("p", Tensor<double>(Shape{2}));
  gp::Optimizer<double> opt({}, {&p});
  p.grad = Tensor<double>(Shape{3});
  EXPECT_THROW(opt.step(), gp::ShapeMismatch);
}

// ---- gradient checks for each primitive -----------------------------------

namespace {

using gp::testing::Builder;
using gp::testing::gradient_check;
using gp::testing::random_tensor;

void expect_gradients(const Builder& op, std::function<std::vector<Tensor<double>>(std::mt19937_64&)> inputs,
                      int trials = 20) {
  std::mt19937_64 rng(1234);
  for (int t = 0; t < trials; ++t) {
    const double err = gradient_check(op, inputs(rng), rng);
    ASSERT_LT(err, 1e-4) << "trial " << t;
  }
}

}  // namespace

TEST(Gradients, Elementwise) {
  auto two = [](std::mt19937_64& r) {
    return std::vector{random_tensor(Shape{3, 4}, r), random_tensor(Shape{3, 4}, r)};
  };
  expect_gradients([](auto&, const auto& v) { return gp::ops::add(v[0], v[1]); }, two);
  expect_gradients([](auto&, const auto& v) { return gp::ops::sub(v[0], v[1]); }, two);
  expect_gradients([](auto&, const auto& v) { return gp::ops::mul(v[0], v[1]); }, two);
  auto one = [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{5, 3}, r, -3, 3)}; };
  expect_gradients([](auto&, const auto& v) { return gp::ops::square(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::exp(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::softplus(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::leaky_relu(v[0], 0.01); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::scale(v[0], -2.5); }, one);
  auto positive = [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{4}, r, 0.5, 3)}; };
  expect_gradients([](auto&, const auto& v) { return gp::ops::log(v[0]); }, positive);
}

TEST(Gradients, Reductions) {
  auto one = [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{4, 5}, r, -3, 3)}; };
  expect_gradients([](auto&, const auto& v) { return gp::ops::sum(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::mean(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::log_softmax(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::log_sum_exp(v[0]); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::reshape(v[0], Shape{20}); }, one);
  auto rowvec = [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{3, 4}, r), random_tensor(Shape{4}, r)}; };
  expect_gradients([](auto&, const auto& v) { return gp::ops::add_rowvec(v[0], v[1]); }, rowvec);
}

TEST(Gradients, MatrixProducts) {
  expect_gradients([](auto&, const auto& v) { return gp::ops::matmul(v[0], v[1]); },
                   [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{3, 4}, r), random_tensor(Shape{4, 2}, r)}; });
  expect_gradients([](auto&, const auto& v) { return gp::ops::matmul_nt(v[0], v[1]); },
                   [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{3, 4}, r), random_tensor(Shape{5, 4}, r)}; });
}

TEST(Gradients, Losses) {
  static const std::vector<int> labels{0, 2, 1, 2};
  auto one = [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{4, 3}, r, -3, 3)}; };
  expect_gradients([](auto&, const auto& v) { return gp::ops::cross_entropy<double>(v[0], labels); }, one);
  expect_gradients([](auto&, const auto& v) { return gp::ops::mse(v[0], v[1]); },
                   [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{2, 3}, r), random_tensor(Shape{2, 3}, r)}; });
}

TEST(Gradients, LayoutOps) {
  static const std::vector<std::size_t> rows{2, 0, 2};
  expect_gradients([](auto&, const auto& v) { return gp::ops::nchw_to_rows(v[0]); },
                   [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{2, 3, 2, 2}, r)}; });
  expect_gradients([](auto&, const auto& v) { return gp::ops::gather_rows<double>(v[0], rows); },
                   [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{3, 2}, r)}; });
}

TEST(Gradients, Convolution) {
  expect_gradients(
      [](auto&, const auto& v) { return gp::ops::conv2d(v[0], v[1], &v[2], 2, 1); },
      [](std::mt19937_64& r) {
        return std::vector{random_tensor(Shape{2, 3, 5, 5}, r), random_tensor(Shape{4, 3, 3, 3}, r),
                           random_tensor(Shape{4}, r)};
      },
      10);
  expect_gradients(
      [](auto&, const auto& v) { return gp::ops::conv_transpose2d(v[0], v[1], &v[2], 2, 0); },
      [](std::mt19937_64& r) {
        return std::vector{random_tensor(Shape{2, 3, 2, 2}, r), random_tensor(Shape{3, 2, 2, 2}, r),
                           random_tensor(Shape{2}, r)};
      },
      10);
  expect_gradients([](auto&, const auto& v) { return gp::ops::global_avg_pool(v[0]); },
                   [](std::mt19937_64& r) { return std::vector{random_tensor(Shape{2, 3, 3, 2}, r)}; });
}

TEST(Gradients, BatchNormBothModes) {
  for (auto mode : {gp::ops::NormMode::kTrain, gp::ops::NormMode::kInference}) {
    expect_gradients(
        [mode](auto&, const auto& v) {
          static gp::ops::BatchNormStats<double> stats(3);
          stats.running_mean = Tensor<double>(Shape{3}, {0.1, -0.2, 0.3});
          stats.running_var = Tensor<double>(Shape{3}, {0.5, 1.5, 2.0});
          return gp::ops::batch_norm(v[0], v[1], v[2], stats, mode, false);
        },
        [](std::mt19937_64& r) {
          return std::vector{random_tensor(Shape{3, 3, 2, 2}, r), random_tensor(Shape{3}, r, 0.5, 2),
                             random_tensor(Shape{3}, r)};
        },
        10);
  }
}

TEST(BatchNorm, TrainAndInferenceAgreeWhenStatisticsMatch) {
  std::mt19937_64 rng(9);
  auto x = random_tensor(Shape{4, 2, 3, 3}, rng);
  gp::ops::BatchNormStats<double> stats(2);
  {
    // Load the batch's own statistics as running statistics.
    gp::Graph<double> g;
    stats.momentum = 1.0;
    gp::ops::batch_norm(g.constant(x), g.constant(Tensor<double>(Shape{2}, 1.0)),
                        g.constant(Tensor<double>(Shape{2}, 0.0)), stats, gp::ops::NormMode::kTrain, true);
  }
  gp::Graph<double> g;
  auto gamma = g.constant(Tensor<double>(Shape{2}, {1.3, 0.7}));
  auto beta = g.constant(Tensor<double>(Shape{2}, {0.1, -0.4}));
  auto train = gp::ops::batch_norm(g.constant(x), gamma, beta, stats, gp::ops::NormMode::kTrain, false);
  auto infer = gp::ops::batch_norm(g.constant(x), gamma, beta, stats, gp::ops::NormMode::kInference, false);
  EXPECT_LT(gp::max_abs_diff(train.value(), infer.value()), 1e-6);
}

TEST(Convolution, OutputShapeAndStride) {
  gp::Graph<double> g;
  auto x = g.constant(Tensor<double>(Shape{1, 3, 8, 8}, 1.0));
  auto w = g.constant(Tensor<double>(Shape{5, 3, 3, 3}, 1.0));
  auto y = gp::ops::conv2d(x, w, nullptr, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
  // Interior output sees 27 ones.
  EXPECT_DOUBLE_EQ(y.value()(0, 0, 1, 1), 27.0);
  auto t = gp::ops::conv_transpose2d(g.constant(Tensor<double>(Shape{1, 2, 2, 2}, 1.0)),
                                     g.constant(Tensor<double>(Shape{2, 3, 2, 2}, 1.0)), nullptr, 2, 0);
  EXPECT_EQ(t.shape(), (Shape{1, 3, 4, 4}));
  EXPECT_DOUBLE_EQ(t.value()(0, 0, 3, 3), 2.0);
}
