#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "metast/autodiff.hpp"
#include "metast/gradcheck.hpp"
#include "metast/params.hpp"

using namespace metast;
using gradcheck::random_tensor;

namespace {

constexpr int kTrials = 20;
constexpr double kGradTol = 1e-4;

// Direct nested-loop reference for same-padded convolution plus bias.
Tensor conv_reference(const Tensor& x, const Tensor& k, const Tensor& bias) {
  const std::size_t H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  const std::size_t Kh = k.dim(0), Kw = k.dim(1), Cout = k.dim(3);
  Tensor out(Shape{H, W, Cout});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t co = 0; co < Cout; ++co) {
        double acc = bias[co];
        for (std::size_t a = 0; a < Kh; ++a)
          for (std::size_t b = 0; b < Kw; ++b)
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const long ih = static_cast<long>(h + a) - static_cast<long>(Kh / 2);
              const long iw = static_cast<long>(w + b) - static_cast<long>(Kw / 2);
              if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
              acc += k.at({a, b, ci, co}) * x.at({static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), ci});
            }
        out.at({h, w, co}) = acc;
      }
  return out;
}

Tensor conv_with_bias(const Tensor& x, const Tensor& k, const Tensor& b) {
  ad::Graph g;
  return ad::add_bias(ad::conv2d(g.constant(x), g.constant(k)), g.constant(b)).value();
}

void expect_grad_ok(const gradcheck::LossFn& fn, const std::vector<Tensor>& inputs) {
  const auto r = gradcheck::check(fn, inputs);
  EXPECT_LE(r.max_rel_error, kGradTol);
}

}  // namespace

TEST(Conv2d, IdentityKernelReturnsInput) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({4, 5, 1}, rng);
  const Tensor k(Shape{1, 1, 1, 1}, 1.0);
  EXPECT_EQ(conv_with_bias(x, k, Tensor(Shape{1})), x);
}

TEST(Conv2d, AllOnesWindowSums) {
  const Tensor x(Shape{3, 3, 1}, 1.0);
  const Tensor k(Shape{3, 3, 1, 1}, 1.0);
  const Tensor y = conv_with_bias(x, k, Tensor(Shape{1}));
  EXPECT_DOUBLE_EQ(y.at({1, 1, 0}), 9.0);
  EXPECT_DOUBLE_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_DOUBLE_EQ(y.at({0, 2, 0}), 4.0);
  EXPECT_DOUBLE_EQ(y.at({2, 0, 0}), 4.0);
  EXPECT_DOUBLE_EQ(y.at({2, 2, 0}), 4.0);
  EXPECT_DOUBLE_EQ(y.at({0, 1, 0}), 6.0);
}

TEST(Conv2d, MatchesLoopReferenceOnRandomInstance) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({5, 5, 2}, rng);
  const Tensor k = random_tensor({3, 3, 2, 4}, rng);
  const Tensor b = random_tensor({4}, rng);
  const Tensor got = conv_with_bias(x, k, b);
  const Tensor want = conv_reference(x, k, b);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Conv2d, MatchesLoopReferenceOnAllSmallShapes) {
  std::mt19937_64 rng(3);
  for (std::size_t H = 1; H <= 7; H += 2)
    for (std::size_t W = 1; W <= 7; W += 3)
      for (std::size_t C = 1; C <= 4; C += 3)
        for (std::size_t K = 1; K <= 5; K += 2) {
          const Tensor x = random_tensor({H, W, C}, rng);
          const Tensor k = random_tensor({K, K, C, 2}, rng);
          const Tensor b = random_tensor({2}, rng);
          const Tensor got = conv_with_bias(x, k, b);
          const Tensor want = conv_reference(x, k, b);
          for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
        }
}

TEST(Conv2d, RejectsMismatchedChannels) {
  ad::Graph g;
  const auto x = g.constant(Tensor(Shape{3, 3, 2}));
  const auto k = g.constant(Tensor(Shape{3, 3, 1, 1}));
  EXPECT_THROW(ad::conv2d(x, k), ShapeError);
}

TEST(Conv2d, RejectsEvenKernel) {
  ad::Graph g;
  EXPECT_THROW(ad::conv2d(g.constant(Tensor(Shape{3, 3, 1})), g.constant(Tensor(Shape{2, 2, 1, 1}))), ShapeError);
}

TEST(CoreOps, SoftmaxOfZerosIsUniform) {
  ad::Graph g;
  const Tensor y = ad::softmax(g.constant(Tensor(Shape{3})), 0).value();
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(CoreOps, TanhAndSigmoidAtZero) {
  ad::Graph g;
  const auto z = g.constant(Tensor::scalar(0.0));
  EXPECT_EQ(ad::tanh(z).value().item(), 0.0);
  EXPECT_EQ(ad::sigmoid(z).value().item(), 0.5);
}

TEST(CoreOps, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor({2, 3}, rng);
  const Tensor b = random_tensor({3, 2}, rng);
  ad::Graph g;
  const Tensor c = ad::matmul(g.constant(a), g.constant(b)).value();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 3; ++k) acc += a.at({i, k}) * b.at({k, j});
      EXPECT_NEAR(c.at({i, j}), acc, 1e-12);
    }
}

TEST(CoreOps, MatmulTransposeFlagsMatchExplicitTranspose) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({4, 3}, rng);
  const Tensor b = random_tensor({5, 4}, rng);
  ad::Graph g;
  // a^T b^T has shape [3, 5]
  const Tensor c = ad::matmul(g.constant(a), g.constant(b), true, true).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += a.at({k, i}) * b.at({j, k});
      EXPECT_NEAR(c.at({i, j}), acc, 1e-12);
    }
}

TEST(CoreOps, SoftmaxSumsToOneForLargeInputs) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({3, 7}, rng, -300.0, 300.0);
    ad::Graph g;
    const Tensor y = ad::softmax(g.constant(x), 1).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(y.at({r, c}), 0.0);
        s += y.at({r, c});
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(CoreOps, ShapeMismatchIsReported) {
  ad::Graph g;
  const auto a = g.constant(Tensor(Shape{2, 3}));
  const auto b = g.constant(Tensor(Shape{2, 2}));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, b), ShapeError);
  EXPECT_THROW(ad::concat(a, g.constant(Tensor(Shape{3, 3})), 1), ShapeError);
}

TEST(CoreOps, LogIsClampedAtEpsilon) {
  ad::Graph g;
  const Tensor y = ad::log(g.constant(Tensor::vector({0.0, 1.0}))).value();
  EXPECT_NEAR(y[0], std::log(ad::kLogEpsilon), 1e-9);
  EXPECT_EQ(y[1], 0.0);
}

TEST(CoreOps, NonFiniteValuesAreRejected) {
  ad::Graph g;
  const auto x = g.constant(Tensor::scalar(800.0));
  EXPECT_THROW(ad::exp(x), NumericalError);
}

TEST(Backward, SumHasUnitGradient) {
  ad::Graph g;
  const auto x = g.parameter(Tensor(Shape{2, 3}, 0.7));
  const auto grads = g.gradients(ad::sum(x), std::vector<ad::Var>{x});
  for (double v : grads[0].data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SumOfSquares) {
  ad::Graph g;
  const auto x = g.parameter(Tensor::vector({1, 2, 3}));
  const auto grads = g.gradients(ad::sum(ad::square(x)), std::vector<ad::Var>{x});
  EXPECT_EQ(grads[0], Tensor::vector({2, 4, 6}));
}

TEST(Backward, UnusedLeafGetsZeros) {
  ad::Graph g;
  const auto x = g.parameter(Tensor::vector({1, 2}));
  const auto unused = g.parameter(Tensor(Shape{2, 2}, 5.0));
  const auto grads = g.gradients(ad::sum(x), std::vector<ad::Var>{x, unused});
  EXPECT_EQ(grads[1], Tensor(Shape{2, 2}, 0.0));
}

TEST(Backward, RejectsNonScalarLoss) {
  ad::Graph g;
  const auto x = g.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(g.gradients(ad::square(x), std::vector<ad::Var>{x}), ShapeError);
}

TEST(Backward, RejectsEmptyGraph) {
  ad::Graph g;
  EXPECT_THROW(g.gradients(ad::Var{}, std::vector<ad::Var>{}), std::logic_error);
}

TEST(Backward, ReplayIsBitwiseDeterministic) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({3, 4, 2}, rng);
  const Tensor k = random_tensor({3, 3, 2, 3}, rng);
  auto run = [&] {
    ad::Graph g;
    const auto xv = g.parameter(x);
    const auto kv = g.parameter(k);
    const auto y = ad::tanh(ad::conv2d(xv, kv));
    return g.gradients(ad::sum(ad::square(y)), std::vector<ad::Var>{xv, kv});
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);
}

// One finite-difference check per op, 20 random draws each.

TEST(GradCheck, Elementwise) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < kTrials; ++t) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({3, 4}, rng);
    const Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    // Keep relu inputs away from the kink.
    Tensor r = random_tensor({3, 4}, rng);
    for (auto& x : r.data()) x += x >= 0 ? 0.05 : -0.05;
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::add(v[0], v[1]) * v[0]); }, {a, b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::sub(v[0], v[1]) * v[1]); }, {a, b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::mul(v[0], v[1])); }, {a, b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::affine(v[0], 1.7, -0.3))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::sigmoid(v[0]))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::tanh(v[0]))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::relu(v[0]))); }, {r});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::exp(v[0])); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::log(v[0]))); }, {pos});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::reciprocal(v[0])); }, {pos});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::square(ad::mean(v[0])); }, {a});
  }
}

TEST(GradCheck, Matmul) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < kTrials; ++t) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 2}, rng);
    const Tensor bt = random_tensor({2, 4}, rng);
    const Tensor at = random_tensor({4, 3}, rng);
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::matmul(v[0], v[1]))); }, {a, b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::matmul(v[0], v[1], false, true))); }, {a, bt});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::matmul(v[0], v[1], true, false))); }, {at, b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::matmul(v[0], v[1], true, true))); }, {at, bt});
  }
}

TEST(GradCheck, Conv2dFamily) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < kTrials; ++t) {
    const Tensor x = random_tensor({2, 4, 5, 2}, rng);
    const Tensor k = random_tensor({3, 3, 2, 3}, rng);
    const Tensor go = random_tensor({2, 4, 5, 3}, rng);
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::conv2d(v[0], v[1]))); }, {x, k});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::conv2d_input_grad(v[0], v[1]))); },
                   {go, k});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::conv2d_kernel_grad(v[0], v[1], 3, 3))); },
                   {x, go});
  }
}

TEST(GradCheck, ReductionsAndShapes) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < kTrials; ++t) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({3, 2}, rng);
    const Tensor bias = random_tensor({4}, rng);
    const Tensor s = random_tensor({}, rng);
    const Tensor w = random_tensor({3, 6}, rng);
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::softmax(v[0], 1))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::softmax(v[0], 0))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::sum_axis(v[0], 1))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::broadcast_axis(v[0], 0, 5))); }, {bias});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::add_bias(v[0], v[1]))); }, {a, bias});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::fill(v[0], {2, 3}))); }, {s});
    expect_grad_ok([&](ad::Graph& g, auto v) {
      const ad::Var joined = ad::concat(v[0], v[1], 1);
      return ad::sum(joined * g.constant(w));
    }, {a, b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::slice(v[0], 1, 1, 2))); }, {a});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::embed(v[0], 1, 1, 5)) * ad::embed(v[0], 1, 2, 5)); },
                   {b});
    expect_grad_ok([](ad::Graph&, auto v) { return ad::sum(ad::square(ad::reshape(v[0], {2, 6})) * ad::reshape(v[0], {2, 6})); },
                   {a});
  }
}

TEST(GradCheck, SecondOrderThroughGradient) {
  // d/dx of sum(grad_x f), with f built from every bilinear family.
  std::mt19937_64 rng(14);
  for (int t = 0; t < kTrials; ++t) {
    const Tensor x = random_tensor({1, 3, 3, 2}, rng);
    const Tensor k = random_tensor({3, 3, 2, 2}, rng);
    const Tensor w = random_tensor({18, 3}, rng);
    expect_grad_ok([](ad::Graph& g, auto v) {
      const ad::Var h = ad::tanh(ad::conv2d(v[0], v[1]));
      const ad::Var y = ad::softmax(ad::matmul(ad::reshape(h, {1, 18}), v[2]), 1);
      const ad::Var loss = ad::sum(ad::square(y));
      const std::vector<ad::Var> wrt{v[0], v[1], v[2]};
      const auto grads = g.grad(loss, wrt, true);
      return ad::sum(ad::square(grads[0])) + ad::sum(ad::square(grads[1])) + ad::sum(ad::square(grads[2]));
    }, {x, k, w});
  }
}

TEST(SgdStep, ZeroRateIsBitwiseCopy) {
  std::mt19937_64 rng(20);
  ParamSet p;
  p.set("a", random_tensor({3, 2}, rng));
  ParamSet g;
  g.set("a", random_tensor({3, 2}, rng));
  EXPECT_EQ(sgd_step(p, g, 0.0), p);
}

TEST(SgdStep, ScalarArithmetic) {
  ParamSet p, g;
  p.set("w", Tensor::scalar(1.0));
  g.set("w", Tensor::scalar(2.0));
  const ParamSet out = sgd_step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(out.at("w").item(), 0.8);
  EXPECT_EQ(p.at("w").item(), 1.0);
}

TEST(SgdStep, FrozenGradientStepsCompose) {
  std::mt19937_64 rng(21);
  ParamSet p, g1, g2;
  p.set("w", random_tensor({4}, rng));
  g1.set("w", random_tensor({4}, rng));
  g2.set("w", random_tensor({4}, rng));
  ParamSet sum = g1;
  sum.axpy(1.0, g2);
  const ParamSet two = sgd_step(sgd_step(p, g1, 0.05), g2, 0.05);
  const ParamSet one = sgd_step(p, sum, 0.05);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(two.at("w")[i], one.at("w")[i], 1e-15);
}

TEST(SgdStep, KeyMismatchThrows) {
  ParamSet p, g;
  p.set("a", Tensor::scalar(1));
  g.set("b", Tensor::scalar(1));
  EXPECT_THROW(sgd_step(p, g, 0.1), std::invalid_argument);
}
