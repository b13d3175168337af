#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "urbanmsr/gradcheck.hpp"
#include "urbanmsr/tensor.hpp"

using namespace umsr;
using T = Tensor<double>;

TEST(Matmul, IdentityAndDot) {
  auto eye = T::from({2, 2}, {1, 0, 0, 1});
  auto a = T::from({2, 2}, {1, 2, 3, 4});
  auto r = ops::matmul(eye, a);
  EXPECT_EQ(r.values(), a.values());

  auto row = T::from({1, 2}, {1, 2});
  auto col = T::from({2, 1}, {3, 4});
  EXPECT_DOUBLE_EQ(ops::matmul(row, col).item(), 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  auto a = T::zeros({2, 3});
  auto b = T::zeros({2, 3});
  EXPECT_THROW(ops::matmul(a, b), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto a = gradcheck::detail::random_tensor({3, 4}, rng);
  auto b = gradcheck::detail::random_tensor({4, 2}, rng);
  auto res = gradcheck::check_scalar_fn(
      "matmul", [](std::vector<T>& l) { return ops::sum(ops::matmul(l[0], l[1])); }, {a, b},
      1e-5);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}

TEST(Conv2d, IdentityKernel) {
  auto x = T::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = T::from({1, 1, 1, 1}, {1});
  auto y = ops::conv2d(x, k, 0, 1);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, AllOnesPaddedCounts) {
  auto x = T::full({1, 3, 3}, 1.0);
  auto k = T::full({1, 1, 3, 3}, 1.0);
  auto y = ops::conv2d(x, k, 1, 1);
  // Overlap counts: 9 center, 6 edges, 4 corners.
  EXPECT_DOUBLE_EQ(y.at(0, 1, 1), 9.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1), 6.0);
  EXPECT_DOUBLE_EQ(y.at(0, 1, 0), 6.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 4.0);
  EXPECT_DOUBLE_EQ(y.at(0, 2, 2), 4.0);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    int cin = 1 + static_cast<int>(rng.below(3));
    int cout = 1 + static_cast<int>(rng.below(3));
    int h = 3 + static_cast<int>(rng.below(4));
    int w = 3 + static_cast<int>(rng.below(4));
    int pad = static_cast<int>(rng.below(2));
    auto x = gradcheck::detail::random_tensor({cin, h, w}, rng);
    auto k = gradcheck::detail::random_tensor({cout, cin, 3, 3}, rng);
    auto y = ops::conv2d(x, k, pad, 1);
    auto ref = oracle::conv2d(x.values(), cin, h, w, k.values(), cout, 3, 3, pad, 1);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  auto x = T::zeros({1, 2, 2});
  auto k = T::zeros({1, 1, 5, 5});
  EXPECT_THROW(ops::conv2d(x, k, 0, 1), DimensionError);
}

TEST(Bilinear, IntegerCoordsExact) {
  auto x = T::from({1, 2, 2}, {1, 2, 3, 4});
  auto v = ops::bilinear_sample(x, T::scalar(1), T::scalar(0));
  EXPECT_DOUBLE_EQ(v.at(0), 3.0);
}

TEST(Bilinear, ZeroPaddedCorner) {
  auto x = T::from({1, 1, 1}, {8.0});
  auto v = ops::bilinear_sample(x, T::scalar(0.5), T::scalar(0.5));
  // Only the (0,0) corner of the 4-cell stencil is inside the grid.
  EXPECT_DOUBLE_EQ(v.at(0), 0.25 * 8.0);
}

TEST(Bilinear, FullyOutOfBoundsIsZero) {
  auto x = T::from({1, 2, 2}, {5, 5, 5, 5});
  auto v = ops::bilinear_sample(x, T::scalar(-2), T::scalar(-2));
  EXPECT_DOUBLE_EQ(v.at(0), 0.0);
}

TEST(Bilinear, GradientThroughMapAndCoords) {
  Rng rng(5);
  auto x = gradcheck::detail::random_tensor({2, 4, 4}, rng);
  auto res = gradcheck::check_scalar_fn(
      "bilinear",
      [](std::vector<T>& l) { return ops::sum(ops::bilinear_sample(l[0], l[1], l[2])); },
      {x, T::scalar(1.4), T::scalar(2.3)}, 1e-5);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}

TEST(Elementwise, Definitions) {
  auto r = ops::relu(T::from({3}, {-1, 0, 2}));
  EXPECT_EQ(r.values(), (std::vector<double>{0, 0, 2}));
  EXPECT_DOUBLE_EQ(ops::tanh_(T::scalar(0.0)).item(), 0.0);
  auto a = T::from({2}, {1, 2});
  auto b = T::from({2}, {3, 5});
  EXPECT_EQ(ops::add(a, b).values(), (std::vector<double>{4, 7}));
  EXPECT_EQ(ops::sub(a, b).values(), (std::vector<double>{-2, -3}));
  EXPECT_EQ(ops::mul(a, b).values(), (std::vector<double>{3, 10}));
  EXPECT_EQ(ops::scale(a, 2.0).values(), (std::vector<double>{2, 4}));
  EXPECT_THROW(ops::add(a, T::zeros({3})), DimensionError);
}

TEST(Elementwise, GradientsAtNonKinkPoints) {
  Rng rng(9);
  auto res = gradcheck::check_scalar_fn(
      "elementwise",
      [](std::vector<T>& l) {
        auto y = ops::mul(ops::relu(l[0]), ops::tanh_(l[1]));
        return ops::sum(ops::add(y, ops::scale(l[0], 0.3)));
      },
      {gradcheck::detail::random_tensor({3, 3}, rng, 0.2, 1.0),
       gradcheck::detail::random_tensor({3, 3}, rng)},
      1e-5);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}

TEST(Softmax, SymmetryStabilityClosedForm) {
  auto u = ops::softmax(T::from({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(u.at(0), 0.5);
  auto big = ops::softmax(T::from({2}, {1000, 1000}), 0);
  EXPECT_DOUBLE_EQ(big.at(0), 0.5);
  EXPECT_TRUE(all_finite(big));
  auto lr = ops::softmax(T::from({2}, {std::log(1.0), std::log(3.0)}), 0);
  EXPECT_NEAR(lr.at(0), 0.25, 1e-12);
  EXPECT_NEAR(lr.at(1), 0.75, 1e-12);
}

TEST(Softmax, SumsToOneOnRandomInput) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = gradcheck::detail::random_tensor({3, 4, 5}, rng, -30.0, 30.0);
    int axis = static_cast<int>(rng.below(3));
    auto s = ops::softmax(x, axis);
    // Sum along the reduced axis for a few positions.
    std::size_t inner = 1, outer = 1;
    for (int d = axis + 1; d < 3; ++d) inner *= static_cast<std::size_t>(x.dim(d));
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(x.dim(d));
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0;
        for (int i = 0; i < x.dim(axis); ++i) total += s.values()[o * x.dim(axis) * inner + i * inner + in];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  }
}

TEST(LayerNorm, FixedPointAndConstantInput) {
  // Already zero-mean, unit-variance rows stay put under gamma=1, beta=0.
  auto x = T::from({1, 2}, {-1.0, 1.0});
  auto g = T::full({2}, 1.0);
  auto b = T::zeros({2});
  auto y = ops::layer_norm(x, g, b);
  EXPECT_NEAR(y.at(0, 0), -1.0, 1e-4);
  EXPECT_NEAR(y.at(0, 1), 1.0, 1e-4);

  auto c = ops::layer_norm(T::full({1, 4}, 3.7), T::full({4}, 1.0), T::zeros({4}));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(c.at(0, i), 0.0, 1e-12);
}

TEST(PixelShuffle, DefinitionAndInverse) {
  auto x = T::from({4, 1, 1}, {1, 2, 3, 4});
  auto y = ops::pixel_shuffle(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{1, 2, 3, 4}));

  auto id = ops::pixel_shuffle(x, 1);
  EXPECT_EQ(id.values(), x.values());

  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    int c = 1 + static_cast<int>(rng.below(3));
    int s = 1 + static_cast<int>(rng.below(3));
    auto t = gradcheck::detail::random_tensor({c * s * s, 3, 2}, rng);
    auto round = ops::pixel_unshuffle(ops::pixel_shuffle(t, s), s);
    EXPECT_EQ(round.values(), t.values());
  }

  EXPECT_THROW(ops::pixel_shuffle(T::zeros({3, 2, 2}), 2), DimensionError);
}

TEST(Backward, LinearAndQuadratic) {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto x = T::from({3}, {1, 2, 3}, true);
  auto loss = ops::sum(x);
  tape.backward(loss);
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1}));

  Tape<double> tape2;
  Tape<double>::Scope scope2(tape2);
  auto x2 = T::from({3}, {1, 2, 3}, true);
  auto loss2 = ops::sum(ops::mul(x2, x2));
  tape2.backward(loss2);
  EXPECT_EQ(x2.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarLossThrows) {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto x = T::from({2}, {1, 2}, true);
  auto y = ops::scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Backward, AccumulationIsAdditive) {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto x = T::from({2}, {1, 2}, true);
  auto loss = ops::sum(ops::mul(x, x));
  tape.backward(loss);
  auto first = x.grad();
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * first[0]);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2 * first[1]);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  Rng rng(31);
  auto res = gradcheck::check_scalar_fn(
      "composite",
      [](std::vector<T>& l) {
        auto h1 = ops::tanh_(ops::matmul(l[0], l[1]));
        auto h2 = ops::relu(ops::matmul(h1, l[2]));
        auto h3 = ops::matmul(h2, l[3]);
        return ops::sum(ops::mul(h3, h3));
      },
      {gradcheck::detail::random_tensor({2, 3}, rng), gradcheck::detail::random_tensor({3, 4}, rng),
       gradcheck::detail::random_tensor({4, 4}, rng), gradcheck::detail::random_tensor({4, 2}, rng)},
      1e-5);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = T::from({3}, {1, 2, 3}, true);
  std::vector<T> params{p};
  Adam<double> opt({0.1});
  opt.step(params);
  EXPECT_EQ(p.values(), (std::vector<double>{1, 2, 3}));
}

TEST(Adam, FirstStepClosedForm) {
  const double lr = 0.05, g = 0.7, eps = 1e-8;
  auto p = T::scalar(2.0, true);
  p.grad()[0] = g;
  std::vector<T> params{p};
  Adam<double>::Config cfg;
  cfg.lr = lr;
  Adam<double> opt(cfg);
  opt.step(params);
  // After bias correction the first step is lr * g / (|g| + eps).
  double expected = 2.0 - lr * g / (std::abs(g) + eps);
  EXPECT_NEAR(p.values()[0], expected, 1e-12);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(77);
    auto p = gradcheck::detail::random_tensor({4, 4}, rng);
    p.enable_grad();
    std::vector<T> params{p};
    Adam<double> opt({1e-2});
    for (int step = 0; step < 5; ++step) {
      Tape<double> tape;
      Tape<double>::Scope scope(tape);
      p.zero_grad();
      auto loss = ops::sum(ops::mul(p, p));
      tape.backward(loss);
      opt.step(params);
    }
    return p.values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeChangeThrows) {
  auto p = T::scalar(1.0, true);
  std::vector<T> params{p};
  Adam<double> opt;
  opt.step(params);
  std::vector<T> changed{T::from({2}, {1, 2}, true)};
  EXPECT_THROW(opt.step(changed), DimensionError);
}

TEST(Tape, ReplayDeterminism) {
  auto run = [] {
    Rng rng(123);
    auto x = gradcheck::detail::random_tensor({2, 4, 4}, rng);
    auto k = gradcheck::detail::random_tensor({2, 2, 3, 3}, rng);
    k.enable_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto y = ops::relu(ops::conv2d(x, k, 1, 1));
    auto loss = ops::sum(ops::mul(y, y));
    tape.backward(loss);
    auto vals = y.values();
    vals.insert(vals.end(), k.grad().begin(), k.grad().end());
    return vals;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradSuite, AllOpsPassWithin1e4) {
  for (const auto& res : gradcheck::run_standard_suite(7)) {
    EXPECT_TRUE(res.pass) << res.name << " rel err " << res.max_rel_err;
    EXPECT_GE(res.coords, 1u);
  }
}
