#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "urbanmsr/encoders.hpp"
#include "urbanmsr/model.hpp"
#include "urbanmsr/pretrain.hpp"
#include "urbanmsr/tensor.hpp"
#include "urbanmsr/train.hpp"

// Central finite-difference verification of every differentiable operation.
// The numeric side uses only forward evaluations, so it stays independent of
// the backward implementations it checks. Always runs in 64-bit.

namespace umsr::gradcheck {

using T = Tensor<double>;

struct Result {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 1e-4;
  std::size_t coords = 0;
  bool pass = false;
};

// fn maps the leaf tensors to a scalar loss; it must be a pure function of
// the leaf values.
using ScalarFn = std::function<T(std::vector<T>&)>;

inline Result check_scalar_fn(const std::string& name, const ScalarFn& fn,
                              std::vector<T> leaves, double tol = 1e-4, double eps = 1e-5,
                              std::size_t max_coords = 120, std::uint64_t seed = 7) {
  Result res;
  res.name = name;
  res.tol = tol;

  for (auto& l : leaves) {
    l.enable_grad();
    l.zero_grad();
  }
  Tape<double> tape;
  {
    typename Tape<double>::Scope scope(tape);
    T loss = fn(leaves);
    tape.backward(loss);
  }

  // Collect (leaf, coord) pairs, subsample deterministically if large.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t li = 0; li < leaves.size(); ++li)
    for (std::size_t ci = 0; ci < leaves[li].numel(); ++ci) coords.push_back({li, ci});
  if (coords.size() > max_coords) {
    Rng rng = Rng::stream(seed, "gradcheck/" + name);
    rng.shuffle(coords);
    coords.resize(max_coords);
  }

  auto eval = [&](std::vector<T>& ls) {
    // No active tape: pure forward evaluation.
    return fn(ls).item();
  };
  for (auto [li, ci] : coords) {
    double saved = leaves[li].values()[ci];
    leaves[li].values()[ci] = saved + eps;
    double fp = eval(leaves);
    leaves[li].values()[ci] = saved - eps;
    double fm = eval(leaves);
    leaves[li].values()[ci] = saved;
    double numeric = (fp - fm) / (2.0 * eps);
    double analytic = leaves[li].grad()[ci];
    double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    res.max_rel_err = std::max(res.max_rel_err, rel);
  }
  res.coords = coords.size();
  res.pass = res.max_rel_err < tol;
  return res;
}

namespace detail {

inline T random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T t = T::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace detail

// The full per-op suite: basic tensor ops at 1e-5, compositions and model
// pieces at 1e-4.
inline std::vector<Result> run_standard_suite(std::uint64_t seed = 7) {
  std::vector<Result> results;
  Rng rng = Rng::stream(seed, "gradcheck/inputs");

  results.push_back(check_scalar_fn(
      "matmul",
      [](std::vector<T>& l) { return ops::sum(ops::matmul(l[0], l[1])); },
      {detail::random_tensor({3, 4}, rng), detail::random_tensor({4, 2}, rng)}, 1e-5));

  results.push_back(check_scalar_fn(
      "conv2d",
      [](std::vector<T>& l) { return ops::sum(ops::conv2d(l[0], l[1], 1, 1)); },
      {detail::random_tensor({2, 5, 5}, rng), detail::random_tensor({3, 2, 3, 3}, rng)}, 1e-5));

  results.push_back(check_scalar_fn(
      "conv2d_dilated",
      [](std::vector<T>& l) { return ops::sum(ops::conv2d(l[0], l[1], 2, 2)); },
      {detail::random_tensor({1, 6, 6}, rng), detail::random_tensor({2, 1, 3, 3}, rng)}, 1e-5));

  {
    // Coordinates kept away from the integer lattice where bilinear
    // interpolation has kinks.
    T x = detail::random_tensor({2, 4, 4}, rng);
    T px = T::scalar(1.37);
    T py = T::scalar(2.21);
    results.push_back(check_scalar_fn(
        "bilinear_sample",
        [](std::vector<T>& l) {
          return ops::sum(ops::bilinear_sample(l[0], l[1], l[2]));
        },
        {x, px, py}, 1e-5));
  }

  results.push_back(check_scalar_fn(
      "elementwise_chain",
      [](std::vector<T>& l) {
        auto m = ops::mul(ops::add(l[0], l[1]), ops::sub(l[0], l[1]));
        return ops::sum(ops::scale(m, 0.5));
      },
      {detail::random_tensor({3, 3}, rng), detail::random_tensor({3, 3}, rng)}, 1e-5));

  results.push_back(check_scalar_fn(
      "relu",
      [](std::vector<T>& l) { return ops::sum(ops::relu(l[0])); },
      // Values bounded away from the kink at zero.
      {detail::random_tensor({4, 4}, rng, 0.2, 1.0)}, 1e-5));

  results.push_back(check_scalar_fn(
      "tanh",
      [](std::vector<T>& l) { return ops::sum(ops::tanh_(l[0])); },
      {detail::random_tensor({4, 4}, rng)}, 1e-5));

  results.push_back(check_scalar_fn(
      "exp_log",
      [](std::vector<T>& l) {
        return ops::sum(ops::log_(ops::exp_(ops::scale(l[0], 0.5))));
      },
      {detail::random_tensor({3, 3}, rng)}, 1e-5));

  results.push_back(check_scalar_fn(
      "softmax",
      [](std::vector<T>& l) {
        auto s = ops::softmax(l[0], 1);
        return ops::sum(ops::mul(s, s));
      },
      {detail::random_tensor({3, 5}, rng, -2.0, 2.0)}, 1e-5));

  results.push_back(check_scalar_fn(
      "layer_norm",
      [](std::vector<T>& l) {
        auto y = ops::layer_norm(l[0], l[1], l[2]);
        return ops::sum(ops::mul(y, y));
      },
      {detail::random_tensor({4, 6}, rng), detail::random_tensor({6}, rng, 0.5, 1.5),
       detail::random_tensor({6}, rng)},
      1e-5));

  results.push_back(check_scalar_fn(
      "pixel_shuffle",
      [](std::vector<T>& l) {
        auto y = ops::pixel_shuffle(l[0], 2);
        return ops::sum(ops::mul(y, y));
      },
      {detail::random_tensor({8, 3, 3}, rng)}, 1e-5));

  {
    // Offsets biased off the integer lattice.
    T x = detail::random_tensor({2, 5, 5}, rng);
    T w = detail::random_tensor({2, 2, 3, 3}, rng);
    T off = detail::random_tensor({18, 5, 5}, rng, 0.15, 0.45);
    results.push_back(check_scalar_fn(
        "deform_conv",
        [](std::vector<T>& l) {
          return ops::sum(ops::deform_conv(l[0], l[1], l[2], 1, 1));
        },
        {x, w, off}, 1e-4));
  }

  results.push_back(check_scalar_fn(
      "deformable_layer",
      [](std::vector<T>& l) {
        DeformableConvLayer<double> layer;
        layer.kernel = 3;
        layer.dilation = 1;
        layer.pad = 1;
        layer.off_w = l[1];
        layer.off_b = l[2];
        layer.w = l[3];
        layer.b = l[4];
        auto y = layer.forward(l[0]);
        return ops::sum(ops::mul(y, y));
      },
      {detail::random_tensor({2, 4, 4}, rng), detail::random_tensor({18, 2, 3, 3}, rng, -0.05, 0.05),
       detail::random_tensor({18}, rng, 0.1, 0.3), detail::random_tensor({2, 2, 3, 3}, rng),
       detail::random_tensor({2}, rng)},
      1e-4));

  results.push_back(check_scalar_fn(
      "mha",
      [](std::vector<T>& l) {
        auto z = mha_forward(l[0], l[1], l[2], l[3], l[4], 2);
        return ops::sum(ops::mul(z, z));
      },
      {detail::random_tensor({6, 4}, rng), detail::random_tensor({4, 4}, rng),
       detail::random_tensor({4, 4}, rng), detail::random_tensor({4, 4}, rng),
       detail::random_tensor({4, 4}, rng)},
      1e-4));

  results.push_back(check_scalar_fn(
      "attention_block",
      [](std::vector<T>& l) {
        AttentionBlock<double> b;
        b.heads = 2;
        b.wq = l[1];
        b.wk = l[2];
        b.wv = l[3];
        b.wo = l[4];
        b.ln_gamma = l[5];
        b.ln_beta = l[6];
        auto y = b.forward(l[0]);
        return ops::sum(ops::mul(y, y));
      },
      {detail::random_tensor({5, 4}, rng), detail::random_tensor({4, 4}, rng),
       detail::random_tensor({4, 4}, rng), detail::random_tensor({4, 4}, rng),
       detail::random_tensor({4, 4}, rng), detail::random_tensor({4}, rng, 0.5, 1.5),
       detail::random_tensor({4}, rng)},
      1e-4));

  {
    // Three-layer composite: conv -> relu -> matmul over flattened features.
    T x = detail::random_tensor({1, 4, 4}, rng, 0.2, 1.0);
    T k = detail::random_tensor({2, 1, 3, 3}, rng);
    T w = detail::random_tensor({32, 3}, rng);
    results.push_back(check_scalar_fn(
        "composite_3layer",
        [](std::vector<T>& l) {
          auto h = ops::relu(ops::conv2d(l[0], l[1], 1, 1));
          auto flat = ops::reshape(h, {1, static_cast<int>(h.numel())});
          auto y = ops::matmul(flat, l[2]);
          return ops::sum(ops::mul(y, y));
        },
        {x, k, w}, 1e-5));
  }

  {
    std::vector<T> leaves;
    leaves.push_back(detail::random_tensor({6}, rng));  // anchor
    for (int i = 0; i < 3; ++i) leaves.push_back(detail::random_tensor({6}, rng));
    for (int i = 0; i < 3; ++i) leaves.push_back(detail::random_tensor({6}, rng));
    results.push_back(check_scalar_fn(
        "contrastive_loss_exp",
        [](std::vector<T>& l) {
          std::vector<T> pos(l.begin() + 1, l.begin() + 4);
          std::vector<T> neg(l.begin() + 4, l.end());
          return contrastive_loss(l[0], pos, neg, Similarity::ExpInner, 0.5);
        },
        leaves, 1e-4));
    // Raw mode needs positive similarity sums; shift everything positive.
    for (auto& t : leaves)
      for (auto& v : t.values()) v = std::abs(v) + 0.2;
    results.push_back(check_scalar_fn(
        "contrastive_loss_raw",
        [](std::vector<T>& l) {
          std::vector<T> pos(l.begin() + 1, l.begin() + 4);
          std::vector<T> neg(l.begin() + 4, l.end());
          return contrastive_loss(l[0], pos, neg, Similarity::RawInner, 0.5);
        },
        leaves, 1e-4));
  }

  results.push_back(check_scalar_fn(
      "feature_diff_loss",
      [](std::vector<T>& l) {
        return feature_diff_loss(l[0], l[1], 1.0, DiffLossForm::PenalizeSimilarity);
      },
      // Positive features keep tanh(inner) away from the ReLU kink.
      {detail::random_tensor({3, 3, 3}, rng, 0.2, 1.0),
       detail::random_tensor({3, 3, 3}, rng, 0.2, 1.0)},
      1e-4));

  results.push_back(check_scalar_fn(
      "total_loss",
      [](std::vector<T>& l) {
        TrainConfig cfg;
        cfg.lambda = 0.3;
        cfg.alpha = 1.0;
        cfg.diff_loss = DiffLossForm::PenalizeSimilarity;
        return total_loss(l[0], l[1], l[2], l[3], cfg);
      },
      {detail::random_tensor({1, 4, 4}, rng), detail::random_tensor({1, 4, 4}, rng),
       detail::random_tensor({2, 2, 2}, rng, 0.2, 1.0),
       detail::random_tensor({2, 2, 2}, rng, 0.2, 1.0)},
      1e-4));

  results.push_back(check_scalar_fn(
      "m2_normalize",
      [](std::vector<T>& l) {
        auto y = m2_normalize(l[0], l[1], 2);
        return ops::sum(ops::mul(y, y));
      },
      {detail::random_tensor({4, 3, 3}, rng), detail::random_tensor({3, 3}, rng, 0.5, 2.0)},
      1e-4));

  return results;
}

// Exact-equivalence checks that are not finite-difference based.
struct DegeneracyResult {
  std::string name;
  double max_abs_err = 0.0;
  double tol = 1e-6;
  bool pass = false;
};

// Zero offsets reduce deformable convolution to the standard convolution.
inline DegeneracyResult check_zero_offset_degeneracy(std::uint64_t seed, int trials = 100) {
  DegeneracyResult res;
  res.name = "deform_conv_zero_offset";
  Rng rng = Rng::stream(seed, "gradcheck/degeneracy");
  for (int trial = 0; trial < trials; ++trial) {
    T x = detail::random_tensor({2, 6, 6}, rng);
    T w = detail::random_tensor({3, 2, 3, 3}, rng);
    T off = T::zeros({18, 6, 6});
    auto a = ops::deform_conv(x, w, off, 1, 1);
    auto b = ops::conv2d(x, w, 1, 1);
    for (std::size_t i = 0; i < a.numel(); ++i)
      res.max_abs_err = std::max(res.max_abs_err, std::abs(a.values()[i] - b.values()[i]));
  }
  res.pass = res.max_abs_err < res.tol;
  return res;
}

// Zero queries make every attention row uniform: with identity value/merge
// projections each output token equals the mean over all positions.
inline DegeneracyResult check_zero_query_mha(std::uint64_t seed, int trials = 20) {
  DegeneracyResult res;
  res.name = "mha_zero_query_mean_pooling";
  Rng rng = Rng::stream(seed, "gradcheck/mha_degeneracy");
  const int n = 6, d = 4;
  T eye = T::zeros({d, d});
  for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  for (int trial = 0; trial < trials; ++trial) {
    T seq = detail::random_tensor({n, d}, rng);
    T zero = T::zeros({d, d});
    auto z = mha_forward(seq, zero, zero, eye, eye, 2);
    for (int j = 0; j < d; ++j) {
      double mean = 0.0;
      for (int i = 0; i < n; ++i) mean += seq.at(i, j);
      mean /= n;
      for (int i = 0; i < n; ++i)
        res.max_abs_err = std::max(res.max_abs_err, std::abs(z.at(i, j) - mean));
    }
  }
  res.pass = res.max_abs_err < res.tol;
  return res;
}

inline std::vector<DegeneracyResult> run_degeneracy_suite(std::uint64_t seed = 7) {
  return {check_zero_offset_degeneracy(seed), check_zero_query_mha(seed)};
}

}  // namespace umsr::gradcheck
