#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "urbanmsr/errors.hpp"
#include "urbanmsr/rng.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation on an
// explicit tape, plus the Adam update. Everything downstream builds on this.

namespace umsr {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
inline std::uint64_t next_tensor_id() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // same length as val when grads are tracked, else empty
  bool requires_grad = false;
  std::uint64_t id = 0;
};

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return build(std::move(shape), {}, requires_grad);
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = build(std::move(shape), {}, requires_grad);
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> vals, bool requires_grad = false) {
    if (shape_numel(shape) != vals.size())
      throw DimensionError("tensor: " + std::to_string(vals.size()) +
                           " values do not fill shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<TensorNode<S>>();
    t.n_->shape = std::move(shape);
    t.n_->val = std::move(vals);
    t.n_->id = detail::next_tensor_id();
    if (requires_grad) t.enable_grad();
    return t;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return n_->val.size(); }
  std::uint64_t id() const { return n_->id; }

  std::vector<S>& values() { return n_->val; }
  const std::vector<S>& values() const { return n_->val; }
  std::vector<S>& grad() { return n_->grad; }
  const std::vector<S>& grad() const { return n_->grad; }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  // Marks a leaf as trainable and allocates its (zero) gradient buffer.
  Tensor& enable_grad() {
    n_->requires_grad = true;
    if (n_->grad.size() != n_->val.size()) n_->grad.assign(n_->val.size(), S(0));
    return *this;
  }

  void zero_grad() {
    if (n_->requires_grad) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw UsageError("item: tensor has " + std::to_string(numel()) + " elements");
    return n_->val[0];
  }

  S at(int i) const { return n_->val[static_cast<std::size_t>(i)]; }
  S at(int i, int j) const { return n_->val[idx2(i, j)]; }
  S at(int i, int j, int k) const { return n_->val[idx3(i, j, k)]; }
  S at(int i, int j, int k, int l) const { return n_->val[idx4(i, j, k, l)]; }
  S& at(int i) { return n_->val[static_cast<std::size_t>(i)]; }
  S& at(int i, int j) { return n_->val[idx2(i, j)]; }
  S& at(int i, int j, int k) { return n_->val[idx3(i, j, k)]; }
  S& at(int i, int j, int k, int l) { return n_->val[idx4(i, j, k, l)]; }

  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * dim(1) + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l;
  }

  // Deep copy of values (no grad history).
  Tensor clone_values() const {
    return Tensor::from(n_->shape, n_->val);
  }

  std::shared_ptr<TensorNode<S>> node() const { return n_; }

 private:
  static Tensor build(Shape shape, std::vector<S> vals, bool requires_grad) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<S>>();
    std::size_t n = shape_numel(shape);
    t.n_->shape = std::move(shape);
    t.n_->val.assign(n, S(0));
    t.n_->id = detail::next_tensor_id();
    if (requires_grad) t.enable_grad();
    return t;
  }

  std::shared_ptr<TensorNode<S>> n_;
};

// Recorder for reverse-mode differentiation. Ops append entries in forward
// order, which makes the list topologically ordered by construction; backward
// walks it once in reverse. Activation is scoped and thread-local.
template <class S>
class Tape {
 public:
  struct Entry {
    const char* op;
    std::vector<std::uint64_t> inputs;
    Tensor<S> output;
    std::function<void()> pull;  // adds input grads from the output grad
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& t) { stack().push_back(&t); }
    ~Scope() { stack().pop_back(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
  };

  static Tape* active() {
    return stack().empty() ? nullptr : stack().back();
  }

  void record(const char* op, std::vector<std::uint64_t> inputs, Tensor<S> output,
              std::function<void()> pull) {
    entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(pull)});
  }

  std::size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input. Leaf
  // accumulation is additive across calls; intermediate (entry-output) grads
  // are reset per traversal so repeated backward passes stay independent.
  void backward(Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw UsageError("backward: loss was not produced on the active tape");
    for (auto& e : entries_) e.output.zero_grad();
    loss.grad()[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->pull();
  }

 private:
  static std::vector<Tape*>& stack() {
    static thread_local std::vector<Tape*> s;
    return s;
  }

  std::vector<Entry> entries_;
};

namespace ops {

namespace detail {

template <class S>
void expect_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <class S>
void expect_rank(const Tensor<S>& t, int rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
}

// Records `pull` if a tape is active and any input requires grad; in that
// case the output starts tracking gradients too.
template <class S>
void record(const char* op, std::initializer_list<Tensor<S>> inputs, Tensor<S>& out,
            std::function<void()> pull) {
  Tape<S>* tape = Tape<S>::active();
  if (!tape) return;
  bool any = false;
  std::vector<std::uint64_t> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) {
    any = any || t.requires_grad();
    ids.push_back(t.id());
  }
  if (!any) return;
  out.enable_grad();
  tape->record(op, std::move(ids), out, std::move(pull));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  detail::expect_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
  detail::record("add", {a, b}, out, [a, b, out]() mutable {
    if (a.requires_grad())
      for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < out.numel(); ++i) b.grad()[i] += out.grad()[i];
  });
  return out;
}

template <class S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
  detail::expect_same_shape(a, b, "sub");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
  detail::record("sub", {a, b}, out, [a, b, out]() mutable {
    if (a.requires_grad())
      for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < out.numel(); ++i) b.grad()[i] -= out.grad()[i];
  });
  return out;
}

template <class S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  detail::expect_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  detail::record("mul", {a, b}, out, [a, b, out]() mutable {
    if (a.requires_grad())
      for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * b.values()[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < out.numel(); ++i) b.grad()[i] += out.grad()[i] * a.values()[i];
  });
  return out;
}

// out = a * mul_c + add_c with constant scalars.
template <class S>
Tensor<S> affine(Tensor<S> a, S mul_c, S add_c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * mul_c + add_c;
  detail::record("affine", {a}, out, [a, out, mul_c]() mutable {
    for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * mul_c;
  });
  return out;
}

template <class S>
Tensor<S> scale(Tensor<S> a, S c) {
  return affine(a, c, S(0));
}

template <class S>
Tensor<S> neg(Tensor<S> a) {
  return scale(a, S(-1));
}

template <class S>
Tensor<S> relu(Tensor<S> a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.values()[i] = a.values()[i] > S(0) ? a.values()[i] : S(0);
  // Subgradient at 0 is taken as 0.
  detail::record("relu", {a}, out, [a, out]() mutable {
    for (std::size_t i = 0; i < out.numel(); ++i)
      if (a.values()[i] > S(0)) a.grad()[i] += out.grad()[i];
  });
  return out;
}

template <class S>
Tensor<S> tanh_(Tensor<S> a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = std::tanh(a.values()[i]);
  detail::record("tanh", {a}, out, [a, out]() mutable {
    for (std::size_t i = 0; i < out.numel(); ++i) {
      S y = out.values()[i];
      a.grad()[i] += out.grad()[i] * (S(1) - y * y);
    }
  });
  return out;
}

template <class S>
Tensor<S> exp_(Tensor<S> a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = std::exp(a.values()[i]);
  detail::record("exp", {a}, out, [a, out]() mutable {
    for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * out.values()[i];
  });
  return out;
}

template <class S>
Tensor<S> log_(Tensor<S> a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!(a.values()[i] > S(0)))
      throw NumericError("log: non-positive argument " + std::to_string(a.values()[i]));
    out.values()[i] = std::log(a.values()[i]);
  }
  detail::record("log", {a}, out, [a, out]() mutable {
    for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] / a.values()[i];
  });
  return out;
}

// ---- reductions ------------------------------------------------------------

template <class S>
Tensor<S> sum(Tensor<S> a) {
  S acc = S(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.values()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::record("sum", {a}, out, [a, out]() mutable {
    S g = out.grad()[0];
    for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += g;
  });
  return out;
}

template <class S>
Tensor<S> mean(Tensor<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

template <class S>
Tensor<S> dot(Tensor<S> a, Tensor<S> b) {
  return sum(mul(a, b));
}

// ---- linear algebra --------------------------------------------------------

template <class S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  detail::expect_rank(a, 2, "matmul");
  detail::expect_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      S av = a.at(i, p);
      for (int j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
    }
  detail::record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
    if (a.requires_grad()) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          S g = out.grad()[out.idx2(i, j)];
          for (int p = 0; p < k; ++p) a.grad()[a.idx2(i, p)] += g * b.at(p, j);
        }
    }
    if (b.requires_grad()) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          S av = a.at(i, p);
          for (int j = 0; j < n; ++j) b.grad()[b.idx2(p, j)] += av * out.grad()[out.idx2(i, j)];
        }
    }
  });
  return out;
}

template <class S>
Tensor<S> transpose(Tensor<S> a) {
  detail::expect_rank(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  detail::record("transpose", {a}, out, [a, out, m, n]() mutable {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a.grad()[a.idx2(i, j)] += out.grad()[out.idx2(j, i)];
  });
  return out;
}

// Contiguous row-major relabeling; gradient passes through flat.
template <class S>
Tensor<S> reshape(Tensor<S> a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape), a.values());
  detail::record("reshape", {a}, out, [a, out]() mutable {
    for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
  });
  return out;
}

// Columns [c0, c1) of a 2-D tensor.
template <class S>
Tensor<S> col_slice(Tensor<S> a, int c0, int c1) {
  detail::expect_rank(a, 2, "col_slice");
  if (c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw DimensionError("col_slice: bad column range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(a.shape()));
  const int m = a.dim(0), w = c1 - c0;
  Tensor<S> out = Tensor<S>::zeros({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = a.at(i, c0 + j);
  detail::record("col_slice", {a}, out, [a, out, m, w, c0]() mutable {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) a.grad()[a.idx2(i, c0 + j)] += out.grad()[out.idx2(i, j)];
  });
  return out;
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty input");
  const int m = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    detail::expect_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    total += p.dim(1);
  }
  Tensor<S> out = Tensor<S>::zeros({m, total});
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.dim(1); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.dim(1);
  }
  Tape<S>* tape = Tape<S>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    out.enable_grad();
    std::vector<std::uint64_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    auto parts_copy = parts;
    tape->record("concat_cols", std::move(ids), out, [parts_copy, out, m]() mutable {
      int off = 0;
      for (auto& p : parts_copy) {
        if (p.requires_grad())
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < p.dim(1); ++j)
              p.grad()[p.idx2(i, j)] += out.grad()[out.idx2(i, off + j)];
        off += p.dim(1);
      }
    });
  }
  return out;
}

// ---- convolution and sampling ---------------------------------------------

// Cross-correlation with zero padding, stride 1. x: [Cin,H,W], k: [Cout,Cin,kh,kw].
template <class S>
Tensor<S> conv2d(Tensor<S> x, Tensor<S> k, int padding = 0, int dilation = 1) {
  detail::expect_rank(x, 3, "conv2d");
  detail::expect_rank(k, 4, "conv2d");
  if (x.dim(0) != k.dim(1))
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(0)) +
                         " vs kernel expects " + std::to_string(k.dim(1)));
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = h + 2 * padding - dilation * (kh - 1);
  const int ow = w + 2 * padding - dilation * (kw - 1);
  if (oh <= 0 || ow <= 0)
    throw DimensionError("conv2d: kernel " + shape_str(k.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({cout, oh, ow});
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        S acc = S(0);
        for (int ci = 0; ci < cin; ++ci)
          for (int a = 0; a < kh; ++a) {
            int r = i - padding + dilation * a;
            if (r < 0 || r >= h) continue;
            for (int b = 0; b < kw; ++b) {
              int c = j - padding + dilation * b;
              if (c < 0 || c >= w) continue;
              acc += k.at(co, ci, a, b) * x.at(ci, r, c);
            }
          }
        out.at(co, i, j) = acc;
      }
  detail::record("conv2d", {x, k}, out,
                 [x, k, out, cin, h, w, cout, kh, kw, oh, ow, padding, dilation]() mutable {
    for (int co = 0; co < cout; ++co)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          S g = out.grad()[out.idx3(co, i, j)];
          if (g == S(0)) continue;
          for (int ci = 0; ci < cin; ++ci)
            for (int a = 0; a < kh; ++a) {
              int r = i - padding + dilation * a;
              if (r < 0 || r >= h) continue;
              for (int b = 0; b < kw; ++b) {
                int c = j - padding + dilation * b;
                if (c < 0 || c >= w) continue;
                if (x.requires_grad()) x.grad()[x.idx3(ci, r, c)] += g * k.at(co, ci, a, b);
                if (k.requires_grad()) k.grad()[k.idx4(co, ci, a, b)] += g * x.at(ci, r, c);
              }
            }
        }
  });
  return out;
}

// Per-channel bias over a [C,H,W] map.
template <class S>
Tensor<S> add_bias(Tensor<S> x, Tensor<S> b) {
  detail::expect_rank(x, 3, "add_bias");
  detail::expect_rank(b, 1, "add_bias");
  if (b.dim(0) != x.dim(0))
    throw DimensionError("add_bias: " + std::to_string(b.dim(0)) + " biases for " +
                         std::to_string(x.dim(0)) + " channels");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at(ci, i, j) = x.at(ci, i, j) + b.at(ci);
  detail::record("add_bias", {x, b}, out, [x, b, out, c, h, w]() mutable {
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          S g = out.grad()[out.idx3(ci, i, j)];
          if (x.requires_grad()) x.grad()[x.idx3(ci, i, j)] += g;
          if (b.requires_grad()) b.grad()[ci] += g;
        }
  });
  return out;
}

namespace detail {

// Shared bilinear interpolation weights with zero extension outside the grid.
// Returns value and, on request, the coordinate derivatives.
template <class S>
struct BilinearTap {
  int r0, c0;
  S fr, fc;  // fractional parts
};

template <class S>
BilinearTap<S> bilinear_tap(S pr, S pc) {
  S fr0 = std::floor(pr), fc0 = std::floor(pc);
  return {static_cast<int>(fr0), static_cast<int>(fc0), pr - fr0, pc - fc0};
}

template <class S>
S grid_read(Tensor<S> x, int c, int i, int j) {
  if (i < 0 || i >= x.dim(1) || j < 0 || j >= x.dim(2)) return S(0);
  return x.at(c, i, j);
}

}  // namespace detail

// Bilinear read of all channels at fractional (row, col); zero outside the
// grid; differentiable with respect to the map and both coordinates.
// px, py are 1-element tensors.
template <class S>
Tensor<S> bilinear_sample(Tensor<S> x, Tensor<S> px, Tensor<S> py) {
  detail::expect_rank(x, 3, "bilinear_sample");
  if (px.numel() != 1 || py.numel() != 1)
    throw DimensionError("bilinear_sample: coordinates must be scalars");
  const int c = x.dim(0);
  const S pr = px.values()[0], pc = py.values()[0];
  auto tap = detail::bilinear_tap(pr, pc);
  Tensor<S> out = Tensor<S>::zeros({c});
  auto w00 = (S(1) - tap.fr) * (S(1) - tap.fc);
  auto w01 = (S(1) - tap.fr) * tap.fc;
  auto w10 = tap.fr * (S(1) - tap.fc);
  auto w11 = tap.fr * tap.fc;
  for (int ci = 0; ci < c; ++ci) {
    out.at(ci) = w00 * detail::grid_read(x, ci, tap.r0, tap.c0) +
                 w01 * detail::grid_read(x, ci, tap.r0, tap.c0 + 1) +
                 w10 * detail::grid_read(x, ci, tap.r0 + 1, tap.c0) +
                 w11 * detail::grid_read(x, ci, tap.r0 + 1, tap.c0 + 1);
  }
  detail::record("bilinear_sample", {x, px, py}, out, [x, px, py, out, c, tap]() mutable {
    const S fr = tap.fr, fc = tap.fc;
    auto scatter = [&](int ci, int di, int dj, S w, S g) {
      int i = tap.r0 + di, j = tap.c0 + dj;
      if (i < 0 || i >= x.dim(1) || j < 0 || j >= x.dim(2)) return;
      x.grad()[x.idx3(ci, i, j)] += w * g;
    };
    for (int ci = 0; ci < c; ++ci) {
      S g = out.grad()[ci];
      if (g == S(0)) continue;
      S v00 = detail::grid_read(x, ci, tap.r0, tap.c0);
      S v01 = detail::grid_read(x, ci, tap.r0, tap.c0 + 1);
      S v10 = detail::grid_read(x, ci, tap.r0 + 1, tap.c0);
      S v11 = detail::grid_read(x, ci, tap.r0 + 1, tap.c0 + 1);
      if (x.requires_grad()) {
        scatter(ci, 0, 0, (S(1) - fr) * (S(1) - fc), g);
        scatter(ci, 0, 1, (S(1) - fr) * fc, g);
        scatter(ci, 1, 0, fr * (S(1) - fc), g);
        scatter(ci, 1, 1, fr * fc, g);
      }
      if (px.requires_grad())
        px.grad()[0] += g * ((S(1) - fc) * (v10 - v00) + fc * (v11 - v01));
      if (py.requires_grad())
        py.grad()[0] += g * ((S(1) - fr) * (v01 - v00) + fr * (v11 - v10));
    }
  });
  return out;
}

// Deformable convolution: every kernel tap reads the input at its regular
// position displaced by a learned fractional offset, via bilinear
// interpolation with zero extension. x: [Cin,H,W], w: [Cout,Cin,kh,kw],
// offsets: [2*kh*kw, OH, OW] with channels (2n, 2n+1) = (row, col) shift of
// tap n. Differentiable in x, w and offsets.
template <class S>
Tensor<S> deform_conv(Tensor<S> x, Tensor<S> w, Tensor<S> offsets,
                      int padding = 1, int dilation = 1) {
  detail::expect_rank(x, 3, "deform_conv");
  detail::expect_rank(w, 4, "deform_conv");
  detail::expect_rank(offsets, 3, "deform_conv");
  if (x.dim(0) != w.dim(1))
    throw DimensionError("deform_conv: input channels " + std::to_string(x.dim(0)) +
                         " vs kernel expects " + std::to_string(w.dim(1)));
  const int cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int taps = kh * kw;
  const int oh = h + 2 * padding - dilation * (kh - 1);
  const int ow = ww + 2 * padding - dilation * (kw - 1);
  if (oh <= 0 || ow <= 0)
    throw DimensionError("deform_conv: kernel larger than padded input");
  if (offsets.dim(0) != 2 * taps || offsets.dim(1) != oh || offsets.dim(2) != ow)
    throw DimensionError("deform_conv: offsets " + shape_str(offsets.shape()) + ", expected [" +
                         std::to_string(2 * taps) + "x" + std::to_string(oh) + "x" +
                         std::to_string(ow) + "]");

  Tensor<S> out = Tensor<S>::zeros({cout, oh, ow});
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      for (int n = 0; n < taps; ++n) {
        int a = n / kw, b = n % kw;
        S pr = static_cast<S>(i - padding + dilation * a) + offsets.at(2 * n, i, j);
        S pc = static_cast<S>(j - padding + dilation * b) + offsets.at(2 * n + 1, i, j);
        auto tap = detail::bilinear_tap(pr, pc);
        S w00 = (S(1) - tap.fr) * (S(1) - tap.fc), w01 = (S(1) - tap.fr) * tap.fc;
        S w10 = tap.fr * (S(1) - tap.fc), w11 = tap.fr * tap.fc;
        for (int ci = 0; ci < cin; ++ci) {
          S v = w00 * detail::grid_read(x, ci, tap.r0, tap.c0) +
                w01 * detail::grid_read(x, ci, tap.r0, tap.c0 + 1) +
                w10 * detail::grid_read(x, ci, tap.r0 + 1, tap.c0) +
                w11 * detail::grid_read(x, ci, tap.r0 + 1, tap.c0 + 1);
          for (int co = 0; co < cout; ++co) out.at(co, i, j) += w.at(co, ci, a, b) * v;
        }
      }
    }

  detail::record("deform_conv", {x, w, offsets}, out,
                 [x, w, offsets, out, cin, cout, kh, kw, taps, oh, ow, padding,
                  dilation]() mutable {
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        for (int n = 0; n < taps; ++n) {
          int a = n / kw, b = n % kw;
          S pr = static_cast<S>(i - padding + dilation * a) + offsets.at(2 * n, i, j);
          S pc = static_cast<S>(j - padding + dilation * b) + offsets.at(2 * n + 1, i, j);
          auto tap = detail::bilinear_tap(pr, pc);
          S fr = tap.fr, fc = tap.fc;
          for (int ci = 0; ci < cin; ++ci) {
            S v00 = detail::grid_read(x, ci, tap.r0, tap.c0);
            S v01 = detail::grid_read(x, ci, tap.r0, tap.c0 + 1);
            S v10 = detail::grid_read(x, ci, tap.r0 + 1, tap.c0);
            S v11 = detail::grid_read(x, ci, tap.r0 + 1, tap.c0 + 1);
            S v = (S(1) - fr) * (S(1) - fc) * v00 + (S(1) - fr) * fc * v01 +
                  fr * (S(1) - fc) * v10 + fr * fc * v11;
            // gs = dL/d(sampled value for this ci, tap, position)
            S gs = S(0);
            for (int co = 0; co < cout; ++co) {
              S g = out.grad()[out.idx3(co, i, j)];
              if (g == S(0)) continue;
              if (w.requires_grad()) w.grad()[w.idx4(co, ci, a, b)] += g * v;
              gs += g * w.at(co, ci, a, b);
            }
            if (gs == S(0)) continue;
            if (x.requires_grad()) {
              auto scatter = [&](int di, int dj, S wt) {
                int r = tap.r0 + di, c = tap.c0 + dj;
                if (r < 0 || r >= x.dim(1) || c < 0 || c >= x.dim(2)) return;
                x.grad()[x.idx3(ci, r, c)] += wt * gs;
              };
              scatter(0, 0, (S(1) - fr) * (S(1) - fc));
              scatter(0, 1, (S(1) - fr) * fc);
              scatter(1, 0, fr * (S(1) - fc));
              scatter(1, 1, fr * fc);
            }
            if (offsets.requires_grad()) {
              offsets.grad()[offsets.idx3(2 * n, i, j)] +=
                  gs * ((S(1) - fc) * (v10 - v00) + fc * (v11 - v01));
              offsets.grad()[offsets.idx3(2 * n + 1, i, j)] +=
                  gs * ((S(1) - fr) * (v01 - v00) + fr * (v11 - v10));
            }
          }
        }
  });
  return out;
}

// ---- normalization ---------------------------------------------------------

// Softmax along one axis, computed with max subtraction.
template <class S>
Tensor<S> softmax(Tensor<S> x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  const int n = x.dim(axis);
  // Walk the tensor as [outer, n, inner].
  std::size_t inner = 1, outer = 1;
  for (int d = axis + 1; d < x.rank(); ++d) inner *= static_cast<std::size_t>(x.dim(d));
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(x.dim(d));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * n * inner + in;
      S mx = x.values()[base];
      for (int i = 1; i < n; ++i) mx = std::max(mx, x.values()[base + i * inner]);
      S total = S(0);
      for (int i = 0; i < n; ++i) {
        S e = std::exp(x.values()[base + i * inner] - mx);
        out.values()[base + i * inner] = e;
        total += e;
      }
      for (int i = 0; i < n; ++i) out.values()[base + i * inner] /= total;
    }
  detail::record("softmax", {x}, out, [x, out, n, inner, outer]() mutable {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        std::size_t base = o * n * inner + in;
        S dotv = S(0);
        for (int i = 0; i < n; ++i)
          dotv += out.grad()[base + i * inner] * out.values()[base + i * inner];
        for (int i = 0; i < n; ++i) {
          std::size_t k = base + i * inner;
          x.grad()[k] += out.values()[k] * (out.grad()[k] - dotv);
        }
      }
  });
  return out;
}

// Layer normalization over the last axis with affine parameters.
template <class S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta,
                     S eps = S(1e-5)) {
  if (x.rank() < 1) throw DimensionError("layer_norm: rank-0 input");
  const int d = x.dim(x.rank() - 1);
  if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d))
    throw DimensionError("layer_norm: affine parameters must have length " + std::to_string(d));
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> mu(rows), inv_sd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t base = r * d;
    S m = S(0);
    for (int i = 0; i < d; ++i) m += x.values()[base + i];
    m /= static_cast<S>(d);
    S var = S(0);
    for (int i = 0; i < d; ++i) {
      S t = x.values()[base + i] - m;
      var += t * t;
    }
    var /= static_cast<S>(d);
    mu[r] = m;
    inv_sd[r] = S(1) / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) {
      S xhat = (x.values()[base + i] - m) * inv_sd[r];
      out.values()[base + i] = gamma.at(i) * xhat + beta.at(i);
    }
  }
  detail::record("layer_norm", {x, gamma, beta}, out,
                 [x, gamma, beta, out, d, rows, mu, inv_sd]() mutable {
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t base = r * d;
      S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
      for (int i = 0; i < d; ++i) {
        S xhat = (x.values()[base + i] - mu[r]) * inv_sd[r];
        S dy = out.grad()[base + i];
        S dxhat = dy * gamma.at(i);
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        if (gamma.requires_grad()) gamma.grad()[i] += dy * xhat;
        if (beta.requires_grad()) beta.grad()[i] += dy;
      }
      if (x.requires_grad()) {
        for (int i = 0; i < d; ++i) {
          S xhat = (x.values()[base + i] - mu[r]) * inv_sd[r];
          S dxhat = out.grad()[base + i] * gamma.at(i);
          x.grad()[base + i] +=
              inv_sd[r] * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / static_cast<S>(d));
        }
      }
    }
  });
  return out;
}

// ---- rearrangement ---------------------------------------------------------

// [S^2*C, H, W] -> [C, S*H, S*W]: channel c*S^2 + s*S + t at (i,j) lands on
// channel c at (S*i+s, S*j+t).
template <class S>
Tensor<S> pixel_shuffle(Tensor<S> x, int factor) {
  detail::expect_rank(x, 3, "pixel_shuffle");
  if (factor < 1) throw DimensionError("pixel_shuffle: factor must be >= 1");
  const int s2 = factor * factor;
  if (x.dim(0) % s2 != 0)
    throw DimensionError("pixel_shuffle: " + std::to_string(x.dim(0)) +
                         " channels not divisible by " + std::to_string(s2));
  const int c = x.dim(0) / s2, h = x.dim(1), w = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros({c, factor * h, factor * w});
  for (int ci = 0; ci < c; ++ci)
    for (int si = 0; si < factor; ++si)
      for (int ti = 0; ti < factor; ++ti)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            out.at(ci, factor * i + si, factor * j + ti) =
                x.at(ci * s2 + si * factor + ti, i, j);
  detail::record("pixel_shuffle", {x}, out, [x, out, c, h, w, factor, s2]() mutable {
    for (int ci = 0; ci < c; ++ci)
      for (int si = 0; si < factor; ++si)
        for (int ti = 0; ti < factor; ++ti)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              x.grad()[x.idx3(ci * s2 + si * factor + ti, i, j)] +=
                  out.grad()[out.idx3(ci, factor * i + si, factor * j + ti)];
  });
  return out;
}

template <class S>
Tensor<S> pixel_unshuffle(Tensor<S> x, int factor) {
  detail::expect_rank(x, 3, "pixel_unshuffle");
  if (factor < 1) throw DimensionError("pixel_unshuffle: factor must be >= 1");
  if (x.dim(1) % factor != 0 || x.dim(2) % factor != 0)
    throw DimensionError("pixel_unshuffle: spatial dims " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(factor));
  const int c = x.dim(0), h = x.dim(1) / factor, w = x.dim(2) / factor;
  const int s2 = factor * factor;
  Tensor<S> out = Tensor<S>::zeros({c * s2, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int si = 0; si < factor; ++si)
      for (int ti = 0; ti < factor; ++ti)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            out.at(ci * s2 + si * factor + ti, i, j) =
                x.at(ci, factor * i + si, factor * j + ti);
  detail::record("pixel_unshuffle", {x}, out, [x, out, c, h, w, factor, s2]() mutable {
    for (int ci = 0; ci < c; ++ci)
      for (int si = 0; si < factor; ++si)
        for (int ti = 0; ti < factor; ++ti)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              x.grad()[x.idx3(ci, factor * i + si, factor * j + ti)] +=
                  out.grad()[out.idx3(ci * s2 + si * factor + ti, i, j)];
  });
  return out;
}

template <class S>
Tensor<S> concat_channels(Tensor<S> a, Tensor<S> b) {
  detail::expect_rank(a, 3, "concat_channels");
  detail::expect_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_channels: spatial dims differ " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor<S> out = Tensor<S>::zeros({ca + cb, h, w});
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.numel());
  detail::record("concat_channels", {a, b}, out, [a, b, out]() mutable {
    if (a.requires_grad())
      for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += out.grad()[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += out.grad()[a.numel() + i];
  });
  return out;
}

// Channel column of a [C,H,W] map at one position -> [C].
template <class S>
Tensor<S> slice_region(Tensor<S> x, int i, int j) {
  detail::expect_rank(x, 3, "slice_region");
  if (i < 0 || i >= x.dim(1) || j < 0 || j >= x.dim(2))
    throw DimensionError("slice_region: position (" + std::to_string(i) + "," +
                         std::to_string(j) + ") outside " + shape_str(x.shape()));
  const int c = x.dim(0);
  Tensor<S> out = Tensor<S>::zeros({c});
  for (int ci = 0; ci < c; ++ci) out.at(ci) = x.at(ci, i, j);
  detail::record("slice_region", {x}, out, [x, out, c, i, j]() mutable {
    for (int ci = 0; ci < c; ++ci) x.grad()[x.idx3(ci, i, j)] += out.grad()[ci];
  });
  return out;
}

// One element of a rank-1 tensor as a scalar tensor.
template <class S>
Tensor<S> select(Tensor<S> x, int index) {
  detail::expect_rank(x, 1, "select");
  if (index < 0 || index >= x.dim(0))
    throw DimensionError("select: index " + std::to_string(index) + " outside " +
                         shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::scalar(x.at(index));
  detail::record("select", {x}, out, [x, out, index]() mutable {
    x.grad()[index] += out.grad()[0];
  });
  return out;
}

// Multiply a tensor by a scalar tensor (gradient flows into both).
template <class S>
Tensor<S> mul_by_scalar(Tensor<S> x, Tensor<S> s) {
  if (s.numel() != 1) throw DimensionError("mul_by_scalar: multiplier must be scalar");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  S sv = s.values()[0];
  for (std::size_t i = 0; i < x.numel(); ++i) out.values()[i] = x.values()[i] * sv;
  detail::record("mul_by_scalar", {x, s}, out, [x, s, out, sv]() mutable {
    if (x.requires_grad())
      for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i] * sv;
    if (s.requires_grad())
      for (std::size_t i = 0; i < x.numel(); ++i) s.grad()[0] += out.grad()[i] * x.values()[i];
  });
  return out;
}

// out[c,i,j] = x[c,i,j] * m[i,j] — broadcast a spatial map over channels.
template <class S>
Tensor<S> mul_broadcast_hw(Tensor<S> x, Tensor<S> m) {
  detail::expect_rank(x, 3, "mul_broadcast_hw");
  detail::expect_rank(m, 2, "mul_broadcast_hw");
  if (x.dim(1) != m.dim(0) || x.dim(2) != m.dim(1))
    throw DimensionError("mul_broadcast_hw: map " + shape_str(m.shape()) + " vs " +
                         shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at(ci, i, j) = x.at(ci, i, j) * m.at(i, j);
  detail::record("mul_broadcast_hw", {x, m}, out, [x, m, out, c, h, w]() mutable {
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          S g = out.grad()[out.idx3(ci, i, j)];
          if (x.requires_grad()) x.grad()[x.idx3(ci, i, j)] += g * m.at(i, j);
          if (m.requires_grad()) m.grad()[m.idx2(i, j)] += g * x.at(ci, i, j);
        }
  });
  return out;
}

}  // namespace ops

// ---- optimizer --------------------------------------------------------------

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, which must stay stable across steps.
template <class S>
class Adam {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Config cfg) : cfg_(cfg) {}

  std::int64_t step_count() const { return t_; }
  const Config& config() const { return cfg_; }

  void step(std::vector<Tensor<S>>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p].numel(), S(0));
        v_[p].assign(params[p].numel(), S(0));
      }
    }
    if (params.size() != m_.size())
      throw DimensionError("adam: parameter list size changed");
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S corr1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const S corr2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& param = params[p];
      if (param.numel() != m_[p].size())
        throw DimensionError("adam: parameter " + std::to_string(p) + " changed shape");
      if (!param.requires_grad()) continue;
      for (std::size_t i = 0; i < param.numel(); ++i) {
        S g = param.grad()[i];
        m_[p][i] = b1 * m_[p][i] + (S(1) - b1) * g;
        v_[p][i] = b2 * v_[p][i] + (S(1) - b2) * g * g;
        S mhat = m_[p][i] / corr1;
        S vhat = v_[p][i] / corr2;
        param.values()[i] -= static_cast<S>(cfg_.lr) * mhat /
                             (std::sqrt(vhat) + static_cast<S>(cfg_.eps));
      }
    }
  }

 private:
  Config cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

// ---- init helpers -----------------------------------------------------------

// Kaiming-style uniform init, seeded per parameter name so that loading a
// subset of parameters from a checkpoint never shifts the init of the rest.
template <class S>
Tensor<S> init_uniform(Shape shape, int fan_in, std::uint64_t seed, std::string_view name) {
  Tensor<S> t = Tensor<S>::zeros(shape);
  Rng rng = Rng::stream(seed, name);
  double limit = std::sqrt(6.0 / std::max(1, fan_in));
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-limit, limit));
  return t;
}

template <class S>
bool all_finite(Tensor<S> t) {
  for (S v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace umsr
