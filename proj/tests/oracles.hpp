#pragma once

// Brute-force reference implementations used as independent oracles. These
// deliberately share no code with the library paths they check: plain loops,
// full sorts and textbook formulas only.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

// Quadruple-loop cross-correlation with zero padding.
inline std::vector<double> conv2d(const std::vector<double>& x, int cin, int h, int w,
                                  const std::vector<double>& k, int cout, int kh, int kw,
                                  int pad, int dil) {
  const int oh = h + 2 * pad - dil * (kh - 1);
  const int ow = w + 2 * pad - dil * (kw - 1);
  std::vector<double> out(static_cast<std::size_t>(cout) * oh * ow, 0.0);
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        double acc = 0;
        for (int ci = 0; ci < cin; ++ci)
          for (int a = 0; a < kh; ++a)
            for (int b = 0; b < kw; ++b) {
              int r = i - pad + dil * a, c = j - pad + dil * b;
              if (r < 0 || r >= h || c < 0 || c >= w) continue;
              acc += k[((static_cast<std::size_t>(co) * cin + ci) * kh + a) * kw + b] *
                     x[(static_cast<std::size_t>(ci) * h + r) * w + c];
            }
        out[(static_cast<std::size_t>(co) * oh + i) * ow + j] = acc;
      }
  return out;
}

// Quadruple-loop block sum for the structural constraint.
inline std::vector<double> block_sum(const std::vector<double>& fine, int t_frames, int fh,
                                     int fw, int s) {
  const int ch = fh / s, cw = fw / s;
  std::vector<double> out(static_cast<std::size_t>(t_frames) * ch * cw, 0.0);
  for (int t = 0; t < t_frames; ++t)
    for (int i = 0; i < ch; ++i)
      for (int j = 0; j < cw; ++j) {
        double acc = 0;
        for (int a = 0; a < s; ++a)
          for (int b = 0; b < s; ++b)
            acc += fine[(static_cast<std::size_t>(t) * fh + (s * i + a)) * fw + (s * j + b)];
        out[(static_cast<std::size_t>(t) * ch + i) * cw + j] = acc;
      }
  return out;
}

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

// Triple-loop frame distance: sqrt( (1/HW) sum_ij ||a_ij - b_ij||^2 ).
inline double frame_distance(const std::vector<double>& a, const std::vector<double>& b, int c,
                             int h, int w) {
  double acc = 0;
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double d = a[(static_cast<std::size_t>(ci) * h + i) * w + j] -
                   b[(static_cast<std::size_t>(ci) * h + i) * w + j];
        acc += d * d;
      }
  return std::sqrt(acc / (static_cast<double>(h) * w));
}

// Full-sort top-k (ascending), ties by smaller index.
inline std::vector<int> topk(const std::vector<double>& v, int k, bool ascending) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (v[a] != v[b]) return ascending ? v[a] < v[b] : v[a] > v[b];
    return a < b;
  });
  if (static_cast<int>(order.size()) > k) order.resize(static_cast<std::size_t>(k));
  return order;
}

// Threshold classification + top-k truncation by full sort.
struct Classified {
  std::vector<int> pos, neg;  // candidate indices, ascending by distance
};
inline Classified classify(const std::vector<double>& dist, double threshold, int k) {
  Classified out;
  std::vector<int> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return a < b;
  });
  for (int idx : order) {
    if (dist[idx] <= threshold) {
      if (static_cast<int>(out.pos.size()) < k) out.pos.push_back(idx);
    } else {
      if (static_cast<int>(out.neg.size()) < k) out.neg.push_back(idx);
    }
  }
  return out;
}

// Direct evaluation of the contrastive ratio loss with exp(inner/tau) terms.
inline double contrastive_exp(const std::vector<double>& anchor,
                              const std::vector<std::vector<double>>& pos,
                              const std::vector<std::vector<double>>& neg, double tau) {
  auto inner = [&](const std::vector<double>& v) {
    double acc = 0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += anchor[i] * v[i];
    return acc;
  };
  double sp = 0, sn = 0;
  for (const auto& p : pos) sp += std::exp(inner(p) / tau);
  for (const auto& n : neg) sn += std::exp(inner(n) / tau);
  return -std::log(sp / (sp + sn));
}

// Direct evaluation of the feature-differentiating inner term and loss.
inline double feature_diff(const std::vector<double>& hb, const std::vector<double>& hc, int c,
                           int h, int w, double alpha, bool as_written) {
  double acc = 0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double cross = 0, self_c = 0;
      for (int ci = 0; ci < c; ++ci) {
        double b = hb[(static_cast<std::size_t>(ci) * h + i) * w + j];
        double cc = hc[(static_cast<std::size_t>(ci) * h + i) * w + j];
        cross += b * cc;
        self_c += cc * cc;
      }
      acc += cross + self_c;
    }
  double inner = alpha / (2.0 * h * w) * acc;
  double gated = std::max(0.0, std::tanh(inner));
  return as_written ? -gated : gated;
}

struct Metrics {
  double rmse, mae, mape;
};
inline Metrics metrics(const std::vector<double>& pred, const std::vector<double>& truth,
                       double mask) {
  double se = 0, ae = 0, ape = 0;
  std::size_t n = pred.size(), masked = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = pred[i] - truth[i];
    se += e * e;
    ae += std::abs(e);
    if (truth[i] > mask) {
      ape += std::abs(e) / truth[i];
      ++masked;
    }
  }
  return {std::sqrt(se / n), ae / n, masked ? ape / masked : 0.0};
}

}  // namespace oracle
