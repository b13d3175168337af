#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "urbanmsr/errors.hpp"
#include "urbanmsr/tensor.hpp"

// Dynamic positive/negative sample selection for contrastive pretraining.
// Distances are computed on current encoder outputs; selection is index-level
// and recomputed every epoch.

namespace umsr {

enum class ThresholdMode { Absolute, Percentile };

struct SamplerConfig {
  ThresholdMode mode = ThresholdMode::Percentile;
  double percentile = 0.2;  // used in percentile mode
  double delta = 0.0;       // neighborhood threshold, absolute mode
  double theta = 0.0;       // city threshold, absolute mode
  int k = 8;

  void validate() const {
    if (k < 1) throw ConfigError("sampler: k must be >= 1");
    if (mode == ThresholdMode::Percentile && (percentile <= 0.0 || percentile >= 1.0))
      throw ConfigError("sampler: percentile must lie in (0,1)");
    if (mode == ThresholdMode::Absolute && (delta < 0.0 || theta < 0.0))
      throw ConfigError("sampler: absolute thresholds must be >= 0");
  }
};

struct Candidate {
  int index = 0;  // region linear index (neighborhood) or frame index (city)
  double distance = 0.0;
};

struct SampleSet {
  int anchor_t = 0, anchor_i = 0, anchor_j = 0;
  std::vector<Candidate> positives;  // ascending by distance
  std::vector<Candidate> negatives;  // ascending by distance
  bool short_set = false;            // fewer than K available on either side
};

// Euclidean norm over the channel dimension between two regions of the same
// frame's feature map [C,H,W].
template <class S>
double neighborhood_distance(const Tensor<S>& features, int i, int j, int i2, int j2) {
  if (features.rank() != 3)
    throw DimensionError("neighborhood_distance: feature map must be [C,H,W]");
  const int h = features.dim(1), w = features.dim(2);
  if (i < 0 || i >= h || j < 0 || j >= w || i2 < 0 || i2 >= h || j2 < 0 || j2 >= w)
    throw DimensionError("neighborhood_distance: position outside grid");
  double acc = 0.0;
  for (int c = 0; c < features.dim(0); ++c) {
    double d = static_cast<double>(features.at(c, i, j)) -
               static_cast<double>(features.at(c, i2, j2));
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Root mean square over all regions of the channel-wise distance between two
// frames' feature maps; the same value serves every anchor position at (t,t').
template <class S>
double city_distance(const Tensor<S>& frame_a, const Tensor<S>& frame_b) {
  if (frame_a.rank() != 3 || frame_b.rank() != 3 || frame_a.shape() != frame_b.shape())
    throw DimensionError("city_distance: feature maps must be equal-shape [C,H,W]");
  const int c = frame_a.dim(0), h = frame_a.dim(1), w = frame_a.dim(2);
  double acc = 0.0;
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double d = static_cast<double>(frame_a.at(ci, i, j)) -
                   static_cast<double>(frame_b.at(ci, i, j));
        acc += d * d;
      }
  return std::sqrt(acc / (static_cast<double>(h) * w));
}

// Indices of the K smallest (ascending) or largest values; ties broken by the
// smaller linear index. Returns fewer than K when the input is short.
inline std::vector<int> topk_select(const std::vector<double>& values, int k, bool ascending) {
  if (k < 1) throw UsageError("topk_select: k must be >= 1");
  std::vector<int> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return ascending ? values[a] < values[b] : values[a] > values[b];
  });
  if (static_cast<int>(order.size()) > k) order.resize(static_cast<std::size_t>(k));
  return order;
}

// Threshold rule: distance <= threshold -> positive, else negative. Both
// lists keep their K smallest distances (hardest negatives are the ones just
// above the threshold). Percentile mode derives the threshold from this
// anchor's own candidate distances.
inline SampleSet classify(const std::vector<Candidate>& candidates, double absolute_threshold,
                          const SamplerConfig& cfg) {
  cfg.validate();
  SampleSet out;
  double threshold = absolute_threshold;
  if (cfg.mode == ThresholdMode::Percentile) {
    if (candidates.empty()) return out;
    std::vector<double> d;
    d.reserve(candidates.size());
    for (const auto& c : candidates) d.push_back(c.distance);
    std::sort(d.begin(), d.end());
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(cfg.percentile * static_cast<double>(d.size())));
    rank = std::min(std::max<std::size_t>(rank, 1), d.size());
    threshold = d[rank - 1];
  }
  for (const auto& c : candidates) {
    if (c.distance <= threshold)
      out.positives.push_back(c);
    else
      out.negatives.push_back(c);
  }
  auto by_distance = [](const Candidate& a, const Candidate& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.index < b.index;
  };
  std::sort(out.positives.begin(), out.positives.end(), by_distance);
  std::sort(out.negatives.begin(), out.negatives.end(), by_distance);
  const std::size_t k = static_cast<std::size_t>(cfg.k);
  if (out.positives.size() < k || out.negatives.size() < k) out.short_set = true;
  if (out.positives.size() > k) out.positives.resize(k);
  if (out.negatives.size() > k) out.negatives.resize(k);
  return out;
}

// Neighborhood-level sampling: candidates are all other regions of the same
// frame, compared on the current feature map.
template <class S>
SampleSet sample_neighborhood(const Tensor<S>& features, int t, int i, int j,
                              const SamplerConfig& cfg) {
  const int h = features.dim(1), w = features.dim(2);
  std::vector<Candidate> cands;
  cands.reserve(static_cast<std::size_t>(h) * w - 1);
  for (int i2 = 0; i2 < h; ++i2)
    for (int j2 = 0; j2 < w; ++j2) {
      if (i2 == i && j2 == j) continue;
      cands.push_back({i2 * w + j2, neighborhood_distance(features, i, j, i2, j2)});
    }
  SampleSet s = classify(cands, cfg.delta, cfg);
  s.anchor_t = t;
  s.anchor_i = i;
  s.anchor_j = j;
  return s;
}

// City-level sampling: candidates are all other frames; distances are shared
// across anchor positions, so the caller passes the precomputed row of
// distances from the anchor's frame to every candidate frame.
inline SampleSet sample_city(const std::vector<Candidate>& frame_distances, int t, int i, int j,
                             const SamplerConfig& cfg) {
  SampleSet s = classify(frame_distances, cfg.theta, cfg);
  s.anchor_t = t;
  s.anchor_i = i;
  s.anchor_j = j;
  return s;
}

}  // namespace umsr
