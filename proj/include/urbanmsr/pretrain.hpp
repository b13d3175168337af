#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "urbanmsr/encoders.hpp"
#include "urbanmsr/errors.hpp"
#include "urbanmsr/flow.hpp"
#include "urbanmsr/rng.hpp"
#include "urbanmsr/sampler.hpp"
#include "urbanmsr/tensor.hpp"

// Contrastive pretraining of the two encoders. Samples are recomputed from
// the current encoder outputs every epoch; one optimizer step per epoch over
// the sampled anchor budget.

namespace umsr {

enum class Similarity { ExpInner, RawInner };

struct PretrainConfig {
  int epochs = 12;
  int anchors = 256;  // anchor budget per epoch (the batch of one step)
  double lr = 2e-3;
  SamplerConfig sampler;
  double temperature = 0.5;
  Similarity similarity = Similarity::ExpInner;

  void validate() const {
    if (epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
    if (anchors < 1) throw ConfigError("pretrain: anchors must be >= 1");
    if (lr <= 0) throw ConfigError("pretrain: lr must be > 0");
    if (temperature <= 0) throw ConfigError("pretrain: temperature must be > 0");
    sampler.validate();
  }
};

// Inner-product similarity between two representation vectors; the
// exponential form exp(<u,v>/tau) is strictly positive.
template <class S>
Tensor<S> similarity(const Tensor<S>& u, const Tensor<S>& v, Similarity mode, double tau) {
  if (u.shape() != v.shape() || u.rank() != 1)
    throw DimensionError("similarity: expected equal-length vectors");
  auto inner = ops::dot(u, v);
  if (mode == Similarity::RawInner) return inner;
  return ops::exp_(ops::scale(inner, static_cast<S>(1.0 / tau)));
}

// L = -log( sum_k sim(a,p_k) / (sum_k sim(a,p_k) + sum_k sim(a,n_k)) ).
// The exponential mode is evaluated with max subtraction, which cancels in
// the ratio and keeps every exponent <= 0.
template <class S>
Tensor<S> contrastive_loss(const Tensor<S>& anchor, const std::vector<Tensor<S>>& positives,
                           const std::vector<Tensor<S>>& negatives, Similarity mode,
                           double tau) {
  if (positives.empty() || negatives.empty())
    throw UsageError("contrastive_loss: needs at least one positive and one negative sample");
  std::vector<Tensor<S>> pos_inner, neg_inner;
  pos_inner.reserve(positives.size());
  neg_inner.reserve(negatives.size());
  for (const auto& p : positives) pos_inner.push_back(ops::dot(anchor, p));
  for (const auto& n : negatives) neg_inner.push_back(ops::dot(anchor, n));

  Tensor<S> sum_pos, sum_all;
  if (mode == Similarity::ExpInner) {
    S m = pos_inner[0].item();
    for (const auto& t : pos_inner) m = std::max(m, t.item());
    for (const auto& t : neg_inner) m = std::max(m, t.item());
    auto term = [&](const Tensor<S>& inner) {
      return ops::exp_(ops::affine(inner, static_cast<S>(1.0 / tau),
                                   static_cast<S>(-static_cast<double>(m) / tau)));
    };
    sum_pos = term(pos_inner[0]);
    for (std::size_t i = 1; i < pos_inner.size(); ++i)
      sum_pos = ops::add(sum_pos, term(pos_inner[i]));
    sum_all = sum_pos;
    for (const auto& t : neg_inner) sum_all = ops::add(sum_all, term(t));
  } else {
    sum_pos = pos_inner[0];
    for (std::size_t i = 1; i < pos_inner.size(); ++i)
      sum_pos = ops::add(sum_pos, pos_inner[i]);
    sum_all = sum_pos;
    for (const auto& t : neg_inner) sum_all = ops::add(sum_all, t);
    if (!(sum_pos.item() > S(0)) || !(sum_all.item() > S(0)))
      throw NumericError("contrastive_loss: non-positive similarity sum in raw_inner mode");
  }
  return ops::sub(ops::log_(sum_all), ops::log_(sum_pos));
}

struct PretrainTrace {
  std::vector<double> epoch_loss;
  std::vector<int> used_anchors;     // anchors contributing per epoch
  std::vector<int> skipped_anchors;  // anchors without a valid pos/neg pair
};

struct AnchorPos {
  int t, i, j;
};

namespace detail {

// Deterministic anchor subsample over (t,i,j) triples.
inline std::vector<AnchorPos> draw_anchors(FrameRange range, int h, int w, int count,
                                           std::uint64_t seed, std::string_view stream,
                                           int epoch) {
  Rng rng = Rng::stream(seed, stream, static_cast<std::uint64_t>(epoch));
  std::vector<AnchorPos> anchors(static_cast<std::size_t>(count));
  for (auto& a : anchors) {
    a.t = range.begin + static_cast<int>(rng.below(static_cast<std::uint64_t>(range.count())));
    a.i = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
    a.j = static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
  }
  return anchors;
}

template <class S>
Tensor<S> scaled_frame(const FlowGrid<S>& grid, const ScalerParams& scaler, int t) {
  Tensor<S> f = grid.frame_tensor(t);
  for (auto& v : f.values())
    v = static_cast<S>(scaler.apply(static_cast<double>(v)));
  return f;
}

}  // namespace detail

// Stage I: neighborhood-level encoder. Each epoch re-encodes the training
// split, rebuilds per-anchor sample sets from the fresh features, averages
// the contrastive loss over the anchor budget and takes one Adam step.
template <class S>
PretrainTrace pretrain_neighborhood(NeighborhoodEncoder<S>& enc, const FlowGrid<S>& coarse,
                                    const ScalerParams& scaler, FrameRange train,
                                    const PretrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<std::pair<std::string, Tensor<S>*>> named;
  enc.collect(named, "encoder_b");
  std::vector<Tensor<S>> params;
  for (auto& [name, t] : named) params.push_back(t->enable_grad());
  Adam<S> opt({cfg.lr});

  PretrainTrace trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Current features for the whole split, no gradient tracking.
    std::vector<Tensor<S>> features(static_cast<std::size_t>(train.count()));
    for (int t = train.begin; t < train.end; ++t)
      features[static_cast<std::size_t>(t - train.begin)] =
          enc.forward(detail::scaled_frame(coarse, scaler, t)).map;

    auto anchors = detail::draw_anchors(train, coarse.height, coarse.width, cfg.anchors, seed,
                                        "pretrain_b/anchors", epoch);
    // Sample sets per anchor, grouped by frame so each frame is re-encoded
    // with gradients only once.
    std::map<int, std::vector<SampleSet>> by_frame;
    int skipped = 0;
    for (const auto& a : anchors) {
      SampleSet s = sample_neighborhood(features[static_cast<std::size_t>(a.t - train.begin)],
                                        a.t, a.i, a.j, cfg.sampler);
      if (s.positives.empty() || s.negatives.empty()) {
        ++skipped;
        continue;
      }
      by_frame[a.t].push_back(std::move(s));
    }
    for (auto& p : params) p.zero_grad();
    double total_loss = 0.0;
    int used = 0;
    const int w = coarse.width;
    // Chunked gradient accumulation keeps tape memory bounded; grads are
    // rescaled to the anchor mean once the usable count is known.
    std::vector<int> frame_ids;
    for (const auto& [t, sets] : by_frame) frame_ids.push_back(t);
    const std::size_t chunk = 16;
    for (std::size_t c0 = 0; c0 < frame_ids.size(); c0 += chunk) {
      Tape<S> tape;
      typename Tape<S>::Scope scope(tape);
      Tensor<S> chunk_sum;
      for (std::size_t fi = c0; fi < std::min(c0 + chunk, frame_ids.size()); ++fi) {
        int t = frame_ids[fi];
        auto h = enc.forward(detail::scaled_frame(coarse, scaler, t)).map;
        for (const auto& s : by_frame[t]) {
          auto anchor_vec = ops::slice_region(h, s.anchor_i, s.anchor_j);
          std::vector<Tensor<S>> pos, negs;
          for (const auto& cand : s.positives)
            pos.push_back(ops::slice_region(h, cand.index / w, cand.index % w));
          for (const auto& cand : s.negatives)
            negs.push_back(ops::slice_region(h, cand.index / w, cand.index % w));
          try {
            auto l = contrastive_loss(anchor_vec, pos, negs, cfg.similarity, cfg.temperature);
            chunk_sum = chunk_sum.defined() ? ops::add(chunk_sum, l) : l;
            ++used;
          } catch (const NumericError&) {
            ++skipped;  // out-of-domain similarity sum: anchor dropped
          }
        }
      }
      if (!chunk_sum.defined()) continue;
      total_loss += static_cast<double>(chunk_sum.item());
      tape.backward(chunk_sum);
    }
    if (used == 0)
      throw Error("pretrain_neighborhood: all anchors skipped at epoch " +
                  std::to_string(epoch + 1) + " (degenerate data)");
    const S inv_used = S(1) / static_cast<S>(used);
    for (auto& p : params)
      for (auto& gv : p.grad()) gv *= inv_used;
    double epoch_loss = total_loss / used;
    if (!std::isfinite(epoch_loss))
      throw NumericError("pretrain_neighborhood: non-finite loss at epoch " +
                         std::to_string(epoch + 1));
    opt.step(params);
    trace.epoch_loss.push_back(epoch_loss);
    trace.used_anchors.push_back(used);
    trace.skipped_anchors.push_back(skipped);
  }
  return trace;
}

// Stage II: city-level encoder. Distances compare whole frames and are
// shared by every anchor position; candidates are all other frames of the
// training split.
template <class S>
PretrainTrace pretrain_city(CityEncoder<S>& enc, const FlowGrid<S>& coarse,
                            const ScalerParams& scaler, FrameRange train,
                            const PretrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<std::pair<std::string, Tensor<S>*>> named;
  enc.collect(named, "encoder_c");
  std::vector<Tensor<S>> params;
  for (auto& [name, t] : named) params.push_back(t->enable_grad());
  Adam<S> opt({cfg.lr});

  PretrainTrace trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Tensor<S>> features(static_cast<std::size_t>(train.count()));
    for (int t = train.begin; t < train.end; ++t)
      features[static_cast<std::size_t>(t - train.begin)] =
          enc.forward(detail::scaled_frame(coarse, scaler, t)).map;

    auto anchors = detail::draw_anchors(train, coarse.height, coarse.width, cfg.anchors, seed,
                                        "pretrain_c/anchors", epoch);
    // Distance rows per distinct anchor frame.
    std::map<int, std::vector<Candidate>> rows;
    for (const auto& a : anchors) {
      if (rows.count(a.t)) continue;
      std::vector<Candidate>& row = rows[a.t];
      row.reserve(static_cast<std::size_t>(train.count() - 1));
      for (int t2 = train.begin; t2 < train.end; ++t2) {
        if (t2 == a.t) continue;
        row.push_back({t2, city_distance(features[static_cast<std::size_t>(a.t - train.begin)],
                                         features[static_cast<std::size_t>(t2 - train.begin)])});
      }
    }
    struct CityAnchor {
      AnchorPos pos;
      SampleSet set;
    };
    std::vector<CityAnchor> valid;
    int skipped = 0;
    for (const auto& a : anchors) {
      SampleSet s = sample_city(rows[a.t], a.t, a.i, a.j, cfg.sampler);
      if (s.positives.empty() || s.negatives.empty()) {
        ++skipped;
        continue;
      }
      valid.push_back({a, std::move(s)});
    }
    if (valid.empty())
      throw Error("pretrain_city: all anchors skipped at epoch " + std::to_string(epoch + 1) +
                  " (degenerate data)");
    std::sort(valid.begin(), valid.end(), [](const CityAnchor& a, const CityAnchor& b) {
      if (a.pos.t != b.pos.t) return a.pos.t < b.pos.t;
      if (a.pos.i != b.pos.i) return a.pos.i < b.pos.i;
      return a.pos.j < b.pos.j;
    });

    for (auto& p : params) p.zero_grad();
    double total_loss = 0.0;
    int used = 0;
    const std::size_t chunk = 16;
    for (std::size_t c0 = 0; c0 < valid.size(); c0 += chunk) {
      Tape<S> tape;
      typename Tape<S>::Scope scope(tape);
      std::map<int, Tensor<S>> tracked;  // frame -> gradient-tracked features
      auto tracked_frame = [&](int t) {
        auto it = tracked.find(t);
        if (it == tracked.end())
          it = tracked.emplace(t, enc.forward(detail::scaled_frame(coarse, scaler, t)).map)
                   .first;
        return it->second;
      };
      Tensor<S> chunk_sum;
      for (std::size_t vi = c0; vi < std::min(c0 + chunk, valid.size()); ++vi) {
        const auto& a = valid[vi];
        auto anchor_vec = ops::slice_region(tracked_frame(a.pos.t), a.pos.i, a.pos.j);
        std::vector<Tensor<S>> pos, negs;
        for (const auto& cand : a.set.positives)
          pos.push_back(ops::slice_region(tracked_frame(cand.index), a.pos.i, a.pos.j));
        for (const auto& cand : a.set.negatives)
          negs.push_back(ops::slice_region(tracked_frame(cand.index), a.pos.i, a.pos.j));
        try {
          auto l = contrastive_loss(anchor_vec, pos, negs, cfg.similarity, cfg.temperature);
          chunk_sum = chunk_sum.defined() ? ops::add(chunk_sum, l) : l;
          ++used;
        } catch (const NumericError&) {
          ++skipped;  // out-of-domain similarity sum: anchor dropped
        }
      }
      if (!chunk_sum.defined()) continue;
      total_loss += static_cast<double>(chunk_sum.item());
      tape.backward(chunk_sum);
    }
    if (used == 0)
      throw Error("pretrain_city: all anchors skipped at epoch " + std::to_string(epoch + 1) +
                  " (degenerate data)");
    const S inv_used = S(1) / static_cast<S>(used);
    for (auto& p : params)
      for (auto& gv : p.grad()) gv *= inv_used;
    double epoch_loss = total_loss / used;
    if (!std::isfinite(epoch_loss))
      throw NumericError("pretrain_city: non-finite loss at epoch " + std::to_string(epoch + 1));
    opt.step(params);
    trace.epoch_loss.push_back(epoch_loss);
    trace.used_anchors.push_back(used);
    trace.skipped_anchors.push_back(skipped);
  }
  return trace;
}

}  // namespace umsr
