#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "urbanmsr/errors.hpp"
#include "urbanmsr/flow.hpp"
#include "urbanmsr/model.hpp"
#include "urbanmsr/pretrain.hpp"
#include "urbanmsr/rng.hpp"
#include "urbanmsr/tensor.hpp"

// Supervised fine-tuning, the end-to-end ablation path, metrics, heuristic
// baselines and checkpoint I/O.

namespace umsr {

// ---- losses ----------------------------------------------------------------

enum class DiffLossForm { AsWritten, PenalizeSimilarity };

// Feature-differentiating regularizer between the two scales:
//   inner = (alpha / 2HW) * sum_ij ( <hb_ij, hc_ij> + <hc_ij, hc_ij> )
//   as_written           -> -ReLU(tanh(inner))   in [-1, 0]
//   penalize_similarity  -> +ReLU(tanh(inner))   in [0, 1]
template <class S>
Tensor<S> feature_diff_loss(const Tensor<S>& hb, const Tensor<S>& hc, double alpha,
                            DiffLossForm form) {
  ops::detail::expect_same_shape(hb, hc, "feature_diff_loss");
  ops::detail::expect_rank(hb, 3, "feature_diff_loss");
  const double hw = static_cast<double>(hb.dim(1)) * hb.dim(2);
  auto cross = ops::sum(ops::mul(hb, hc));
  auto self_c = ops::sum(ops::mul(hc, hc));
  auto inner = ops::scale(ops::add(cross, self_c), static_cast<S>(alpha / (2.0 * hw)));
  auto gated = ops::relu(ops::tanh_(inner));
  return form == DiffLossForm::AsWritten ? ops::neg(gated) : gated;
}

template <class S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& truth) {
  ops::detail::expect_same_shape(pred, truth, "mse_loss");
  auto d = ops::sub(pred, truth);
  return ops::scale(ops::sum(ops::mul(d, d)), S(1) / static_cast<S>(pred.numel()));
}

struct TrainConfig {
  double lambda = 0.1;  // weight of the feature-differentiating loss
  double alpha = 1.0;
  double lr = 1e-3;
  int epochs = 50;
  int batch = 16;
  bool freeze_encoders = false;
  DiffLossForm diff_loss = DiffLossForm::AsWritten;
  double mape_mask = 1.0;

  void validate() const {
    if (lambda < 0) throw ConfigError("train: lambda must be >= 0");
    if (alpha <= 0) throw ConfigError("train: alpha must be > 0");
    if (lr <= 0) throw ConfigError("train: lr must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (mape_mask < 0) throw ConfigError("train: mape_mask must be >= 0");
  }
};

// L = MSE + lambda * L_d, everything in scaled space.
template <class S>
Tensor<S> total_loss(const Tensor<S>& pred, const Tensor<S>& truth, const Tensor<S>& hb,
                     const Tensor<S>& hc, const TrainConfig& cfg) {
  auto mse = mse_loss(pred, truth);
  auto ld = feature_diff_loss(hb, hc, cfg.alpha, cfg.diff_loss);
  return ops::add(mse, ops::scale(ld, static_cast<S>(cfg.lambda)));
}

// ---- metrics ----------------------------------------------------------------

struct MetricsReport {
  double rmse = 0.0;
  double mae = 0.0;
  double mape = 0.0;  // over ground-truth cells above the mask threshold
  double constraint_residual = 0.0;
  int n_frames = 0;
  double mape_mask_threshold = 1.0;
};

// Shared metric core: `pred(t)` returns the [1,FH,FW] prediction for frame t.
template <class S, class PredFn>
MetricsReport compute_metrics(PredFn&& pred, const FlowGrid<S>& coarse, const FlowGrid<S>& fine,
                              const std::vector<int>& frames, double mask_threshold) {
  if (frames.empty()) throw UsageError("evaluate: empty frame set");
  double se = 0.0, ae = 0.0, ape = 0.0;
  std::size_t cells = 0, masked_cells = 0;
  double residual = 0.0;
  for (int t : frames) {
    Tensor<S> y = pred(t);
    if (y.dim(1) != fine.height || y.dim(2) != fine.width)
      throw DimensionError("evaluate: prediction " + shape_str(y.shape()) +
                           " does not match fine grid");
    residual = std::max(residual,
                        frame_constraint_residual(coarse.frame_tensor_hw(t), y, fine.upscale));
    for (int i = 0; i < fine.height; ++i)
      for (int j = 0; j < fine.width; ++j) {
        double p = static_cast<double>(y.at(0, i, j));
        double g = static_cast<double>(fine.at(t, i, j));
        double err = p - g;
        se += err * err;
        ae += std::abs(err);
        ++cells;
        if (g > mask_threshold) {
          ape += std::abs(err) / g;
          ++masked_cells;
        }
      }
  }
  MetricsReport r;
  r.rmse = std::sqrt(se / static_cast<double>(cells));
  r.mae = ae / static_cast<double>(cells);
  r.mape = masked_cells ? ape / static_cast<double>(masked_cells) : 0.0;
  r.constraint_residual = residual;
  r.n_frames = static_cast<int>(frames.size());
  r.mape_mask_threshold = mask_threshold;
  return r;
}

inline std::vector<int> range_frames(FrameRange r) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(r.count()));
  for (int t = r.begin; t < r.end; ++t) out.push_back(t);
  return out;
}

template <class S>
MetricsReport evaluate_model(const ModelState<S>& m, const FlowGrid<S>& coarse,
                             const FlowGrid<S>& fine, const std::vector<int>& frames,
                             double mask_threshold) {
  return compute_metrics([&](int t) { return infer_fine(m, coarse.frame_tensor(t)); }, coarse,
                         fine, frames, mask_threshold);
}

// ---- heuristic baselines -------------------------------------------------------

// MEAN: each coarse value split uniformly over its S x S subregions.
template <class S>
Tensor<S> mean_partition_predict(const FlowGrid<S>& coarse, int t, int factor) {
  const int fh = coarse.height * factor, fw = coarse.width * factor;
  Tensor<S> y = Tensor<S>::zeros({1, fh, fw});
  const S inv = S(1) / static_cast<S>(factor * factor);
  for (int i = 0; i < fh; ++i)
    for (int j = 0; j < fw; ++j) y.at(0, i, j) = coarse.at(t, i / factor, j / factor) * inv;
  return y;
}

template <class S>
MetricsReport baseline_mean(const FlowGrid<S>& coarse, const FlowGrid<S>& fine,
                            const std::vector<int>& frames, double mask_threshold) {
  return compute_metrics(
      [&](int t) { return mean_partition_predict(coarse, t, fine.upscale); }, coarse, fine,
      frames, mask_threshold);
}

// HA: per-slot mean of the fine training frames; slots unseen in training
// fall back to the global mean frame.
template <class S>
struct HistoricalAverage {
  int slots = 1;
  int height = 0, width = 0;
  std::vector<std::vector<double>> per_slot;  // indexed by slot, flat H*W
  std::vector<int> counts;
  std::vector<double> global_mean;

  static HistoricalAverage fit(const FlowGrid<S>& fine, FrameRange train) {
    if (train.count() <= 0) throw UsageError("baseline_ha: empty training split");
    HistoricalAverage ha;
    ha.slots = fine.slots_per_day;
    ha.height = fine.height;
    ha.width = fine.width;
    const std::size_t cells = static_cast<std::size_t>(fine.height) * fine.width;
    ha.per_slot.assign(static_cast<std::size_t>(ha.slots), std::vector<double>(cells, 0.0));
    ha.counts.assign(static_cast<std::size_t>(ha.slots), 0);
    ha.global_mean.assign(cells, 0.0);
    for (int t = train.begin; t < train.end; ++t) {
      int s = fine.slot_of(t);
      ++ha.counts[static_cast<std::size_t>(s)];
      for (int i = 0; i < fine.height; ++i)
        for (int j = 0; j < fine.width; ++j) {
          double v = static_cast<double>(fine.at(t, i, j));
          ha.per_slot[static_cast<std::size_t>(s)][static_cast<std::size_t>(i) * fine.width + j] += v;
          ha.global_mean[static_cast<std::size_t>(i) * fine.width + j] += v;
        }
    }
    for (std::size_t c = 0; c < cells; ++c) ha.global_mean[c] /= train.count();
    for (int s = 0; s < ha.slots; ++s)
      if (ha.counts[static_cast<std::size_t>(s)] > 0)
        for (std::size_t c = 0; c < cells; ++c)
          ha.per_slot[static_cast<std::size_t>(s)][c] /= ha.counts[static_cast<std::size_t>(s)];

    return ha;
  }

  Tensor<S> predict(int slot) const {
    const auto& src = counts[static_cast<std::size_t>(slot)] > 0
                          ? per_slot[static_cast<std::size_t>(slot)]
                          : global_mean;
    Tensor<S> y = Tensor<S>::zeros({1, height, width});
    for (std::size_t c = 0; c < src.size(); ++c) y.values()[c] = static_cast<S>(src[c]);
    return y;
  }
};

template <class S>
MetricsReport baseline_ha(const FlowGrid<S>& coarse, const FlowGrid<S>& fine, FrameRange train,
                          const std::vector<int>& eval_frames, double mask_threshold) {
  auto ha = HistoricalAverage<S>::fit(fine, train);
  return compute_metrics([&](int t) { return ha.predict(fine.slot_of(t)); }, coarse, fine,
                         eval_frames, mask_threshold);
}

// ---- checkpoints -----------------------------------------------------------------
//
// Little-endian container: magic "UMSR", version u16 = 1, stage tag u8,
// segment count u16, then per segment: name length u16, name bytes, rank u8,
// dims u32 each, precision u8 (4|8), raw values.

enum class StageTag : std::uint8_t {
  NeighborhoodPretrain = 1,  // Stage I
  CityPretrain = 2,          // Stage II
  Finetuned = 3,             // Stage III
};

inline const char* stage_name(StageTag s) {
  switch (s) {
    case StageTag::NeighborhoodPretrain: return "I";
    case StageTag::CityPretrain: return "II";
    case StageTag::Finetuned: return "III";
  }
  return "?";
}

struct CheckpointSegment {
  std::string name;
  Shape shape;
  int precision = 8;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint16_t version = 1;
  StageTag stage = StageTag::Finetuned;
  std::vector<CheckpointSegment> segments;

  const CheckpointSegment* find(const std::string& name) const {
    for (const auto& s : segments)
      if (s.name == name) return &s;
    return nullptr;
  }
};

template <class S>
CheckpointSegment make_segment(const std::string& name, const Tensor<S>& t) {
  CheckpointSegment seg;
  seg.name = name;
  seg.shape = t.shape();
  seg.precision = static_cast<int>(sizeof(S));
  seg.values.assign(t.values().begin(), t.values().end());
  return seg;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("UMSR", 4);
  detail::write_le<std::uint16_t>(os, ckpt.version);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(ckpt.stage));
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(ckpt.segments.size()));
  for (const auto& seg : ckpt.segments) {
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(seg.name.size()));
    os.write(seg.name.data(), static_cast<std::streamsize>(seg.name.size()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(seg.shape.size()));
    for (int d : seg.shape) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(seg.precision));
    if (seg.precision == 4) {
      for (double v : seg.values) detail::write_le<float>(os, static_cast<float>(v));
    } else {
      for (double v : seg.values) detail::write_le<double>(os, v);
    }
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "UMSR", 4) != 0)
    throw CheckpointError("bad magic in " + path);
  Checkpoint ckpt;
  auto version = detail::read_le<std::uint16_t>(is, "version");
  if (version != 1)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  ckpt.version = version;
  auto stage = detail::read_le<std::uint8_t>(is, "stage");
  if (stage < 1 || stage > 3)
    throw CheckpointError("bad stage tag " + std::to_string(stage) + " in " + path);
  ckpt.stage = static_cast<StageTag>(stage);
  auto count = detail::read_le<std::uint16_t>(is, "segment count");
  for (int s = 0; s < count; ++s) {
    CheckpointSegment seg;
    auto name_len = detail::read_le<std::uint16_t>(is, "segment name length");
    seg.name.resize(name_len);
    is.read(seg.name.data(), name_len);
    if (!is) throw CheckpointError("checkpoint truncated in segment name");
    auto rank = detail::read_le<std::uint8_t>(is, "segment rank");
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      auto dim = detail::read_le<std::uint32_t>(is, "segment dims");
      seg.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    auto precision = detail::read_le<std::uint8_t>(is, "segment precision");
    if (precision != 4 && precision != 8)
      throw CheckpointError("bad precision " + std::to_string(precision) + " in segment " +
                            seg.name);
    seg.precision = precision;
    seg.values.resize(numel);
    if (precision == 4) {
      std::vector<float> raw(numel);
      is.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      if (static_cast<std::size_t>(is.gcount()) != numel * sizeof(float))
        throw CheckpointError("checkpoint truncated in segment " + seg.name);
      for (std::size_t i = 0; i < numel; ++i) seg.values[i] = raw[i];
    } else {
      is.read(reinterpret_cast<char*>(seg.values.data()),
              static_cast<std::streamsize>(numel * sizeof(double)));
      if (static_cast<std::size_t>(is.gcount()) != numel * sizeof(double))
        throw CheckpointError("checkpoint truncated in segment " + seg.name);
    }
    ckpt.segments.push_back(std::move(seg));
  }
  return ckpt;
}

// Copies checkpoint segments into an existing named-parameter list. Every
// segment must match a parameter (or carry the reserved scaler names) and
// every shape must agree with the model config.
template <class S>
void apply_checkpoint(const Checkpoint& ckpt,
                      std::vector<std::pair<std::string, Tensor<S>*>> named,
                      ModelState<S>* scaler_target = nullptr) {
  std::map<std::string, Tensor<S>*> by_name;
  for (auto& [name, t] : named) by_name[name] = t;
  for (const auto& seg : ckpt.segments) {
    if (seg.name == "scaler.coarse" || seg.name == "scaler.fine") {
      if (!scaler_target) continue;
      if (seg.values.size() != 2)
        throw CheckpointError("segment " + seg.name + " must hold [min,max]");
      auto& sc = seg.name == "scaler.coarse" ? scaler_target->coarse_scaler
                                             : scaler_target->fine_scaler;
      sc.min = seg.values[0];
      sc.max = seg.values[1];
      continue;
    }
    auto it = by_name.find(seg.name);
    if (it == by_name.end())
      throw CheckpointError("checkpoint segment " + seg.name + " has no matching parameter");
    if (seg.shape != it->second->shape())
      throw CheckpointError("segment " + seg.name + ": checkpoint shape " +
                            shape_str(seg.shape) + " vs model " +
                            shape_str(it->second->shape()));
    for (std::size_t i = 0; i < seg.values.size(); ++i)
      it->second->values()[i] = static_cast<S>(seg.values[i]);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw CheckpointError("checkpoint is missing segment " + by_name.begin()->first);
}

template <class S>
Checkpoint checkpoint_from_params(StageTag stage,
                                  std::vector<std::pair<std::string, Tensor<S>*>> named) {
  Checkpoint ckpt;
  ckpt.stage = stage;
  for (auto& [name, t] : named) ckpt.segments.push_back(make_segment(name, *t));
  return ckpt;
}

template <class S>
Checkpoint checkpoint_from_model(ModelState<S>& m, StageTag stage) {
  Checkpoint ckpt = checkpoint_from_params(stage, m.named_params());
  CheckpointSegment cs;
  cs.name = "scaler.coarse";
  cs.shape = {2};
  cs.precision = static_cast<int>(sizeof(S));
  cs.values = {m.coarse_scaler.min, m.coarse_scaler.max};
  ckpt.segments.push_back(cs);
  cs.name = "scaler.fine";
  cs.values = {m.fine_scaler.min, m.fine_scaler.max};
  ckpt.segments.push_back(cs);
  return ckpt;
}

// ---- stage III -------------------------------------------------------------------

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_rmse = 0.0;
  double val_residual = 0.0;
};

struct TrainTrace {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // 1-based epoch whose parameters the model ends with
};

// Supervised training of the full model with Adam over shuffled mini-batches.
// Scalers are fitted on the training split; losses are computed in scaled
// space and metrics in raw space. The model is left holding the parameters of
// the best validation epoch.
template <class S>
TrainTrace finetune(ModelState<S>& m, const FlowGrid<S>& coarse, const FlowGrid<S>& fine,
                    const DatasetSplit& split, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (fine.height != m.cfg.upscale * coarse.height ||
      fine.width != m.cfg.upscale * coarse.width)
    throw DimensionError("finetune: fine grid does not pair with coarse at the model's factor");
  m.coarse_scaler = fit_scaler(coarse, split.train);
  m.fine_scaler = fit_scaler(fine, split.train);
  m.scalers_fitted = true;

  auto named = m.named_params();
  std::vector<Tensor<S>> params;
  for (auto& [name, t] : named) {
    if (cfg.freeze_encoders &&
        (name.rfind("encoder_b", 0) == 0 || name.rfind("encoder_c", 0) == 0))
      continue;
    params.push_back(t->enable_grad());
  }
  Adam<S> opt({cfg.lr});

  const S fmul = static_cast<S>(1.0 / (m.fine_scaler.max - m.fine_scaler.min));
  const S fadd = static_cast<S>(-m.fine_scaler.min / (m.fine_scaler.max - m.fine_scaler.min));
  auto scaled_truth = [&](int t) {
    Tensor<S> y = fine.frame_tensor(t);
    for (auto& v : y.values()) v = v * fmul + fadd;
    return y;
  };
  auto frame_loss = [&](int t) {
    auto fwd = model_forward(m, coarse.frame_tensor(t));
    auto pred_scaled = ops::affine(fwd.fine, fmul, fadd);
    return total_loss(pred_scaled, scaled_truth(t), fwd.hb.map, fwd.hc.map, cfg);
  };

  TrainTrace trace;
  double best_rmse = 0.0;
  std::vector<std::vector<S>> best_params;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = range_frames(split.train);
    Rng shuffle_rng = Rng::stream(seed, "finetune/shuffle", static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double train_loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t b1 = std::min(b0 + static_cast<std::size_t>(cfg.batch), order.size());
      for (auto& p : params) p.zero_grad();
      Tape<S> tape;
      typename Tape<S>::Scope scope(tape);
      Tensor<S> batch_sum;
      for (std::size_t k = b0; k < b1; ++k) {
        auto l = frame_loss(order[k]);
        batch_sum = batch_sum.defined() ? ops::add(batch_sum, l) : l;
      }
      auto batch_loss = ops::scale(batch_sum, S(1) / static_cast<S>(b1 - b0));
      if (!all_finite(batch_loss))
        throw NumericError("finetune: non-finite loss at epoch " + std::to_string(epoch + 1));
      tape.backward(batch_loss);
      opt.step(params);
      train_loss_sum += static_cast<double>(batch_sum.item());
    }

    EpochStats stats;
    stats.train_loss = train_loss_sum / split.train.count();
    double val_loss_sum = 0.0;
    for (int t = split.val.begin; t < split.val.end; ++t)
      val_loss_sum += static_cast<double>(frame_loss(t).item());
    stats.val_loss = val_loss_sum / split.val.count();
    MetricsReport val_metrics =
        evaluate_model(m, coarse, fine, range_frames(split.val), cfg.mape_mask);
    stats.val_rmse = val_metrics.rmse;
    stats.val_residual = val_metrics.constraint_residual;
    trace.epochs.push_back(stats);

    if (trace.best_epoch == 0 || stats.val_rmse < best_rmse) {
      best_rmse = stats.val_rmse;
      trace.best_epoch = epoch + 1;
      best_params.clear();
      for (auto& [name, t] : named) best_params.push_back(t->values());
    }
  }
  for (std::size_t i = 0; i < named.size(); ++i) named[i].second->values() = best_params[i];
  return trace;
}

// End-to-end ablation: identical protocol from randomly initialized encoders,
// no contrastive stages.
template <class S>
TrainTrace end_to_end_train(ModelState<S>& m, const FlowGrid<S>& coarse, const FlowGrid<S>& fine,
                            const DatasetSplit& split, const TrainConfig& cfg,
                            std::uint64_t seed) {
  return finetune(m, coarse, fine, split, cfg, seed);
}

}  // namespace umsr
