#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "urbanmsr/encoders.hpp"
#include "urbanmsr/errors.hpp"
#include "urbanmsr/flow.hpp"
#include "urbanmsr/tensor.hpp"

// Decoders, weighted fusion, the distribution-logit upsampler and the
// block-wise renormalization that makes every prediction satisfy the
// structural constraint regardless of training state.

namespace umsr {

// Private neighborhood decoder: deformable stack mirroring the encoder, ReLU
// between layers, linear output.
template <class S>
struct NeighborhoodDecoder {
  std::vector<DeformableConvLayer<S>> layers;

  static NeighborhoodDecoder init(const ModelConfig& cfg, std::uint64_t seed,
                                  const std::string& name) {
    NeighborhoodDecoder d;
    for (int l = 0; l < cfg.enc_layers; ++l)
      d.layers.push_back(DeformableConvLayer<S>::init(
          cfg.channels, cfg.channels, cfg.kernel, cfg.dilation, seed,
          name + ".layer" + std::to_string(l)));
    return d;
  }

  Tensor<S> forward(const Tensor<S>& h) const {
    Tensor<S> o = h;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      o = layers[l].forward(o);
      if (l + 1 < layers.size()) o = ops::relu(o);
    }
    return o;
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].collect(out, prefix + ".layer" + std::to_string(l));
  }
};

// Private city decoder: one attention block mirroring the encoder.
template <class S>
struct CityDecoder {
  AttentionBlock<S> block;

  static CityDecoder init(const ModelConfig& cfg, std::uint64_t seed, const std::string& name) {
    return {AttentionBlock<S>::init(cfg.channels, cfg.heads, seed, name + ".block0")};
  }

  Tensor<S> forward(const Tensor<S>& h) const {
    const int c = h.dim(0), hh = h.dim(1), ww = h.dim(2);
    auto seq = ops::transpose(ops::reshape(h, {c, hh * ww}));
    seq = block.forward(seq);
    return ops::reshape(ops::transpose(seq), {c, hh, ww});
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    block.collect(out, prefix + ".block0");
  }
};

// Interactive decoder: a single 3x3 convolution over the concatenated
// neighborhood and city channels.
template <class S>
struct InteractiveDecoder {
  Tensor<S> w, b;

  static InteractiveDecoder init(const ModelConfig& cfg, std::uint64_t seed,
                                 const std::string& name) {
    InteractiveDecoder d;
    d.w = init_uniform<S>({cfg.channels, 2 * cfg.channels, 3, 3}, 2 * cfg.channels * 9, seed,
                          name + ".w");
    d.b = Tensor<S>::zeros({cfg.channels});
    return d;
  }

  Tensor<S> forward(const Tensor<S>& hb, const Tensor<S>& hc) const {
    return ops::add_bias(ops::conv2d(ops::concat_channels(hb, hc), w, 1, 1), b);
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

// Three fusion weights as softmaxed logits: always on the open simplex, so
// w1 + w2 + w3 = 1 holds at every step. Equal logits start all branches at 1/3.
template <class S>
struct FusionWeights {
  Tensor<S> logits;

  static FusionWeights init() { return {Tensor<S>::zeros({3})}; }

  Tensor<S> weights() const { return ops::softmax(logits, 0); }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".logits", &logits});
  }
};

template <class S>
Tensor<S> fuse(const Tensor<S>& ob, const Tensor<S>& oc, const Tensor<S>& obc,
               const FusionWeights<S>& fusion) {
  ops::detail::expect_same_shape(ob, oc, "fuse");
  ops::detail::expect_same_shape(ob, obc, "fuse");
  auto w = fusion.weights();
  auto r = ops::mul_by_scalar(ob, ops::select(w, 0));
  r = ops::add(r, ops::mul_by_scalar(oc, ops::select(w, 1)));
  return ops::add(r, ops::mul_by_scalar(obc, ops::select(w, 2)));
}

// 3x3 convolution lifting C feature channels to S^2 allocation logits.
template <class S>
struct UpsamplerHead {
  Tensor<S> w, b;
  int upscale = 2;

  static UpsamplerHead init(const ModelConfig& cfg, std::uint64_t seed,
                            const std::string& name) {
    UpsamplerHead h;
    h.upscale = cfg.upscale;
    const int s2 = cfg.upscale * cfg.upscale;
    h.w = init_uniform<S>({s2, cfg.channels, 3, 3}, cfg.channels * 9, seed, name + ".w");
    h.b = Tensor<S>::zeros({s2});
    return h;
  }

  Tensor<S> forward(const Tensor<S>& r) const {
    return ops::add_bias(ops::conv2d(r, w, 1, 1), b);
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

// Per coarse cell, softmax over the S^2 logit channels allocates the raw
// coarse value across its subregions; pixel shuffle places the result. Block
// sums reproduce the coarse values exactly up to rounding, for any logits.
template <class S>
Tensor<S> m2_normalize(const Tensor<S>& logits, const Tensor<S>& coarse_raw, int factor) {
  ops::detail::expect_rank(logits, 3, "m2_normalize");
  ops::detail::expect_rank(coarse_raw, 2, "m2_normalize");
  if (logits.dim(0) != factor * factor)
    throw DimensionError("m2_normalize: expected " + std::to_string(factor * factor) +
                         " logit channels, got " + std::to_string(logits.dim(0)));
  if (logits.dim(1) != coarse_raw.dim(0) || logits.dim(2) != coarse_raw.dim(1))
    throw DimensionError("m2_normalize: logits " + shape_str(logits.shape()) +
                         " vs coarse " + shape_str(coarse_raw.shape()));
  auto allocation = ops::softmax(logits, 0);
  auto distributed = ops::mul_broadcast_hw(allocation, coarse_raw);
  return ops::pixel_shuffle(distributed, factor);
}

// ---- the assembled model ------------------------------------------------------

template <class S>
struct ModelState {
  ModelConfig cfg;
  NeighborhoodEncoder<S> enc_b;
  CityEncoder<S> enc_c;
  NeighborhoodDecoder<S> dec_b;
  CityDecoder<S> dec_c;
  InteractiveDecoder<S> dec_bc;
  FusionWeights<S> fusion;
  UpsamplerHead<S> head;
  ScalerParams coarse_scaler, fine_scaler;
  bool scalers_fitted = false;

  static ModelState init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelState m;
    m.cfg = cfg;
    m.enc_b = NeighborhoodEncoder<S>::init(cfg, seed, "encoder_b");
    m.enc_c = CityEncoder<S>::init(cfg, seed, "encoder_c");
    m.dec_b = NeighborhoodDecoder<S>::init(cfg, seed, "decoders.b");
    m.dec_c = CityDecoder<S>::init(cfg, seed, "decoders.c");
    m.dec_bc = InteractiveDecoder<S>::init(cfg, seed, "decoders.bc");
    m.fusion = FusionWeights<S>::init();
    m.head = UpsamplerHead<S>::init(cfg, seed, "upsampler");
    return m;
  }

  // Stable parameter enumeration; checkpoint segment names come from here.
  std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    enc_b.collect(out, "encoder_b");
    enc_c.collect(out, "encoder_c");
    dec_b.collect(out, "decoders.b");
    dec_c.collect(out, "decoders.c");
    dec_bc.collect(out, "decoders.bc");
    fusion.collect(out, "fusion");
    head.collect(out, "upsampler");
    return out;
  }

  Tensor<S> scaled_input(const Tensor<S>& coarse_raw_1hw) const {
    if (!scalers_fitted) throw UsageError("model: scaler not fitted");
    const S m = static_cast<S>(1.0 / (coarse_scaler.max - coarse_scaler.min));
    const S c = static_cast<S>(-coarse_scaler.min / (coarse_scaler.max - coarse_scaler.min));
    // Plain value transform; the input carries no gradient.
    Tensor<S> out = Tensor<S>::zeros(coarse_raw_1hw.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
      out.values()[i] = coarse_raw_1hw.values()[i] * m + c;
    return out;
  }
};

// Routes a feature map through the private decoder of the requested scale;
// handing a map from the other encoder is a usage error.
template <class S>
Tensor<S> decode_private(const FeatureMap<S>& features, const ModelState<S>& m,
                         FeatureScale decoder_scale) {
  if (features.scale != decoder_scale)
    throw UsageError(std::string("decode_private: ") +
                     (features.scale == FeatureScale::Neighborhood ? "neighborhood" : "city") +
                     "-scale features passed to the " +
                     (decoder_scale == FeatureScale::Neighborhood ? "neighborhood" : "city") +
                     " decoder");
  if (decoder_scale == FeatureScale::Neighborhood) return m.dec_b.forward(features.map);
  return m.dec_c.forward(features.map);
}

template <class S>
Tensor<S> decode_private(const FeatureMap<S>& features, const ModelState<S>& m) {
  return decode_private(features, m, features.scale);
}

template <class S>
struct ModelForward {
  Tensor<S> fine;  // [1, S*H, S*W], raw flow units
  FeatureMap<S> hb, hc;
};

// Full pipeline for one coarse frame, raw units in and out; feature maps are
// returned for the training losses. The structural constraint holds for any
// parameter values because the coarse mass is allocated, never synthesized.
template <class S>
ModelForward<S> model_forward(const ModelState<S>& m, const Tensor<S>& coarse_raw_1hw) {
  ops::detail::expect_rank(coarse_raw_1hw, 3, "model_forward");
  auto x = m.scaled_input(coarse_raw_1hw);
  ModelForward<S> out;
  out.hb = m.enc_b.forward(x);
  out.hc = m.enc_c.forward(x);
  auto ob = m.dec_b.forward(out.hb.map);
  auto oc = m.dec_c.forward(out.hc.map);
  auto obc = m.dec_bc.forward(out.hb.map, out.hc.map);
  auto fused = fuse(ob, oc, obc, m.fusion);
  auto logits = m.head.forward(fused);
  auto coarse_hw = ops::reshape(coarse_raw_1hw,
                                {coarse_raw_1hw.dim(1), coarse_raw_1hw.dim(2)});
  out.fine = m2_normalize(logits, coarse_hw, m.cfg.upscale);
  return out;
}

// Inference entry point: no gradient tracking, output is non-negative and
// satisfies the structural constraint against the input frame.
template <class S>
Tensor<S> infer_fine(const ModelState<S>& m, const Tensor<S>& coarse_raw_1hw) {
  return model_forward(m, coarse_raw_1hw).fine;
}

}  // namespace umsr
