#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "urbanmsr/errors.hpp"
#include "urbanmsr/tensor.hpp"

// The two multi-scale encoders: a deformable-convolution stack for
// neighborhood (distance) correlations and a multi-head self-attention stack
// for city-wide (functional) correlations.

namespace umsr {

enum class FeatureScale { Neighborhood, City };

template <class S>
struct FeatureMap {
  Tensor<S> map;  // [C,H,W]
  FeatureScale scale = FeatureScale::Neighborhood;
};

struct ModelConfig {
  int channels = 16;   // feature width C (and attention model width d)
  int kernel = 3;      // deformable kernel size, odd
  int dilation = 1;
  int heads = 4;
  int city_blocks = 2;
  int enc_layers = 2;  // deformable layers in the neighborhood encoder/decoder
  int upscale = 2;     // S

  void validate() const {
    if (channels < 1 || kernel < 1 || dilation < 1 || heads < 1 || city_blocks < 1 ||
        enc_layers < 1 || upscale < 1)
      throw ConfigError("model: all dimensions must be positive");
    if (kernel % 2 == 0) throw ConfigError("model: kernel size must be odd");
    if (channels % heads != 0)
      throw ConfigError("model: channels " + std::to_string(channels) +
                        " not divisible by heads " + std::to_string(heads));
    if (channels % 4 != 0)
      throw ConfigError("model: channels must be divisible by 4 for positional encoding");
  }
};

// ---- deformable convolution layer -------------------------------------------

// Offsets are predicted from the input by a plain convolution that starts at
// zero, so an untrained layer reduces exactly to a standard convolution.
template <class S>
struct DeformableConvLayer {
  Tensor<S> off_w, off_b;  // [2*k*k, Cin, k, k], [2*k*k]
  Tensor<S> w, b;          // [Cout, Cin, k, k], [Cout]
  int kernel = 3, dilation = 1, pad = 1;

  static DeformableConvLayer init(int cin, int cout, int kernel, int dilation,
                                  std::uint64_t seed, const std::string& name) {
    DeformableConvLayer l;
    l.kernel = kernel;
    l.dilation = dilation;
    l.pad = dilation * (kernel - 1) / 2;
    const int taps2 = 2 * kernel * kernel;
    l.off_w = Tensor<S>::zeros({taps2, cin, kernel, kernel});
    l.off_b = Tensor<S>::zeros({taps2});
    l.w = init_uniform<S>({cout, cin, kernel, kernel}, cin * kernel * kernel, seed,
                          name + ".w");
    l.b = Tensor<S>::zeros({cout});
    return l;
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    auto offsets = ops::add_bias(ops::conv2d(x, off_w, pad, dilation), off_b);
    return ops::add_bias(ops::deform_conv(x, w, offsets, pad, dilation), b);
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".off_w", &off_w});
    out.push_back({prefix + ".off_b", &off_b});
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

// ---- neighborhood encoder -----------------------------------------------------

// 1x1 channel lift, then deformable layers each followed by ReLU; the output
// feature map is non-negative.
template <class S>
struct NeighborhoodEncoder {
  Tensor<S> lift_w, lift_b;  // [C,1,1,1], [C]
  std::vector<DeformableConvLayer<S>> layers;

  static NeighborhoodEncoder init(const ModelConfig& cfg, std::uint64_t seed,
                                  const std::string& name) {
    NeighborhoodEncoder e;
    e.lift_w = init_uniform<S>({cfg.channels, 1, 1, 1}, 1, seed, name + ".lift.w");
    e.lift_b = Tensor<S>::zeros({cfg.channels});
    for (int l = 0; l < cfg.enc_layers; ++l)
      e.layers.push_back(DeformableConvLayer<S>::init(
          cfg.channels, cfg.channels, cfg.kernel, cfg.dilation, seed,
          name + ".layer" + std::to_string(l)));
    return e;
  }

  FeatureMap<S> forward(const Tensor<S>& x) const {
    auto h = ops::add_bias(ops::conv2d(x, lift_w, 0, 1), lift_b);
    for (const auto& layer : layers) h = ops::relu(layer.forward(h));
    return {h, FeatureScale::Neighborhood};
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".lift.w", &lift_w});
    out.push_back({prefix + ".lift.b", &lift_b});
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].collect(out, prefix + ".layer" + std::to_string(l));
  }
};

// ---- positional encoding -------------------------------------------------------

// Fixed 2-D sinusoidal table: channel groups of four carry
// (sin row, cos row, sin col, cos col) at geometrically spaced frequencies.
template <class S>
Tensor<S> make_position_table(int channels, int h, int w) {
  if (channels % 4 != 0)
    throw DimensionError("positional encoding needs channels divisible by 4");
  Tensor<S> pe = Tensor<S>::zeros({channels, h, w});
  const int groups = channels / 4;
  for (int g = 0; g < groups; ++g) {
    double freq = std::pow(10000.0, -4.0 * g / channels);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        pe.at(4 * g + 0, i, j) = static_cast<S>(std::sin(i * freq));
        pe.at(4 * g + 1, i, j) = static_cast<S>(std::cos(i * freq));
        pe.at(4 * g + 2, i, j) = static_cast<S>(std::sin(j * freq));
        pe.at(4 * g + 3, i, j) = static_cast<S>(std::cos(j * freq));
      }
  }
  return pe;
}

// ---- multi-head self-attention --------------------------------------------------

// seq: [N,d]. Per head: softmax(Q K^T / sqrt(d_head)) V over all positions,
// heads concatenated and linearly merged. When attn_out is non-null the
// per-head attention matrices are copied there.
template <class S>
Tensor<S> mha_forward(const Tensor<S>& seq, const Tensor<S>& wq, const Tensor<S>& wk,
                      const Tensor<S>& wv, const Tensor<S>& wo, int heads,
                      std::vector<Tensor<S>>* attn_out = nullptr) {
  ops::detail::expect_rank(seq, 2, "mha");
  const int d = seq.dim(1);
  if (d % heads != 0)
    throw ConfigError("mha: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const int dh = d / heads;
  auto q = ops::matmul(seq, wq);
  auto k = ops::matmul(seq, wk);
  auto v = ops::matmul(seq, wv);
  std::vector<Tensor<S>> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int hi = 0; hi < heads; ++hi) {
    auto qh = ops::col_slice(q, hi * dh, (hi + 1) * dh);
    auto kh = ops::col_slice(k, hi * dh, (hi + 1) * dh);
    auto vh = ops::col_slice(v, hi * dh, (hi + 1) * dh);
    auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    auto attn = ops::softmax(scores, 1);
    if (attn_out) attn_out->push_back(attn);
    head_outs.push_back(ops::matmul(attn, vh));
  }
  return ops::matmul(ops::concat_cols(head_outs), wo);
}

template <class S>
struct AttentionBlock {
  Tensor<S> wq, wk, wv, wo;     // [d,d]
  Tensor<S> ln_gamma, ln_beta;  // [d]
  int heads = 4;

  static AttentionBlock init(int d, int heads, std::uint64_t seed, const std::string& name) {
    AttentionBlock b;
    b.heads = heads;
    b.wq = init_uniform<S>({d, d}, d, seed, name + ".wq");
    b.wk = init_uniform<S>({d, d}, d, seed, name + ".wk");
    b.wv = init_uniform<S>({d, d}, d, seed, name + ".wv");
    b.wo = init_uniform<S>({d, d}, d, seed, name + ".wo");
    b.ln_gamma = Tensor<S>::full({d}, S(1));
    b.ln_beta = Tensor<S>::zeros({d});
    return b;
  }

  // LN(x + MHA(x)) on a [N,d] sequence.
  Tensor<S> forward(const Tensor<S>& seq) const {
    auto z = mha_forward(seq, wq, wk, wv, wo, heads);
    return ops::layer_norm(ops::add(seq, z), ln_gamma, ln_beta);
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".wq", &wq});
    out.push_back({prefix + ".wk", &wk});
    out.push_back({prefix + ".wv", &wv});
    out.push_back({prefix + ".wo", &wo});
    out.push_back({prefix + ".ln_gamma", &ln_gamma});
    out.push_back({prefix + ".ln_beta", &ln_beta});
  }
};

// ---- city encoder ----------------------------------------------------------------

// 1x1 lift, positional encoding, then attention blocks over the H*W sequence;
// every output position attends to every region.
template <class S>
struct CityEncoder {
  Tensor<S> lift_w, lift_b;
  std::vector<AttentionBlock<S>> blocks;

  static CityEncoder init(const ModelConfig& cfg, std::uint64_t seed, const std::string& name) {
    CityEncoder e;
    e.lift_w = init_uniform<S>({cfg.channels, 1, 1, 1}, 1, seed, name + ".lift.w");
    e.lift_b = Tensor<S>::zeros({cfg.channels});
    for (int b = 0; b < cfg.city_blocks; ++b)
      e.blocks.push_back(AttentionBlock<S>::init(cfg.channels, cfg.heads, seed,
                                                 name + ".block" + std::to_string(b)));
    return e;
  }

  FeatureMap<S> forward(const Tensor<S>& x) const {
    const int h = x.dim(1), w = x.dim(2);
    const int c = lift_w.dim(0);
    auto lifted = ops::add_bias(ops::conv2d(x, lift_w, 0, 1), lift_b);
    auto with_pe = ops::add(lifted, make_position_table<S>(c, h, w));
    // [C,H,W] -> [H*W, C] token sequence.
    auto seq = ops::transpose(ops::reshape(with_pe, {c, h * w}));
    for (const auto& block : blocks) seq = block.forward(seq);
    auto back = ops::reshape(ops::transpose(seq), {c, h, w});
    return {back, FeatureScale::City};
  }

  void collect(std::vector<std::pair<std::string, Tensor<S>*>>& out, const std::string& prefix) {
    out.push_back({prefix + ".lift.w", &lift_w});
    out.push_back({prefix + ".lift.b", &lift_b});
    for (std::size_t b = 0; b < blocks.size(); ++b)
      blocks[b].collect(out, prefix + ".block" + std::to_string(b));
  }
};

}  // namespace umsr
