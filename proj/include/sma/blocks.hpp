#pragma once

#include <string>

#include "sma/tensor.hpp"

namespace sma {

template <class S>
struct LinearParams {
  Tensor<S> w;  // (d_in, d_out)
  Tensor<S> b;  // (d_out)

  static LinearParams init(std::size_t d_in, std::size_t d_out, Rng& rng) {
    LinearParams p;
    p.w = Tensor<S>::fan_in_uniform({d_in, d_out}, d_in, rng);
    p.b = Tensor<S>::zeros({d_out});
    return p;
  }

  static LinearParams zero(std::size_t d_in, std::size_t d_out) {
    return {Tensor<S>::zeros({d_in, d_out}), Tensor<S>::zeros({d_out})};
  }
};

template <class S>
struct ConvParams {
  Tensor<S> w;  // (c_out, c_in, k, k)
  Tensor<S> b;  // (c_out)

  static ConvParams init(std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng) {
    ConvParams p;
    p.w = Tensor<S>::fan_in_uniform({c_out, c_in, k, k}, c_in * k * k, rng);
    p.b = Tensor<S>::zeros({c_out});
    return p;
  }

  static ConvParams zero(std::size_t c_out, std::size_t c_in, std::size_t k) {
    return {Tensor<S>::zeros({c_out, c_in, k, k}), Tensor<S>::zeros({c_out})};
  }
};

template <class S>
struct LayerNormParams {
  Tensor<S> gamma;
  Tensor<S> beta;

  static LayerNormParams init(std::size_t d) {
    return {Tensor<S>::full({d}, S(1)), Tensor<S>::zeros({d})};
  }
};

// Squeeze/excite-style channel gate. The expand projection starts at zero so
// the initial gate is exactly sigmoid(0) = 0.5; reduce stays random, which
// means it only picks up gradient once expand has moved off zero.
template <class S>
struct ChannelAttentionParams {
  LinearParams<S> reduce;  // C -> C/r
  LinearParams<S> expand;  // C/r -> C
  std::size_t ratio = 4;

  static ChannelAttentionParams init(std::size_t channels, std::size_t ratio, Rng& rng) {
    if (ratio == 0 || channels % ratio != 0)
      throw config_error("channel attention: ratio " + std::to_string(ratio) +
                         " must divide channel count " + std::to_string(channels));
    ChannelAttentionParams p;
    p.ratio = ratio;
    p.reduce = LinearParams<S>::init(channels, channels / ratio, rng);
    p.expand = LinearParams<S>::zero(channels / ratio, channels);
    return p;
  }
};

template <class S>
struct AttentionBranchParams {
  ChannelAttentionParams<S> channel;
  ConvParams<S> pixel_proj;   // 1x1 conv C -> C, zero init
  ConvParams<S> spatial_mix;  // 7x7 conv 2 -> 1, zero init

  static AttentionBranchParams init(std::size_t channels, std::size_t ratio, Rng& rng) {
    AttentionBranchParams p;
    p.channel = ChannelAttentionParams<S>::init(channels, ratio, rng);
    p.pixel_proj = ConvParams<S>::zero(channels, channels, 1);
    p.spatial_mix = ConvParams<S>::zero(1, 2, 7);
    return p;
  }
};

template <class S>
struct MhsaParams {
  LinearParams<S> wq, wk, wv, wo;  // all d -> d
  std::size_t heads = 1;

  static MhsaParams init(std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0)
      throw config_error("mhsa: heads " + std::to_string(heads) + " must divide d " +
                         std::to_string(d));
    MhsaParams p;
    p.heads = heads;
    p.wq = LinearParams<S>::init(d, d, rng);
    p.wk = LinearParams<S>::init(d, d, rng);
    p.wv = LinearParams<S>::init(d, d, rng);
    p.wo = LinearParams<S>::init(d, d, rng);
    return p;
  }
};

template <class S>
struct EmlpParams {
  LinearParams<S> up;         // C -> e*C
  ConvParams<S> pixel_conv;   // cross-channel conv on e*C maps (kernel 1 or 3)
  ConvParams<S> depth_conv;   // 3x3 depthwise on e*C maps
  LinearParams<S> down;       // e*C -> C
  std::size_t expansion = 2;
  std::size_t pixel_kernel = 1;

  static EmlpParams init(std::size_t channels, std::size_t expansion, std::size_t pixel_kernel,
                         Rng& rng) {
    if (expansion < 1) throw config_error("emlp: expansion must be >= 1");
    if (pixel_kernel != 1 && pixel_kernel != 3)
      throw config_error("emlp: pixel kernel must be 1 or 3");
    EmlpParams p;
    p.expansion = expansion;
    p.pixel_kernel = pixel_kernel;
    std::size_t e = channels * expansion;
    p.up = LinearParams<S>::init(channels, e, rng);
    p.pixel_conv = ConvParams<S>::init(e, e, pixel_kernel, rng);
    p.depth_conv = ConvParams<S>::init(e, 1, 3, rng);
    // depthwise init above uses (e,1,3,3) with fan_in 1*3*3
    p.down = LinearParams<S>::init(e, channels, rng);
    return p;
  }
};

template <class S>
struct SmaBlockParams {
  LayerNormParams<S> ln1, ln2;
  AttentionBranchParams<S> branches;
  MhsaParams<S> mhsa;
  LinearParams<S> fuse;  // token dim -> token dim
  EmlpParams<S> emlp;
  std::size_t channels = 0;
  std::size_t patch = 1;  // MHSA tokenization patch size

  static SmaBlockParams init(std::size_t channels, std::size_t heads, std::size_t ratio,
                             std::size_t expansion, std::size_t patch, std::size_t pixel_kernel,
                             Rng& rng) {
    SmaBlockParams p;
    p.channels = channels;
    p.patch = patch;
    std::size_t d = channels * patch * patch;
    p.ln1 = LayerNormParams<S>::init(channels);
    p.ln2 = LayerNormParams<S>::init(channels);
    p.branches = AttentionBranchParams<S>::init(channels, ratio, rng);
    p.mhsa = MhsaParams<S>::init(d, heads, rng);
    p.fuse = LinearParams<S>::init(d, d, rng);
    p.emlp = EmlpParams<S>::init(channels, expansion, pixel_kernel, rng);
    return p;
  }
};

// parameter traversal, used by the registry, optimizer and checkpoints
template <class S, class Fn>
void visit_params(LinearParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", p.w);
  fn(prefix + ".bias", p.b);
}

template <class S, class Fn>
void visit_params(ConvParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", p.w);
  fn(prefix + ".bias", p.b);
}

template <class S, class Fn>
void visit_params(LayerNormParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

template <class S, class Fn>
void visit_params(SmaBlockParams<S>& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.ln1, prefix + ".ln1", fn);
  visit_params(p.ln2, prefix + ".ln2", fn);
  visit_params(p.branches.channel.reduce, prefix + ".channel_attn.reduce", fn);
  visit_params(p.branches.channel.expand, prefix + ".channel_attn.expand", fn);
  visit_params(p.branches.pixel_proj, prefix + ".pixel_attn.proj", fn);
  visit_params(p.branches.spatial_mix, prefix + ".spatial_attn.mix", fn);
  visit_params(p.mhsa.wq, prefix + ".mhsa.wq", fn);
  visit_params(p.mhsa.wk, prefix + ".mhsa.wk", fn);
  visit_params(p.mhsa.wv, prefix + ".mhsa.wv", fn);
  visit_params(p.mhsa.wo, prefix + ".mhsa.wo", fn);
  visit_params(p.fuse, prefix + ".fuse", fn);
  visit_params(p.emlp.up, prefix + ".emlp.up", fn);
  visit_params(p.emlp.pixel_conv, prefix + ".emlp.pixel_conv", fn);
  visit_params(p.emlp.depth_conv, prefix + ".emlp.depth_conv", fn);
  visit_params(p.emlp.down, prefix + ".emlp.down", fn);
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

// x * broadcast(sigmoid(expand(relu(reduce(channel_avg(x))))))
template <class S>
Tensor<S> channel_attention(Tensor<S> x, ChannelAttentionParams<S>& p) {
  std::size_t C = x.dim(0);
  if (p.ratio == 0 || C % p.ratio != 0)
    throw config_error("channel_attention: ratio " + std::to_string(p.ratio) +
                       " does not divide channels " + std::to_string(C));
  auto avg = reshape(channel_avg(x), {1, C});
  auto hidden = relu(linear(avg, p.reduce.w, p.reduce.b));
  auto gate = sigmoid(linear(hidden, p.expand.w, p.expand.b));
  return mul_channel_gate(x, reshape(gate, {C}));
}

// x * sigmoid(conv1x1(x)), full-resolution gate
template <class S>
Tensor<S> pixel_attention(Tensor<S> x, ConvParams<S>& proj) {
  auto gate = sigmoid(conv2d(x, proj.w, proj.b, 1, 0));
  return mul(x, gate);
}

// x * broadcast(sigmoid(conv7x7(concat(mean_c(x), max_c(x)))))
template <class S>
Tensor<S> spatial_attention(Tensor<S> x, ConvParams<S>& mix) {
  auto pooled = concat_channels(spatial_mean(x), spatial_max(x));
  auto gate = sigmoid(conv2d(pooled, mix.w, mix.b, 1, 3));
  return mul_spatial_gate(x, reshape(gate, {1, x.dim(1), x.dim(2)}));
}

template <class S>
Tensor<S> multi_head_self_attention(Tensor<S> q_src, Tensor<S> k_src, Tensor<S> v_src,
                                    MhsaParams<S>& p) {
  auto q = linear(q_src, p.wq.w, p.wq.b);
  auto k = linear(k_src, p.wk.w, p.wk.b);
  auto v = linear(v_src, p.wv.w, p.wv.b);
  auto att = scaled_dot_attention(q, k, v, p.heads);
  return linear(att, p.wo.w, p.wo.b);
}

// The SMA fusion pipeline:
//   1. pixel and channel branch gates run on the feature map in parallel;
//   2. their outputs combine through multi-head attention (Q from the pixel
//      branch, K and V from the channel branch);
//   3. the combination is gated by the spatial branch;
//   4. all three branch outputs are summed and fused by a linear projection.
template <class S>
Tensor<S> sma_forward(Tensor<S> x, SmaBlockParams<S>& p) {
  if (x.ndim() != 3 || x.dim(0) != p.channels)
    throw shape_error("sma_forward: input " + shape_str(x.shape()) + " does not match block of " +
                      std::to_string(p.channels) + " channels");
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<S> x_pa, x_ca, combined, x_sa, fused;
  try {
    x_pa = pixel_attention(x, p.branches.pixel_proj);
    x_ca = channel_attention(x, p.branches.channel);
  } catch (const shape_error& e) {
    throw shape_error(std::string("sma_forward [branch gates]: ") + e.what());
  }
  auto t_pa = patchify(x_pa, p.patch);
  auto t_ca = patchify(x_ca, p.patch);
  try {
    combined = multi_head_self_attention(t_pa, t_ca, t_ca, p.mhsa);
  } catch (const shape_error& e) {
    throw shape_error(std::string("sma_forward [attention combine]: ") + e.what());
  }
  try {
    x_sa = spatial_attention(unpatchify(combined, C, H, W, p.patch), p.branches.spatial_mix);
  } catch (const shape_error& e) {
    throw shape_error(std::string("sma_forward [spatial gate]: ") + e.what());
  }
  try {
    auto summed = add(add(t_pa, t_ca), patchify(x_sa, p.patch));
    fused = linear(summed, p.fuse.w, p.fuse.b);
  } catch (const shape_error& e) {
    throw shape_error(std::string("sma_forward [fusion]: ") + e.what());
  }
  return unpatchify(fused, C, H, W, p.patch);
}

// tokens -> linear up -> 2D maps -> pixel-wise conv -> depthwise conv -> GELU
// -> tokens -> linear down
template <class S>
Tensor<S> emlp_forward(Tensor<S> x, EmlpParams<S>& p) {
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::size_t e = C * p.expansion;
  auto tokens = patchify(x, 1);
  auto up = linear(tokens, p.up.w, p.up.b);
  auto maps = unpatchify(up, e, H, W, 1);
  maps = conv2d(maps, p.pixel_conv.w, p.pixel_conv.b, 1, (p.pixel_kernel - 1) / 2);
  maps = depthwise_conv2d(maps, p.depth_conv.w, p.depth_conv.b);
  maps = gelu(maps);
  auto down = linear(patchify(maps, 1), p.down.w, p.down.b);
  return unpatchify(down, C, H, W, 1);
}

// Pre-norm transformer recurrence:
//   x' = SMA(LN(x)) + x
//   y  = E-MLP(LN(x')) + x'
// Layer norm runs over the channel vector of each pixel token.
template <class S>
Tensor<S> sma_block_forward(Tensor<S> x, SmaBlockParams<S>& p, bool enable_sma = true,
                            bool enable_emlp = true) {
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<S> x1 = x;
  if (enable_sma) {
    auto n1 = layer_norm(patchify(x, 1), p.ln1.gamma, p.ln1.beta);
    x1 = add(x, sma_forward(unpatchify(n1, C, H, W, 1), p));
  }
  Tensor<S> out = x1;
  if (enable_emlp) {
    auto n2 = layer_norm(patchify(x1, 1), p.ln2.gamma, p.ln2.beta);
    out = add(x1, emlp_forward(unpatchify(n2, C, H, W, 1), p.emlp));
  }
  return out;
}

}  // namespace sma
