#pragma once

#include <cmath>

#include "muxformer/ops.hpp"
#include "muxformer/rng.hpp"

namespace muxformer {

inline Tensor param_trunc_normal(Rng& rng, Shape shape, float stddev = 0.02f) {
  std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
  for (float& x : v) x = float(rng.trunc_normal(stddev));
  return Tensor(std::move(shape), std::move(v)).as_param();
}

inline Tensor param_zeros(Shape shape) { return Tensor::zeros(std::move(shape)).as_param(); }
inline Tensor param_ones(Shape shape) { return Tensor::ones(std::move(shape)).as_param(); }

inline Tensor identity_matrix(Index dim) {
  std::vector<float> v(static_cast<std::size_t>(dim * dim), 0.0f);
  for (Index i = 0; i < dim; ++i) v[std::size_t(i * dim + i)] = 1.0f;
  return Tensor(Shape{dim, dim}, std::move(v));
}

// Pre-norm transformer encoder layer parameters (ViT convention: GELU MLP with
// expansion ratio r, fused qkv projection).
struct EncoderLayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_w, qkv_b;    // [d, 3d], [3d]
  Tensor proj_w, proj_b;  // [d, d], [d]
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1;  // [d, r*d], [r*d]
  Tensor mlp_w2, mlp_b2;  // [r*d, d], [d]
};

inline EncoderLayerParams make_encoder_layer(Rng& rng, Index dim, Index mlp_ratio) {
  EncoderLayerParams p;
  p.ln1_gamma = param_ones({dim});
  p.ln1_beta = param_zeros({dim});
  p.qkv_w = param_trunc_normal(rng, {dim, 3 * dim});
  p.qkv_b = param_zeros({3 * dim});
  p.proj_w = param_trunc_normal(rng, {dim, dim});
  p.proj_b = param_zeros({dim});
  p.ln2_gamma = param_ones({dim});
  p.ln2_beta = param_zeros({dim});
  p.mlp_w1 = param_trunc_normal(rng, {dim, mlp_ratio * dim});
  p.mlp_b1 = param_zeros({mlp_ratio * dim});
  p.mlp_w2 = param_trunc_normal(rng, {mlp_ratio * dim, dim});
  p.mlp_b2 = param_zeros({dim});
  return p;
}

// Pre-norm attention sublayer with residual: x + proj(attn(norm(x))).
// Optionally exposes the attention probabilities ([b, heads, L, L]).
inline Tensor multi_head_attention(Tape* tape, const Tensor& x, const EncoderLayerParams& p,
                                   Index heads, Tensor* probs_out = nullptr) {
  if (x.rank() != 3)
    throw DimensionError("attention: input must be [b, L, dim], got " +
                         shape_str(x.shape()));
  Index b = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (heads < 1 || d % heads != 0)
    throw ConfigError("attention: dim " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  Index hd = d / heads;

  Tensor h = ops::layernorm(tape, x, p.ln1_gamma, p.ln1_beta);
  Tensor qkv = ops::add(tape, ops::matmul(tape, h, p.qkv_w), p.qkv_b);
  auto split_heads = [&](Index offset) {
    Tensor t = ops::slice(tape, qkv, 2, offset, d);
    return ops::transpose(tape, ops::reshape(tape, t, {b, L, heads, hd}), 1, 2);
  };
  Tensor q = split_heads(0);
  Tensor k = split_heads(d);
  Tensor v = split_heads(2 * d);

  Tensor scores = ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k, 2, 3)),
                             1.0f / std::sqrt(float(hd)));
  Tensor probs = ops::softmax_last(tape, scores);
  if (probs_out) *probs_out = probs;

  Tensor ctx = ops::matmul(tape, probs, v);
  ctx = ops::reshape(tape, ops::transpose(tape, ctx, 1, 2), {b, L, d});
  Tensor out = ops::add(tape, ops::matmul(tape, ctx, p.proj_w), p.proj_b);
  return ops::add(tape, x, out);
}

// Attention sublayer followed by the MLP sublayer; output shape == input shape.
inline Tensor encoder_layer(Tape* tape, const Tensor& x, const EncoderLayerParams& p,
                            Index heads) {
  Tensor h = multi_head_attention(tape, x, p, heads);
  Tensor n = ops::layernorm(tape, h, p.ln2_gamma, p.ln2_beta);
  Tensor m = ops::matmul(tape, ops::gelu(tape, ops::add(tape, ops::matmul(tape, n, p.mlp_w1), p.mlp_b1)),
                         p.mlp_w2);
  return ops::add(tape, h, ops::add(tape, m, p.mlp_b2));
}

// Patch embedding: conv kernel (patch x patch, stride patch), learned
// positional embedding of length L, plus an optional encoder stack that turns
// patches into high-level tokens before any multiplexing.
struct PatchifierParams {
  Tensor conv_w;   // [dim, C, patch, patch]
  Tensor conv_b;   // [dim]
  Tensor pos_emb;  // [L, dim]
  std::vector<EncoderLayerParams> layers;
};

inline PatchifierParams make_patchifier(Rng& rng, Index dim, Index channels, Index image,
                                        Index patch) {
  Index grid = image / patch;
  PatchifierParams p;
  p.conv_w = param_trunc_normal(rng, {dim, channels, patch, patch});
  p.conv_b = param_zeros({dim});
  p.pos_emb = param_trunc_normal(rng, {grid * grid, dim});
  return p;
}

// [b, C, H, W] -> [b, L, dim] with L = (H/patch) * (W/patch).
inline Tensor cnn_patchify(Tape* tape, const Tensor& images, const PatchifierParams& p,
                           Index patch) {
  if (images.rank() != 4)
    throw DimensionError("patchify: input must be [b, C, H, W], got " +
                         shape_str(images.shape()));
  Index b = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (patch < 1 || h % patch != 0 || w % patch != 0)
    throw ConfigError("patchify: spatial dims " + shape_str(images.shape()) +
                      " are not divisible by patch size " + std::to_string(patch));
  Tensor feat = ops::conv2d(tape, images, p.conv_w, p.conv_b, patch);
  Index dim = feat.dim(1), L = feat.dim(2) * feat.dim(3);
  Tensor tokens = ops::transpose(tape, ops::reshape(tape, feat, {b, dim, L}), 1, 2);
  return ops::add(tape, tokens, ops::broadcast0(tape, p.pos_emb, b));
}

// Affine map onto class logits; no activation.
inline Tensor classifier_head(Tape* tape, const Tensor& cls, const Tensor& w,
                              const Tensor& b) {
  return ops::add(tape, ops::matmul(tape, cls, w), b);
}

}  // namespace muxformer
