#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "muxformer/nn.hpp"
#include "muxformer/ops.hpp"
#include "muxformer/rng.hpp"

namespace muxformer {

// Two-layer GELU MLP with a linear bypass: y = x S + gelu(x W1 + b1) W2 + b2.
// The bypass makes exact identity (S = I, W2 = 0) and exact zero (all zeros)
// initialisations representable.
struct ShallowMlpParams {
  Tensor skip;    // [d_in, d_out]
  Tensor w1, b1;  // [d_in, hidden], [hidden]
  Tensor w2, b2;  // [hidden, d_out], [d_out]
};

inline ShallowMlpParams make_shallow_mlp(Rng& rng, Index dim, Index hidden) {
  ShallowMlpParams p;
  p.skip = identity_matrix(dim).as_param();
  p.w1 = param_trunc_normal(rng, {dim, hidden});
  p.b1 = param_zeros({hidden});
  p.w2 = param_trunc_normal(rng, {hidden, dim});
  p.b2 = param_zeros({dim});
  return p;
}

inline ShallowMlpParams identity_shallow_mlp(Index dim, Index hidden) {
  ShallowMlpParams p;
  p.skip = identity_matrix(dim).as_param();
  p.w1 = param_zeros({dim, hidden});
  p.b1 = param_zeros({hidden});
  p.w2 = param_zeros({hidden, dim});
  p.b2 = param_zeros({dim});
  return p;
}

inline ShallowMlpParams zero_shallow_mlp(Index dim, Index hidden) {
  ShallowMlpParams p = identity_shallow_mlp(dim, hidden);
  p.skip = param_zeros({dim, dim});
  return p;
}

inline Tensor shallow_mlp(Tape* tape, const Tensor& x, const ShallowMlpParams& p) {
  Tensor lin = ops::matmul(tape, x, p.skip);
  Tensor h = ops::gelu(tape, ops::add(tape, ops::matmul(tape, x, p.w1), p.b1));
  Tensor out = ops::add(tape, ops::matmul(tape, h, p.w2), p.b2);
  return ops::add(tape, lin, out);
}

// The baseline multiplexer: N fixed orthogonal matrices plus N trainable
// shallow MLPs. phi matrices are constants and never reach the optimizer.
struct ProjectionSet {
  Index n = 0;
  Index dim = 0;
  std::uint64_t seed = 0;
  std::vector<Tensor> phi;              // each [dim, dim], orthogonal, fixed
  std::vector<ShallowMlpParams> mlps;   // trainable
};

// Orthogonalises a seeded Gaussian sample (QR with the R diagonal sign fixed,
// computed at f64), deterministically per seed.
inline ProjectionSet make_orthogonal_projections(Index n, Index dim, std::uint64_t seed) {
  if (n < 1 || dim < 1)
    throw ContractError("make_orthogonal_projections: need n >= 1 and dim >= 1");
  ProjectionSet set;
  set.n = n;
  set.dim = dim;
  set.seed = seed;
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    Rng stream = rng.fork("phi." + std::to_string(i));
    Eigen::MatrixXd g(dim, dim);
    for (Index r = 0; r < dim; ++r)
      for (Index c = 0; c < dim; ++c) g(r, c) = stream.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r_mat = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Index c = 0; c < dim; ++c)
      if (r_mat(c, c) < 0) q.col(c) *= -1.0;
    std::vector<float> data(static_cast<std::size_t>(dim * dim));
    for (Index r = 0; r < dim; ++r)
      for (Index c = 0; c < dim; ++c) data[std::size_t(r * dim + c)] = float(q(r, c));
    set.phi.push_back(Tensor(Shape{dim, dim}, std::move(data)));

    Rng mlp_stream = rng.fork("mlp." + std::to_string(i));
    set.mlps.push_back(make_shallow_mlp(mlp_stream, dim, dim));
  }
  return set;
}

// Eq-style token-wise multiplexing: output = (1/N) sum_i MLP_i(phi_i x_i),
// applied at every token position. All inputs must share one shape.
inline Tensor multiplex(Tape* tape, std::span<const Tensor> inputs,
                        const ProjectionSet& proj) {
  if (Index(inputs.size()) != proj.n)
    throw ContractError("multiplex: got " + std::to_string(inputs.size()) +
                        " inputs for a projection set of n=" + std::to_string(proj.n));
  const Shape& shape = inputs[0].shape();
  for (const Tensor& t : inputs)
    if (t.shape() != shape)
      throw DimensionError("multiplex: ragged input shapes, " + shape_str(t.shape()) +
                           " vs " + shape_str(shape));
  Index d = shape.back();
  if (d != proj.dim)
    throw DimensionError("multiplex: token dim " + std::to_string(d) +
                         " does not match projection dim " + std::to_string(proj.dim));
  Index rows = inputs[0].numel() / d;

  Tensor acc;
  for (Index i = 0; i < proj.n; ++i) {
    Tensor flat = ops::reshape(tape, inputs[std::size_t(i)], {rows, d});
    // phi x as row vectors: x phi^T
    Tensor projected =
        ops::matmul(tape, flat, ops::transpose(tape, proj.phi[std::size_t(i)], 0, 1));
    Tensor mixed = shallow_mlp(tape, projected, proj.mlps[std::size_t(i)]);
    acc = i == 0 ? mixed : ops::add(tape, acc, mixed);
  }
  return ops::reshape(tape, ops::scale(tape, acc, 1.0f / float(proj.n)), shape);
}

// Per-slot extraction heads for the multiplexed representation.
struct DemuxParams {
  Index hidden = 0;
  std::vector<ShallowMlpParams> heads;
};

inline DemuxParams make_demux(Rng& rng, Index n, Index dim, Index hidden) {
  DemuxParams p;
  p.hidden = hidden;
  for (Index i = 0; i < n; ++i) {
    Rng stream = rng.fork("demux." + std::to_string(i));
    p.heads.push_back(make_shallow_mlp(stream, dim, hidden));
  }
  return p;
}

inline Tensor demultiplex(Tape* tape, const Tensor& h, Index index, const DemuxParams& p) {
  if (index < 0 || index >= Index(p.heads.size()))
    throw ContractError("demultiplex: slot " + std::to_string(index) +
                        " out of range [0," + std::to_string(p.heads.size()) + ")");
  return shallow_mlp(tape, h, p.heads[std::size_t(index)]);
}

// Token-length reducer of the C-Multiplexer: conv1d with kernel = stride =
// N_MUX plus a learned per-slot embedding.
struct ReducerParams {
  Index n_mux = 1;
  bool use_slot_embeddings = true;
  Tensor conv_w;    // [dim, n_mux, dim]
  Tensor conv_b;    // [dim]
  Tensor slot_emb;  // [n_mux, dim]
};

inline ReducerParams make_reducer(Rng& rng, Index n_mux, Index dim,
                                  bool use_slot_embeddings) {
  ReducerParams p;
  p.n_mux = n_mux;
  p.use_slot_embeddings = use_slot_embeddings;
  p.conv_w = param_trunc_normal(rng, {dim, n_mux, dim});
  p.conv_b = param_zeros({dim});
  p.slot_emb = param_trunc_normal(rng, {n_mux, dim});
  return p;
}

// Reduces each group [b/N, L, dim] to length L/N, adds slot embedding i to
// group i, and concatenates in slot order back to token length L.
inline Tensor concat_multiplex(Tape* tape, std::span<const Tensor> groups,
                               const ReducerParams& r) {
  if (Index(groups.size()) != r.n_mux)
    throw ContractError("concat_multiplex: got " + std::to_string(groups.size()) +
                        " groups for n_mux=" + std::to_string(r.n_mux));
  const Shape& shape = groups[0].shape();
  for (const Tensor& g : groups)
    if (g.shape() != shape)
      throw DimensionError("concat_multiplex: ragged group shapes, " +
                           shape_str(g.shape()) + " vs " + shape_str(shape));
  std::vector<Tensor> parts;
  parts.reserve(groups.size());
  for (Index i = 0; i < r.n_mux; ++i) {
    Tensor reduced = ops::conv1d(tape, groups[std::size_t(i)], r.conv_w, r.conv_b, r.n_mux);
    if (r.use_slot_embeddings) {
      Index d = r.slot_emb.dim(1);
      Tensor slot = ops::reshape(tape, ops::slice(tape, r.slot_emb, 0, i, 1), {d});
      reduced = ops::add(tape, reduced, slot);
    }
    parts.push_back(reduced);
  }
  return ops::concat(tape, std::span<const Tensor>(parts), 1);
}

// Fixed unit-vector codebook standing in for a pretrained discrete tokenizer.
struct Codebook {
  std::uint64_t seed = 0;
  Tensor vectors;  // [K, patch_dim], rows unit-norm
};

inline Codebook make_codebook(Index k, Index patch_dim, std::uint64_t seed) {
  if (k < 2) throw ContractError("codebook: K must be >= 2");
  Codebook cb;
  cb.seed = seed;
  Rng rng(seed);
  std::vector<float> data(static_cast<std::size_t>(k * patch_dim));
  for (Index row = 0; row < k; ++row) {
    std::vector<double> v(static_cast<std::size_t>(patch_dim));
    double ss = 0.0;
    for (double& x : v) {
      x = rng.normal();
      ss += x * x;
    }
    double inv = 1.0 / std::sqrt(ss);
    for (Index j = 0; j < patch_dim; ++j)
      data[std::size_t(row * patch_dim + j)] = float(v[std::size_t(j)] * inv);
  }
  cb.vectors = Tensor(Shape{k, patch_dim}, std::move(data));
  return cb;
}

// Flattens each patch, unit-normalises it, and assigns the nearest codebook
// row (Euclidean, ties to the lowest index). Deterministic.
inline ITensor toy_discrete_patchify(const Tensor& images, const Codebook& cb, Index patch) {
  if (images.rank() != 4)
    throw DimensionError("toy_discrete_patchify: input must be [b, C, H, W], got " +
                         shape_str(images.shape()));
  Index b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch < 1 || h % patch != 0 || w % patch != 0)
    throw ConfigError("toy_discrete_patchify: spatial dims " + shape_str(images.shape()) +
                      " are not divisible by patch size " + std::to_string(patch));
  Index patch_dim = c * patch * patch;
  if (cb.vectors.dim(1) != patch_dim)
    throw DimensionError("toy_discrete_patchify: codebook dim " +
                         std::to_string(cb.vectors.dim(1)) + " does not match patch dim " +
                         std::to_string(patch_dim));
  Index gh = h / patch, gw = w / patch, L = gh * gw;
  Index k = cb.vectors.dim(0);

  std::vector<std::int32_t> tokens(static_cast<std::size_t>(b * L));
  const float* img = images.data();
  const float* codes = cb.vectors.data();
  std::vector<double> u(static_cast<std::size_t>(patch_dim));
  for (Index bi = 0; bi < b; ++bi)
    for (Index gy = 0; gy < gh; ++gy)
      for (Index gx = 0; gx < gw; ++gx) {
        double ss = 0.0;
        for (Index ci = 0; ci < c; ++ci)
          for (Index py = 0; py < patch; ++py)
            for (Index px = 0; px < patch; ++px) {
              double v = img[((bi * c + ci) * h + gy * patch + py) * w + gx * patch + px];
              u[std::size_t((ci * patch + py) * patch + px)] = v;
              ss += v * v;
            }
        double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
        Index best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (Index code = 0; code < k; ++code) {
          double dist = 0.0;
          for (Index j = 0; j < patch_dim; ++j) {
            double diff = u[std::size_t(j)] * inv - double(codes[code * patch_dim + j]);
            dist += diff * diff;
          }
          if (dist < best_dist) {
            best_dist = dist;
            best = code;
          }
        }
        tokens[std::size_t(bi * L + gy * gw + gx)] = std::int32_t(best);
      }
  return ITensor(Shape{b, L}, std::move(tokens));
}

}  // namespace muxformer
