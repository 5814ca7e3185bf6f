#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "muxformer/config.hpp"

namespace muxformer {

// Counting convention: one multiply-accumulate is one FLOP. Matmuls and
// convolutions are priced (including the attention QK^T and AV products);
// softmax, layernorm, activations, and bias adds are not.
namespace cost {

inline std::uint64_t u(Index v) { return std::uint64_t(v); }

// One encoder layer on a length-T sequence: qkv, QK^T, AV, output projection,
// and the two MLP matmuls.
inline std::uint64_t encoder_layer_macs(Index T, Index d, Index r) {
  return u(T) * u(d) * u(d) * u(4 + 2 * r) + 2 * u(T) * u(T) * u(d);
}

inline std::uint64_t shallow_mlp_macs(Index rows, Index d, Index h) {
  return u(rows) * (u(d) * u(d) + 2 * u(d) * u(h));
}

struct StageMacs {
  std::uint64_t patchify = 0;
  std::uint64_t projection = 0;
  std::uint64_t reducer = 0;
  std::uint64_t backbone = 0;
  std::uint64_t demux = 0;
  std::uint64_t head = 0;
  std::uint64_t total() const {
    return patchify + projection + reducer + backbone + demux + head;
  }
};

// Exact MAC count for a forward pass on `group` images per slot (so
// group * n_mux images in total). Matches the tape instrumentation of the
// matmul/conv op set for cnn/tre tokenizers; the toy tokenizer's codebook
// scan is priced here analytically but runs outside the tape.
inline StageMacs macs_for_groups(const ModelConfig& c, Index group) {
  StageMacs s;
  Index L = c.token_len(), d = c.dim, n = c.effective_n_mux();
  Index images = group * n;
  Index patch_dim = c.channels * c.patch_size * c.patch_size;

  if (c.tokenizer == Tokenizer::toy_discrete) {
    s.patchify = u(images) * u(L) * u(c.codebook_size) * u(patch_dim);
  } else {
    s.patchify = u(images) * u(L) * u(d) * u(patch_dim);
  }

  switch (c.variant) {
    case Variant::concatplexer:
      s.projection = u(images) * u(c.concat_point) * encoder_layer_macs(L, d, c.mlp_ratio);
      s.reducer = u(images) * u(L) * u(d) * u(d);
      s.backbone = u(group) * u(c.total_layers - c.concat_point) *
                   encoder_layer_macs(L + 1, d, c.mlp_ratio);
      break;
    case Variant::reduced_no_concat:
      s.projection = u(images) * u(c.concat_point) * encoder_layer_macs(L, d, c.mlp_ratio);
      s.reducer = u(images) * u(L) * u(d) * u(d);
      s.backbone = u(images) * u(c.total_layers - c.concat_point) *
                   encoder_layer_macs(L / n + 1, d, c.mlp_ratio);
      break;
    case Variant::image_multiplexer:
      // phi projection plus the shallow mux MLP at every token position
      s.projection = u(images) * u(L) * (u(d) * u(d) + shallow_mlp_macs(1, d, d));
      s.backbone = u(group) * u(c.total_layers) * encoder_layer_macs(L + 1, d, c.mlp_ratio);
      break;
    case Variant::vit:
      s.backbone = u(images) * u(c.total_layers) * encoder_layer_macs(L + 1, d, c.mlp_ratio);
      break;
  }
  if (c.has_demux()) s.demux = u(images) * shallow_mlp_macs(1, d, c.demux_width());
  s.head = u(images) * u(d) * u(c.num_classes);
  return s;
}

inline Index trainable_params(const ModelConfig& c) {
  Index d = c.dim, L = c.token_len(), r = c.mlp_ratio, n = c.effective_n_mux();
  auto enc = [&] { return (4 + 2 * r) * d * d + (9 + r) * d; };
  auto shallow = [&](Index h) { return d * d + 2 * d * h + h + d; };

  Index p = 0;
  if (c.tokenizer == Tokenizer::toy_discrete) {
    p += c.codebook_size * d;                       // token embedding
    p += d * c.codebook_size + c.codebook_size;     // retrieval head
  } else {
    p += d * c.channels * c.patch_size * c.patch_size + d;  // patch conv
  }
  p += L * d;  // positional embedding
  Index proj_layers = 0, backbone_layers = c.total_layers;
  if (c.variant == Variant::concatplexer || c.variant == Variant::reduced_no_concat) {
    proj_layers = c.concat_point;
    backbone_layers = c.total_layers - c.concat_point;
  }
  p += (proj_layers + backbone_layers) * enc();
  if (c.variant == Variant::image_multiplexer) p += n * shallow(d);
  if (c.has_reducer()) {
    p += d * n * d + d;
    if (c.use_slot_embeddings) p += n * d;
  }
  if (c.has_demux()) p += n * shallow(c.demux_width());
  p += d;      // cls token
  p += 2 * d;  // final norm
  p += d * c.num_classes + c.num_classes;
  return p;
}

}  // namespace cost

// Per-image FLOPs broken down by stage. Shared backbone work is attributed
// per image by dividing the sequence cost by n_mux.
struct FlopsReport {
  ModelConfig cfg;
  double patchify = 0, projection = 0, reducer = 0, backbone = 0, demux = 0, head = 0;
  double total = 0;
  Index params = 0;

  double gflops() const { return total / 1e9; }
  std::vector<std::pair<std::string, double>> stages() const {
    return {{"patchify", patchify}, {"projection_layers", projection},
            {"reducer", reducer},   {"backbone_layers", backbone},
            {"demux", demux},       {"head", head}};
  }
};

inline FlopsReport flops_per_image(const ModelConfig& cfg) {
  cfg.validate();
  cost::StageMacs macs = cost::macs_for_groups(cfg, 1);
  double inv = 1.0 / double(cfg.effective_n_mux());
  FlopsReport r;
  r.cfg = cfg;
  r.patchify = double(macs.patchify) * inv;
  r.projection = double(macs.projection) * inv;
  r.reducer = double(macs.reducer) * inv;
  r.backbone = double(macs.backbone) * inv;
  r.demux = double(macs.demux) * inv;
  r.head = double(macs.head) * inv;
  r.total = double(macs.total()) * inv;
  r.params = cost::trainable_params(cfg);
  return r;
}

struct FlopsComparison {
  double ratio = 0;            // flops(a) / flops(b)
  double percent_savings = 0;  // 100 * (1 - ratio)
  std::vector<std::pair<std::string, double>> stage_deltas;  // a - b per stage
};

inline FlopsComparison compare_flops(const ModelConfig& a, const ModelConfig& b) {
  FlopsReport ra = flops_per_image(a), rb = flops_per_image(b);
  FlopsComparison c;
  c.ratio = ra.total / rb.total;
  c.percent_savings = 100.0 * (1.0 - c.ratio);
  auto sa = ra.stages(), sb = rb.stages();
  for (std::size_t i = 0; i < sa.size(); ++i)
    c.stage_deltas.emplace_back(sa[i].first, sa[i].second - sb[i].second);
  return c;
}

inline std::string format_flops_report(const FlopsReport& r) {
  std::ostringstream os;
  os << "model " << to_string(r.cfg.variant) << "  image " << r.cfg.image_size << "  patch "
     << r.cfg.patch_size << "  dim " << r.cfg.dim << "  layers " << r.cfg.total_layers
     << "  concat_point " << r.cfg.concat_point << "  n_mux " << r.cfg.n_mux << "\n";
  os << std::fixed;
  for (const auto& [name, flops] : r.stages())
    os << "  " << std::setw(18) << std::left << name << std::setw(12) << std::right
       << std::setprecision(4) << flops / 1e9 << " G  " << std::setw(6)
       << std::setprecision(2) << (r.total > 0 ? 100.0 * flops / r.total : 0.0) << "%\n";
  os << "  " << std::setw(18) << std::left << "total" << std::setw(12) << std::right
     << std::setprecision(4) << r.gflops() << " G  params " << r.params << "\n";
  return os.str();
}

inline std::string format_flops_csv(const FlopsReport& r) {
  std::ostringstream os;
  os << "stage,flops,share\n";
  os << std::setprecision(17);
  for (const auto& [name, flops] : r.stages())
    os << name << "," << flops << "," << (r.total > 0 ? flops / r.total : 0.0) << "\n";
  os << "total," << r.total << ",1\n";
  return os.str();
}

}  // namespace muxformer
