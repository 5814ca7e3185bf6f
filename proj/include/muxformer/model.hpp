#pragma once

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "muxformer/config.hpp"
#include "muxformer/nn.hpp"
#include "muxformer/plexing.hpp"

namespace muxformer {

// All parameters of one network. Tensors are replaced (never mutated) by the
// optimizer; phi matrices and the codebook are fixed buffers.
struct ModelState {
  ModelConfig cfg;
  std::uint64_t seed = 0;

  PatchifierParams patch;     // cnn front (unused for toy-discrete tokenizer)
  Tensor token_embed;         // [K, dim] toy tokenizer embedding
  Codebook codebook;          // fixed
  std::vector<EncoderLayerParams> projection_layers;
  std::vector<EncoderLayerParams> backbone_layers;
  ProjectionSet mux;          // image-multiplexer only
  ReducerParams reducer;      // concat variants only
  DemuxParams demux;
  Tensor cls_token;           // [dim]
  Tensor final_gamma, final_beta;
  Tensor head_w, head_b;      // [dim, classes]
  Tensor retrieval_w, retrieval_b;  // [dim, K] toy tokenizer only

  bool uses_cnn_patch() const { return cfg.tokenizer != Tokenizer::toy_discrete; }
  bool uses_toy_tokens() const { return cfg.tokenizer == Tokenizer::toy_discrete; }
};

namespace detail {

template <typename Fn>
inline void visit_mlp(const std::string& prefix, ShallowMlpParams& p, bool trainable,
                      const Fn& fn) {
  fn(prefix + ".skip", p.skip, trainable);
  fn(prefix + ".w1", p.w1, trainable);
  fn(prefix + ".b1", p.b1, trainable);
  fn(prefix + ".w2", p.w2, trainable);
  fn(prefix + ".b2", p.b2, trainable);
}

template <typename Fn>
inline void visit_layer(const std::string& prefix, EncoderLayerParams& p, const Fn& fn) {
  fn(prefix + ".ln1_gamma", p.ln1_gamma, true);
  fn(prefix + ".ln1_beta", p.ln1_beta, true);
  fn(prefix + ".qkv_w", p.qkv_w, true);
  fn(prefix + ".qkv_b", p.qkv_b, true);
  fn(prefix + ".proj_w", p.proj_w, true);
  fn(prefix + ".proj_b", p.proj_b, true);
  fn(prefix + ".ln2_gamma", p.ln2_gamma, true);
  fn(prefix + ".ln2_beta", p.ln2_beta, true);
  fn(prefix + ".mlp_w1", p.mlp_w1, true);
  fn(prefix + ".mlp_b1", p.mlp_b1, true);
  fn(prefix + ".mlp_w2", p.mlp_w2, true);
  fn(prefix + ".mlp_b2", p.mlp_b2, true);
}

}  // namespace detail

// Visits every parameter under a stable path name. The key set is a pure
// function of the config; `trainable` is false for fixed buffers.
template <typename Fn>
inline void for_each_param(ModelState& m, const Fn& fn) {
  const ModelConfig& c = m.cfg;
  if (m.uses_cnn_patch()) {
    fn("patch.conv_w", m.patch.conv_w, true);
    fn("patch.conv_b", m.patch.conv_b, true);
  } else {
    fn("codebook.vectors", m.codebook.vectors, false);
    fn("embed.table", m.token_embed, true);
  }
  fn("patch.pos_emb", m.patch.pos_emb, true);
  for (std::size_t i = 0; i < m.projection_layers.size(); ++i)
    detail::visit_layer("proj_layers." + std::to_string(i), m.projection_layers[i], fn);
  for (std::size_t i = 0; i < m.backbone_layers.size(); ++i)
    detail::visit_layer("backbone." + std::to_string(i), m.backbone_layers[i], fn);
  if (c.variant == Variant::image_multiplexer) {
    for (std::size_t i = 0; i < m.mux.phi.size(); ++i) {
      fn("mux." + std::to_string(i) + ".phi", m.mux.phi[i], false);
      detail::visit_mlp("mux." + std::to_string(i), m.mux.mlps[i], true, fn);
    }
  }
  if (c.has_reducer()) {
    fn("reducer.conv_w", m.reducer.conv_w, true);
    fn("reducer.conv_b", m.reducer.conv_b, true);
    if (c.use_slot_embeddings) fn("reducer.slot_emb", m.reducer.slot_emb, true);
  }
  if (c.has_demux())
    for (std::size_t i = 0; i < m.demux.heads.size(); ++i)
      detail::visit_mlp("demux." + std::to_string(i), m.demux.heads[i], true, fn);
  fn("cls_token", m.cls_token, true);
  fn("final_norm.gamma", m.final_gamma, true);
  fn("final_norm.beta", m.final_beta, true);
  fn("head.w", m.head_w, true);
  fn("head.b", m.head_b, true);
  if (m.uses_toy_tokens()) {
    fn("retrieval.w", m.retrieval_w, true);
    fn("retrieval.b", m.retrieval_b, true);
  }
}

template <typename Fn>
inline void for_each_param(const ModelState& m, const Fn& fn) {
  for_each_param(const_cast<ModelState&>(m),
                 [&fn](const std::string& key, Tensor& t, bool trainable) {
                   fn(key, const_cast<const Tensor&>(t), trainable);
                 });
}

inline std::vector<std::string> param_keys(const ModelState& m) {
  std::vector<std::string> keys;
  for_each_param(m, [&](const std::string& k, const Tensor&, bool) { keys.push_back(k); });
  std::sort(keys.begin(), keys.end());
  return keys;
}

inline Index param_count(const ModelState& m, bool trainable_only = true) {
  Index total = 0;
  for_each_param(m, [&](const std::string&, const Tensor& t, bool trainable) {
    if (trainable || !trainable_only) total += t.numel();
  });
  return total;
}

// Deterministic per (config, seed). Wiring per variant:
//   concatplexer      patchify -> concat_point layers per image -> reduce+concat
//                     -> CLS -> remaining layers -> per-slot demux -> head
//   reduced-no-concat same, but groups stay separate length-L/N sequences
//   image-multiplexer patchify -> token-wise multiplex -> CLS -> all layers
//                     -> per-slot demux -> head
//   vit               patchify -> CLS -> all layers -> head
inline ModelState build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState m;
  m.cfg = cfg;
  m.seed = seed;
  Rng root(mix64(seed) ^ hash_str("muxformer.model"));

  Index d = cfg.dim, L = cfg.token_len(), n = cfg.effective_n_mux();
  {
    Rng s = root.fork("patch");
    if (m.uses_cnn_patch()) {
      m.patch = make_patchifier(s, d, cfg.channels, cfg.image_size, cfg.patch_size);
    } else {
      m.codebook = make_codebook(cfg.codebook_size, cfg.channels * cfg.patch_size * cfg.patch_size,
                                 mix64(seed) ^ hash_str("muxformer.codebook"));
      m.token_embed = param_trunc_normal(s, {cfg.codebook_size, d});
      m.patch.pos_emb = param_trunc_normal(s, {L, d});
    }
  }

  Index proj_layers = 0, backbone_layers = cfg.total_layers;
  if (cfg.variant == Variant::concatplexer || cfg.variant == Variant::reduced_no_concat) {
    proj_layers = cfg.concat_point;
    backbone_layers = cfg.total_layers - cfg.concat_point;
  }
  for (Index i = 0; i < proj_layers; ++i) {
    Rng s = root.fork("proj_layers." + std::to_string(i));
    m.projection_layers.push_back(make_encoder_layer(s, d, cfg.mlp_ratio));
  }
  for (Index i = 0; i < backbone_layers; ++i) {
    Rng s = root.fork("backbone." + std::to_string(i));
    m.backbone_layers.push_back(make_encoder_layer(s, d, cfg.mlp_ratio));
  }

  if (cfg.variant == Variant::image_multiplexer)
    m.mux = make_orthogonal_projections(n, d, mix64(seed) ^ hash_str("muxformer.mux"));
  if (cfg.has_reducer()) {
    Rng s = root.fork("reducer");
    m.reducer = make_reducer(s, n, d, cfg.use_slot_embeddings);
  }
  if (cfg.has_demux()) {
    Rng s = root.fork("demux");
    m.demux = make_demux(s, n, d, cfg.demux_width());
  }

  {
    Rng s = root.fork("head");
    m.cls_token = param_trunc_normal(s, {d});
    m.final_gamma = param_ones({d});
    m.final_beta = param_zeros({d});
    m.head_w = param_trunc_normal(s, {d, cfg.num_classes});
    m.head_b = param_zeros({cfg.num_classes});
    if (m.uses_toy_tokens()) {
      m.retrieval_w = param_trunc_normal(s, {d, cfg.codebook_size});
      m.retrieval_b = param_zeros({cfg.codebook_size});
    }
  }
  return m;
}

struct ForwardResult {
  Tensor logits;          // [B, classes], group-major row order
  Tensor cls_embeddings;  // [B, dim], demuxed per-slot representations
  std::vector<Tensor> pre_concat_tokens;  // N x [b/N, L, dim]
  std::vector<Tensor> demuxed_tokens;     // N x [b/N, L, dim] (toy tokenizer path)
  Index backbone_tokens = 0;              // sequence length entering the backbone
};

namespace detail {

inline Tensor tokens_for_group(Tape* tape, const ModelState& m, const Tensor& images) {
  ops::OpScope scope("patchify");
  if (m.uses_cnn_patch()) return cnn_patchify(tape, images, m.patch, m.cfg.patch_size);
  ITensor ids = toy_discrete_patchify(images, m.codebook, m.cfg.patch_size);
  Tensor tok = ops::embedding_lookup(tape, m.token_embed, ids);
  return ops::add(tape, tok, ops::broadcast0(tape, m.patch.pos_emb, images.dim(0)));
}

inline Tensor prepend_cls(Tape* tape, const ModelState& m, const Tensor& tokens) {
  Index b = tokens.dim(0), d = tokens.dim(2);
  Tensor cls = ops::broadcast0(tape, ops::reshape(tape, m.cls_token, {1, d}), b);
  return ops::concat(tape, {cls, tokens}, 1);
}

inline Tensor run_backbone(Tape* tape, const ModelState& m, Tensor seq) {
  for (std::size_t i = 0; i < m.backbone_layers.size(); ++i) {
    ops::OpScope scope("backbone." + std::to_string(i));
    seq = encoder_layer(tape, seq, m.backbone_layers[i], m.cfg.heads);
  }
  ops::OpScope scope("final_norm");
  return ops::layernorm(tape, seq, m.final_gamma, m.final_beta);
}

inline Tensor cls_of(Tape* tape, const Tensor& seq) {
  Index b = seq.dim(0), d = seq.dim(2);
  return ops::reshape(tape, ops::slice(tape, seq, 1, 0, 1), {b, d});
}

// Demux per slot, classify, and stack the slots group-major.
inline void demux_and_classify(Tape* tape, const ModelState& m,
                               const std::vector<Tensor>& cls_per_slot, ForwardResult& out) {
  std::vector<Tensor> embeddings, logits;
  for (std::size_t i = 0; i < cls_per_slot.size(); ++i) {
    ops::OpScope scope("demux." + std::to_string(i));
    Tensor y = m.cfg.has_demux()
                   ? demultiplex(tape, cls_per_slot[i], Index(i), m.demux)
                   : cls_per_slot[i];
    embeddings.push_back(y);
    ops::OpScope head_scope("head");
    logits.push_back(classifier_head(tape, y, m.head_w, m.head_b));
  }
  out.cls_embeddings = embeddings.size() == 1
                           ? embeddings[0]
                           : ops::concat(tape, std::span<const Tensor>(embeddings), 0);
  out.logits = logits.size() == 1 ? logits[0]
                                  : ops::concat(tape, std::span<const Tensor>(logits), 0);
}

}  // namespace detail

// Runs the post-patchifier part of the network on per-group token tensors
// (the projection layers already applied). Used by the forward pass and by
// the label-smoothing loss, which substitutes mixed tokens for one slot.
inline ForwardResult forward_from_pre_concat(Tape* tape, const ModelState& m,
                                             const std::vector<Tensor>& pre_tokens,
                                             bool want_demuxed_tokens = false) {
  const ModelConfig& c = m.cfg;
  Index n = c.effective_n_mux();
  if (Index(pre_tokens.size()) != n)
    throw ContractError("forward: expected " + std::to_string(n) + " groups, got " +
                        std::to_string(pre_tokens.size()));
  ForwardResult out;
  out.pre_concat_tokens = pre_tokens;

  switch (c.variant) {
    case Variant::concatplexer: {
      Tensor seq;
      {
        ops::OpScope scope("reducer");
        seq = concat_multiplex(tape, std::span<const Tensor>(pre_tokens), m.reducer);
      }
      seq = detail::prepend_cls(tape, m, seq);
      out.backbone_tokens = seq.dim(1);
      seq = detail::run_backbone(tape, m, seq);
      Tensor cls = detail::cls_of(tape, seq);
      std::vector<Tensor> per_slot(std::size_t(n), cls);
      detail::demux_and_classify(tape, m, per_slot, out);
      break;
    }
    case Variant::reduced_no_concat: {
      std::vector<Tensor> cls_per_slot;
      for (Index i = 0; i < n; ++i) {
        Tensor reduced;
        {
          ops::OpScope scope("reducer");
          std::vector<Tensor> one{pre_tokens[std::size_t(i)]};
          ReducerParams r = m.reducer;
          // same conv, but the group keeps its own short sequence
          reduced = ops::conv1d(tape, one[0], r.conv_w, r.conv_b, r.n_mux);
          if (r.use_slot_embeddings) {
            Index d = r.slot_emb.dim(1);
            Tensor slot = ops::reshape(tape, ops::slice(tape, r.slot_emb, 0, i, 1), {d});
            reduced = ops::add(tape, reduced, slot);
          }
        }
        Tensor seq = detail::prepend_cls(tape, m, reduced);
        out.backbone_tokens = seq.dim(1);
        seq = detail::run_backbone(tape, m, seq);
        cls_per_slot.push_back(detail::cls_of(tape, seq));
      }
      detail::demux_and_classify(tape, m, cls_per_slot, out);
      break;
    }
    case Variant::image_multiplexer: {
      Tensor muxed;
      {
        ops::OpScope scope("mux");
        muxed = multiplex(tape, std::span<const Tensor>(pre_tokens), m.mux);
      }
      Tensor seq = detail::prepend_cls(tape, m, muxed);
      out.backbone_tokens = seq.dim(1);
      seq = detail::run_backbone(tape, m, seq);
      Tensor cls = detail::cls_of(tape, seq);
      std::vector<Tensor> per_slot(std::size_t(n), cls);
      detail::demux_and_classify(tape, m, per_slot, out);
      if (want_demuxed_tokens) {
        Index b = seq.dim(0), L = seq.dim(1) - 1, d = seq.dim(2);
        Tensor body = ops::reshape(tape, ops::slice(tape, seq, 1, 1, L), {b * L, d});
        for (Index i = 0; i < n; ++i) {
          ops::OpScope scope("demux_tokens." + std::to_string(i));
          out.demuxed_tokens.push_back(
              ops::reshape(tape, demultiplex(tape, body, i, m.demux), {b, L, d}));
        }
      }
      break;
    }
    case Variant::vit: {
      Tensor seq = detail::prepend_cls(tape, m, pre_tokens[0]);
      out.backbone_tokens = seq.dim(1);
      seq = detail::run_backbone(tape, m, seq);
      std::vector<Tensor> per_slot{detail::cls_of(tape, seq)};
      detail::demux_and_classify(tape, m, per_slot, out);
      break;
    }
  }
  return out;
}

// Full forward from image groups (each [b/N, C, H, W]; slot i stays slot i).
inline ForwardResult forward(Tape* tape, const ModelState& m,
                             const std::vector<Tensor>& groups,
                             bool want_demuxed_tokens = false) {
  const ModelConfig& c = m.cfg;
  Index n = c.effective_n_mux();
  if (Index(groups.size()) != n)
    throw ContractError("forward: expected " + std::to_string(n) + " groups, got " +
                        std::to_string(groups.size()));
  for (const Tensor& g : groups)
    if (g.shape() != groups[0].shape())
      throw ContractError("forward: per-group batch sizes differ, " +
                          shape_str(g.shape()) + " vs " + shape_str(groups[0].shape()));

  std::vector<Tensor> pre_tokens;
  pre_tokens.reserve(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    Tensor tok = detail::tokens_for_group(tape, m, groups[gi]);
    for (std::size_t li = 0; li < m.projection_layers.size(); ++li) {
      ops::OpScope scope("proj_layers." + std::to_string(li));
      tok = encoder_layer(tape, tok, m.projection_layers[li], c.heads);
    }
    pre_tokens.push_back(tok);
  }
  return forward_from_pre_concat(tape, m, pre_tokens, want_demuxed_tokens);
}

// ---------------------------------------------------------------------------
// Checkpoint format: "MUXF", version u32, length-prefixed config JSON, seed
// u64, param count u64, then (key, rank, dims, f32 data) sorted by key.
// Little-endian throughout.

namespace detail {

inline void write_bytes(std::ofstream& f, const void* p, std::size_t n) {
  f.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

template <typename T>
inline void write_pod(std::ofstream& f, T v) {
  write_bytes(f, &v, sizeof(T));
}

inline void read_bytes(std::ifstream& f, void* p, std::size_t n, const char* what) {
  f.read(reinterpret_cast<char*>(p), std::streamsize(n));
  if (std::size_t(f.gcount()) != n)
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what +
                          " at byte " + std::to_string(std::streamoff(f.tellg())));
}

template <typename T>
inline T read_pod(std::ifstream& f, const char* what) {
  T v{};
  read_bytes(f, &v, sizeof(T), what);
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'M', 'U', 'X', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ModelState& m, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");

  detail::write_bytes(f, kCheckpointMagic, 4);
  detail::write_pod<std::uint32_t>(f, kCheckpointVersion);
  std::string cfg = to_json(m.cfg).dump();
  detail::write_pod<std::uint32_t>(f, std::uint32_t(cfg.size()));
  detail::write_bytes(f, cfg.data(), cfg.size());
  detail::write_pod<std::uint64_t>(f, m.seed);

  std::map<std::string, Tensor> sorted;
  for_each_param(m, [&](const std::string& k, const Tensor& t, bool) { sorted.emplace(k, t); });
  detail::write_pod<std::uint64_t>(f, sorted.size());
  for (const auto& [key, t] : sorted) {
    detail::write_pod<std::uint32_t>(f, std::uint32_t(key.size()));
    detail::write_bytes(f, key.data(), key.size());
    detail::write_pod<std::uint32_t>(f, std::uint32_t(t.rank()));
    for (Index d : t.shape()) detail::write_pod<std::uint64_t>(f, std::uint64_t(d));
    detail::write_bytes(f, t.data(), sizeof(float) * std::size_t(t.numel()));
  }
  if (!f) throw CheckpointError("write failed for " + path);
}

inline ModelState load_checkpoint(const std::string& path,
                                  const ModelConfig* expected = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);

  char magic[4];
  detail::read_bytes(f, magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad magic in " + path + ", not a muxformer checkpoint");
  auto version = detail::read_pod<std::uint32_t>(f, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  auto cfg_len = detail::read_pod<std::uint32_t>(f, "config length");
  std::string cfg_text(cfg_len, '\0');
  detail::read_bytes(f, cfg_text.data(), cfg_len, "config");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(Json::parse(cfg_text));
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint config does not parse: ") + e.what());
  }
  auto seed = detail::read_pod<std::uint64_t>(f, "seed");

  if (expected) {
    if (to_json(*expected).dump() != to_json(cfg).dump())
      throw CheckpointError("checkpoint config mismatch: file has " + to_json(cfg).dump() +
                            ", expected " + to_json(*expected).dump());
  }

  ModelState m = build_model(cfg, seed);
  std::map<std::string, std::pair<Shape, std::vector<float>>> entries;
  auto count = detail::read_pod<std::uint64_t>(f, "param count");
  for (std::uint64_t i = 0; i < count; ++i) {
    auto key_len = detail::read_pod<std::uint32_t>(f, "key length");
    std::string key(key_len, '\0');
    detail::read_bytes(f, key.data(), key_len, "key");
    auto rank = detail::read_pod<std::uint32_t>(f, "rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(Index(detail::read_pod<std::uint64_t>(f, "dims")));
    std::vector<float> data(static_cast<std::size_t>(numel_of(shape)));
    detail::read_bytes(f, data.data(), sizeof(float) * data.size(), key.c_str());
    entries.emplace(std::move(key), std::make_pair(std::move(shape), std::move(data)));
  }

  for_each_param(m, [&](const std::string& key, Tensor& t, bool trainable) {
    auto it = entries.find(key);
    if (it == entries.end())
      throw CheckpointError("checkpoint is missing parameter " + key);
    if (it->second.first != t.shape())
      throw CheckpointError("checkpoint shape mismatch for " + key + ": file has " +
                            shape_str(it->second.first) + ", model needs " +
                            shape_str(t.shape()));
    Tensor fresh(it->second.first, std::move(it->second.second));
    t = trainable ? fresh.as_param() : fresh;
    entries.erase(it);
  });
  if (!entries.empty())
    throw CheckpointError("checkpoint has unknown parameter " + entries.begin()->first);
  return m;
}

}  // namespace muxformer
