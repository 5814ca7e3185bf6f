#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "muxformer/model.hpp"
#include "muxformer/ops.hpp"
#include "muxformer/rng.hpp"

namespace muxformer {

struct LossConfig {
  float alpha = 0.7f;        // Eq.-style label smoothing mix weight
  float temperature = 0.07f;  // contrastive temperature
  float lambda_ce = 1.0f;
  float lambda_smooth = 0.0f;
  float lambda_clip = 0.0f;
  float lambda_retrieval = 0.0f;

  void validate(Index n_mux) const {
    if (lambda_ce < 0 || lambda_smooth < 0 || lambda_clip < 0 || lambda_retrieval < 0)
      throw ConfigError("loss: lambda weights must be >= 0");
    if (temperature <= 0) throw ConfigError("loss: temperature must be positive");
    if (lambda_smooth > 0) {
      float lo = 1.0f / float(n_mux);
      if (alpha < lo - 1e-6f || alpha > 1.0f + 1e-6f)
        throw ConfigError("loss: alpha " + std::to_string(alpha) + " outside [1/" +
                          std::to_string(n_mux) + ", 1]");
    }
  }
};

inline Json to_json(const LossConfig& c) {
  return Json{{"alpha", c.alpha},
              {"temperature", c.temperature},
              {"lambda_ce", c.lambda_ce},
              {"lambda_smooth", c.lambda_smooth},
              {"lambda_clip", c.lambda_clip},
              {"lambda_retrieval", c.lambda_retrieval}};
}

inline LossConfig loss_config_from_json(const Json& j) {
  LossConfig c;
  c.alpha = j.value("alpha", 0.7f);
  c.temperature = j.value("temperature", 0.07f);
  c.lambda_ce = j.value("lambda_ce", 1.0f);
  c.lambda_smooth = j.value("lambda_smooth", 0.0f);
  c.lambda_clip = j.value("lambda_clip", 0.0f);
  c.lambda_retrieval = j.value("lambda_retrieval", 0.0f);
  return c;
}

inline Tensor one_hot_rows(std::span<const int> labels, Index classes) {
  std::vector<float> t(static_cast<std::size_t>(Index(labels.size()) * classes), 0.0f);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || Index(labels[r]) >= classes)
      throw ContractError("one_hot: label " + std::to_string(labels[r]) +
                          " out of range [0," + std::to_string(classes) + ")");
    t[r * std::size_t(classes) + std::size_t(labels[r])] = 1.0f;
  }
  return Tensor(Shape{Index(labels.size()), classes}, std::move(t));
}

// Mean cross-entropy between softmax(logits) and a target distribution.
inline Tensor cross_entropy(Tape* tape, const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) +
                         " vs targets " + shape_str(targets.shape()));
  Index rows = targets.dim(0), k = targets.dim(1);
  for (Index r = 0; r < rows; ++r) {
    double s = 0.0;
    for (Index j = 0; j < k; ++j) s += double(targets.at({r, j}));
    if (std::abs(s - 1.0) > 1e-5)
      throw ContractError("cross_entropy: target row " + std::to_string(r) +
                          " sums to " + std::to_string(s) + ", expected 1");
  }
  return ops::softmax_xent(tape, logits, targets);
}

inline Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> labels) {
  if (Index(labels.size()) != logits.dim(0))
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  return ops::softmax_xent(tape, logits, one_hot_rows(labels, logits.dim(1)));
}

// Label-smoothing mix loss: slot i's tokens are replaced by the alpha-weighted
// average of all slots' tokens, pushed through the rest of the network, and
// scored against the matching alpha-smoothed label mixture; averaged over i.
inline Tensor mix_smooth_loss(Tape* tape, const ModelState& m,
                              const std::vector<Tensor>& pre_concat_tokens,
                              const std::vector<std::vector<int>>& labels, float alpha) {
  Index n = Index(pre_concat_tokens.size());
  if (n < 1 || Index(labels.size()) != n)
    throw ContractError("mix_smooth_loss: need one label group per token group");
  float lo = 1.0f / float(n);
  if (alpha < lo - 1e-6f || alpha > 1.0f + 1e-6f)
    throw ContractError("mix_smooth_loss: alpha " + std::to_string(alpha) +
                        " outside [1/" + std::to_string(n) + ", 1]");
  Index classes = m.cfg.num_classes;
  Index group = pre_concat_tokens[0].dim(0);
  float off_weight = n > 1 ? (1.0f - alpha) / float(n - 1) : 0.0f;

  Tensor total;
  for (Index i = 0; i < n; ++i) {
    // token mixture for slot i (zero-weight terms are dropped, so alpha = 1
    // reproduces the plain forward bitwise)
    Tensor mixed = alpha == 1.0f ? pre_concat_tokens[std::size_t(i)]
                                 : ops::scale(tape, pre_concat_tokens[std::size_t(i)], alpha);
    if (off_weight != 0.0f)
      for (Index o = 0; o < n; ++o) {
        if (o == i) continue;
        mixed = ops::add(tape, mixed,
                         ops::scale(tape, pre_concat_tokens[std::size_t(o)], off_weight));
      }
    std::vector<Tensor> groups = pre_concat_tokens;
    groups[std::size_t(i)] = mixed;
    ForwardResult out = forward_from_pre_concat(tape, m, groups);
    Tensor slot_logits = ops::slice(tape, out.logits, 0, i * group, group);

    // matching smoothed label mixture
    std::vector<float> target(static_cast<std::size_t>(group * classes), 0.0f);
    for (Index r = 0; r < group; ++r) {
      auto bump = [&](int label, float w) {
        if (label < 0 || Index(label) >= classes)
          throw ContractError("mix_smooth_loss: label out of range");
        target[std::size_t(r * classes + label)] += w;
      };
      bump(labels[std::size_t(i)][std::size_t(r)], alpha);
      if (off_weight != 0.0f)
        for (Index o = 0; o < n; ++o)
          if (o != i) bump(labels[std::size_t(o)][std::size_t(r)], off_weight);
    }
    Tensor slot_loss =
        ops::softmax_xent(tape, slot_logits, Tensor(Shape{group, classes}, std::move(target)));
    total = i == 0 ? slot_loss : ops::add(tape, total, slot_loss);
  }
  return n == 1 ? total : ops::scale(tape, total, 1.0f / float(n));
}

// Symmetric InfoNCE between projected CLS embeddings and fixed teacher rows.
inline Tensor contrastive_teacher_loss(Tape* tape, const Tensor& cls, const Tensor& teacher,
                                       const Tensor& proj_w, const Tensor& proj_b,
                                       float temperature) {
  if (cls.rank() != 2 || teacher.rank() != 2 || cls.dim(0) != teacher.dim(0))
    throw DimensionError("contrastive: cls " + shape_str(cls.shape()) + " vs teacher " +
                         shape_str(teacher.shape()));
  Index b = cls.dim(0);
  if (b < 2) throw ContractError("contrastive: batch must be >= 2 to provide negatives");
  if (temperature <= 0) throw ContractError("contrastive: temperature must be positive");

  Tensor z = ops::l2norm_last(tape, ops::add(tape, ops::matmul(tape, cls, proj_w), proj_b));
  Tensor t = ops::l2norm_last(tape, teacher);
  Tensor sim = ops::scale(tape, ops::matmul(tape, z, ops::transpose(tape, t, 0, 1)),
                          1.0f / temperature);

  std::vector<float> eye(static_cast<std::size_t>(b * b), 0.0f);
  for (Index i = 0; i < b; ++i) eye[std::size_t(i * b + i)] = 1.0f;
  Tensor targets(Shape{b, b}, std::move(eye));

  Tensor rows = ops::softmax_xent(tape, sim, targets);
  Tensor cols = ops::softmax_xent(tape, ops::transpose(tape, sim, 0, 1), targets);
  return ops::scale(tape, ops::add(tape, rows, cols), 0.5f);
}

// Mean cross-entropy of the retrieval head over every token position.
inline Tensor token_retrieval_loss(Tape* tape, const Tensor& demuxed_tokens,
                                   const ITensor& targets, const Tensor& head_w,
                                   const Tensor& head_b) {
  if (demuxed_tokens.rank() != 3)
    throw DimensionError("token_retrieval: tokens must be [b, L, dim], got " +
                         shape_str(demuxed_tokens.shape()));
  Index b = demuxed_tokens.dim(0), L = demuxed_tokens.dim(1), d = demuxed_tokens.dim(2);
  if (targets.shape != Shape{b, L})
    throw DimensionError("token_retrieval: targets " + shape_str(targets.shape) +
                         " do not match tokens " + shape_str(demuxed_tokens.shape()));
  Index k = head_w.dim(1);
  std::vector<int> flat(targets.data.begin(), targets.data.end());
  for (int t : flat)
    if (t < 0 || Index(t) >= k)
      throw ContractError("token_retrieval: target " + std::to_string(t) +
                          " out of range [0," + std::to_string(k) + ")");
  Tensor logits = ops::add(
      tape, ops::matmul(tape, ops::reshape(tape, demuxed_tokens, {b * L, d}), head_w),
      head_b);
  return ops::softmax_xent(tape, logits, one_hot_rows(flat, k));
}

// ---------------------------------------------------------------------------
// Teacher embeddings: either loaded from a "MUXT" file or generated
// deterministically per (seed, image id). Vectors are unit norm.

struct TeacherEmbeddings {
  Index dim = 0;
  bool generative = false;
  std::uint64_t gen_seed = 0;
  std::string source_path;
  std::map<std::uint64_t, std::vector<float>> rows;

  static TeacherEmbeddings seeded(Index dim, std::uint64_t seed) {
    TeacherEmbeddings t;
    t.dim = dim;
    t.generative = true;
    t.gen_seed = seed;
    return t;
  }

  std::vector<float> vector_for(std::uint64_t id) const {
    if (!generative) {
      auto it = rows.find(id);
      if (it == rows.end())
        throw ContractError("teacher embeddings: no vector for image id " +
                            std::to_string(id));
      return it->second;
    }
    Rng rng(mix64(gen_seed) ^ mix64(id + 0x9e37ull));
    std::vector<double> v(static_cast<std::size_t>(dim));
    double ss = 0.0;
    for (double& x : v) {
      x = rng.normal();
      ss += x * x;
    }
    double inv = 1.0 / std::sqrt(ss);
    std::vector<float> out(static_cast<std::size_t>(dim));
    for (Index j = 0; j < dim; ++j) out[std::size_t(j)] = float(v[std::size_t(j)] * inv);
    return out;
  }

  Tensor lookup(std::span<const std::uint64_t> ids) const {
    std::vector<float> data;
    data.reserve(ids.size() * std::size_t(dim));
    for (std::uint64_t id : ids) {
      std::vector<float> v = vector_for(id);
      data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor(Shape{Index(ids.size()), dim}, std::move(data));
  }
};

inline constexpr char kTeacherMagic[4] = {'M', 'U', 'X', 'T'};
inline constexpr std::uint32_t kTeacherVersion = 1;

inline void save_teacher_embeddings(const TeacherEmbeddings& t, const std::string& path) {
  if (t.generative)
    throw ContractError("save_teacher_embeddings: materialise generative rows first");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(kTeacherMagic, 4);
  std::uint32_t version = kTeacherVersion;
  f.write(reinterpret_cast<const char*>(&version), 4);
  std::uint64_t count = t.rows.size();
  f.write(reinterpret_cast<const char*>(&count), 8);
  std::uint32_t dim = std::uint32_t(t.dim);
  f.write(reinterpret_cast<const char*>(&dim), 4);
  for (const auto& [id, row] : t.rows) {
    f.write(reinterpret_cast<const char*>(&id), 8);
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(4 * row.size()));
  }
  if (!f) throw FormatError("write failed for " + path);
}

inline TeacherEmbeddings load_teacher_embeddings(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  auto need = [&](void* p, std::size_t n, const char* what) {
    f.read(reinterpret_cast<char*>(p), std::streamsize(n));
    if (std::size_t(f.gcount()) != n)
      throw FormatError(std::string("teacher file truncated while reading ") + what +
                        " at byte " + std::to_string(std::streamoff(f.tellg())));
  };
  char magic[4];
  need(magic, 4, "magic");
  if (std::memcmp(magic, kTeacherMagic, 4) != 0)
    throw FormatError("bad magic in " + path + ", not a teacher embedding file");
  std::uint32_t version;
  need(&version, 4, "version");
  if (version != kTeacherVersion)
    throw FormatError("unsupported teacher file version " + std::to_string(version));
  std::uint64_t count;
  need(&count, 8, "count");
  std::uint32_t dim;
  need(&dim, 4, "dim");

  TeacherEmbeddings t;
  t.dim = Index(dim);
  t.source_path = path;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t id;
    need(&id, 8, "image id");
    std::vector<float> row(dim);
    need(row.data(), 4 * std::size_t(dim), "vector");
    double ss = 0.0;
    for (float v : row) ss += double(v) * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-4)
      throw FormatError("teacher vector for id " + std::to_string(id) +
                        " is not unit norm (|v| = " + std::to_string(std::sqrt(ss)) + ")");
    t.rows.emplace(id, std::move(row));
  }
  return t;
}

}  // namespace muxformer
