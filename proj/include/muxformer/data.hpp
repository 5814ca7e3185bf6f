#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "muxformer/errors.hpp"
#include "muxformer/rng.hpp"
#include "muxformer/tensor.hpp"

namespace muxformer {

struct NormStats {
  std::vector<float> mean{0.5f};
  std::vector<float> std{0.5f};
};

// Images live in [0, 1]; normalisation stats are applied when batches are
// assembled into tensors.
struct Dataset {
  Index channels = 0, height = 0, width = 0;
  Index num_classes = 0;
  std::vector<float> images;  // count * C * H * W
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;  // stable per-image ids (source file order)
  NormStats norm;

  Index count() const { return Index(labels.size()); }
  Index image_numel() const { return channels * height * width; }
};

struct DataOptions {
  Index limit = 0;   // keep only the first `limit` records (0 = all)
  Index pad_to = 0;  // zero-pad square images up to this size (0 = keep)
  NormStats norm;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                          const std::string& path) {
  if (off + 4 > b.size())
    throw FormatError(path + ": truncated while reading u32 at byte " + std::to_string(off));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

// IDX (big-endian) image + label pair, the MNIST container format.
// Image magic 0x00000803, label magic 0x00000801.
inline Dataset load_idx_dataset(const std::string& images_path,
                                const std::string& labels_path,
                                const DataOptions& opt = {}) {
  auto img = detail::read_file(images_path);
  auto lab = detail::read_file(labels_path);

  std::uint32_t img_magic = detail::be32(img, 0, images_path);
  if (img_magic != 0x00000803u)
    throw FormatError(images_path + ": bad magic 0x" + std::to_string(img_magic) +
                      " at byte 0, expected 0x803 idx3-ubyte");
  std::uint32_t lab_magic = detail::be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u)
    throw FormatError(labels_path + ": bad magic at byte 0, expected 0x801 idx1-ubyte");

  std::uint64_t n = detail::be32(img, 4, images_path);
  Index rows = Index(detail::be32(img, 8, images_path));
  Index cols = Index(detail::be32(img, 12, images_path));
  std::uint64_t n_labels = detail::be32(lab, 4, labels_path);
  if (n != n_labels)
    throw FormatError(images_path + ": image count " + std::to_string(n) +
                      " does not match label count " + std::to_string(n_labels));
  std::size_t need = 16 + std::size_t(n) * std::size_t(rows * cols);
  if (img.size() < need)
    throw FormatError(images_path + ": truncated image data, need " + std::to_string(need) +
                      " bytes, have " + std::to_string(img.size()) + " (failed at byte " +
                      std::to_string(img.size()) + ")");
  if (lab.size() < 8 + n)
    throw FormatError(labels_path + ": truncated label data (failed at byte " +
                      std::to_string(lab.size()) + ")");

  Index keep = opt.limit > 0 ? std::min<Index>(opt.limit, Index(n)) : Index(n);
  Index out_side = opt.pad_to > 0 ? opt.pad_to : std::max(rows, cols);
  if (out_side < rows || out_side < cols)
    throw ConfigError("pad_to " + std::to_string(opt.pad_to) + " smaller than image " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  Index pad_top = (out_side - rows) / 2, pad_left = (out_side - cols) / 2;

  Dataset d;
  d.channels = 1;
  d.height = out_side;
  d.width = out_side;
  d.norm = opt.norm;
  d.images.assign(std::size_t(keep) * std::size_t(out_side * out_side), 0.0f);
  d.labels.reserve(std::size_t(keep));
  int max_label = 0;
  for (Index i = 0; i < keep; ++i) {
    const unsigned char* src = img.data() + 16 + i * rows * cols;
    float* dst = d.images.data() + i * out_side * out_side;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c)
        dst[(r + pad_top) * out_side + (c + pad_left)] = float(src[r * cols + c]) / 255.0f;
    int label = int(lab[std::size_t(8 + i)]);
    max_label = std::max(max_label, label);
    d.labels.push_back(label);
    d.ids.push_back(std::uint64_t(i));
  }
  d.num_classes = max_label + 1;
  return d;
}

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (32x32, channel-planar RGB).
inline Dataset load_cifar_dataset(const std::vector<std::string>& batch_files,
                                  const DataOptions& opt = {}) {
  constexpr Index kRecord = 3073;
  Dataset d;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.num_classes = 10;
  d.norm = opt.norm;
  std::uint64_t next_id = 0;
  for (const std::string& path : batch_files) {
    auto bytes = detail::read_file(path);
    if (bytes.size() % std::size_t(kRecord) != 0)
      throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                        " is not a multiple of the 3073-byte record (failed at byte " +
                        std::to_string((bytes.size() / kRecord) * kRecord) + ")");
    Index records = Index(bytes.size()) / kRecord;
    for (Index r = 0; r < records; ++r) {
      if (opt.limit > 0 && d.count() >= opt.limit) return d;
      const unsigned char* rec = bytes.data() + r * kRecord;
      int label = int(rec[0]);
      if (label >= 10)
        throw FormatError(path + ": label " + std::to_string(label) +
                          " out of range at byte " + std::to_string(r * kRecord));
      d.labels.push_back(label);
      d.ids.push_back(next_id++);
      for (Index px = 0; px < 3072; ++px)
        d.images.push_back(float(rec[1 + px]) / 255.0f);
    }
  }
  return d;
}

// Convenience entry point keyed by format name. For idx-ubyte, `path` is the
// image file and the matching label file is found by the standard naming
// convention (images-idx3 -> labels-idx1).
inline Dataset load_dataset(const std::string& path, const std::string& format,
                            const DataOptions& opt = {}) {
  if (format == "idx-ubyte") {
    std::string labels = path;
    std::size_t at = labels.find("images-idx3");
    if (at == std::string::npos)
      throw ConfigError("cannot derive the label file from " + path +
                        "; expected 'images-idx3' in the name");
    labels.replace(at, std::string("images-idx3").size(), "labels-idx1");
    return load_idx_dataset(path, labels, opt);
  }
  if (format == "cifar-binary") return load_cifar_dataset({path}, opt);
  throw ConfigError("unknown dataset format: " + format);
}

// ---------------------------------------------------------------------------
// Normalisation

inline void check_norm(const NormStats& n, Index channels) {
  if (Index(n.mean.size()) != channels || Index(n.std.size()) != channels)
    throw ConfigError("normalization stats must have one entry per channel");
  for (float s : n.std)
    if (s == 0.0f) throw ConfigError("normalization std must be non-zero");
}

inline Tensor normalize(const Tensor& images, const NormStats& n) {
  Index c = images.dim(1), plane = images.dim(2) * images.dim(3);
  check_norm(n, c);
  std::vector<float> out(images.values().begin(), images.values().end());
  for (Index i = 0; i < images.dim(0); ++i)
    for (Index ch = 0; ch < c; ++ch) {
      float m = n.mean[std::size_t(ch)], s = n.std[std::size_t(ch)];
      float* p = out.data() + (i * c + ch) * plane;
      for (Index j = 0; j < plane; ++j) p[j] = (p[j] - m) / s;
    }
  return Tensor(images.shape(), std::move(out));
}

inline Tensor denormalize(const Tensor& images, const NormStats& n) {
  Index c = images.dim(1), plane = images.dim(2) * images.dim(3);
  check_norm(n, c);
  std::vector<float> out(images.values().begin(), images.values().end());
  for (Index i = 0; i < images.dim(0); ++i)
    for (Index ch = 0; ch < c; ++ch) {
      float m = n.mean[std::size_t(ch)], s = n.std[std::size_t(ch)];
      float* p = out.data() + (i * c + ch) * plane;
      for (Index j = 0; j < plane; ++j) p[j] = p[j] * s + m;
    }
  return Tensor(images.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Multiplex batches: slot i of a batch always corresponds to input slot i
// through forward, losses, and metrics.

struct MuxBatch {
  std::vector<Tensor> groups;                   // N x [b/N, C, H, W], normalised
  std::vector<std::vector<int>> labels;         // N x b/N
  std::vector<std::vector<std::uint64_t>> ids;  // N x b/N

  Index total_images() const {
    Index t = 0;
    for (const auto& l : labels) t += Index(l.size());
    return t;
  }
  std::vector<int> flat_labels() const {
    std::vector<int> out;
    for (const auto& l : labels) out.insert(out.end(), l.begin(), l.end());
    return out;
  }
  std::vector<std::uint64_t> flat_ids() const {
    std::vector<std::uint64_t> out;
    for (const auto& l : ids) out.insert(out.end(), l.begin(), l.end());
    return out;
  }
};

// Seeded permutation, consecutive chunks split into n_mux contiguous groups;
// a final partial batch is dropped. Deterministic per seed.
inline std::vector<MuxBatch> make_mux_batches(const Dataset& d, Index n_mux,
                                              Index batch_size, std::uint64_t seed,
                                              bool shuffle, bool hflip = false) {
  if (n_mux < 1 || batch_size < 1 || batch_size % n_mux != 0)
    throw ConfigError("batch_size " + std::to_string(batch_size) +
                      " must be a positive multiple of n_mux " + std::to_string(n_mux));
  check_norm(d.norm, d.channels);
  Index group = batch_size / n_mux;
  Index img_numel = d.image_numel();

  std::vector<Index> order(std::size_t(d.count()));
  for (Index i = 0; i < d.count(); ++i) order[std::size_t(i)] = i;
  Rng rng(mix64(seed) ^ hash_str("muxformer.batches"));
  if (shuffle) rng.shuffle(order);

  std::vector<MuxBatch> batches;
  Index full = d.count() / batch_size;
  for (Index bi = 0; bi < full; ++bi) {
    MuxBatch batch;
    for (Index g = 0; g < n_mux; ++g) {
      std::vector<float> pixels;
      pixels.reserve(std::size_t(group * img_numel));
      std::vector<int> labels;
      std::vector<std::uint64_t> ids;
      for (Index k = 0; k < group; ++k) {
        Index idx = order[std::size_t(bi * batch_size + g * group + k)];
        const float* src = d.images.data() + idx * img_numel;
        bool flip = hflip && rng.uniform() < 0.5;
        if (!flip) {
          pixels.insert(pixels.end(), src, src + img_numel);
        } else {
          for (Index c = 0; c < d.channels; ++c)
            for (Index r = 0; r < d.height; ++r)
              for (Index col = d.width - 1; col >= 0; --col)
                pixels.push_back(src[(c * d.height + r) * d.width + col]);
        }
        labels.push_back(d.labels[std::size_t(idx)]);
        ids.push_back(d.ids[std::size_t(idx)]);
      }
      batch.groups.push_back(normalize(
          Tensor(Shape{group, d.channels, d.height, d.width}, std::move(pixels)), d.norm));
      batch.labels.push_back(std::move(labels));
      batch.ids.push_back(std::move(ids));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace muxformer
