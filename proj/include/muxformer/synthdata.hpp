#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "muxformer/errors.hpp"
#include "muxformer/rng.hpp"
#include "muxformer/tensor.hpp"

namespace muxformer {

// Deterministic seven-segment digit corpus. Glyphs are rendered with jittered
// position, size, stroke and intensity plus pixel noise, then written in the
// IDX container so the regular loaders and the full pipeline see the same
// format a real digits corpus would use.
namespace synth {

inline const std::vector<int>& segments_for(int digit) {
  // segment ids: 0 top, 1 top-right, 2 bottom-right, 3 bottom,
  //              4 bottom-left, 5 top-left, 6 middle
  static const std::vector<std::vector<int>> table = {
      {0, 1, 2, 3, 4, 5},     // 0
      {1, 2},                 // 1
      {0, 1, 6, 4, 3},        // 2
      {0, 1, 6, 2, 3},        // 3
      {5, 6, 1, 2},           // 4
      {0, 5, 6, 2, 3},        // 5
      {0, 5, 6, 4, 2, 3},     // 6
      {0, 1, 2},              // 7
      {0, 1, 2, 3, 4, 5, 6},  // 8
      {0, 1, 2, 3, 5, 6},     // 9
  };
  return table[std::size_t(digit)];
}

// jitter: 0 = template glyphs, 1 = mild position/size variation, 2 = heavy.
inline void render_digit(int digit, Rng& rng, Index side, float noise, int jitter,
                         float* out) {
  std::fill(out, out + side * side, 0.0f);

  Index size_range = jitter == 0 ? 1 : (jitter == 1 ? 3 : 6);
  Index box_h = 16 + Index(rng.index(std::size_t(size_range)));
  Index box_w = 10 + Index(rng.index(std::size_t(size_range)));
  Index max_dy = side - box_h - 2, max_dx = side - box_w - 2;
  Index shift = jitter == 0 ? 1 : (jitter == 1 ? 3 : 6);
  Index y0 = (side - box_h) / 2 + Index(rng.index(std::size_t(shift))) -
             std::min<Index>(shift / 2, (side - box_h) / 2);
  Index x0 = (side - box_w) / 2 + Index(rng.index(std::size_t(shift))) -
             std::min<Index>(shift / 2, (side - box_w) / 2);
  y0 = std::clamp<Index>(y0, 1, std::max<Index>(1, max_dy));
  x0 = std::clamp<Index>(x0, 1, std::max<Index>(1, max_dx));
  Index y1 = y0 + box_h, x1 = x0 + box_w;
  Index ym = y0 + box_h / 2;
  Index t = jitter == 0 ? 2 : 1 + Index(rng.index(2));
  float intensity = jitter == 0 ? 1.0f : float(rng.uniform(0.6, 1.0));

  auto paint = [&](Index ra, Index rb, Index ca, Index cb) {
    for (Index r = std::max<Index>(0, ra); r <= std::min(side - 1, rb); ++r)
      for (Index c = std::max<Index>(0, ca); c <= std::min(side - 1, cb); ++c)
        out[r * side + c] = intensity;
  };
  for (int seg : segments_for(digit)) {
    Index j = jitter == 0 ? 0 : Index(rng.index(3)) - 1;  // endpoint wobble
    switch (seg) {
      case 0: paint(y0, y0 + t, x0, x1 + j); break;
      case 1: paint(y0 + j, ym, x1 - t, x1); break;
      case 2: paint(ym, y1 + j, x1 - t, x1); break;
      case 3: paint(y1 - t, y1, x0 + j, x1); break;
      case 4: paint(ym + j, y1, x0, x0 + t); break;
      case 5: paint(y0, ym + j, x0, x0 + t); break;
      case 6: paint(ym - t / 2, ym + (t + 1) / 2, x0 + j, x1); break;
    }
  }
  for (Index i = 0; i < side * side; ++i) {
    float v = out[i] + float(rng.normal()) * noise;
    out[i] = std::min(1.0f, std::max(0.0f, v));
  }
}

}  // namespace synth

// Writes `count` rendered digits (labels cycle 0..9, so classes stay
// balanced) as an IDX image/label file pair.
inline void write_synth_digits_idx(const std::string& images_path,
                                   const std::string& labels_path, Index count,
                                   std::uint64_t seed, Index side = 28,
                                   float noise = 0.12f, int jitter = 1) {
  if (count < 1) throw ContractError("write_synth_digits_idx: count must be >= 1");
  std::ofstream imgs(images_path, std::ios::binary | std::ios::trunc);
  std::ofstream labs(labels_path, std::ios::binary | std::ios::trunc);
  if (!imgs || !labs)
    throw FormatError("cannot open " + images_path + " / " + labels_path + " for writing");

  auto be32 = [](std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 8), (unsigned char)v};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  be32(imgs, 0x00000803u);
  be32(imgs, std::uint32_t(count));
  be32(imgs, std::uint32_t(side));
  be32(imgs, std::uint32_t(side));
  be32(labs, 0x00000801u);
  be32(labs, std::uint32_t(count));

  Rng rng(mix64(seed) ^ hash_str("muxformer.synth"));
  std::vector<float> pixels(static_cast<std::size_t>(side * side));
  std::vector<unsigned char> row(static_cast<std::size_t>(side * side));
  for (Index i = 0; i < count; ++i) {
    int digit = int(i % 10);
    Rng stream = rng.fork("img." + std::to_string(i));
    synth::render_digit(digit, stream, side, noise, jitter, pixels.data());
    for (Index j = 0; j < side * side; ++j)
      row[std::size_t(j)] = (unsigned char)(pixels[std::size_t(j)] * 255.0f + 0.5f);
    imgs.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    unsigned char lab = (unsigned char)digit;
    labs.write(reinterpret_cast<const char*>(&lab), 1);
  }
  if (!imgs || !labs) throw FormatError("write failed for synthetic digit files");
}

}  // namespace muxformer
