#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "muxformer/model.hpp"
#include "muxformer/rng.hpp"

namespace muxformer {

struct BenchResult {
  Index batch_size = 0;
  double images_per_sec = 0;     // median over repeats
  std::vector<double> samples;   // per-repeat measurements
};

struct BenchReport {
  std::vector<BenchResult> model_results;     // per batch size
  std::vector<BenchResult> baseline_results;  // matched plain ViT
  std::vector<double> speedups;               // model / baseline, per batch size
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline std::vector<Tensor> synthetic_groups(const ModelConfig& cfg, Index batch,
                                            std::uint64_t seed) {
  Index n = cfg.effective_n_mux();
  Index group = batch / n;
  Rng rng(seed);
  std::vector<Tensor> groups;
  for (Index g = 0; g < n; ++g) {
    std::vector<float> v(
        static_cast<std::size_t>(group * cfg.channels * cfg.image_size * cfg.image_size));
    for (float& x : v) x = float(rng.uniform(-1.0, 1.0));
    groups.push_back(
        Tensor(Shape{group, cfg.channels, cfg.image_size, cfg.image_size}, std::move(v)));
  }
  return groups;
}

inline BenchResult time_model(const ModelState& m, Index batch, int repeats,
                              std::uint64_t seed) {
  std::vector<Tensor> groups = synthetic_groups(m.cfg, batch, seed);
  forward(nullptr, m, groups);  // warmup, excluded from timing
  BenchResult r;
  r.batch_size = batch;
  for (int rep = 0; rep < repeats; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    forward(nullptr, m, groups);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.samples.push_back(double(batch) / dt);
  }
  r.images_per_sec = median(r.samples);
  return r;
}

}  // namespace detail

// The plain ViT with the same geometry, depth and width.
inline ModelConfig matched_vit(const ModelConfig& cfg) {
  ModelConfig v = cfg;
  v.variant = Variant::vit;
  v.tokenizer = Tokenizer::cnn;
  v.concat_point = 0;
  v.n_mux = 1;
  return v;
}

// Inference throughput on synthetic batches, median of `repeats`, against the
// matched ViT baseline. Runs a single evaluation stream.
inline BenchReport bench_throughput(const ModelConfig& cfg, std::vector<Index> batch_sizes,
                                    int repeats) {
  cfg.validate();
  if (repeats < 1) throw ContractError("bench: repeats must be >= 1");
  ModelState model = build_model(cfg, 1);
  ModelState baseline = build_model(matched_vit(cfg), 1);

  BenchReport report;
  for (Index batch : batch_sizes) {
    if (batch < 1 || batch % cfg.effective_n_mux() != 0)
      throw ConfigError("bench: batch size " + std::to_string(batch) +
                        " is not a multiple of n_mux");
    report.model_results.push_back(detail::time_model(model, batch, repeats, 17));
    report.baseline_results.push_back(detail::time_model(baseline, batch, repeats, 17));
    report.speedups.push_back(report.model_results.back().images_per_sec /
                              report.baseline_results.back().images_per_sec);
  }
  return report;
}

}  // namespace muxformer
