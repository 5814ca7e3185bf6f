#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <string>

#include "muxformer/rng.hpp"
#include "muxformer/tensor.hpp"

namespace testutil {

inline muxformer::Tensor rand_tensor(muxformer::Rng& rng, muxformer::Shape shape,
                                     float lo = -1.0f, float hi = 1.0f) {
  std::vector<float> v(std::size_t(muxformer::numel_of(shape)));
  for (float& x : v) x = float(rng.uniform(lo, hi));
  return muxformer::Tensor(std::move(shape), std::move(v));
}

inline bool bitwise_equal(const muxformer::Tensor& a, const muxformer::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    if (std::memcmp(&av[i], &bv[i], sizeof(float)) != 0) return false;
  return true;
}

inline double max_abs_diff(const muxformer::Tensor& a, const muxformer::Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    m = std::max(m, std::abs(double(av[i]) - double(bv[i])));
  return m;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("muxformer_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const {
    return child.empty() ? path_.string() : (path_ / child).string();
  }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
