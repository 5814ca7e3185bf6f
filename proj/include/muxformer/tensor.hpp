#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "muxformer/errors.hpp"

namespace muxformer {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

class Tape;

// Where (if anywhere) a tensor currently lives on a tape. Shared between
// copies so that re-using a parameter in several ops yields one tape leaf.
// The uid disambiguates tapes that reuse a freed address.
struct TapeRef {
  const Tape* tape = nullptr;
  std::uint64_t tape_uid = 0;
  int node = -1;
};

// Dense row-major f32 tensor. Values are immutable after construction; copies
// share the underlying buffer. Rank-0 tensors hold a single scalar.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<float>>(std::move(values))),
        requires_grad_(requires_grad) {
    for (Index d : shape_) {
      if (d <= 0)
        throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape_));
    }
    if (numel_of(shape_) != Index(data_->size()))
      throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_->size()) + " values");
    if (requires_grad_) ref_ = std::make_shared<TapeRef>();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<float> v(std::size_t(numel_of(shape)), 0.0f);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }
  static Tensor full(Shape shape, float value) {
    std::vector<float> v(std::size_t(numel_of(shape)), value);
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor scalar(float value) { return Tensor(Shape{}, {value}); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  Index dim(int i) const { return shape_[std::size_t(i)]; }
  Index numel() const { return defined() ? Index(data_->size()) : 0; }
  std::span<const float> values() const { return {data_->data(), data_->size()}; }
  const float* data() const { return data_->data(); }

  float item() const {
    if (!defined() || numel() != 1)
      throw ContractError("item() requires a single-element tensor, got shape " +
                          shape_str(shape_));
    return (*data_)[0];
  }

  float at(std::initializer_list<Index> idx) const {
    if (Index(idx.size()) != rank())
      throw ContractError("at() arity does not match rank for shape " + shape_str(shape_));
    Index flat = 0;
    int i = 0;
    for (Index v : idx) flat = flat * shape_[std::size_t(i++)] + v;
    return (*data_)[std::size_t(flat)];
  }

  bool finite() const {
    for (float v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool requires_grad() const { return requires_grad_; }

  // Optional 64-bit shadow values, carried through forwards when the
  // finite-difference oracle runs in promoted precision.
  bool has_shadow() const { return shadow_ != nullptr; }
  std::span<const double> shadow() const { return {shadow_->data(), shadow_->size()}; }
  void attach_shadow(std::vector<double> hi) {
    shadow_ = std::make_shared<const std::vector<double>>(std::move(hi));
  }
  double item_hi() const {
    if (numel() != 1) throw ContractError("item_hi() requires a single-element tensor");
    return shadow_ ? (*shadow_)[0] : double((*data_)[0]);
  }

  // Same buffer, marked as a differentiable leaf.
  Tensor as_param() const {
    Tensor t = *this;
    t.requires_grad_ = true;
    if (!t.ref_) t.ref_ = std::make_shared<TapeRef>();
    return t;
  }

  // Tape bookkeeping (used by ops and Tape only).
  const std::shared_ptr<TapeRef>& tape_ref() const { return ref_; }
  void bind(const Tape* tape, std::uint64_t tape_uid, int node) {
    if (!ref_) ref_ = std::make_shared<TapeRef>();
    ref_->tape = tape;
    ref_->tape_uid = tape_uid;
    ref_->node = node;
  }
  int node_id(const Tape* tape, std::uint64_t tape_uid) const {
    return (ref_ && ref_->tape == tape && ref_->tape_uid == tape_uid) ? ref_->node : -1;
  }
  int node_id() const { return ref_ ? ref_->node : -1; }

  void set_requires_grad(bool v) { requires_grad_ = v; }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
  std::shared_ptr<const std::vector<double>> shadow_;
  bool requires_grad_ = false;
  std::shared_ptr<TapeRef> ref_;
};

// Integer tensor for discrete tokens / class ids. Not differentiable.
struct ITensor {
  Shape shape;
  std::vector<std::int32_t> data;

  ITensor() = default;
  ITensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != Index(data.size()))
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
  }
  Index numel() const { return Index(data.size()); }
};

}  // namespace muxformer
