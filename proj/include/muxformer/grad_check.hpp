#pragma once

#include <functional>
#include <vector>

#include "muxformer/ops.hpp"
#include "muxformer/tape.hpp"
#include "muxformer/tensor.hpp"

namespace muxformer {

// Scalar-valued function of several tensors; records on the given tape.
using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index coords_checked = 0;
};

// Compares reverse-mode gradients of f against central differences. The
// oracle side evaluates f with forwards promoted to 64-bit (shadow buffers),
// which keeps the difference quotient clear of f32 quantisation noise; the
// implementation side being checked stays f32.
inline GradCheckResult grad_check_full(const ScalarFn& f, const std::vector<Tensor>& points,
                                       double epsilon) {
  if (epsilon <= 0.0) throw ContractError("grad_check: epsilon must be positive");

  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(points.size());
  for (const Tensor& p : points) leaves.push_back(p.as_param());
  Tensor y = f(tape, leaves);
  if (y.numel() != 1)
    throw ContractError("grad_check: f must return a scalar, got shape " +
                        shape_str(y.shape()));
  GradMap grads = tape.backward(y);
  // Resolve every analytic gradient before any oracle evaluation: the oracle
  // re-runs f on scratch tapes, which re-binds shared parameter tensors.
  std::vector<Tensor> analytic_grads;
  analytic_grads.reserve(leaves.size());
  for (const Tensor& leaf : leaves) analytic_grads.push_back(tape.grad_of(grads, leaf));

  GradCheckResult result;
  ops::PromotedEval promoted;
  for (std::size_t pi = 0; pi < points.size(); ++pi) {
    const Tensor& analytic = analytic_grads[pi];
    std::span<const float> base = points[pi].values();
    for (std::size_t ci = 0; ci < base.size(); ++ci) {
      auto eval_at = [&](double v) {
        std::vector<float> data(base.begin(), base.end());
        std::vector<double> hi(base.begin(), base.end());
        data[ci] = float(v);
        hi[ci] = v;
        std::vector<Tensor> probe = points;
        probe[pi] = Tensor(points[pi].shape(), std::move(data));
        probe[pi].attach_shadow(std::move(hi));
        Tape scratch;
        return f(scratch, probe).item_hi();
      };
      double x0 = double(base[ci]);
      double fd = (eval_at(x0 + epsilon) - eval_at(x0 - epsilon)) / (2.0 * epsilon);
      double an = double(analytic.values()[ci]);
      double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(an - fd) / denom);
      ++result.coords_checked;
    }
  }
  return result;
}

inline double grad_check(const ScalarFn& f, const std::vector<Tensor>& points,
                         double epsilon) {
  return grad_check_full(f, points, epsilon).max_rel_error;
}

// Single-input convenience form.
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& point, double epsilon) {
  return grad_check([&f](Tape& t, const std::vector<Tensor>& xs) { return f(t, xs[0]); },
                    std::vector<Tensor>{point}, epsilon);
}

}  // namespace muxformer
