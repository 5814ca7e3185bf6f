#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "muxformer/tape.hpp"
#include "muxformer/tensor.hpp"

namespace muxformer::ops {

inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr double kL2NormEps = 1e-12;

namespace detail {

template <typename T>
using RowMatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMapT = Eigen::Map<const RowMatT<T>>;
template <typename T>
using MutMapT = Eigen::Map<RowMatT<T>>;
template <typename T>
using StridedConstMapT =
    Eigen::Map<const RowMatT<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

// c[m,n] (+)= op(a) * op(b)
template <typename T>
inline void gemm(const T* a, Index ar, Index ac, bool ta, const T* b, Index br, Index bc,
                 bool tb, T* c, bool acc) {
  ConstMapT<T> A(a, ar, ac), B(b, br, bc);
  Index m = ta ? ac : ar;
  Index n = tb ? br : bc;
  MutMapT<T> C(c, m, n);
  if (!ta && !tb) {
    acc ? void(C.noalias() += A * B) : void(C.noalias() = A * B);
  } else if (ta && !tb) {
    acc ? void(C.noalias() += A.transpose() * B) : void(C.noalias() = A.transpose() * B);
  } else if (!ta && tb) {
    acc ? void(C.noalias() += A * B.transpose()) : void(C.noalias() = A * B.transpose());
  } else {
    acc ? void(C.noalias() += A.transpose() * B.transpose())
        : void(C.noalias() = A.transpose() * B.transpose());
  }
}

inline int thread_cap() {
  static int cap = [] {
    const char* env = std::getenv("MUXFORMER_THREADS");
    if (!env) return 1;
    int v = std::atoi(env);
    return v > 0 ? v : 1;
  }();
  return cap;
}

// Static partition over [0, n). Each index is processed by exactly one worker
// so results do not depend on the thread count.
template <typename Fn>
inline void parallel_for(Index n, const Fn& fn) {
  Index workers = std::min<Index>(thread_cap(), n);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  Index chunk = (n + workers - 1) / workers;
  for (Index w = 0; w < workers; ++w) {
    Index lo = w * chunk, hi = std::min(n, lo + chunk);
    pool.emplace_back([lo, hi, &fn] {
      for (Index i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline thread_local std::vector<std::string> g_scope;
inline thread_local bool g_finite_checks = false;
inline thread_local bool g_promoted_eval = false;

inline std::string scope_path() {
  if (g_scope.empty()) return "<top>";
  std::string p;
  for (const auto& s : g_scope) {
    if (!p.empty()) p += "/";
    p += s;
  }
  return p;
}

inline void check_finite(OpKind kind, const Tensor& t) {
  if (!g_finite_checks) return;
  if (!t.finite())
    throw NonFiniteError(std::string("non-finite values produced by ") + to_string(kind) +
                         " at " + scope_path());
}

// Input values widened to double: the shadow when present, else the f32 data.
inline std::vector<double> hi_values(const Tensor& t) {
  if (t.has_shadow()) {
    auto s = t.shadow();
    return {s.begin(), s.end()};
  }
  auto v = t.values();
  return {v.begin(), v.end()};
}

struct Rec {
  Tape* tape = nullptr;
  std::vector<int> ids;
  bool track = false;
  bool need(std::size_t i) const { return ids[i] >= 0; }
};

inline int bind_input(Tape* tape, const Tensor& t) {
  if (!tape || !t.requires_grad()) return -1;
  int id = t.node_id(tape, tape->uid());
  return id >= 0 ? id : tape->watch(t);
}

inline Rec record(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  Rec r;
  r.tape = tape;
  for (const Tensor* t : inputs) {
    int id = bind_input(tape, *t);
    r.ids.push_back(id);
    r.track |= id >= 0;
  }
  return r;
}

using Vjp = std::function<std::vector<Tensor>(const Tensor&)>;

inline Tensor finish(Rec& r, OpKind kind, Shape shape, std::vector<float> data,
                     std::uint64_t macs, Vjp vjp, std::vector<double> shadow = {}) {
  Tensor out(std::move(shape), std::move(data));
  if (!shadow.empty()) out.attach_shadow(std::move(shadow));
  check_finite(kind, out);
  if (r.track) {
    TapeNode n;
    n.kind = kind;
    n.inputs = r.ids;
    n.shape = out.shape();
    n.macs = macs;
    n.vjp = std::move(vjp);
    int id = r.tape->emit(std::move(n));
    out.bind(r.tape, r.tape->uid(), id);
    out.set_requires_grad(true);
  }
  return out;
}

inline Index last_dim(const Tensor& t) { return t.shape().back(); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

// Runs the same kernel at f32, and again at f64 over input shadows when the
// promoted oracle mode is active. `kernel(span_of_input_ptrs, out_ptr)`.
template <typename Kernel>
inline std::vector<double> maybe_promote(std::initializer_list<const Tensor*> inputs,
                                         Index out_numel, const Kernel& kernel) {
  if (!g_promoted_eval) return {};
  std::vector<std::vector<double>> hi;
  hi.reserve(inputs.size());
  for (const Tensor* t : inputs) hi.push_back(hi_values(*t));
  std::vector<const double*> ptrs;
  for (auto& v : hi) ptrs.push_back(v.data());
  std::vector<double> out(static_cast<std::size_t>(out_numel));
  kernel(ptrs, out.data());
  return out;
}

}  // namespace detail

// Names the model stage an op runs under; NaN diagnostics report this path.
class OpScope {
 public:
  explicit OpScope(std::string name) { detail::g_scope.push_back(std::move(name)); }
  ~OpScope() { detail::g_scope.pop_back(); }
  OpScope(const OpScope&) = delete;
  OpScope& operator=(const OpScope&) = delete;
};

inline void set_finite_checks(bool on) { detail::g_finite_checks = on; }

// Promoted evaluation: forwards additionally computed at f64 over shadow
// buffers. Used by the finite-difference oracle only.
class PromotedEval {
 public:
  PromotedEval() { detail::g_promoted_eval = true; }
  ~PromotedEval() { detail::g_promoted_eval = false; }
  PromotedEval(const PromotedEval&) = delete;
  PromotedEval& operator=(const PromotedEval&) = delete;
};

// ---------------------------------------------------------------------------
// Elementwise / scalar ops

namespace detail {
template <typename T>
inline void add_kernel(const T* a, const T* b, T* out, Index n, bool bias, Index d) {
  if (!bias) {
    for (Index i = 0; i < n; ++i) out[i] = a[i] + b[i];
  } else {
    for (Index i = 0; i < n; ++i) out[i] = a[i] + b[i % d];
  }
}
}  // namespace detail

// a + b with equal shapes, or bias addition of a rank-1 b along the last axis.
inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  bool same = a.shape() == b.shape();
  bool bias = !same && b.rank() == 1 && a.rank() >= 1 && detail::last_dim(a) == b.dim(0);
  if (!same && !bias)
    throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  auto r = detail::record(tape, {&a, &b});
  Index n = a.numel(), d = bias ? b.dim(0) : 0;
  std::vector<float> out(static_cast<std::size_t>(n));
  detail::add_kernel<float>(a.data(), b.data(), out.data(), n, bias, d);
  auto shadow = detail::maybe_promote({&a, &b}, n, [&](auto& in, double* o) {
    detail::add_kernel<double>(in[0], in[1], o, n, bias, d);
  });
  Shape bshape = b.shape();
  auto vjp = [r, bias, bshape](const Tensor& g) {
    std::vector<Tensor> gs(2);
    if (r.need(0)) gs[0] = g;
    if (r.need(1)) {
      if (!bias) {
        gs[1] = g;
      } else {
        Index d = bshape[0];
        std::vector<float> gb(std::size_t(d), 0.0f);
        std::span<const float> gv = g.values();
        for (Index i = 0; i < Index(gv.size()); ++i)
          gb[std::size_t(i % d)] += gv[std::size_t(i)];
        gs[1] = Tensor(bshape, std::move(gb));
      }
    }
    return gs;
  };
  return detail::finish(r, OpKind::add, a.shape(), std::move(out), 0, vjp,
                        std::move(shadow));
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul: shapes differ, " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
  auto r = detail::record(tape, {&a, &b});
  Index n = a.numel();
  std::vector<float> out(static_cast<std::size_t>(n));
  const float* av = a.data();
  const float* bv = b.data();
  for (Index i = 0; i < n; ++i) out[std::size_t(i)] = av[i] * bv[i];
  auto shadow = detail::maybe_promote({&a, &b}, n, [&](auto& in, double* o) {
    for (Index i = 0; i < n; ++i) o[i] = in[0][i] * in[1][i];
  });
  auto vjp = [r, a, b](const Tensor& g) {
    std::vector<Tensor> gs(2);
    if (r.need(0)) gs[0] = mul(nullptr, g, b);
    if (r.need(1)) gs[1] = mul(nullptr, g, a);
    return gs;
  };
  return detail::finish(r, OpKind::mul, a.shape(), std::move(out), 0, vjp,
                        std::move(shadow));
}

inline Tensor scale(Tape* tape, const Tensor& a, float c) {
  auto r = detail::record(tape, {&a});
  Index n = a.numel();
  std::vector<float> out(static_cast<std::size_t>(n));
  const float* av = a.data();
  for (Index i = 0; i < n; ++i) out[std::size_t(i)] = av[i] * c;
  auto shadow = detail::maybe_promote({&a}, n, [&](auto& in, double* o) {
    for (Index i = 0; i < n; ++i) o[i] = in[0][i] * double(c);
  });
  auto vjp = [r, c](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) gs[0] = scale(nullptr, g, c);
    return gs;
  };
  return detail::finish(r, OpKind::scale, a.shape(), std::move(out), 0, vjp,
                        std::move(shadow));
}

// ---------------------------------------------------------------------------
// matmul: a @ b. Either b is a plain matrix applied to the trailing axis of a,
// or both carry identical leading batch axes ([..., m, k] @ [..., k, n]).
inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  const std::string shapes = shape_str(a.shape()) + " @ " + shape_str(b.shape());
  detail::require(a.rank() >= 2 && b.rank() >= 2,
                  "matmul: operands must be rank >= 2, got " + shapes);

  auto r = detail::record(tape, {&a, &b});
  if (b.rank() == 2) {
    Index k = detail::last_dim(a), n = b.dim(1);
    detail::require(k == b.dim(0), "matmul: inner dimensions differ, " + shapes);
    Index m = a.numel() / k;
    std::vector<float> out(std::size_t(m * n));
    detail::gemm<float>(a.data(), m, k, false, b.data(), k, n, false, out.data(), false);
    auto shadow = detail::maybe_promote({&a, &b}, m * n, [&](auto& in, double* o) {
      detail::gemm<double>(in[0], m, k, false, in[1], k, n, false, o, false);
    });
    Shape oshape(a.shape().begin(), a.shape().end() - 1);
    oshape.push_back(n);
    std::uint64_t macs = std::uint64_t(m) * std::uint64_t(k) * std::uint64_t(n);
    Shape ashape = a.shape();
    auto vjp = [r, a, b, m, k, n, ashape](const Tensor& g) {
      std::vector<Tensor> gs(2);
      if (r.need(0)) {
        std::vector<float> da(std::size_t(m * k));
        detail::gemm<float>(g.data(), m, n, false, b.data(), k, n, true, da.data(), false);
        gs[0] = Tensor(ashape, std::move(da));
      }
      if (r.need(1)) {
        std::vector<float> db(std::size_t(k * n));
        detail::gemm<float>(a.data(), m, k, true, g.data(), m, n, false, db.data(), false);
        gs[1] = Tensor(Shape{k, n}, std::move(db));
      }
      return gs;
    };
    return detail::finish(r, OpKind::matmul, std::move(oshape), std::move(out), macs, vjp,
                          std::move(shadow));
  }

  detail::require(a.rank() == b.rank(), "matmul: rank mismatch, " + shapes);
  int rank = a.rank();
  Index batches = 1;
  for (int i = 0; i < rank - 2; ++i) {
    detail::require(a.dim(i) == b.dim(i), "matmul: batch dimensions differ, " + shapes);
    batches *= a.dim(i);
  }
  Index m = a.dim(rank - 2), k = a.dim(rank - 1), n = b.dim(rank - 1);
  detail::require(k == b.dim(rank - 2), "matmul: inner dimensions differ, " + shapes);

  std::vector<float> out(std::size_t(batches * m * n));
  detail::parallel_for(batches, [&](Index i) {
    detail::gemm<float>(a.data() + i * m * k, m, k, false, b.data() + i * k * n, k, n,
                        false, out.data() + i * m * n, false);
  });
  auto shadow = detail::maybe_promote({&a, &b}, batches * m * n, [&](auto& in, double* o) {
    for (Index i = 0; i < batches; ++i)
      detail::gemm<double>(in[0] + i * m * k, m, k, false, in[1] + i * k * n, k, n, false,
                           o + i * m * n, false);
  });
  Shape oshape(a.shape().begin(), a.shape().end() - 2);
  oshape.push_back(m);
  oshape.push_back(n);
  std::uint64_t macs =
      std::uint64_t(batches) * std::uint64_t(m) * std::uint64_t(k) * std::uint64_t(n);
  Shape ashape = a.shape(), bshape = b.shape();
  auto vjp = [r, a, b, batches, m, k, n, ashape, bshape](const Tensor& g) {
    std::vector<Tensor> gs(2);
    if (r.need(0)) {
      std::vector<float> da(std::size_t(batches * m * k));
      detail::parallel_for(batches, [&](Index i) {
        detail::gemm<float>(g.data() + i * m * n, m, n, false, b.data() + i * k * n, k, n,
                            true, da.data() + i * m * k, false);
      });
      gs[0] = Tensor(ashape, std::move(da));
    }
    if (r.need(1)) {
      std::vector<float> db(std::size_t(batches * k * n));
      detail::parallel_for(batches, [&](Index i) {
        detail::gemm<float>(a.data() + i * m * k, m, k, true, g.data() + i * m * n, m, n,
                            false, db.data() + i * k * n, false);
      });
      gs[1] = Tensor(bshape, std::move(db));
    }
    return gs;
  };
  return detail::finish(r, OpKind::matmul, std::move(oshape), std::move(out), macs, vjp,
                        std::move(shadow));
}

// ---------------------------------------------------------------------------
// Shape ops

namespace detail {
template <typename T>
inline void transpose_kernel(const T* src, T* out, Index n, int rank,
                             const std::vector<Index>& out_strides,
                             const std::vector<Index>& map_strides) {
  for (Index flat = 0; flat < n; ++flat) {
    Index rem = flat, pos = 0;
    for (int i = 0; i < rank; ++i) {
      Index c = rem / out_strides[std::size_t(i)];
      rem -= c * out_strides[std::size_t(i)];
      pos += c * map_strides[std::size_t(i)];
    }
    out[flat] = src[pos];
  }
}
}  // namespace detail

inline Tensor transpose(Tape* tape, const Tensor& x, int axis_a, int axis_b) {
  int rank = x.rank();
  detail::require(axis_a >= 0 && axis_a < rank && axis_b >= 0 && axis_b < rank,
                  "transpose: axes out of range for shape " + shape_str(x.shape()));
  auto r = detail::record(tape, {&x});
  Shape oshape = x.shape();
  std::swap(oshape[std::size_t(axis_a)], oshape[std::size_t(axis_b)]);

  std::vector<Index> in_strides(std::size_t(rank), 1), out_strides(std::size_t(rank), 1);
  for (int i = rank - 2; i >= 0; --i) {
    in_strides[std::size_t(i)] = in_strides[std::size_t(i + 1)] * x.dim(i + 1);
    out_strides[std::size_t(i)] = out_strides[std::size_t(i + 1)] * oshape[std::size_t(i + 1)];
  }
  std::vector<Index> map_strides(in_strides);
  std::swap(map_strides[std::size_t(axis_a)], map_strides[std::size_t(axis_b)]);

  Index n = x.numel();
  std::vector<float> out(static_cast<std::size_t>(n));
  detail::transpose_kernel<float>(x.data(), out.data(), n, rank, out_strides, map_strides);
  auto shadow = detail::maybe_promote({&x}, n, [&](auto& in, double* o) {
    detail::transpose_kernel<double>(in[0], o, n, rank, out_strides, map_strides);
  });
  auto vjp = [r, axis_a, axis_b](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) gs[0] = transpose(nullptr, g, axis_a, axis_b);
    return gs;
  };
  return detail::finish(r, OpKind::transpose, std::move(oshape), std::move(out), 0, vjp,
                        std::move(shadow));
}

inline Tensor reshape(Tape* tape, const Tensor& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(), "reshape: " + shape_str(x.shape()) +
                                                    " cannot become " + shape_str(shape));
  auto r = detail::record(tape, {&x});
  std::span<const float> v = x.values();
  auto shadow = detail::maybe_promote({&x}, x.numel(), [&](auto& in, double* o) {
    std::copy(in[0], in[0] + x.numel(), o);
  });
  Shape xshape = x.shape();
  auto vjp = [r, xshape](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) gs[0] = reshape(nullptr, g, xshape);
    return gs;
  };
  return detail::finish(r, OpKind::reshape, std::move(shape),
                        std::vector<float>(v.begin(), v.end()), 0, vjp, std::move(shadow));
}

inline Tensor slice(Tape* tape, const Tensor& x, int axis, Index start, Index len);

inline Tensor concat(Tape* tape, std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: needs at least one tensor");
  int rank = parts[0].rank();
  detail::require(axis >= 0 && axis < rank,
                  "concat: axis out of range for shape " + shape_str(parts[0].shape()));
  Shape oshape = parts[0].shape();
  Index axis_total = 0;
  for (const Tensor& p : parts) {
    detail::require(p.rank() == rank, "concat: rank mismatch, " + shape_str(p.shape()) +
                                          " vs " + shape_str(parts[0].shape()));
    for (int i = 0; i < rank; ++i)
      detail::require(i == axis || p.dim(i) == oshape[std::size_t(i)],
                      "concat: shapes differ off axis, " + shape_str(p.shape()) + " vs " +
                          shape_str(parts[0].shape()));
    axis_total += p.dim(axis);
  }
  oshape[std::size_t(axis)] = axis_total;

  detail::Rec r;
  r.tape = tape;
  for (const Tensor& p : parts) {
    int id = detail::bind_input(tape, p);
    r.ids.push_back(id);
    r.track |= id >= 0;
  }

  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= oshape[std::size_t(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= oshape[std::size_t(i)];

  auto assemble = [&](auto get, auto* out) {
    Index offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      Index plen = parts[pi].dim(axis) * inner;
      auto src = get(pi);
      for (Index o = 0; o < outer; ++o)
        std::copy(src + o * plen, src + (o + 1) * plen,
                  out + o * axis_total * inner + offset);
      offset += plen;
    }
  };
  std::vector<float> out(std::size_t(numel_of(oshape)));
  assemble([&](std::size_t pi) { return parts[pi].data(); }, out.data());

  std::vector<double> shadow;
  if (detail::g_promoted_eval) {
    std::vector<std::vector<double>> hi;
    for (const Tensor& p : parts) hi.push_back(detail::hi_values(p));
    shadow.resize(out.size());
    assemble([&](std::size_t pi) { return hi[pi].data(); }, shadow.data());
  }

  std::vector<Index> sizes;
  for (const Tensor& p : parts) sizes.push_back(p.dim(axis));
  auto vjp = [r, sizes, axis](const Tensor& g) {
    std::vector<Tensor> gs(sizes.size());
    Index at = 0;
    for (std::size_t j = 0; j < sizes.size(); ++j) {
      if (r.need(j)) gs[j] = slice(nullptr, g, axis, at, sizes[j]);
      at += sizes[j];
    }
    return gs;
  };
  return detail::finish(r, OpKind::concat_axis, std::move(oshape), std::move(out), 0, vjp,
                        std::move(shadow));
}

inline Tensor concat(Tape* tape, std::initializer_list<Tensor> parts, int axis) {
  std::vector<Tensor> v(parts);
  return concat(tape, std::span<const Tensor>(v), axis);
}

inline Tensor slice(Tape* tape, const Tensor& x, int axis, Index start, Index len) {
  int rank = x.rank();
  detail::require(axis >= 0 && axis < rank,
                  "slice: axis out of range for shape " + shape_str(x.shape()));
  detail::require(start >= 0 && len > 0 && start + len <= x.dim(axis),
                  "slice: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") out of bounds for shape " +
                      shape_str(x.shape()));
  auto r = detail::record(tape, {&x});
  Shape oshape = x.shape();
  oshape[std::size_t(axis)] = len;

  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  Index in_axis = x.dim(axis);

  auto copy_out = [&](const auto* src, auto* dst) {
    for (Index o = 0; o < outer; ++o)
      std::copy(src + (o * in_axis + start) * inner,
                src + (o * in_axis + start + len) * inner, dst + o * len * inner);
  };
  std::vector<float> out(std::size_t(numel_of(oshape)));
  copy_out(x.data(), out.data());
  auto shadow = detail::maybe_promote({&x}, numel_of(oshape), [&](auto& in, double* o) {
    copy_out(in[0], o);
  });

  Shape xshape = x.shape();
  auto vjp = [r, xshape, axis, start, len, outer, inner, in_axis](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) {
      std::vector<float> dx(std::size_t(numel_of(xshape)), 0.0f);
      const float* gv = g.data();
      for (Index o = 0; o < outer; ++o)
        std::copy(gv + o * len * inner, gv + (o + 1) * len * inner,
                  dx.begin() + (o * in_axis + start) * inner);
      gs[0] = Tensor(xshape, std::move(dx));
    }
    return gs;
  };
  return detail::finish(r, OpKind::slice, std::move(oshape), std::move(out), 0, vjp,
                        std::move(shadow));
}

// Replicates x along a new leading axis of extent n.
inline Tensor broadcast0(Tape* tape, const Tensor& x, Index n) {
  detail::require(n > 0, "broadcast0: extent must be positive");
  auto r = detail::record(tape, {&x});
  Shape oshape;
  oshape.push_back(n);
  oshape.insert(oshape.end(), x.shape().begin(), x.shape().end());
  Index block = x.numel();
  std::vector<float> out(std::size_t(n * block));
  for (Index i = 0; i < n; ++i)
    std::copy(x.values().begin(), x.values().end(), out.begin() + i * block);
  auto shadow = detail::maybe_promote({&x}, n * block, [&](auto& in, double* o) {
    for (Index i = 0; i < n; ++i) std::copy(in[0], in[0] + block, o + i * block);
  });
  Shape xshape = x.shape();
  auto vjp = [r, n, block, xshape](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) {
      std::vector<float> dx(std::size_t(block), 0.0f);
      const float* gv = g.data();
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < block; ++j) dx[std::size_t(j)] += gv[i * block + j];
      gs[0] = Tensor(xshape, std::move(dx));
    }
    return gs;
  };
  return detail::finish(r, OpKind::broadcast0, std::move(oshape), std::move(out), 0, vjp,
                        std::move(shadow));
}

// ---------------------------------------------------------------------------
// Normalisation / activation

namespace detail {
template <typename T>
inline void softmax_kernel(const T* src, T* out, Index rows, Index d) {
  for (Index row = 0; row < rows; ++row) {
    const T* v = src + row * d;
    T* o = out + row * d;
    T m = *std::max_element(v, v + d);
    double denom = 0.0;
    for (Index j = 0; j < d; ++j) {
      o[j] = std::exp(v[j] - m);
      denom += double(o[j]);
    }
    T inv = T(1.0 / denom);
    for (Index j = 0; j < d; ++j) o[j] *= inv;
  }
}

template <typename T>
inline void layernorm_kernel(const T* src, const T* gamma, const T* beta, T* out,
                             Index rows, Index d, float* xhat, float* inv_std) {
  for (Index row = 0; row < rows; ++row) {
    const T* v = src + row * d;
    double mean = 0.0;
    for (Index j = 0; j < d; ++j) mean += double(v[j]);
    mean /= double(d);
    double var = 0.0;
    for (Index j = 0; j < d; ++j) {
      double c = double(v[j]) - mean;
      var += c * c;
    }
    var /= double(d);
    double inv = 1.0 / std::sqrt(var + double(kLayerNormEps));
    if (inv_std) inv_std[row] = float(inv);
    for (Index j = 0; j < d; ++j) {
      T xh = T((double(v[j]) - mean) * inv);
      if (xhat) xhat[row * d + j] = float(xh);
      out[row * d + j] = xh * gamma[j] + beta[j];
    }
  }
}

template <typename T>
inline void gelu_kernel(const T* src, T* out, Index n) {
  const T inv_sqrt2 = T(0.70710678118654752);
  for (Index i = 0; i < n; ++i) out[i] = T(0.5) * src[i] * (T(1) + std::erf(src[i] * inv_sqrt2));
}

template <typename T>
inline void l2norm_kernel(const T* src, T* out, Index rows, Index d, float* inv_norm) {
  for (Index row = 0; row < rows; ++row) {
    double ss = kL2NormEps;
    for (Index j = 0; j < d; ++j) ss += double(src[row * d + j]) * double(src[row * d + j]);
    double inv = 1.0 / std::sqrt(ss);
    if (inv_norm) inv_norm[row] = float(inv);
    for (Index j = 0; j < d; ++j) out[row * d + j] = T(double(src[row * d + j]) * inv);
  }
}
}  // namespace detail

inline Tensor softmax_last(Tape* tape, const Tensor& x) {
  detail::require(x.rank() >= 1, "softmax-lastaxis: rank must be >= 1");
  auto r = detail::record(tape, {&x});
  Index d = detail::last_dim(x);
  Index rows = x.numel() / d;
  Index n = x.numel();
  std::vector<float> out(static_cast<std::size_t>(n));
  detail::softmax_kernel<float>(x.data(), out.data(), rows, d);
  auto shadow = detail::maybe_promote({&x}, n, [&](auto& in, double* o) {
    detail::softmax_kernel<double>(in[0], o, rows, d);
  });
  Tensor result(x.shape(), std::move(out));
  if (!shadow.empty()) result.attach_shadow(std::move(shadow));
  detail::check_finite(OpKind::softmax_lastaxis, result);
  if (r.track) {
    Shape xshape = x.shape();
    Tensor y = result;  // forward output reused by the backward rule
    TapeNode node;
    node.kind = OpKind::softmax_lastaxis;
    node.inputs = r.ids;
    node.shape = result.shape();
    node.vjp = [r, d, rows, xshape, y](const Tensor& g) {
      std::vector<Tensor> gs(1);
      if (r.need(0)) {
        std::vector<float> dx(std::size_t(numel_of(xshape)));
        const float* yv = y.data();
        const float* gv = g.data();
        for (Index row = 0; row < rows; ++row) {
          double dot = 0.0;
          for (Index j = 0; j < d; ++j) dot += double(gv[row * d + j]) * yv[row * d + j];
          for (Index j = 0; j < d; ++j)
            dx[std::size_t(row * d + j)] = yv[row * d + j] * (gv[row * d + j] - float(dot));
        }
        gs[0] = Tensor(xshape, std::move(dx));
      }
      return gs;
    };
    int id = r.tape->emit(std::move(node));
    result.bind(r.tape, r.tape->uid(), id);
    result.set_requires_grad(true);
  }
  return result;
}

// Normalises over the last axis; variance is floored by eps so constant rows
// map to zero before the affine terms.
inline Tensor layernorm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  Index d = detail::last_dim(x);
  detail::require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
                  "layernorm: affine shapes " + shape_str(gamma.shape()) + "/" +
                      shape_str(beta.shape()) + " do not match last dim of " +
                      shape_str(x.shape()));
  auto r = detail::record(tape, {&x, &gamma, &beta});
  Index rows = x.numel() / d;
  std::vector<float> out(std::size_t(x.numel()));
  std::vector<float> xhat(std::size_t(x.numel()), 0.0f);
  std::vector<float> inv_std(std::size_t(rows), 0.0f);
  detail::layernorm_kernel<float>(x.data(), gamma.data(), beta.data(), out.data(), rows, d,
                                  xhat.data(), inv_std.data());
  auto shadow = detail::maybe_promote({&x, &gamma, &beta}, x.numel(),
                                      [&](auto& in, double* o) {
                                        detail::layernorm_kernel<double>(
                                            in[0], in[1], in[2], o, rows, d, nullptr,
                                            nullptr);
                                      });
  Shape xshape = x.shape();
  auto vjp = [r, d, rows, xshape, xhat = std::move(xhat), inv_std = std::move(inv_std),
              gamma](const Tensor& g) {
    std::vector<Tensor> gs(3);
    const float* gv = g.data();
    const float* gm = gamma.data();
    if (r.need(0)) {
      std::vector<float> dx(std::size_t(numel_of(xshape)));
      for (Index row = 0; row < rows; ++row) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (Index j = 0; j < d; ++j) {
          double dxh = double(gv[row * d + j]) * gm[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[std::size_t(row * d + j)];
        }
        mean_dxh /= double(d);
        mean_dxh_xh /= double(d);
        for (Index j = 0; j < d; ++j) {
          double dxh = double(gv[row * d + j]) * gm[j];
          dx[std::size_t(row * d + j)] =
              float(inv_std[std::size_t(row)] *
                    (dxh - mean_dxh - double(xhat[std::size_t(row * d + j)]) * mean_dxh_xh));
        }
      }
      gs[0] = Tensor(xshape, std::move(dx));
    }
    if (r.need(1)) {
      std::vector<float> dg(std::size_t(d), 0.0f);
      for (Index row = 0; row < rows; ++row)
        for (Index j = 0; j < d; ++j)
          dg[std::size_t(j)] += gv[row * d + j] * xhat[std::size_t(row * d + j)];
      gs[1] = Tensor(Shape{d}, std::move(dg));
    }
    if (r.need(2)) {
      std::vector<float> db(std::size_t(d), 0.0f);
      for (Index row = 0; row < rows; ++row)
        for (Index j = 0; j < d; ++j) db[std::size_t(j)] += gv[row * d + j];
      gs[2] = Tensor(Shape{d}, std::move(db));
    }
    return gs;
  };
  return detail::finish(r, OpKind::layernorm, x.shape(), std::move(out), 0, vjp,
                        std::move(shadow));
}

inline Tensor gelu(Tape* tape, const Tensor& x) {
  auto r = detail::record(tape, {&x});
  Index n = x.numel();
  std::vector<float> out(static_cast<std::size_t>(n));
  detail::gelu_kernel<float>(x.data(), out.data(), n);
  auto shadow = detail::maybe_promote({&x}, n, [&](auto& in, double* o) {
    detail::gelu_kernel<double>(in[0], o, n);
  });
  auto vjp = [r, x](const Tensor& g) {
    constexpr float kInvSqrt2Pi = 0.39894228040143268f;
    std::vector<Tensor> gs(1);
    if (r.need(0)) {
      std::span<const float> xv = x.values();
      std::span<const float> gv = g.values();
      std::vector<float> dx(xv.size());
      for (std::size_t i = 0; i < xv.size(); ++i) {
        float cdf = 0.5f * (1.0f + std::erf(xv[i] * 0.70710678118654752f));
        float pdf = kInvSqrt2Pi * std::exp(-0.5f * xv[i] * xv[i]);
        dx[i] = gv[i] * (cdf + xv[i] * pdf);
      }
      gs[0] = Tensor(x.shape(), std::move(dx));
    }
    return gs;
  };
  return detail::finish(r, OpKind::gelu, x.shape(), std::move(out), 0, vjp,
                        std::move(shadow));
}

// Unit L2 normalisation of the last axis (with a small floor for zero rows).
inline Tensor l2norm_last(Tape* tape, const Tensor& x) {
  auto r = detail::record(tape, {&x});
  Index d = detail::last_dim(x);
  Index rows = x.numel() / d;
  std::vector<float> out(std::size_t(x.numel()));
  std::vector<float> inv_norm(std::size_t(rows), 0.0f);
  detail::l2norm_kernel<float>(x.data(), out.data(), rows, d, inv_norm.data());
  auto shadow = detail::maybe_promote({&x}, x.numel(), [&](auto& in, double* o) {
    detail::l2norm_kernel<double>(in[0], o, rows, d, nullptr);
  });
  Shape xshape = x.shape();
  auto vjp = [r, d, rows, xshape, x, inv_norm = std::move(inv_norm)](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) {
      const float* xv = x.data();
      const float* gv = g.data();
      std::vector<float> dx(std::size_t(numel_of(xshape)));
      for (Index row = 0; row < rows; ++row) {
        double inv = inv_norm[std::size_t(row)];
        double dot = 0.0;
        for (Index j = 0; j < d; ++j) dot += double(gv[row * d + j]) * xv[row * d + j];
        for (Index j = 0; j < d; ++j)
          dx[std::size_t(row * d + j)] =
              float(inv * gv[row * d + j] - inv * inv * inv * dot * xv[row * d + j]);
      }
      gs[0] = Tensor(xshape, std::move(dx));
    }
    return gs;
  };
  return detail::finish(r, OpKind::l2norm_lastaxis, x.shape(), std::move(out), 0, vjp,
                        std::move(shadow));
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(Tape* tape, const Tensor& x) {
  auto r = detail::record(tape, {&x});
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  auto shadow = detail::maybe_promote({&x}, 1, [&](auto& in, double* o) {
    double a = 0.0;
    for (Index i = 0; i < x.numel(); ++i) a += in[0][i];
    o[0] = a;
  });
  Shape xshape = x.shape();
  auto vjp = [r, xshape](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) gs[0] = Tensor::full(xshape, g.item());
    return gs;
  };
  return detail::finish(r, OpKind::sum, Shape{}, {float(acc)}, 0, vjp, std::move(shadow));
}

inline Tensor mean_all(Tape* tape, const Tensor& x) {
  auto r = detail::record(tape, {&x});
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Index n = x.numel();
  auto shadow = detail::maybe_promote({&x}, 1, [&](auto& in, double* o) {
    double a = 0.0;
    for (Index i = 0; i < n; ++i) a += in[0][i];
    o[0] = a / double(n);
  });
  Shape xshape = x.shape();
  auto vjp = [r, xshape, n](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) gs[0] = Tensor::full(xshape, g.item() / float(n));
    return gs;
  };
  return detail::finish(r, OpKind::mean, Shape{}, {float(acc / double(n))}, 0, vjp,
                        std::move(shadow));
}

namespace detail {
template <typename T>
inline double xent_kernel(const T* lv, const T* tv, Index rows, Index d, float* lse_out) {
  double total = 0.0;
  for (Index row = 0; row < rows; ++row) {
    const T* v = lv + row * d;
    T m = *std::max_element(v, v + d);
    double s = 0.0;
    for (Index j = 0; j < d; ++j) s += std::exp(double(v[j]) - double(m));
    double l = double(m) + std::log(s);
    if (lse_out) lse_out[row] = float(l);
    for (Index j = 0; j < d; ++j) total += double(tv[row * d + j]) * (l - double(v[j]));
  }
  return total / double(rows);
}
}  // namespace detail

// Mean over rows of the cross-entropy between softmax(logits) and a target
// distribution. Log-sum-exp form, so extreme margins stay finite.
inline Tensor softmax_xent(Tape* tape, const Tensor& logits, const Tensor& targets) {
  detail::require(logits.rank() == 2 && logits.shape() == targets.shape(),
                  "softmax-xent: logits " + shape_str(logits.shape()) + " and targets " +
                      shape_str(targets.shape()) + " must be equal rank-2 shapes");
  auto r = detail::record(tape, {&logits, &targets});
  Index rows = logits.dim(0), d = logits.dim(1);
  std::vector<float> lse(std::size_t(rows), 0.0f);
  double total = detail::xent_kernel<float>(logits.data(), targets.data(), rows, d,
                                            lse.data());
  auto shadow = detail::maybe_promote({&logits, &targets}, 1, [&](auto& in, double* o) {
    o[0] = detail::xent_kernel<double>(in[0], in[1], rows, d, nullptr);
  });
  Shape shape = logits.shape();
  auto vjp = [r, rows, d, shape, logits, targets, lse = std::move(lse)](const Tensor& g) {
    std::vector<Tensor> gs(2);
    const float* lv = logits.data();
    const float* tv = targets.data();
    float go = g.item() / float(rows);
    if (r.need(0)) {
      std::vector<float> dl(std::size_t(rows * d));
      for (Index row = 0; row < rows; ++row) {
        double tsum = 0.0;
        for (Index j = 0; j < d; ++j) tsum += double(tv[row * d + j]);
        for (Index j = 0; j < d; ++j) {
          float p = std::exp(lv[row * d + j] - lse[std::size_t(row)]);
          dl[std::size_t(row * d + j)] = (float(tsum) * p - tv[row * d + j]) * go;
        }
      }
      gs[0] = Tensor(shape, std::move(dl));
    }
    if (r.need(1)) {
      std::vector<float> dt(std::size_t(rows * d));
      for (Index row = 0; row < rows; ++row)
        for (Index j = 0; j < d; ++j)
          dt[std::size_t(row * d + j)] = (lse[std::size_t(row)] - lv[row * d + j]) * go;
      gs[1] = Tensor(shape, std::move(dt));
    }
    return gs;
  };
  return detail::finish(r, OpKind::softmax_xent, Shape{}, {float(total)}, 0, vjp,
                        std::move(shadow));
}

// ---------------------------------------------------------------------------
// Convolutions

// x: [b, L, Cin] (channels last), w: [Cout, k, Cin], bias: [Cout].
// No padding; requires (L - k) divisible by stride.
inline Tensor conv1d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                     Index stride) {
  detail::require(x.rank() == 3 && w.rank() == 3 && bias.rank() == 1,
                  "conv1d: expected x[b,L,Cin], w[Cout,k,Cin], bias[Cout]; got " +
                      shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                      shape_str(bias.shape()));
  Index b = x.dim(0), L = x.dim(1), cin = x.dim(2);
  Index cout = w.dim(0), k = w.dim(1);
  detail::require(w.dim(2) == cin, "conv1d: channel mismatch, x " + shape_str(x.shape()) +
                                       " vs w " + shape_str(w.shape()));
  detail::require(bias.dim(0) == cout, "conv1d: bias shape " + shape_str(bias.shape()) +
                                           " does not match out channels");
  detail::require(stride >= 1 && L >= k && (L - k) % stride == 0,
                  "conv1d: length " + std::to_string(L) + " with kernel " + std::to_string(k) +
                      " is not divisible by stride " + std::to_string(stride));
  Index lout = (L - k) / stride + 1;
  Index patch = k * cin;

  auto r = detail::record(tape, {&x, &w, &bias});
  // Each output row reads a contiguous span of the channels-last input, so the
  // im2col matrix is a strided view, not a copy.
  auto run = [&]<typename T>(const T* xv, const T* wv, const T* bv, T* out) {
    for (Index img = 0; img < b; ++img) {
      detail::StridedConstMapT<T> cols(xv + img * L * cin, lout, patch,
                                       Eigen::OuterStride<>(stride * cin));
      detail::ConstMapT<T> wm(wv, cout, patch);
      detail::MutMapT<T> om(out + img * lout * cout, lout, cout);
      om.noalias() = cols * wm.transpose();
      om.rowwise() += detail::ConstMapT<T>(bv, 1, cout).row(0);
    }
  };
  std::vector<float> out(std::size_t(b * lout * cout));
  run(x.data(), w.data(), bias.data(), out.data());
  auto shadow = detail::maybe_promote({&x, &w, &bias}, b * lout * cout,
                                      [&](auto& in, double* o) {
                                        run(in[0], in[1], in[2], o);
                                      });
  std::uint64_t macs = std::uint64_t(b * lout) * std::uint64_t(cout) * std::uint64_t(patch);

  Shape xshape = x.shape(), wshape = w.shape();
  auto vjp = [r, x, w, b, L, cin, cout, k, lout, stride, patch, xshape,
              wshape](const Tensor& g) {
    std::vector<Tensor> gs(3);
    const float* gv = g.data();
    if (r.need(0)) {
      std::vector<float> dx(std::size_t(numel_of(xshape)), 0.0f);
      std::vector<float> dcol(std::size_t(lout * patch));
      for (Index img = 0; img < b; ++img) {
        detail::gemm<float>(gv + img * lout * cout, lout, cout, false, w.data(), cout,
                            patch, false, dcol.data(), false);
        for (Index l = 0; l < lout; ++l) {
          float* dst = dx.data() + (img * L + l * stride) * cin;
          const float* src = dcol.data() + l * patch;
          for (Index j = 0; j < patch; ++j) dst[j] += src[j];
        }
      }
      gs[0] = Tensor(xshape, std::move(dx));
    }
    if (r.need(1)) {
      std::vector<float> dw(std::size_t(numel_of(wshape)), 0.0f);
      for (Index img = 0; img < b; ++img) {
        detail::StridedConstMapT<float> cols(x.data() + img * L * cin, lout, patch,
                                             Eigen::OuterStride<>(stride * cin));
        detail::ConstMapT<float> gm(gv + img * lout * cout, lout, cout);
        detail::MutMapT<float> dwm(dw.data(), cout, patch);
        dwm.noalias() += gm.transpose() * cols;
      }
      gs[1] = Tensor(wshape, std::move(dw));
    }
    if (r.need(2)) {
      std::vector<float> db(std::size_t(cout), 0.0f);
      for (Index i = 0; i < b * lout; ++i)
        for (Index f = 0; f < cout; ++f) db[std::size_t(f)] += gv[i * cout + f];
      gs[2] = Tensor(Shape{cout}, std::move(db));
    }
    return gs;
  };
  return detail::finish(r, OpKind::conv1d, Shape{b, lout, cout}, std::move(out), macs, vjp,
                        std::move(shadow));
}

namespace detail {
// col[oh*Wo+ow, (c*kh+ih)*kw+iw] = x[c, oh*s+ih, ow*s+iw] for one image.
template <typename T>
inline void im2col2d(const T* x, Index c, Index h, Index w, Index kh, Index kw,
                     Index stride, Index ho, Index wo, T* col) {
  Index patch = c * kh * kw;
  for (Index oh = 0; oh < ho; ++oh)
    for (Index ow = 0; ow < wo; ++ow) {
      T* row = col + (oh * wo + ow) * patch;
      for (Index ci = 0; ci < c; ++ci)
        for (Index ih = 0; ih < kh; ++ih) {
          const T* src = x + (ci * h + oh * stride + ih) * w + ow * stride;
          std::copy(src, src + kw, row + (ci * kh + ih) * kw);
        }
    }
}

template <typename T>
inline void conv2d_kernel(const T* xv, const T* wv, const T* bv, T* out, Index b, Index c,
                          Index h, Index wd, Index f, Index kh, Index kw, Index stride,
                          Index ho, Index wo) {
  Index patch = c * kh * kw, area = ho * wo;
  std::vector<T> col(std::size_t(area * patch));
  for (Index img = 0; img < b; ++img) {
    im2col2d<T>(xv + img * c * h * wd, c, h, wd, kh, kw, stride, ho, wo, col.data());
    gemm<T>(wv, f, patch, false, col.data(), area, patch, true, out + img * f * area,
            false);
    T* dst = out + img * f * area;
    for (Index fi = 0; fi < f; ++fi)
      for (Index i = 0; i < area; ++i) dst[fi * area + i] += bv[fi];
  }
}
}  // namespace detail

// x: [b, C, H, W], w: [F, C, kh, kw], bias: [F]. No padding.
inline Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                     Index stride) {
  detail::require(x.rank() == 4 && w.rank() == 4 && bias.rank() == 1,
                  "conv2d: expected x[b,C,H,W], w[F,C,kh,kw], bias[F]; got " +
                      shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                      shape_str(bias.shape()));
  Index b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  Index f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(1) == c, "conv2d: channel mismatch, x " + shape_str(x.shape()) +
                                     " vs w " + shape_str(w.shape()));
  detail::require(bias.dim(0) == f, "conv2d: bias shape " + shape_str(bias.shape()) +
                                        " does not match out channels");
  detail::require(stride >= 1 && h >= kh && wd >= kw && (h - kh) % stride == 0 &&
                      (wd - kw) % stride == 0,
                  "conv2d: spatial dims " + shape_str(x.shape()) +
                      " are not divisible by stride " + std::to_string(stride) +
                      " with kernel " + shape_str(w.shape()));
  Index ho = (h - kh) / stride + 1, wo = (wd - kw) / stride + 1;
  Index patch = c * kh * kw, area = ho * wo;

  auto r = detail::record(tape, {&x, &w, &bias});
  std::vector<float> out(std::size_t(b * f * area));
  detail::conv2d_kernel<float>(x.data(), w.data(), bias.data(), out.data(), b, c, h, wd, f,
                               kh, kw, stride, ho, wo);
  auto shadow = detail::maybe_promote({&x, &w, &bias}, b * f * area,
                                      [&](auto& in, double* o) {
                                        detail::conv2d_kernel<double>(
                                            in[0], in[1], in[2], o, b, c, h, wd, f, kh, kw,
                                            stride, ho, wo);
                                      });
  std::uint64_t macs = std::uint64_t(b * area) * std::uint64_t(f) * std::uint64_t(patch);

  Shape xshape = x.shape(), wshape = w.shape();
  auto vjp = [r, x, w, b, c, h, wd, f, kh, kw, stride, ho, wo, patch, area, xshape,
              wshape](const Tensor& g) {
    std::vector<Tensor> gs(3);
    const float* gv = g.data();
    if (r.need(0)) {
      std::vector<float> dx(std::size_t(numel_of(xshape)), 0.0f);
      std::vector<float> dcol(std::size_t(area * patch));
      for (Index img = 0; img < b; ++img) {
        // dcol[area, patch] = g_img^T[area, f] * w[f, patch]
        detail::gemm<float>(gv + img * f * area, f, area, true, w.data(), f, patch, false,
                            dcol.data(), false);
        float* dst = dx.data() + img * c * h * wd;
        for (Index oh = 0; oh < ho; ++oh)
          for (Index ow = 0; ow < wo; ++ow) {
            const float* row = dcol.data() + (oh * wo + ow) * patch;
            for (Index ci = 0; ci < c; ++ci)
              for (Index ih = 0; ih < kh; ++ih) {
                float* d = dst + (ci * h + oh * stride + ih) * wd + ow * stride;
                const float* s = row + (ci * kh + ih) * kw;
                for (Index iw = 0; iw < kw; ++iw) d[iw] += s[iw];
              }
          }
      }
      gs[0] = Tensor(xshape, std::move(dx));
    }
    if (r.need(1)) {
      std::vector<float> dw(std::size_t(numel_of(wshape)), 0.0f);
      std::vector<float> col(std::size_t(area * patch));
      for (Index img = 0; img < b; ++img) {
        detail::im2col2d<float>(x.data() + img * c * h * wd, c, h, wd, kh, kw, stride, ho,
                                wo, col.data());
        detail::gemm<float>(gv + img * f * area, f, area, false, col.data(), area, patch,
                            false, dw.data(), true);
      }
      gs[1] = Tensor(wshape, std::move(dw));
    }
    if (r.need(2)) {
      std::vector<float> db(std::size_t(f), 0.0f);
      for (Index img = 0; img < b; ++img)
        for (Index fi = 0; fi < f; ++fi)
          for (Index i = 0; i < area; ++i)
            db[std::size_t(fi)] += gv[(img * f + fi) * area + i];
      gs[2] = Tensor(Shape{f}, std::move(db));
    }
    return gs;
  };
  return detail::finish(r, OpKind::conv2d, Shape{b, f, ho, wo}, std::move(out), macs, vjp,
                        std::move(shadow));
}

// table: [V, d]; out: [ids.shape..., d].
inline Tensor embedding_lookup(Tape* tape, const Tensor& table, const ITensor& ids) {
  detail::require(table.rank() == 2,
                  "embedding-lookup: table must be rank 2, got " + shape_str(table.shape()));
  Index v = table.dim(0), d = table.dim(1);
  for (std::int32_t id : ids.data)
    if (id < 0 || Index(id) >= v)
      throw ContractError("embedding-lookup: id " + std::to_string(id) + " out of range [0," +
                          std::to_string(v) + ")");
  auto r = detail::record(tape, {&table});
  Index n = ids.numel();
  auto gather = [&](const auto* tv, auto* o) {
    for (Index i = 0; i < n; ++i)
      std::copy(tv + Index(ids.data[std::size_t(i)]) * d,
                tv + (Index(ids.data[std::size_t(i)]) + 1) * d, o + i * d);
  };
  std::vector<float> out(std::size_t(n * d));
  gather(table.data(), out.data());
  auto shadow = detail::maybe_promote({&table}, n * d, [&](auto& in, double* o) {
    gather(in[0], o);
  });
  Shape oshape = ids.shape;
  oshape.push_back(d);
  Shape tshape = table.shape();
  std::vector<std::int32_t> idv = ids.data;
  auto vjp = [r, tshape, d, n, idv = std::move(idv)](const Tensor& g) {
    std::vector<Tensor> gs(1);
    if (r.need(0)) {
      std::vector<float> dt(std::size_t(numel_of(tshape)), 0.0f);
      const float* gv = g.data();
      for (Index i = 0; i < n; ++i) {
        float* row = dt.data() + Index(idv[std::size_t(i)]) * d;
        for (Index j = 0; j < d; ++j) row[j] += gv[i * d + j];
      }
      gs[0] = Tensor(tshape, std::move(dt));
    }
    return gs;
  };
  return detail::finish(r, OpKind::embedding_lookup, std::move(oshape), std::move(out), 0,
                        vjp, std::move(shadow));
}

// ---------------------------------------------------------------------------
// Generic dispatch by kind name.

struct Attrs {
  int axis = 0;
  Index start = 0;
  Index len = 0;
  Index stride = 1;
  Index count = 0;   // broadcast0 extent
  int axis_a = 0;    // transpose
  int axis_b = 1;
  float value = 0;   // scale factor
  Shape shape;       // reshape target
  const ITensor* ids = nullptr;
};

inline Tensor primitive_forward(Tape* tape, const std::string& kind,
                                std::span<const Tensor> in, const Attrs& attrs = {}) {
  auto want = [&](std::size_t n) {
    if (in.size() != n)
      throw ContractError(kind + ": expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(in.size()));
  };
  switch (op_kind_from_string(kind)) {
    case OpKind::add: want(2); return add(tape, in[0], in[1]);
    case OpKind::mul: want(2); return mul(tape, in[0], in[1]);
    case OpKind::scale: want(1); return scale(tape, in[0], attrs.value);
    case OpKind::matmul: want(2); return matmul(tape, in[0], in[1]);
    case OpKind::transpose: want(1); return transpose(tape, in[0], attrs.axis_a, attrs.axis_b);
    case OpKind::reshape: want(1); return reshape(tape, in[0], attrs.shape);
    case OpKind::concat_axis: return concat(tape, in, attrs.axis);
    case OpKind::slice: want(1); return slice(tape, in[0], attrs.axis, attrs.start, attrs.len);
    case OpKind::broadcast0: want(1); return broadcast0(tape, in[0], attrs.count);
    case OpKind::softmax_lastaxis: want(1); return softmax_last(tape, in[0]);
    case OpKind::layernorm: want(3); return layernorm(tape, in[0], in[1], in[2]);
    case OpKind::gelu: want(1); return gelu(tape, in[0]);
    case OpKind::conv1d: want(3); return conv1d(tape, in[0], in[1], in[2], attrs.stride);
    case OpKind::conv2d: want(3); return conv2d(tape, in[0], in[1], in[2], attrs.stride);
    case OpKind::embedding_lookup:
      want(1);
      if (!attrs.ids) throw ContractError("embedding-lookup: attrs.ids not set");
      return embedding_lookup(tape, in[0], *attrs.ids);
    case OpKind::sum: want(1); return sum_all(tape, in[0]);
    case OpKind::mean: want(1); return mean_all(tape, in[0]);
    case OpKind::l2norm_lastaxis: want(1); return l2norm_last(tape, in[0]);
    case OpKind::softmax_xent: want(2); return softmax_xent(tape, in[0], in[1]);
    case OpKind::leaf: break;
  }
  throw UnsupportedOpError("unsupported op kind: " + kind);
}

}  // namespace muxformer::ops
