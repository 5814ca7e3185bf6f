#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "muxformer/errors.hpp"
#include "muxformer/tensor.hpp"

namespace muxformer {

enum class OpKind {
  leaf,
  add,
  mul,
  scale,
  matmul,
  transpose,
  reshape,
  concat_axis,
  slice,
  broadcast0,
  softmax_lastaxis,
  layernorm,
  gelu,
  conv1d,
  conv2d,
  embedding_lookup,
  sum,
  mean,
  l2norm_lastaxis,
  softmax_xent,
};

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::concat_axis: return "concat-axis";
    case OpKind::slice: return "slice";
    case OpKind::broadcast0: return "broadcast0";
    case OpKind::softmax_lastaxis: return "softmax-lastaxis";
    case OpKind::layernorm: return "layernorm";
    case OpKind::gelu: return "gelu";
    case OpKind::conv1d: return "conv1d";
    case OpKind::conv2d: return "conv2d";
    case OpKind::embedding_lookup: return "embedding-lookup";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::l2norm_lastaxis: return "l2norm-lastaxis";
    case OpKind::softmax_xent: return "softmax-xent";
  }
  return "?";
}

inline OpKind op_kind_from_string(const std::string& s) {
  static const std::unordered_map<std::string, OpKind> table = {
      {"add", OpKind::add},
      {"mul", OpKind::mul},
      {"scale", OpKind::scale},
      {"matmul", OpKind::matmul},
      {"transpose", OpKind::transpose},
      {"reshape", OpKind::reshape},
      {"concat-axis", OpKind::concat_axis},
      {"slice", OpKind::slice},
      {"broadcast0", OpKind::broadcast0},
      {"softmax-lastaxis", OpKind::softmax_lastaxis},
      {"layernorm", OpKind::layernorm},
      {"gelu", OpKind::gelu},
      {"conv1d", OpKind::conv1d},
      {"conv2d", OpKind::conv2d},
      {"embedding-lookup", OpKind::embedding_lookup},
      {"sum", OpKind::sum},
      {"mean", OpKind::mean},
      {"l2norm-lastaxis", OpKind::l2norm_lastaxis},
      {"softmax-xent", OpKind::softmax_xent},
  };
  auto it = table.find(s);
  if (it == table.end()) throw UnsupportedOpError("unsupported op kind: " + s);
  return it->second;
}

using GradMap = std::unordered_map<int, Tensor>;

// One recorded operation. `inputs` are node ids aligned with the vjp result
// (-1 marks an input that does not participate in differentiation). The vjp
// closure owns whatever activations its backward rule needs.
struct TapeNode {
  OpKind kind = OpKind::leaf;
  std::vector<int> inputs;
  Shape shape;
  std::uint64_t macs = 0;  // multiply-accumulates, for cost-model cross-checks
  std::function<std::vector<Tensor>(const Tensor& grad_out)> vjp;
};

// Reverse-mode tape. Nodes are appended in execution order, so inputs always
// precede their consumers; backward is one reverse sweep visiting each node
// once. Single-owner: a tape must not be shared across concurrent tasks.
class Tape {
 public:
  std::uint64_t uid() const { return uid_; }

  int watch(const Tensor& t) {
    if (!t.requires_grad())
      throw ContractError("watch() requires a requires_grad tensor");
    int existing = t.node_id(this, uid_);
    if (existing >= 0) return existing;
    TapeNode n;
    n.kind = OpKind::leaf;
    n.shape = t.shape();
    int id = int(nodes_.size());
    nodes_.push_back(std::move(n));
    leaves_.push_back(id);
    const_cast<Tensor&>(t).bind(this, uid_, id);
    return id;
  }

  int emit(TapeNode n) {
    for (int in : n.inputs) {
      if (in >= int(nodes_.size()))
        throw ContractError("tape input id out of order");
    }
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(int id) const { return nodes_[std::size_t(id)]; }
  const std::vector<int>& leaves() const { return leaves_; }

  // Gradient of `loss` w.r.t. every node it depends on. Leaves the loss does
  // not touch get explicit zero gradients.
  GradMap backward(const Tensor& loss) const {
    if (loss.numel() != 1)
      throw ContractError("backward() loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    int lid = loss.node_id(this, uid_);
    if (lid < 0) throw ContractError("backward() loss is not recorded on this tape");

    std::vector<Tensor> grads(nodes_.size());
    grads[std::size_t(lid)] = Tensor::ones(loss.shape());
    for (int i = lid; i >= 0; --i) {
      const Tensor& g = grads[std::size_t(i)];
      if (!g.defined()) continue;
      const TapeNode& n = nodes_[std::size_t(i)];
      if (!n.vjp) continue;
      std::vector<Tensor> gs = n.vjp(g);
      for (std::size_t j = 0; j < n.inputs.size(); ++j) {
        int id = n.inputs[j];
        if (id < 0 || !gs[j].defined()) continue;
        accumulate(grads[std::size_t(id)], gs[j]);
      }
    }

    GradMap out;
    for (std::size_t i = 0; i < grads.size(); ++i)
      if (grads[i].defined()) out.emplace(int(i), std::move(grads[i]));
    for (int leaf : leaves_)
      if (!out.count(leaf)) out.emplace(leaf, Tensor::zeros(nodes_[std::size_t(leaf)].shape));
    return out;
  }

  // Gradient lookup for a watched tensor; zeros if the loss never touched it.
  Tensor grad_of(const GradMap& grads, const Tensor& t) const {
    int id = t.node_id(this, uid_);
    if (id < 0) throw ContractError("grad_of(): tensor is not on this tape");
    auto it = grads.find(id);
    return it != grads.end() ? it->second : Tensor::zeros(t.shape());
  }

  std::uint64_t macs_for(OpKind kind) const {
    std::uint64_t total = 0;
    for (const TapeNode& n : nodes_)
      if (n.kind == kind) total += n.macs;
    return total;
  }
  std::uint64_t total_macs() const {
    std::uint64_t total = 0;
    for (const TapeNode& n : nodes_) total += n.macs;
    return total;
  }

 private:
  static std::uint64_t next_uid() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static void accumulate(Tensor& slot, const Tensor& g) {
    if (!slot.defined()) {
      slot = g;
      return;
    }
    std::vector<float> sum(slot.values().begin(), slot.values().end());
    std::span<const float> add = g.values();
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += add[i];
    slot = Tensor(slot.shape(), std::move(sum));
  }

  std::uint64_t uid_ = next_uid();
  std::vector<TapeNode> nodes_;
  std::vector<int> leaves_;
};

}  // namespace muxformer
