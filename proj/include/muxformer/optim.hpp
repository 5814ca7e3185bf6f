#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "muxformer/config.hpp"
#include "muxformer/model.hpp"
#include "muxformer/tape.hpp"

namespace muxformer {

struct OptimConfig {
  float learning_rate = 1e-4f;
  float weight_decay = 0.03f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("optimizer: learning_rate must be positive");
    if (weight_decay < 0) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (epsilon <= 0) throw ConfigError("optimizer: epsilon must be positive");
  }
};

inline Json to_json(const OptimConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon}};
}

inline OptimConfig optim_config_from_json(const Json& j) {
  OptimConfig c;
  c.learning_rate = j.value("learning_rate", 1e-4f);
  c.weight_decay = j.value("weight_decay", 0.03f);
  c.beta1 = j.value("beta1", 0.9f);
  c.beta2 = j.value("beta2", 0.999f);
  c.epsilon = j.value("epsilon", 1e-8f);
  return c;
}

// Auxiliary trainable tensors that live outside the model (e.g. the
// contrastive teacher projection).
using AuxParams = std::map<std::string, Tensor>;

// Adam with decoupled weight decay. Parameters the loss never touched still
// decay; fixed buffers (requires_grad false) are never updated.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(ModelState* model, AuxParams* aux, const Tape& tape, const GradMap& grads,
            float lr_override = -1.0f) {
    ++t_;
    float lr = lr_override > 0 ? lr_override : cfg_.learning_rate;
    bc1_ = 1.0 - std::pow(double(cfg_.beta1), double(t_));
    bc2_ = 1.0 - std::pow(double(cfg_.beta2), double(t_));
    if (model)
      for_each_param(*model, [&](const std::string& key, Tensor& p, bool trainable) {
        if (trainable) update(key, p, tape, grads, lr);
      });
    if (aux)
      for (auto& [key, p] : *aux) update("aux." + key, p, tape, grads, lr);
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<float> m, v;
  };

  void update(const std::string& key, Tensor& p, const Tape& tape, const GradMap& grads,
              float lr) {
    Slot& slot = slots_[key];
    std::size_t n = std::size_t(p.numel());
    if (slot.m.empty()) {
      slot.m.assign(n, 0.0f);
      slot.v.assign(n, 0.0f);
    }
    const float* g = nullptr;
    int id = p.node_id(&tape, tape.uid());
    if (id >= 0) {
      auto it = grads.find(id);
      if (it != grads.end()) g = it->second.data();
    }
    std::vector<float> next(p.values().begin(), p.values().end());
    float b1 = cfg_.beta1, b2 = cfg_.beta2;
    for (std::size_t i = 0; i < n; ++i) {
      float gi = g ? g[i] : 0.0f;
      slot.m[i] = b1 * slot.m[i] + (1.0f - b1) * gi;
      slot.v[i] = b2 * slot.v[i] + (1.0f - b2) * gi * gi;
      float mhat = float(double(slot.m[i]) / bc1_);
      float vhat = float(double(slot.v[i]) / bc2_);
      next[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon));
      next[i] -= lr * cfg_.weight_decay * p.values()[i];
    }
    p = Tensor(p.shape(), std::move(next)).as_param();
  }

  OptimConfig cfg_;
  std::int64_t t_ = 0;
  double bc1_ = 1.0, bc2_ = 1.0;
  std::map<std::string, Slot> slots_;
};

}  // namespace muxformer
