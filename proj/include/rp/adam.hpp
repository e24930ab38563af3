#pragma once

#include <memory>
#include <vector>

#include "rp/graph.hpp"
#include "rp/tensor.hpp"

namespace rp {

// Adam with bias correction and a per-step multiplicative learning-rate
// decay: effective lr at step t (0-based count of completed steps) is
// lr / (1 + lr_decay * t).
struct AdamState {
  std::vector<std::shared_ptr<Tensor>> params;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
  float lr = 1e-4f;
  float lr_decay = 3e-6f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;

  static AdamState init(std::vector<std::shared_ptr<Tensor>> params, float lr = 1e-4f,
                        float lr_decay = 3e-6f);

  float effective_lr() const { return lr / (1.0f + lr_decay * static_cast<float>(step)); }
};

// One optimizer step; parameters without an entry in `grads` are untouched.
void adam_step(AdamState& state, const GradMap& grads);

}  // namespace rp
