#include "rp/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace rp {

AdamState AdamState::init(std::vector<std::shared_ptr<Tensor>> params, float lr, float lr_decay) {
  AdamState s;
  s.params = std::move(params);
  s.lr = lr;
  s.lr_decay = lr_decay;
  s.m.reserve(s.params.size());
  s.v.reserve(s.params.size());
  for (const auto& p : s.params) {
    s.m.push_back(Tensor::zeros(p->shape));
    s.v.push_back(Tensor::zeros(p->shape));
  }
  return s;
}

void adam_step(AdamState& state, const GradMap& grads) {
  const float lr_t = state.effective_lr();
  state.step += 1;
  const float t = static_cast<float>(state.step);
  const float bc1 = 1.0f - std::pow(state.beta1, t);
  const float bc2 = 1.0f - std::pow(state.beta2, t);
  for (size_t pi = 0; pi < state.params.size(); ++pi) {
    Tensor& p = *state.params[pi];
    auto it = grads.find(&p);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (g.shape != p.shape)
      throw std::invalid_argument("adam_step: gradient shape " + shape_str(g.shape) +
                                  " does not match parameter " + shape_str(p.shape));
    Tensor& m = state.m[pi];
    Tensor& v = state.v[pi];
    for (size_t i = 0; i < p.data.size(); ++i) {
      float gi = g.data[i];
      m.data[i] = state.beta1 * m.data[i] + (1.0f - state.beta1) * gi;
      v.data[i] = state.beta2 * v.data[i] + (1.0f - state.beta2) * gi * gi;
      float mhat = m.data[i] / bc1;
      float vhat = v.data[i] / bc2;
      p.data[i] -= lr_t * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace rp
