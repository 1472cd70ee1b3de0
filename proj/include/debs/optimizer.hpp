#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "debs/tensor.hpp"

namespace debs {

// Adam with decoupled weight decay. Moments and a step counter are kept per
// tensor so parameters activated late (the dissimilarity heads) still get
// proper bias correction.
template <class T>
struct adam_state {
  std::vector<tensor<T>> m, v;
  std::vector<std::uint64_t> steps;

  template <class Tensors>
  static adam_state init(const Tensors& params) {
    adam_state s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& [name, t] : params) {
      s.m.emplace_back(t->shape);
      s.v.emplace_back(t->shape);
      s.steps.push_back(0);
    }
    return s;
  }
};

template <class T>
struct adam_config {
  T lr = static_cast<T>(3e-4);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
  T weight_decay = static_cast<T>(0);
};

// One update of a single tensor. `grad` may be null (no gradient reached the
// parameter); weight decay still applies and the step still counts.
template <class T>
void adam_step_tensor(tensor<T>& param, const tensor<T>* grad, tensor<T>& m, tensor<T>& v,
                      std::uint64_t& step, const adam_config<T>& cfg) {
  if (grad && !param.same_shape(*grad)) throw contract_error("adam: gradient shape mismatch");
  ++step;
  const T bc1 = T{1} - std::pow(cfg.beta1, static_cast<T>(step));
  const T bc2 = T{1} - std::pow(cfg.beta2, static_cast<T>(step));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    if (cfg.weight_decay != T{0}) param[i] -= cfg.lr * cfg.weight_decay * param[i];
    const T g = grad ? (*grad)[i] : T{0};
    m[i] = cfg.beta1 * m[i] + (T{1} - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (T{1} - cfg.beta2) * g * g;
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace debs
