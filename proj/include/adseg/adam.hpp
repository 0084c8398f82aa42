#pragma once

#include <cmath>
#include <cstdint>

#include "adseg/named_tensors.hpp"

namespace adseg {

struct AdamConstants {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
};

struct AdamState {
  NamedTensors m;
  NamedTensors v;
  std::uint64_t step = 0;
};

inline AdamState adam_init(const NamedTensors& params) { return {params.zeros_like(), params.zeros_like(), 0}; }

/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected moments.
inline void adam_step(NamedTensors& theta, const Gradients& grads, AdamState& state, Real lr,
                      const AdamConstants& k = {}) {
  require_same_layout(theta, grads, "adam_step");
  require_same_layout(theta, state.m, "adam_step moments");
  require_same_layout(theta, state.v, "adam_step moments");
  ++state.step;
  const Real t = static_cast<Real>(state.step);
  const Real c1 = Real{1} - std::pow(k.beta1, t);
  const Real c2 = Real{1} - std::pow(k.beta2, t);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    Tensor& p = theta.entry(i).second;
    const Tensor& g = grads.entry(i).second;
    Tensor& m = state.m.entry(i).second;
    Tensor& v = state.v.entry(i).second;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = k.beta1 * m[j] + (Real{1} - k.beta1) * g[j];
      v[j] = k.beta2 * v[j] + (Real{1} - k.beta2) * g[j] * g[j];
      const Real m_hat = m[j] / c1;
      const Real v_hat = v[j] / c2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + k.epsilon);
    }
  }
}

}  // namespace adseg
