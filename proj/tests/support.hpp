#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "adseg/adseg.hpp"

namespace testing_support {

using namespace adseg;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline Tensor random_mask(std::size_t H, std::size_t W, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution b(p);
  Tensor m({H, W});
  for (auto& v : m.data()) v = b(rng) ? 1 : 0;
  return m;
}

// Direct six-loop cross-correlation.
inline Tensor conv_reference(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        Real acc = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
              const long y = static_cast<long>(i * stride + u) - static_cast<long>(pad);
              const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
              if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              acc += x.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) *
                     k[((o * C + c) * kh + u) * kw + v];
            }
        out.at(o, i, j) = acc;
      }
  return out;
}

using LossFn = std::function<Var(Tape&, const BoundParams&)>;

inline Gradients analytic_gradients(const NamedTensors& params, const LossFn& loss) {
  Tape tape;
  const BoundParams b = bind(tape, params);
  return tape.backprop(loss(tape, b));
}

inline Real loss_value(const NamedTensors& params, const LossFn& loss) {
  Tape tape(false);
  const BoundParams b = bind(tape, params);
  return loss(tape, b).value().item();
}

// Largest per-coordinate relative error between backprop and central
// differences. Coordinates whose gradients are both below `floor` are
// compared absolutely against it.
inline Real max_fd_error(const NamedTensors& params, const LossFn& loss, Real h = 1e-5, Real floor = 1e-6) {
  const Gradients g = analytic_gradients(params, loss);
  NamedTensors p = params;
  Real worst = 0;
  for (std::size_t e = 0; e < p.size(); ++e) {
    Tensor& t = p.entry(e).second;
    for (std::size_t j = 0; j < t.size(); ++j) {
      const Real orig = t[j];
      t[j] = orig + h;
      const Real up = loss_value(p, loss);
      t[j] = orig - h;
      const Real down = loss_value(p, loss);
      t[j] = orig;
      const Real numeric = (up - down) / (2 * h);
      const Real analytic = g.entry(e).second[j];
      const Real denom = std::max({std::abs(numeric), std::abs(analytic), floor});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

inline ArchDescriptor tiny_arch() {
  ArchDescriptor d;
  d.widths = {2, 4};
  d.height = d.width = 8;
  return d;
}

}  // namespace testing_support
