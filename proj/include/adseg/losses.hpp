#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "adseg/autodiff.hpp"
#include "adseg/guidance.hpp"
#include "adseg/named_tensors.hpp"
#include "adseg/segnet.hpp"

namespace adseg {

using ImportanceSet = NamedTensors;

struct AdaptLossConfig {
  Real lambda = 1;
  Real gamma = 0;
};

inline void validate(const AdaptLossConfig& cfg) {
  if (!(cfg.lambda >= 0 && cfg.lambda <= 1)) throw ConfigError("lambda must lie in [0,1]");
  if (!(cfg.gamma >= 0)) throw ConfigError("gamma must be non-negative");
}

namespace detail {

// Per-pixel binary cross-entropy, weighted: sum_i w_i * (-y_i log p_i - (1-y_i) log(1-p_i)).
// `probs` is clamped again so callers may pass raw probabilities.
inline Var weighted_bce_sum(Var probs, const Tensor& target, const Tensor& weight) {
  Tape& tape = probs.tape();
  Var p = clamp(probs, kProbEps, Real{1} - kProbEps);
  Tensor pos(target.shape()), neg(target.shape());
  for (std::size_t i = 0; i < target.size(); ++i) {
    pos[i] = -weight[i] * target[i];
    neg[i] = -weight[i] * (Real{1} - target[i]);
  }
  Var term_pos = mul(tape.constant(std::move(pos)), log(p));
  Var term_neg = mul(tape.constant(std::move(neg)), log(add_scalar(scale(p, Real{-1}), Real{1})));
  return sum(add(term_pos, term_neg));
}

}  // namespace detail

/// Mean binary cross-entropy over all pixels against a {0,1} target.
inline Var ce_loss(Var probs, const Tensor& y) {
  require_same_shape(probs.value(), y, "ce_loss");
  for (Real v : y.data())
    if (v != 0 && v != 1) throw DomainError("ce_loss: target must be binary");
  const Tensor ones(y.shape(), Real{1});
  return scale(detail::weighted_bce_sum(probs, y, ones), Real{1} / static_cast<Real>(y.size()));
}

/// Cross-entropy averaged over pixels with c != -1 only.
inline Var gce_loss(Var probs, const Tensor& c) {
  require_same_shape(probs.value(), c, "gce_loss");
  Tensor weight(c.shape()), target(c.shape());
  std::size_t n = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] == kUnlabeled) continue;
    if (c[i] != 0 && c[i] != 1) throw DomainError("gce_loss: correction map must be ternary");
    weight[i] = 1;
    target[i] = c[i];
    ++n;
  }
  if (n == 0) throw NoCorrectionsError();
  return scale(detail::weighted_bce_sum(probs, target, weight), Real{1} / static_cast<Real>(n));
}

/// The anchor term: the binary initial prediction used as a dense target.
inline Var gce_on_prediction(Var probs, const Prediction& p0) {
  require_same_shape(probs.value(), p0.binary, "gce_on_prediction");
  return ce_loss(probs, p0.binary);
}

/// Sum over all entries of omega * (theta - theta_star)^2.
inline Var mas_penalty(const BoundParams& theta, const NamedTensors& theta_star, const ImportanceSet& omega) {
  if (theta.vars.size() != theta_star.size()) throw ShapeError("mas_penalty: parameter count mismatch");
  require_same_layout(theta_star, omega, "mas_penalty");
  if (theta.vars.empty()) throw ShapeError("mas_penalty: empty parameter set");
  Tape& tape = theta.vars.front().second.tape();
  Var total;
  for (std::size_t i = 0; i < theta.vars.size(); ++i) {
    const auto& [name, var] = theta.vars[i];
    const auto& [ref_name, ref] = theta_star.entry(i);
    if (name != ref_name) throw ShapeError("mas_penalty: parameter order mismatch at '" + name + "'");
    require_same_shape(var.value(), ref, "mas_penalty");
    Var d = sub(var, tape.constant(ref));
    Var term = sum(mul(tape.constant(omega.entry(i).second), mul(d, d)));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

struct AdaptLossTerms {
  Var total;
  Var corrections;  // invalid when lambda == 0
  Var anchor;       // invalid when lambda == 1
  Var penalty;      // invalid when gamma == 0
};

/// lambda * GCE(corrections) + (1 - lambda) * GCE(p0) + gamma * MAS penalty.
/// Terms with zero weight are skipped; the corrections term still requires
/// at least one labeled pixel when lambda > 0.
inline AdaptLossTerms adapt_loss(Var probs, const Prediction& p0, const Tensor& c, const BoundParams& theta,
                                 const NamedTensors& theta_star, const ImportanceSet& omega,
                                 const AdaptLossConfig& cfg) {
  validate(cfg);
  AdaptLossTerms t;
  auto accumulate = [&t](Var v) { t.total = t.total.valid() ? add(t.total, v) : v; };
  if (cfg.lambda > 0) {
    t.corrections = gce_loss(probs, c);
    accumulate(scale(t.corrections, cfg.lambda));
  }
  if (cfg.lambda < 1) {
    t.anchor = gce_on_prediction(probs, p0);
    accumulate(scale(t.anchor, Real{1} - cfg.lambda));
  }
  if (cfg.gamma > 0) {
    t.penalty = mas_penalty(theta, theta_star, omega);
    accumulate(scale(t.penalty, cfg.gamma));
  }
  return t;
}

/// Memory-aware-synapses importance: per parameter, the mean over samples of
/// |d ||f(x)||^2 / d theta|, then scaled so the mean over every entry is 1.
/// If every raw importance is zero the result stays all-zero.
///
/// `model(tape, bound, sample)` must return the output map as a Var.
template <typename ModelFn>
ImportanceSet mas_importance(const NamedTensors& params, std::span<const Tensor> samples, ModelFn&& model) {
  if (samples.empty()) throw ConfigError("mas_importance: need at least one sample");
  ImportanceSet omega = params.zeros_like();
  for (const Tensor& x : samples) {
    Tape tape;
    const BoundParams bound = bind(tape, params);
    Var out = model(tape, bound, x);
    Gradients g = tape.backprop(sum(mul(out, out)));
    for (std::size_t i = 0; i < omega.size(); ++i) {
      Tensor& acc = omega.entry(i).second;
      const Tensor& gi = g.entry(i).second;
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += std::abs(gi[j]);
    }
  }
  const Real n = static_cast<Real>(samples.size());
  Real total = 0;
  for (auto& [_, t] : omega) {
    for (auto& v : t.data()) {
      v /= n;
      total += v;
    }
  }
  if (total > 0) {
    const Real factor = static_cast<Real>(omega.total_size()) / total;
    for (auto& [_, t] : omega)
      for (auto& v : t.data()) v *= factor;
  }
  return omega;
}

inline ImportanceSet mas_importance(const ParamSet& params, std::span<const Tensor> samples) {
  return mas_importance(params.values, samples,
                        [&params](Tape& tape, const BoundParams& b, const Tensor& x) {
                          return forward(params.arch, b, tape.constant(x));
                        });
}

}  // namespace adseg
