#pragma once

// Compact encoder-decoder segmentation network with skip connections.
//
// Encoder stage s: conv3x3 (stride 1 for s = 0, else 2) -> relu -> conv3x3 -> relu.
// Decoder stage s (from the deepest skip upwards): upsample2x -> concat skip s
// -> conv3x3 -> relu -> conv3x3 -> relu. A 1x1 head and a sigmoid produce a
// single-channel foreground probability at input resolution.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "adseg/autodiff.hpp"
#include "adseg/named_tensors.hpp"
#include "adseg/tensor.hpp"

namespace adseg {

/// Probabilities are kept inside [kProbEps, 1 - kProbEps] before any log.
inline constexpr Real kProbEps = 1e-7;

/// Channel layout of the network input: RGB followed by the positive and
/// negative guidance channels.
inline constexpr std::size_t kInputChannels = 5;

struct ArchDescriptor {
  std::size_t in_channels = kInputChannels;
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t height = 64;
  std::size_t width = 64;

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

inline void validate(const ArchDescriptor& d) {
  if (d.in_channels != kInputChannels) {
    throw ConfigError("architecture must take a 5-channel input (RGB + 2 guidance), got " +
                      std::to_string(d.in_channels));
  }
  if (d.widths.empty()) throw ConfigError("architecture needs at least one stage");
  for (std::size_t w : d.widths)
    if (w == 0) throw ConfigError("stage widths must be positive");
  const std::size_t factor = std::size_t{1} << (d.widths.size() - 1);
  if (d.height == 0 || d.width == 0 || d.height % factor != 0 || d.width % factor != 0) {
    throw ConfigError("input size must be a positive multiple of " + std::to_string(factor));
  }
}

struct LayerSpec {
  std::string name;
  std::size_t cin, cout, kernel, stride;
};

/// Convolution layers in forward order; each owns "<name>.weight" and "<name>.bias".
inline std::vector<LayerSpec> layer_specs(const ArchDescriptor& d) {
  validate(d);
  const auto& w = d.widths;
  const std::size_t S = w.size();
  std::vector<LayerSpec> layers;
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t cin = s == 0 ? d.in_channels : w[s - 1];
    layers.push_back({"enc" + std::to_string(s) + ".a", cin, w[s], 3, s == 0 ? 1u : 2u});
    layers.push_back({"enc" + std::to_string(s) + ".b", w[s], w[s], 3, 1});
  }
  for (std::size_t s = S - 1; s-- > 0;) {
    layers.push_back({"dec" + std::to_string(s) + ".a", w[s + 1] + w[s], w[s], 3, 1});
    layers.push_back({"dec" + std::to_string(s) + ".b", w[s], w[s], 3, 1});
  }
  layers.push_back({"head", w[0], 1, 1, 1});
  return layers;
}

inline std::size_t parameter_count(const ArchDescriptor& d) {
  std::size_t n = 0;
  for (const auto& l : layer_specs(d)) n += l.cout * l.cin * l.kernel * l.kernel + l.cout;
  return n;
}

struct ParamSet {
  ArchDescriptor arch;
  NamedTensors values;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

/// Fan-in scaled uniform initialisation: kernels U(+-sqrt(6/fan_in)),
/// biases U(+-1/sqrt(fan_in)).
inline ParamSet build_model(const ArchDescriptor& d, std::uint64_t seed) {
  ParamSet p{d, {}};
  std::mt19937_64 rng(seed);
  for (const auto& l : layer_specs(d)) {
    const std::size_t fan_in = l.cin * l.kernel * l.kernel;
    const Real kb = std::sqrt(Real{6} / static_cast<Real>(fan_in));
    const Real bb = Real{1} / std::sqrt(static_cast<Real>(fan_in));
    Tensor k({l.cout, l.cin, l.kernel, l.kernel});
    std::uniform_real_distribution<Real> ku(-kb, kb);
    for (auto& v : k.data()) v = ku(rng);
    Tensor b({l.cout});
    std::uniform_real_distribution<Real> bu(-bb, bb);
    for (auto& v : b.data()) v = bu(rng);
    p.values.add(l.name + ".weight", std::move(k));
    p.values.add(l.name + ".bias", std::move(b));
  }
  return p;
}

/// Parameters registered on a tape, in ParamSet order.
struct BoundParams {
  std::vector<std::pair<std::string, Var>> vars;

  Var at(const std::string& name) const {
    for (const auto& [n, v] : vars)
      if (n == name) return v;
    throw ConfigError("unbound parameter '" + name + "'");
  }
};

inline BoundParams bind(Tape& tape, const NamedTensors& values) {
  BoundParams b;
  for (const auto& [name, t] : values) b.vars.emplace_back(name, tape.parameter(name, t));
  return b;
}

/// Clamped foreground probabilities [H,W] for a [5,H,W] input.
inline Var forward(const ArchDescriptor& d, const BoundParams& p, Var x) {
  const Shape expected{d.in_channels, d.height, d.width};
  if (x.shape() != expected) {
    throw ShapeError("segnet input must be " + shape_str(expected) + ", got " + shape_str(x.shape()));
  }
  const std::size_t S = d.widths.size();
  auto conv = [&](const std::string& name, Var in, std::size_t stride, std::size_t pad) {
    return conv2d(in, p.at(name + ".weight"), p.at(name + ".bias"), stride, pad);
  };
  std::vector<Var> skips;
  Var h = x;
  for (std::size_t s = 0; s < S; ++s) {
    const std::string n = "enc" + std::to_string(s);
    h = relu(conv(n + ".a", h, s == 0 ? 1 : 2, 1));
    h = relu(conv(n + ".b", h, 1, 1));
    skips.push_back(h);
  }
  for (std::size_t s = S - 1; s-- > 0;) {
    const std::string n = "dec" + std::to_string(s);
    h = concat_channels(upsample2x(h), skips[s]);
    h = relu(conv(n + ".a", h, 1, 1));
    h = relu(conv(n + ".b", h, 1, 1));
  }
  Var logits = conv("head", h, 1, 0);
  Var probs = sigmoid(reshape(logits, {d.height, d.width}));
  return clamp(probs, kProbEps, Real{1} - kProbEps);
}

struct Prediction {
  Tensor probabilities;  // [H,W], inside the clamp bounds
  Tensor binary;         // [H,W], 1 where probability >= 0.5

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline Tensor threshold(const Tensor& probs) {
  Tensor out(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= Real{0.5} ? Real{1} : Real{0};
  return out;
}

inline Prediction make_prediction(Tensor probs) {
  Tensor bin = threshold(probs);
  return {std::move(probs), std::move(bin)};
}

inline Prediction predict(const ParamSet& params, const Tensor& x) {
  Tape tape(false);
  const BoundParams bound = bind(tape, params.values);
  return make_prediction(forward(params.arch, bound, tape.constant(x)).value());
}

}  // namespace adseg
