#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "adseg/tensor.hpp"

namespace adseg {

struct Sample {
  std::string id;
  Tensor image;                         // [3,H,W] in [0,1]
  Tensor mask;                          // [H,W] in {0,1}
  std::optional<Tensor> other_objects;  // [H,W] in {0,1}, distractors not in `mask`

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::string domain;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void validate(const Dataset& ds) {
  std::set<std::string> ids;
  for (const Sample& s : ds.samples) {
    if (!ids.insert(s.id).second) throw ConfigError("duplicate sample id '" + s.id + "'");
    require_rank(s.image, 3, "dataset image");
    if (s.image.dim(0) != 3) throw ShapeError("dataset image must have 3 channels");
    if (s.mask.shape() != Shape{s.image.dim(1), s.image.dim(2)}) throw ShapeError("mask/image size mismatch in '" + s.id + "'");
    for (Real v : s.mask.data())
      if (v != 0 && v != 1) throw DomainError("mask of '" + s.id + "' is not binary");
    for (Real v : s.image.data())
      if (v < 0 || v > 1) throw DomainError("image of '" + s.id + "' leaves [0,1]");
  }
}

enum class SynthGenerator { kDomainA, kDomainB, kClass };

inline SynthGenerator parse_generator(const std::string& name) {
  if (name == "domainA") return SynthGenerator::kDomainA;
  if (name == "domainB") return SynthGenerator::kDomainB;
  if (name == "class") return SynthGenerator::kClass;
  throw ConfigError("unknown synthetic generator '" + name + "' (expected domainA, domainB or class)");
}

inline const char* generator_name(SynthGenerator g) {
  switch (g) {
    case SynthGenerator::kDomainA: return "domainA";
    case SynthGenerator::kDomainB: return "domainB";
    case SynthGenerator::kClass: return "class";
  }
  return "?";
}

struct SynthSpec {
  SynthGenerator generator = SynthGenerator::kDomainA;
  std::size_t count = 50;
  std::size_t height = 64;
  std::size_t width = 64;
  double distractor_prob = 0.8;  // chance of a second, unlabeled shape
  double noise_sigma = 0.08;     // additive noise of domain B
  double inversion = 0.75;       // domain B luminance inversion strength; > 0.5 reverses polarity
};

namespace detail {

struct Shape2D {
  bool ellipse;
  double cy, cx, ry, rx, angle;

  bool contains(double y, double x) const {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double dy = y - cy, dx = x - cx;
    const double u = ca * dx + sa * dy;
    const double v = -sa * dx + ca * dy;
    if (ellipse) return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    return std::abs(u) <= rx && std::abs(v) <= ry;
  }
};

template <typename Rng>
Shape2D random_shape(Rng& rng, double H, double W, bool force_ellipse) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double m = std::min(H, W);
  Shape2D s{};
  s.ellipse = force_ellipse || u01(rng) < 0.5;
  s.ry = m * (0.12 + 0.16 * u01(rng));
  s.rx = m * (0.12 + 0.16 * u01(rng));
  if (force_ellipse) s.rx = s.ry * (1.4 + 0.3 * u01(rng));
  const double r = std::max(s.ry, s.rx);
  s.cy = r * 0.6 + (H - 1.2 * r) * u01(rng);
  s.cx = r * 0.6 + (W - 1.2 * r) * u01(rng);
  s.angle = std::numbers::pi * u01(rng);
  return s;
}

}  // namespace detail

/// Deterministic synthetic scenes.
///   domainA  bright warm ellipses/rectangles on a dark, cool, striped background
///   domainB  domainA scenes with luminance polarity inverted (hue kept) plus additive noise
///   class    one shape family (elongated orange ellipses) on the domainA background
inline Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.count == 0) throw ConfigError("synth_dataset: count must be positive");
  if (!(spec.inversion > 0.5 && spec.inversion <= 1)) throw ConfigError("synth_dataset: inversion must lie in (0.5, 1]");
  if (!(spec.distractor_prob >= 0 && spec.distractor_prob <= 1)) throw ConfigError("synth_dataset: distractor_prob must lie in [0, 1]");
  if (!(spec.noise_sigma >= 0)) throw ConfigError("synth_dataset: noise_sigma must be >= 0");
  if (spec.height < 8 || spec.width < 8) throw ConfigError("synth_dataset: images must be at least 8x8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t H = spec.height, W = spec.width;
  const auto fH = static_cast<double>(H), fW = static_cast<double>(W);
  Dataset ds{generator_name(spec.generator), {}};
  for (std::size_t n = 0; n < spec.count; ++n) {
    const bool force_ellipse = spec.generator == SynthGenerator::kClass;
    detail::Shape2D obj;
    std::size_t area = 0;
    Tensor mask({H, W});
    do {
      obj = detail::random_shape(rng, fH, fW, force_ellipse);
      area = 0;
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
          const bool in = obj.contains(static_cast<double>(r), static_cast<double>(c));
          mask.at(r, c) = in ? 1 : 0;
          area += in;
        }
    } while (area < 4);

    std::optional<Tensor> other;
    std::optional<detail::Shape2D> distractor;
    if (u01(rng) < spec.distractor_prob) {
      distractor = detail::random_shape(rng, fH, fW, force_ellipse);
      Tensor o({H, W});
      std::size_t o_area = 0;
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
          const bool in = mask.at(r, c) == 0 && distractor->contains(static_cast<double>(r), static_cast<double>(c));
          o.at(r, c) = in ? 1 : 0;
          o_area += in;
        }
      if (o_area > 0) other = std::move(o);
    }

    // Per-channel colour ranges {low, span}.
    static constexpr double kFg[3][2] = {{0.75, 0.20}, {0.50, 0.30}, {0.20, 0.30}};
    static constexpr double kBg[3][2] = {{0.05, 0.15}, {0.10, 0.15}, {0.20, 0.20}};
    static constexpr double kClassFg[3][2] = {{0.85, 0.10}, {0.55, 0.10}, {0.25, 0.10}};
    const auto& fg_range = spec.generator == SynthGenerator::kClass ? kClassFg : kFg;
    double bg[3], fg[3], dc[3];
    for (int k = 0; k < 3; ++k) {
      bg[k] = kBg[k][0] + kBg[k][1] * u01(rng);
      fg[k] = fg_range[k][0] + fg_range[k][1] * u01(rng);
      dc[k] = fg_range[k][0] + fg_range[k][1] * u01(rng);
    }
    const double freq = 0.25 + 0.5 * u01(rng);
    const double phase = 2 * std::numbers::pi * u01(rng);
    const double orient = std::numbers::pi * u01(rng);
    Tensor image({3, H, W});
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        const double stripe =
            0.06 * std::sin(freq * (std::cos(orient) * static_cast<double>(c) + std::sin(orient) * static_cast<double>(r)) + phase);
        const bool in_obj = mask.at(r, c) != 0;
        const bool in_other = other && other->at(r, c) != 0;
        for (std::size_t k = 0; k < 3; ++k) {
          double v = in_obj ? fg[k] : in_other ? dc[k] : bg[k] + stripe;
          v += 0.03 * gauss(rng);
          image.at(k, r, c) = v;
        }
      }
    }
    if (spec.generator == SynthGenerator::kDomainB) {
      // Shift every channel by s(1 - 2L): luminance L maps to s + (1 - 2s)L.
      const std::size_t hw = H * W;
      for (std::size_t i = 0; i < hw; ++i) {
        const double lum = (image[i] + image[hw + i] + image[2 * hw + i]) / 3;
        for (std::size_t k = 0; k < 3; ++k) image[k * hw + i] += spec.inversion * (1 - 2 * lum) + spec.noise_sigma * gauss(rng);
      }
    }
    for (auto& v : image.data()) v = std::clamp(v, 0.0, 1.0);
    char id[32];
    std::snprintf(id, sizeof id, "%s_%04zu", generator_name(spec.generator), n);
    ds.samples.push_back({id, std::move(image), std::move(mask), std::move(other)});
  }
  return ds;
}

}  // namespace adseg
