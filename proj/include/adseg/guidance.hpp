#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "adseg/tensor.hpp"

namespace adseg {

enum class Label { kNegative = 0, kPositive = 1 };

inline const char* to_string(Label l) { return l == Label::kPositive ? "positive" : "negative"; }

struct Click {
  int row = 0;
  int col = 0;
  Label label = Label::kPositive;

  friend bool operator==(const Click&, const Click&) = default;
};

inline void require_in_bounds(const Click& c, std::size_t H, std::size_t W) {
  if (c.row < 0 || c.col < 0 || static_cast<std::size_t>(c.row) >= H || static_cast<std::size_t>(c.col) >= W) {
    throw DomainError("click (" + std::to_string(c.row) + "," + std::to_string(c.col) + ") outside " +
                      std::to_string(H) + "x" + std::to_string(W) + " image");
  }
}

inline constexpr Real kUnlabeled = -1;

/// Clicks in arrival order plus the ternary map they induce: 1 positive,
/// 0 negative, -1 unlabeled. A later click on the same pixel wins.
/// `initial_count` marks how many leading clicks form the reset point used
/// by iterative training.
struct CorrectionState {
  std::vector<Click> clicks;
  Tensor c;
  std::size_t initial_count = 0;

  friend bool operator==(const CorrectionState&, const CorrectionState&) = default;
};

inline CorrectionState empty_corrections(std::size_t H, std::size_t W) {
  return {{}, Tensor({H, W}, kUnlabeled), 0};
}

inline CorrectionState update_corrections(CorrectionState state, const Click& click) {
  require_in_bounds(click, state.c.dim(0), state.c.dim(1));
  state.c.at(static_cast<std::size_t>(click.row), static_cast<std::size_t>(click.col)) =
      click.label == Label::kPositive ? Real{1} : Real{0};
  state.clicks.push_back(click);
  return state;
}

inline CorrectionState corrections_from(const std::vector<Click>& clicks, std::size_t H, std::size_t W) {
  CorrectionState s = empty_corrections(H, W);
  for (const Click& c : clicks) s = update_corrections(std::move(s), c);
  return s;
}

inline std::size_t labeled_pixel_count(const Tensor& c) {
  std::size_t n = 0;
  for (Real v : c.data()) n += v != kUnlabeled;
  return n;
}

/// Two binary channels: 0 = positive disks, 1 = negative disks.
struct GuidanceMap {
  Tensor channels;

  friend bool operator==(const GuidanceMap&, const GuidanceMap&) = default;
};

/// Pixel (i,j) of channel k is set iff some click with that label has
/// (i-row)^2 + (j-col)^2 <= radius^2.
inline GuidanceMap encode_guidance(const std::vector<Click>& clicks, std::size_t H, std::size_t W, int radius) {
  if (radius < 0) throw DomainError("guidance radius must be non-negative");
  Tensor g({2, H, W});
  const int r2 = radius * radius;
  for (const Click& c : clicks) {
    require_in_bounds(c, H, W);
    const std::size_t ch = c.label == Label::kPositive ? 0 : 1;
    for (int dy = -radius; dy <= radius; ++dy) {
      const int y = c.row + dy;
      if (y < 0 || y >= static_cast<int>(H)) continue;
      for (int dx = -radius; dx <= radius; ++dx) {
        const int x = c.col + dx;
        if (x < 0 || x >= static_cast<int>(W) || dy * dy + dx * dx > r2) continue;
        g.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
      }
    }
  }
  return {std::move(g)};
}

/// Stacks [R,G,B,pos,neg].
inline Tensor assemble_input(const Tensor& image, const GuidanceMap& g) {
  require_rank(image, 3, "assemble_input");
  if (image.dim(0) != 3) throw ShapeError("assemble_input: image must have 3 channels");
  if (g.channels.shape() != Shape{2, image.dim(1), image.dim(2)}) {
    throw ShapeError("assemble_input: guidance " + shape_str(g.channels.shape()) + " does not match image " +
                     shape_str(image.shape()));
  }
  std::vector<Real> data;
  data.reserve(image.size() + g.channels.size());
  data.insert(data.end(), image.data().begin(), image.data().end());
  data.insert(data.end(), g.channels.data().begin(), g.channels.data().end());
  return Tensor({5, image.dim(1), image.dim(2)}, std::move(data));
}

inline Tensor model_input(const Tensor& image, const std::vector<Click>& clicks, int radius) {
  return assemble_input(image, encode_guidance(clicks, image.dim(1), image.dim(2), radius));
}

}  // namespace adseg
