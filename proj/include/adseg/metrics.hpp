#pragma once

#include <cstddef>
#include <vector>

#include "adseg/tensor.hpp"

namespace adseg {

/// |a AND b| / |a OR b| for binary masks; two empty masks score 1.
inline Real iou(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? Real{1} : static_cast<Real>(inter) / static_cast<Real>(uni);
}

/// Smallest k with ious[k] >= q, or `budget` if the target is never met.
/// ious[k] is the IoU after k clicks, so the list holds budget + 1 entries.
inline int clicks_at_q(const std::vector<Real>& ious, Real q, int budget) {
  if (budget < 0 || ious.size() != static_cast<std::size_t>(budget) + 1) {
    throw ShapeError("clicks_at_q: expected " + std::to_string(budget + 1) + " IoU values, got " +
                     std::to_string(ious.size()));
  }
  for (std::size_t k = 0; k < ious.size(); ++k)
    if (ious[k] >= q) return static_cast<int>(k);
  return budget;
}

}  // namespace adseg
