#pragma once

// Simulated annotator. At test time it clicks the centre of the largest
// error region; at train time it samples positive/negative corrections from
// the ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "adseg/guidance.hpp"
#include "adseg/segnet.hpp"
#include "adseg/tensor.hpp"

namespace adseg {

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct ErrorRegion {
  std::vector<Pixel> pixels;  // row-major order
  Label label = Label::kPositive;
  std::size_t area() const { return pixels.size(); }
};

/// 4-connected components of the pixels where `mask` is nonzero, in order of
/// their first pixel in a row-major scan.
inline std::vector<std::vector<Pixel>> connected_components(const Tensor& mask) {
  require_rank(mask, 2, "connected_components");
  const int H = static_cast<int>(mask.dim(0)), W = static_cast<int>(mask.dim(1));
  std::vector<int> seen(mask.size(), 0);
  std::vector<std::vector<Pixel>> comps;
  std::vector<Pixel> stack;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const auto idx = static_cast<std::size_t>(r * W + c);
      if (mask[idx] == 0 || seen[idx]) continue;
      std::vector<Pixel> comp;
      seen[idx] = 1;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        comp.push_back(p);
        constexpr int dr[4] = {-1, 1, 0, 0};
        constexpr int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int nr = p.row + dr[k], nc = p.col + dc[k];
          if (nr < 0 || nc < 0 || nr >= H || nc >= W) continue;
          const auto nidx = static_cast<std::size_t>(nr * W + nc);
          if (mask[nidx] == 0 || seen[nidx]) continue;
          seen[nidx] = 1;
          stack.push_back({nr, nc});
        }
      }
      std::sort(comp.begin(), comp.end(),
                [](const Pixel& a, const Pixel& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
      comps.push_back(std::move(comp));
    }
  }
  return comps;
}

namespace detail {

// 1-D squared Euclidean distance transform (lower envelope of parabolas).
// Non-sites carry kFar, large enough never to win against a real site.
inline constexpr double kFar = 1e20;

inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const std::size_t n = f.size();
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto intersect = [&f](std::size_t q, std::size_t p) {
    const double dq = static_cast<double>(q), dp = static_cast<double>(p);
    return ((f[q] + dq * dq) - (f[p] + dp * dp)) / (2 * dq - 2 * dp);
  };
  for (std::size_t q = 1; q < n; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest "site"
/// (nonzero entry of `sites`). Pixels outside the image count as sites when
/// `border_is_site` is set.
inline std::vector<double> squared_distance_to(const Tensor& sites, bool border_is_site) {
  require_rank(sites, 2, "squared_distance_to");
  const std::size_t H = sites.dim(0), W = sites.dim(1);
  const std::size_t pad = border_is_site ? 1 : 0;
  const std::size_t PH = H + 2 * pad, PW = W + 2 * pad;
  constexpr double inf = detail::kFar;
  std::vector<double> grid(PH * PW, border_is_site ? 0.0 : inf);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) grid[(r + pad) * PW + c + pad] = sites.at(r, c) != 0 ? 0.0 : inf;

  std::vector<double> f, d;
  f.resize(PH);
  d.resize(PH);
  for (std::size_t c = 0; c < PW; ++c) {
    for (std::size_t r = 0; r < PH; ++r) f[r] = grid[r * PW + c];
    detail::edt_1d(f, d);
    for (std::size_t r = 0; r < PH; ++r) grid[r * PW + c] = d[r];
  }
  f.resize(PW);
  d.resize(PW);
  for (std::size_t r = 0; r < PH; ++r) {
    for (std::size_t c = 0; c < PW; ++c) f[c] = grid[r * PW + c];
    detail::edt_1d(f, d);
    for (std::size_t c = 0; c < PW; ++c) grid[r * PW + c] = d[c];
  }
  std::vector<double> out(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) out[r * W + c] = grid[(r + pad) * PW + c + pad];
  return out;
}

inline Tensor error_mask(const Tensor& pred_binary, const Tensor& gt) {
  require_same_shape(pred_binary, gt, "error_mask");
  Tensor e(gt.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) e[i] = (pred_binary[i] != 0) != (gt[i] != 0) ? 1 : 0;
  return e;
}

/// Largest 4-connected error region; ties go to the region whose first
/// row-major pixel comes first.
inline std::optional<ErrorRegion> largest_error_region(const Tensor& pred_binary, const Tensor& gt) {
  const Tensor err = error_mask(pred_binary, gt);
  auto comps = connected_components(err);
  if (comps.empty()) return std::nullopt;
  std::size_t best = 0;
  for (std::size_t i = 1; i < comps.size(); ++i)
    if (comps[i].size() > comps[best].size()) best = i;
  ErrorRegion region{std::move(comps[best]), Label::kPositive};
  const Pixel& p = region.pixels.front();
  region.label = gt.at(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)) != 0 ? Label::kPositive
                                                                                               : Label::kNegative;
  return region;
}

/// Click at the centre of the largest error region: the region pixel
/// farthest (Euclidean) from the region's complement, with pixels outside
/// the image counted as complement. Ties resolve to the first pixel in
/// row-major order. Returns nullopt when the prediction matches.
inline std::optional<Click> simulate_click(const Prediction& pred, const Tensor& gt) {
  auto region = largest_error_region(pred.binary, gt);
  if (!region) return std::nullopt;
  Tensor complement(gt.shape(), Real{1});
  const std::size_t W = gt.dim(1);
  for (const Pixel& p : region->pixels)
    complement[static_cast<std::size_t>(p.row) * W + static_cast<std::size_t>(p.col)] = 0;
  const std::vector<double> dist = squared_distance_to(complement, true);
  Pixel best = region->pixels.front();
  double best_d = -1;
  for (const Pixel& p : region->pixels) {
    const double d = dist[static_cast<std::size_t>(p.row) * W + static_cast<std::size_t>(p.col)];
    if (d > best_d) {
      best_d = d;
      best = p;
    }
  }
  const Label label = gt.at(static_cast<std::size_t>(best.row), static_cast<std::size_t>(best.col)) != 0
                          ? Label::kPositive
                          : Label::kNegative;
  return Click{best.row, best.col, label};
}

struct TrainSamplingConfig {
  int max_pos = 5;
  int max_neg = 5;
  double d_near = 5;
  double d_far = 40;
  double d_mid = 10;

  friend bool operator==(const TrainSamplingConfig&, const TrainSamplingConfig&) = default;
};

enum class NegativeStrategy { kBand = 0, kOtherObjects = 1, kContour = 2 };

namespace detail {

template <typename Rng>
std::vector<Pixel> sample_without_replacement(const std::vector<Pixel>& pool, std::size_t k, Rng& rng) {
  std::vector<Pixel> out;
  if (pool.empty() || k == 0) return out;
  k = std::min(k, pool.size());
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
    out.push_back(pool[idx[i]]);
  }
  return out;
}

}  // namespace detail

/// Stage-one training corrections: 1..max_pos positives uniform on the
/// object and 0..max_neg negatives from one strategy picked uniformly:
///   band          uniform over background at distance [d_near, d_far] from the object
///   other objects uniform over `other_objects` (falls back to band)
///   contour       equally spaced (by angle about the object centroid) along
///                 the boundary of the object dilated by d_mid
/// Any strategy whose pool is empty falls back to the whole background.
template <typename Rng>
CorrectionState sample_train_corrections(const Tensor& gt, const Tensor* other_objects, Rng& rng,
                                         const TrainSamplingConfig& cfg = {}) {
  require_rank(gt, 2, "sample_train_corrections");
  const std::size_t H = gt.dim(0), W = gt.dim(1);
  std::vector<Pixel> object, background;
  double cy = 0, cx = 0;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const Pixel p{static_cast<int>(r), static_cast<int>(c)};
      if (gt.at(r, c) != 0) {
        object.push_back(p);
        cy += static_cast<double>(r);
        cx += static_cast<double>(c);
      } else {
        background.push_back(p);
      }
    }
  }
  if (object.empty()) throw DomainError("sample_train_corrections: ground truth has no foreground");
  cy /= static_cast<double>(object.size());
  cx /= static_cast<double>(object.size());
  if (cfg.max_pos < 1 || cfg.max_neg < 0) throw ConfigError("invalid click limits");

  std::uniform_int_distribution<int> npos(1, cfg.max_pos);
  std::uniform_int_distribution<int> nneg(0, cfg.max_neg);
  std::uniform_int_distribution<int> strat(0, 2);
  const auto k_pos = static_cast<std::size_t>(npos(rng));
  const auto k_neg = static_cast<std::size_t>(nneg(rng));
  auto strategy = static_cast<NegativeStrategy>(strat(rng));

  std::vector<Click> clicks;
  for (const Pixel& p : detail::sample_without_replacement(object, k_pos, rng))
    clicks.push_back({p.row, p.col, Label::kPositive});

  const std::vector<double> d2 = squared_distance_to(gt, false);
  auto dist = [&](const Pixel& p) { return std::sqrt(d2[static_cast<std::size_t>(p.row) * W + static_cast<std::size_t>(p.col)]); };

  std::vector<Pixel> negatives;
  if (strategy == NegativeStrategy::kOtherObjects) {
    std::vector<Pixel> pool;
    if (other_objects) {
      require_same_shape(gt, *other_objects, "sample_train_corrections");
      for (const Pixel& p : background)
        if (other_objects->at(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)) != 0) pool.push_back(p);
    }
    if (pool.empty()) strategy = NegativeStrategy::kBand;
    else negatives = detail::sample_without_replacement(pool, k_neg, rng);
  }
  if (strategy == NegativeStrategy::kBand) {
    std::vector<Pixel> pool;
    for (const Pixel& p : background) {
      const double d = dist(p);
      if (d >= cfg.d_near && d <= cfg.d_far) pool.push_back(p);
    }
    if (pool.empty()) pool = background;
    negatives = detail::sample_without_replacement(pool, k_neg, rng);
  }
  if (strategy == NegativeStrategy::kContour && k_neg > 0) {
    std::vector<std::pair<double, Pixel>> contour;
    for (const Pixel& p : background) {
      if (dist(p) > cfg.d_mid) continue;
      bool edge = false;
      constexpr int dr[4] = {-1, 1, 0, 0};
      constexpr int dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4 && !edge; ++k) {
        const int nr = p.row + dr[k], nc = p.col + dc[k];
        if (nr < 0 || nc < 0 || nr >= static_cast<int>(H) || nc >= static_cast<int>(W)) continue;
        edge = dist({nr, nc}) > cfg.d_mid;
      }
      if (edge) contour.emplace_back(std::atan2(p.row - cy, p.col - cx), p);
    }
    if (contour.empty()) {
      negatives = detail::sample_without_replacement(background, k_neg, rng);
    } else {
      std::sort(contour.begin(), contour.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second.row != b.second.row ? a.second.row < b.second.row : a.second.col < b.second.col;
      });
      const std::size_t n = contour.size();
      const std::size_t k = std::min(k_neg, n);
      std::uniform_real_distribution<double> offset(0.0, 1.0);
      const double start = offset(rng);
      for (std::size_t i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(std::floor((start + static_cast<double>(i)) *
                                                           static_cast<double>(n) / static_cast<double>(k))) % n;
        negatives.push_back(contour[j].second);
      }
    }
  }
  for (const Pixel& p : negatives) clicks.push_back({p.row, p.col, Label::kNegative});

  CorrectionState state = corrections_from(clicks, H, W);
  state.initial_count = state.clicks.size();
  return state;
}

/// One stage-two step: with probability reset_prob revert to the initial
/// clicks, otherwise append the simulated test-time click (if any error remains).
template <typename Rng>
CorrectionState iterative_correction_round(const CorrectionState& state, const Prediction& pred, const Tensor& gt,
                                           Rng& rng, double reset_prob) {
  if (!(reset_prob >= 0 && reset_prob <= 1)) throw ConfigError("reset_prob must lie in [0,1]");
  std::bernoulli_distribution reset(reset_prob);
  if (reset(rng)) {
    const std::vector<Click> initial(state.clicks.begin(),
                                     state.clicks.begin() + static_cast<std::ptrdiff_t>(state.initial_count));
    CorrectionState out = corrections_from(initial, state.c.dim(0), state.c.dim(1));
    out.initial_count = state.initial_count;
    return out;
  }
  auto click = simulate_click(pred, gt);
  if (!click) return state;
  CorrectionState out = update_corrections(state, *click);
  return out;
}

}  // namespace adseg
