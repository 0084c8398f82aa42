#include <gtest/gtest.h>

#include <map>

#include "support.hpp"

using namespace adseg;
using namespace testing_support;

namespace {

Prediction binary_prediction(const Tensor& mask) {
  Tensor p(mask.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = mask[i] != 0 ? 0.9 : 0.1;
  return make_prediction(std::move(p));
}

// Exhaustive reference: label propagation for components, all-pairs search
// for the distance to the complement (outside the image counts as complement).
std::optional<Click> brute_force_click(const Tensor& pred, const Tensor& gt) {
  const int H = static_cast<int>(gt.dim(0)), W = static_cast<int>(gt.dim(1));
  std::vector<int> label(gt.size(), -1);
  for (int i = 0; i < H * W; ++i)
    if ((pred[i] != 0) != (gt[i] != 0)) label[i] = i;
  for (bool changed = true; changed;) {
    changed = false;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        int& l = label[r * W + c];
        if (l < 0) continue;
        const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (const auto& n : nb) {
          if (n[0] < 0 || n[1] < 0 || n[0] >= H || n[1] >= W) continue;
          const int o = label[n[0] * W + n[1]];
          if (o >= 0 && o < l) {
            l = o;
            changed = true;
          }
        }
      }
  }
  std::map<int, int> area;
  for (int l : label)
    if (l >= 0) ++area[l];
  if (area.empty()) return std::nullopt;
  int best_label = -1, best_area = 0;
  for (const auto& [l, a] : area)  // labels are the first row-major pixel of each region
    if (a > best_area) {
      best_area = a;
      best_label = l;
    }
  long best_d = -1;
  int br = 0, bc = 0;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (label[r * W + c] != best_label) continue;
      long d = std::min({(r + 1) * (r + 1), (H - r) * (H - r), (c + 1) * (c + 1), (W - c) * (W - c)});
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (label[y * W + x] != best_label) d = std::min<long>(d, (y - r) * (y - r) + (x - c) * (x - c));
      if (d > best_d) {
        best_d = d;
        br = r;
        bc = c;
      }
    }
  return Click{br, bc, gt.at(br, bc) != 0 ? Label::kPositive : Label::kNegative};
}

Tensor blobs(std::size_t H, std::size_t W, std::mt19937_64& rng, int count) {
  Tensor m({H, W});
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < count; ++k) {
    const double cy = u(rng) * H, cx = u(rng) * W, ry = 1 + u(rng) * H / 3, rx = 1 + u(rng) * W / 3;
    const bool fill = u(rng) < 0.7;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double dy = (i - cy) / ry, dx = (j - cx) / rx;
        if (dy * dy + dx * dx <= 1) m.at(i, j) = fill ? 1 : 0;
      }
  }
  return m;
}

}  // namespace

TEST(SimulateClick, NoErrorWhenPredictionMatches) {
  std::mt19937_64 rng(1);
  const Tensor gt = random_mask(8, 8, rng);
  EXPECT_FALSE(simulate_click(binary_prediction(gt), gt).has_value());
}

TEST(SimulateClick, SquareRegionCentre) {
  Tensor gt({32, 32});
  for (std::size_t r = 10; r <= 14; ++r)
    for (std::size_t c = 20; c <= 24; ++c) gt.at(r, c) = 1;
  const auto click = simulate_click(binary_prediction(Tensor({32, 32})), gt);
  ASSERT_TRUE(click.has_value());
  EXPECT_EQ(*click, (Click{12, 22, Label::kPositive}));
}

TEST(SimulateClick, PicksLargerRegion) {
  Tensor gt({10, 10}), pred({10, 10});
  for (int c = 0; c < 3; ++c) gt.at(1, c) = 1;  // area 3, missed foreground
  for (int c = 2; c < 9; ++c) pred.at(7, c) = 1;  // area 7, false positive
  const auto click = simulate_click(binary_prediction(pred), gt);
  ASSERT_TRUE(click.has_value());
  EXPECT_EQ(click->row, 7);
  EXPECT_GE(click->col, 2);
  EXPECT_LE(click->col, 8);
  EXPECT_EQ(click->label, Label::kNegative);
}

TEST(SimulateClick, TieGoesToFirstRegion) {
  Tensor gt({6, 6});
  gt.at(4, 4) = 1;
  gt.at(1, 1) = 1;
  const auto click = simulate_click(binary_prediction(Tensor({6, 6})), gt);
  ASSERT_TRUE(click.has_value());
  EXPECT_EQ(*click, (Click{1, 1, Label::kPositive}));
}

TEST(SimulateClick, MatchesBruteForceOn100RandomPairs) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor gt, pred;
    if (trial % 2 == 0) {
      gt = blobs(32, 32, rng, 3);
      pred = blobs(32, 32, rng, 3);
    } else {
      gt = random_mask(32, 32, rng, 0.2 + 0.006 * trial);
      pred = random_mask(32, 32, rng, 0.5);
    }
    const auto got = simulate_click(binary_prediction(pred), gt);
    const auto want = brute_force_click(pred, gt);
    ASSERT_EQ(got.has_value(), want.has_value()) << trial;
    if (!got) continue;
    EXPECT_EQ(*got, *want) << "trial " << trial;
    EXPECT_NE(pred.at(got->row, got->col), gt.at(got->row, got->col));
  }
}

TEST(DistanceTransform, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (bool border : {false, true}) {
    const Tensor sites = random_mask(13, 17, rng, 0.1);
    const auto d = squared_distance_to(sites, border);
    for (int r = 0; r < 13; ++r)
      for (int c = 0; c < 17; ++c) {
        double best = 1e20;
        if (border) best = std::min({(r + 1) * (r + 1), (13 - r) * (13 - r), (c + 1) * (c + 1), (17 - c) * (17 - c)});
        for (int y = 0; y < 13; ++y)
          for (int x = 0; x < 17; ++x)
            if (sites.at(y, x) != 0) best = std::min<double>(best, (y - r) * (y - r) + (x - c) * (x - c));
        if (best < 1e19) EXPECT_EQ(d[r * 17 + c], best) << r << "," << c;
      }
  }
}

TEST(TrainCorrections, ClicksRespectGroundTruth) {
  std::mt19937_64 rng(4);
  std::map<std::size_t, int> pos_counts, neg_counts;
  for (int trial = 0; trial < 300; ++trial) {
    const Tensor gt = blobs(32, 32, rng, 1);
    if (gt.sum() == 0) continue;
    Tensor other = blobs(32, 32, rng, 1);
    const CorrectionState s = sample_train_corrections(gt, trial % 3 == 0 ? &other : nullptr, rng);
    std::size_t npos = 0;
    for (const Click& c : s.clicks) {
      if (c.label == Label::kPositive) {
        ++npos;
        EXPECT_EQ(gt.at(c.row, c.col), 1);
      } else {
        EXPECT_EQ(gt.at(c.row, c.col), 0);
      }
    }
    EXPECT_EQ(s.initial_count, s.clicks.size());
    EXPECT_GE(npos, 1u);
    EXPECT_LE(npos, 5u);
    EXPECT_LE(s.clicks.size() - npos, 5u);
    ++pos_counts[npos];
    ++neg_counts[s.clicks.size() - npos];
  }
  EXPECT_EQ(pos_counts.size(), 5u);
  EXPECT_EQ(neg_counts.size(), 6u);
}

TEST(TrainCorrections, DeterministicAndRejectsEmptyObject) {
  std::mt19937_64 g(5);
  const Tensor gt = blobs(24, 24, g, 2);
  ASSERT_GT(gt.sum(), 0);
  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_train_corrections(gt, nullptr, a), sample_train_corrections(gt, nullptr, b));
  EXPECT_THROW(sample_train_corrections(Tensor({8, 8}), nullptr, a), DomainError);
}

TEST(TrainCorrections, OtherObjectNegatives) {
  Tensor gt({20, 20}), other({20, 20});
  for (int r = 2; r < 6; ++r)
    for (int c = 2; c < 6; ++c) gt.at(r, c) = 1;
  for (int r = 14; r < 18; ++r)
    for (int c = 14; c < 18; ++c) other.at(r, c) = 1;
  std::mt19937_64 rng(6);
  int from_other = 0;
  for (int i = 0; i < 200; ++i)
    for (const Click& c : sample_train_corrections(gt, &other, rng).clicks)
      if (c.label == Label::kNegative && other.at(c.row, c.col) != 0) ++from_other;
  EXPECT_GT(from_other, 0);
}

TEST(IterativeRound, Examples) {
  Tensor gt({10, 10});
  for (int r = 3; r < 7; ++r)
    for (int c = 3; c < 7; ++c) gt.at(r, c) = 1;
  std::mt19937_64 rng(7);
  const CorrectionState init = sample_train_corrections(gt, nullptr, rng);
  const CorrectionState grown = update_corrections(init, {0, 0, Label::kNegative});
  const Prediction wrong = binary_prediction(Tensor({10, 10}));

  EXPECT_EQ(iterative_correction_round(grown, wrong, gt, rng, 1.0).clicks, init.clicks);
  EXPECT_EQ(iterative_correction_round(grown, wrong, gt, rng, 1.0).c, init.c);

  const CorrectionState next = iterative_correction_round(init, wrong, gt, rng, 0.0);
  EXPECT_EQ(next.clicks.size(), init.clicks.size() + 1);
  EXPECT_EQ(next.clicks.back(), *simulate_click(wrong, gt));

  EXPECT_EQ(iterative_correction_round(init, binary_prediction(gt), gt, rng, 0.0), init);
  EXPECT_THROW(iterative_correction_round(init, wrong, gt, rng, 1.5), ConfigError);
}
