#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "urbanmsr/sampler.hpp"

using namespace umsr;
using T = Tensor<double>;

namespace {

T random_features(Shape shape, std::uint64_t seed) {
  T t = T::zeros(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST(NeighborhoodDistance, MetricBasics) {
  // Two regions with identical channel vectors.
  T f = T::zeros({2, 1, 2});
  f.at(0, 0, 0) = 0.4;
  f.at(1, 0, 0) = -0.3;
  f.at(0, 0, 1) = 0.4;
  f.at(1, 0, 1) = -0.3;
  EXPECT_DOUBLE_EQ(neighborhood_distance(f, 0, 0, 0, 1), 0.0);

  // 3-4-5 triangle: vectors (1,2) and (4,6).
  T g = T::zeros({2, 1, 2});
  g.at(0, 0, 0) = 1;
  g.at(1, 0, 0) = 2;
  g.at(0, 0, 1) = 4;
  g.at(1, 0, 1) = 6;
  EXPECT_DOUBLE_EQ(neighborhood_distance(g, 0, 0, 0, 1), 5.0);

  EXPECT_THROW(neighborhood_distance(g, 0, 0, 2, 0), DimensionError);
}

TEST(NeighborhoodDistance, MatchesLoopOracle) {
  auto f = random_features({6, 4, 4}, 3);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    int i = static_cast<int>(rng.below(4)), j = static_cast<int>(rng.below(4));
    int i2 = static_cast<int>(rng.below(4)), j2 = static_cast<int>(rng.below(4));
    std::vector<double> a, b;
    for (int c = 0; c < 6; ++c) {
      a.push_back(f.at(c, i, j));
      b.push_back(f.at(c, i2, j2));
    }
    EXPECT_NEAR(neighborhood_distance(f, i, j, i2, j2), oracle::euclidean(a, b), 1e-6);
    // Symmetry and non-negativity.
    EXPECT_DOUBLE_EQ(neighborhood_distance(f, i, j, i2, j2),
                     neighborhood_distance(f, i2, j2, i, j));
    EXPECT_GE(neighborhood_distance(f, i, j, i2, j2), 0.0);
  }
}

TEST(CityDistance, IdenticalFramesAndSingleCell) {
  auto f = random_features({3, 2, 2}, 7);
  EXPECT_DOUBLE_EQ(city_distance(f, f), 0.0);

  T a = T::from({1, 1, 1}, {3.0});
  T b = T::from({1, 1, 1}, {7.0});
  EXPECT_DOUBLE_EQ(city_distance(a, b), 4.0);
}

TEST(CityDistance, MatchesLoopOracle) {
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_features({4, 3, 5}, 100 + trial);
    auto b = random_features({4, 3, 5}, 200 + trial);
    EXPECT_NEAR(city_distance(a, b), oracle::frame_distance(a.values(), b.values(), 4, 3, 5),
                1e-6);
    EXPECT_DOUBLE_EQ(city_distance(a, b), city_distance(b, a));
  }
}

TEST(CityDistance, SharedAcrossAnchorPositions) {
  // The frame-pair distance is one number; every anchor position of the pair
  // must see literally the same value.
  auto a = random_features({4, 4, 4}, 11);
  auto b = random_features({4, 4, 4}, 13);
  double d = city_distance(a, b);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      SamplerConfig cfg;
      cfg.mode = ThresholdMode::Absolute;
      cfg.theta = 1.0;
      std::vector<Candidate> row{{1, d}};
      auto s = sample_city(row, 0, i, j, cfg);
      double got = s.positives.empty() ? s.negatives[0].distance : s.positives[0].distance;
      EXPECT_DOUBLE_EQ(got, d);
    }
}

TEST(Classify, ThresholdRule) {
  SamplerConfig cfg;
  cfg.mode = ThresholdMode::Absolute;
  cfg.delta = 0.5;
  cfg.k = 8;
  auto s = classify({{0, 0.3}, {1, 0.7}}, cfg.delta, cfg);
  ASSERT_EQ(s.positives.size(), 1u);
  ASSERT_EQ(s.negatives.size(), 1u);
  EXPECT_EQ(s.positives[0].index, 0);
  EXPECT_EQ(s.negatives[0].index, 1);
}

TEST(Classify, AllZeroDistancesDegenerate) {
  SamplerConfig cfg;
  cfg.mode = ThresholdMode::Absolute;
  cfg.delta = 0.5;
  cfg.k = 4;
  auto s = classify({{0, 0.0}, {1, 0.0}, {2, 0.0}}, cfg.delta, cfg);
  EXPECT_EQ(s.positives.size(), 3u);
  EXPECT_TRUE(s.negatives.empty());
  EXPECT_TRUE(s.short_set);
}

TEST(Classify, TopKTruncationKeepsNearest) {
  SamplerConfig cfg;
  cfg.mode = ThresholdMode::Absolute;
  cfg.delta = 0.4;
  cfg.k = 2;
  auto s = classify({{0, 0.1}, {1, 0.5}, {2, 0.3}, {3, 0.9}}, cfg.delta, cfg);
  ASSERT_EQ(s.positives.size(), 2u);
  EXPECT_DOUBLE_EQ(s.positives[0].distance, 0.1);
  EXPECT_DOUBLE_EQ(s.positives[1].distance, 0.3);
  ASSERT_EQ(s.negatives.size(), 2u);
  EXPECT_DOUBLE_EQ(s.negatives[0].distance, 0.5);
  EXPECT_DOUBLE_EQ(s.negatives[1].distance, 0.9);
}

TEST(Classify, PartitionProperty) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Candidate> cands;
    int n = 5 + static_cast<int>(rng.below(40));
    for (int i = 0; i < n; ++i) cands.push_back({i, rng.uniform(0.0, 1.0)});
    SamplerConfig cfg;
    cfg.mode = ThresholdMode::Absolute;
    cfg.delta = rng.uniform(0.2, 0.8);
    cfg.k = 1 + static_cast<int>(rng.below(8));
    auto s = classify(cands, cfg.delta, cfg);
    // Every selected candidate is on the right side of the threshold; both
    // lists respect K and share no index.
    EXPECT_LE(s.positives.size(), static_cast<std::size_t>(cfg.k));
    EXPECT_LE(s.negatives.size(), static_cast<std::size_t>(cfg.k));
    std::set<int> seen;
    for (const auto& p : s.positives) {
      EXPECT_LE(p.distance, cfg.delta);
      EXPECT_TRUE(seen.insert(p.index).second);
    }
    for (const auto& ng : s.negatives) {
      EXPECT_GT(ng.distance, cfg.delta);
      EXPECT_TRUE(seen.insert(ng.index).second);
    }
    // Matches the full-sort oracle.
    std::vector<double> dist(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) dist[static_cast<std::size_t>(i)] = cands[static_cast<std::size_t>(i)].distance;
    auto ref = oracle::classify(dist, cfg.delta, cfg.k);
    ASSERT_EQ(s.positives.size(), ref.pos.size());
    for (std::size_t i = 0; i < ref.pos.size(); ++i) EXPECT_EQ(s.positives[i].index, ref.pos[i]);
    ASSERT_EQ(s.negatives.size(), ref.neg.size());
    for (std::size_t i = 0; i < ref.neg.size(); ++i) EXPECT_EQ(s.negatives[i].index, ref.neg[i]);
  }
}

TEST(Classify, PercentileFractionWithinOneCount) {
  Rng rng(37);
  for (int trial = 0; trial < 30; ++trial) {
    int n = 20 + static_cast<int>(rng.below(100));
    std::vector<Candidate> cands;
    for (int i = 0; i < n; ++i) cands.push_back({i, rng.uniform(0.0, 1.0)});
    SamplerConfig cfg;
    cfg.mode = ThresholdMode::Percentile;
    cfg.percentile = rng.uniform(0.05, 0.6);
    cfg.k = n;  // no truncation, measure the raw split
    auto s = classify(cands, 0.0, cfg);
    double fraction = static_cast<double>(s.positives.size()) / n;
    EXPECT_NEAR(fraction, cfg.percentile, 1.0 / n + 1e-12);
  }
}

TEST(TopK, DefinitionTieBreakAndOracle) {
  EXPECT_EQ(topk_select({3, 1, 2}, 1, true), (std::vector<int>{1}));
  EXPECT_EQ(topk_select({2, 2, 2}, 2, true), (std::vector<int>{0, 1}));
  EXPECT_TRUE(topk_select({}, 3, true).empty());

  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> v(100);
    for (auto& x : v) x = rng.uniform(0.0, 1.0);
    int k = 1 + static_cast<int>(rng.below(20));
    bool asc = rng.below(2) == 0;
    EXPECT_EQ(topk_select(v, k, asc), oracle::topk(v, k, asc));
  }
}

TEST(SampleNeighborhood, ExcludesAnchorAndOrdersByDistance) {
  auto f = random_features({4, 4, 4}, 43);
  SamplerConfig cfg;
  cfg.mode = ThresholdMode::Percentile;
  cfg.percentile = 0.25;
  cfg.k = 5;
  auto s = sample_neighborhood(f, 0, 1, 2, cfg);
  int anchor_index = 1 * 4 + 2;
  for (const auto& p : s.positives) EXPECT_NE(p.index, anchor_index);
  for (const auto& n : s.negatives) EXPECT_NE(n.index, anchor_index);
  for (std::size_t i = 1; i < s.positives.size(); ++i)
    EXPECT_LE(s.positives[i - 1].distance, s.positives[i].distance);
  for (std::size_t i = 1; i < s.negatives.size(); ++i)
    EXPECT_LE(s.negatives[i - 1].distance, s.negatives[i].distance);
  // Every positive is at most every negative's distance.
  if (!s.positives.empty() && !s.negatives.empty())
    EXPECT_LE(s.positives.back().distance, s.negatives.front().distance);
}

TEST(SamplerConfig, Validation) {
  SamplerConfig bad;
  bad.k = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  SamplerConfig badp;
  badp.mode = ThresholdMode::Percentile;
  badp.percentile = 1.5;
  EXPECT_THROW(badp.validate(), ConfigError);
}
