#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "elt/error.hpp"
#include "elt/masked.hpp"
#include "elt/synthetic.hpp"

namespace elt {
namespace {

TEST(CosineSchedule, Examples) {
  EXPECT_EQ(cosine_mask_count(1, 2, 16), 0);
  EXPECT_EQ(cosine_mask_count(0, 2, 16), 11);
  EXPECT_EQ(cosine_mask_count(23, 24, 256), 0);
  EXPECT_THROW((void)cosine_mask_count(2, 2, 16), ConfigError);
  EXPECT_THROW((void)cosine_mask_count(-1, 2, 16), ConfigError);
}

TEST(CosineSchedule, MonotoneExhaustive) {
  int prev = 256;
  for (int k = 0; k < 24; ++k) {
    const int c = cosine_mask_count(k, 24, 256);
    EXPECT_LE(c, prev) << "k=" << k;
    prev = c;
  }
}

TEST(Temperature, Examples) {
  EXPECT_EQ(sampling_temperature(23, 24, 0.5, 0.8), 0.5);
  EXPECT_NEAR(sampling_temperature(0, 24, 0.5, 0.8), 0.5 + 0.8 * 23.0 / 24.0, 1e-15);
  EXPECT_NEAR(sampling_temperature(0, 24, 0.5, 0.8), 1.2667, 1e-4);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(sampling_temperature(k, 10, 0.7, 0.0), 0.7);
  for (int k = 1; k < 10; ++k) {
    EXPECT_LT(sampling_temperature(k, 10, 0.5, 0.8), sampling_temperature(k - 1, 10, 0.5, 0.8));
  }
}

TEST(Guidance, Examples) {
  const Tensor cond = Tensor::matrix(1, 2, {2.0, -1.0});
  const Tensor uncond = Tensor::matrix(1, 2, {1.0, 0.5});
  EXPECT_EQ(cfg_logits(cond, uncond, 1.0), cond);
  EXPECT_EQ(cfg_logits(cond, uncond, 0.0), uncond);
  EXPECT_EQ(cfg_logits(cond, uncond, 3.0)[0], 4.0);
  for (double s : {-2.0, 0.5, 7.5}) EXPECT_EQ(cfg_logits(cond, cond, s), cond);
  EXPECT_THROW((void)cfg_logits(cond, Tensor({1, 3}), 2.0), ShapeError);
}

TEST(TokenGrid, FlattenRoundTrip) {
  const TokenGrid g = TokenGrid::fully_masked({3, 4, 2}, 5);
  for (std::size_t f = 0; f < g.size(); ++f) EXPECT_EQ(g.flatten(g.unflatten(f)), f);
  EXPECT_EQ(g.masked_count(), 24u);
  EXPECT_THROW(TokenGrid({2, 2}, {0, 1, 6, 2}, 5), ConfigError);
}

Tensor one_hot_logits(const std::vector<int>& tokens, int vocab) {
  Tensor t({tokens.size(), static_cast<std::size_t>(vocab)}, -1e4);
  for (std::size_t i = 0; i < tokens.size(); ++i) t.at(i, tokens[i]) = 0.0;
  return t;
}

TEST(SampleAndMask, OneHotLogitsAreDeterministic) {
  const std::vector<int> want{3, 1, 0, 2};
  DecodeOptions opts;
  opts.steps = 1;
  Rng rng = derive_rng(1, 0);
  const TokenGrid out = sample_and_mask(one_hot_logits(want, 4), TokenGrid::fully_masked({2, 2}, 4), 0, opts, rng);
  EXPECT_EQ(out.tokens(), want);
}

TEST(SampleAndMask, RevealCountsFollowSchedule) {
  const std::vector<std::size_t> shape{4, 4};
  DecodeOptions opts;
  opts.steps = 8;
  Rng rng = derive_rng(2, 0);
  Rng lrng = derive_rng(2, 1);
  TokenGrid grid = TokenGrid::fully_masked(shape, 6);
  std::size_t revealed_total = 0;
  for (int k = 0; k < opts.steps; ++k) {
    Tensor logits({16, 6});
    for (double& v : logits.values()) v = standard_normal(lrng);
    const TokenGrid next = sample_and_mask(logits, grid, k, opts, rng);
    for (std::size_t i = 0; i < 16; ++i) {
      if (!grid.is_masked(i)) {
        EXPECT_EQ(next.at(i), grid.at(i));
      }
    }
    const int before = k == 0 ? 16 : cosine_mask_count(k - 1, opts.steps, 16);
    const std::size_t newly = grid.masked_count() - next.masked_count();
    EXPECT_EQ(static_cast<int>(newly), before - cosine_mask_count(k, opts.steps, 16)) << "k=" << k;
    revealed_total += newly;
    grid = next;
  }
  EXPECT_EQ(grid.masked_count(), 0u);
  EXPECT_EQ(revealed_total, 16u);
}

TEST(SampleAndMask, RejectsNonFiniteLogits) {
  DecodeOptions opts;
  opts.steps = 2;
  Rng rng = derive_rng(3, 0);
  Tensor logits({4, 4}, 0.0);
  logits[5] = std::nan("");
  EXPECT_THROW((void)sample_and_mask(logits, TokenGrid::fully_masked({2, 2}, 4), 0, opts, rng),
               NumericalError);
}

// Independent oracle: p(x_i = v | revealed) by summing the chain probability
// over every completion, computed from the cyclic parameters directly.
std::vector<double> brute_conditional(const std::vector<int>& grid, std::size_t pos, int c,
                                      double peak, int V) {
  const std::size_t n = grid.size();
  std::vector<double> mass(V, 0.0);
  std::vector<int> x(n, 0);
  const auto total = static_cast<std::size_t>(std::pow(V, n));
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t r = idx;
    for (std::size_t i = n; i-- > 0;) {
      x[i] = static_cast<int>(r % V);
      r /= V;
    }
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) ok = ok && (grid[i] == V || grid[i] == x[i]);
    if (!ok) continue;
    double p = 1.0 / V;
    for (std::size_t i = 1; i < n; ++i) {
      p *= x[i] == (x[i - 1] + 1 + c) % V ? peak : (1.0 - peak) / (V - 1);
    }
    mass[x[pos]] += p;
  }
  double z = 0.0;
  for (double m : mass) z += m;
  for (double& m : mass) m /= z;
  return mass;
}

TEST(EnumerationOracle, MatchesBruteForceConditionals) {
  const int V = 4;
  const auto source = MarkovGridSource::cyclic({2, 2}, V, 2, 0.85, 0.25);
  EnumerationOracle oracle(source);
  const std::vector<std::vector<int>> grids{{4, 4, 4, 4}, {1, 4, 4, 0}, {4, 2, 4, 4}, {3, 4, 1, 4}};
  for (int c : {0, 1}) {
    for (const auto& g : grids) {
      const Tensor logits = oracle.logits(TokenGrid({2, 2}, g, V), c, 1);
      for (std::size_t pos = 0; pos < 4; ++pos) {
        if (g[pos] != V) continue;
        const auto want = brute_conditional(g, pos, c, 0.85, V);
        double z = 0.0;
        for (int v = 0; v < V; ++v) z += std::exp(logits.at(pos, v));
        for (int v = 0; v < V; ++v) EXPECT_NEAR(std::exp(logits.at(pos, v)) / z, want[v], 1e-12);
      }
    }
  }
}

class CountingPredictor : public MaskedPredictor {
 public:
  Tensor logits(const TokenGrid& grid, int, int loops) override {
    applications_ += static_cast<std::size_t>(loops);
    return Tensor({grid.size(), static_cast<std::size_t>(grid.vocab_size())}, 0.0);
  }
  std::size_t block_applications() const override { return applications_; }

 private:
  std::size_t applications_ = 0;
};

TEST(Generate, CompletesAndCountsApplications) {
  for (double s : {1.0, 3.0}) {
    CountingPredictor model;
    DecodeOptions opts;
    opts.steps = 6;
    opts.cfg_scale = s;
    Rng rng = derive_rng(4, 0);
    const auto r = generate(model, {4, 4}, 8, 0, 3, opts, rng);
    EXPECT_EQ(r.grid.masked_count(), 0u);
    EXPECT_EQ(r.block_applications, (s == 1.0 ? 1u : 2u) * 6u * 3u);
  }
}

TEST(CorruptForTraining, EndpointsAndMeanRatio) {
  EXPECT_EQ(masked_positions_for(0.0, 16), 16u);
  EXPECT_EQ(masked_positions_for(1.0, 16), 1u);
  Rng rng = derive_rng(6, 0);
  const TokenGrid clean({4, 4}, std::vector<int>(16, 2), 4);
  double ratio = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto c = corrupt_for_training(clean, rng);
    ASSERT_GE(c.grid.masked_count(), 1u);
    ratio += c.ratio;
  }
  EXPECT_NEAR(ratio / draws, 2.0 / std::numbers::pi, 0.01);
}

TEST(CorruptForTraining, RecordsTargets) {
  Rng rng = derive_rng(7, 0);
  const TokenGrid clean({2, 3}, {0, 1, 2, 3, 0, 1}, 4);
  const auto c = corrupt_for_training(clean, rng);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(c.targets[i], static_cast<std::size_t>(clean.at(i)));
    EXPECT_EQ(c.mask[i] == 1, c.grid.is_masked(i));
  }
}

}  // namespace
}  // namespace elt
