#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "elt/checkpoint.hpp"
#include "elt/error.hpp"
#include "elt/eval.hpp"

namespace elt {
namespace {

TEST(TvDistance, Examples) {
  const std::vector<double> a{0.5, 0.5, 0.0, 0.0}, b{0.0, 0.0, 0.25, 0.75};
  EXPECT_EQ(tv_distance(a, b), 1.0);
  EXPECT_EQ(tv_distance(a, a), 0.0);
  const std::vector<double> c{0.25, 0.25, 0.25, 0.25};
  EXPECT_DOUBLE_EQ(tv_distance(a, c), 0.5);
  const std::vector<std::size_t> outcomes{0, 1, 1, 3};
  EXPECT_EQ(empirical_distribution(outcomes, 4), (std::vector<double>{0.25, 0.5, 0.0, 0.25}));
  EXPECT_THROW((void)tv_distance(a, std::vector<double>{1.0}), ShapeError);
}

TEST(TvDistance, ExactSamplesAtHundredTimesSupport) {
  const auto src = MarkovGridSource::cyclic({2, 2}, 4, 2, 0.85, 0.25);
  const auto truth = src.distribution(0);
  const std::size_t n = 100 * src.support_size();
  int below = 0;
  for (std::uint64_t rep = 0; rep < 20; ++rep) {
    Rng rng = derive_rng(11, rep);
    std::vector<std::size_t> outcomes;
    for (std::size_t i = 0; i < n; ++i) outcomes.push_back(src.outcome_index(src.sample(0, rng)));
    below += tv_from_samples(outcomes, truth) < 0.05;
  }
  EXPECT_EQ(below, 20);
}

LoopConfig eval_model() {
  LoopConfig cfg;
  cfg.d_model = 16;
  cfg.mlp_dim = 32;
  cfg.loop_max = 3;
  return cfg;
}

TrainBatch small_eval_set(const LoopConfig& cfg) {
  DataSpec data;
  data.eval_examples = 32;
  return make_eval_set(data, cfg, DiffusionSpec{}, 3);
}

TEST(ElasticityCurve, LengthFlopsAndExtrapolationFlags) {
  const LoopConfig cfg = eval_model();
  Rng rng = derive_rng(2, 0);
  const BlockParams p = BlockParams::init(cfg, rng, 0.2);
  const std::vector<int> loops{1, 2, 3, 4, 5};
  const auto curve = elasticity_curve(p, small_eval_set(cfg), loops);
  ASSERT_EQ(curve.size(), loops.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    EXPECT_EQ(curve[i].loops, loops[i]);
    EXPECT_EQ(curve[i].extrapolation, loops[i] > 3);
    EXPECT_TRUE(std::isfinite(curve[i].metric));
  }
  EXPECT_EQ(curve[1].block_flops, 2 * curve[0].block_flops);
  EXPECT_EQ(curve[3].block_flops, 2 * curve[1].block_flops);
  const std::vector<int> too_far{6};
  EXPECT_THROW((void)elasticity_curve(p, small_eval_set(cfg), too_far), ConfigError);
}

TEST(ElasticityCurve, CsvHeader) {
  std::ostringstream os;
  const std::vector<CurvePoint> pts{{1, 0.5, 10, false}};
  write_curve_csv(os, Mode::kMasked, pts);
  std::istringstream in(os.str());
  std::string metric, header;
  std::getline(in, metric);
  std::getline(in, header);
  EXPECT_EQ(metric, "# metric=" + metric_name(Mode::kMasked));
  EXPECT_EQ(header, "loops,metric,block_flops,extrapolation");
}

TEST(Pareto, AntichainOfNonDominatedRows) {
  std::vector<SweepRow> rows(6);
  const std::vector<std::pair<std::uint64_t, double>> pts{{10, 3.0}, {20, 2.0}, {20, 2.5},
                                                          {40, 2.0}, {5, 4.0},  {40, 1.0}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].block_flops = pts[i].first;
    rows[i].metric = pts[i].second;
  }
  mark_pareto(rows);
  const std::vector<bool> want{true, true, false, false, true, true};
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].pareto, want[i]) << i;
  for (const auto& a : rows) {
    for (const auto& b : rows) {
      if (!a.pareto || !b.pareto || &a == &b) continue;
      const bool dominates = a.block_flops <= b.block_flops && a.metric <= b.metric &&
                             (a.block_flops < b.block_flops || a.metric < b.metric);
      EXPECT_FALSE(dominates);
    }
  }
}

TEST(Sweep, MissingCheckpointFailsBeforeAnyJob) {
  SweepGrid grid;
  grid.entries.push_back({"/nonexistent/elt/none.ckpt", {1, 2}});
  EXPECT_THROW((void)pareto_sweep(grid, 1), IoError);
}

TEST(Sweep, DoubledLoopsDoubleFlops) {
  const auto dir = std::filesystem::temp_directory_path() / "elt_test_sweep";
  std::filesystem::create_directories(dir);
  const LoopConfig cfg = eval_model();
  Rng rng = derive_rng(4, 0);
  DataSpec data;
  data.eval_examples = 16;
  save_checkpoint(dir / "a.ckpt", BlockParams::init(cfg, rng, 0.2), {{"data", to_json(data)}});
  SweepGrid grid;
  grid.seed = 9;
  grid.entries.push_back({dir / "a.ckpt", {1, 2, 4}});
  const auto a = pareto_sweep(grid, 1);
  const auto b = pareto_sweep(grid, 2);
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.rows[1].block_flops, 2 * a.rows[0].block_flops);
  EXPECT_EQ(a.rows[2].block_flops, 2 * a.rows[1].block_flops);
  EXPECT_TRUE(a.rows[2].extrapolation);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.rows[i].metric, b.rows[i].metric);
    EXPECT_EQ(a.rows[i].loops, b.rows[i].loops);
  }
  std::filesystem::remove_all(dir);
}

TEST(Throughput, SingleRepeatHasNoDispersion) {
  const LoopConfig cfg = eval_model();
  const BlockParams p = BlockParams::zeros(cfg);
  const auto one = throughput_measure(p, 2, 4, 1, 0);
  EXPECT_FALSE(one.dispersion_defined);
  EXPECT_GT(one.median, 0.0);
  const auto three = throughput_measure(p, 2, 4, 3, 0);
  EXPECT_TRUE(three.dispersion_defined);
  EXPECT_EQ(three.per_repeat.size(), 3u);
  EXPECT_EQ(one.fingerprint, three.fingerprint);
}

TEST(Threads, WorkerCountCappedByJobs) {
  EXPECT_EQ(worker_count(1, 8), 1);
  EXPECT_EQ(worker_count(10, 3), 3);
  EXPECT_GE(worker_count(10, 0), 1);
}

}  // namespace
}  // namespace elt
