#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "elt/ilsd.hpp"
#include "elt/model.hpp"
#include "elt/synthetic.hpp"

namespace elt {

// 0.5 * sum |p - q| over a common outcome set.
double tv_distance(std::span<const double> p, std::span<const double> q);

// Histogram of outcome indices normalised to a distribution over `support`.
std::vector<double> empirical_distribution(std::span<const std::size_t> outcomes,
                                           std::size_t support);

// TV between the empirical distribution of `outcomes` and `truth`.
double tv_from_samples(std::span<const std::size_t> outcomes, std::span<const double> truth);

// Held-out objective at loop budget L: masked cross-entropy averaged over
// masked positions, or w(t)-weighted MSE averaged over examples.
double heldout_metric(const BlockParams& params, const TrainBatch& eval, int loops);

// Name of the metric heldout_metric reports for this mode.
std::string metric_name(Mode mode);

struct CurvePoint {
  int loops = 0;
  double metric = 0.0;
  std::uint64_t block_flops = 0;
  bool extrapolation = false;  // loops > loop_max
};

// Metric per requested L. Every L must lie in [1, loop_max + 2].
std::vector<CurvePoint> elasticity_curve(const BlockParams& params, const TrainBatch& eval,
                                         std::span<const int> loop_values);

// Columns: loops,metric,block_flops,extrapolation
void write_curve_csv(std::ostream& os, Mode mode, std::span<const CurvePoint> curve);

// One entry of a sweep grid: a checkpoint and the loop budgets to try.
struct SweepEntry {
  std::filesystem::path checkpoint;
  std::vector<int> loops;
};

struct SweepGrid {
  std::vector<SweepEntry> entries;
  std::uint64_t seed = 0;  // seeds the held-out set of every job
};

// {"version": 1, "seed": n, "entries": [{"ckpt": path, "loops": [..]}, ...]}.
// Relative checkpoint paths resolve against `base_dir`.
SweepGrid sweep_grid_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct SweepRow {
  std::string checkpoint;
  int n_layers = 0;
  int d_model = 0;
  int loops = 0;
  std::uint64_t params = 0;
  std::uint64_t block_flops = 0;
  double metric = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
  bool extrapolation = false;
  bool pareto = false;
};

struct SweepResult {
  std::string metric;  // definition of the metric column
  std::vector<SweepRow> rows;
};

// Marks rows that no other row dominates in (block_flops, metric), lower
// being better in both.
void mark_pareto(std::vector<SweepRow>& rows);

// Evaluates every (checkpoint, L) pair on a pool of worker threads. The
// worker count is `threads` if positive, else ELT_THREADS, else hardware
// concurrency. Rows come back in grid order. A missing or unreadable
// checkpoint throws IoError before any job runs.
SweepResult pareto_sweep(const SweepGrid& grid, int threads = 0);

// Header: "# metric=<name>" then
// checkpoint,n_layers,d_model,loops,params,block_flops,metric,wall_ms,seed,extrapolation,pareto
void write_sweep_csv(std::ostream& os, const SweepResult& result);

// Worker count from ELT_THREADS (when set and positive), capped by `jobs`.
int worker_count(std::size_t jobs, int requested = 0);

struct Throughput {
  std::string fingerprint;  // mode, N, d, L, batch, seq_len
  double median = 0.0;      // samples per second
  double iqr = 0.0;         // only meaningful when dispersion_defined
  bool dispersion_defined = false;
  std::vector<double> per_repeat;
};

// Times `repeats` forward passes at loop budget L on a random batch after
// `warmup` untimed passes.
Throughput throughput_measure(const BlockParams& params, int loops, std::size_t batch,
                              int repeats, int warmup = 1);

}  // namespace elt
