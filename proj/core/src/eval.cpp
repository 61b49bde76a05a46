#include "elt/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <thread>

#include "elt/accounting.hpp"
#include "elt/checkpoint.hpp"
#include "elt/error.hpp"

namespace elt {

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("tv_distance: distributions over different supports");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += std::abs(p[i] - q[i]);
  return 0.5 * sum;
}

std::vector<double> empirical_distribution(std::span<const std::size_t> outcomes,
                                           std::size_t support) {
  if (outcomes.empty()) throw ConfigError("empirical_distribution: no samples");
  std::vector<double> h(support, 0.0);
  for (auto o : outcomes) {
    if (o >= support) throw ConfigError("empirical_distribution: outcome outside the support");
    h[o] += 1.0;
  }
  for (double& v : h) v /= static_cast<double>(outcomes.size());
  return h;
}

double tv_from_samples(std::span<const std::size_t> outcomes, std::span<const double> truth) {
  const auto emp = empirical_distribution(outcomes, truth.size());
  return tv_distance(emp, truth);
}

std::string metric_name(Mode mode) {
  return mode == Mode::kMasked ? "heldout_masked_cross_entropy" : "heldout_weighted_x0_mse";
}

double heldout_metric(const BlockParams& params, const TrainBatch& eval, int loops) {
  LoopedModel model(params, LoopedModel::Binding::kFrozen);
  const ad::Var out = model.forward(eval.input, loops);
  const double v = params.config().mode == Mode::kMasked
                       ? masked_cross_entropy(out, eval.targets, eval.mask).value().item()
                       : weighted_mse(out, eval.x0, eval.weights).value().item();
  if (!std::isfinite(v)) throw NumericalError("held-out metric is not finite at L=" + std::to_string(loops));
  return v;
}

std::vector<CurvePoint> elasticity_curve(const BlockParams& params, const TrainBatch& eval,
                                         std::span<const int> loop_values) {
  const LoopConfig& cfg = params.config();
  for (int L : loop_values) {
    if (L < 1 || L > cfg.loop_max + 2) {
      throw ConfigError("elasticity: L=" + std::to_string(L) + " outside [1, loop_max+2 = " +
                        std::to_string(cfg.loop_max + 2) + "]");
    }
  }
  std::vector<CurvePoint> curve;
  curve.reserve(loop_values.size());
  for (int L : loop_values) {
    CurvePoint p;
    p.loops = L;
    p.metric = heldout_metric(params, eval, L);
    p.block_flops = count_flops(cfg, L, cfg.seq_len).block;
    p.extrapolation = L > cfg.loop_max;
    curve.push_back(p);
  }
  return curve;
}

void write_curve_csv(std::ostream& os, Mode mode, std::span<const CurvePoint> curve) {
  os << "# metric=" << metric_name(mode) << "\n";
  os << "loops,metric,block_flops,extrapolation\n";
  os.precision(17);
  for (const auto& p : curve) {
    os << p.loops << ',' << p.metric << ',' << p.block_flops << ',' << (p.extrapolation ? 1 : 0)
       << "\n";
  }
}

SweepGrid sweep_grid_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("sweep grid must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "version" && key != "seed" && key != "entries") {
      throw ConfigError("unknown sweep grid key '" + key + "'");
    }
  }
  if (!j.contains("version")) throw ConfigError("sweep grid: missing 'version'");
  SweepGrid grid;
  try {
    if (j.at("version").get<int>() != 1) throw ConfigError("sweep grid: unsupported version");
    if (j.contains("seed")) grid.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("entries")) {
      for (const auto& [key, _] : e.items()) {
        if (key != "ckpt" && key != "loops") throw ConfigError("unknown sweep entry key '" + key + "'");
      }
      SweepEntry entry;
      entry.checkpoint = e.at("ckpt").get<std::string>();
      if (entry.checkpoint.is_relative() && !base_dir.empty()) {
        entry.checkpoint = base_dir / entry.checkpoint;
      }
      entry.loops = e.at("loops").get<std::vector<int>>();
      if (entry.loops.empty()) throw ConfigError("sweep entry has no loop budgets");
      grid.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep grid: ") + e.what());
  }
  if (grid.entries.empty()) throw ConfigError("sweep grid has no entries");
  return grid;
}

void mark_pareto(std::vector<SweepRow>& rows) {
  for (auto& r : rows) {
    r.pareto = std::none_of(rows.begin(), rows.end(), [&](const SweepRow& o) {
      const bool no_worse = o.block_flops <= r.block_flops && o.metric <= r.metric;
      const bool better = o.block_flops < r.block_flops || o.metric < r.metric;
      return no_worse && better;
    });
  }
}

int worker_count(std::size_t jobs, int requested) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("ELT_THREADS")) n = std::atoi(env);
  }
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return static_cast<int>(std::clamp<std::size_t>(jobs, 1, static_cast<std::size_t>(n)));
}

namespace {

struct LoadedCheckpoint {
  Checkpoint ckpt;
  TrainBatch eval;
};

DataSpec data_spec_for(const Checkpoint& ck) {
  if (ck.meta.is_object() && ck.meta.contains("data")) return data_spec_from_json(ck.meta.at("data"));
  DataSpec spec;
  const LoopConfig& cfg = ck.params.config();
  if (cfg.mode == Mode::kDiffusion) {
    // Two well-separated components, one per class, in the model's latent shape.
    spec.kind = "gaussian-mixture";
    const auto D = static_cast<std::size_t>(cfg.seq_len * cfg.latent_dim);
    spec.mixture = {};
    for (int c = 0; c < cfg.n_classes; ++c) {
      spec.mixture.weights.push_back(1.0 / cfg.n_classes);
      spec.mixture.means.emplace_back(D, -1.5 + 3.0 * c / std::max(1, cfg.n_classes - 1));
      spec.mixture.vars.emplace_back(D, 0.25);
    }
  } else {
    spec.grid = {static_cast<std::size_t>(cfg.seq_len)};
  }
  return spec;
}

DiffusionSpec diffusion_spec_for(const Checkpoint& ck) {
  if (ck.meta.is_object() && ck.meta.contains("diffusion")) {
    return diffusion_spec_from_json(ck.meta.at("diffusion"));
  }
  return {};
}

}  // namespace

SweepResult pareto_sweep(const SweepGrid& grid, int threads) {
  // Load every checkpoint up front so a missing file fails before work starts.
  std::map<std::string, LoadedCheckpoint> loaded;
  std::optional<Mode> mode;
  for (const auto& e : grid.entries) {
    const std::string key = e.checkpoint.string();
    if (loaded.contains(key)) continue;
    if (!std::filesystem::exists(e.checkpoint)) throw IoError("sweep: missing checkpoint " + key);
    Checkpoint ck = load_checkpoint(e.checkpoint);
    if (mode && *mode != ck.params.config().mode) {
      throw ConfigError("sweep: checkpoints mix masked and diffusion modes");
    }
    mode = ck.params.config().mode;
    const DataSpec data = data_spec_for(ck);
    check_compatible(data, ck.params.config());
    TrainBatch eval = make_eval_set(data, ck.params.config(), diffusion_spec_for(ck), grid.seed);
    loaded.emplace(key, LoadedCheckpoint{std::move(ck), std::move(eval)});
  }

  struct Job {
    const LoadedCheckpoint* ck;
    std::string name;
    int loops;
  };
  std::vector<Job> jobs;
  for (const auto& e : grid.entries) {
    const auto& lc = loaded.at(e.checkpoint.string());
    for (int L : e.loops) {
      const int limit = lc.ckpt.params.config().loop_max + 2;
      if (L < 1 || L > limit) {
        throw ConfigError("sweep: L=" + std::to_string(L) + " outside [1, " + std::to_string(limit) +
                          "] for " + e.checkpoint.string());
      }
      jobs.push_back({&lc, e.checkpoint.string(), L});
    }
  }

  SweepResult result;
  result.metric = metric_name(*mode);
  result.rows.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const Job& job = jobs[i];
        const BlockParams& params = job.ck->ckpt.params;
        const LoopConfig& cfg = params.config();
        SweepRow row;
        row.checkpoint = job.name;
        row.n_layers = cfg.n_layers;
        row.d_model = cfg.d_model;
        row.loops = job.loops;
        row.params = count_params(cfg).total();
        row.block_flops = count_flops(cfg, job.loops, cfg.seq_len).block;
        row.seed = grid.seed;
        row.extrapolation = job.loops > cfg.loop_max;
        const auto t0 = std::chrono::steady_clock::now();
        row.metric = heldout_metric(params, job.ck->eval, job.loops);
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.rows[i] = std::move(row);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_workers = worker_count(jobs.size(), threads);
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  mark_pareto(result.rows);
  return result;
}

void write_sweep_csv(std::ostream& os, const SweepResult& result) {
  os << "# metric=" << result.metric << "\n";
  os << "checkpoint,n_layers,d_model,loops,params,block_flops,metric,wall_ms,seed,extrapolation,pareto\n";
  os.precision(17);
  for (const auto& r : result.rows) {
    os << r.checkpoint << ',' << r.n_layers << ',' << r.d_model << ',' << r.loops << ',' << r.params
       << ',' << r.block_flops << ',' << r.metric << ',' << r.wall_ms << ',' << r.seed << ','
       << (r.extrapolation ? 1 : 0) << ',' << (r.pareto ? 1 : 0) << "\n";
  }
}

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

Throughput throughput_measure(const BlockParams& params, int loops, std::size_t batch,
                              int repeats, int warmup) {
  if (repeats < 1) throw ConfigError("throughput: repeats must be >= 1");
  if (batch == 0) throw ConfigError("throughput: batch must be positive");
  if (loops < 1) throw ConfigError("throughput: loops must be >= 1");
  const LoopConfig& cfg = params.config();
  Rng rng = derive_rng(0, 0x7470);
  ModelInput in;
  in.batch = batch;
  in.classes.assign(batch, 0);
  const auto rows = batch * static_cast<std::size_t>(cfg.seq_len);
  if (cfg.mode == Mode::kMasked) {
    for (std::size_t i = 0; i < rows; ++i) {
      in.tokens.push_back(static_cast<std::size_t>(uniform_int(rng, 0, cfg.vocab_size)));
    }
  } else {
    in.latents = Tensor({rows, static_cast<std::size_t>(cfg.latent_dim)}, 0.0);
    for (double& v : in.latents.values()) v = standard_normal(rng);
    in.times.assign(batch, 0.5);
  }
  LoopedModel model(params, LoopedModel::Binding::kFrozen);
  for (int i = 0; i < warmup; ++i) (void)model.forward(in, loops);

  Throughput out;
  out.fingerprint = "mode=" + to_string(cfg.mode) + ",N=" + std::to_string(cfg.n_layers) +
                    ",d=" + std::to_string(cfg.d_model) + ",L=" + std::to_string(loops) +
                    ",batch=" + std::to_string(batch) + ",seq_len=" + std::to_string(cfg.seq_len);
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)model.forward(in, loops);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.per_repeat.push_back(static_cast<double>(batch) / std::max(sec, 1e-12));
  }
  out.median = quantile(out.per_repeat, 0.5);
  out.dispersion_defined = repeats >= 2;
  out.iqr = out.dispersion_defined ? quantile(out.per_repeat, 0.75) - quantile(out.per_repeat, 0.25) : 0.0;
  return out;
}

}  // namespace elt
