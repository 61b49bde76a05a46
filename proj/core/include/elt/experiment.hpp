#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "elt/config.hpp"
#include "elt/ilsd.hpp"
#include "elt/model.hpp"
#include "elt/optimizer.hpp"
#include "elt/synthetic.hpp"

namespace elt {

inline constexpr int kExperimentConfigVersion = 1;

// Everything a training run depends on. The seed plus this config fully
// determine the final checkpoint bytes.
struct ExperimentConfig {
  int version = kExperimentConfigVersion;
  LoopConfig model;
  OptimizerConfig optimizer;
  bool ilsd_enabled = true;
  DistillSpace distill_space = DistillSpace::kHeadOutput;
  std::int64_t steps = 1000;  // training steps; also the lambda decay length
  std::size_t batch_size = 16;
  DataSpec data;
  DiffusionSpec diffusion;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  double init_std = 0.02;             // truncated-normal std of weight matrices

  IlsdConfig ilsd() const { return {ilsd_enabled, steps, distill_space}; }
  // Throws ConfigError on any violated invariant, including model/data fit.
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

nlohmann::json to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);

// "version" is required; every other key is optional and falls back to the
// defaults above, except that a diffusion model without an explicit
// optimizer.beta2 gets 0.99. Unknown keys anywhere are ConfigErrors.
nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
// Missing or unparsable files are ConfigErrors.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct TrainLogRow {
  std::int64_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

// Columns: step,L_int,lambda,gt_max,gt_int,distill,total,grad_norm,wall_ms
void write_train_log_header(std::ostream& os);
void write_train_log_row(std::ostream& os, const TrainLogRow& row);

struct TrainResult {
  BlockParams params;
  std::vector<TrainLogRow> log;
};

// Hook invoked after every step, e.g. to stream the log or checkpoint.
using StepHook = std::function<void(const TrainLogRow& row, const BlockParams& params)>;

// In-memory training run. Throws TrainingDiverged on a non-finite step.
TrainResult train(const ExperimentConfig& cfg, const StepHook& hook = {});

// Checkpoint metadata recorded by the training command.
nlohmann::json checkpoint_meta(const ExperimentConfig& cfg, std::int64_t step);

// train() plus files in out_dir: config.json, train.csv, final.ckpt and
// step_<n>.ckpt every checkpoint_every steps. The config is validated before
// out_dir is created.
TrainResult run_training(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace elt
