#include "elt/experiment.hpp"

#include <chrono>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "elt/checkpoint.hpp"
#include "elt/error.hpp"

namespace elt {
namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown " + what + " key '" + key + "'");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

nlohmann::json to_json(const OptimizerConfig& cfg) {
  return nlohmann::json{{"lr", cfg.lr},
                        {"beta1", cfg.beta1},
                        {"beta2", cfg.beta2},
                        {"eps", cfg.eps},
                        {"weight_decay", cfg.weight_decay},
                        {"warmup_steps", cfg.warmup_steps},
                        {"grad_clip", cfg.grad_clip}};
}

OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps", "grad_clip"},
             "optimizer");
  OptimizerConfig cfg;
  try {
    read_opt(j, "lr", cfg.lr);
    read_opt(j, "beta1", cfg.beta1);
    read_opt(j, "beta2", cfg.beta2);
    read_opt(j, "eps", cfg.eps);
    read_opt(j, "weight_decay", cfg.weight_decay);
    read_opt(j, "warmup_steps", cfg.warmup_steps);
    read_opt(j, "grad_clip", cfg.grad_clip);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimizer config: ") + e.what());
  }
  if (!(cfg.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must be in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw ConfigError("optimizer.eps must be positive");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be non-negative");
  if (cfg.warmup_steps < 0) throw ConfigError("optimizer.warmup_steps must be non-negative");
  return cfg;
}

void ExperimentConfig::validate() const {
  if (version != kExperimentConfigVersion) {
    throw ConfigError("unsupported config version " + std::to_string(version));
  }
  model.validate();
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  if (ilsd_enabled && model.loop_min >= model.loop_max) {
    throw ConfigError("ILSD requires at least one intermediate depth (loop_min < loop_max)");
  }
  check_compatible(data, model);
  (void)diffusion.schedule();
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  return nlohmann::json{{"version", cfg.version},
                        {"seed", cfg.seed},
                        {"steps", cfg.steps},
                        {"batch_size", cfg.batch_size},
                        {"ilsd_enabled", cfg.ilsd_enabled},
                        {"distill_space", to_string(cfg.distill_space)},
                        {"checkpoint_every", cfg.checkpoint_every},
                        {"init_std", cfg.init_std},
                        {"model", to_json(cfg.model)},
                        {"optimizer", to_json(cfg.optimizer)},
                        {"data", to_json(cfg.data)},
                        {"diffusion", to_json(cfg.diffusion)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"version", "seed", "steps", "batch_size", "ilsd_enabled", "distill_space",
              "checkpoint_every", "init_std", "model", "optimizer", "data", "diffusion"},
             "experiment config");
  if (!j.contains("version")) throw ConfigError("experiment config: missing required key 'version'");
  ExperimentConfig cfg;
  try {
    cfg.version = j.at("version").get<int>();
    read_opt(j, "seed", cfg.seed);
    read_opt(j, "steps", cfg.steps);
    read_opt(j, "batch_size", cfg.batch_size);
    read_opt(j, "ilsd_enabled", cfg.ilsd_enabled);
    read_opt(j, "checkpoint_every", cfg.checkpoint_every);
    read_opt(j, "init_std", cfg.init_std);
    if (j.contains("distill_space")) {
      cfg.distill_space = distill_space_from_string(j.at("distill_space").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  if (j.contains("model")) {
    // Missing model keys take their defaults; unknown ones are still rejected.
    if (!j.at("model").is_object()) throw ConfigError("model config must be a JSON object");
    nlohmann::json merged = to_json(LoopConfig{});
    for (const auto& [key, value] : j.at("model").items()) merged[key] = value;
    cfg.model = loop_config_from_json(merged);
  }
  // Diffusion runs default to beta2 = 0.99; an explicit value always wins.
  if (cfg.model.mode == Mode::kDiffusion) cfg.optimizer.beta2 = 0.99;
  if (j.contains("optimizer")) {
    OptimizerConfig defaults = cfg.optimizer;
    cfg.optimizer = optimizer_config_from_json(j.at("optimizer"));
    if (!j.at("optimizer").contains("beta2")) cfg.optimizer.beta2 = defaults.beta2;
  }
  if (j.contains("data")) cfg.data = data_spec_from_json(j.at("data"));
  if (j.contains("diffusion")) cfg.diffusion = diffusion_spec_from_json(j.at("diffusion"));
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

void write_train_log_header(std::ostream& os) {
  os << "step,L_int,lambda,gt_max,gt_int,distill,total,grad_norm,wall_ms\n";
}

void write_train_log_row(std::ostream& os, const TrainLogRow& r) {
  std::ostringstream line;
  line.precision(17);
  line << r.step << ',' << r.loss.loop_int << ',' << r.loss.lambda << ',' << r.loss.gt_max << ','
       << r.loss.gt_int << ',' << r.loss.distill << ',' << r.loss.total << ',' << r.grad_norm << ','
       << r.wall_ms << '\n';
  os << line.str();
}

TrainResult train(const ExperimentConfig& cfg, const StepHook& hook) {
  cfg.validate();
  Rng init_rng = derive_rng(cfg.seed, 1);
  Rng data_rng = derive_rng(cfg.seed, 2);
  Rng step_rng = derive_rng(cfg.seed, 3);
  BlockParams params = BlockParams::init(cfg.model, init_rng, cfg.init_std);
  AdamW opt(params, cfg.optimizer);
  const IlsdConfig ilsd = cfg.ilsd();
  TrainResult result{params, {}};
  result.log.reserve(static_cast<std::size_t>(cfg.steps));
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainBatch batch = make_train_batch(cfg.data, cfg.model, cfg.diffusion, cfg.batch_size, data_rng);
    const TrainStepResult r = train_step(params, opt, batch, ilsd, step, step_rng);
    TrainLogRow row;
    row.step = step;
    row.loss = r.loss;
    row.grad_norm = r.grad_norm;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    if (hook) hook(row, params);
  }
  result.params = std::move(params);
  return result;
}

nlohmann::json checkpoint_meta(const ExperimentConfig& cfg, std::int64_t step) {
  return nlohmann::json{{"experiment", to_json(cfg)},
                        {"step", step},
                        {"data", to_json(cfg.data)},
                        {"diffusion", to_json(cfg.diffusion)}};
}

TrainResult run_training(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  {
    std::ofstream conf(out_dir / "config.json");
    if (!conf) throw IoError("cannot write " + (out_dir / "config.json").string());
    conf << to_json(cfg).dump(2) << "\n";
  }
  std::ofstream log(out_dir / "train.csv");
  if (!log) throw IoError("cannot write " + (out_dir / "train.csv").string());
  write_train_log_header(log);
  auto hook = [&](const TrainLogRow& row, const BlockParams& params) {
    write_train_log_row(log, row);
    const std::int64_t done = row.step + 1;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps) {
      save_checkpoint(out_dir / ("step_" + std::to_string(done) + ".ckpt"), params,
                      checkpoint_meta(cfg, done));
    }
  };
  auto result = [&] {
    try {
      return train(cfg, hook);
    } catch (const TrainingDiverged&) {
      log.flush();
      throw;
    }
  }();
  log.flush();
  if (!log) throw IoError("failed writing " + (out_dir / "train.csv").string());
  save_checkpoint(out_dir / "final.ckpt", result.params, checkpoint_meta(cfg, cfg.steps));
  return result;
}

}  // namespace elt
