// elt: command-line front end for training, sampling and evaluating elastic
// looped transformers. Exit codes: 0 ok, 2 config error, 3 numerical
// failure, 4 I/O error.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "elt/accounting.hpp"
#include "elt/checkpoint.hpp"
#include "elt/diffusion.hpp"
#include "elt/error.hpp"
#include "elt/eval.hpp"
#include "elt/experiment.hpp"
#include "elt/masked.hpp"
#include "elt/synthetic.hpp"
#include "elt/verify.hpp"

namespace {

using nlohmann::json;

// "1..6" or "1,2,4".
std::vector<int> parse_loops(const std::string& spec) {
  std::vector<int> out;
  try {
    if (const auto dots = spec.find(".."); dots != std::string::npos) {
      const int lo = std::stoi(spec.substr(0, dots)), hi = std::stoi(spec.substr(dots + 2));
      if (hi < lo) throw elt::ConfigError("empty loop range '" + spec + "'");
      for (int l = lo; l <= hi; ++l) out.push_back(l);
    } else {
      std::stringstream ss(spec);
      for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoi(item));
    }
  } catch (const std::logic_error&) {
    throw elt::ConfigError("cannot parse loop list '" + spec + "' (use a..b or a,b,c)");
  }
  if (out.empty()) throw elt::ConfigError("empty loop list");
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw elt::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw elt::IoError("failed writing " + path.string());
}

elt::Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw elt::IoError("checkpoint not found: " + path.string());
  return elt::load_checkpoint(path);
}

elt::DataSpec data_spec_of(const elt::Checkpoint& ck) {
  if (ck.meta.is_object() && ck.meta.contains("data")) return elt::data_spec_from_json(ck.meta.at("data"));
  elt::DataSpec spec;
  spec.grid = {static_cast<std::size_t>(ck.params.config().seq_len)};
  return spec;
}

elt::DiffusionSpec diffusion_spec_of(const elt::Checkpoint& ck) {
  if (ck.meta.is_object() && ck.meta.contains("diffusion")) {
    return elt::diffusion_spec_from_json(ck.meta.at("diffusion"));
  }
  return {};
}

// Model config from either --config (experiment JSON) or --ckpt.
elt::LoopConfig model_config(const std::string& config_path, const std::string& ckpt_path) {
  if (!config_path.empty() && !ckpt_path.empty()) throw elt::ConfigError("pass --config or --ckpt, not both");
  if (!config_path.empty()) return elt::load_experiment_config(config_path).model;
  if (!ckpt_path.empty()) return read_checkpoint(ckpt_path).params.config();
  throw elt::ConfigError("one of --config or --ckpt is required");
}

void check_class(int class_id, const elt::LoopConfig& cfg) {
  if (class_id != elt::kNullClass && (class_id < 0 || class_id >= cfg.n_classes)) {
    throw elt::ConfigError("--class must be -1 (unconditional) or in [0, " +
                           std::to_string(cfg.n_classes) + ")");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Elastic looped transformer toolkit"};
  app.require_subcommand(1);

  // train
  std::string train_config, train_out = "run";
  auto* train = app.add_subcommand("train", "Train a model from an experiment config");
  train->add_option("--config", train_config, "Experiment config JSON")->required();
  train->add_option("--out", train_out, "Output directory")->capture_default_str();

  // sample-masked
  std::string ckpt;
  int class_id = 0, steps = 0, loops = 0;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
  std::string out_path;
  double temp_bias = 0.5, temp_scale = 0.8;
  std::string order = "confidence";
  auto* smask = app.add_subcommand("sample-masked", "Masked parallel decoding from a checkpoint");
  smask->add_option("--ckpt", ckpt)->required();
  smask->add_option("--class", class_id, "Class id, -1 for unconditional")->capture_default_str();
  smask->add_option("--steps", steps, "Decoding steps K")->required();
  smask->add_option("--loops", loops, "Loop budget L")->required();
  smask->add_option("--cfg", cfg_scale, "Guidance scale")->capture_default_str();
  smask->add_option("--seed", seed)->capture_default_str();
  smask->add_option("--out", out_path)->required();
  smask->add_option("--temp-bias", temp_bias)->capture_default_str();
  smask->add_option("--temp-scale", temp_scale)->capture_default_str();
  smask->add_option("--order", order, "confidence|uniform")->capture_default_str();

  // sample-diffusion
  std::size_t chains = 1;
  auto* sdiff = app.add_subcommand("sample-diffusion", "DDPM sampling from a checkpoint");
  sdiff->add_option("--ckpt", ckpt)->required();
  sdiff->add_option("--class", class_id, "Class id, -1 for unconditional")->capture_default_str();
  sdiff->add_option("--steps", steps, "Denoising steps T")->required();
  sdiff->add_option("--loops", loops, "Loop budget L")->required();
  sdiff->add_option("--cfg", cfg_scale, "Guidance scale")->capture_default_str();
  sdiff->add_option("--seed", seed)->capture_default_str();
  sdiff->add_option("--chains", chains, "Independent samples")->capture_default_str();
  sdiff->add_option("--out", out_path)->required();

  // elasticity
  std::string loop_spec = "1..6";
  auto* elas = app.add_subcommand("elasticity", "Held-out metric as a function of L");
  elas->add_option("--ckpt", ckpt)->required();
  elas->add_option("--loops", loop_spec, "a..b or a,b,c")->capture_default_str();
  elas->add_option("--seed", seed, "Seed of the held-out set")->capture_default_str();
  elas->add_option("--out", out_path)->required();

  // sweep
  std::string grid_path;
  int threads = 0;
  auto* sweep = app.add_subcommand("sweep", "Evaluate every (checkpoint, L) pair of a grid");
  sweep->add_option("--grid", grid_path)->required();
  sweep->add_option("--out", out_path)->required();
  sweep->add_option("--threads", threads, "Worker threads (default: ELT_THREADS or all cores)");

  // flops / params
  std::string config_path;
  int seq_len = 0;
  auto* flops = app.add_subcommand("flops", "Matmul FLOPs of one invocation");
  flops->add_option("--config", config_path, "Experiment config JSON");
  flops->add_option("--ckpt", ckpt);
  flops->add_option("--loops", loops, "Loop budget L (default loop_max)");
  flops->add_option("--seq-len", seq_len, "Sequence length (default from the model)");
  flops->add_option("--steps", steps, "Also report generation FLOPs for this many steps");
  flops->add_option("--cfg", cfg_scale, "Guidance scale for generation FLOPs");
  auto* params = app.add_subcommand("params", "Parameter counts");
  params->add_option("--config", config_path, "Experiment config JSON");
  params->add_option("--ckpt", ckpt);

  // verify
  std::string filter;
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  verify->add_option("--filter", filter, "Only checks whose name or module contains this");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      const elt::ExperimentConfig cfg = elt::load_experiment_config(train_config);
      const auto t0 = std::chrono::steady_clock::now();
      const auto result = elt::run_training(cfg, train_out);
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto& last = result.log.back();
      std::cout << json{{"out", train_out},
                        {"checkpoint", (std::filesystem::path(train_out) / "final.ckpt").string()},
                        {"steps", cfg.steps},
                        {"final_total_loss", last.loss.total},
                        {"seconds", sec}}
                       .dump()
                << "\n";
    } else if (*smask) {
      const auto ck = read_checkpoint(ckpt);
      const auto& mcfg = ck.params.config();
      if (mcfg.mode != elt::Mode::kMasked) throw elt::ConfigError("checkpoint is not a masked-mode model");
      check_class(class_id, mcfg);
      elt::DecodeOptions opts;
      opts.steps = steps;
      opts.cfg_scale = cfg_scale;
      opts.temp_bias = temp_bias;
      opts.temp_scale = temp_scale;
      if (order == "confidence") {
        opts.order = elt::RevealOrder::kConfidence;
      } else if (order == "uniform") {
        opts.order = elt::RevealOrder::kUniform;
      } else {
        throw elt::ConfigError("--order must be confidence or uniform");
      }
      elt::LoopedMaskedPredictor model(ck.params);
      elt::Rng rng = elt::derive_rng(seed, 0);
      const auto shape = data_spec_of(ck).grid;
      const auto r = elt::generate(model, shape, mcfg.vocab_size, class_id, loops, opts, rng);
      const json out = {{"shape", r.grid.shape()},
                        {"tokens", r.grid.tokens()},
                        {"meta",
                         {{"steps", steps},
                          {"loops", loops},
                          {"seed", seed},
                          {"class", class_id},
                          {"cfg_scale", cfg_scale},
                          {"temp_bias", temp_bias},
                          {"temp_scale", temp_scale},
                          {"order", order},
                          {"block_applications", r.block_applications},
                          {"model_calls", r.model_calls}}}};
      write_file(out_path, out.dump(2) + "\n");
    } else if (*sdiff) {
      const auto ck = read_checkpoint(ckpt);
      const auto& dcfg = ck.params.config();
      if (dcfg.mode != elt::Mode::kDiffusion) throw elt::ConfigError("checkpoint is not a diffusion-mode model");
      check_class(class_id, dcfg);
      if (chains == 0) throw elt::ConfigError("--chains must be positive");
      elt::DiffusionSpec spec = diffusion_spec_of(ck);
      spec.steps = steps;
      const elt::NoiseSchedule schedule = spec.schedule();
      elt::LoopedDenoiser model(ck.params);
      elt::Rng rng = elt::derive_rng(seed, 0);
      const auto S = static_cast<std::size_t>(dcfg.seq_len), D = static_cast<std::size_t>(dcfg.latent_dim);
      const auto r = elt::sample(model, schedule, chains, S, D, class_id, loops, cfg_scale, rng);
      const auto vals = r.latents.values();
      const json out = {{"shape", {chains, S, D}},
                        {"latents", std::vector<double>(vals.begin(), vals.end())},
                        {"meta",
                         {{"steps", steps},
                          {"loops", loops},
                          {"seed", seed},
                          {"class", class_id},
                          {"cfg_scale", cfg_scale},
                          {"shift", spec.shift},
                          {"block_applications", r.block_applications}}}};
      write_file(out_path, out.dump(2) + "\n");
    } else if (*elas) {
      const auto ck = read_checkpoint(ckpt);
      const auto data = data_spec_of(ck);
      const auto eval = elt::make_eval_set(data, ck.params.config(), diffusion_spec_of(ck), seed);
      const auto curve = elt::elasticity_curve(ck.params, eval, parse_loops(loop_spec));
      std::ostringstream os;
      elt::write_curve_csv(os, ck.params.config().mode, curve);
      write_file(out_path, os.str());
    } else if (*sweep) {
      std::ifstream in(grid_path);
      if (!in) throw elt::ConfigError("cannot read grid file " + grid_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw elt::ConfigError("grid file " + grid_path + ": " + e.what());
      }
      const auto grid = elt::sweep_grid_from_json(j, std::filesystem::path(grid_path).parent_path());
      const auto result = elt::pareto_sweep(grid, threads);
      std::ostringstream os;
      elt::write_sweep_csv(os, result);
      write_file(out_path, os.str());
    } else if (*flops) {
      const auto cfg = model_config(config_path, ckpt);
      const int L = loops > 0 ? loops : cfg.loop_max;
      const int S = seq_len > 0 ? seq_len : cfg.seq_len;
      const auto f = elt::count_flops(cfg, L, S);
      json out = {{"loops", L},
                  {"seq_len", S},
                  {"block", f.block},
                  {"embedding", f.embedding},
                  {"head", f.head},
                  {"total", f.total()},
                  {"block_per_application", elt::block_flops_per_application(cfg, S)}};
      if (steps > 0) {
        out["generation"] = {{"steps", steps},
                             {"cfg_scale", cfg_scale},
                             {"total", elt::generation_flops(cfg, L, S, steps, cfg_scale != 1.0)}};
      }
      std::cout << out.dump() << "\n";
    } else if (*params) {
      const auto cfg = model_config(config_path, ckpt);
      const auto p = elt::count_params(cfg);
      std::cout << json{{"block", p.block}, {"embedding", p.embedding}, {"head", p.head}, {"total", p.total()}}
                       .dump()
                << "\n";
    } else if (*verify) {
      elt::VerifyOptions opts;
      opts.filter = filter;
      const auto t0 = std::chrono::steady_clock::now();
      const auto results = elt::run_checks(opts, &std::cout);
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::size_t failed = 0;
      for (const auto& r : results) failed += r.passed ? 0 : 1;
      std::cout << results.size() << " checks, " << failed << " failed, " << sec << " s\n";
      if (results.empty()) return 1;
      return failed == 0 ? 0 : 1;
    }
  } catch (const elt::TrainingDiverged& e) {
    std::cerr << "error: training diverged at step " << e.step() << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const elt::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
