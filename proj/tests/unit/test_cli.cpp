#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "elt/checkpoint.hpp"
#include "elt/error.hpp"
#include "elt/experiment.hpp"
#include "elt/verify.hpp"

namespace elt {
namespace {

namespace fs = std::filesystem;

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.model.d_model = 8;
  cfg.model.mlp_dim = 16;
  cfg.model.loop_max = 2;
  cfg.steps = 4;
  cfg.batch_size = 4;
  cfg.data.eval_examples = 8;
  cfg.seed = 12;
  return cfg;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(ExperimentConfig, RoundTripIsIdenticalAndByteStable) {
  ExperimentConfig cfg = tiny_config();
  cfg.ilsd_enabled = false;
  cfg.model.mode = Mode::kDiffusion;
  cfg.model.conditioning = Conditioning::kModulated;
  cfg.data.kind = "gaussian-mixture";
  cfg.data.mixture = {{0.5, 0.5}, {std::vector<double>(8, -1.0), std::vector<double>(8, 1.0)},
                      {std::vector<double>(8, 0.3), std::vector<double>(8, 0.3)}};
  const std::string once = to_json(cfg).dump();
  const ExperimentConfig back = experiment_config_from_json(nlohmann::json::parse(once));
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(to_json(back).dump(), once);
}

TEST(ExperimentConfig, StrictKeys) {
  nlohmann::json j = to_json(tiny_config());
  j["learning_rate_typo"] = 1.0;
  EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["model"]["d_modle"] = 8;
  EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j.erase("version");
  EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);
  EXPECT_EQ(experiment_config_from_json({{"version", 1}}), ExperimentConfig{});
}

TEST(ExperimentConfig, DiffusionDefaultsToSlowerSecondMoment) {
  const nlohmann::json masked = {{"version", 1}};
  const nlohmann::json diffusion = {{"version", 1},
                                    {"model", {{"mode", "diffusion"}, {"seq_len", 1}}},
                                    {"data", {{"kind", "gaussian-mixture"}}}};
  EXPECT_EQ(experiment_config_from_json(masked).optimizer.beta2, 0.96);
  EXPECT_EQ(experiment_config_from_json(diffusion).optimizer.beta2, 0.99);
  nlohmann::json pinned = diffusion;
  pinned["optimizer"] = {{"beta2", 0.9}, {"lr", 1e-3}};
  EXPECT_EQ(experiment_config_from_json(pinned).optimizer.beta2, 0.9);
  pinned["optimizer"] = {{"lr", 1e-3}};
  EXPECT_EQ(experiment_config_from_json(pinned).optimizer.beta2, 0.99);
}

TEST(ExperimentConfig, ValidationBeforeWork) {
  ExperimentConfig cfg = tiny_config();
  cfg.model.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.init_std = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LoopConfig, StrictSchema) {
  nlohmann::json j = to_json(LoopConfig{});
  EXPECT_EQ(loop_config_from_json(j), LoopConfig{});
  j.erase("d_model");
  EXPECT_THROW((void)loop_config_from_json(j), ConfigError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  LoopConfig cfg;
  cfg.mode = Mode::kDiffusion;
  cfg.conditioning = Conditioning::kModulated;
  Rng rng = derive_rng(3, 0);
  const BlockParams p = BlockParams::init(cfg, rng, 0.3);
  const std::string bytes = serialize_checkpoint(p, {{"note", "x"}});
  const Checkpoint ck = parse_checkpoint(bytes);
  EXPECT_EQ(ck.params.config(), cfg);
  EXPECT_EQ(serialize_checkpoint(ck.params, ck.meta), bytes);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  Rng rng = derive_rng(3, 0);
  const std::string bytes = serialize_checkpoint(BlockParams::init(LoopConfig{}, rng));
  EXPECT_THROW((void)parse_checkpoint(bytes.substr(0, bytes.size() - 8)), IoError);
  EXPECT_THROW((void)parse_checkpoint("not a checkpoint"), IoError);
  EXPECT_THROW((void)load_checkpoint("/nonexistent/elt.ckpt"), IoError);
}

TEST(Training, SameSeedGivesByteIdenticalCheckpoints) {
  TempDir a("elt_cli_a"), b("elt_cli_b");
  (void)run_training(tiny_config(), a.path());
  (void)run_training(tiny_config(), b.path());
  EXPECT_EQ(read_bytes(a.path() / "final.ckpt"), read_bytes(b.path() / "final.ckpt"));
  EXPECT_EQ(read_bytes(a.path() / "config.json"), read_bytes(b.path() / "config.json"));
}

TEST(Training, VanillaCsvHasZeroStudentColumns) {
  TempDir dir("elt_cli_vanilla");
  ExperimentConfig cfg = tiny_config();
  cfg.ilsd_enabled = false;
  (void)run_training(cfg, dir.path());
  std::ifstream in(dir.path() / "train.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,L_int,lambda,gt_max,gt_int,distill,total,grad_norm,wall_ms");
  int rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    ASSERT_EQ(cols.size(), 9u);
    EXPECT_EQ(std::stod(cols[4]), 0.0);
    EXPECT_EQ(std::stod(cols[5]), 0.0);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(Verify, ReportHasOneRowPerRegisteredCheck) {
  VerifyOptions opts;
  opts.filter = "roundtrip";
  const auto results = run_checks(opts);
  std::size_t expected = 0;
  for (const auto& c : registered_checks()) expected += c.name.find("roundtrip") != std::string::npos;
  EXPECT_EQ(results.size(), expected);
  EXPECT_GE(expected, 2u);
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(Verify, BrokenCaptureFailsPrefixCheck) {
  VerifyOptions opts;
  opts.filter = "prefix_capture_exact";
  ASSERT_EQ(run_checks(opts).size(), 1u);
  EXPECT_TRUE(run_checks(opts).front().passed);

  // Off-by-one: hands back the state one loop too late.
  opts.capture = [](LoopedModel& m, const ad::Var& x, const ConditioningContext& ctx, int loop_max,
                    int loop_int) {
    LoopCapture c = m.loop_forward_capture(x, ctx, loop_max, loop_int);
    c.intermediate = m.apply_block(c.intermediate, ctx);
    return c;
  };
  EXPECT_FALSE(run_checks(opts).front().passed);

  // Right values, but the student recomputed from scratch.
  opts.capture = [](LoopedModel& m, const ad::Var& x, const ConditioningContext& ctx, int loop_max,
                    int loop_int) {
    LoopCapture c = m.loop_forward_capture(x, ctx, loop_max, loop_int);
    c.intermediate = m.loop_forward(x, ctx, loop_int);
    return c;
  };
  EXPECT_FALSE(run_checks(opts).front().passed);
}

#ifdef ELT_CLI_PATH

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + ELT_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, MissingConfigExitsTwoWithoutOutputs) {
  TempDir dir("elt_cli_missing");
  const fs::path out = dir.path() / "run";
  EXPECT_EQ(run_cli("train --config " + (dir.path() / "nope.json").string() + " --out " + out.string()), 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, UnknownKeyExitsTwo) {
  TempDir dir("elt_cli_badkey");
  nlohmann::json j = to_json(tiny_config());
  j["stepz"] = 3;
  std::ofstream(dir.path() / "cfg.json") << j.dump();
  EXPECT_EQ(run_cli("train --config " + (dir.path() / "cfg.json").string() + " --out " +
                    (dir.path() / "run").string()),
            2);
  EXPECT_FALSE(fs::exists(dir.path() / "run"));
}

TEST(Cli, DivergenceExitsThree) {
  TempDir dir("elt_cli_diverge");
  ExperimentConfig cfg = tiny_config();
  cfg.optimizer.lr = 1e300;
  cfg.optimizer.warmup_steps = 0;
  std::ofstream(dir.path() / "cfg.json") << to_json(cfg).dump();
  EXPECT_EQ(run_cli("train --config " + (dir.path() / "cfg.json").string() + " --out " +
                    (dir.path() / "run").string()),
            3);
}

TEST(Cli, TrainSampleAndElasticity) {
  TempDir dir("elt_cli_e2e");
  std::ofstream(dir.path() / "cfg.json") << to_json(tiny_config()).dump();
  const std::string run = (dir.path() / "run").string();
  ASSERT_EQ(run_cli("train --config " + (dir.path() / "cfg.json").string() + " --out " + run), 0);
  const std::string ckpt = run + "/final.ckpt";
  const std::string out1 = (dir.path() / "s1.json").string(), out2 = (dir.path() / "s2.json").string();
  ASSERT_EQ(run_cli("sample-masked --ckpt " + ckpt + " --steps 2 --loops 2 --seed 4 --out " + out1), 0);
  ASSERT_EQ(run_cli("sample-masked --ckpt " + ckpt + " --steps 2 --loops 2 --seed 4 --out " + out2), 0);
  EXPECT_EQ(read_bytes(out1), read_bytes(out2));
  const auto j = nlohmann::json::parse(read_bytes(out1));
  EXPECT_EQ(j["meta"]["block_applications"], 4);
  const std::string curve = (dir.path() / "curve.csv").string();
  ASSERT_EQ(run_cli("elasticity --ckpt " + ckpt + " --loops 1..4 --out " + curve), 0);
  std::ifstream in(curve);
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 6);  // metric line, column header, four rows
  EXPECT_EQ(run_cli("sample-diffusion --ckpt " + ckpt + " --steps 2 --loops 1 --out " +
                    (dir.path() / "d.json").string()),
            2);
  EXPECT_EQ(run_cli("params --ckpt /nonexistent/x.ckpt"), 4);
  EXPECT_EQ(run_cli("bogus-command"), 2);
}

#endif

}  // namespace
}  // namespace elt
