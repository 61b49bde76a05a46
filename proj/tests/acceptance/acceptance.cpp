// One PASS/FAIL line per acceptance criterion, each with its measured values
// and wall time. Criteria may be restricted with --only 1,4,7. A criterion
// listed with --known-failure still prints FAIL; it just does not change the
// exit status. The reasons for each known failure live in the README.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "elt/accounting.hpp"
#include "elt/diffusion.hpp"
#include "elt/eval.hpp"
#include "elt/experiment.hpp"
#include "elt/ilsd.hpp"
#include "elt/masked.hpp"
#include "elt/synthetic.hpp"
#include "elt/verify.hpp"

namespace {

using namespace elt;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// Runs the named verify checks and folds them into one outcome.
Outcome via_checks(const std::vector<std::string>& names) {
  Outcome out{true, ""};
  for (const auto& name : names) {
    VerifyOptions opts;
    opts.filter = name;
    const auto results = run_checks(opts);
    const auto it = std::find_if(results.begin(), results.end(),
                                 [&](const CheckResult& r) { return r.name == name; });
    if (it == results.end()) {
      out.passed = false;
      out.detail += name + ": not registered; ";
      continue;
    }
    out.passed = out.passed && it->passed;
    out.detail += name + ": " + it->detail + "; ";
  }
  return out;
}

Outcome schedules() {
  std::vector<std::string> bad;
  for (std::int64_t total : {2, 100, 10000}) {
    if (lambda_at(0, total) != 1.0) bad.push_back("lambda(0)");
    if (lambda_at(total, total) != 0.0) bad.push_back("lambda(end)");
    if (lambda_at(total / 2, total) != 0.5) bad.push_back("lambda(mid)");
  }
  if (sampling_temperature(23, 24, 0.5, 0.8) != 0.5) bad.push_back("STemp(K-1)");
  int pairs = 0;
  for (int K : {1, 2, 4, 8, 24, 64}) {
    for (int n : {4, 16, 256}) {
      if (K > n) continue;
      if (cosine_mask_count(K - 1, K, n) != 0) bad.push_back("mask(K-1)");
      for (int k = 1; k < K; ++k) {
        if (cosine_mask_count(k, K, n) > cosine_mask_count(k - 1, K, n)) bad.push_back("monotone");
      }
      ++pairs;
    }
  }
  Outcome o{bad.empty(), "lambda 1/0.5/0 exact; STemp(23 of 24) = " +
                             fmt(sampling_temperature(23, 24, 0.5, 0.8)) + "; mask counts over " +
                             std::to_string(pairs) + " (K, n) pairs"};
  for (const auto& b : bad) o.detail += "; broken: " + b;
  return o;
}

LoopConfig width32(int n_layers, int loop_max) {
  LoopConfig cfg;
  cfg.n_layers = n_layers;
  cfg.d_model = 32;
  cfg.mlp_dim = 64;
  cfg.loop_max = loop_max;
  return cfg;
}

Outcome accounting() {
  std::vector<std::string> bad;
  const LoopConfig base = width32(8, 1);
  const auto block1 = count_params(base).block;
  for (int L = 1; L <= 8; ++L) {
    const LoopConfig c = width32(8, L);
    if (count_params(c).block != block1 || BlockParams::zeros(c).block_numel() != block1) {
      bad.push_back("params depend on L");
    }
  }
  const auto b8 = count_params(width32(8, 4)).block, b32 = count_params(width32(32, 4)).block;
  if (4 * b8 != b32) bad.push_back("8:32 ratio");
  const auto f1 = count_flops(base, 1, base.seq_len).block;
  for (int L = 1; L <= 16; ++L) {
    if (count_flops(base, L, base.seq_len).block != static_cast<std::uint64_t>(L) * f1) {
      bad.push_back("flops not linear at L=" + std::to_string(L));
    }
  }

  // Generation block applications, counted by the model itself.
  LoopConfig mcfg = width32(2, 4);
  Rng rng = derive_rng(5, 0);
  const BlockParams mp = BlockParams::init(mcfg, rng);
  std::size_t masked_apps[2] = {0, 0}, diff_apps[2] = {0, 0};
  const int K = 4, T = 12, L = 3;
  for (int g = 0; g < 2; ++g) {
    LoopedMaskedPredictor model(mp);
    DecodeOptions opts;
    opts.steps = K;
    opts.cfg_scale = g == 0 ? 1.0 : 3.0;
    Rng r = derive_rng(6, g);
    masked_apps[g] = generate(model, {2, 2}, mcfg.vocab_size, 0, L, opts, r).block_applications;
  }
  LoopConfig dcfg = mcfg;
  dcfg.mode = Mode::kDiffusion;
  const BlockParams dp = BlockParams::init(dcfg, rng);
  for (int g = 0; g < 2; ++g) {
    LoopedDenoiser model(dp);
    Rng r = derive_rng(7, g);
    diff_apps[g] = sample(model, NoiseSchedule(T), 2, dcfg.seq_len, dcfg.latent_dim, 0, L,
                          g == 0 ? 1.0 : 3.0, r)
                       .block_applications;
  }
  if (masked_apps[0] != K * L || masked_apps[1] != 2 * K * L) bad.push_back("masked K*L");
  if (diff_apps[0] != T * L || diff_apps[1] != 2 * T * L) bad.push_back("diffusion T*L");
  Outcome o{bad.empty(), "block params " + std::to_string(b8) + " vs " + std::to_string(b32) +
                             " (N=8 vs 32); masked apps " + std::to_string(masked_apps[0]) + "/" +
                             std::to_string(masked_apps[1]) + " (K*L=" + std::to_string(K * L) +
                             "); diffusion apps " + std::to_string(diff_apps[0]) + "/" +
                             std::to_string(diff_apps[1]) + " (T*L=" + std::to_string(T * L) + ")"};
  for (const auto& b : bad) o.detail += "; broken: " + b;
  return o;
}

// Desk-scale paired-training setup shared by the elasticity and generation
// criteria.
ExperimentConfig paired_config(bool ilsd, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.model = width32(2, 4);
  cfg.ilsd_enabled = ilsd;
  cfg.steps = 10000;
  cfg.batch_size = 16;
  cfg.optimizer.lr = 3e-3;
  cfg.optimizer.warmup_steps = 100;
  cfg.init_std = 0.177;
  cfg.seed = seed;
  return cfg;
}

struct TrainedPair {
  BlockParams ilsd, vanilla;
  std::vector<double> ilsd_curve, vanilla_curve;  // held-out CE at L = 1..4
};

std::vector<double> heldout_curve(const BlockParams& p, const ExperimentConfig& cfg) {
  const TrainBatch eval = make_eval_set(cfg.data, cfg.model, cfg.diffusion, 1000 + cfg.seed);
  std::vector<double> out;
  for (int L = 1; L <= 4; ++L) out.push_back(heldout_metric(p, eval, L));
  return out;
}

std::vector<TrainedPair> pairs;

const TrainedPair& trained_pair(std::size_t i) {
  while (pairs.size() <= i) {
    const auto seed = static_cast<std::uint64_t>(pairs.size() + 1);
    const auto ci = paired_config(true, seed), cv = paired_config(false, seed);
    TrainedPair p{train(ci).params, train(cv).params, {}, {}};
    p.ilsd_curve = heldout_curve(p.ilsd, ci);
    p.vanilla_curve = heldout_curve(p.vanilla, cv);
    pairs.push_back(std::move(p));
  }
  return pairs[i];
}

double max_over_min(const std::vector<double>& v) {
  return *std::max_element(v.begin(), v.end()) / *std::min_element(v.begin(), v.end());
}

std::string curve_str(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s + "]";
}

Outcome elasticity() {
  int wins = 0, flat = 0, collapsed = 0;
  std::string detail;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& p = trained_pair(s);
    wins += p.ilsd_curve[1] < p.vanilla_curve[1];
    flat += max_over_min(p.ilsd_curve) < 2.0;
    collapsed += max_over_min(p.vanilla_curve) > 2.0;
    detail += "seed " + std::to_string(s + 1) + ": ilsd " + curve_str(p.ilsd_curve) + " ratio " +
              fmt(max_over_min(p.ilsd_curve)) + ", vanilla " + curve_str(p.vanilla_curve) +
              " ratio " + fmt(max_over_min(p.vanilla_curve)) + "; ";
  }
  detail += "ILSD wins at L=2 " + std::to_string(wins) + "/3, ILSD ratio < 2 " + std::to_string(flat) +
            "/3, vanilla ratio > 2 " + std::to_string(collapsed) + "/3";
  return {wins == 3 && flat == 3 && collapsed == 3, detail};
}

double generation_tv(MaskedPredictor& model, const MarkovGridSource& src, int loops, std::size_t n,
                     std::uint64_t seed) {
  DecodeOptions opts;
  opts.steps = 4;
  opts.order = RevealOrder::kUniform;
  opts.temp_bias = 1.0;
  opts.temp_scale = 0.0;
  Rng rng = derive_rng(seed, 0);
  std::vector<std::size_t> outcomes;
  outcomes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = uniform_int(rng, 0, src.n_classes() - 1);
    const auto r = generate(model, src.shape(), src.vocab_size(), c, loops, opts, rng);
    outcomes.push_back(src.outcome_index(r.grid.tokens()));
  }
  return tv_from_samples(outcomes, src.distribution(kNullClass));
}

Outcome generative() {
  const ExperimentConfig cfg = paired_config(true, 1);
  const MarkovGridSource src = make_markov_source(cfg.data, cfg.model);
  EnumerationOracle oracle(src);
  const double tv_oracle = generation_tv(oracle, src, 1, 20000, 71);
  LoopedMaskedPredictor trained(trained_pair(0).ilsd);
  const double tv_trained = generation_tv(trained, src, cfg.model.loop_max, 20000, 72);
  return {tv_oracle < 0.08 && tv_trained < 0.20,
          "support " + std::to_string(src.support_size()) + ", 20000 grids each; oracle TV " +
              fmt(tv_oracle) + " (< 0.08), trained ILSD at L=4 TV " + fmt(tv_trained) + " (< 0.20)"};
}

Outcome verify_command() {
#ifdef ELT_CLI_PATH
  const auto log = std::filesystem::temp_directory_path() / "elt_acceptance_verify.log";
  const std::string cmd = std::string("\"") + ELT_CLI_PATH + "\" verify > \"" + log.string() + "\" 2>&1";
  const auto t0 = std::chrono::steady_clock::now();
  const int status = std::system(cmd.c_str());
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::string last;
  {
    std::FILE* f = std::fopen(log.string().c_str(), "r");
    char buf[512];
    while (f && std::fgets(buf, sizeof buf, f)) last = buf;
    if (f) std::fclose(f);
  }
  if (!last.empty() && last.back() == '\n') last.pop_back();
  return {rc == 0 && sec < 300.0,
          "exit " + std::to_string(rc) + " in " + fmt(sec) + " s (< 300); summary: " + last};
#else
  return {false, "built without the elt tool"};
#endif
}

struct Criterion {
  int id;
  std::string name;
  double limit_s;  // runtime bound; 0 for none
  std::function<Outcome()> run;
};

std::set<int> parse_ids(const std::string& s) {
  std::set<int> ids;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) ids.insert(std::stoi(tok));
  }
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, known;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = parse_ids(argv[++i]);
    } else if (a == "--known-failure" && i + 1 < argc) {
      known = parse_ids(argv[++i]);
    } else {
      std::cerr << "usage: elt_acceptance [--only 1,2,...] [--known-failure 6,...]\n";
      return 2;
    }
  }

  const std::vector<Criterion> criteria{
      {1, "prefix trajectory exactness", 10,
       [] { return via_checks({"prefix_capture_exact"}); }},
      {2, "ILSD gradient vs finite differences", 60, [] { return via_checks({"ilsd_loss_gradient"}); }},
      {3, "teacher insulation", 10, [] { return via_checks({"teacher_insulation"}); }},
      {4, "schedule formulas", 0, schedules},
      {5, "accounting", 0, accounting},
      {6, "elasticity, ILSD vs vanilla (3 seeds)", 1800, elasticity},
      {7, "masked generation TV", 900, generative},
      {8, "diffusion sampler with Gaussian oracle", 300,
       [] { return via_checks({"variance_preservation", "oracle_sampler_moments"}); }},
      {9, "determinism and round-trips", 0,
       [] { return via_checks({"train_determinism", "config_roundtrip", "checkpoint_roundtrip"}); }},
      {10, "elt verify end to end", 300, verify_command},
  };

  int unexpected = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && sec >= c.limit_s) {
      o.passed = false;
      o.detail += " [over the " + fmt(c.limit_s) + " s budget]";
    }
    std::cout << (o.passed ? "PASS" : "FAIL") << " C" << c.id << " " << c.name << " (" << fmt(sec)
              << " s): " << o.detail;
    if (!o.passed && known.count(c.id)) std::cout << " [known failure, see README]";
    if (o.passed && known.count(c.id)) std::cout << " [listed as known failure but passed]";
    std::cout << std::endl;
    if (!o.passed && !known.count(c.id)) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
