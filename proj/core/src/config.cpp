#include "elt/config.hpp"

#include <set>

#include "elt/error.hpp"

namespace elt {

std::string to_string(Mode m) { return m == Mode::kMasked ? "masked" : "diffusion"; }

std::string to_string(Conditioning c) {
  return c == Conditioning::kAdditive ? "additive" : "modulated";
}

Mode mode_from_string(const std::string& s) {
  if (s == "masked") return Mode::kMasked;
  if (s == "diffusion") return Mode::kDiffusion;
  throw ConfigError("unknown mode '" + s + "' (expected masked|diffusion)");
}

Conditioning conditioning_from_string(const std::string& s) {
  if (s == "additive") return Conditioning::kAdditive;
  if (s == "modulated") return Conditioning::kModulated;
  throw ConfigError("unknown conditioning '" + s + "' (expected additive|modulated)");
}

void LoopConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(mlp_dim, "mlp_dim");
  positive(loop_min, "loop_min");
  positive(seq_len, "seq_len");
  positive(n_classes, "n_classes");
  if (mode == Mode::kMasked) {
    positive(vocab_size, "vocab_size");
  } else {
    positive(latent_dim, "latent_dim");
  }
  if (loop_max < loop_min) {
    throw ConfigError("loop_max (" + std::to_string(loop_max) + ") must be >= loop_min (" +
                      std::to_string(loop_min) + ")");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

nlohmann::json to_json(const LoopConfig& cfg) {
  return nlohmann::json{
      {"mode", to_string(cfg.mode)},
      {"n_layers", cfg.n_layers},
      {"d_model", cfg.d_model},
      {"n_heads", cfg.n_heads},
      {"mlp_dim", cfg.mlp_dim},
      {"loop_min", cfg.loop_min},
      {"loop_max", cfg.loop_max},
      {"seq_len", cfg.seq_len},
      {"vocab_size", cfg.vocab_size},
      {"latent_dim", cfg.latent_dim},
      {"n_classes", cfg.n_classes},
      {"conditioning", to_string(cfg.conditioning)},
  };
}

LoopConfig loop_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {
      "mode",     "n_layers", "d_model",    "n_heads",    "mlp_dim",   "loop_min",
      "loop_max", "seq_len",  "vocab_size", "latent_dim", "n_classes", "conditioning"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  for (const auto& key : kKeys) {
    if (!j.contains(key)) throw ConfigError("missing model config key '" + key + "'");
  }
  LoopConfig cfg;
  try {
    cfg.mode = mode_from_string(j.at("mode").get<std::string>());
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.mlp_dim = j.at("mlp_dim").get<int>();
    cfg.loop_min = j.at("loop_min").get<int>();
    cfg.loop_max = j.at("loop_max").get<int>();
    cfg.seq_len = j.at("seq_len").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.latent_dim = j.at("latent_dim").get<int>();
    cfg.n_classes = j.at("n_classes").get<int>();
    cfg.conditioning = conditioning_from_string(j.at("conditioning").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace elt
