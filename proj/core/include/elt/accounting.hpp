#pragma once

#include <cstdint>

#include "elt/config.hpp"

namespace elt {

struct ParamCount {
  std::uint64_t block = 0;      // the N shared layers
  std::uint64_t embedding = 0;  // token/latent input, positions, class and time conditioning
  std::uint64_t head = 0;
  std::uint64_t total() const { return block + embedding + head; }
};

// Closed-form parameter count. Depends on the architecture only, never on
// loop_min/loop_max.
ParamCount count_params(const LoopConfig& cfg);

// Matmul FLOPs (2 per multiply-add) of one model invocation on one example.
// Layer norms, softmax and activations are not counted.
struct FlopCount {
  std::uint64_t block = 0;      // L * N layer applications; exactly linear in L
  std::uint64_t embedding = 0;  // input projection and conditioning, counted once
  std::uint64_t head = 0;       // counted once
  std::uint64_t total() const { return block + embedding + head; }
};

FlopCount count_flops(const LoopConfig& cfg, int loops, int seq_len);
// FLOPs of one shared-block application (N layers) for a sequence.
std::uint64_t block_flops_per_application(const LoopConfig& cfg, int seq_len);
// Whole generation: per-invocation FLOPs times sampling steps, doubled when
// classifier-free guidance runs a second (unconditional) forward.
std::uint64_t generation_flops(const LoopConfig& cfg, int loops, int seq_len, int steps, bool cfg_on);

}  // namespace elt
