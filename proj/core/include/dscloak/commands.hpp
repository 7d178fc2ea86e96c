#pragma once

#include <string>
#include <vector>

#include "dscloak/attack.hpp"
#include "dscloak/io.hpp"
#include "dscloak/model.hpp"

namespace dscloak::commands {

// Exit codes shared with the CLI: 0 success, 1 partial failure, 2 invalid
// invocation (bad config, bad arguments, missing inputs).
inline constexpr int kOk = 0;
inline constexpr int kPartialFailure = 1;
inline constexpr int kInvalid = 2;

ModelConfig model_config_from(const io::RunConfig& cfg);
AttackConfig attack_config_from(const io::RunConfig& cfg, const ModelConfig& mc);

/// Trains the victim model on the synthetic dataset; writes checkpoint,
/// loss-curve table and manifest. With `resume = true`, continues a previous
/// run from its checkpoint on the exact per-step RNG stream.
int cmd_train(const io::RunConfig& cfg);

/// Optimizes a perturbation per input image and writes the protected PNG, the
/// raw perturbation tensors, the loss trace and a manifest. Per-image
/// failures are logged and skipped.
int cmd_protect(const io::RunConfig& cfg, const std::vector<std::string>& images);

/// Transform-robustness and generation-degradation report for clean/protected
/// pairs (two files, or two directories matched by filename).
int cmd_evaluate(const io::RunConfig& cfg, const std::string& clean_path,
                 const std::string& protected_path);

/// Emits the ablation tables: perturbation spaces, chroma-budget sweep,
/// loss-component grid (A1-A9), collapse-layer grid, and the dual-space vs
/// RGB blur-retention comparison.
int cmd_ablate(const io::RunConfig& cfg);

/// Per-block PCA projection grids of the denoiser taps at the mid-schedule
/// timestep.
int cmd_visualize_layers(const io::RunConfig& cfg, const std::string& image);

}  // namespace dscloak::commands
