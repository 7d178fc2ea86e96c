#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dscloak/losses.hpp"
#include "dscloak/model.hpp"
#include "dscloak/tensor.hpp"

namespace dscloak {

enum class Space {
  Rgb,
  Lab,
  Freq,
  LabFreq,  // the dual-space default
  RgbLab,
  RgbFreq,
  RgbLabFreq,
};

std::string space_name(Space s);
Space space_from_name(const std::string& name);
bool space_has_rgb(Space s);
bool space_has_lab(Space s);
bool space_has_freq(Space s);
const std::vector<Space>& all_spaces();

struct AttackConfig {
  double budget_rgb = 16.0 / 255.0;
  double budget_lab = 16.0 / 255.0;  // fraction of the native a*/b* span
  double mask_fraction = 0.25;
  int iters = 200;
  double lr = 1e-2;
  double pgd_step = 1.0 / 255.0;
  Space space = Space::LabFreq;
  AttackMode mode;
  LossWeights weights;
  std::optional<LayerSelection> layers;  // defaults from the model when unset
  std::uint64_t seed = 0;
  bool literal_mask = false;
  int samples_per_iter = 1;

  void validate() const;
};

/// Optimized variables plus their Adam moments. Only the variables active for
/// the configured space are updated; the others stay zero.
struct PerturbationState {
  Tensor delta_rgb;        // (3, H, W)
  Tensor delta_a, delta_b; // (H, W)
  Tensor delta_freq;       // (3, H, W)
  int iter = 0;

  static PerturbationState zeros(int h, int w);
  PerturbationState deep_copy() const;
};

/// Rendering composition, in order: RGB delta (clipped to the RGB budget),
/// chroma deltas in a*/b* (clipped to the Lab budget in native units), masked
/// frequency delta, then the budget box around x and the [0, 1] range clip.
/// Every stage stays on the tape.
Tensor render_adversarial(const Tensor& x, const PerturbationState& s,
                          const AttackConfig& cfg);

/// Intermediate render stages, for budget and mask-support audits.
struct RenderStages {
  Tensor after_spaces;  // before the final budget/range clips
  Tensor final;
};
RenderStages render_adversarial_stages(const Tensor& x,
                                       const PerturbationState& s,
                                       const AttackConfig& cfg);

struct IterRecord {
  int iter = 0;
  double dm = 0, irc = 0, ira = 0, aux = 0, total = 0;
  double linf = 0;  // max |x_xi - x| at this iteration
};

struct AttackResult {
  Tensor x_xi;
  std::vector<IterRecord> trace;
  PerturbationState state;
  bool aborted = false;
  std::string diagnostic;
};

/// Translates x with a per-run constant velocity to synthesize the remaining
/// reference-clip frames; frame 0 is x itself.
Tensor build_reference_clip(const Tensor& x, int frames, std::uint64_t seed);

/// The dual-space optimization loop: N iterations of render, fresh (t, eps)
/// draw, total-loss evaluation, AdamW step and budget projection. Returns the
/// best-loss state's rendering and the per-iteration component trace.
/// Deterministic given the config seed. Non-finite losses abort the loop and
/// return the best state so far with a diagnostic.
AttackResult dsp_optimize(const Tensor& x, int y, const VictimModel& model,
                          const AttackConfig& cfg,
                          const Tensor* reference_clip = nullptr);

/// Sign-update baseline: x <- project(x + step * sgn(grad objective)), where
/// the default objective is the negated total loss (so the vanilla
/// configuration ascends the denoising loss). A custom objective to maximize
/// can be supplied for diagnostics.
AttackResult pgd_rgb(const Tensor& x, int y, const VictimModel& model,
                     const AttackConfig& cfg,
                     const Tensor* reference_clip = nullptr,
                     const std::function<Tensor(const Tensor&)>& objective = {});

struct SpaceAblationRow {
  Space space;
  Tensor x_xi;
  double psnr = 0, ssim = 0, linf = 0, feature_cosine = 0;
  double dm_clean = 0, dm_protected = 0;
};

/// Runs every perturbation space with identical seed and the vanilla
/// denoising-loss objective; the pure RGB arm is the PGD baseline.
std::vector<SpaceAblationRow> ablate_spaces(const Tensor& x, int y,
                                            const VictimModel& model,
                                            const AttackConfig& base_cfg);

}  // namespace dscloak
