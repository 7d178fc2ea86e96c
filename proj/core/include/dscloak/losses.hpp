#pragma once

#include <cstdint>
#include <vector>

#include "dscloak/model.hpp"
#include "dscloak/rng.hpp"
#include "dscloak/tensor.hpp"

namespace dscloak {

struct LossWeights {
  double irc = 1.0;
  double ira = 1.0;
  double aux = 1.0;
  double dm = 1.0;
  void validate() const;
};

/// 1-indexed layer choices. Defaults follow the collapse rule: early block 3,
/// deep set = last three denoiser blocks; anchor terms quantify over all
/// blocks and all encoder taps.
struct LayerSelection {
  int irc_early = 3;
  std::vector<int> irc_deep;
  std::vector<int> ira_denoiser_layers;
  std::vector<int> ira_encoder_layers;

  static LayerSelection defaults(const ModelConfig& cfg);
  void validate(const ModelConfig& cfg) const;
};

struct AttackMode {
  bool targeted = false;
  Tensor target;  // decoy image, required when targeted

  void validate(const Tensor& x) const;
};

/// Mean squared difference with the early/deep shape adapter: when shapes
/// disagree spatially, `a` is average-pooled down to `b`'s spatial size
/// (integer factor) before the distance.
Tensor normalized_sq_distance(const Tensor& a, const Tensor& b);

/// Denoising loss at fixed draw: mean ||eps_hat - eps||^2 with the model
/// conditioned on x_xi and the clip's encoded frames as z_0.
Tensor loss_dm(const VictimModel& model, const Tensor& x_xi,
               const Tensor& clip_frames, int t, const Tensor& eps, int y);

/// Representation-collapse loss: pulls each selected deep block tap toward
/// the early block tap, each term mean-normalized by its map size.
Tensor loss_irc(const std::vector<Tensor>& taps, const LayerSelection& sel);

/// Anchor loss over denoiser taps: targeted minimizes the layer-wise distance
/// to the decoy's taps; untargeted negates the distance to the clean taps.
Tensor loss_ira_denoiser(const std::vector<Tensor>& taps_xi,
                         const std::vector<Tensor>& taps_psi,
                         const std::vector<int>& layers, const AttackMode& mode);

/// Anchor loss over encoder taps of x_xi vs x_psi.
Tensor loss_ira_encoder(const VictimModel& model, const Tensor& x_xi,
                        const Tensor& x_psi, const std::vector<int>& layers,
                        const AttackMode& mode);

/// Sum of the denoiser and encoder anchor components at a fixed (z_t, t, y).
Tensor loss_ira(const VictimModel& model, const Tensor& x_xi,
                const Tensor& x_psi, const Tensor& z_t, int t, int y,
                const LayerSelection& sel, const AttackMode& mode);

/// Pooled-feature distance (the image-embedding proxy: frozen encoder's
/// spatially pooled latent).
Tensor loss_clip_proxy(const VictimModel& model, const Tensor& x_xi,
                       const Tensor& x);

/// Channel-normalized multi-layer feature distance over the frozen encoder
/// (perceptual-loss proxy).
Tensor loss_lpips_proxy(const VictimModel& model, const Tensor& x_xi,
                        const Tensor& x);

/// loss_clip_proxy - loss_lpips_proxy.
Tensor loss_auxiliary(const VictimModel& model, const Tensor& x_xi,
                      const Tensor& x);

struct TotalLoss {
  Tensor total;
  double dm = 0.0, irc = 0.0, ira = 0.0, aux = 0.0;
  int t = -1;  // last sampled timestep
};

/// Full attack objective: w_irc*IRC + w_ira*IRA + w_aux*AUX - w_dm*DM, the
/// noise-dependent parts averaged over `samples` fresh (t, eps) draws
/// (t ~ U[0, T)). `ref_latents` are the encoded reference-clip frames.
TotalLoss loss_total(const VictimModel& model, const Tensor& x_xi,
                     const Tensor& x, const Tensor& ref_latents, int y,
                     const AttackMode& mode, const LossWeights& w,
                     const LayerSelection& sel, Rng& rng, int samples = 1);

/// Mean denoising loss over `draws` paired (t, eps) samples; identical seeds
/// give identical draws, so protected/clean comparisons are paired.
double loss_dm_mean(const VictimModel& model, const Tensor& x_cond,
                    const Tensor& ref_latents, int y, int draws,
                    std::uint64_t seed);

}  // namespace dscloak
