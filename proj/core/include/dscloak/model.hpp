#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dscloak/tensor.hpp"

namespace dscloak {

/// Linear DDPM noise schedule: beta rises from 1e-4 to 2e-2 over T steps,
/// alpha_bar is the running product of (1 - beta).
struct NoiseSchedule {
  int timesteps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  static NoiseSchedule linear(int timesteps);
};

/// z_t = sqrt(alpha_bar_t) * z_0 + sqrt(1 - alpha_bar_t) * eps.
Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps,
                     const NoiseSchedule& s);

struct ModelConfig {
  int image_size = 32;     // H = W
  int frames = 4;          // F
  int encoder_layers = 4;  // n_E, >= 3
  int latent_channels = 4;
  int hidden_channels = 16;
  int blocks = 8;  // B, >= 6 so the 3rd and the last three blocks are disjoint
  int num_classes = 3;
  int timesteps = 1000;
  int time_embed_dim = 32;

  int latent_size() const { return image_size / 4; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// A moving-colored-shape video clip; the class label stands in for the text
/// condition.
struct SyntheticClip {
  Tensor frames;  // (F, 3, H, W) in [0, 1]
  int label = 0;
  int vx = 0, vy = 0;  // per-frame translation used to build the clip
};

/// Deterministic clips of disks/squares/triangles translating with constant
/// per-clip velocity. Labels are assigned round-robin so the class histogram
/// is exactly uniform up to remainder.
std::vector<SyntheticClip> make_synthetic_dataset(int n, std::uint64_t seed,
                                                  int frames, int height,
                                                  int width);

struct EncodeResult {
  Tensor latent;             // (Cl, hs, ws)
  std::vector<Tensor> taps;  // E^1..E^{n_E}, each (c, h, w)
};

struct DenoiseResult {
  Tensor eps;                // (F, Cl, hs, ws)
  std::vector<Tensor> taps;  // block outputs, each (F, hidden, hs, ws)
};

/// Desk-scale image-conditioned video denoiser: a strided-conv encoder with
/// per-layer taps, a residual denoiser alternating per-frame spatial convs
/// with cross-frame temporal attention, and a decoder for sampling back to
/// pixels. The conditioning latent is concatenated channel-wise to every
/// frame.
class VictimModel {
 public:
  static VictimModel init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  bool trained() const { return trained_steps_ > 0; }
  int trained_steps() const { return trained_steps_; }
  std::uint64_t train_seed() const { return train_seed_; }

  /// Toggles requires_grad on every parameter. Training turns it on; a
  /// loaded or freshly trained model is frozen.
  void set_trainable(bool trainable);

  EncodeResult encode_with_taps(const Tensor& x) const;  // x (3, H, W)
  Tensor encode_frames(const Tensor& frames) const;      // (N,3,H,W)->(N,Cl,hs,ws)
  Tensor decode_frames(const Tensor& latents) const;     // (N,Cl,hs,ws)->(N,3,H,W)

  DenoiseResult denoise_with_taps(const Tensor& z_t, const Tensor& z_cond,
                                  int t, int y) const;

  /// The per-frame spatial stage of one denoiser block, exposed so the
  /// frame-equivariance of the pre-attention path can be checked directly.
  Tensor spatial_stage(const Tensor& h, int block) const;

  /// Ancestral DDPM sampling over all T steps conditioned on encode(x_cond).
  SyntheticClip generate(const Tensor& x_cond, int y, std::uint64_t seed) const;

  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_param(
      const std::function<void(const std::string&, const Tensor&)>& fn) const;

  void save(const std::string& path) const;
  static VictimModel load(const std::string& path);

  // Training bookkeeping (train_toy and checkpoint code).
  struct TrainState {
    std::vector<std::vector<double>> m, v;  // per-parameter Adam moments
    int step = 0;
  };
  TrainState train_state;
  void set_trained(int steps, std::uint64_t seed) {
    trained_steps_ = steps;
    train_seed_ = seed;
  }

  VictimModel() = default;  // empty shell; fill via init() or load()

 private:
  struct Conv {
    Tensor w, b;
  };
  struct Block {
    Conv conv1, conv2;
    Tensor wq, wk, wv, wo;
  };

  Tensor temporal_stage(const Tensor& h, const Block& blk) const;

  ModelConfig cfg_;
  NoiseSchedule schedule_;
  std::vector<Conv> enc_;
  std::vector<Conv> dec_;
  Conv in_proj_;
  Tensor time_w_, time_b_;
  Tensor class_embed_;
  std::vector<Block> blocks_;
  Conv head_;
  int trained_steps_ = 0;
  std::uint64_t train_seed_ = 0;
};

struct TrainResult {
  VictimModel model;
  std::vector<double> loss_trace;  // total per-step loss
};

/// Joint denoising + frame-reconstruction training, deterministic per seed.
/// The denoising term sees detached latents so it trains the denoiser only;
/// the reconstruction term trains encoder and decoder. Aborts with a
/// diagnostic if the loss stops being finite.
TrainResult train_toy(const ModelConfig& cfg,
                      const std::vector<SyntheticClip>& dataset, int steps,
                      std::uint64_t seed, double lr = 2e-3,
                      VictimModel* resume_from = nullptr);

/// Per-layer PCA over the channel dimension at each spatial site.
struct PcaLayerResult {
  Tensor projections;                     // (k, ...spatial dims of the tap)
  std::vector<double> explained_variance; // ratio per component, nonincreasing
  std::vector<bool> zero_variance;        // per component: padded with zeros
  bool degenerate = false;                // any component padded
};

std::vector<PcaLayerResult> pca_layer_viz(const std::vector<Tensor>& taps,
                                          int k);

}  // namespace dscloak
