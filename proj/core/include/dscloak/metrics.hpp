#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dscloak/model.hpp"
#include "dscloak/tensor.hpp"

namespace dscloak::metrics {

struct TransformSpec {
  enum class Kind { JpegLike, GaussianBlur, GaussianNoise };
  Kind kind = Kind::JpegLike;
  double quality = 40.0;  // jpeg
  int kernel = 7;         // blur
  double sigma = 1.5;     // blur
  double scale = 0.05;    // noise
  std::uint64_t seed = 0; // noise

  std::string name() const;
  /// Parses "jpeg:40", "blur:7:1.5", "noise:0.05".
  static TransformSpec parse(const std::string& text);
  Tensor apply(const Tensor& x) const;
  void validate() const;
};

/// Block-DCT quantization round trip with the standard luminance table scaled
/// by `quality` in [1, 100]; a deterministic in-library JPEG approximation
/// without entropy coding.
Tensor jpeg_like(const Tensor& x, double quality);

/// Separable Gaussian convolution, kernel normalized to sum 1, reflect padding.
Tensor gaussian_blur(const Tensor& x, int kernel = 7, double sigma = 1.5);

/// x + scale * eps (i.i.d. standard normal), clipped to [0, 1].
Tensor gaussian_noise(const Tensor& x, double scale, std::uint64_t seed);

/// 10 log10(1 / MSE) for [0, 1] images; identical images report the 99 dB cap.
double psnr(const Tensor& a, const Tensor& b);
inline constexpr double kPsnrCap = 99.0;

/// Single-scale SSIM: 11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03,
/// averaged over channels and valid window positions.
double ssim(const Tensor& a, const Tensor& b);

/// Cosine similarity of spatially pooled encoder features.
double feature_cosine(const Tensor& a, const Tensor& b, const VictimModel& extractor);

/// Plain cosine between feature vectors (the kernel behind feature_cosine).
double cosine_similarity(const std::vector<double>& a,
                         const std::vector<double>& b);

struct DegradationRow {
  std::uint64_t seed = 0;
  // reconstruction of frame 0 against the conditioning image (PSNR, higher =
  // more faithful)
  double recon_clean = 0, recon_protected = 0, recon_delta = 0;
  // mean adjacent-frame feature cosine
  double consistency_clean = 0, consistency_protected = 0, consistency_delta = 0;
  // mean feature cosine between generated frames and the clean image
  double identity_clean = 0, identity_protected = 0, identity_delta = 0;
};

struct DegradationReport {
  std::vector<DegradationRow> rows;
  double mean_recon_delta = 0, mean_consistency_delta = 0, mean_identity_delta = 0;
};

/// Generates paired clips conditioned on x and on x_xi with identical seeds
/// and reports the per-seed metric deltas (protected minus clean).
DegradationReport degradation_score(const VictimModel& model, const Tensor& x,
                                    const Tensor& x_xi, int y,
                                    const std::vector<std::uint64_t>& seeds);

struct EvaluationRow {
  std::string transform;  // "none" for the baseline row
  double psnr_vs_clean = 0, ssim_vs_clean = 0, linf_vs_clean = 0;
  double feature_cosine_vs_clean = 0;
  DegradationReport degradation;
};

struct EvaluationReport {
  std::vector<EvaluationRow> rows;  // baseline first, then input order
};

/// Applies each transform to the protected image and re-runs the degradation
/// pairing; row 0 is the untransformed baseline.
EvaluationReport robustness_report(const VictimModel& model, const Tensor& x,
                                   const Tensor& x_xi,
                                   const std::vector<TransformSpec>& transforms,
                                   int y, const std::vector<std::uint64_t>& seeds);

}  // namespace dscloak::metrics
