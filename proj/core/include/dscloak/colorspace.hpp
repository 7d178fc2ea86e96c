#pragma once

#include "dscloak/tensor.hpp"

namespace dscloak::color {

// D65 reference white.
inline constexpr double kWhiteX = 0.95047;
inline constexpr double kWhiteY = 1.0;
inline constexpr double kWhiteZ = 1.08883;

/// Native span of the a*/b* channels. A chroma budget expressed as a fraction
/// (e.g. 16/255) is multiplied by this to get the clip interval in native
/// units, so 16/255 permits +-16 units on a* and b*.
double lab_delta_scale();

/// Elementwise sRGB EOTF (gamma expansion). Input must lie in [0, 1].
Tensor srgb_to_linear(const Tensor& x);
/// Inverse EOTF. Input must lie in [0, 1].
Tensor linear_to_srgb(const Tensor& x);

/// sRGB (3, H, W) in [0, 1] -> CIELAB (3, H, W): L* in [0, 100], a*/b* around
/// [-128, 127]. Fully differentiable; branch decisions use primal values.
Tensor rgb_to_lab(const Tensor& x);

/// Exact inverse of rgb_to_lab for in-gamut colors; out-of-gamut results are
/// clipped to [0, 1] with the straight-through clip subgradient.
Tensor lab_to_rgb(const Tensor& lab);

}  // namespace dscloak::color
