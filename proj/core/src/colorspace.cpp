#include "dscloak/colorspace.hpp"

#include <cmath>
#include <stdexcept>

namespace dscloak::color {

namespace {

// IEC 61966-2-1 sRGB -> XYZ (D65). Rows sum to the reference white.
constexpr double kM[9] = {
    0.4124564, 0.3575761, 0.1804375,  //
    0.2126729, 0.7151522, 0.0721750,  //
    0.0193339, 0.1191920, 0.9503041,
};

// Analytic 3x3 inverse of kM, computed once so rgb->lab->rgb round-trips at
// machine precision.
struct InverseM {
  double v[9];
  InverseM() {
    const double* m = kM;
    const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                       m[1] * (m[3] * m[8] - m[5] * m[6]) +
                       m[2] * (m[3] * m[7] - m[4] * m[6]);
    v[0] = (m[4] * m[8] - m[5] * m[7]) / det;
    v[1] = (m[2] * m[7] - m[1] * m[8]) / det;
    v[2] = (m[1] * m[5] - m[2] * m[4]) / det;
    v[3] = (m[5] * m[6] - m[3] * m[8]) / det;
    v[4] = (m[0] * m[8] - m[2] * m[6]) / det;
    v[5] = (m[2] * m[3] - m[0] * m[5]) / det;
    v[6] = (m[3] * m[7] - m[4] * m[6]) / det;
    v[7] = (m[1] * m[6] - m[0] * m[7]) / det;
    v[8] = (m[0] * m[4] - m[1] * m[3]) / det;
  }
};

const InverseM kMInv;

constexpr double kEotfKnee = 0.04045;
constexpr double kOetfKnee = 0.0031308;

double eotf(double v) {
  return v <= kEotfKnee ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}
double d_eotf(double v) {
  return v <= kEotfKnee ? 1.0 / 12.92
                        : (2.4 / 1.055) * std::pow((v + 0.055) / 1.055, 1.4);
}
double oetf(double u) {
  return u <= kOetfKnee ? 12.92 * u : 1.055 * std::pow(u, 1.0 / 2.4) - 0.055;
}
double d_oetf(double u) {
  return u <= kOetfKnee ? 12.92
                        : (1.055 / 2.4) * std::pow(u, 1.0 / 2.4 - 1.0);
}

// CIE lightness companding function f(t) and its inverse. delta = 6/29; the
// two branches meet C^1 at t = delta^3, so the active-branch gradient is exact.
constexpr double kDelta = 6.0 / 29.0;
constexpr double kDelta3 = kDelta * kDelta * kDelta;
constexpr double kFSlope = (29.0 / 6.0) * (29.0 / 6.0) / 3.0;

double lab_f(double t) {
  return t > kDelta3 ? std::cbrt(t) : kFSlope * t + 4.0 / 29.0;
}
double d_lab_f(double t) {
  if (t > kDelta3) {
    const double c = std::cbrt(t);
    return 1.0 / (3.0 * c * c);
  }
  return kFSlope;
}
double lab_f_inv(double u) {
  return u > kDelta ? u * u * u : (u - 4.0 / 29.0) / kFSlope;
}
double d_lab_f_inv(double u) {
  return u > kDelta ? 3.0 * u * u : 1.0 / kFSlope;
}

void check_image(const Tensor& x, const char* op) {
  if (x.rank() != 3 || x.dim(0) != 3)
    throw std::invalid_argument(std::string(op) + ": expected shape (3, H, W), got " +
                                shape_str(x.shape()));
}

void check_unit_range(const Tensor& x, const char* op) {
  for (double v : x.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument(std::string(op) +
                                  ": input value outside [0, 1]: " +
                                  std::to_string(v));
}

}  // namespace

double lab_delta_scale() { return 255.0; }

Tensor srgb_to_linear(const Tensor& x) {
  check_unit_range(x, "srgb_to_linear");
  return apply_unary(x, "srgb_eotf", &eotf, &d_eotf);
}

Tensor linear_to_srgb(const Tensor& x) {
  check_unit_range(x, "linear_to_srgb");
  return apply_unary(x, "srgb_oetf", &oetf, &d_oetf);
}

Tensor rgb_to_lab(const Tensor& x) {
  check_image(x, "rgb_to_lab");
  check_unit_range(x, "rgb_to_lab");
  const int h = x.dim(1), w = x.dim(2);

  const Tensor lin = apply_unary(x, "srgb_eotf", &eotf, &d_eotf);
  const Tensor m = Tensor::from({3, 3}, std::vector<double>(kM, kM + 9));
  const Tensor xyz = matmul(m, reshape(lin, {3, h * w}));
  const Tensor white = Tensor::from({3, 1}, {kWhiteX, kWhiteY, kWhiteZ});
  const Tensor fxyz = apply_unary(div(xyz, white), "lab_f", &lab_f, &d_lab_f);

  const Tensor fx = narrow(fxyz, 0, 0, 1);
  const Tensor fy = narrow(fxyz, 0, 1, 1);
  const Tensor fz = narrow(fxyz, 0, 2, 1);
  const Tensor lstar = fy * 116.0 - 16.0;
  const Tensor astar = (fx - fy) * 500.0;
  const Tensor bstar = (fy - fz) * 200.0;
  return reshape(concat({lstar, astar, bstar}, 0), {3, h, w});
}

Tensor lab_to_rgb(const Tensor& lab) {
  check_image(lab, "lab_to_rgb");
  const int h = lab.dim(1), w = lab.dim(2);

  const Tensor flat = reshape(lab, {3, h * w});
  const Tensor lstar = narrow(flat, 0, 0, 1);
  const Tensor astar = narrow(flat, 0, 1, 1);
  const Tensor bstar = narrow(flat, 0, 2, 1);

  const Tensor fy = (lstar + 16.0) / 116.0;
  const Tensor fx = fy + astar / 500.0;
  const Tensor fz = fy - bstar / 200.0;
  const Tensor fxyz = concat({fx, fy, fz}, 0);

  const Tensor white = Tensor::from({3, 1}, {kWhiteX, kWhiteY, kWhiteZ});
  const Tensor xyz =
      mul(apply_unary(fxyz, "lab_f_inv", &lab_f_inv, &d_lab_f_inv), white);
  const Tensor minv =
      Tensor::from({3, 3}, std::vector<double>(kMInv.v, kMInv.v + 9));
  const Tensor lin = matmul(minv, xyz);
  // Out-of-gamut linear values are clipped before encoding; monotonicity of
  // the OETF makes this equivalent to clipping the encoded result.
  const Tensor encoded = apply_unary(clip(lin, 0.0, 1.0), "srgb_oetf", &oetf, &d_oetf);
  return reshape(clip(encoded, 0.0, 1.0), {3, h, w});
}

}  // namespace dscloak::color
