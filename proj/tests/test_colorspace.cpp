#include <cmath>

#include "doctest.h"
#include "dscloak/colorspace.hpp"
#include "dscloak/tensor.hpp"
#include "support.hpp"

using namespace dscloak;

namespace {

Tensor single_color(double r, double g, double b) {
  return Tensor::from({3, 1, 1}, {r, g, b});
}

}  // namespace

TEST_SUITE_BEGIN("colorspace");

TEST_CASE("srgb_to_linear fixed points and knee value") {
  const Tensor z = color::srgb_to_linear(single_color(0.0, 1.0, 0.04045));
  CHECK(z.data()[0] == 0.0);
  CHECK(z.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(z.data()[2] == doctest::Approx(0.04045 / 12.92).epsilon(1e-12));
}

TEST_CASE("srgb_to_linear rejects out-of-range input") {
  CHECK_THROWS_AS(color::srgb_to_linear(single_color(-0.1, 0.5, 0.5)),
                  std::invalid_argument);
  CHECK_THROWS_AS(color::srgb_to_linear(single_color(0.1, 1.5, 0.5)),
                  std::invalid_argument);
}

TEST_CASE("EOTF/OETF round-trip on a 256-value grid") {
  std::vector<double> grid(256);
  for (int i = 0; i < 256; ++i) grid[i] = i / 255.0;
  const Tensor x = Tensor::from({1, 1, 256}, grid);
  const Tensor rt = color::linear_to_srgb(color::srgb_to_linear(x));
  CHECK(support::max_abs_diff(rt, x) < 1e-12);
}

TEST_CASE("black maps to exactly L*=0, a*=0, b*=0") {
  const Tensor lab = color::rgb_to_lab(single_color(0, 0, 0));
  // f(0) = 4/29, so L* = 116*(4/29) - 16 = 0 exactly
  CHECK(lab.data()[0] == doctest::Approx(0.0).epsilon(1e-13));
  CHECK(lab.data()[1] == doctest::Approx(0.0).epsilon(1e-13));
  CHECK(lab.data()[2] == doctest::Approx(0.0).epsilon(1e-13));
}

TEST_CASE("white maps to L*=100 with near-zero chroma") {
  const Tensor lab = color::rgb_to_lab(single_color(1, 1, 1));
  CHECK(lab.data()[0] == doctest::Approx(100.0).epsilon(1e-5));
  CHECK(std::abs(lab.data()[1]) < 0.01);
  CHECK(std::abs(lab.data()[2]) < 0.01);
}

TEST_CASE("mid gray agrees with the independent scalar reference") {
  const Tensor lab = color::rgb_to_lab(single_color(0.5, 0.5, 0.5));
  double L, A, B;
  support::ref_srgb_to_lab(0.5, 0.5, 0.5, &L, &A, &B);
  CHECK(std::abs(lab.data()[0] - L) < 1e-6);
  CHECK(std::abs(lab.data()[1] - A) < 1e-6);
  CHECK(std::abs(lab.data()[2] - B) < 1e-6);
}

TEST_CASE("random colors agree with the scalar reference") {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const double r = rng.uniform(), g = rng.uniform(), b = rng.uniform();
    const Tensor lab = color::rgb_to_lab(single_color(r, g, b));
    double L, A, B;
    support::ref_srgb_to_lab(r, g, b, &L, &A, &B);
    CHECK(std::abs(lab.data()[0] - L) < 1e-6);
    CHECK(std::abs(lab.data()[1] - A) < 1e-6);
    CHECK(std::abs(lab.data()[2] - B) < 1e-6);
  }
}

TEST_CASE("rgb->lab->rgb round-trips 1000 random in-gamut colors") {
  Rng rng(23);
  std::vector<double> v(3000);
  for (auto& e : v) e = rng.uniform();
  const Tensor x = Tensor::from({3, 10, 100}, std::move(v));
  const Tensor rt = color::lab_to_rgb(color::rgb_to_lab(x));
  CHECK(support::max_abs_diff(rt, x) < 1e-6);
}

TEST_CASE("lab white inverts to rgb white") {
  const Tensor rgb = color::lab_to_rgb(single_color(100.0, 0.0, 0.0));
  CHECK(std::abs(rgb.data()[0] - 1.0) < 1e-4);
  CHECK(std::abs(rgb.data()[1] - 1.0) < 1e-4);
  CHECK(std::abs(rgb.data()[2] - 1.0) < 1e-4);
}

TEST_CASE("round trip over the full 8x8x8 in-gamut grid stays under 1e-6") {
  std::vector<double> v(3 * 8 * 64);
  int idx = 0;
  for (int r = 0; r < 8; ++r)
    for (int g = 0; g < 8; ++g)
      for (int b = 0; b < 8; ++b) {
        const int site = idx++;
        v[0 * 512 + site] = r / 7.0;
        v[1 * 512 + site] = g / 7.0;
        v[2 * 512 + site] = b / 7.0;
      }
  const Tensor x = Tensor::from({3, 8, 64}, std::move(v));
  const Tensor rt = color::lab_to_rgb(color::rgb_to_lab(x));
  CHECK(support::max_abs_diff(rt, x) < 1e-6);
}

TEST_CASE("zero chroma perturbation leaves the image unchanged") {
  Rng rng(29);
  std::vector<double> v(3 * 4 * 4);
  for (auto& e : v) e = rng.uniform();
  const Tensor x = Tensor::from({3, 4, 4}, std::move(v));
  const Tensor lab = color::rgb_to_lab(x);
  const Tensor back = color::lab_to_rgb(lab);
  CHECK(support::max_abs_diff(back, x) < 1e-6);
}

TEST_CASE("lab_delta_scale interprets fractional chroma budgets") {
  CHECK(color::lab_delta_scale() == 255.0);
  CHECK(color::lab_delta_scale() * (16.0 / 255.0) == doctest::Approx(16.0));
  CHECK(color::lab_delta_scale() * (32.0 / 255.0) == doctest::Approx(32.0));
  CHECK(color::lab_delta_scale() * 0.0 == 0.0);
}

TEST_CASE("rgb_to_lab Jacobian matches finite differences away from branches") {
  Rng rng(31);
  std::vector<double> v(3 * 2 * 2);
  for (auto& e : v) e = 0.15 + 0.7 * rng.uniform();
  const Tensor x0 = Tensor::from({3, 2, 2}, v);
  const Tensor w = Tensor::randn({3, 2, 2}, rng);
  auto f = [&w](const Tensor& x) { return sum(mul(color::rgb_to_lab(x), w)); };
  const auto rep = finite_diff_check(f, x0, 1e-6);
  CHECK(rep.compared == 12);
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("L* is invariant under an in-gamut chroma-only delta") {
  Rng rng(37);
  std::vector<double> v(3 * 3 * 3);
  for (auto& e : v) e = 0.3 + 0.4 * rng.uniform();  // comfortable gamut margin
  const Tensor x = Tensor::from({3, 3, 3}, std::move(v));
  const Tensor lab = color::rgb_to_lab(x);
  const Tensor delta = Tensor::full({1, 3, 3}, 2.0);
  const Tensor shifted = concat(
      {narrow(lab, 0, 0, 1), add(narrow(lab, 0, 1, 1), delta),
       add(narrow(lab, 0, 2, 1), delta)},
      0);
  const Tensor lab2 = color::rgb_to_lab(color::lab_to_rgb(shifted));
  const auto& l1 = lab.data();
  const auto& l2 = lab2.data();
  for (int i = 0; i < 9; ++i) CHECK(std::abs(l2[i] - l1[i]) < 1e-6);
  // and the chroma actually moved by the delta
  for (int i = 9; i < 27; ++i) CHECK(l2[i] - l1[i] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_SUITE_END();
