#include "dscloak/frequency.hpp"

#include <cmath>
#include <stdexcept>

namespace dscloak::freq {

namespace {

constexpr double kPi = 3.14159265358979323846;

Tensor transposed(const Tensor& m) {
  const int r = m.dim(0), c = m.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  const auto& v = m.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return Tensor::from({c, r}, std::move(out));
}

void check_chw(const Tensor& x, const char* op) {
  if (x.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": expected (C, H, W), got " +
                                shape_str(x.shape()));
  if (x.dim(1) < 2 || x.dim(2) < 2)
    throw std::invalid_argument(std::string(op) + ": H, W must be >= 2, got " +
                                shape_str(x.shape()));
}

}  // namespace

Tensor dct_matrix(int n) {
  if (n < 1) throw std::invalid_argument("dct_matrix: n must be positive");
  std::vector<double> d(static_cast<std::size_t>(n) * n);
  for (int u = 0; u < n; ++u) {
    const double cu = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i)
      d[u * n + i] = cu * std::cos(kPi * (0.5 + i) * u / n);
  }
  return Tensor::from({n, n}, std::move(d));
}

Tensor dct2(const Tensor& x) {
  check_chw(x, "dct2");
  return lin2d(x, dct_matrix(x.dim(1)), dct_matrix(x.dim(2)));
}

Tensor idct2(const Tensor& x) {
  check_chw(x, "idct2");
  return lin2d(x, transposed(dct_matrix(x.dim(1))),
               transposed(dct_matrix(x.dim(2))));
}

Tensor make_lowfreq_mask(int h, int w, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("make_lowfreq_mask: fraction " +
                                std::to_string(fraction) +
                                " outside (0, 1]");
  const double side = std::sqrt(fraction);
  const int rows = std::min<int>(h, static_cast<int>(std::ceil(h * side)));
  const int cols = std::min<int>(w, static_cast<int>(std::ceil(w * side)));
  std::vector<double> m(static_cast<std::size_t>(h) * w, 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m[static_cast<std::size_t>(i) * w + j] = 1.0;
  return Tensor::from({h, w}, std::move(m));
}

Tensor apply_masked_delta(const Tensor& x, const Tensor& delta,
                          const Tensor& mask, bool literal) {
  check_chw(x, "apply_masked_delta");
  if (delta.shape() != x.shape())
    throw std::invalid_argument("apply_masked_delta: delta shape " +
                                shape_str(delta.shape()) +
                                " does not match image shape " +
                                shape_str(x.shape()));
  if (mask.rank() != 2 || mask.dim(0) != x.dim(1) || mask.dim(1) != x.dim(2))
    throw std::invalid_argument("apply_masked_delta: mask shape " +
                                shape_str(mask.shape()) +
                                " does not match image shape " +
                                shape_str(x.shape()));
  const Tensor spectrum = dct2(x);
  if (literal) return idct2(mul(add(spectrum, delta), mask));
  return idct2(add(spectrum, mul(delta, mask)));
}

}  // namespace dscloak::freq
