#pragma once

#include "dscloak/tensor.hpp"

namespace dscloak::freq {

/// Orthonormal DCT-II matrix of size n x n:
/// D[u, i] = c_u * cos(pi * (0.5 + i) * u / n), c_0 = sqrt(1/n), else sqrt(2/n).
Tensor dct_matrix(int n);

/// Per-channel orthonormal 2-D DCT of a (C, H, W) tensor, on the tape.
Tensor dct2(const Tensor& x);
/// Exact inverse of dct2.
Tensor idct2(const Tensor& x);

/// Binary (H, W) mask selecting the top-left low-frequency block. The block
/// spans rows [0, ceil(h * sqrt(fraction))) and columns likewise, so the ones
/// area matches `fraction` up to rounding. fraction must lie in (0, 1].
Tensor make_lowfreq_mask(int h, int w, double fraction);

/// idct2(dct2(x) + delta ⊙ mask): injects a perturbation through the masked
/// low-frequency coefficients. With `literal` set, the mask is instead applied
/// to the whole perturbed spectrum, idct2((dct2(x) + delta) ⊙ mask), which
/// low-passes the image itself even at delta = 0.
Tensor apply_masked_delta(const Tensor& x, const Tensor& delta,
                          const Tensor& mask, bool literal = false);

}  // namespace dscloak::freq
