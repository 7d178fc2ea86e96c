#pragma once

// Finite-difference sweep over every differentiable primitive. Shared by the
// unit suite (few seeds) and the acceptance gate (100 seeds).

#include <functional>
#include <string>
#include <vector>

#include "dscloak/colorspace.hpp"
#include "dscloak/rng.hpp"
#include "dscloak/tensor.hpp"

namespace fd_suite {

using dscloak::Rng;
using dscloak::Shape;
using dscloak::Tensor;

struct Result {
  std::string op;
  std::uint64_t seed;
  double max_rel_error;
  int compared;
};

// Reduces an op output to a scalar through a fixed random weighting so every
// output element influences the loss.
inline Tensor weighted_sum(const Tensor& y, Rng& rng) {
  Tensor w = Tensor::randn(y.shape(), rng);
  return dscloak::sum(dscloak::mul(y, w));
}

inline std::vector<Result> run(int seeds_per_op, double step = 1e-5) {
  using namespace dscloak;
  std::vector<Result> results;

  struct Case {
    const char* name;
    Shape in_shape;
    std::function<Tensor(const Tensor&, Rng&)> f;
    double shift = 0.0;  // applied to the random input (domain control)
  };

  const std::vector<Case> cases = {
      {"add", {3, 4}, [](const Tensor& x, Rng& r) {
         return add(x, Tensor::randn({3, 4}, r));
       }},
      {"add_broadcast", {3, 4}, [](const Tensor& x, Rng& r) {
         return add(x, Tensor::randn({4}, r));
       }},
      {"sub", {3, 4}, [](const Tensor& x, Rng& r) {
         return sub(Tensor::randn({3, 4}, r), x);
       }},
      {"mul", {3, 4}, [](const Tensor& x, Rng& r) {
         return mul(x, Tensor::randn({1, 4}, r));
       }},
      {"div", {3, 4}, [](const Tensor& x, Rng& r) {
         return div(Tensor::randn({3, 4}, r), add(mul(x, x), Tensor::full({3, 4}, 1.0)));
       }},
      {"neg", {5}, [](const Tensor& x, Rng&) { return neg(x); }},
      {"pow", {6}, [](const Tensor& x, Rng&) { return pow(x, 2.4); }, 3.0},
      {"exp", {6}, [](const Tensor& x, Rng&) { return exp(x); }},
      {"sqrt", {6}, [](const Tensor& x, Rng&) { return sqrt(x); }, 4.0},
      {"sigmoid", {6}, [](const Tensor& x, Rng&) { return sigmoid(x); }},
      {"silu", {6}, [](const Tensor& x, Rng&) { return silu(x); }},
      {"clip_interior", {6}, [](const Tensor& x, Rng&) {
         return clip(x, -50.0, 50.0);  // random normals stay interior
       }},
      {"matmul", {2, 3, 4}, [](const Tensor& x, Rng& r) {
         return matmul(x, Tensor::randn({4, 2}, r));
       }},
      {"bmm", {2, 3, 4}, [](const Tensor& x, Rng& r) {
         return bmm(x, Tensor::randn({2, 4, 3}, r));
       }},
      {"lin2d", {2, 4, 5}, [](const Tensor& x, Rng& r) {
         return lin2d(x, Tensor::randn({3, 4}, r), Tensor::randn({2, 5}, r));
       }},
      {"conv2d", {1, 2, 6, 6}, [](const Tensor& x, Rng& r) {
         return conv2d(x, Tensor::randn({3, 2, 3, 3}, r), Tensor::randn({3}, r), 2, 1);
       }},
      {"upsample_nearest2x", {1, 2, 3, 3}, [](const Tensor& x, Rng&) {
         return upsample_nearest2x(x);
       }},
      {"reshape", {2, 6}, [](const Tensor& x, Rng&) {
         return reshape(x, {3, 4});
       }},
      {"permute", {2, 3, 4}, [](const Tensor& x, Rng&) {
         return permute(x, {2, 0, 1});
       }},
      {"narrow", {4, 5}, [](const Tensor& x, Rng&) {
         return narrow(x, 1, 1, 3);
       }},
      {"concat", {2, 3}, [](const Tensor& x, Rng& r) {
         return concat({x, Tensor::randn({2, 3}, r), x}, 0);
       }},
      {"sum", {3, 4}, [](const Tensor& x, Rng&) { return sum(x); }},
      {"mean", {3, 4}, [](const Tensor& x, Rng&) { return mean(x); }},
      {"sum_squares", {3, 4}, [](const Tensor& x, Rng&) { return sum_squares(x); }},
      {"sum_axis", {3, 4, 2}, [](const Tensor& x, Rng&) { return sum_axis(x, 1); }},
      {"softmax", {3, 5}, [](const Tensor& x, Rng&) { return softmax(x, 1); }},
      {"srgb_to_linear", {3, 3, 3}, [](const Tensor& x, Rng&) {
         return color::srgb_to_linear(clip(x, 0.0, 1.0));
       }, 0.0},
      {"rgb_to_lab", {3, 3, 3}, [](const Tensor& x, Rng&) {
         return color::rgb_to_lab(clip(x, 0.0, 1.0));
       }},
  };

  for (const auto& c : cases) {
    for (int s = 0; s < seeds_per_op; ++s) {
      const std::uint64_t seed = Rng::mix(0xFD5EED, s * 131 + results.size());
      Rng gen(seed);
      Tensor x0 = Tensor::randn(c.in_shape, gen);
      if (c.shift != 0.0) x0 = add(x0, Tensor::full(c.in_shape, c.shift)).detach();
      if (std::string(c.name) == "srgb_to_linear" ||
          std::string(c.name) == "rgb_to_lab") {
        // inputs in (0, 1), away from the EOTF branch point
        std::vector<double> v = x0.data();
        for (auto& e : v) e = 0.1 + 0.8 * std::abs(std::fmod(e, 1.0));
        x0 = Tensor::from(c.in_shape, std::move(v));
      }
      auto f = [&c, seed](const Tensor& x) {
        Rng r(Rng::mix(seed, 0xB0B));  // fixed weights per seed
        Tensor y = c.f(x, r);
        return weighted_sum(y, r);
      };
      const auto rep = dscloak::finite_diff_check(f, x0, step);
      results.push_back({c.name, seed, rep.max_rel_error, rep.compared});
    }
  }
  return results;
}

}  // namespace fd_suite
