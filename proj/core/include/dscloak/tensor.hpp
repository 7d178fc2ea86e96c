#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dscloak/rng.hpp"

namespace dscloak {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily during a backward sweep
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t tape_epoch = 0;  // epoch the node was recorded under (non-leaf only)
};

}  // namespace detail

/// Dense 64-bit tensor participating in reverse-mode differentiation.
/// A Tensor is a cheap shared handle; ops record themselves on the calling
/// thread's tape whenever any input requires a gradient (define-by-run).
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor randn(Shape shape, Rng& rng);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int numel() const;
  int dim(int axis) const;
  int rank() const;

  const std::vector<double>& data() const;
  // Mutable access to leaf values (optimizer updates). Rejected on non-leaf nodes.
  std::vector<double>& leaf_data();

  double item() const;  // numel() == 1 only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  // Value copy detached from the tape (requires_grad = false).
  Tensor detach() const;
  Tensor clone() const;  // leaf copy preserving requires_grad

  const void* id() const { return node_.get(); }

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Gradients for requires_grad leaves reachable from a loss.
class GradMap {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  const Tensor& at(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }
  void insert(const void* key, Tensor grad) { grads_.emplace(key, std::move(grad)); }

 private:
  std::unordered_map<const void*, Tensor> grads_;
};

/// Runs reverse accumulation from a scalar loss recorded on this thread's
/// tape. Consumes the tape: a second call without new forward work throws.
GradMap backward(const Tensor& loss);

// Tape introspection (tests and diagnostics).
std::size_t tape_size();
void tape_reset();

// ---------------------------------------------------------------------------
// Differentiable op suite
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator/(const Tensor& a, double b);
Tensor operator+(double a, const Tensor& b);
Tensor operator-(double a, const Tensor& b);
Tensor operator*(double a, const Tensor& b);
Tensor operator-(const Tensor& a);

Tensor pow(const Tensor& x, double exponent);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);

/// Custom scalar function with its derivative; the branch decision happens on
/// primal values inside `f`/`df`, so piecewise C^1 functions stay exact.
Tensor apply_unary(const Tensor& x, const char* name, double (*f)(double),
                   double (*df)(double));

/// clamp(x, lo, hi) with straight-through subgradient inside the interval,
/// boundary included; zero outside. Bounds are non-differentiated constants
/// (broadcastable against x).
Tensor clip(const Tensor& x, const Tensor& lo, const Tensor& hi);
Tensor clip(const Tensor& x, double lo, double hi);

/// a @ b where b is a 2-D matrix and a is (..., m, k): applied over leading
/// batch dims of a.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul with identical leading dims: (..., m, k) @ (..., k, n).
Tensor bmm(const Tensor& a, const Tensor& b);
/// Fixed 2-D linear transform per leading batch: A · x · B^T for x (..., h, w),
/// A (p, h), B (q, w) -> (..., p, q). A and B are non-differentiated constants.
Tensor lin2d(const Tensor& x, const Tensor& a, const Tensor& b);

/// 2-D convolution over (N, Cin, H, W) with weight (Cout, Cin, kh, kw),
/// bias (Cout) (pass an undefined Tensor to skip), zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding);
Tensor upsample_nearest2x(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor narrow(const Tensor& x, int axis, int start, int length);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);  // keeps the axis with extent 1

Tensor softmax(const Tensor& x, int axis);

/// Standard sinusoidal position embedding of a (non-differentiated) scalar.
Tensor sinusoidal_embedding(double t, int dim);

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

struct FdReport {
  double max_rel_error = 0.0;
  int compared = 0;
  std::vector<int> excluded;  // flat indices where f is locally non-smooth
};

/// Central-difference check of backward() for a deterministic scalar-valued f.
/// Elements where the one-sided differences disagree (clip boundaries, branch
/// points) are excluded from the comparison and reported separately.
FdReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double step);

}  // namespace dscloak
