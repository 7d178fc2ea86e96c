#include "dscloak/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace dscloak {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct Tape {
  std::vector<std::function<void()>> entries;
  std::vector<NodePtr> leaves;           // requires_grad leaves seen as inputs
  std::unordered_set<Node*> leaf_seen;
  std::vector<NodePtr> touched;          // nodes whose grad buffers we must clear
  std::unordered_set<Node*> touched_seen;
  std::uint64_t epoch = 1;

  void finish_epoch() {
    for (auto& n : touched) n->grad.clear();
    entries.clear();
    leaves.clear();
    leaf_seen.clear();
    touched.clear();
    touched_seen.clear();
    ++epoch;
  }
};

Tape& tape() {
  thread_local Tape t;
  return t;
}

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

void touch(const NodePtr& n) {
  auto& t = tape();
  if (t.touched_seen.insert(n.get()).second) t.touched.push_back(n);
}

void note_input(const NodePtr& n) {
  if (!n->requires_grad) return;
  touch(n);
  if (n->is_leaf) {
    auto& t = tape();
    if (t.leaf_seen.insert(n.get()).second) t.leaves.push_back(n);
  }
}

// Marks `out` as a recorded op result and pushes its backward closure.
void record(const NodePtr& out, std::function<void()> backprop,
            std::initializer_list<NodePtr> inputs) {
  auto& t = tape();
  for (const auto& in : inputs) note_input(in);
  out->requires_grad = true;
  out->is_leaf = false;
  out->tape_epoch = t.epoch;
  touch(out);
  t.entries.push_back(std::move(backprop));
}

std::vector<double>& grad_of(const NodePtr& n) {
  if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a) + " and " + shape_str(b));
}

// Trailing-aligned broadcast result shape.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[i - (r - ra)];
    const int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides for reading a tensor of shape `from` while iterating `to`;
// zero on broadcast axes.
std::vector<long> broadcast_strides(const Shape& from, const Shape& to) {
  const int rf = static_cast<int>(from.size()), rt = static_cast<int>(to.size());
  std::vector<long> nat(rf);
  long acc = 1;
  for (int i = rf - 1; i >= 0; --i) {
    nat[i] = acc;
    acc *= from[i];
  }
  std::vector<long> s(rt, 0);
  for (int i = 0; i < rt; ++i) {
    const int fi = i - (rt - rf);
    if (fi >= 0 && from[fi] != 1) s[i] = nat[fi];
  }
  return s;
}

// Odometer walk over `out`, tracking two strided offsets.
template <class F>
void bcast_iter(const Shape& out, const std::vector<long>& sa,
                const std::vector<long>& sb, F&& f) {
  const int r = static_cast<int>(out.size());
  const long n = shape_numel(out);
  if (r == 0) {
    f(0L, 0L, 0L);
    return;
  }
  std::vector<int> idx(r, 0);
  long oa = 0, ob = 0;
  for (long i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= static_cast<long>(out[ax]) * sa[ax];
      ob -= static_cast<long>(out[ax]) * sb[ax];
      idx[ax] = 0;
    }
  }
}

// Generic elementwise binary op with broadcasting. `dfa`/`dfb` give the
// partials as functions of (a, b, upstream grad).
template <class FOp, class DA, class DB>
Tensor ew_binary(const char* name, const Tensor& ta, const Tensor& tb, FOp f,
                 DA dfa, DB dfb) {
  const NodePtr a = ta.node(), b = tb.node();
  if (!a || !b) throw std::invalid_argument(std::string(name) + ": undefined tensor");
  const bool same = a->shape == b->shape;
  Shape out_shape = same ? a->shape : broadcast_shape(name, a->shape, b->shape);
  std::vector<double> out(shape_numel(out_shape));

  if (same) {
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
  } else {
    const auto sa = broadcast_strides(a->shape, out_shape);
    const auto sb = broadcast_strides(b->shape, out_shape);
    bcast_iter(out_shape, sa, sb, [&](long i, long ia, long ib) {
      out[i] = f(a->value[ia], b->value[ib]);
    });
  }

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (a->requires_grad || b->requires_grad) {
    record(
        on,
        [a, b, on, same, dfa, dfb]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          if (same) {
            if (a->requires_grad) {
              auto& ga = grad_of(a);
              for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += dfa(a->value[i], b->value[i], g[i]);
            }
            if (b->requires_grad) {
              auto& gb = grad_of(b);
              for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] += dfb(a->value[i], b->value[i], g[i]);
            }
          } else {
            const auto sa = broadcast_strides(a->shape, on->shape);
            const auto sb = broadcast_strides(b->shape, on->shape);
            auto* ga = a->requires_grad ? &grad_of(a) : nullptr;
            auto* gb = b->requires_grad ? &grad_of(b) : nullptr;
            bcast_iter(on->shape, sa, sb, [&](long i, long ia, long ib) {
              if (ga) (*ga)[ia] += dfa(a->value[ia], b->value[ib], g[i]);
              if (gb) (*gb)[ib] += dfb(a->value[ia], b->value[ib], g[i]);
            });
          }
        },
        {a, b});
  }
  return Tensor(on);
}

template <class FOp, class DF>
Tensor ew_unary(const char* name, const Tensor& tx, FOp f, DF df) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument(std::string(name) + ": undefined tensor");
  std::vector<double> out(x->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x->value[i]);
  NodePtr on = make_node(x->shape, std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, df]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += df(x->value[i], on->value[i]) * g[i];
        },
        {x});
  }
  return Tensor(on);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  for (int d : shape)
    if (d <= 0)
      throw std::invalid_argument("Tensor::from: nonpositive extent in " +
                                  shape_str(shape));
  if (static_cast<int>(values.size()) != shape_numel(shape))
    throw std::invalid_argument(
        "Tensor::from: " + std::to_string(values.size()) +
        " values for shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::zeros(Shape shape) {
  return from(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  return from(shape, std::vector<double>(shape_numel(shape), v));
}

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::randn(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.normal();
  return from(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("shape() on undefined tensor");
  return node_->shape;
}

int Tensor::numel() const { return shape_numel(shape()); }

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("dim: axis out of range for " + shape_str(s));
  return s[axis];
}

const std::vector<double>& Tensor::data() const {
  if (!node_) throw std::logic_error("data() on undefined tensor");
  return node_->value;
}

std::vector<double>& Tensor::leaf_data() {
  if (!node_) throw std::logic_error("leaf_data() on undefined tensor");
  if (!node_->is_leaf)
    throw std::logic_error("leaf_data() is only valid on leaf tensors");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item(): tensor of shape " +
                                shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size())
    throw std::invalid_argument("at(): rank mismatch for " + shape_str(s));
  long off = 0;
  int ax = 0;
  for (int i : idx) {
    if (i < 0 || i >= s[ax])
      throw std::invalid_argument("at(): index out of range for " + shape_str(s));
    off = off * s[ax] + i;
    ++ax;
  }
  return node_->value[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!node_) throw std::logic_error("set_requires_grad on undefined tensor");
  if (!node_->is_leaf)
    throw std::logic_error("set_requires_grad is only valid on leaf tensors");
  node_->requires_grad = v;
  return *this;
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  return Tensor(make_node(node_->shape, node_->value));
}

Tensor Tensor::clone() const {
  if (!node_) return Tensor();
  auto n = make_node(node_->shape, node_->value);
  n->requires_grad = node_->requires_grad;
  return Tensor(n);
}

const Tensor& GradMap::at(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end())
    throw std::out_of_range("GradMap::at: tensor has no recorded gradient");
  return it->second;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradMap backward(const Tensor& loss) {
  auto& t = tape();
  const NodePtr n = loss.node();
  if (!n) throw std::invalid_argument("backward: undefined loss tensor");
  if (shape_numel(n->shape) != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(n->shape));
  if (n->is_leaf || n->tape_epoch != t.epoch || t.entries.empty())
    throw std::logic_error(
        "backward: loss was not produced on the current tape (tape already "
        "consumed or no forward pass recorded)");

  grad_of(n)[0] = 1.0;
  for (auto it = t.entries.rbegin(); it != t.entries.rend(); ++it) (*it)();

  GradMap out;
  for (const auto& leaf : t.leaves) {
    std::vector<double> g = leaf->grad.empty()
                                ? std::vector<double>(leaf->value.size(), 0.0)
                                : leaf->grad;
    out.insert(leaf.get(), Tensor::from(leaf->shape, std::move(g)));
  }
  t.finish_epoch();
  return out;
}

std::size_t tape_size() { return tape().entries.size(); }

void tape_reset() { tape().finish_epoch(); }

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return ew_unary(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
Tensor operator-(const Tensor& a) { return neg(a); }

Tensor pow(const Tensor& x, double e) {
  return ew_unary(
      "pow", x, [e](double v) { return std::pow(v, e); },
      [e](double v, double) { return e * std::pow(v, e - 1.0); });
}

Tensor exp(const Tensor& x) {
  return ew_unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& x) {
  return ew_unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& x) {
  return ew_unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return ew_unary(
      "silu", x,
      [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor apply_unary(const Tensor& x, const char* name, double (*f)(double),
                   double (*df)(double)) {
  return ew_unary(
      name, x, [f](double v) { return f(v); },
      [df](double v, double) { return df(v); });
}

Tensor clip(const Tensor& tx, const Tensor& tlo, const Tensor& thi) {
  const NodePtr x = tx.node(), lo = tlo.node(), hi = thi.node();
  if (!x || !lo || !hi) throw std::invalid_argument("clip: undefined tensor");
  if (lo->requires_grad || hi->requires_grad)
    throw std::invalid_argument("clip: bounds must not require gradients");
  if (broadcast_shape("clip", x->shape, lo->shape) != x->shape)
    shape_error("clip (lower bound)", x->shape, lo->shape);
  if (broadcast_shape("clip", x->shape, hi->shape) != x->shape)
    shape_error("clip (upper bound)", x->shape, hi->shape);

  const auto slo = broadcast_strides(lo->shape, x->shape);
  const auto shi = broadcast_strides(hi->shape, x->shape);
  std::vector<double> out(x->value.size());
  // pass mask: 1 inside [lo, hi] inclusive (boundary counts as interior), else 0
  std::vector<std::uint8_t> pass(x->value.size());
  bcast_iter(x->shape, slo, shi, [&](long i, long ilo, long ihi) {
    const double v = x->value[i];
    const double l = lo->value[ilo], h = hi->value[ihi];
    pass[i] = (v >= l && v <= h) ? 1 : 0;
    out[i] = std::min(std::max(v, l), h);
  });

  NodePtr on = make_node(x->shape, std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, pass = std::move(pass)]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (pass[i]) gx[i] += g[i];
        },
        {x});
  }
  return Tensor(on);
}

Tensor clip(const Tensor& x, double lo, double hi) {
  return clip(x, Tensor::scalar(lo), Tensor::scalar(hi));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const NodePtr a = ta.node(), b = tb.node();
  if (!a || !b) throw std::invalid_argument("matmul: undefined tensor");
  if (a->shape.size() < 2 || b->shape.size() != 2)
    shape_error("matmul", a->shape, b->shape);
  const int m = a->shape[a->shape.size() - 2];
  const int k = a->shape[a->shape.size() - 1];
  if (b->shape[0] != k) shape_error("matmul", a->shape, b->shape);
  const int n = b->shape[1];
  long batch = 1;
  for (std::size_t i = 0; i + 2 < a->shape.size(); ++i) batch *= a->shape[i];

  Shape out_shape = a->shape;
  out_shape.back() = n;
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  for (long bt = 0; bt < batch; ++bt) {
    const double* A = pa + bt * m * k;
    double* O = out.data() + bt * m * n;
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        const double* B = pb + kk * n;
        double* Or = O + i * n;
        for (int j = 0; j < n; ++j) Or[j] += av * B[j];
      }
  }

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (a->requires_grad || b->requires_grad) {
    record(
        on,
        [a, b, on, batch, m, k, n]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          if (a->requires_grad) {
            auto& ga = grad_of(a);
            for (long bt = 0; bt < batch; ++bt) {
              const double* G = g.data() + bt * m * n;
              double* GA = ga.data() + bt * m * k;
              for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                  const double gv = G[i * n + j];
                  const double* B = b->value.data() + j;
                  for (int kk = 0; kk < k; ++kk)
                    GA[i * k + kk] += gv * B[kk * n];
                }
            }
          }
          if (b->requires_grad) {
            auto& gb = grad_of(b);
            for (long bt = 0; bt < batch; ++bt) {
              const double* A = a->value.data() + bt * m * k;
              const double* G = g.data() + bt * m * n;
              for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < m; ++i) {
                  const double av = A[i * k + kk];
                  const double* Gr = G + i * n;
                  double* GB = gb.data() + kk * n;
                  for (int j = 0; j < n; ++j) GB[j] += av * Gr[j];
                }
            }
          }
        },
        {a, b});
  }
  return Tensor(on);
}

Tensor bmm(const Tensor& ta, const Tensor& tb) {
  const NodePtr a = ta.node(), b = tb.node();
  if (!a || !b) throw std::invalid_argument("bmm: undefined tensor");
  if (a->shape.size() < 2 || a->shape.size() != b->shape.size())
    shape_error("bmm", a->shape, b->shape);
  for (std::size_t i = 0; i + 2 < a->shape.size(); ++i)
    if (a->shape[i] != b->shape[i]) shape_error("bmm", a->shape, b->shape);
  const int m = a->shape[a->shape.size() - 2];
  const int k = a->shape[a->shape.size() - 1];
  if (b->shape[b->shape.size() - 2] != k) shape_error("bmm", a->shape, b->shape);
  const int n = b->shape[b->shape.size() - 1];
  long batch = 1;
  for (std::size_t i = 0; i + 2 < a->shape.size(); ++i) batch *= a->shape[i];

  Shape out_shape = a->shape;
  out_shape.back() = n;
  std::vector<double> out(batch * m * n, 0.0);
  for (long bt = 0; bt < batch; ++bt) {
    const double* A = a->value.data() + bt * m * k;
    const double* B = b->value.data() + bt * k * n;
    double* O = out.data() + bt * m * n;
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        for (int j = 0; j < n; ++j) O[i * n + j] += av * B[kk * n + j];
      }
  }

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (a->requires_grad || b->requires_grad) {
    record(
        on,
        [a, b, on, batch, m, k, n]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          for (long bt = 0; bt < batch; ++bt) {
            const double* A = a->value.data() + bt * m * k;
            const double* B = b->value.data() + bt * k * n;
            const double* G = g.data() + bt * m * n;
            if (a->requires_grad) {
              double* GA = grad_of(a).data() + bt * m * k;
              for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                  const double gv = G[i * n + j];
                  for (int kk = 0; kk < k; ++kk)
                    GA[i * k + kk] += gv * B[kk * n + j];
                }
            }
            if (b->requires_grad) {
              double* GB = grad_of(b).data() + bt * k * n;
              for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < m; ++i) {
                  const double av = A[i * k + kk];
                  for (int j = 0; j < n; ++j)
                    GB[kk * n + j] += av * G[i * n + j];
                }
            }
          }
        },
        {a, b});
  }
  return Tensor(on);
}

namespace {

// O = A · X · B^T per batch; helper shared by lin2d forward and backward.
void lin2d_apply(const double* x, long batch, int h, int w, const double* A,
                 int p, const double* B, int q, double* out) {
  std::vector<double> tmp(static_cast<std::size_t>(h) * q);
  for (long bt = 0; bt < batch; ++bt) {
    const double* X = x + bt * h * w;
    double* O = out + bt * p * q;
    // tmp = X · B^T  (tmp[i, v] = sum_j X[i, j] B[v, j])
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (int i = 0; i < h; ++i)
      for (int v = 0; v < q; ++v) {
        double s = 0.0;
        const double* Xr = X + i * w;
        const double* Br = B + v * w;
        for (int j = 0; j < w; ++j) s += Xr[j] * Br[j];
        tmp[i * q + v] = s;
      }
    // O = A · tmp
    for (int u = 0; u < p; ++u)
      for (int v = 0; v < q; ++v) {
        double s = 0.0;
        for (int i = 0; i < h; ++i) s += A[u * h + i] * tmp[i * q + v];
        O[u * q + v] = s;
      }
  }
}

}  // namespace

Tensor lin2d(const Tensor& tx, const Tensor& ta, const Tensor& tb) {
  const NodePtr x = tx.node(), a = ta.node(), b = tb.node();
  if (!x || !a || !b) throw std::invalid_argument("lin2d: undefined tensor");
  if (a->requires_grad || b->requires_grad)
    throw std::invalid_argument("lin2d: transform matrices must be constant");
  if (x->shape.size() < 2 || a->shape.size() != 2 || b->shape.size() != 2)
    shape_error("lin2d", x->shape, a->shape);
  const int h = x->shape[x->shape.size() - 2];
  const int w = x->shape[x->shape.size() - 1];
  if (a->shape[1] != h) shape_error("lin2d (row transform)", a->shape, x->shape);
  if (b->shape[1] != w) shape_error("lin2d (col transform)", b->shape, x->shape);
  const int p = a->shape[0], q = b->shape[0];
  long batch = 1;
  for (std::size_t i = 0; i + 2 < x->shape.size(); ++i) batch *= x->shape[i];

  Shape out_shape = x->shape;
  out_shape[out_shape.size() - 2] = p;
  out_shape[out_shape.size() - 1] = q;
  std::vector<double> out(batch * p * q);
  lin2d_apply(x->value.data(), batch, h, w, a->value.data(), p,
              b->value.data(), q, out.data());

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, a, b, on, batch, h, w, p, q]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          // dX = A^T · G · B : reuse lin2d_apply with transposed matrices.
          std::vector<double> at(static_cast<std::size_t>(h) * p);
          for (int u = 0; u < p; ++u)
            for (int i = 0; i < h; ++i) at[i * p + u] = a->value[u * h + i];
          std::vector<double> bt_(static_cast<std::size_t>(w) * q);
          for (int v = 0; v < q; ++v)
            for (int j = 0; j < w; ++j) bt_[j * q + v] = b->value[v * w + j];
          std::vector<double> gx(x->value.size());
          lin2d_apply(g.data(), batch, p, q, at.data(), h, bt_.data(), w,
                      gx.data());
          auto& acc = grad_of(x);
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
        },
        {x});
  }
  return Tensor(on);
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& tx, const Tensor& tw, const Tensor& tbias,
              int stride, int padding) {
  const NodePtr x = tx.node(), w = tw.node();
  if (!x || !w) throw std::invalid_argument("conv2d: undefined tensor");
  if (x->shape.size() != 4 || w->shape.size() != 4)
    shape_error("conv2d", x->shape, w->shape);
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: invalid stride/padding");
  const int N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Co = w->shape[0], kh = w->shape[2], kw = w->shape[3];
  if (w->shape[1] != Ci) shape_error("conv2d (channels)", x->shape, w->shape);
  const NodePtr bias = tbias.defined() ? tbias.node() : nullptr;
  if (bias && (bias->shape.size() != 1 || bias->shape[0] != Co))
    shape_error("conv2d (bias)", bias->shape, w->shape);
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d: kernel larger than padded input");

  std::vector<double> out(static_cast<std::size_t>(N) * Co * Ho * Wo, 0.0);
  const double* px = x->value.data();
  const double* pw = w->value.data();
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      const double bv = bias ? bias->value[co] : 0.0;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double s = bv;
          for (int ci = 0; ci < Ci; ++ci) {
            const double* xi = px + ((n * Ci + ci) * H) * W;
            const double* wk = pw + ((co * Ci + ci) * kh) * kw;
            for (int u = 0; u < kh; ++u) {
              const int ih = oh * stride - padding + u;
              if (ih < 0 || ih >= H) continue;
              for (int v = 0; v < kw; ++v) {
                const int iw = ow * stride - padding + v;
                if (iw < 0 || iw >= W) continue;
                s += xi[ih * W + iw] * wk[u * kw + v];
              }
            }
          }
          out[((static_cast<std::size_t>(n) * Co + co) * Ho + oh) * Wo + ow] = s;
        }
    }

  NodePtr on = make_node({N, Co, Ho, Wo}, std::move(out));
  if (x->requires_grad || w->requires_grad || (bias && bias->requires_grad)) {
    auto backprop = [x, w, bias, on, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride,
                     padding]() {
      const auto& g = on->grad;
      if (g.empty()) return;
      double* gx = x->requires_grad ? grad_of(x).data() : nullptr;
      double* gw = w->requires_grad ? grad_of(w).data() : nullptr;
      double* gb = (bias && bias->requires_grad) ? grad_of(bias).data() : nullptr;
      const double* px = x->value.data();
      const double* pw = w->value.data();
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
          for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow) {
              const double gv =
                  g[((static_cast<std::size_t>(n) * Co + co) * Ho + oh) * Wo + ow];
              if (gv == 0.0) continue;
              if (gb) gb[co] += gv;
              for (int ci = 0; ci < Ci; ++ci) {
                const long xbase = ((static_cast<long>(n) * Ci + ci) * H) * W;
                const long wbase = ((static_cast<long>(co) * Ci + ci) * kh) * kw;
                for (int u = 0; u < kh; ++u) {
                  const int ih = oh * stride - padding + u;
                  if (ih < 0 || ih >= H) continue;
                  for (int v = 0; v < kw; ++v) {
                    const int iw = ow * stride - padding + v;
                    if (iw < 0 || iw >= W) continue;
                    if (gx) gx[xbase + ih * W + iw] += gv * pw[wbase + u * kw + v];
                    if (gw) gw[wbase + u * kw + v] += gv * px[xbase + ih * W + iw];
                  }
                }
              }
            }
    };
    if (bias)
      record(on, std::move(backprop), {x, w, bias});
    else
      record(on, std::move(backprop), {x, w});
  }
  return Tensor(on);
}

Tensor upsample_nearest2x(const Tensor& tx) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("upsample_nearest2x: undefined tensor");
  if (x->shape.size() != 4)
    throw std::invalid_argument("upsample_nearest2x: expected rank-4, got " +
                                shape_str(x->shape));
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  std::vector<double> out(static_cast<std::size_t>(N) * C * 4 * H * W);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double v = x->value[((static_cast<long>(n) * C + c) * H + i) * W + j];
          const long b = ((static_cast<long>(n) * C + c) * 2 * H + 2 * i) * 2 * W + 2 * j;
          out[b] = v;
          out[b + 1] = v;
          out[b + 2 * W] = v;
          out[b + 2 * W + 1] = v;
        }
  NodePtr on = make_node({N, C, 2 * H, 2 * W}, std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, N, C, H, W]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
              for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                  const long b =
                      ((static_cast<long>(n) * C + c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                  gx[((static_cast<long>(n) * C + c) * H + i) * W + j] +=
                      g[b] + g[b + 1] + g[b + 2 * W] + g[b + 2 * W + 1];
                }
        },
        {x});
  }
  return Tensor(on);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& tx, Shape shape) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("reshape: undefined tensor");
  if (shape_numel(shape) != shape_numel(x->shape))
    shape_error("reshape", x->shape, shape);
  NodePtr on = make_node(std::move(shape), x->value);
  if (x->requires_grad) {
    record(
        on,
        [x, on]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        },
        {x});
  }
  return Tensor(on);
}

namespace {

std::vector<long> natural_strides(const Shape& s) {
  std::vector<long> st(s.size());
  long acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace

Tensor permute(const Tensor& tx, const std::vector<int>& axes) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("permute: undefined tensor");
  const int r = static_cast<int>(x->shape.size());
  if (static_cast<int>(axes.size()) != r)
    throw std::invalid_argument("permute: axes rank mismatch for " +
                                shape_str(x->shape));
  std::vector<bool> seen(r, false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[a])
      throw std::invalid_argument("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x->shape[axes[i]];

  const auto in_st = natural_strides(x->shape);
  // stride to walk the input while iterating the output row-major
  std::vector<long> walk(r);
  for (int i = 0; i < r; ++i) walk[i] = in_st[axes[i]];

  std::vector<double> out(x->value.size());
  std::vector<long> zero(r, 0);
  bcast_iter(out_shape, walk, zero, [&](long i, long ix, long) {
    out[i] = x->value[ix];
  });

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, walk]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          std::vector<long> zero(on->shape.size(), 0);
          bcast_iter(on->shape, walk, zero, [&](long i, long ix, long) {
            gx[ix] += g[i];
          });
        },
        {x});
  }
  return Tensor(on);
}

Tensor narrow(const Tensor& tx, int axis, int start, int length) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("narrow: undefined tensor");
  const int r = static_cast<int>(x->shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("narrow: axis out of range for " +
                                shape_str(x->shape));
  if (start < 0 || length < 1 || start + length > x->shape[axis])
    throw std::invalid_argument("narrow: range [" + std::to_string(start) +
                                ", " + std::to_string(start + length) +
                                ") out of bounds for " + shape_str(x->shape));
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x->shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= x->shape[i];
  const int L = x->shape[axis];

  Shape out_shape = x->shape;
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  for (long o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * length * inner,
                x->value.data() + (o * L + start) * inner,
                sizeof(double) * length * inner);

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, outer, inner, L, start, length]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (long o = 0; o < outer; ++o) {
            const double* gs = g.data() + o * length * inner;
            double* gd = gx.data() + (o * L + start) * inner;
            for (long i = 0; i < length * inner; ++i) gd[i] += gs[i];
          }
        },
        {x});
  }
  return Tensor(on);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) shape_error("concat", parts[0].shape(), p.shape());
    for (int i = 0; i < r; ++i)
      if (i != axis && p.shape()[i] != out_shape[i])
        shape_error("concat", parts[0].shape(), p.shape());
    total += p.shape()[axis];
  }
  out_shape[axis] = total;

  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];

  std::vector<double> out(shape_numel(out_shape));
  long off = 0;
  std::vector<NodePtr> nodes;
  std::vector<int> lens;
  bool any_grad = false;
  for (const auto& p : parts) {
    const NodePtr n = p.node();
    const int len = n->shape[axis];
    for (long o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total + off) * inner,
                  n->value.data() + o * len * inner,
                  sizeof(double) * len * inner);
    off += len;
    nodes.push_back(n);
    lens.push_back(len);
    any_grad = any_grad || n->requires_grad;
  }

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (any_grad) {
    auto& t = tape();
    for (const auto& n : nodes) note_input(n);
    on->requires_grad = true;
    on->is_leaf = false;
    on->tape_epoch = t.epoch;
    touch(on);
    t.entries.push_back([nodes, lens, on, outer, inner, total]() {
      const auto& g = on->grad;
      if (g.empty()) return;
      long off = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        const int len = lens[pi];
        if (nodes[pi]->requires_grad) {
          auto& gx = grad_of(nodes[pi]);
          for (long o = 0; o < outer; ++o) {
            const double* gs = g.data() + (o * total + off) * inner;
            double* gd = gx.data() + o * len * inner;
            for (long i = 0; i < len * inner; ++i) gd[i] += gs[i];
          }
        }
        off += len;
      }
    });
  }
  return Tensor(on);
}

// ---------------------------------------------------------------------------
// Reductions and softmax
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& tx) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("sum: undefined tensor");
  double s = 0.0;
  for (double v : x->value) s += v;
  NodePtr on = make_node({}, {s});
  if (x->requires_grad) {
    record(
        on,
        [x, on]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (auto& v : gx) v += g[0];
        },
        {x});
  }
  return Tensor(on);
}

Tensor mean(const Tensor& tx) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("mean: undefined tensor");
  double s = 0.0;
  for (double v : x->value) s += v;
  const double inv = 1.0 / static_cast<double>(x->value.size());
  NodePtr on = make_node({}, {s * inv});
  if (x->requires_grad) {
    record(
        on,
        [x, on, inv]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          const double gv = g[0] * inv;
          for (auto& v : gx) v += gv;
        },
        {x});
  }
  return Tensor(on);
}

Tensor sum_squares(const Tensor& tx) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("sum_squares: undefined tensor");
  double s = 0.0;
  for (double v : x->value) s += v * v;
  NodePtr on = make_node({}, {s});
  if (x->requires_grad) {
    record(
        on,
        [x, on]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] += 2.0 * x->value[i] * g[0];
        },
        {x});
  }
  return Tensor(on);
}

Tensor sum_axis(const Tensor& tx, int axis) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("sum_axis: undefined tensor");
  const int r = static_cast<int>(x->shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("sum_axis: axis out of range for " +
                                shape_str(x->shape));
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x->shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= x->shape[i];
  const int L = x->shape[axis];

  Shape out_shape = x->shape;
  out_shape[axis] = 1;
  std::vector<double> out(outer * inner, 0.0);
  for (long o = 0; o < outer; ++o)
    for (int l = 0; l < L; ++l) {
      const double* src = x->value.data() + (o * L + l) * inner;
      double* dst = out.data() + o * inner;
      for (long i = 0; i < inner; ++i) dst[i] += src[i];
    }

  NodePtr on = make_node(std::move(out_shape), std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, outer, inner, L]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (long o = 0; o < outer; ++o)
            for (int l = 0; l < L; ++l) {
              const double* gs = g.data() + o * inner;
              double* gd = gx.data() + (o * L + l) * inner;
              for (long i = 0; i < inner; ++i) gd[i] += gs[i];
            }
        },
        {x});
  }
  return Tensor(on);
}

Tensor softmax(const Tensor& tx, int axis) {
  const NodePtr x = tx.node();
  if (!x) throw std::invalid_argument("softmax: undefined tensor");
  const int r = static_cast<int>(x->shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("softmax: axis out of range for " +
                                shape_str(x->shape));
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x->shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= x->shape[i];
  const int L = x->shape[axis];

  std::vector<double> out(x->value.size());
  for (long o = 0; o < outer; ++o)
    for (long in = 0; in < inner; ++in) {
      double mx = -1e300;
      for (int l = 0; l < L; ++l)
        mx = std::max(mx, x->value[(o * L + l) * inner + in]);
      double z = 0.0;
      for (int l = 0; l < L; ++l) {
        const double e = std::exp(x->value[(o * L + l) * inner + in] - mx);
        out[(o * L + l) * inner + in] = e;
        z += e;
      }
      for (int l = 0; l < L; ++l) out[(o * L + l) * inner + in] /= z;
    }

  NodePtr on = make_node(x->shape, std::move(out));
  if (x->requires_grad) {
    record(
        on,
        [x, on, outer, inner, L]() {
          const auto& g = on->grad;
          if (g.empty()) return;
          auto& gx = grad_of(x);
          for (long o = 0; o < outer; ++o)
            for (long in = 0; in < inner; ++in) {
              double dot = 0.0;
              for (int l = 0; l < L; ++l) {
                const long k = (o * L + l) * inner + in;
                dot += g[k] * on->value[k];
              }
              for (int l = 0; l < L; ++l) {
                const long k = (o * L + l) * inner + in;
                gx[k] += on->value[k] * (g[k] - dot);
              }
            }
        },
        {x});
  }
  return Tensor(on);
}

Tensor sinusoidal_embedding(double t, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_embedding: dim must be even, >= 2");
  std::vector<double> v(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
    v[2 * i] = std::sin(t * freq);
    v[2 * i + 1] = std::cos(t * freq);
  }
  return Tensor::from({dim}, std::move(v));
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

FdReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step <= 0");

  const Tensor base = x.detach();
  const double f0a = f(base).item();
  const double f0b = f(base).item();
  if (f0a != f0b)
    throw std::invalid_argument(
        "finite_diff_check: f is not deterministic (two evaluations differ)");
  tape_reset();  // drop anything f recorded against foreign parameters

  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  const Tensor loss = f(leaf);
  const GradMap gm = backward(loss);
  const Tensor analytic = gm.at(leaf);

  FdReport rep;
  const int n = base.numel();
  std::vector<double> vals = base.data();
  for (int i = 0; i < n; ++i) {
    const double orig = vals[i];
    vals[i] = orig + step;
    const double fp = f(Tensor::from(base.shape(), vals)).item();
    vals[i] = orig - step;
    const double fm = f(Tensor::from(base.shape(), vals)).item();
    vals[i] = orig;
    tape_reset();

    const double fwd = (fp - f0a) / step;
    const double bwd = (f0a - fm) / step;
    if (std::abs(fwd - bwd) >
        0.05 * std::max({1.0, std::abs(fwd), std::abs(bwd)})) {
      rep.excluded.push_back(i);  // local kink: clip boundary or branch point
      continue;
    }
    const double central = (fp - fm) / (2.0 * step);
    const double a = analytic.data()[i];
    const double rel = std::abs(a - central) /
                       std::max({std::abs(a), std::abs(central), 1e-8});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.compared;
  }
  return rep;
}

}  // namespace dscloak
