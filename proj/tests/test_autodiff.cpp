#include <cmath>

#include "doctest.h"
#include "dscloak/attack.hpp"
#include "dscloak/losses.hpp"
#include "dscloak/model.hpp"
#include "dscloak/tensor.hpp"
#include "fd_suite.hpp"
#include "support.hpp"

using namespace dscloak;

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("sum of squares has the analytic gradient") {
  Tensor x = Tensor::from({3}, {1, 2, 3});
  x.set_requires_grad(true);
  const GradMap g = backward(sum(mul(x, x)));
  const auto& gx = g.at(x).data();
  CHECK(gx[0] == doctest::Approx(2.0));
  CHECK(gx[1] == doctest::Approx(4.0));
  CHECK(gx[2] == doctest::Approx(6.0));
}

TEST_CASE("clip subgradient is 1 inside and at boundaries, 0 outside") {
  Tensor x = Tensor::from({4}, {0.5, 1.5, 0.0, 1.0});
  x.set_requires_grad(true);
  const GradMap g = backward(sum(clip(x, 0.0, 1.0)));
  const auto& gx = g.at(x).data();
  CHECK(gx[0] == 1.0);  // interior
  CHECK(gx[1] == 0.0);  // outside
  CHECK(gx[2] == 1.0);  // boundary counts as interior
  CHECK(gx[3] == 1.0);
}

TEST_CASE("two-layer conv net gradient matches finite differences") {
  Rng rng(99);
  const Tensor w1 = Tensor::randn({4, 2, 3, 3}, rng);
  const Tensor b1 = Tensor::randn({4}, rng);
  const Tensor w2 = Tensor::randn({2, 4, 3, 3}, rng);
  const Tensor target = Tensor::randn({1, 2, 5, 5}, rng);
  auto f = [&](const Tensor& x) {
    const Tensor h = silu(conv2d(x, w1, b1, 1, 1));
    const Tensor y = conv2d(h, w2, Tensor(), 1, 1);
    const Tensor d = sub(y, target);
    return div(sum_squares(d), Tensor::scalar(d.numel()));
  };
  const Tensor x0 = Tensor::randn({1, 2, 5, 5}, rng);
  const auto rep = finite_diff_check(f, x0, 1e-5);
  CHECK(rep.compared == x0.numel());
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("backward of a plain sum is all ones") {
  Tensor d = Tensor::zeros({4, 4});
  d.set_requires_grad(true);
  const GradMap g = backward(sum(d));
  for (double v : g.at(d).data()) CHECK(v == 1.0);
}

TEST_CASE("zero-weighted loss yields zero gradients") {
  Rng rng(3);
  Tensor d = Tensor::randn({5}, rng);
  d.set_requires_grad(true);
  const Tensor loss = mul(Tensor::scalar(0.0), sum(mul(d, d)));
  const GradMap g = backward(loss);
  for (double v : g.at(d).data()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and double invocation") {
  Rng rng(4);
  Tensor x = Tensor::randn({3}, rng);
  x.set_requires_grad(true);
  const Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);

  const Tensor loss = sum(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);  // tape consumed
}

TEST_CASE("gradient of a sum of losses is the sum of gradients") {
  Rng rng(5);
  const Tensor a = Tensor::randn({6}, rng);
  const Tensor b = Tensor::randn({6}, rng);
  Tensor x = Tensor::randn({6}, rng);
  x.set_requires_grad(true);

  const GradMap g1 = backward(sum(mul(x, a)));
  const GradMap g2 = backward(sum(mul(x, b)));
  const GradMap g12 = backward(add(sum(mul(x, a)), sum(mul(x, b))));
  const auto& v1 = g1.at(x).data();
  const auto& v2 = g2.at(x).data();
  const auto& v12 = g12.at(x).data();
  for (int i = 0; i < 6; ++i) CHECK(v12[i] == v1[i] + v2[i]);
}

TEST_CASE("no gradient flows to tensors without requires_grad") {
  Rng rng(6);
  Tensor a = Tensor::randn({4}, rng);
  a.set_requires_grad(true);
  const Tensor frozen = Tensor::randn({4}, rng);
  const GradMap g = backward(sum(mul(a, frozen)));
  CHECK(g.contains(a));
  CHECK_FALSE(g.contains(frozen));
  CHECK(g.size() == 1);
}

TEST_CASE("shape mismatches are rejected with both shapes named") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4});
  try {
    add(a, b);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4)") != std::string::npos);
  }
}

TEST_CASE("finite_diff_check on a smooth quadratic is near-exact") {
  Rng rng(7);
  const Tensor x0 = Tensor::randn({5}, rng);
  const auto rep =
      finite_diff_check([](const Tensor& x) { return sum_squares(x); }, x0, 1e-5);
  CHECK(rep.max_rel_error < 1e-8);
  CHECK(rep.excluded.empty());
}

TEST_CASE("finite_diff_check excludes clip boundary elements and reports them") {
  const Tensor x0 = Tensor::from({3}, {0.5, 1.0, 0.2});  // element 1 on the boundary
  const auto rep = finite_diff_check(
      [](const Tensor& x) { return sum(clip(x, 0.0, 1.0)); }, x0, 1e-5);
  REQUIRE(rep.excluded.size() == 1);
  CHECK(rep.excluded[0] == 1);
  CHECK(rep.compared == 2);
  CHECK(rep.max_rel_error < 1e-8);
}

TEST_CASE("finite_diff_check rejects a nondeterministic function") {
  int calls = 0;
  auto f = [&calls](const Tensor& x) {
    ++calls;
    return sum(mul(x, Tensor::scalar(static_cast<double>(calls))));
  };
  const Tensor x0 = Tensor::from({2}, {1.0, 2.0});
  CHECK_THROWS_AS(finite_diff_check(f, x0, 1e-5), std::invalid_argument);
}

TEST_CASE("every primitive matches central differences (sampled seeds)") {
  for (const auto& r : fd_suite::run(2)) {
    INFO(r.op << " seed " << r.seed);
    CHECK(r.max_rel_error < 1e-4);
  }
}

// Lab-add -> RGB -> DCT-add -> IDCT -> clip -> toy model -> total objective,
// differentiated end-to-end against central differences on an 8x8 image.
TEST_CASE("composed render+objective gradient matches finite differences") {
  ModelConfig mc = support::fixture_config();
  mc.image_size = 8;
  mc.timesteps = 50;
  const VictimModel model = VictimModel::init(mc, 5);

  const auto clips = make_synthetic_dataset(1, 31, mc.frames, 8, 8);
  const Tensor x =
      reshape(narrow(clips[0].frames, 0, 0, 1), {3, 8, 8}).detach();
  const Tensor ref = build_reference_clip(x, mc.frames, 11);
  const Tensor z0 = model.encode_frames(ref).detach();

  AttackConfig cfg;
  cfg.space = Space::LabFreq;
  const LayerSelection sel = LayerSelection::defaults(mc);

  const int hw = 64;
  auto f = [&](const Tensor& packed) {
    PerturbationState st = PerturbationState::zeros(8, 8);
    st.delta_a = reshape(narrow(packed, 0, 0, hw), {8, 8});
    st.delta_b = reshape(narrow(packed, 0, hw, hw), {8, 8});
    st.delta_freq = reshape(narrow(packed, 0, 2 * hw, 3 * hw), {3, 8, 8});
    const Tensor x_xi = render_adversarial(x, st, cfg);
    Rng rng(42);  // fixed draw: deterministic objective
    return loss_total(model, x_xi, x, z0, 0, AttackMode{}, LossWeights{},
                      sel, rng)
        .total;
  };

  Rng rng(8);
  const Tensor packed = mul(Tensor::randn({5 * hw}, rng), Tensor::scalar(2.0));
  const auto rep = finite_diff_check(f, packed, 1e-4);
  INFO("compared " << rep.compared << ", excluded " << rep.excluded.size());
  CHECK(rep.compared > 0);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_SUITE_END();
