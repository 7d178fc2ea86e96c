#include <benchmark/benchmark.h>

#include "dscloak/attack.hpp"
#include "dscloak/colorspace.hpp"
#include "dscloak/frequency.hpp"
#include "dscloak/losses.hpp"
#include "dscloak/model.hpp"
#include "dscloak/tensor.hpp"

namespace {

using namespace dscloak;

Tensor random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(3 * size * size);
  for (auto& e : v) e = rng.uniform();
  return Tensor::from({3, size, size}, std::move(v));
}

ModelConfig bench_config() {
  ModelConfig mc;
  mc.timesteps = 100;
  return mc;  // defaults otherwise: 32x32, 8 blocks, hidden 16
}

void BM_Dct2RoundTrip(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  const Tensor x = Tensor::randn({3, n, n}, rng);
  for (auto _ : state) {
    Tensor y = freq::idct2(freq::dct2(x));
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetComplexityN(n);
}
BENCHMARK(BM_Dct2RoundTrip)->Arg(16)->Arg(32)->Arg(64)->Complexity();

void BM_LabRoundTrip(benchmark::State& state) {
  const Tensor x = random_image(static_cast<int>(state.range(0)), 2);
  for (auto _ : state) {
    Tensor y = color::lab_to_rgb(color::rgb_to_lab(x));
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_LabRoundTrip)->Arg(32)->Arg(128);

void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(3);
  const Tensor x = Tensor::randn({4, 16, 8, 8}, rng);
  const Tensor w = Tensor::randn({16, 16, 3, 3}, rng);
  const Tensor b = Tensor::randn({16}, rng);
  for (auto _ : state) {
    Tensor y = conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_DenoiserForward(benchmark::State& state) {
  const VictimModel m = VictimModel::init(bench_config(), 4);
  Rng rng(5);
  const Tensor z_t = Tensor::randn({4, 4, 8, 8}, rng);
  const Tensor cond = Tensor::randn({4, 8, 8}, rng);
  for (auto _ : state) {
    auto r = m.denoise_with_taps(z_t, cond, 50, 0);
    benchmark::DoNotOptimize(r.eps.data().data());
  }
}
BENCHMARK(BM_DenoiserForward);

void BM_RenderAdversarial(benchmark::State& state) {
  const Tensor x = random_image(32, 6);
  PerturbationState st = PerturbationState::zeros(32, 32);
  Rng rng(7);
  st.delta_a = Tensor::randn({32, 32}, rng);
  st.delta_b = Tensor::randn({32, 32}, rng);
  st.delta_freq = Tensor::randn({3, 32, 32}, rng);
  AttackConfig cfg;
  for (auto _ : state) {
    Tensor y = render_adversarial(x, st, cfg);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_RenderAdversarial);

// One full optimization iteration: render, total loss, backward, update.
void BM_AttackIteration(benchmark::State& state) {
  ModelConfig mc = bench_config();
  const auto data = make_synthetic_dataset(8, 1, mc.frames, 32, 32);
  const VictimModel m = train_toy(mc, data, 40, 9).model;
  const Tensor x = random_image(32, 8);
  AttackConfig cfg;
  cfg.iters = 1;
  for (auto _ : state) {
    AttackResult r = dsp_optimize(x, 0, m, cfg);
    benchmark::DoNotOptimize(r.x_xi.data().data());
  }
}
BENCHMARK(BM_AttackIteration)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
