#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dscloak/attack.hpp"
#include "dscloak/commands.hpp"
#include "dscloak/io.hpp"
#include "dscloak/metrics.hpp"
#include "support.hpp"

using namespace dscloak;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

Tensor quantized_random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(3 * size * size);
  for (auto& e : v) e = rng.uniform_int(0, 256) / 255.0;
  return Tensor::from({3, size, size}, std::move(v));
}

io::RunConfig fixture_run_config(const std::string& out) {
  io::RunConfig cfg = io::RunConfig::from_defaults();
  cfg.set("model", support::fixture_model_path());
  cfg.set("timesteps", "100");
  cfg.set("out", out);
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("io");

TEST_CASE("png round-trips quantized images exactly") {
  support::TempDir tmp("png");
  const Tensor img = quantized_random_image(32, 3);
  const std::string path = tmp.path + "/img.png";
  io::write_png(path, img);
  const Tensor back = io::read_png(path);
  CHECK(support::max_abs_diff(back, img) == 0.0);

  // byte-determinism of the encoder
  const std::string path2 = tmp.path + "/img2.png";
  io::write_png(path2, img);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("png rejects non-png input") {
  support::TempDir tmp("npng");
  const std::string path = tmp.path + "/fake.png";
  std::ofstream(path) << "definitely not a png";
  CHECK_THROWS(io::read_png(path));
}

TEST_CASE("tensor file format round-trips bitwise and rejects corruption") {
  support::TempDir tmp("dst");
  Rng rng(5);
  const Tensor t = Tensor::randn({3, 7, 5}, rng);
  const std::string path = tmp.path + "/t.dst";
  io::write_tensor(path, t);
  const Tensor back = io::read_tensor(path);
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());  // bitwise

  std::string bytes = slurp(path);
  bytes[0] = 'X';
  std::ofstream(tmp.path + "/bad.dst", std::ios::binary) << bytes;
  CHECK_THROWS_WITH_AS(io::read_tensor(tmp.path + "/bad.dst"),
                       doctest::Contains("magic"), std::runtime_error);
}

TEST_CASE("csv quoting round-trips awkward fields") {
  support::TempDir tmp("csv");
  io::Table t;
  t.header = {"name", "note"};
  t.rows.push_back({"plain", "hello"});
  t.rows.push_back({"comma,inside", "quote\"inside"});
  t.rows.push_back({"new\nline", "both,\"x\""});
  const std::string path = tmp.path + "/t.csv";
  io::write_csv(path, t);
  const io::Table back = io::read_csv(path);
  CHECK(back.header == t.header);
  REQUIRE(back.rows.size() == t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) CHECK(back.rows[i] == t.rows[i]);
}

TEST_CASE("clip directories round-trip through per-frame pngs") {
  support::TempDir tmp("clip");
  Rng rng(7);
  std::vector<double> v(4 * 3 * 16 * 16);
  for (auto& e : v) e = rng.uniform_int(0, 256) / 255.0;
  const Tensor frames = Tensor::from({4, 3, 16, 16}, std::move(v));
  io::write_clip(tmp.path + "/clip", frames, false);
  const Tensor back = io::read_clip(tmp.path + "/clip");
  CHECK(support::max_abs_diff(back, frames) == 0.0);
}

TEST_CASE("config: defaults match the published constants") {
  const io::RunConfig cfg = io::RunConfig::from_defaults();
  CHECK(cfg.get_int("iters") == 200);
  CHECK(cfg.get_real("budget-rgb") == doctest::Approx(16.0 / 255.0).epsilon(1e-15));
  CHECK(cfg.get_real("budget-lab") == doctest::Approx(16.0 / 255.0).epsilon(1e-15));
  CHECK(cfg.get_real("mask-fraction") == 0.25);
  CHECK(cfg.get_real("lr") == 0.01);
  CHECK(cfg.get_real("pgd-step") == doctest::Approx(1.0 / 255.0).epsilon(1e-15));
  CHECK(cfg.get("space") == "lab+freq");
  CHECK(cfg.get("transforms") == "jpeg:40,blur:7:1.5,noise:0.05");
}

TEST_CASE("config: unknown keys and malformed values are rejected") {
  support::TempDir tmp("cfg");
  const std::string path = tmp.path + "/a.cfg";
  std::ofstream(path) << "# comment\niters = 50\nnonsense-key = 1\n";
  CHECK_THROWS_WITH_AS(io::RunConfig::load(path),
                       doctest::Contains("nonsense-key"), std::invalid_argument);

  std::ofstream(tmp.path + "/b.cfg") << "iters = 50\nbudget-rgb = 8/255\n";
  const io::RunConfig cfg = io::RunConfig::load(tmp.path + "/b.cfg");
  CHECK(cfg.get_int("iters") == 50);
  CHECK(cfg.get_real("budget-rgb") == doctest::Approx(8.0 / 255.0));

  std::ofstream(tmp.path + "/c.cfg") << "iters fifty\n";
  CHECK_THROWS_AS(io::RunConfig::load(tmp.path + "/c.cfg"), std::invalid_argument);
  io::RunConfig d = io::RunConfig::from_defaults();
  d.set("iters", "x");
  CHECK_THROWS_AS(d.get_int("iters"), std::invalid_argument);
}

TEST_CASE("cmd_train writes checkpoint, curve and manifest deterministically") {
  support::TempDir tmp("train");
  io::RunConfig cfg = io::RunConfig::from_defaults();
  cfg.set("image-size", "16");
  cfg.set("encoder-layers", "3");
  cfg.set("latent-channels", "2");
  cfg.set("hidden-channels", "8");
  cfg.set("blocks", "6");
  cfg.set("timesteps", "20");
  cfg.set("time-embed-dim", "8");
  cfg.set("train-steps", "30");
  cfg.set("train-clips", "6");
  cfg.set("out", tmp.path + "/run1");
  REQUIRE(commands::cmd_train(cfg) == 0);
  CHECK(io::file_exists(tmp.path + "/run1/model.ckpt"));
  CHECK(io::file_exists(tmp.path + "/run1/train_loss.csv"));
  CHECK(io::file_exists(tmp.path + "/run1/manifest.json"));

  // same seed twice -> identical checkpoint checksum
  cfg.set("out", tmp.path + "/run2");
  REQUIRE(commands::cmd_train(cfg) == 0);
  CHECK(io::crc32_file(tmp.path + "/run1/model.ckpt") ==
        io::crc32_file(tmp.path + "/run2/model.ckpt"));

  // refuses to overwrite without the flag
  cfg.set("out", tmp.path + "/run1");
  CHECK_THROWS_WITH_AS(commands::cmd_train(cfg), doctest::Contains("overwrite"),
                       std::runtime_error);

  SUBCASE("resumed training continues the loss curve smoothly") {
    io::RunConfig longer = cfg;
    longer.set("out", tmp.path + "/long");
    longer.set("train-steps", "120");
    REQUIRE(commands::cmd_train(longer) == 0);
    const auto full = io::read_csv(tmp.path + "/long/train_loss.csv");

    io::RunConfig resumed = cfg;
    resumed.set("out", tmp.path + "/resumed");
    resumed.set("model", tmp.path + "/run1/model.ckpt");  // 30 steps so far
    resumed.set("train-steps", "120");
    resumed.set("resume", "true");
    REQUIRE(commands::cmd_train(resumed) == 0);
    const auto cont = io::read_csv(tmp.path + "/resumed/train_loss.csv");

    // per-step draws are keyed by absolute step, so the resumed trace must
    // bitwise match the long run's tail: no discontinuity at all
    REQUIRE(cont.rows.size() == 90);
    for (std::size_t i = 0; i < cont.rows.size(); ++i) {
      CHECK(cont.rows[i][0] == full.rows[30 + i][0]);
      CHECK(cont.rows[i][1] == full.rows[30 + i][1]);
    }
    CHECK(io::crc32_file(tmp.path + "/long/model.ckpt") ==
          io::crc32_file(tmp.path + "/resumed/model.ckpt"));
  }
}

TEST_CASE("cmd_protect writes artifacts that reproduce the rendering") {
  support::TempDir tmp("protect");
  const VictimModel model = support::fixture_model();
  const auto imgs = support::fixture_images(2);
  const std::string in1 = tmp.path + "/alpha.png";
  const std::string in2 = tmp.path + "/beta.png";
  io::write_png(in1, imgs[0]);
  io::write_png(in2, imgs[1]);

  io::RunConfig cfg = fixture_run_config(tmp.path + "/out");
  cfg.set("iters", "6");
  REQUIRE(commands::cmd_protect(cfg, {in1, in2}) == 0);

  SUBCASE("png dimensions match the input") {
    const Tensor prot = io::read_png(tmp.path + "/out/alpha_protected.png");
    CHECK(prot.shape() == imgs[0].shape());
  }

  SUBCASE("quantized png still respects the widened budget") {
    const Tensor x = io::read_png(in1);
    const Tensor prot = io::read_png(tmp.path + "/out/alpha_protected.png");
    CHECK(support::max_abs_diff(prot, x) <= 16.0 / 255.0 + 1.0 / 255.0);
  }

  SUBCASE("raw perturbations re-render the pre-quantization image") {
    PerturbationState st = PerturbationState::zeros(32, 32);
    st.delta_rgb = io::read_tensor(tmp.path + "/out/alpha_delta_rgb.dst");
    st.delta_a = io::read_tensor(tmp.path + "/out/alpha_delta_a.dst");
    st.delta_b = io::read_tensor(tmp.path + "/out/alpha_delta_b.dst");
    st.delta_freq = io::read_tensor(tmp.path + "/out/alpha_delta_freq.dst");

    AttackConfig acfg = commands::attack_config_from(cfg, model.config());
    const Tensor x = io::read_png(in1);
    const Tensor rerendered = render_adversarial(x, st, acfg);

    // reference: rerun the attack at the recorded per-image seed
    acfg.seed = Rng::mix(cfg.get_u64("seed"), 0x9107EC7 + 0);
    const AttackResult res = dsp_optimize(x, 0, model, acfg);
    CHECK(support::max_abs_diff(rerendered, res.x_xi) < 1e-9);
  }

  SUBCASE("per-image failures are skipped with exit code 1") {
    const std::string bad = tmp.path + "/bad.png";
    std::ofstream(bad) << "not a png";
    io::RunConfig cfg2 = fixture_run_config(tmp.path + "/out2");
    cfg2.set("iters", "2");
    CHECK(commands::cmd_protect(cfg2, {bad, in1}) == 1);
    CHECK(io::file_exists(tmp.path + "/out2/alpha_protected.png"));
  }

  SUBCASE("re-running the manifest's config reproduces outputs byte-for-byte") {
    io::RunConfig cfg3 = fixture_run_config(tmp.path + "/out3");
    cfg3.set("iters", "6");
    REQUIRE(commands::cmd_protect(cfg3, {in1}) == 0);
    io::RunConfig cfg4 = fixture_run_config(tmp.path + "/out4");
    cfg4.set("iters", "6");
    REQUIRE(commands::cmd_protect(cfg4, {in1}) == 0);
    CHECK(slurp(tmp.path + "/out3/alpha_protected.png") ==
          slurp(tmp.path + "/out4/alpha_protected.png"));
    CHECK(slurp(tmp.path + "/out3/alpha_trace.csv") ==
          slurp(tmp.path + "/out4/alpha_trace.csv"));
    CHECK(slurp(tmp.path + "/out3/alpha_delta_freq.dst") ==
          slurp(tmp.path + "/out4/alpha_delta_freq.dst"));
  }

  SUBCASE("multi-job run matches the single-job outputs") {
    io::RunConfig cfg5 = fixture_run_config(tmp.path + "/out5");
    cfg5.set("iters", "6");
    cfg5.set("jobs", "2");
    REQUIRE(commands::cmd_protect(cfg5, {in1, in2}) == 0);
    CHECK(slurp(tmp.path + "/out5/alpha_protected.png") ==
          slurp(tmp.path + "/out/alpha_protected.png"));
    CHECK(slurp(tmp.path + "/out5/beta_protected.png") ==
          slurp(tmp.path + "/out/beta_protected.png"));
  }
}

TEST_CASE("cmd_evaluate: zero deltas on identical inputs, deterministic tables") {
  support::TempDir tmp("eval");
  const auto imgs = support::fixture_images(1);
  const std::string img = tmp.path + "/img.png";
  io::write_png(img, imgs[0]);

  io::RunConfig cfg = fixture_run_config(tmp.path + "/out");
  cfg.set("eval-seeds", "2");
  REQUIRE(commands::cmd_evaluate(cfg, img, img) == 0);

  const io::Table report = io::read_csv(tmp.path + "/out/report.csv");
  // row count = images x (transforms + 1)
  CHECK(report.rows.size() == 1 * (3 + 1));
  // identical inputs: the baseline row has zero deltas and cap psnr
  CHECK(std::stod(report.rows[0][2]) == metrics::kPsnrCap);
  CHECK(std::stod(report.rows[0][6]) == 0.0);
  CHECK(std::stod(report.rows[0][7]) == 0.0);
  CHECK(std::stod(report.rows[0][8]) == 0.0);

  io::RunConfig cfg2 = fixture_run_config(tmp.path + "/out2");
  cfg2.set("eval-seeds", "2");
  REQUIRE(commands::cmd_evaluate(cfg2, img, img) == 0);
  CHECK(slurp(tmp.path + "/out/report.csv") == slurp(tmp.path + "/out2/report.csv"));
  CHECK(slurp(tmp.path + "/out/degradation.csv") ==
        slurp(tmp.path + "/out2/degradation.csv"));
  CHECK(slurp(tmp.path + "/out/summary.json") ==
        slurp(tmp.path + "/out2/summary.json"));

  // a generated sample pair is stored as per-frame png directories
  CHECK(io::file_exists(tmp.path + "/out/clips/clean/index.csv"));
  CHECK(io::read_clip(tmp.path + "/out/clips/clean").dim(0) == 4);

  SUBCASE("directory pairing matches files by name") {
    const auto imgs2 = support::fixture_images(2);
    fs::create_directories(tmp.path + "/clean");
    fs::create_directories(tmp.path + "/prot");
    io::write_png(tmp.path + "/clean/a.png", imgs2[0]);
    io::write_png(tmp.path + "/clean/b.png", imgs2[1]);
    io::write_png(tmp.path + "/prot/a.png", imgs2[0]);
    io::write_png(tmp.path + "/prot/b.png", imgs2[1]);
    io::RunConfig dcfg = fixture_run_config(tmp.path + "/outdir");
    dcfg.set("eval-seeds", "1");
    dcfg.set("transforms", "noise:0.05");
    REQUIRE(commands::cmd_evaluate(dcfg, tmp.path + "/clean", tmp.path + "/prot") == 0);
    const io::Table rep = io::read_csv(tmp.path + "/outdir/report.csv");
    CHECK(rep.rows.size() == 2 * (1 + 1));  // images x (transforms + 1)
  }
}

TEST_CASE("cmd_ablate reproduces the published table structures") {
  support::TempDir tmp("ablate");
  io::RunConfig cfg = fixture_run_config(tmp.path + "/out");
  cfg.set("ablate-iters", "2");
  cfg.set("ablate-gen-seeds", "1");
  cfg.set("eval-seeds", "1");
  REQUIRE(commands::cmd_ablate(cfg) == 0);

  const io::Table spaces = io::read_csv(tmp.path + "/out/spaces.csv");
  CHECK(spaces.rows.size() == 7);
  CHECK(spaces.rows[0][0] == "rgb");
  CHECK(spaces.rows[3][0] == "lab+freq");

  const io::Table budget = io::read_csv(tmp.path + "/out/lab_budget.csv");
  REQUIRE(budget.rows.size() == 3);
  CHECK(budget.rows[0][0] == "8/255");
  CHECK(budget.rows[1][0] == "16/255");
  CHECK(budget.rows[2][0] == "32/255");

  const io::Table loss = io::read_csv(tmp.path + "/out/loss_components.csv");
  REQUIRE(loss.rows.size() == 9);
  for (int i = 0; i < 9; ++i)
    CHECK(loss.rows[i][0] == "A" + std::to_string(i + 1));

  const io::Table irc = io::read_csv(tmp.path + "/out/irc_layers.csv");
  REQUIRE(irc.rows.size() == 5);
  CHECK(irc.rows[0][0] == "full");
  CHECK(irc.rows[1][0] == "last3");

  const io::Table dsp = io::read_csv(tmp.path + "/out/dsp_vs_rgb.csv");
  REQUIRE(dsp.rows.size() == 2);
  CHECK(dsp.rows[0][0] == "dsp");
  CHECK(dsp.rows[1][0] == "rgb");

  // every row's configuration is recorded in the manifest
  const std::string manifest = slurp(tmp.path + "/out/manifest.json");
  CHECK(manifest.find("\"tables\"") != std::string::npos);
  CHECK(manifest.find("\"loss_components\"") != std::string::npos);
  CHECK(manifest.find("\"A9\"") != std::string::npos);
}

TEST_CASE("cmd_visualize_layers writes one grid per block, deterministically") {
  support::TempDir tmp("viz");
  const auto imgs = support::fixture_images(1);
  const std::string img = tmp.path + "/img.png";
  io::write_png(img, imgs[0]);

  io::RunConfig cfg = fixture_run_config(tmp.path + "/out");
  REQUIRE(commands::cmd_visualize_layers(cfg, img) == 0);
  for (int b = 1; b <= 8; ++b) {
    char name[32];
    std::snprintf(name, sizeof name, "block_%02d.png", b);
    CHECK(io::file_exists(tmp.path + "/out/" + name));
  }
  const io::Table meta = io::read_csv(tmp.path + "/out/pca_components.csv");
  CHECK(meta.rows.size() == 8 * 3);

  io::RunConfig cfg2 = fixture_run_config(tmp.path + "/out2");
  REQUIRE(commands::cmd_visualize_layers(cfg2, img) == 0);
  CHECK(slurp(tmp.path + "/out/block_01.png") ==
        slurp(tmp.path + "/out2/block_01.png"));
}

TEST_CASE("sign-flipped pca components render as the inverted channel") {
  // min-max rendering maps -p to 1 - rendered(p) when the range is nonzero
  Rng rng(3);
  const Tensor proj = Tensor::randn({8, 8}, rng);
  auto render = [](const Tensor& p) {
    double lo = p.data()[0], hi = p.data()[0];
    for (double v : p.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::vector<double> out;
    for (double v : p.data()) out.push_back((v - lo) / (hi - lo));
    return out;
  };
  const auto a = render(proj);
  const auto b = render(neg(proj));
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(b[i] == doctest::Approx(1.0 - a[i]).epsilon(1e-12));
}

TEST_SUITE_END();
