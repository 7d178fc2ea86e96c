#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here must stay independent of the implementation paths it checks: the Lab
// reference is scalar code written straight from the conversion formulas, the
// DCT oracle is the O(n^4) double sum, the PCA oracle is power iteration.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "dscloak/io.hpp"
#include "dscloak/model.hpp"
#include "dscloak/tensor.hpp"

namespace support {

inline dscloak::ModelConfig fixture_config() {
  dscloak::ModelConfig mc;
  mc.image_size = 32;
  mc.frames = 4;
  mc.encoder_layers = 4;
  mc.latent_channels = 4;
  mc.hidden_channels = 16;
  mc.blocks = 8;
  mc.num_classes = 3;
  mc.timesteps = 100;
  mc.time_embed_dim = 32;
  return mc;
}

inline constexpr int kFixtureTrainSteps = 800;
inline constexpr int kFixtureTrainClips = 64;
inline constexpr std::uint64_t kFixtureSeed = 2024;
inline constexpr std::uint64_t kFixtureDataSeed = 77;

inline std::string fixture_dir() {
#ifdef DSCLOAK_FIXTURE_DIR
  return DSCLOAK_FIXTURE_DIR;
#else
  return "fixtures";
#endif
}

inline std::string fixture_model_path() { return fixture_dir() + "/model.ckpt"; }
inline std::string fixture_trace_path() { return fixture_dir() + "/train_loss.csv"; }

/// Trains the shared fixture model if the cached checkpoint is missing.
/// Deterministic, so concurrent writers produce identical bytes; the write is
/// a temp-file rename to avoid torn reads.
inline dscloak::VictimModel fixture_model() {
  namespace fs = std::filesystem;
  const std::string path = fixture_model_path();
  if (!fs::exists(path)) {
    fs::create_directories(fixture_dir());
    const auto dataset = dscloak::make_synthetic_dataset(
        kFixtureTrainClips, kFixtureDataSeed, fixture_config().frames,
        fixture_config().image_size, fixture_config().image_size);
    auto tr = dscloak::train_toy(fixture_config(), dataset, kFixtureTrainSteps,
                                 kFixtureSeed);
    dscloak::io::Table t;
    t.header = {"step", "loss"};
    for (std::size_t i = 0; i < tr.loss_trace.size(); ++i)
      t.rows.push_back({std::to_string(i), dscloak::io::fmt_double(tr.loss_trace[i])});
    const std::string suffix = ".tmp." + std::to_string(::getpid());
    dscloak::io::write_csv(fixture_trace_path() + suffix, t);
    fs::rename(fixture_trace_path() + suffix, fixture_trace_path());
    tr.model.save(path + suffix);
    fs::rename(path + suffix, path);
  }
  return dscloak::VictimModel::load(path);
}

/// The fixture training-loss trace (trains the fixture when missing).
inline std::vector<double> fixture_train_trace() {
  if (!std::filesystem::exists(fixture_trace_path())) fixture_model();
  const auto t = dscloak::io::read_csv(fixture_trace_path());
  std::vector<double> out;
  for (const auto& row : t.rows) out.push_back(std::stod(row[1]));
  return out;
}

/// Deterministic 32x32 test images: first frames of synthetic clips.
inline std::vector<dscloak::Tensor> fixture_images(int n,
                                                   std::uint64_t seed = 411) {
  const auto cfg = fixture_config();
  const auto clips = dscloak::make_synthetic_dataset(n, seed, cfg.frames,
                                                     cfg.image_size,
                                                     cfg.image_size);
  std::vector<dscloak::Tensor> out;
  for (const auto& c : clips)
    out.push_back(dscloak::reshape(dscloak::narrow(c.frames, 0, 0, 1),
                                   {3, cfg.image_size, cfg.image_size}));
  return out;
}

// ---------------------------------------------------------------------------
// Independent Lab reference (scalar, straight from the formulas).
// ---------------------------------------------------------------------------

inline void ref_srgb_to_lab(double r, double g, double b, double* L, double* A,
                            double* B) {
  auto lin = [](double v) {
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
  };
  const double rl = lin(r), gl = lin(g), bl = lin(b);
  const double X = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
  const double Y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
  const double Z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
  auto f = [](double t) {
    const double d3 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
    return t > d3 ? std::cbrt(t)
                  : (1.0 / 3.0) * (29.0 / 6.0) * (29.0 / 6.0) * t + 4.0 / 29.0;
  };
  const double fx = f(X / 0.95047), fy = f(Y / 1.0), fz = f(Z / 1.08883);
  *L = 116.0 * fy - 16.0;
  *A = 500.0 * (fx - fy);
  *B = 200.0 * (fy - fz);
}

// ---------------------------------------------------------------------------
// Brute-force DCT-II double sum (per channel), exactly the textbook formula.
// ---------------------------------------------------------------------------

inline std::vector<double> ref_dct2(const std::vector<double>& x, int c, int h,
                                    int w) {
  const double pi = 3.14159265358979323846;
  std::vector<double> out(x.size(), 0.0);
  for (int k = 0; k < c; ++k)
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v) {
        const double cu = u == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
        const double cv = v == 0 ? std::sqrt(1.0 / w) : std::sqrt(2.0 / w);
        double s = 0.0;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            s += x[(static_cast<std::size_t>(k) * h + i) * w + j] *
                 std::cos(pi * (0.5 + i) * u / h) *
                 std::cos(pi * (0.5 + j) * v / w);
        out[(static_cast<std::size_t>(k) * h + u) * w + v] = cu * cv * s;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Power-iteration-with-deflation eigensolver for the PCA oracle.
// ---------------------------------------------------------------------------

inline void ref_top_eigen(std::vector<double> a, int n, int k,
                          std::vector<double>* evals,
                          std::vector<std::vector<double>>* evecs) {
  evals->clear();
  evecs->clear();
  for (int comp = 0; comp < k; ++comp) {
    std::vector<double> v(n, 0.0);
    v[comp % n] = 1.0;
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
      std::vector<double> w(n, 0.0);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) w[i] += a[i * n + j] * v[j];
      double norm = 0.0;
      for (double e : w) norm += e * e;
      norm = std::sqrt(norm);
      if (norm < 1e-300) break;
      for (int i = 0; i < n; ++i) w[i] /= norm;
      double diff = 0.0;
      for (int i = 0; i < n; ++i) diff += std::abs(w[i] - v[i]);
      double diff_neg = 0.0;
      for (int i = 0; i < n; ++i) diff_neg += std::abs(w[i] + v[i]);
      v = w;
      lambda = norm;
      if (std::min(diff, diff_neg) < 1e-14) break;
    }
    evals->push_back(lambda);
    evecs->push_back(v);
    for (int i = 0; i < n; ++i)  // deflate
      for (int j = 0; j < n; ++j) a[i * n + j] -= lambda * v[i] * v[j];
  }
}

// Sliding-window SSIM written independently of the metrics module: plain
// loops over every window, Gaussian weights computed in place.
inline double ref_ssim(const dscloak::Tensor& a, const dscloak::Tensor& b) {
  const int h = a.dim(1), w = a.dim(2);
  const int win = 11;
  double g[11];
  double gsum = 0.0;
  for (int i = 0; i < win; ++i) {
    const double d = i - 5;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    gsum += g[i];
  }
  for (double& e : g) e /= gsum;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  long count = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i + win <= h; ++i)
      for (int j = 0; j + win <= w; ++j) {
        double mua = 0, mub = 0, saa = 0, sbb = 0, sab = 0;
        for (int u = 0; u < win; ++u)
          for (int v = 0; v < win; ++v) {
            const double wt = g[u] * g[v];
            const double pa = a.at({ch, i + u, j + v});
            const double pb = b.at({ch, i + u, j + v});
            mua += wt * pa;
            mub += wt * pb;
            saa += wt * pa * pa;
            sbb += wt * pb * pb;
            sab += wt * pa * pb;
          }
        const double vara = saa - mua * mua;
        const double varb = sbb - mub * mub;
        const double cov = sab - mua * mub;
        total += ((2 * mua * mub + c1) * (2 * cov + c2)) /
                 ((mua * mua + mub * mub + c1) * (vara + varb + c2));
        ++count;
      }
  return total / count;
}

inline double max_abs_diff(const dscloak::Tensor& a, const dscloak::Tensor& b) {
  const auto& va = a.data();
  const auto& vb = b.data();
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i)
    m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) {
    path = (std::filesystem::temp_directory_path() /
            ("dscloak_test_" + name + "_" + std::to_string(::getpid())))
               .string();
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace support
