#include "dscloak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dscloak/rng.hpp"

namespace dscloak::metrics {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_image(const Tensor& x, const char* op) {
  if (x.rank() != 3 || x.dim(0) != 3)
    throw std::invalid_argument(std::string(op) + ": expected (3, H, W), got " +
                                shape_str(x.shape()));
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " differ");
}

// ITU-T T.81 Annex K luminance quantization table.
constexpr int kLumaQuant[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

void dct8(const double in[64], double out[64]) {
  static double basis[8][8];
  static bool ready = false;
  if (!ready) {
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int i = 0; i < 8; ++i)
        basis[u][i] = cu * std::cos(kPi * (0.5 + i) * u / 8.0);
    }
    ready = true;
  }
  double tmp[64];
  for (int i = 0; i < 8; ++i)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int j = 0; j < 8; ++j) s += in[i * 8 + j] * basis[v][j];
      tmp[i * 8 + v] = s;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int i = 0; i < 8; ++i) s += basis[u][i] * tmp[i * 8 + v];
      out[u * 8 + v] = s;
    }
}

void idct8(const double in[64], double out[64]) {
  static double basis[8][8];
  static bool ready = false;
  if (!ready) {
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int i = 0; i < 8; ++i)
        basis[u][i] = cu * std::cos(kPi * (0.5 + i) * u / 8.0);
    }
    ready = true;
  }
  double tmp[64];
  for (int u = 0; u < 8; ++u)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += in[u * 8 + v] * basis[v][j];
      tmp[u * 8 + j] = s;
    }
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += basis[u][i] * tmp[u * 8 + j];
      out[i * 8 + j] = s;
    }
}

std::vector<double> gaussian_kernel(int kernel, double sigma) {
  std::vector<double> k(kernel);
  const int half = kernel / 2;
  double sum = 0.0;
  for (int i = 0; i < kernel; ++i) {
    const double d = i - half;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

int reflect(int i, int n) {
  // reflect-101-style without repeating the edge sample twice
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom == 0.0) return 0.0;
  return dot / denom;
}

std::vector<double> pooled_encoder_feature(const Tensor& img,
                                           const VictimModel& model) {
  const Tensor z = model.encode_with_taps(img.detach()).latent;
  const int c = z.dim(0), s = z.dim(1) * z.dim(2);
  std::vector<double> out(c, 0.0);
  const auto& v = z.data();
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < s; ++j) out[i] += v[i * s + j];
    out[i] /= s;
  }
  return out;
}

Tensor frame_of(const Tensor& clip_frames, int f) {
  const int c = clip_frames.dim(1), h = clip_frames.dim(2),
            w = clip_frames.dim(3);
  return reshape(narrow(clip_frames, 0, f, 1), {c, h, w});
}

}  // namespace

std::string TransformSpec::name() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::JpegLike:
      os << "jpeg:" << quality;
      break;
    case Kind::GaussianBlur:
      os << "blur:" << kernel << ":" << sigma;
      break;
    case Kind::GaussianNoise:
      os << "noise:" << scale;
      break;
  }
  return os.str();
}

void TransformSpec::validate() const {
  switch (kind) {
    case Kind::JpegLike:
      if (quality < 1.0 || quality > 100.0)
        throw std::invalid_argument("jpeg quality " + std::to_string(quality) +
                                    " outside [1, 100]");
      break;
    case Kind::GaussianBlur:
      if (kernel < 3 || kernel % 2 == 0)
        throw std::invalid_argument("blur kernel must be odd and >= 3");
      if (sigma <= 0) throw std::invalid_argument("blur sigma must be positive");
      break;
    case Kind::GaussianNoise:
      if (scale < 0) throw std::invalid_argument("noise scale must be >= 0");
      break;
  }
}

TransformSpec TransformSpec::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : text) {
    if (ch == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);

  TransformSpec t;
  if (parts[0] == "jpeg") {
    t.kind = Kind::JpegLike;
    if (parts.size() > 1) t.quality = std::stod(parts[1]);
  } else if (parts[0] == "blur") {
    t.kind = Kind::GaussianBlur;
    if (parts.size() > 1) t.kernel = std::stoi(parts[1]);
    if (parts.size() > 2) t.sigma = std::stod(parts[2]);
  } else if (parts[0] == "noise") {
    t.kind = Kind::GaussianNoise;
    if (parts.size() > 1) t.scale = std::stod(parts[1]);
    if (parts.size() > 2) t.seed = std::stoull(parts[2]);
  } else {
    throw std::invalid_argument("unknown transform '" + text +
                                "' (expected jpeg:Q, blur:K:S or noise:S)");
  }
  t.validate();
  return t;
}

Tensor TransformSpec::apply(const Tensor& x) const {
  switch (kind) {
    case Kind::JpegLike:
      return jpeg_like(x, quality);
    case Kind::GaussianBlur:
      return gaussian_blur(x, kernel, sigma);
    case Kind::GaussianNoise:
      return gaussian_noise(x, scale, seed);
  }
  throw std::logic_error("unreachable");
}

Tensor jpeg_like(const Tensor& x, double quality) {
  check_image(x, "jpeg_like");
  if (quality < 1.0 || quality > 100.0)
    throw std::invalid_argument("jpeg_like: quality " + std::to_string(quality) +
                                " outside [1, 100]");
  const int h = x.dim(1), w = x.dim(2);
  const int hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;

  // Annex-K style quality scaling of the base table.
  const double scalef =
      quality < 50.0 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  double qtab[64];
  for (int i = 0; i < 64; ++i) {
    double q = std::floor((kLumaQuant[i] * scalef + 50.0) / 100.0);
    qtab[i] = std::min(255.0, std::max(1.0, q));
  }

  const auto& src = x.data();
  std::vector<double> out(src.size());
  std::vector<double> plane(static_cast<std::size_t>(hp) * wp);
  for (int c = 0; c < 3; ++c) {
    // replicate-pad to a block multiple, level-shift to [-128, 127]
    for (int i = 0; i < hp; ++i)
      for (int j = 0; j < wp; ++j) {
        const int si = std::min(i, h - 1), sj = std::min(j, w - 1);
        plane[static_cast<std::size_t>(i) * wp + j] =
            src[(static_cast<std::size_t>(c) * h + si) * w + sj] * 255.0 - 128.0;
      }
    double block[64], coef[64], rec[64];
    for (int bi = 0; bi < hp; bi += 8)
      for (int bj = 0; bj < wp; bj += 8) {
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j)
            block[i * 8 + j] = plane[static_cast<std::size_t>(bi + i) * wp + bj + j];
        dct8(block, coef);
        for (int i = 0; i < 64; ++i)
          coef[i] = std::round(coef[i] / qtab[i]) * qtab[i];
        idct8(coef, rec);
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j)
            plane[static_cast<std::size_t>(bi + i) * wp + bj + j] = rec[i * 8 + j];
      }
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = (plane[static_cast<std::size_t>(i) * wp + j] + 128.0) / 255.0;
        out[(static_cast<std::size_t>(c) * h + i) * w + j] =
            std::min(1.0, std::max(0.0, v));
      }
  }
  return Tensor::from(x.shape(), std::move(out));
}

Tensor gaussian_blur(const Tensor& x, int kernel, double sigma) {
  check_image(x, "gaussian_blur");
  if (kernel < 3 || kernel % 2 == 0)
    throw std::invalid_argument("gaussian_blur: kernel must be odd and >= 3, got " +
                                std::to_string(kernel));
  if (sigma <= 0) throw std::invalid_argument("gaussian_blur: sigma must be positive");
  const int h = x.dim(1), w = x.dim(2);
  const auto k = gaussian_kernel(kernel, sigma);
  const int half = kernel / 2;

  const auto& src = x.data();
  std::vector<double> tmp(src.size()), out(src.size());
  for (int c = 0; c < 3; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0.0;
        for (int u = 0; u < kernel; ++u)
          s += k[u] * src[base + static_cast<std::size_t>(i) * w +
                          reflect(j + u - half, w)];
        tmp[base + static_cast<std::size_t>(i) * w + j] = s;
      }
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0.0;
        for (int u = 0; u < kernel; ++u)
          s += k[u] * tmp[base + static_cast<std::size_t>(reflect(i + u - half, h)) * w + j];
        out[base + static_cast<std::size_t>(i) * w + j] = s;
      }
  }
  return Tensor::from(x.shape(), std::move(out));
}

Tensor gaussian_noise(const Tensor& x, double scale, std::uint64_t seed) {
  check_image(x, "gaussian_noise");
  if (scale < 0) throw std::invalid_argument("gaussian_noise: scale must be >= 0");
  Rng rng(Rng::mix(seed, 0x9015E));
  const auto& src = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = src[i] + scale * rng.normal();
    out[i] = std::min(1.0, std::max(0.0, v));
  }
  return Tensor::from(x.shape(), std::move(out));
}

double psnr(const Tensor& a, const Tensor& b) {
  check_same(a, b, "psnr");
  const auto& va = a.data();
  const auto& vb = b.data();
  double mse = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = va[i] - vb[i];
    mse += d * d;
  }
  mse /= static_cast<double>(va.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  check_image(a, "ssim");
  check_same(a, b, "ssim");
  const int h = a.dim(1), w = a.dim(2);
  constexpr int kWin = 11;
  if (h < kWin || w < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  const auto win = gaussian_kernel(kWin, 1.5);
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;

  const auto& va = a.data();
  const auto& vb = b.data();
  double total = 0.0;
  long count = 0;
  for (int c = 0; c < 3; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i + kWin <= h; ++i)
      for (int j = 0; j + kWin <= w; ++j) {
        double mua = 0, mub = 0;
        for (int u = 0; u < kWin; ++u)
          for (int v = 0; v < kWin; ++v) {
            const double wgt = win[u] * win[v];
            mua += wgt * va[base + static_cast<std::size_t>(i + u) * w + j + v];
            mub += wgt * vb[base + static_cast<std::size_t>(i + u) * w + j + v];
          }
        double vara = 0, varb = 0, cov = 0;
        for (int u = 0; u < kWin; ++u)
          for (int v = 0; v < kWin; ++v) {
            const double wgt = win[u] * win[v];
            const double da = va[base + static_cast<std::size_t>(i + u) * w + j + v] - mua;
            const double db = vb[base + static_cast<std::size_t>(i + u) * w + j + v] - mub;
            vara += wgt * da * da;
            varb += wgt * db * db;
            cov += wgt * da * db;
          }
        const double num = (2 * mua * mub + kC1) * (2 * cov + kC2);
        const double den = (mua * mua + mub * mub + kC1) * (vara + varb + kC2);
        total += num / den;
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

double feature_cosine(const Tensor& a, const Tensor& b,
                      const VictimModel& extractor) {
  return cosine(pooled_encoder_feature(a, extractor),
                pooled_encoder_feature(b, extractor));
}

double cosine_similarity(const std::vector<double>& a,
                         const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity: length mismatch");
  return cosine(a, b);
}

DegradationReport degradation_score(const VictimModel& model, const Tensor& x,
                                    const Tensor& x_xi, int y,
                                    const std::vector<std::uint64_t>& seeds) {
  check_image(x, "degradation_score");
  check_same(x, x_xi, "degradation_score");

  const auto ref_feat = pooled_encoder_feature(x.detach(), model);
  // recon is judged against the clip's own conditioning image so the delta
  // isolates generation quality; identity is always against the clean image
  auto clip_metrics = [&](const SyntheticClip& clip, const Tensor& cond,
                          double* recon, double* consistency, double* identity) {
    const int F = clip.frames.dim(0);
    *recon = psnr(frame_of(clip.frames, 0), cond.detach());
    std::vector<std::vector<double>> feats;
    feats.reserve(F);
    for (int f = 0; f < F; ++f)
      feats.push_back(pooled_encoder_feature(frame_of(clip.frames, f), model));
    double cons = 0.0, ident = 0.0;
    for (int f = 0; f + 1 < F; ++f) cons += cosine(feats[f], feats[f + 1]);
    for (int f = 0; f < F; ++f) ident += cosine(feats[f], ref_feat);
    *consistency = cons / (F - 1);
    *identity = ident / F;
  };

  DegradationReport rep;
  for (std::uint64_t seed : seeds) {
    DegradationRow row;
    row.seed = seed;
    const SyntheticClip clean = model.generate(x.detach(), y, seed);
    const SyntheticClip prot = model.generate(x_xi.detach(), y, seed);
    clip_metrics(clean, x, &row.recon_clean, &row.consistency_clean,
                 &row.identity_clean);
    clip_metrics(prot, x_xi, &row.recon_protected, &row.consistency_protected,
                 &row.identity_protected);

    row.recon_delta = row.recon_protected - row.recon_clean;
    row.consistency_delta = row.consistency_protected - row.consistency_clean;
    row.identity_delta = row.identity_protected - row.identity_clean;
    rep.mean_recon_delta += row.recon_delta;
    rep.mean_consistency_delta += row.consistency_delta;
    rep.mean_identity_delta += row.identity_delta;
    rep.rows.push_back(row);
  }
  if (!rep.rows.empty()) {
    rep.mean_recon_delta /= static_cast<double>(rep.rows.size());
    rep.mean_consistency_delta /= static_cast<double>(rep.rows.size());
    rep.mean_identity_delta /= static_cast<double>(rep.rows.size());
  }
  return rep;
}

EvaluationReport robustness_report(const VictimModel& model, const Tensor& x,
                                   const Tensor& x_xi,
                                   const std::vector<TransformSpec>& transforms,
                                   int y,
                                   const std::vector<std::uint64_t>& seeds) {
  EvaluationReport rep;
  auto make_row = [&](const std::string& name, const Tensor& img) {
    EvaluationRow row;
    row.transform = name;
    row.psnr_vs_clean = psnr(x, img);
    row.ssim_vs_clean = ssim(x, img);
    const auto& va = x.data();
    const auto& vb = img.data();
    for (std::size_t i = 0; i < va.size(); ++i)
      row.linf_vs_clean = std::max(row.linf_vs_clean, std::abs(va[i] - vb[i]));
    row.feature_cosine_vs_clean = feature_cosine(x, img, model);
    row.degradation = degradation_score(model, x, img, y, seeds);
    return row;
  };

  rep.rows.push_back(make_row("none", x_xi));
  for (const auto& t : transforms) {
    t.validate();
    rep.rows.push_back(make_row(t.name(), t.apply(x_xi)));
  }
  return rep;
}

}  // namespace dscloak::metrics
