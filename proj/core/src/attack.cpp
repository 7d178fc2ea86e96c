#include "dscloak/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dscloak/adamw.hpp"
#include "dscloak/colorspace.hpp"
#include "dscloak/frequency.hpp"
#include "dscloak/metrics.hpp"

namespace dscloak {

namespace {

struct SpaceInfo {
  Space space;
  const char* name;
  bool rgb, lab, freq;
};

constexpr SpaceInfo kSpaces[] = {
    {Space::Rgb, "rgb", true, false, false},
    {Space::Lab, "lab", false, true, false},
    {Space::Freq, "freq", false, false, true},
    {Space::LabFreq, "lab+freq", false, true, true},
    {Space::RgbLab, "rgb+lab", true, true, false},
    {Space::RgbFreq, "rgb+freq", true, false, true},
    {Space::RgbLabFreq, "rgb+lab+freq", true, true, true},
};

const SpaceInfo& info(Space s) {
  for (const auto& i : kSpaces)
    if (i.space == s) return i;
  throw std::logic_error("unknown space");
}

void check_input_image(const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != 3)
    throw std::invalid_argument("attack: expected image (3, H, W), got " +
                                shape_str(x.shape()));
  for (double v : x.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("attack: image values must lie in [0, 1]");
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto& va = a.data();
  const auto& vb = b.data();
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i)
    m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

void clamp_leaf(Tensor& t, double bound) {
  for (auto& v : t.leaf_data()) v = std::min(std::max(v, -bound), bound);
}

}  // namespace

std::string space_name(Space s) { return info(s).name; }

Space space_from_name(const std::string& name) {
  for (const auto& i : kSpaces)
    if (name == i.name) return i.space;
  throw std::invalid_argument("unknown perturbation space '" + name +
                              "' (expected one of rgb, lab, freq, lab+freq, "
                              "rgb+lab, rgb+freq, rgb+lab+freq)");
}

bool space_has_rgb(Space s) { return info(s).rgb; }
bool space_has_lab(Space s) { return info(s).lab; }
bool space_has_freq(Space s) { return info(s).freq; }

const std::vector<Space>& all_spaces() {
  static const std::vector<Space> v = {
      Space::Rgb,     Space::Lab,     Space::Freq,      Space::LabFreq,
      Space::RgbLab,  Space::RgbFreq, Space::RgbLabFreq};
  return v;
}

void AttackConfig::validate() const {
  if (budget_rgb < 0 || budget_lab < 0)
    throw std::invalid_argument("AttackConfig: budgets must be nonnegative");
  if (!(mask_fraction > 0.0 && mask_fraction <= 1.0))
    throw std::invalid_argument("AttackConfig: mask fraction outside (0, 1]");
  if (iters < 1) throw std::invalid_argument("AttackConfig: iters must be >= 1");
  if (lr < 0) throw std::invalid_argument("AttackConfig: negative learning rate");
  if (pgd_step <= 0) throw std::invalid_argument("AttackConfig: pgd step <= 0");
  if (samples_per_iter < 1)
    throw std::invalid_argument("AttackConfig: samples_per_iter must be >= 1");
  weights.validate();
}

PerturbationState PerturbationState::zeros(int h, int w) {
  PerturbationState s;
  s.delta_rgb = Tensor::zeros({3, h, w});
  s.delta_a = Tensor::zeros({h, w});
  s.delta_b = Tensor::zeros({h, w});
  s.delta_freq = Tensor::zeros({3, h, w});
  return s;
}

PerturbationState PerturbationState::deep_copy() const {
  PerturbationState s;
  s.delta_rgb = delta_rgb.detach();
  s.delta_a = delta_a.detach();
  s.delta_b = delta_b.detach();
  s.delta_freq = delta_freq.detach();
  s.iter = iter;
  return s;
}

RenderStages render_adversarial_stages(const Tensor& x,
                                       const PerturbationState& s,
                                       const AttackConfig& cfg) {
  check_input_image(x);
  const int h = x.dim(1), w = x.dim(2);
  Tensor base = x;

  if (space_has_rgb(cfg.space))
    base = add(base, clip(s.delta_rgb, -cfg.budget_rgb, cfg.budget_rgb));

  if (space_has_lab(cfg.space)) {
    // the rgb stage can push pixels outside [0, 1], which rgb_to_lab rejects
    if (space_has_rgb(cfg.space)) base = clip(base, 0.0, 1.0);
    const Tensor lab = color::rgb_to_lab(base);
    const double bound = cfg.budget_lab * color::lab_delta_scale();
    const Tensor lstar = narrow(lab, 0, 0, 1);
    const Tensor astar =
        add(narrow(lab, 0, 1, 1), reshape(clip(s.delta_a, -bound, bound), {1, h, w}));
    const Tensor bstar =
        add(narrow(lab, 0, 2, 1), reshape(clip(s.delta_b, -bound, bound), {1, h, w}));
    base = color::lab_to_rgb(concat({lstar, astar, bstar}, 0));
  }

  if (space_has_freq(cfg.space)) {
    const Tensor mask = freq::make_lowfreq_mask(h, w, cfg.mask_fraction);
    base = freq::apply_masked_delta(base, s.delta_freq, mask, cfg.literal_mask);
  }

  RenderStages out;
  out.after_spaces = base;
  const Tensor boxed = clip(base, x - cfg.budget_rgb, x + cfg.budget_rgb);
  out.final = clip(boxed, 0.0, 1.0);
  return out;
}

Tensor render_adversarial(const Tensor& x, const PerturbationState& s,
                          const AttackConfig& cfg) {
  return render_adversarial_stages(x, s, cfg).final;
}

Tensor build_reference_clip(const Tensor& x, int frames, std::uint64_t seed) {
  check_input_image(x);
  static const int kVel[4] = {-2, -1, 1, 2};
  Rng rng(Rng::mix(seed, 0xC11F));
  const int vx = kVel[rng.uniform_int(0, 4)];
  const int vy = kVel[rng.uniform_int(0, 4)];
  const int h = x.dim(1), w = x.dim(2);
  const auto& src = x.data();
  std::vector<double> out(static_cast<std::size_t>(frames) * 3 * h * w);
  for (int f = 0; f < frames; ++f)
    for (int c = 0; c < 3; ++c)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
          const int sy = std::clamp(yy - f * vy, 0, h - 1);
          const int sx = std::clamp(xx - f * vx, 0, w - 1);
          out[((static_cast<std::size_t>(f) * 3 + c) * h + yy) * w + xx] =
              src[(static_cast<std::size_t>(c) * h + sy) * w + sx];
        }
  return Tensor::from({frames, 3, h, w}, std::move(out));
}

namespace {

struct AttackSetup {
  Tensor ref_latents;
  LayerSelection sel;
  int y = 0;
};

AttackSetup prepare(const Tensor& x, int y, const VictimModel& model,
                    const AttackConfig& cfg, const Tensor* reference_clip) {
  cfg.validate();
  check_input_image(x);
  if (!model.trained())
    throw std::invalid_argument("attack: the victim model must be trained");
  if (x.dim(1) != model.config().image_size ||
      x.dim(2) != model.config().image_size)
    throw std::invalid_argument("attack: image shape " + shape_str(x.shape()) +
                                " does not match the model input size " +
                                std::to_string(model.config().image_size));
  cfg.mode.validate(x);

  // attack losses see the first min(F, 4) frames only
  const int F = std::min(model.config().frames, 4);
  Tensor clip_frames;
  if (reference_clip) {
    if (reference_clip->rank() != 4 || reference_clip->dim(0) < F)
      throw std::invalid_argument("attack: reference clip must provide at least " +
                                  std::to_string(F) + " frames");
    clip_frames = narrow(*reference_clip, 0, 0, F).detach();
  } else {
    clip_frames = build_reference_clip(x, F, cfg.seed);
  }

  AttackSetup s;
  s.ref_latents = model.encode_frames(clip_frames).detach();
  s.sel = cfg.layers ? *cfg.layers : LayerSelection::defaults(model.config());
  s.sel.validate(model.config());
  s.y = y;
  return s;
}

}  // namespace

AttackResult dsp_optimize(const Tensor& x, int y, const VictimModel& model,
                          const AttackConfig& cfg, const Tensor* reference_clip) {
  AttackSetup setup = prepare(x, y, model, cfg, reference_clip);
  const int h = x.dim(1), w = x.dim(2);

  PerturbationState state = PerturbationState::zeros(h, w);
  AdamW opt(cfg.lr);
  if (space_has_rgb(cfg.space)) {
    state.delta_rgb.set_requires_grad(true);
    opt.add_param(state.delta_rgb);
  }
  if (space_has_lab(cfg.space)) {
    state.delta_a.set_requires_grad(true);
    state.delta_b.set_requires_grad(true);
    opt.add_param(state.delta_a);
    opt.add_param(state.delta_b);
  }
  if (space_has_freq(cfg.space)) {
    state.delta_freq.set_requires_grad(true);
    opt.add_param(state.delta_freq);
  }

  Rng rng(Rng::mix(cfg.seed, 0xA77AC4));
  const double lab_bound = cfg.budget_lab * color::lab_delta_scale();

  AttackResult res;
  PerturbationState best = state.deep_copy();
  double best_total = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= cfg.iters; ++it) {
    const Tensor x_xi = render_adversarial(x, state, cfg);
    const TotalLoss tl =
        loss_total(model, x_xi, x, setup.ref_latents, setup.y, cfg.mode,
                   cfg.weights, setup.sel, rng, cfg.samples_per_iter);
    const double total = tl.total.item();

    IterRecord rec;
    rec.iter = it;
    rec.dm = tl.dm;
    rec.irc = tl.irc;
    rec.ira = tl.ira;
    rec.aux = tl.aux;
    rec.total = total;
    rec.linf = max_abs_diff(x_xi, x);
    res.trace.push_back(rec);

    if (!std::isfinite(total)) {
      res.aborted = true;
      res.diagnostic = "non-finite total loss at iteration " + std::to_string(it);
      tape_reset();
      break;
    }
    if (total < best_total) {
      best_total = total;
      best = state.deep_copy();
    }

    opt.step(backward(tl.total));
    if (space_has_lab(cfg.space)) {
      clamp_leaf(state.delta_a, lab_bound);
      clamp_leaf(state.delta_b, lab_bound);
    }
    if (space_has_rgb(cfg.space)) clamp_leaf(state.delta_rgb, cfg.budget_rgb);
    state.iter = it;
  }

  best.iter = state.iter;
  res.state = best;
  res.x_xi = render_adversarial(x, best, cfg).detach();
  return res;
}

AttackResult pgd_rgb(const Tensor& x, int y, const VictimModel& model,
                     const AttackConfig& cfg, const Tensor* reference_clip,
                     const std::function<Tensor(const Tensor&)>& objective) {
  AttackSetup setup = prepare(x, y, model, cfg, reference_clip);

  Tensor cur = x.detach();
  cur.set_requires_grad(true);
  Rng rng(Rng::mix(cfg.seed, 0xA77AC4));

  AttackResult res;
  for (int it = 1; it <= cfg.iters; ++it) {
    Tensor obj;  // maximized
    IterRecord rec;
    rec.iter = it;
    if (objective) {
      obj = objective(cur);
      rec.total = -obj.item();
    } else {
      const TotalLoss tl =
          loss_total(model, cur, x, setup.ref_latents, setup.y, cfg.mode,
                     cfg.weights, setup.sel, rng, cfg.samples_per_iter);
      obj = neg(tl.total);
      rec.dm = tl.dm;
      rec.irc = tl.irc;
      rec.ira = tl.ira;
      rec.aux = tl.aux;
      rec.total = tl.total.item();
    }
    rec.linf = max_abs_diff(cur, x);
    res.trace.push_back(rec);

    if (!std::isfinite(rec.total)) {
      res.aborted = true;
      res.diagnostic = "non-finite objective at iteration " + std::to_string(it);
      tape_reset();
      break;
    }

    const GradMap grads = backward(obj);
    const auto& g = grads.at(cur).data();
    auto& v = cur.leaf_data();
    const auto& xv = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double sgn = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
      double nv = v[i] + cfg.pgd_step * sgn;
      nv = std::min(std::max(nv, xv[i] - cfg.budget_rgb), xv[i] + cfg.budget_rgb);
      v[i] = std::min(std::max(nv, 0.0), 1.0);
    }
  }

  res.x_xi = cur.detach();
  res.state = PerturbationState::zeros(x.dim(1), x.dim(2));
  // expose the effective rgb delta for inspection
  {
    auto& d = res.state.delta_rgb.leaf_data();
    const auto& cv = res.x_xi.data();
    const auto& xv = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = cv[i] - xv[i];
  }
  res.state.iter = cfg.iters;
  return res;
}

std::vector<SpaceAblationRow> ablate_spaces(const Tensor& x, int y,
                                            const VictimModel& model,
                                            const AttackConfig& base_cfg) {
  AttackConfig cfg = base_cfg;
  cfg.weights = LossWeights{0.0, 0.0, 0.0, 1.0};  // vanilla denoising loss only

  const int F = model.config().frames;
  const Tensor clip_frames = build_reference_clip(x, F, cfg.seed);
  const Tensor ref_latents = model.encode_frames(clip_frames).detach();
  const double dm_clean = loss_dm_mean(model, x, ref_latents, y, 16, cfg.seed);

  std::vector<SpaceAblationRow> rows;
  for (Space s : all_spaces()) {
    cfg.space = s;
    const AttackResult r = s == Space::Rgb
                               ? pgd_rgb(x, y, model, cfg, &clip_frames)
                               : dsp_optimize(x, y, model, cfg, &clip_frames);
    SpaceAblationRow row;
    row.space = s;
    row.x_xi = r.x_xi;
    row.linf = max_abs_diff(r.x_xi, x);
    row.psnr = metrics::psnr(x, r.x_xi);
    row.ssim = metrics::ssim(x, r.x_xi);
    row.feature_cosine = metrics::feature_cosine(x, r.x_xi, model);
    row.dm_clean = dm_clean;
    row.dm_protected = loss_dm_mean(model, r.x_xi, ref_latents, y, 16, cfg.seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dscloak
