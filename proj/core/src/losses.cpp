#include "dscloak/losses.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace dscloak {

void LossWeights::validate() const {
  if (irc < 0 || ira < 0 || aux < 0 || dm < 0)
    throw std::invalid_argument("LossWeights: weights must be nonnegative");
}

LayerSelection LayerSelection::defaults(const ModelConfig& cfg) {
  LayerSelection s;
  s.irc_early = 3;
  for (int j = cfg.blocks - 2; j <= cfg.blocks; ++j) s.irc_deep.push_back(j);
  for (int m = 1; m <= cfg.blocks; ++m) s.ira_denoiser_layers.push_back(m);
  for (int n = 1; n <= cfg.encoder_layers; ++n) s.ira_encoder_layers.push_back(n);
  return s;
}

void LayerSelection::validate(const ModelConfig& cfg) const {
  auto in_range = [](int v, int hi) { return v >= 1 && v <= hi; };
  if (!in_range(irc_early, cfg.blocks))
    throw std::invalid_argument("LayerSelection: early block " +
                                std::to_string(irc_early) + " out of range");
  if (irc_deep.empty())
    throw std::invalid_argument("LayerSelection: deep block set is empty");
  for (int j : irc_deep) {
    if (!in_range(j, cfg.blocks))
      throw std::invalid_argument("LayerSelection: deep block " +
                                  std::to_string(j) + " out of range");
    if (j == irc_early)
      throw std::invalid_argument(
          "LayerSelection: early block must not appear in the deep set");
  }
  for (int m : ira_denoiser_layers)
    if (!in_range(m, cfg.blocks))
      throw std::invalid_argument("LayerSelection: anchor denoiser layer " +
                                  std::to_string(m) + " out of range");
  for (int n : ira_encoder_layers)
    if (!in_range(n, cfg.encoder_layers))
      throw std::invalid_argument("LayerSelection: anchor encoder layer " +
                                  std::to_string(n) + " out of range");
}

void AttackMode::validate(const Tensor& x) const {
  if (!targeted) return;
  if (!target.defined())
    throw std::invalid_argument("AttackMode: targeted attack needs a target image");
  if (target.shape() != x.shape())
    throw std::invalid_argument("AttackMode: target shape " +
                                shape_str(target.shape()) +
                                " does not match image shape " +
                                shape_str(x.shape()));
}

namespace {

// Average-pools (leading..., H, W) by an integer factor per spatial axis.
Tensor avg_pool_to(const Tensor& src, int th, int tw) {
  const int r = src.rank();
  const int h = src.dim(r - 2), w = src.dim(r - 1);
  if (h % th != 0 || w % tw != 0)
    throw std::invalid_argument(
        "normalized_sq_distance: spatial sizes " + shape_str(src.shape()) +
        " are not an integer multiple of the target " + std::to_string(th) +
        "x" + std::to_string(tw));
  const int fh = h / th, fw = w / tw;
  int lead = 1;
  for (int i = 0; i + 2 < r; ++i) lead *= src.dim(i);
  Tensor t = reshape(src, {lead, th, fh, tw, fw});
  t = permute(t, {0, 1, 3, 2, 4});            // (lead, th, tw, fh, fw)
  t = reshape(t, {lead * th * tw, fh * fw});
  t = sum_axis(t, 1) * (1.0 / (fh * fw));
  Shape out;
  for (int i = 0; i + 2 < r; ++i) out.push_back(src.dim(i));
  out.push_back(th);
  out.push_back(tw);
  return reshape(t, std::move(out));
}

Tensor mean_sq(const Tensor& d) {
  return sum_squares(d) / static_cast<double>(d.numel());
}

Tensor pooled_feature(const EncodeResult& e) {
  const Tensor& z = e.latent;  // (Cl, hs, ws)
  const int c = z.dim(0), s = z.dim(1) * z.dim(2);
  return sum_axis(reshape(z, {c, s}), 1) * (1.0 / s);
}

Tensor clip_proxy_from(const EncodeResult& a, const EncodeResult& b) {
  return sum_squares(pooled_feature(a) - pooled_feature(b));
}

Tensor unit_normalize_channels(const Tensor& f) {
  const Tensor ssum = sum_axis(mul(f, f), 0);  // (1, h, w)
  return div(f, sqrt(ssum + 1e-10));
}

Tensor lpips_proxy_from(const EncodeResult& a, const EncodeResult& b) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t n = 0; n < a.taps.size(); ++n) {
    const Tensor d =
        unit_normalize_channels(a.taps[n]) - unit_normalize_channels(b.taps[n]);
    const double sites = d.dim(1) * d.dim(2);
    total = total + sum_squares(d) / sites;
  }
  return total;
}

Tensor anchor_distance(const std::vector<Tensor>& taps_xi,
                       const std::vector<Tensor>& taps_psi,
                       const std::vector<int>& layers, const char* what) {
  if (taps_xi.size() != taps_psi.size())
    throw std::invalid_argument(std::string(what) + ": tap-list lengths " +
                                std::to_string(taps_xi.size()) + " and " +
                                std::to_string(taps_psi.size()) + " differ");
  Tensor total = Tensor::scalar(0.0);
  for (int m : layers) {
    if (m < 1 || m > static_cast<int>(taps_xi.size()))
      throw std::invalid_argument(std::string(what) + ": layer index " +
                                  std::to_string(m) + " out of range");
    total = total + mean_sq(taps_xi[m - 1] - taps_psi[m - 1]);
  }
  return total;
}

}  // namespace

Tensor normalized_sq_distance(const Tensor& a, const Tensor& b) {
  Tensor lhs = a;
  if (a.shape() != b.shape()) {
    if (a.rank() != b.rank() || a.dim(a.rank() - 2) < b.dim(b.rank() - 2))
      throw std::invalid_argument("normalized_sq_distance: shapes " +
                                  shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()) + " are incompatible");
    lhs = avg_pool_to(a, b.dim(b.rank() - 2), b.dim(b.rank() - 1));
    if (lhs.shape() != b.shape())
      throw std::invalid_argument("normalized_sq_distance: shapes " +
                                  shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()) + " are incompatible");
  }
  return mean_sq(lhs - b);
}

Tensor loss_dm(const VictimModel& model, const Tensor& x_xi,
               const Tensor& clip_frames, int t, const Tensor& eps, int y) {
  // first min(F, 4) frames only
  const int F = std::min({model.config().frames, clip_frames.dim(0), 4});
  const Tensor frames =
      clip_frames.dim(0) == F ? clip_frames : narrow(clip_frames, 0, 0, F);
  const Tensor z0 = model.encode_frames(frames).detach();
  const Tensor z_t = forward_noise(z0, t, eps, model.schedule());
  const Tensor cond = model.encode_with_taps(x_xi).latent;
  const Tensor eps_hat = model.denoise_with_taps(z_t, cond, t, y).eps;
  return mean_sq(eps_hat - eps);
}

Tensor loss_irc(const std::vector<Tensor>& taps, const LayerSelection& sel) {
  if (sel.irc_deep.empty())
    throw std::invalid_argument("loss_irc: deep block set is empty");
  const int n = static_cast<int>(taps.size());
  if (sel.irc_early < 1 || sel.irc_early > n)
    throw std::invalid_argument("loss_irc: early block index out of range");
  const Tensor& early = taps[sel.irc_early - 1];
  Tensor total = Tensor::scalar(0.0);
  for (int j : sel.irc_deep) {
    if (j < 1 || j > n)
      throw std::invalid_argument("loss_irc: deep block index " +
                                  std::to_string(j) + " out of range");
    total = total + normalized_sq_distance(early, taps[j - 1]);
  }
  return total;
}

Tensor loss_ira_denoiser(const std::vector<Tensor>& taps_xi,
                         const std::vector<Tensor>& taps_psi,
                         const std::vector<int>& layers,
                         const AttackMode& mode) {
  const Tensor d = anchor_distance(taps_xi, taps_psi, layers, "loss_ira_denoiser");
  return mode.targeted ? d : neg(d);
}

Tensor loss_ira_encoder(const VictimModel& model, const Tensor& x_xi,
                        const Tensor& x_psi, const std::vector<int>& layers,
                        const AttackMode& mode) {
  const EncodeResult exi = model.encode_with_taps(x_xi);
  const EncodeResult epsi = model.encode_with_taps(x_psi);
  const Tensor d = anchor_distance(exi.taps, epsi.taps, layers, "loss_ira_encoder");
  return mode.targeted ? d : neg(d);
}

Tensor loss_ira(const VictimModel& model, const Tensor& x_xi,
                const Tensor& x_psi, const Tensor& z_t, int t, int y,
                const LayerSelection& sel, const AttackMode& mode) {
  const Tensor cond_xi = model.encode_with_taps(x_xi).latent;
  const Tensor cond_psi = model.encode_with_taps(x_psi).latent.detach();
  const auto den_xi = model.denoise_with_taps(z_t, cond_xi, t, y);
  const auto den_psi = model.denoise_with_taps(z_t, cond_psi, t, y);
  const Tensor den = loss_ira_denoiser(den_xi.taps, den_psi.taps,
                                       sel.ira_denoiser_layers, mode);
  const Tensor enc =
      loss_ira_encoder(model, x_xi, x_psi, sel.ira_encoder_layers, mode);
  return den + enc;
}

Tensor loss_clip_proxy(const VictimModel& model, const Tensor& x_xi,
                       const Tensor& x) {
  return clip_proxy_from(model.encode_with_taps(x_xi),
                         model.encode_with_taps(x));
}

Tensor loss_lpips_proxy(const VictimModel& model, const Tensor& x_xi,
                        const Tensor& x) {
  return lpips_proxy_from(model.encode_with_taps(x_xi),
                          model.encode_with_taps(x));
}

Tensor loss_auxiliary(const VictimModel& model, const Tensor& x_xi,
                      const Tensor& x) {
  return loss_clip_proxy(model, x_xi, x) - loss_lpips_proxy(model, x_xi, x);
}

TotalLoss loss_total(const VictimModel& model, const Tensor& x_xi,
                     const Tensor& x, const Tensor& ref_latents, int y,
                     const AttackMode& mode, const LossWeights& w,
                     const LayerSelection& sel, Rng& rng, int samples) {
  w.validate();
  sel.validate(model.config());
  mode.validate(x);
  if (samples < 1) throw std::invalid_argument("loss_total: samples must be >= 1");

  const EncodeResult enc_xi = model.encode_with_taps(x_xi);
  const Tensor x_psi = mode.targeted ? mode.target : x;
  const EncodeResult enc_psi = model.encode_with_taps(x_psi.detach());

  Tensor dm_acc = Tensor::scalar(0.0);
  Tensor irc_acc = Tensor::scalar(0.0);
  Tensor ira_den_acc = Tensor::scalar(0.0);
  TotalLoss out;
  for (int s = 0; s < samples; ++s) {
    out.t = rng.uniform_int(0, model.config().timesteps);
    const Tensor eps = Tensor::randn(ref_latents.shape(), rng);
    const Tensor z_t = forward_noise(ref_latents, out.t, eps, model.schedule());
    const auto den_xi = model.denoise_with_taps(z_t, enc_xi.latent, out.t, y);
    const auto den_psi =
        model.denoise_with_taps(z_t, enc_psi.latent, out.t, y);
    dm_acc = dm_acc + mean_sq(den_xi.eps - eps);
    irc_acc = irc_acc + loss_irc(den_xi.taps, sel);
    ira_den_acc = ira_den_acc + anchor_distance(den_xi.taps, den_psi.taps,
                                                sel.ira_denoiser_layers,
                                                "loss_total");
  }
  const double inv = 1.0 / samples;
  const Tensor dm = dm_acc * inv;
  const Tensor irc = irc_acc * inv;
  const Tensor ira_enc = anchor_distance(enc_xi.taps, enc_psi.taps,
                                         sel.ira_encoder_layers, "loss_total");
  Tensor ira = ira_den_acc * inv + ira_enc;
  if (!mode.targeted) ira = neg(ira);

  // The auxiliary terms always compare against the clean image; untargeted
  // runs can reuse the x_psi encode since x_psi == x there.
  EncodeResult enc_clean_storage;
  const EncodeResult* enc_clean = &enc_psi;
  if (mode.targeted) {
    enc_clean_storage = model.encode_with_taps(x.detach());
    enc_clean = &enc_clean_storage;
  }
  const Tensor aux = clip_proxy_from(enc_xi, *enc_clean) -
                     lpips_proxy_from(enc_xi, *enc_clean);

  out.total = w.irc * irc + w.ira * ira + w.aux * aux - w.dm * dm;
  out.dm = dm.item();
  out.irc = irc.item();
  out.ira = ira.item();
  out.aux = aux.item();
  return out;
}

double loss_dm_mean(const VictimModel& model, const Tensor& x_cond,
                    const Tensor& ref_latents, int y, int draws,
                    std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0xD07A));
  const Tensor cond = model.encode_with_taps(x_cond.detach()).latent;
  double acc = 0.0;
  for (int i = 0; i < draws; ++i) {
    const int t = rng.uniform_int(0, model.config().timesteps);
    const Tensor eps = Tensor::randn(ref_latents.shape(), rng);
    const Tensor z_t = forward_noise(ref_latents, t, eps, model.schedule());
    const Tensor eps_hat = model.denoise_with_taps(z_t, cond, t, y).eps;
    Tensor d = eps_hat - eps;
    acc += sum_squares(d).item() / d.numel();
  }
  return acc / draws;
}

}  // namespace dscloak
