#include "dscloak/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dscloak/adamw.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

namespace dscloak {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int timesteps) {
  if (timesteps < 2)
    throw std::invalid_argument("NoiseSchedule: timesteps must be >= 2, got " +
                                std::to_string(timesteps));
  NoiseSchedule s;
  s.timesteps = timesteps;
  s.beta.resize(timesteps);
  s.alpha.resize(timesteps);
  s.alpha_bar.resize(timesteps);
  const double lo = 1e-4, hi = 2e-2;
  double prod = 1.0;
  for (int t = 0; t < timesteps; ++t) {
    s.beta[t] = lo + (hi - lo) * t / static_cast<double>(timesteps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps,
                     const NoiseSchedule& s) {
  if (t < 0 || t >= s.timesteps)
    throw std::invalid_argument("forward_noise: timestep " + std::to_string(t) +
                                " outside [0, " + std::to_string(s.timesteps) +
                                ")");
  if (z0.shape() != eps.shape())
    throw std::invalid_argument("forward_noise: z0 shape " +
                                shape_str(z0.shape()) +
                                " != noise shape " + shape_str(eps.shape()));
  const double ab = s.alpha_bar[t];
  return z0 * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

// ---------------------------------------------------------------------------
// Config and dataset
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (image_size < 8 || image_size % 4 != 0)
    throw std::invalid_argument("ModelConfig: image_size must be >= 8 and divisible by 4");
  if (frames < 4) throw std::invalid_argument("ModelConfig: frames must be >= 4");
  if (encoder_layers < 3)
    throw std::invalid_argument("ModelConfig: encoder_layers must be >= 3");
  if (blocks < 6)
    throw std::invalid_argument(
        "ModelConfig: blocks must be >= 6 so the 3rd block and the last three "
        "are disjoint");
  if (latent_channels < 1 || hidden_channels < 2 || hidden_channels % 2 != 0)
    throw std::invalid_argument("ModelConfig: bad channel counts");
  if (num_classes < 1) throw std::invalid_argument("ModelConfig: num_classes < 1");
  if (timesteps < 2) throw std::invalid_argument("ModelConfig: timesteps < 2");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
    throw std::invalid_argument("ModelConfig: time_embed_dim must be even");
}

namespace {

enum class ShapeKind { Disk = 0, Square = 1, Triangle = 2 };

bool inside_shape(ShapeKind kind, int dx, int dy, int r) {
  switch (kind) {
    case ShapeKind::Disk:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::Triangle:
      return dy >= -r && dy <= r && 2 * std::abs(dx) <= dy + r;
  }
  return false;
}

}  // namespace

std::vector<SyntheticClip> make_synthetic_dataset(int n, std::uint64_t seed,
                                                  int frames, int height,
                                                  int width) {
  if (n < 1) throw std::invalid_argument("make_synthetic_dataset: n must be >= 1");
  if (frames < 4 || height < 8 || width < 8)
    throw std::invalid_argument("make_synthetic_dataset: frames >= 4 and size >= 8 required");

  static const int kVel[4] = {-2, -1, 1, 2};
  std::vector<SyntheticClip> out;
  out.reserve(n);
  for (int ci = 0; ci < n; ++ci) {
    Rng rng(Rng::mix(seed, ci));
    SyntheticClip clip;
    clip.label = ci % 3;  // round-robin: exactly uniform up to remainder
    clip.vx = kVel[rng.uniform_int(0, 4)];
    clip.vy = kVel[rng.uniform_int(0, 4)];
    const int r = std::max(2, height / 8) + rng.uniform_int(0, std::max(1, height / 16));
    const int margin = r + 2;
    const int cx0 = margin + rng.uniform_int(0, std::max(1, width - 2 * margin));
    const int cy0 = margin + rng.uniform_int(0, std::max(1, height - 2 * margin));
    double bg[3], fg[3];
    for (int c = 0; c < 3; ++c) bg[c] = 0.05 + 0.3 * rng.uniform();
    for (int c = 0; c < 3; ++c) fg[c] = 0.5 + 0.5 * rng.uniform();

    const auto kind = static_cast<ShapeKind>(clip.label);
    std::vector<double> v(static_cast<std::size_t>(frames) * 3 * height * width);
    for (int f = 0; f < frames; ++f) {
      const int cx = cx0 + f * clip.vx;
      const int cy = cy0 + f * clip.vy;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const bool in = inside_shape(kind, x - cx, y - cy, r);
          for (int c = 0; c < 3; ++c) {
            v[((static_cast<std::size_t>(f) * 3 + c) * height + y) * width + x] =
                in ? fg[c] : bg[c];
          }
        }
    }
    clip.frames = Tensor::from({frames, 3, height, width}, std::move(v));
    out.push_back(std::move(clip));
  }
  return out;
}

// ---------------------------------------------------------------------------
// VictimModel
// ---------------------------------------------------------------------------

namespace {

Tensor init_conv_w(int co, int ci, int k, double scale, Rng& rng) {
  const double std = scale * std::sqrt(2.0 / (ci * k * k));
  std::vector<double> v(static_cast<std::size_t>(co) * ci * k * k);
  for (auto& e : v) e = std * rng.normal();
  return Tensor::from({co, ci, k, k}, std::move(v));
}

Tensor init_mat(int rows, int cols, double std, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (auto& e : v) e = std * rng.normal();
  return Tensor::from({rows, cols}, std::move(v));
}

// Channel progression of the encoder: 3 -> hidden/2 -> hidden -> ... -> latent.
std::vector<int> encoder_channels(const ModelConfig& cfg) {
  std::vector<int> ch;
  ch.push_back(cfg.hidden_channels / 2);
  for (int i = 1; i + 1 < cfg.encoder_layers; ++i) ch.push_back(cfg.hidden_channels);
  ch.push_back(cfg.latent_channels);
  return ch;
}

}  // namespace

VictimModel VictimModel::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  VictimModel m;
  m.cfg_ = cfg;
  m.schedule_ = NoiseSchedule::linear(cfg.timesteps);
  Rng rng(Rng::mix(seed, 0xD5C10A));

  const auto ch = encoder_channels(cfg);
  int in_c = 3;
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    m.enc_.push_back({init_conv_w(ch[i], in_c, 3, 1.0, rng), Tensor::zeros({ch[i]})});
    in_c = ch[i];
  }

  const int hid = cfg.hidden_channels;
  m.dec_.push_back({init_conv_w(hid, cfg.latent_channels, 3, 1.0, rng), Tensor::zeros({hid})});
  m.dec_.push_back({init_conv_w(hid / 2, hid, 3, 1.0, rng), Tensor::zeros({hid / 2})});
  m.dec_.push_back({init_conv_w(hid / 2, hid / 2, 3, 1.0, rng), Tensor::zeros({hid / 2})});
  m.dec_.push_back({init_conv_w(3, hid / 2, 3, 1.0, rng), Tensor::zeros({3})});

  m.in_proj_ = {init_conv_w(hid, 2 * cfg.latent_channels, 3, 1.0, rng),
                Tensor::zeros({hid})};
  m.time_w_ = init_mat(cfg.time_embed_dim, hid,
                       1.0 / std::sqrt(static_cast<double>(cfg.time_embed_dim)), rng);
  m.time_b_ = Tensor::zeros({hid});
  m.class_embed_ = init_mat(cfg.num_classes, hid, 0.1, rng);

  const double attn_std = 1.0 / std::sqrt(static_cast<double>(hid));
  for (int b = 0; b < cfg.blocks; ++b) {
    Block blk;
    blk.conv1 = {init_conv_w(hid, hid, 3, 1.0, rng), Tensor::zeros({hid})};
    // near-identity residuals at init keep deep stacks stable while leaving
    // the taps distinct across blocks
    blk.conv2 = {init_conv_w(hid, hid, 3, 0.01, rng), Tensor::zeros({hid})};
    blk.wq = init_mat(hid, hid, attn_std, rng);
    blk.wk = init_mat(hid, hid, attn_std, rng);
    blk.wv = init_mat(hid, hid, attn_std, rng);
    blk.wo = init_mat(hid, hid, 0.01 * attn_std, rng);
    m.blocks_.push_back(std::move(blk));
  }
  m.head_ = {init_conv_w(cfg.latent_channels, hid, 3, 0.01, rng),
             Tensor::zeros({cfg.latent_channels})};
  return m;
}

void VictimModel::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    fn("enc" + std::to_string(i) + ".w", enc_[i].w);
    fn("enc" + std::to_string(i) + ".b", enc_[i].b);
  }
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    fn("dec" + std::to_string(i) + ".w", dec_[i].w);
    fn("dec" + std::to_string(i) + ".b", dec_[i].b);
  }
  fn("in_proj.w", in_proj_.w);
  fn("in_proj.b", in_proj_.b);
  fn("time.w", time_w_);
  fn("time.b", time_b_);
  fn("class.embed", class_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    fn(p + "conv1.w", blocks_[i].conv1.w);
    fn(p + "conv1.b", blocks_[i].conv1.b);
    fn(p + "conv2.w", blocks_[i].conv2.w);
    fn(p + "conv2.b", blocks_[i].conv2.b);
    fn(p + "wq", blocks_[i].wq);
    fn(p + "wk", blocks_[i].wk);
    fn(p + "wv", blocks_[i].wv);
    fn(p + "wo", blocks_[i].wo);
  }
  fn("head.w", head_.w);
  fn("head.b", head_.b);
}

void VictimModel::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<VictimModel*>(this)->for_each_param(
      [&fn](const std::string& n, Tensor& t) { fn(n, t); });
}

void VictimModel::set_trainable(bool trainable) {
  for_each_param([trainable](const std::string&, Tensor& t) {
    t.set_requires_grad(trainable);
  });
}

Tensor VictimModel::encode_frames(const Tensor& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != 3 ||
      frames.dim(2) != cfg_.image_size || frames.dim(3) != cfg_.image_size)
    throw std::invalid_argument("encode_frames: expected (N, 3, " +
                                std::to_string(cfg_.image_size) + ", " +
                                std::to_string(cfg_.image_size) + "), got " +
                                shape_str(frames.shape()));
  Tensor h = frames;
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    const int stride = i < 2 ? 2 : 1;
    h = conv2d(h, enc_[i].w, enc_[i].b, stride, 1);
    if (i + 1 < enc_.size()) h = silu(h);
  }
  return h;
}

EncodeResult VictimModel::encode_with_taps(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(0) != 3 || x.dim(1) != cfg_.image_size ||
      x.dim(2) != cfg_.image_size)
    throw std::invalid_argument("encode_with_taps: expected (3, " +
                                std::to_string(cfg_.image_size) + ", " +
                                std::to_string(cfg_.image_size) + "), got " +
                                shape_str(x.shape()));
  EncodeResult res;
  Tensor h = reshape(x, {1, 3, cfg_.image_size, cfg_.image_size});
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    const int stride = i < 2 ? 2 : 1;
    h = conv2d(h, enc_[i].w, enc_[i].b, stride, 1);
    if (i + 1 < enc_.size()) h = silu(h);
    res.taps.push_back(
        reshape(h, {h.dim(1), h.dim(2), h.dim(3)}));
  }
  res.latent = res.taps.back();
  return res;
}

Tensor VictimModel::decode_frames(const Tensor& latents) const {
  const int ls = cfg_.latent_size();
  if (latents.rank() != 4 || latents.dim(1) != cfg_.latent_channels ||
      latents.dim(2) != ls || latents.dim(3) != ls)
    throw std::invalid_argument("decode_frames: expected (N, " +
                                std::to_string(cfg_.latent_channels) + ", " +
                                std::to_string(ls) + ", " + std::to_string(ls) +
                                "), got " + shape_str(latents.shape()));
  Tensor h = silu(conv2d(latents, dec_[0].w, dec_[0].b, 1, 1));
  h = upsample_nearest2x(h);
  h = silu(conv2d(h, dec_[1].w, dec_[1].b, 1, 1));
  h = upsample_nearest2x(h);
  h = silu(conv2d(h, dec_[2].w, dec_[2].b, 1, 1));
  return sigmoid(conv2d(h, dec_[3].w, dec_[3].b, 1, 1));
}

Tensor VictimModel::spatial_stage(const Tensor& h, int block) const {
  if (block < 0 || block >= static_cast<int>(blocks_.size()))
    throw std::invalid_argument("spatial_stage: block index out of range");
  const Block& blk = blocks_[block];
  Tensor r = conv2d(silu(h), blk.conv1.w, blk.conv1.b, 1, 1);
  r = conv2d(silu(r), blk.conv2.w, blk.conv2.b, 1, 1);
  return add(h, r);
}

Tensor VictimModel::temporal_stage(const Tensor& h, const Block& blk) const {
  const int F = h.dim(0), C = h.dim(1), hs = h.dim(2), ws = h.dim(3);
  const Tensor tokens = reshape(permute(h, {2, 3, 0, 1}), {hs * ws, F, C});
  const Tensor q = matmul(tokens, blk.wq);
  const Tensor k = matmul(tokens, blk.wk);
  const Tensor v = matmul(tokens, blk.wv);
  const Tensor scores =
      bmm(q, permute(k, {0, 2, 1})) * (1.0 / std::sqrt(static_cast<double>(C)));
  const Tensor attn = softmax(scores, 2);
  const Tensor o = matmul(bmm(attn, v), blk.wo);
  return add(h, permute(reshape(o, {hs, ws, F, C}), {2, 3, 0, 1}));
}

DenoiseResult VictimModel::denoise_with_taps(const Tensor& z_t,
                                             const Tensor& z_cond, int t,
                                             int y) const {
  const int ls = cfg_.latent_size();
  const int cl = cfg_.latent_channels;
  if (z_t.rank() != 4 || z_t.dim(1) != cl || z_t.dim(2) != ls || z_t.dim(3) != ls)
    throw std::invalid_argument("denoise_with_taps: z_t shape " +
                                shape_str(z_t.shape()) + " does not match (F, " +
                                std::to_string(cl) + ", " + std::to_string(ls) +
                                ", " + std::to_string(ls) + ")");
  if (z_cond.rank() != 3 || z_cond.dim(0) != cl || z_cond.dim(1) != ls ||
      z_cond.dim(2) != ls)
    throw std::invalid_argument("denoise_with_taps: conditioning latent shape " +
                                shape_str(z_cond.shape()) + " invalid");
  if (t < 0 || t >= cfg_.timesteps)
    throw std::invalid_argument("denoise_with_taps: timestep " +
                                std::to_string(t) + " outside [0, " +
                                std::to_string(cfg_.timesteps) + ")");
  if (y < 0 || y >= cfg_.num_classes)
    throw std::invalid_argument("denoise_with_taps: class " + std::to_string(y) +
                                " outside [0, " +
                                std::to_string(cfg_.num_classes) + ")");

  const int F = z_t.dim(0);
  const Tensor cond1 = reshape(z_cond, {1, cl, ls, ls});
  std::vector<Tensor> reps(F, cond1);
  const Tensor cond_stack = F == 1 ? cond1 : concat(reps, 0);
  Tensor h = conv2d(concat({z_t, cond_stack}, 1), in_proj_.w, in_proj_.b, 1, 1);

  const Tensor temb =
      add(matmul(reshape(sinusoidal_embedding(static_cast<double>(t),
                                              cfg_.time_embed_dim),
                         {1, cfg_.time_embed_dim}),
                 time_w_),
          reshape(time_b_, {1, cfg_.hidden_channels}));
  h = add(h, reshape(temb, {1, cfg_.hidden_channels, 1, 1}));
  const Tensor yemb = narrow(class_embed_, 0, y, 1);
  h = add(h, reshape(yemb, {1, cfg_.hidden_channels, 1, 1}));

  DenoiseResult res;
  for (int b = 0; b < cfg_.blocks; ++b) {
    h = spatial_stage(h, b);
    h = temporal_stage(h, blocks_[b]);
    res.taps.push_back(h);
  }
  res.eps = conv2d(h, head_.w, head_.b, 1, 1);
  return res;
}

SyntheticClip VictimModel::generate(const Tensor& x_cond, int y,
                                    std::uint64_t seed) const {
  if (!trained())
    throw std::logic_error("generate: model has not been trained");
  const int ls = cfg_.latent_size();
  const int cl = cfg_.latent_channels;
  const int F = cfg_.frames;

  Rng rng(Rng::mix(seed, 0x6E0EA7));
  const Tensor cond = encode_with_taps(x_cond).latent.detach();
  Tensor z = Tensor::randn({F, cl, ls, ls}, rng);
  const auto& s = schedule_;
  for (int t = cfg_.timesteps - 1; t >= 0; --t) {
    const Tensor eps_hat = denoise_with_taps(z, cond, t, y).eps;
    const double ab = s.alpha_bar[t];
    Tensor mu = (z - eps_hat * (s.beta[t] / std::sqrt(1.0 - ab))) *
                (1.0 / std::sqrt(s.alpha[t]));
    if (t > 0) {
      const double var = (1.0 - s.alpha_bar[t - 1]) / (1.0 - ab) * s.beta[t];
      z = mu + Tensor::randn({F, cl, ls, ls}, rng) * std::sqrt(var);
    } else {
      z = mu;
    }
  }
  SyntheticClip result;
  // decode_frames maps through a sigmoid; the clip keeps the [0, 1] contract
  // explicit.
  result.frames = clip(decode_frames(z), 0.0, 1.0);
  result.label = y;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'S', 'V', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(double)));
}

std::pair<std::string, Tensor> get_tensor(std::istream& is) {
  const std::uint32_t nlen = get_u32(is);
  std::string name(nlen, '\0');
  is.read(name.data(), nlen);
  const std::uint32_t nd = get_u32(is);
  Shape shape(nd);
  for (auto& d : shape) d = static_cast<int>(get_u32(is));
  std::vector<double> data(shape_numel(shape));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  return {name, Tensor::from(std::move(shape), std::move(data))};
}

void put_raw_vec(std::ostream& os, const std::string& name,
                 const std::vector<double>& v) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void VictimModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save: cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(cfg_.image_size));
  put_u32(os, static_cast<std::uint32_t>(cfg_.frames));
  put_u32(os, static_cast<std::uint32_t>(cfg_.encoder_layers));
  put_u32(os, static_cast<std::uint32_t>(cfg_.latent_channels));
  put_u32(os, static_cast<std::uint32_t>(cfg_.hidden_channels));
  put_u32(os, static_cast<std::uint32_t>(cfg_.blocks));
  put_u32(os, static_cast<std::uint32_t>(cfg_.num_classes));
  put_u32(os, static_cast<std::uint32_t>(cfg_.timesteps));
  put_u32(os, static_cast<std::uint32_t>(cfg_.time_embed_dim));
  put_u64(os, train_seed_);
  put_u64(os, static_cast<std::uint64_t>(trained_steps_));
  put_u64(os, static_cast<std::uint64_t>(train_state.step));

  std::uint32_t count = 0;
  for_each_param([&count](const std::string&, const Tensor&) { ++count; });
  const bool with_moments = !train_state.m.empty();
  put_u32(os, with_moments ? count * 3 : count);

  std::size_t idx = 0;
  const_cast<VictimModel*>(this)->for_each_param(
      [&](const std::string& name, Tensor& t) {
        put_tensor(os, name, t);
        if (with_moments) {
          put_raw_vec(os, "adam_m." + name, train_state.m[idx]);
          put_raw_vec(os, "adam_v." + name, train_state.v[idx]);
        }
        ++idx;
      });
  if (!os) throw std::runtime_error("save: write to " + path + " failed");
}

VictimModel VictimModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("load: " + path + " is not a model checkpoint (bad magic)");
  const std::uint32_t ver = get_u32(is);
  if (ver != kVersion)
    throw std::runtime_error("load: unsupported checkpoint version " +
                             std::to_string(ver));
  ModelConfig cfg;
  cfg.image_size = static_cast<int>(get_u32(is));
  cfg.frames = static_cast<int>(get_u32(is));
  cfg.encoder_layers = static_cast<int>(get_u32(is));
  cfg.latent_channels = static_cast<int>(get_u32(is));
  cfg.hidden_channels = static_cast<int>(get_u32(is));
  cfg.blocks = static_cast<int>(get_u32(is));
  cfg.num_classes = static_cast<int>(get_u32(is));
  cfg.timesteps = static_cast<int>(get_u32(is));
  cfg.time_embed_dim = static_cast<int>(get_u32(is));
  const std::uint64_t train_seed = get_u64(is);
  const auto trained_steps = static_cast<int>(get_u64(is));
  const auto adam_step = static_cast<int>(get_u64(is));
  const std::uint32_t tensor_count = get_u32(is);

  VictimModel m = VictimModel::init(cfg, 0);
  std::vector<std::pair<std::string, Tensor>> entries;
  for (std::uint32_t i = 0; i < tensor_count; ++i) entries.push_back(get_tensor(is));
  if (!is) throw std::runtime_error("load: truncated checkpoint " + path);

  auto find = [&entries](const std::string& name) -> const Tensor* {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  };

  bool with_moments = false;
  for (const auto& [n, t] : entries)
    if (n.rfind("adam_m.", 0) == 0) with_moments = true;

  m.for_each_param([&](const std::string& name, Tensor& t) {
    const Tensor* src = find(name);
    if (!src) throw std::runtime_error("load: checkpoint missing tensor " + name);
    if (src->shape() != t.shape())
      throw std::runtime_error("load: tensor " + name + " has shape " +
                               shape_str(src->shape()) + ", expected " +
                               shape_str(t.shape()));
    t.leaf_data() = src->data();
    if (with_moments) {
      const Tensor* mm = find("adam_m." + name);
      const Tensor* mv = find("adam_v." + name);
      if (!mm || !mv)
        throw std::runtime_error("load: checkpoint missing moments for " + name);
      m.train_state.m.push_back(mm->data());
      m.train_state.v.push_back(mv->data());
    }
  });
  m.train_state.step = adam_step;
  m.trained_steps_ = trained_steps;
  m.train_seed_ = train_seed;
  m.set_trainable(false);
  return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainResult train_toy(const ModelConfig& cfg,
                      const std::vector<SyntheticClip>& dataset, int steps,
                      std::uint64_t seed, double lr, VictimModel* resume_from) {
  if (dataset.empty())
    throw std::invalid_argument("train_toy: dataset must be nonempty");
  for (const auto& c : dataset) {
    if (c.frames.dim(0) < cfg.frames || c.frames.dim(2) != cfg.image_size ||
        c.frames.dim(3) != cfg.image_size)
      throw std::invalid_argument("train_toy: clip shape " +
                                  shape_str(c.frames.shape()) +
                                  " incompatible with model config");
    if (c.label < 0 || c.label >= cfg.num_classes)
      throw std::invalid_argument("train_toy: clip label out of range");
  }

  TrainResult out;
  int start_step = 0;
  if (resume_from) {
    out.model = *resume_from;
    // tensors are shared handles; give the resumed run its own storage
    out.model.for_each_param(
        [](const std::string&, Tensor& t) { t = t.clone(); });
    start_step = out.model.trained_steps();
  } else {
    out.model = VictimModel::init(cfg, seed);
  }
  VictimModel& model = out.model;
  model.set_trainable(true);

  AdamW opt(lr);
  std::vector<Tensor> params;
  model.for_each_param([&](const std::string&, Tensor& t) {
    opt.add_param(t);
    params.push_back(t);
  });
  if (resume_from && !model.train_state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.moment1(i) = model.train_state.m[i];
      opt.moment2(i) = model.train_state.v[i];
    }
    opt.set_step_count(model.train_state.step);
  }

  const int F = cfg.frames;
  const int ls = cfg.latent_size();
  for (int step = start_step; step < steps; ++step) {
    Rng rng(Rng::mix(seed, 1000003ULL + static_cast<std::uint64_t>(step)));
    const SyntheticClip& clip = dataset[rng.uniform_int(0, static_cast<int>(dataset.size()))];
    const int t = rng.uniform_int(0, cfg.timesteps);
    const int fi = rng.uniform_int(0, F);

    Tensor frames = clip.frames.dim(0) == F
                        ? clip.frames
                        : narrow(clip.frames, 0, 0, F).detach();
    const Tensor z0 = model.encode_frames(frames).detach();
    const Tensor cond =
        reshape(narrow(z0, 0, 0, 1), {cfg.latent_channels, ls, ls});
    const Tensor eps = Tensor::randn({F, cfg.latent_channels, ls, ls}, rng);
    const Tensor z_t = forward_noise(z0, t, eps, model.schedule());
    const Tensor eps_hat = model.denoise_with_taps(z_t, cond, t, clip.label).eps;
    const Tensor diff = eps_hat - eps;
    const Tensor loss_dn = sum_squares(diff) / static_cast<double>(diff.numel());

    const Tensor frame = reshape(narrow(frames, 0, fi, 1),
                                 {1, 3, cfg.image_size, cfg.image_size});
    const Tensor rec = model.decode_frames(model.encode_frames(frame));
    const Tensor rdiff = rec - frame;
    const Tensor loss_rec = sum_squares(rdiff) / static_cast<double>(rdiff.numel());

    const Tensor loss = loss_dn + loss_rec;
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw std::runtime_error("train_toy: loss diverged (non-finite) at step " +
                               std::to_string(step));
    out.loss_trace.push_back(lv);
    opt.step(backward(loss));
  }

  model.train_state.m.clear();
  model.train_state.v.clear();
  for (std::size_t i = 0; i < opt.size(); ++i) {
    model.train_state.m.push_back(opt.moment1(i));
    model.train_state.v.push_back(opt.moment2(i));
  }
  model.train_state.step = opt.step_count();
  model.set_trained(steps, seed);
  model.set_trainable(false);
  return out;
}

// ---------------------------------------------------------------------------
// PCA visualization
// ---------------------------------------------------------------------------

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major, n x n).
// Eigenvectors come back as columns of v.
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& evals,
                  std::vector<double>& v) {
  v.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 128; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-28) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  evals.resize(n);
  for (int i = 0; i < n; ++i) evals[i] = a[i * n + i];
}

}  // namespace

std::vector<PcaLayerResult> pca_layer_viz(const std::vector<Tensor>& taps,
                                          int k) {
  std::vector<PcaLayerResult> out;
  for (const auto& tap : taps) {
    const int rank = tap.rank();
    if (rank != 3 && rank != 4)
      throw std::invalid_argument("pca_layer_viz: tap rank must be 3 or 4, got " +
                                  shape_str(tap.shape()));
    const int ch_axis = rank == 4 ? 1 : 0;
    const int C = tap.dim(ch_axis);
    if (k < 1 || k > C)
      throw std::invalid_argument("pca_layer_viz: k=" + std::to_string(k) +
                                  " exceeds channel count " + std::to_string(C));
    const int spatial = tap.dim(rank - 2) * tap.dim(rank - 1);
    const int leading = rank == 4 ? tap.dim(0) : 1;
    const long N = static_cast<long>(leading) * spatial;

    // samples[n * C + c], n walks (frame, site)
    const auto& val = tap.data();
    std::vector<double> samples(N * C);
    for (int f = 0; f < leading; ++f)
      for (int c = 0; c < C; ++c)
        for (int s = 0; s < spatial; ++s)
          samples[(static_cast<long>(f) * spatial + s) * C + c] =
              val[(static_cast<long>(f) * C + c) * spatial + s];

    std::vector<double> mu(C, 0.0);
    for (long n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) mu[c] += samples[n * C + c];
    for (auto& m : mu) m /= static_cast<double>(N);

    std::vector<double> cov(static_cast<std::size_t>(C) * C, 0.0);
    for (long n = 0; n < N; ++n)
      for (int i = 0; i < C; ++i) {
        const double di = samples[n * C + i] - mu[i];
        for (int j = i; j < C; ++j)
          cov[i * C + j] += di * (samples[n * C + j] - mu[j]);
      }
    for (int i = 0; i < C; ++i)
      for (int j = 0; j < i; ++j) cov[i * C + j] = cov[j * C + i];
    for (auto& c : cov) c /= static_cast<double>(N);

    std::vector<double> evals, evecs;
    jacobi_eigen(cov, C, evals, evecs);
    std::vector<int> order(C);
    for (int i = 0; i < C; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&evals](int a, int b) { return evals[a] > evals[b]; });

    double trace = 0.0;
    for (double e : evals) trace += std::max(0.0, e);

    PcaLayerResult res;
    res.zero_variance.assign(k, false);
    std::vector<double> proj(static_cast<std::size_t>(k) * N, 0.0);
    for (int j = 0; j < k; ++j) {
      const int oi = order[j];
      const double ev = std::max(0.0, evals[oi]);
      res.explained_variance.push_back(trace > 0 ? ev / trace : 0.0);
      if (ev <= 1e-12 * std::max(trace, 1e-30)) {
        res.zero_variance[j] = true;  // rank-deficient: component padded with zeros
        res.degenerate = true;
        continue;
      }
      std::vector<double> comp(C);
      for (int c = 0; c < C; ++c) comp[c] = evecs[c * C + oi];
      // sign convention: first loading with magnitude above 1e-12 is positive
      for (int c = 0; c < C; ++c) {
        if (std::abs(comp[c]) > 1e-12) {
          if (comp[c] < 0)
            for (auto& e : comp) e = -e;
          break;
        }
      }
      for (long n = 0; n < N; ++n) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += (samples[n * C + c] - mu[c]) * comp[c];
        proj[static_cast<long>(j) * N + n] = s;
      }
    }
    Shape pshape;
    if (rank == 4)
      pshape = {k, tap.dim(0), tap.dim(2), tap.dim(3)};
    else
      pshape = {k, tap.dim(1), tap.dim(2)};
    res.projections = Tensor::from(std::move(pshape), std::move(proj));
    out.push_back(std::move(res));
  }
  return out;
}

}  // namespace dscloak
