#include "dscloak/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "dscloak/losses.hpp"
#include "dscloak/metrics.hpp"
#include "dscloak/version.hpp"
#include "json.hpp"

namespace dscloak::commands {

namespace fs = std::filesystem;
using io::RunConfig;
using json = nlohmann::json;

namespace {

json config_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.entries()) j[k] = v;
  return j;
}

void write_manifest(const std::string& path, json manifest) {
  manifest["schema_version"] = 1;
  manifest["library_version"] = kLibraryVersion;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest " + path);
  os << manifest.dump(2) << '\n';
}

std::vector<int> parse_layer_list(const std::string& text, int early,
                                  int blocks) {
  std::vector<int> out;
  if (text == "full") {
    for (int j = early + 1; j <= blocks; ++j) out.push_back(j);
    return out;
  }
  if (text.rfind("last", 0) == 0) {
    const int k = std::stoi(text.substr(4));
    for (int j = blocks - k + 1; j <= blocks; ++j) out.push_back(j);
    return out;
  }
  std::string cur;
  for (char c : text + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (out.empty())
    throw std::invalid_argument("config: irc-deep '" + text + "' names no layers");
  return out;
}

std::vector<metrics::TransformSpec> parse_transforms(const std::string& text) {
  std::vector<metrics::TransformSpec> out;
  std::string cur;
  for (char c : text + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(metrics::TransformSpec::parse(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

VictimModel load_model(const RunConfig& cfg) {
  const std::string path = cfg.get("model");
  if (path.empty())
    throw std::invalid_argument("config: 'model' (checkpoint path) is required");
  if (!io::file_exists(path))
    throw std::invalid_argument("config: model checkpoint " + path + " does not exist");
  return VictimModel::load(path);
}

Tensor load_image_for(const VictimModel& model, const std::string& path) {
  const Tensor img = io::read_png(path);
  if (img.dim(1) != model.config().image_size ||
      img.dim(2) != model.config().image_size)
    throw std::invalid_argument("image " + path + " has shape " +
                                shape_str(img.shape()) +
                                " but the model expects " +
                                std::to_string(model.config().image_size) + "x" +
                                std::to_string(model.config().image_size));
  return img;
}

std::vector<std::uint64_t> eval_seeds(const RunConfig& cfg) {
  const int n = cfg.get_int("eval-seeds");
  std::vector<std::uint64_t> seeds(n);
  const std::uint64_t base = cfg.get_u64("seed");
  for (int i = 0; i < n; ++i) seeds[i] = Rng::mix(base, 0xE7A1 + i);
  return seeds;
}

io::Table trace_table(const std::vector<IterRecord>& trace) {
  io::Table t;
  t.header = {"iter", "loss_dm", "loss_irc", "loss_ira", "loss_aux", "total", "linf"};
  for (const auto& r : trace)
    t.rows.push_back({std::to_string(r.iter), io::fmt_double(r.dm),
                      io::fmt_double(r.irc), io::fmt_double(r.ira),
                      io::fmt_double(r.aux), io::fmt_double(r.total),
                      io::fmt_double(r.linf)});
  return t;
}

AttackResult run_attack(const Tensor& x, int y, const VictimModel& model,
                        const AttackConfig& acfg) {
  return acfg.space == Space::Rgb ? pgd_rgb(x, y, model, acfg)
                                  : dsp_optimize(x, y, model, acfg);
}

struct MetricRow {
  double psnr, ssim, linf, feature_cosine, dm_clean, dm_protected;
};

MetricRow metric_row(const Tensor& x, const Tensor& x_xi,
                     const VictimModel& model, int y, std::uint64_t seed) {
  MetricRow r{};
  r.psnr = metrics::psnr(x, x_xi);
  r.ssim = metrics::ssim(x, x_xi);
  const auto& a = x.data();
  const auto& b = x_xi.data();
  for (std::size_t i = 0; i < a.size(); ++i)
    r.linf = std::max(r.linf, std::abs(a[i] - b[i]));
  r.feature_cosine = metrics::feature_cosine(x, x_xi, model);
  const Tensor clip_frames = build_reference_clip(x, model.config().frames, seed);
  const Tensor z0 = model.encode_frames(clip_frames).detach();
  r.dm_clean = loss_dm_mean(model, x, z0, y, 16, seed);
  r.dm_protected = loss_dm_mean(model, x_xi, z0, y, 16, seed);
  return r;
}

void append_metric_cells(io::Table& t, const MetricRow& r) {
  t.rows.back().push_back(io::fmt_double(r.psnr));
  t.rows.back().push_back(io::fmt_double(r.ssim));
  t.rows.back().push_back(io::fmt_double(r.linf));
  t.rows.back().push_back(io::fmt_double(r.feature_cosine));
  t.rows.back().push_back(io::fmt_double(r.dm_clean));
  t.rows.back().push_back(io::fmt_double(r.dm_protected));
}

const std::vector<std::string> kMetricHeader = {
    "psnr", "ssim", "linf", "feature_cosine", "dm_clean", "dm_protected"};

}  // namespace

ModelConfig model_config_from(const RunConfig& cfg) {
  ModelConfig mc;
  mc.image_size = cfg.get_int("image-size");
  mc.frames = cfg.get_int("frames");
  mc.encoder_layers = cfg.get_int("encoder-layers");
  mc.latent_channels = cfg.get_int("latent-channels");
  mc.hidden_channels = cfg.get_int("hidden-channels");
  mc.blocks = cfg.get_int("blocks");
  mc.num_classes = cfg.get_int("classes");
  mc.timesteps = cfg.get_int("timesteps");
  mc.time_embed_dim = cfg.get_int("time-embed-dim");
  mc.validate();
  return mc;
}

AttackConfig attack_config_from(const RunConfig& cfg, const ModelConfig& mc) {
  AttackConfig a;
  a.budget_rgb = cfg.get_real("budget-rgb");
  a.budget_lab = cfg.get_real("budget-lab");
  a.mask_fraction = cfg.get_real("mask-fraction");
  a.iters = cfg.get_int("iters");
  a.lr = cfg.get_real("lr");
  a.pgd_step = cfg.get_real("pgd-step");
  a.space = space_from_name(cfg.get("space"));
  a.seed = cfg.get_u64("seed");
  a.literal_mask = cfg.get_bool("literal-mask");
  a.samples_per_iter = cfg.get_int("samples-per-iter");
  a.weights.irc = cfg.get_real("w-irc");
  a.weights.ira = cfg.get_real("w-ira");
  a.weights.aux = cfg.get_real("w-aux");
  a.weights.dm = cfg.get_real("w-dm");

  LayerSelection sel = LayerSelection::defaults(mc);
  sel.irc_early = cfg.get_int("irc-early");
  sel.irc_deep = parse_layer_list(cfg.get("irc-deep"), sel.irc_early, mc.blocks);
  a.layers = sel;

  const std::string target = cfg.get("targeted");
  if (!target.empty()) {
    a.mode.targeted = true;
    a.mode.target = io::read_png(target);
  }
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg) {
  const std::string out = cfg.get("out");
  io::ensure_dir(out);
  const bool overwrite = cfg.get_bool("overwrite");
  const std::string ckpt = out + "/model.ckpt";
  const std::string curve = out + "/train_loss.csv";
  const std::string manifest_path = out + "/manifest.json";
  io::require_writable(ckpt, overwrite);
  io::require_writable(curve, overwrite);
  io::require_writable(manifest_path, overwrite);

  const ModelConfig mc = model_config_from(cfg);
  const auto dataset =
      make_synthetic_dataset(cfg.get_int("train-clips"), cfg.get_u64("data-seed"),
                             mc.frames, mc.image_size, mc.image_size);

  const int steps = cfg.get_int("train-steps");
  const std::uint64_t seed = cfg.get_u64("seed");
  const double lr = cfg.get_real("train-lr");

  TrainResult tr;
  if (cfg.get_bool("resume")) {
    const std::string prev = cfg.get("model").empty() ? ckpt : cfg.get("model");
    if (!io::file_exists(prev))
      throw std::invalid_argument("resume requested but checkpoint " + prev +
                                  " does not exist");
    VictimModel m = VictimModel::load(prev);
    if (!(m.config() == mc))
      throw std::invalid_argument(
          "resume: checkpoint architecture differs from the configured one");
    tr = train_toy(mc, dataset, steps, m.train_seed(), lr, &m);
  } else {
    tr = train_toy(mc, dataset, steps, seed, lr);
  }

  tr.model.save(ckpt);

  io::Table t;
  t.header = {"step", "loss"};
  const int start = steps - static_cast<int>(tr.loss_trace.size());
  for (std::size_t i = 0; i < tr.loss_trace.size(); ++i)
    t.rows.push_back({std::to_string(start + static_cast<int>(i)),
                      io::fmt_double(tr.loss_trace[i])});
  io::write_csv(curve, t);

  json m;
  m["command"] = "train";
  m["config"] = config_json(cfg);
  m["model_checksum"] = io::crc32_file(ckpt);
  m["outputs"] = {ckpt, curve};
  write_manifest(manifest_path, std::move(m));
  return kOk;
}

// ---------------------------------------------------------------------------
// protect
// ---------------------------------------------------------------------------

int cmd_protect(const RunConfig& cfg, const std::vector<std::string>& images) {
  if (images.empty())
    throw std::invalid_argument("protect: at least one input image is required");
  const VictimModel model = load_model(cfg);
  const ModelConfig& mc = model.config();
  const AttackConfig base = attack_config_from(cfg, mc);
  const std::string out = cfg.get("out");
  io::ensure_dir(out);
  const bool overwrite = cfg.get_bool("overwrite");
  const int y = cfg.get_int("class-label");
  const std::uint64_t seed = cfg.get_u64("seed");
  const int jobs = std::max(1, cfg.get_int("jobs"));

  struct PerImage {
    std::string input;
    std::uint64_t seed = 0;
    bool ok = false;
    bool aborted = false;
    std::string error;
    std::vector<std::string> outputs;
  };
  std::vector<PerImage> results(images.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= images.size()) return;
      PerImage& r = results[i];
      r.input = images[i];
      r.seed = Rng::mix(seed, 0x9107EC7 + i);
      try {
        const Tensor x = load_image_for(model, images[i]);
        AttackConfig acfg = base;
        acfg.seed = r.seed;
        const std::string stem = fs::path(images[i]).stem().string();
        const std::string prefix = out + "/" + stem;
        const std::vector<std::pair<std::string, std::string>> outs = {
            {"png", prefix + "_protected.png"},
            {"rgb", prefix + "_delta_rgb.dst"},
            {"a", prefix + "_delta_a.dst"},
            {"b", prefix + "_delta_b.dst"},
            {"freq", prefix + "_delta_freq.dst"},
            {"trace", prefix + "_trace.csv"},
        };
        for (const auto& [_, p] : outs) io::require_writable(p, overwrite);

        const AttackResult res = run_attack(x, y, model, acfg);
        if (res.aborted)
          r.error = "optimization aborted: " + res.diagnostic +
                    " (best state kept)";
        io::write_png(outs[0].second, res.x_xi);
        io::write_tensor(outs[1].second, res.state.delta_rgb);
        io::write_tensor(outs[2].second, res.state.delta_a);
        io::write_tensor(outs[3].second, res.state.delta_b);
        io::write_tensor(outs[4].second, res.state.delta_freq);
        io::write_csv(outs[5].second, trace_table(res.trace));
        for (const auto& [_, p] : outs) r.outputs.push_back(p);
        r.aborted = res.aborted;
        r.ok = true;
      } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const int n = std::min<std::size_t>(jobs, images.size());
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  bool any_failed = false;
  json per_image = json::array();
  for (const auto& r : results) {
    if (!r.ok) {
      any_failed = true;
      std::cerr << "protect: " << r.input << " failed: " << r.error << "\n";
    }
    json e;
    e["input"] = r.input;
    e["seed"] = r.seed;
    e["ok"] = r.ok;
    e["aborted"] = r.aborted;
    if (!r.error.empty()) e["error"] = r.error;
    e["outputs"] = r.outputs;
    per_image.push_back(std::move(e));
  }

  json m;
  m["command"] = "protect";
  m["config"] = config_json(cfg);
  m["model_checksum"] = io::crc32_file(cfg.get("model"));
  m["per_image"] = std::move(per_image);
  const std::string manifest_path = out + "/manifest.json";
  io::require_writable(manifest_path, overwrite);
  write_manifest(manifest_path, std::move(m));
  return any_failed ? kPartialFailure : kOk;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> pair_inputs(
    const std::string& clean, const std::string& prot) {
  if (fs::is_directory(clean) != fs::is_directory(prot))
    throw std::invalid_argument(
        "evaluate: clean and protected inputs must both be files or both be "
        "directories");
  if (!fs::is_directory(clean)) return {{clean, prot}};
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(clean))
    if (e.path().extension() == ".png") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& n : names) {
    const std::string p = prot + "/" + n;
    if (!io::file_exists(p))
      throw std::invalid_argument("evaluate: no protected counterpart for " + n);
    pairs.emplace_back(clean + "/" + n, p);
  }
  if (pairs.empty()) throw std::invalid_argument("evaluate: no .png inputs found");
  return pairs;
}

}  // namespace

int cmd_evaluate(const RunConfig& cfg, const std::string& clean_path,
                 const std::string& protected_path) {
  const VictimModel model = load_model(cfg);
  const auto pairs = pair_inputs(clean_path, protected_path);
  const auto transforms = parse_transforms(cfg.get("transforms"));
  const auto seeds = eval_seeds(cfg);
  const int y = cfg.get_int("class-label");
  const std::string out = cfg.get("out");
  io::ensure_dir(out);
  const bool overwrite = cfg.get_bool("overwrite");
  const std::string report_path = out + "/report.csv";
  const std::string rows_path = out + "/degradation.csv";
  const std::string summary_path = out + "/summary.json";
  const std::string manifest_path = out + "/manifest.json";
  for (const auto& p : {report_path, rows_path, summary_path, manifest_path})
    io::require_writable(p, overwrite);

  bool demo_clips_written = false;
  io::Table report;
  report.header = {"image",         "transform",       "psnr",
                   "ssim",          "linf",            "feature_cosine",
                   "recon_delta",   "consistency_delta", "identity_delta"};
  io::Table detail;
  detail.header = {"image", "transform", "seed",
                   "recon_clean", "recon_protected",
                   "consistency_clean", "consistency_protected",
                   "identity_clean", "identity_protected"};
  json summary_rows = json::array();

  for (const auto& [cpath, ppath] : pairs) {
    const Tensor x = load_image_for(model, cpath);
    const Tensor xp = load_image_for(model, ppath);
    const auto rep = metrics::robustness_report(model, x, xp, transforms, y, seeds);
    const std::string name = fs::path(cpath).filename().string();
    if (!demo_clips_written && !seeds.empty()) {
      // one generated pair for visual inspection
      io::write_clip(out + "/clips/clean", model.generate(x, y, seeds[0]).frames,
                     overwrite);
      io::write_clip(out + "/clips/protected",
                     model.generate(xp, y, seeds[0]).frames, overwrite);
      demo_clips_written = true;
    }
    for (const auto& row : rep.rows) {
      report.rows.push_back(
          {name, row.transform, io::fmt_double(row.psnr_vs_clean),
           io::fmt_double(row.ssim_vs_clean), io::fmt_double(row.linf_vs_clean),
           io::fmt_double(row.feature_cosine_vs_clean),
           io::fmt_double(row.degradation.mean_recon_delta),
           io::fmt_double(row.degradation.mean_consistency_delta),
           io::fmt_double(row.degradation.mean_identity_delta)});
      for (const auto& d : row.degradation.rows)
        detail.rows.push_back({name, row.transform, std::to_string(d.seed),
                               io::fmt_double(d.recon_clean),
                               io::fmt_double(d.recon_protected),
                               io::fmt_double(d.consistency_clean),
                               io::fmt_double(d.consistency_protected),
                               io::fmt_double(d.identity_clean),
                               io::fmt_double(d.identity_protected)});
      json s;
      s["image"] = name;
      s["transform"] = row.transform;
      s["psnr"] = row.psnr_vs_clean;
      s["ssim"] = row.ssim_vs_clean;
      s["consistency_delta"] = row.degradation.mean_consistency_delta;
      s["identity_delta"] = row.degradation.mean_identity_delta;
      s["recon_delta"] = row.degradation.mean_recon_delta;
      summary_rows.push_back(std::move(s));
    }
  }

  io::write_csv(report_path, report);
  io::write_csv(rows_path, detail);
  json summary;
  summary["schema_version"] = 1;
  summary["rows"] = std::move(summary_rows);
  std::ofstream so(summary_path, std::ios::binary | std::ios::trunc);
  so << summary.dump(2) << '\n';

  json m;
  m["command"] = "evaluate";
  m["config"] = config_json(cfg);
  m["model_checksum"] = io::crc32_file(cfg.get("model"));
  m["inputs"] = {clean_path, protected_path};
  m["outputs"] = {report_path, rows_path, summary_path};
  write_manifest(manifest_path, std::move(m));
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const RunConfig& cfg) {
  const VictimModel model = load_model(cfg);
  const ModelConfig& mc = model.config();
  const int y = cfg.get_int("class-label");
  const std::string out = cfg.get("out");
  io::ensure_dir(out);
  const bool overwrite = cfg.get_bool("overwrite");

  Tensor x;
  if (!cfg.get("image").empty()) {
    x = load_image_for(model, cfg.get("image"));
  } else {
    const auto ds = make_synthetic_dataset(1, cfg.get_u64("data-seed"), mc.frames,
                                           mc.image_size, mc.image_size);
    x = reshape(narrow(ds[0].frames, 0, 0, 1), {3, mc.image_size, mc.image_size});
  }
  Tensor decoy;
  if (!cfg.get("target-image").empty()) {
    decoy = load_image_for(model, cfg.get("target-image"));
  } else {
    const auto ds = make_synthetic_dataset(2, Rng::mix(cfg.get_u64("data-seed"), 0xDEC0),
                                           mc.frames, mc.image_size, mc.image_size);
    decoy = reshape(narrow(ds[1].frames, 0, 0, 1), {3, mc.image_size, mc.image_size});
  }

  AttackConfig base = attack_config_from(cfg, mc);
  if (cfg.get_int("ablate-iters") > 0) base.iters = cfg.get_int("ablate-iters");

  json manifest_tables = json::object();
  auto table_path = [&](const std::string& name) {
    const std::string p = out + "/" + name;
    io::require_writable(p, overwrite);
    return p;
  };

  // 1. perturbation spaces, vanilla denoising objective, paired seeds
  {
    io::Table t;
    t.header = {"space"};
    t.header.insert(t.header.end(), kMetricHeader.begin(), kMetricHeader.end());
    json rows = json::array();
    for (const auto& row : ablate_spaces(x, y, model, base)) {
      t.rows.push_back({space_name(row.space)});
      t.rows.back().push_back(io::fmt_double(row.psnr));
      t.rows.back().push_back(io::fmt_double(row.ssim));
      t.rows.back().push_back(io::fmt_double(row.linf));
      t.rows.back().push_back(io::fmt_double(row.feature_cosine));
      t.rows.back().push_back(io::fmt_double(row.dm_clean));
      t.rows.back().push_back(io::fmt_double(row.dm_protected));
      rows.push_back({{"space", space_name(row.space)},
                      {"seed", base.seed},
                      {"objective", "dm-only"}});
    }
    io::write_csv(table_path("spaces.csv"), t);
    manifest_tables["spaces"] = std::move(rows);
  }

  // 2. chroma budget sweep on the dual-space arm, full objective
  {
    io::Table t;
    t.header = {"budget_lab"};
    t.header.insert(t.header.end(), kMetricHeader.begin(), kMetricHeader.end());
    json rows = json::array();
    std::string sweep = cfg.get("lab-budget-sweep");
    std::string cur;
    for (char c : sweep + ",") {
      if (c != ',') {
        cur += c;
        continue;
      }
      if (cur.empty()) continue;
      AttackConfig a = base;
      a.space = Space::LabFreq;
      a.budget_lab = io::parse_real(cur);
      const AttackResult r = dsp_optimize(x, y, model, a);
      t.rows.push_back({cur});
      append_metric_cells(t, metric_row(x, r.x_xi, model, y, a.seed));
      rows.push_back({{"budget-lab", cur}, {"seed", a.seed}});
      cur.clear();
    }
    io::write_csv(table_path("lab_budget.csv"), t);
    manifest_tables["lab_budget"] = std::move(rows);
  }

  // 3. loss-component grid A1-A9
  {
    struct Arm {
      const char* id;
      const char* desc;
      LossWeights w;
      bool enc, den, targeted;
    };
    const std::vector<Arm> arms = {
        {"A1", "denoising", {0, 0, 0, 1}, false, false, false},
        {"A2", "denoising+collapse", {1, 0, 0, 1}, false, false, false},
        {"A3", "denoising+anchor-encoder(U)", {0, 1, 0, 1}, true, false, false},
        {"A4", "denoising+anchor-encoder(T)", {0, 1, 0, 1}, true, false, true},
        {"A5", "denoising+anchor-denoiser(U)", {0, 1, 0, 1}, false, true, false},
        {"A6", "denoising+anchor-denoiser(T)", {0, 1, 0, 1}, false, true, true},
        {"A7", "A4+A6", {0, 1, 0, 1}, true, true, true},
        {"A8", "A2+A4+A6", {1, 1, 0, 1}, true, true, true},
        {"A9", "A8+auxiliary", {1, 1, 1, 1}, true, true, true},
    };
    io::Table t;
    t.header = {"row", "losses"};
    t.header.insert(t.header.end(), kMetricHeader.begin(), kMetricHeader.end());
    json rows = json::array();
    for (const auto& arm : arms) {
      AttackConfig a = base;
      a.weights = arm.w;
      LayerSelection sel = a.layers ? *a.layers : LayerSelection::defaults(mc);
      if (!arm.enc) sel.ira_encoder_layers.clear();
      if (!arm.den) sel.ira_denoiser_layers.clear();
      a.layers = sel;
      a.mode.targeted = arm.targeted;
      a.mode.target = arm.targeted ? decoy : Tensor();
      const AttackResult r = dsp_optimize(x, y, model, a);
      t.rows.push_back({arm.id, arm.desc});
      append_metric_cells(t, metric_row(x, r.x_xi, model, y, a.seed));
      rows.push_back({{"row", arm.id},
                      {"desc", arm.desc},
                      {"targeted", arm.targeted},
                      {"seed", a.seed}});
    }
    io::write_csv(table_path("loss_components.csv"), t);
    manifest_tables["loss_components"] = std::move(rows);
  }

  // 4. collapse layer selection
  {
    const std::vector<std::string> settings = {"full", "last3", "last1", "last2",
                                               "last4"};
    io::Table t;
    t.header = {"setting"};
    t.header.insert(t.header.end(), kMetricHeader.begin(), kMetricHeader.end());
    json rows = json::array();
    for (const auto& s : settings) {
      AttackConfig a = base;
      LayerSelection sel = a.layers ? *a.layers : LayerSelection::defaults(mc);
      sel.irc_deep = parse_layer_list(s, sel.irc_early, mc.blocks);
      a.layers = sel;
      const AttackResult r = dsp_optimize(x, y, model, a);
      t.rows.push_back({s});
      append_metric_cells(t, metric_row(x, r.x_xi, model, y, a.seed));
      rows.push_back({{"irc-deep", s}, {"seed", a.seed}});
    }
    io::write_csv(table_path("irc_layers.csv"), t);
    manifest_tables["irc_layers"] = std::move(rows);
  }

  // 5. dual-space vs rgb blur retention
  {
    const int gen_seeds = cfg.get_int("ablate-gen-seeds");
    std::vector<std::uint64_t> seeds(gen_seeds);
    for (int i = 0; i < gen_seeds; ++i) seeds[i] = Rng::mix(base.seed, 0xB1E5 + i);
    const metrics::TransformSpec blur = metrics::TransformSpec::parse("blur:7:1.5");

    io::Table t;
    t.header = {"arm", "consistency_delta", "consistency_delta_after_blur",
                "retained_fraction", "psnr", "ssim"};
    json rows = json::array();
    for (const std::string arm : {"dsp", "rgb"}) {
      AttackConfig a = base;
      a.space = arm == "dsp" ? Space::LabFreq : Space::Rgb;
      const AttackResult r = run_attack(x, y, model, a);
      const auto rep =
          metrics::robustness_report(model, x, r.x_xi, {blur}, y, seeds);
      const double base_delta = rep.rows[0].degradation.mean_consistency_delta;
      const double blur_delta = rep.rows[1].degradation.mean_consistency_delta;
      const double retained =
          std::abs(base_delta) < 1e-12 ? 0.0 : blur_delta / base_delta;
      t.rows.push_back({arm, io::fmt_double(base_delta),
                        io::fmt_double(blur_delta), io::fmt_double(retained),
                        io::fmt_double(rep.rows[0].psnr_vs_clean),
                        io::fmt_double(rep.rows[0].ssim_vs_clean)});
      rows.push_back({{"arm", arm}, {"seed", a.seed}, {"gen_seeds", gen_seeds}});
    }
    io::write_csv(table_path("dsp_vs_rgb.csv"), t);
    manifest_tables["dsp_vs_rgb"] = std::move(rows);
  }

  json m;
  m["command"] = "ablate";
  m["config"] = config_json(cfg);
  m["model_checksum"] = io::crc32_file(cfg.get("model"));
  m["tables"] = std::move(manifest_tables);
  const std::string manifest_path = out + "/manifest.json";
  io::require_writable(manifest_path, overwrite);
  write_manifest(manifest_path, std::move(m));
  return kOk;
}

// ---------------------------------------------------------------------------
// visualize-layers
// ---------------------------------------------------------------------------

namespace {

// k rows (components) by F columns (frames) of min-max normalized maps,
// nearest-upscaled, separated by white gutters.
Tensor render_pca_grid(const Tensor& projections, int upscale) {
  const int k = projections.dim(0);
  const int F = projections.rank() == 4 ? projections.dim(1) : 1;
  const int h = projections.dim(projections.rank() - 2);
  const int w = projections.dim(projections.rank() - 1);
  const int gap = 2;
  const int ch = h * upscale, cw = w * upscale;
  const int gh = k * ch + (k + 1) * gap;
  const int gw = F * cw + (F + 1) * gap;
  std::vector<double> grid(static_cast<std::size_t>(3) * gh * gw, 1.0);

  const auto& v = projections.data();
  for (int comp = 0; comp < k; ++comp)
    for (int f = 0; f < F; ++f) {
      const std::size_t base = (static_cast<std::size_t>(comp) * F + f) * h * w;
      double lo = v[base], hi = v[base];
      for (int i = 0; i < h * w; ++i) {
        lo = std::min(lo, v[base + i]);
        hi = std::max(hi, v[base + i]);
      }
      const double range = hi - lo;
      for (int i = 0; i < ch; ++i)
        for (int j = 0; j < cw; ++j) {
          const double raw = v[base + (i / upscale) * w + (j / upscale)];
          const double val = range > 0 ? (raw - lo) / range : 0.5;
          const int gi = gap + comp * (ch + gap) + i;
          const int gj = gap + f * (cw + gap) + j;
          for (int c = 0; c < 3; ++c)
            grid[(static_cast<std::size_t>(c) * gh + gi) * gw + gj] = val;
        }
    }
  return Tensor::from({3, gh, gw}, std::move(grid));
}

}  // namespace

int cmd_visualize_layers(const RunConfig& cfg, const std::string& image) {
  const VictimModel model = load_model(cfg);
  const ModelConfig& mc = model.config();
  const Tensor x = load_image_for(model, image);
  const int y = cfg.get_int("class-label");
  const std::string out = cfg.get("out");
  io::ensure_dir(out);
  const bool overwrite = cfg.get_bool("overwrite");
  const std::uint64_t seed = cfg.get_u64("seed");

  // mid-schedule probe: timestep 500 of 1000 scaled to the configured T
  const int t_viz = std::min(mc.timesteps - 1, mc.timesteps / 2);
  const Tensor clip_frames = build_reference_clip(x, mc.frames, seed);
  const Tensor z0 = model.encode_frames(clip_frames).detach();
  Rng rng(Rng::mix(seed, 0x712A));
  const Tensor eps = Tensor::randn(z0.shape(), rng);
  const Tensor z_t = forward_noise(z0, t_viz, eps, model.schedule());
  const Tensor cond = model.encode_with_taps(x).latent;
  const auto den = model.denoise_with_taps(z_t, cond, t_viz, y);

  const int k = 3;
  const auto pca = pca_layer_viz(den.taps, k);

  io::Table meta;
  meta.header = {"block", "component", "explained_variance", "zero_variance"};
  std::vector<std::string> outputs;
  for (std::size_t b = 0; b < pca.size(); ++b) {
    char name[32];
    std::snprintf(name, sizeof name, "block_%02zu.png", b + 1);
    const std::string path = out + "/" + std::string(name);
    io::require_writable(path, overwrite);
    io::write_png(path, render_pca_grid(pca[b].projections, 8));
    outputs.push_back(path);
    for (int c = 0; c < k; ++c)
      meta.rows.push_back({std::to_string(b + 1), std::to_string(c + 1),
                           io::fmt_double(pca[b].explained_variance[c]),
                           pca[b].zero_variance[c] ? "1" : "0"});
  }
  const std::string meta_path = out + "/pca_components.csv";
  io::require_writable(meta_path, overwrite);
  io::write_csv(meta_path, meta);
  outputs.push_back(meta_path);

  json m;
  m["command"] = "visualize-layers";
  m["config"] = config_json(cfg);
  m["model_checksum"] = io::crc32_file(cfg.get("model"));
  m["inputs"] = {image};
  m["outputs"] = outputs;
  m["timestep"] = t_viz;
  const std::string manifest_path = out + "/manifest.json";
  io::require_writable(manifest_path, overwrite);
  write_manifest(manifest_path, std::move(m));
  return kOk;
}

}  // namespace dscloak::commands
