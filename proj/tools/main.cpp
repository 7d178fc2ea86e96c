// dscloak: dual-space image cloaking against image-conditioned video
// diffusion models. Subcommands: train, protect, evaluate, ablate,
// visualize-layers.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dscloak/commands.hpp"
#include "dscloak/io.hpp"
#include "dscloak/version.hpp"

namespace {

using dscloak::io::RunConfig;

struct CommonFlags {
  std::string config;
  std::vector<std::pair<std::string, std::string>> overrides;
};

// Registers a flag that overlays one config key; CLI flags take precedence
// over config file values.
void add_override(CLI::App* app, CommonFlags& fl, const std::string& flag,
                  const std::string& key, const std::string& desc) {
  app->add_option_function<std::string>(
         flag,
         [&fl, key](const std::string& v) { fl.overrides.emplace_back(key, v); },
         desc)
      ->type_name("VALUE");
}

void add_common(CLI::App* app, CommonFlags& fl) {
  app->add_option("--config", fl.config, "configuration file (key = value)")
      ->type_name("PATH");
  add_override(app, fl, "--seed", "seed", "run seed");
  add_override(app, fl, "--out", "out", "output directory");
  add_override(app, fl, "--jobs", "jobs", "bounded worker pool size");
  add_override(app, fl, "--model", "model", "model checkpoint path");
  app->add_flag_callback(
      "--overwrite",
      [&fl]() { fl.overrides.emplace_back("overwrite", "true"); },
      "allow overwriting existing outputs");
}

void add_attack_flags(CLI::App* app, CommonFlags& fl) {
  add_override(app, fl, "--space", "space",
               "perturbation space: rgb|lab|freq|lab+freq|rgb+lab|rgb+freq|rgb+lab+freq");
  add_override(app, fl, "--budget-rgb", "budget-rgb", "L-inf pixel budget (e.g. 16/255)");
  add_override(app, fl, "--budget-lab", "budget-lab", "chroma budget as a fraction of the a*/b* span");
  add_override(app, fl, "--mask-fraction", "mask-fraction", "low-frequency mask area fraction");
  add_override(app, fl, "--iters", "iters", "optimization iterations");
  add_override(app, fl, "--lr", "lr", "optimizer learning rate");
  add_override(app, fl, "--targeted", "targeted", "decoy image path (enables the targeted mode)");
  app->add_flag_callback(
      "--literal-mask",
      [&fl]() { fl.overrides.emplace_back("literal-mask", "true"); },
      "mask the whole perturbed spectrum instead of the perturbation");
}

RunConfig resolve(const CommonFlags& fl) {
  RunConfig cfg = fl.config.empty() ? RunConfig::from_defaults()
                                    : RunConfig::load(fl.config);
  for (const auto& [k, v] : fl.overrides) cfg.set(k, v);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-space image cloaking against image-to-video diffusion models"};
  app.set_version_flag("--version", dscloak::kLibraryVersion);
  app.require_subcommand(1);

  CommonFlags fl_train, fl_protect, fl_eval, fl_ablate, fl_viz;
  std::vector<std::string> protect_images;
  std::string eval_clean, eval_protected, viz_image;

  CLI::App* train = app.add_subcommand("train", "train the victim model on synthetic clips");
  add_common(train, fl_train);
  train->add_flag_callback(
      "--resume",
      [&fl_train]() { fl_train.overrides.emplace_back("resume", "true"); },
      "continue training from the existing checkpoint");

  CLI::App* protect = app.add_subcommand("protect", "optimize protective perturbations for images");
  add_common(protect, fl_protect);
  add_attack_flags(protect, fl_protect);
  protect->add_option("images", protect_images, "input PNG images")
      ->required()
      ->type_name("PNG");

  CLI::App* evaluate = app.add_subcommand("evaluate", "robustness and degradation report");
  add_common(evaluate, fl_eval);
  evaluate->add_option("clean", eval_clean, "clean image or directory")->required();
  evaluate->add_option("protected", eval_protected, "protected image or directory")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "emit the ablation tables");
  add_common(ablate, fl_ablate);
  add_attack_flags(ablate, fl_ablate);

  CLI::App* viz = app.add_subcommand("visualize-layers", "PCA grids of denoiser block features");
  add_common(viz, fl_viz);
  viz->add_option("image", viz_image, "conditioning image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dscloak::commands::kInvalid;
  }

  try {
    if (*train) return dscloak::commands::cmd_train(resolve(fl_train));
    if (*protect)
      return dscloak::commands::cmd_protect(resolve(fl_protect), protect_images);
    if (*evaluate)
      return dscloak::commands::cmd_evaluate(resolve(fl_eval), eval_clean,
                                             eval_protected);
    if (*ablate) return dscloak::commands::cmd_ablate(resolve(fl_ablate));
    if (*viz)
      return dscloak::commands::cmd_visualize_layers(resolve(fl_viz), viz_image);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dscloak::commands::kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dscloak::commands::kPartialFailure;
  }
  return dscloak::commands::kInvalid;
}
