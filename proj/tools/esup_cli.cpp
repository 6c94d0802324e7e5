// esup: command-line front end.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "esup/commands.hpp"

namespace {

struct Override {
  const char* flag;
  const char* key;
  const char* help;
};

const Override kOverrides[] = {
    {"--out-dir", "out_dir", "output directory"},
    {"--run-id", "run_id", "run identifier written to the CSV"},
    {"--seed", "seed", "RNG seed"},
    {"--strategy", "strategy", "standard | expansive | edge-resample | es-no-*"},
    {"--xi-a", "xi_a", "anchor area ratio"},
    {"--xi-s", "xi_s", "source area ratio"},
    {"--beta", "beta", "scales xi-a and xi-s"},
    {"--mu", "mu", "threshold adaptation rate"},
    {"--total-iters", "total_iters", "training iterations T"},
    {"--eval-interval", "eval_interval", "iterations between metric rows"},
    {"--lr", "learning_rate", "Adam learning rate"},
    {"--batch-budget", "batch_budget", "rays per iteration under full supervision (0 = all pixels)"},
    {"--resize", "resize", "resize the input to a square of this side"},
    {"--hidden", "hidden", "hidden width"},
    {"--hidden-layers", "hidden_layers", "hidden layer count"},
    {"--omega0", "omega0", "sine frequency"},
    {"--views", "views", "training views"},
    {"--view-size", "view_size", "view side in pixels"},
    {"--grid-res", "grid_resolution", "voxels per axis"},
    {"--grid-bound", "grid_bound", "grid half-extent"},
    {"--train-samples", "train_samples", "samples per training ray"},
    {"--eval-samples", "eval_samples", "samples per evaluation ray"},
    {"--arc", "arc_deg", "azimuth arc covered by training views"},
    {"--strategies", "strategies", "bench: comma-separated strategies"},
    {"--betas", "betas", "bench: comma-separated beta values"},
};

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::vector<std::string> values = std::vector<std::string>(std::size(kOverrides));
  bool timing = false;
  bool no_cache = false;

  void attach(CLI::App* a) {
    app = a;
    a->add_option("--config", config_path, "key=value config file");
    for (std::size_t i = 0; i < std::size(kOverrides); ++i)
      a->add_option(kOverrides[i].flag, values[i], kOverrides[i].help);
    a->add_flag("--timing", timing, "record wall-clock timing (reports are no longer byte-stable)");
    a->add_flag("--no-cache", no_cache, "ignore and overwrite the anchor cache");
  }

  esup::RunConfig config(const std::string& name, const std::string& input) const {
    auto cfg = esup::RunConfig::for_command(name);
    if (!config_path.empty()) cfg.merge_text(esup::read_text(config_path));
    cfg.command = name;
    if (!input.empty()) cfg.input = input;
    for (std::size_t i = 0; i < std::size(kOverrides); ++i)
      if (app->count(kOverrides[i].flag) > 0) cfg.set(kOverrides[i].key, values[i]);
    if (timing) cfg.deterministic = false;
    if (no_cache) cfg.no_cache = true;
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expansive supervision toolkit"};
  app.require_subcommand(1);

  std::string input;
  Command fit_image, fit_nerf, bench, extract;
  auto add = [&](Command& c, const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    c.attach(sub);
    sub->add_option("input", input, name == std::string("fit-nerf") ? "scene file" : "image file")->required();
  };
  add(fit_image, "fit-image", "fit a sine MLP to an image");
  add(fit_nerf, "fit-nerf", "train a voxel radiance field on an analytic sphere scene");
  add(bench, "bench", "run fit-image across strategies and beta values");
  add(extract, "extract-anchor", "extract the anchor mask of an image");

  std::string run_dir, baseline_dir;
  auto* report = app.add_subcommand("report", "summarize a run directory");
  report->add_option("run_dir", run_dir, "run output directory")->required();
  report->add_option("--baseline", baseline_dir, "standard run to compare step time against");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(esup::ExitCode::kArgument);
  }

  try {
    if (fit_image.app->parsed()) {
      esup::run_fit_image(fit_image.config("fit-image", input), std::cout);
    } else if (fit_nerf.app->parsed()) {
      esup::run_fit_nerf(fit_nerf.config("fit-nerf", input), std::cout);
    } else if (bench.app->parsed()) {
      const auto rows = esup::run_bench(bench.config("bench", input), std::cout);
      for (const auto& r : rows)
        std::cout << r.strategy << " beta=" << esup::format_real(r.beta) << ' ' << r.status
                  << " rendered_rays=" << r.counters.rendered_rays << '\n';
    } else if (extract.app->parsed()) {
      esup::run_extract_anchor(extract.config("extract-anchor", input), std::cout);
    } else if (report->parsed()) {
      esup::run_report(run_dir, baseline_dir, std::cout);
    }
  } catch (const esup::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(esup::ExitCode::kFailure);
  }
  return 0;
}
