#pragma once

// Orchestration behind the command-line subcommands. Each run writes under
// out_dir: report.csv, config.txt, resources.txt, checkpoints/, renders/, masks/.

#include <filesystem>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "esup/config.hpp"
#include "esup/edge.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"
#include "esup/inr.hpp"
#include "esup/metrics.hpp"
#include "esup/nerf.hpp"
#include "esup/report.hpp"
#include "esup/selection.hpp"

namespace esup {

namespace fs = std::filesystem;

inline void prepare_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  for (const char* sub : {"checkpoints", "renders", "masks"}) {
    fs::create_directories(fs::path(cfg.out_dir) / sub, ec);
    if (ec) throw IoError("cannot create '" + (fs::path(cfg.out_dir) / sub).string() + "': " + ec.message());
  }
  save_config((fs::path(cfg.out_dir) / "config.txt").string(), cfg);
}

inline std::string out_path(const RunConfig& cfg, const std::string& rel) {
  return (fs::path(cfg.out_dir) / rel).string();
}

// key=value lines
inline std::map<std::string, std::string> read_key_values(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline void write_run_outputs(const RunConfig& cfg, const TrainReport& report) {
  write_text(out_path(cfg, "report.csv"), to_csv(report.rows));
  write_text(out_path(cfg, "resources.txt"), resource_summary(report));
  save_checkpoint(out_path(cfg, "checkpoints/final.ckpt"), report.checkpoint);
}

inline ImageBuffer field_to_gray(const ScalarField& f, double scale) {
  ImageBuffer img(f.height, f.width, 1);
  for (std::size_t k = 0; k < f.size(); ++k) img.pixel(k, 0) = std::clamp(f.data[k] * scale, 0.0, 1.0);
  return img;
}

inline ImageBuffer load_input_image(const RunConfig& cfg) {
  if (cfg.input.empty()) throw ArgumentError("an input image is required");
  ImageBuffer img = load_image(cfg.input);
  if (cfg.resize > 0 && (img.height() != cfg.resize || img.width() != cfg.resize))
    img = resize_bilinear(img, cfg.resize, cfg.resize);
  return img;
}

// Anchor for an image run at the beta-scaled ratio, or an empty mask for
// strategies that ignore it.
inline AnchorMask image_anchor(const RunConfig& cfg, const ImageBuffer& img, std::ostream& log) {
  const auto plan = cfg.plan();
  if (!uses_anchor(plan.strategy)) return AnchorMask::none(img.height(), img.width());
  const double xi = apply_beta(plan).xi_a;
  bool hit = false;
  auto a = extract_anchor_cached(cfg.input, img, xi, cfg.schedule(), {}, cfg.no_cache, &hit);
  log << "anchor: " << a.size() << " px (" << format_real(a.xi_a_effective) << " of image), threshold "
      << format_real(a.threshold) << ", " << a.iterations << " iterations" << (hit ? ", cached" : "") << '\n';
  return a;
}

inline TrainReport run_fit_image(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const ImageBuffer img = load_input_image(cfg);
  prepare_out_dir(cfg);
  const AnchorMask anchor = image_anchor(cfg, img, log);
  if (anchor.size() > 0)
    save_pgm(out_path(cfg, "masks/anchor.pgm"), anchor.mask, {"threshold=" + format_real(anchor.threshold)});

  auto train = cfg.train_config();
  try {
    auto result = fit_image(img, train, anchor, cfg.shape());
    auto& report = result.report;
    report.config = cfg.to_map();
    write_run_outputs(cfg, report);
    save_png(out_path(cfg, "renders/final.png"), report.final_render);
    const auto err = squared_error_map(report.final_render, img);
    const double peak = *std::max_element(err.data.begin(), err.data.end());
    save_png(out_path(cfg, "renders/error.png"), field_to_gray(err, peak > 0.0 ? 1.0 / peak : 0.0));
    log << "final psnr " << format_real(report.final_psnr()) << " dB, ssim " << format_real(report.final_ssim())
        << ", rendered rays " << report.counters.rendered_rays << '\n';
    return std::move(report);
  } catch (const TrainingError& e) {
    save_checkpoint(out_path(cfg, "checkpoints/last_good.ckpt"), e.last_good());
    throw;
  }
}

struct NerfScenario {
  AnalyticScene scene;
  std::vector<NerfView> views;
  NerfView held_out;
};

inline NerfScenario make_nerf_scenario(const RunConfig& cfg) {
  if (cfg.input.empty()) throw ArgumentError("a scene file is required");
  NerfScenario s;
  s.scene = parse_scene(read_text(cfg.input));
  const auto rig = cfg.rig();
  for (const auto& cam : rig.training(cfg.views)) s.views.push_back({cam, render_view(s.scene, cam)});
  const auto cam = rig.held_out(cfg.views);
  s.held_out = {cam, render_view(s.scene, cam)};
  return s;
}

inline TrainReport run_fit_nerf(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto sc = make_nerf_scenario(cfg);
  prepare_out_dir(cfg);
  const auto plan = cfg.plan();
  std::vector<AnchorMask> anchors;
  if (uses_anchor(plan.strategy)) {
    const double xi = apply_beta(plan).xi_a;
    for (std::size_t v = 0; v < sc.views.size(); ++v) {
      try {
        anchors.push_back(extract_anchor(sc.views[v].image, xi, cfg.schedule()));
      } catch (const ConvergenceError& e) {
        save_pgm(out_path(cfg, "masks/view" + std::to_string(v) + ".pgm"), e.best().mask);
        throw;
      }
      save_pgm(out_path(cfg, "masks/view" + std::to_string(v) + ".pgm"), anchors.back().mask);
    }
  }
  for (std::size_t v = 0; v < sc.views.size(); ++v)
    save_png(out_path(cfg, "renders/view" + std::to_string(v) + ".png"), sc.views[v].image);
  save_png(out_path(cfg, "renders/heldout_truth.png"), sc.held_out.image);

  auto opt = cfg.nerf_options();
  opt.background = sc.scene.background;
  if (opt.ray_budget == 0) opt.ray_budget = 1024;
  auto train = cfg.train_config();
  train.batch_budget.reset();
  try {
    auto result = fit_nerf(sc.views, sc.held_out, train, anchors, opt);
    auto& report = result.report;
    report.config = cfg.to_map();
    write_run_outputs(cfg, report);
    save_png(out_path(cfg, "renders/heldout.png"), report.final_render);
    log << "held-out psnr " << format_real(report.final_psnr()) << " dB, ssim " << format_real(report.final_ssim())
        << ", rendered rays " << report.counters.rendered_rays << ", field queries " << report.counters.field_queries
        << '\n';
    return std::move(report);
  } catch (const TrainingError& e) {
    save_checkpoint(out_path(cfg, "checkpoints/last_good.ckpt"), e.last_good());
    throw;
  }
}

// Writes masks/anchor.pgm; on convergence failure the best mask is written
// before the error propagates.
inline AnchorMask run_extract_anchor(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const ImageBuffer img = load_input_image(cfg);
  prepare_out_dir(cfg);
  const double xi = apply_beta(cfg.plan()).xi_a;
  const auto sched = cfg.schedule();
  const std::string mask_path = out_path(cfg, "masks/anchor.pgm");
  try {
    bool hit = false;
    auto a = extract_anchor_cached(cfg.input, img, xi, sched, {}, cfg.no_cache, &hit);
    save_pgm(mask_path, a.mask, {"threshold=" + format_real(a.threshold), "iterations=" + std::to_string(a.iterations)});
    log << "threshold=" << format_real(a.threshold) << " iterations=" << a.iterations
        << " ratio=" << format_real(static_cast<double>(a.size()) / (xi * static_cast<double>(img.pixel_count())))
        << " anchor_pixels=" << a.size() << " mu=" << format_real(sched.mu) << (hit ? " cached" : "") << '\n';
    return a;
  } catch (const ConvergenceError& e) {
    save_pgm(mask_path, e.best().mask, {"threshold=" + format_real(e.best().threshold), "best-effort"});
    log << "threshold=" << format_real(e.best().threshold) << " iterations=" << e.best().iterations
        << " ratio=" << format_real(e.best().ratio) << " mu=" << format_real(sched.mu) << " converged=false\n";
    throw;
  }
}

struct BenchRow {
  std::string strategy;
  double beta = 1.0;
  std::string status = "ok";
  RunCounters counters;
  double final_psnr = 0.0;
  double supervised_fraction = 0.0;
  ResourceModel resources;
};

inline constexpr const char* kSavingsHeader =
    "strategy,beta,status,rendered_rays,reference_rays,rho,supervised_fraction,final_psnr_db,v,predicted_savings,"
    "measured_savings";

// Runs fit-image for every (strategy, beta) with one shared seed. Sub-run
// failures are recorded and the bench continues.
inline std::vector<BenchRow> run_bench(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto strategies = split_list(cfg.strategies);
  std::vector<double> betas;
  for (const auto& b : split_list(cfg.betas)) {
    RunConfig probe = cfg;
    probe.set("beta", b);
    betas.push_back(probe.beta);
  }
  for (const auto& s : strategies) parse_strategy(s);
  prepare_out_dir(cfg);

  std::vector<BenchRow> rows;
  std::vector<MetricRow> all_metrics;
  std::map<double, double> baseline_step_ms;  // standard mean step per beta
  for (const auto& s : strategies) {
    for (double beta : betas) {
      RunConfig sub = cfg;
      sub.command = "fit-image";
      sub.strategy = s;
      sub.beta = beta;
      std::ostringstream id;
      id << s << "_b" << format_real(beta);
      sub.run_id = id.str();
      sub.out_dir = (fs::path(cfg.out_dir) / "runs" / sub.run_id).string();
      BenchRow row;
      row.strategy = s;
      row.beta = beta;
      try {
        const auto report = run_fit_image(sub, log);
        row.counters = report.counters;
        row.final_psnr = report.final_psnr();
        row.supervised_fraction = report.supervised_fraction;
        std::optional<double> base;
        if (s != "standard" && baseline_step_ms.count(beta)) base = baseline_step_ms[beta];
        row.resources = report.resources(base);
        if (s == "standard")
          if (auto m = mean_step_ms(report.timing)) baseline_step_ms[beta] = *m;
        all_metrics.insert(all_metrics.end(), report.rows.begin(), report.rows.end());
      } catch (const Error& e) {
        row.status = std::string("error: ") + e.what();
        std::replace(row.status.begin(), row.status.end(), ',', ';');
        log << sub.run_id << " failed: " << e.what() << '\n';
      }
      rows.push_back(std::move(row));
    }
  }
  write_text(out_path(cfg, "report.csv"), to_csv(all_metrics));

  std::ostringstream sv;
  sv << kSavingsHeader << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
  for (const auto& r : rows) {
    sv << r.strategy << ',' << format_real(r.beta) << ',' << r.status << ',' << r.counters.rendered_rays << ','
       << r.counters.reference_rays << ',' << (r.status == "ok" ? format_real(r.resources.rho) : "") << ','
       << (r.status == "ok" ? format_real(r.supervised_fraction) : "") << ','
       << (r.status == "ok" ? format_real(r.final_psnr) : "") << ',' << opt(r.resources.v) << ','
       << opt(r.resources.predicted_savings) << ',' << opt(r.resources.measured_savings) << '\n';
  }
  write_text(out_path(cfg, "savings.csv"), sv.str());

  // rendered rays against beta, per strategy
  std::ostringstream lin;
  for (const auto& s : strategies) {
    std::vector<double> x, y;
    for (const auto& r : rows)
      if (r.strategy == s && r.status == "ok") {
        x.push_back(r.beta);
        y.push_back(static_cast<double>(r.counters.rendered_rays));
      }
    if (x.size() < 2 || std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) continue;
    const auto fit = fit_affine(x, y);
    lin << s << " slope=" << format_real(fit.slope) << " intercept=" << format_real(fit.intercept)
        << " r_squared=" << format_real(fit.r_squared) << '\n';
  }
  write_text(out_path(cfg, "linearity.txt"), lin.str());
  return rows;
}

// Summarizes a finished run directory, optionally against a standard baseline run.
inline void run_report(const std::string& run_dir, const std::string& baseline_dir, std::ostream& out) {
  const auto rows = parse_csv(read_text((fs::path(run_dir) / "report.csv").string()));
  const auto res = read_key_values((fs::path(run_dir) / "resources.txt").string());
  if (rows.empty()) throw FormatError("report: '" + run_dir + "' has no metric rows");
  const auto& last = rows.back();
  auto get = [&](const std::string& k) {
    auto it = res.find(k);
    return it == res.end() ? std::string("missing") : it->second;
  };
  out << "run_id=" << last.run_id << '\n'
      << "strategy=" << last.strategy << '\n'
      << "beta=" << format_real(last.beta) << '\n'
      << "iterations=" << last.iter << '\n'
      << "final_psnr_db=" << format_real(last.psnr_db) << '\n'
      << "final_ssim=" << format_real(last.ssim) << '\n'
      << "rendered_rays=" << get("rendered_rays") << '\n'
      << "field_queries=" << get("field_queries") << '\n'
      << "rho=" << get("rho") << '\n'
      << "v=" << get("v") << '\n'
      << "predicted_savings=" << get("predicted_savings") << '\n';
  std::string measured = "not comparable";
  if (!baseline_dir.empty()) {
    const auto base = read_key_values((fs::path(baseline_dir) / "resources.txt").string());
    const auto bm = base.find("mean_step_ms");
    const auto rm = res.find("mean_step_ms");
    if (bm != base.end() && rm != res.end() && bm->second != "not measured" && rm->second != "not measured") {
      const double b = std::stod(bm->second), r = std::stod(rm->second);
      if (b > 0.0) measured = format_real(1.0 - r / b);
    }
  }
  out << "measured_savings=" << measured << '\n';
}

}  // namespace esup
