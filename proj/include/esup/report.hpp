#pragma once

// Training reports and the shared CSV schema.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "esup/checkpoint.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"
#include "esup/metrics.hpp"
#include "esup/supervision.hpp"

namespace esup {

inline constexpr const char* kCsvHeader =
    "run_id,strategy,beta,iter,psnr_db,ssim,loss_total,anchor_term,source_term,weight_t,"
    "rendered_rays_cum,field_queries_cum,step_ms";

struct MetricRow {
  std::string run_id;
  std::string strategy;
  double beta = 1.0;
  std::uint64_t iter = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  LossBreakdown loss;
  std::uint64_t rendered_rays_cum = 0;
  std::uint64_t field_queries_cum = 0;
  double step_ms = 0.0;
};

inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline std::string csv_line(const MetricRow& r) {
  std::ostringstream s;
  s << r.run_id << ',' << r.strategy << ',' << format_real(r.beta) << ',' << r.iter << ',' << format_real(r.psnr_db)
    << ',' << format_real(r.ssim) << ',' << format_real(r.loss.total) << ',' << format_real(r.loss.anchor_term) << ','
    << format_real(r.loss.source_term) << ',' << format_real(r.loss.weight_t) << ',' << r.rendered_rays_cum << ','
    << r.field_queries_cum << ',' << format_real(r.step_ms);
  return s.str();
}

inline std::string to_csv(const std::vector<MetricRow>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows) out += csv_line(r) + "\n";
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream s(line);
  while (std::getline(s, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

namespace detail {

inline void parse_row(const std::vector<std::string>& c, MetricRow& r) {
  r.run_id = c[0];
  r.strategy = c[1];
  r.beta = std::stod(c[2]);
  r.iter = std::stoull(c[3]);
  r.psnr_db = std::stod(c[4]);
  r.ssim = std::stod(c[5]);
  r.loss.total = std::stod(c[6]);
  r.loss.anchor_term = std::stod(c[7]);
  r.loss.source_term = std::stod(c[8]);
  r.loss.weight_t = std::stod(c[9]);
  r.rendered_rays_cum = std::stoull(c[10]);
  r.field_queries_cum = std::stoull(c[11]);
  r.step_ms = std::stod(c[12]);
}

}  // namespace detail

inline std::vector<MetricRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("report csv: unexpected header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 13) throw FormatError("report csv: expected 13 columns");
    MetricRow r;
    try {
      detail::parse_row(c, r);
    } catch (const std::logic_error&) {
      throw FormatError("report csv: malformed number in '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

struct TrainReport {
  std::map<std::string, std::string> config;
  std::vector<MetricRow> rows;
  RunCounters counters;
  std::vector<TimingSample> timing;
  // per-iteration supervised fraction |R'| / |R|, averaged over the run
  double supervised_fraction = 0.0;
  std::size_t anchor_pixels = 0;
  ImageBuffer final_render;
  Checkpoint checkpoint;
  std::string checkpoint_path;

  double final_psnr() const { return rows.empty() ? 0.0 : rows.back().psnr_db; }
  double final_ssim() const { return rows.empty() ? 0.0 : rows.back().ssim; }

  ResourceModel resources(std::optional<double> baseline_mean_step_ms = std::nullopt) const {
    return resource_report(counters, timing, baseline_mean_step_ms);
  }
};

// key=value summary of counters and the resource model.
inline std::string resource_summary(const TrainReport& r, std::optional<double> baseline_mean_step_ms = std::nullopt) {
  const auto m = r.resources(baseline_mean_step_ms);
  std::ostringstream s;
  s << "iterations=" << r.counters.iterations << '\n'
    << "rendered_rays=" << r.counters.rendered_rays << '\n'
    << "field_queries=" << r.counters.field_queries << '\n'
    << "reference_rays=" << r.counters.reference_rays << '\n'
    << "peak_batch=" << r.counters.peak_batch << '\n'
    << "anchor_pixels=" << r.anchor_pixels << '\n'
    << "supervised_fraction=" << format_real(r.supervised_fraction) << '\n'
    << "rho=" << format_real(m.rho) << '\n'
    << "v=" << (m.v ? format_real(*m.v) : "not measured") << '\n'
    << "predicted_savings=" << (m.predicted_savings ? format_real(*m.predicted_savings) : "not measured") << '\n'
    << "mean_step_ms=" << (mean_step_ms(r.timing) ? format_real(*mean_step_ms(r.timing)) : "not measured") << '\n'
    << "measured_savings=" << (m.comparable ? format_real(*m.measured_savings) : "not comparable") << '\n';
  return s.str();
}

}  // namespace esup
