#pragma once

// Image quality metrics, error tail statistics and the resource-savings model.

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "esup/edge.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"

namespace esup {

inline constexpr double kPsnrCapDb = 99.0;

inline double mse(const ImageBuffer& a, const ImageBuffer& b) {
  require(a.same_shape(b), "mse: image dimensions differ");
  require(!a.empty(), "mse: empty image");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data().size());
}

// Peak 1; identical images report the cap.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  const double m = mse(a, b);
  if (m <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / m));
}

namespace detail {

// Separable "valid" correlation with a symmetric 1-D kernel.
inline ScalarField filter_valid(const ScalarField& f, std::span<const double> k) {
  const std::size_t r = k.size();
  const std::size_t w1 = f.width - r + 1;
  const std::size_t h1 = f.height - r + 1;
  ScalarField tmp(f.height, w1);
  for (std::size_t y = 0; y < f.height; ++y) {
    for (std::size_t x = 0; x < w1; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) s += k[i] * f.at(y, x + i);
      tmp.at(y, x) = s;
    }
  }
  ScalarField out(h1, w1);
  for (std::size_t y = 0; y < h1; ++y) {
    for (std::size_t x = 0; x < w1; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) s += k[i] * tmp.at(y + i, x);
      out.at(y, x) = s;
    }
  }
  return out;
}

inline ScalarField multiply(const ScalarField& a, const ScalarField& b) {
  ScalarField out(a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

}  // namespace detail

// Mean SSIM of two luma fields over all fully-covered 11x11 Gaussian windows
// (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
inline double ssim(const ScalarField& a, const ScalarField& b) {
  require(a.height == b.height && a.width == b.width, "ssim: image dimensions differ");
  require(a.height >= 11 && a.width >= 11, "ssim: images must be at least 11x11");
  // 11-tap Gaussian, sigma 1.5
  std::vector<double> k(11);
  double sum = 0.0;
  for (int i = -5; i <= 5; ++i) {
    k[static_cast<std::size_t>(i + 5)] = std::exp(-0.5 * i * i / (1.5 * 1.5));
    sum += k[static_cast<std::size_t>(i + 5)];
  }
  for (auto& v : k) v /= sum;

  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto mu_a = detail::filter_valid(a, k);
  const auto mu_b = detail::filter_valid(b, k);
  const auto aa = detail::filter_valid(detail::multiply(a, a), k);
  const auto bb = detail::filter_valid(detail::multiply(b, b), k);
  const auto ab = detail::filter_valid(detail::multiply(a, b), k);

  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a.data[i], mb = mu_b.data[i];
    const double va = aa.data[i] - ma * ma;
    const double vb = bb.data[i] - mb * mb;
    const double cov = ab.data[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  require(a.same_shape(b), "ssim: image dimensions differ");
  return ssim(to_luma(a), to_luma(b));
}

// Sorted per-pixel errors and the loss share of the smallest q fraction.
class TailStats {
 public:
  explicit TailStats(std::vector<double> errors) : sorted_(std::move(errors)) {
    require(!sorted_.empty(), "tail_stats: empty error list");
    require(std::all_of(sorted_.begin(), sorted_.end(), [](double e) { return e >= 0.0 && std::isfinite(e); }),
            "tail_stats: errors must be finite and non-negative");
    std::sort(sorted_.begin(), sorted_.end());
    prefix_.resize(sorted_.size() + 1, 0.0);
    for (std::size_t i = 0; i < sorted_.size(); ++i) prefix_[i + 1] = prefix_[i] + sorted_[i];
  }

  std::size_t size() const { return sorted_.size(); }
  double total() const { return prefix_.back(); }
  const std::vector<double>& sorted() const { return sorted_; }

  // Share of the total loss from the floor(q n) smallest errors. All-zero
  // errors are treated as uniform.
  double fraction(double q) const {
    require(q >= 0.0 && q <= 1.0, "TailStats::fraction: q must be in [0,1]");
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(sorted_.size()) + 1e-9));
    const std::size_t kk = std::min(k, sorted_.size());
    if (total() <= 0.0) return static_cast<double>(kk) / static_cast<double>(sorted_.size());
    return prefix_[kk] / total();
  }

  struct Point {
    double pixel_fraction;
    double loss_fraction;
  };

  std::vector<Point> summary(std::span<const double> qs = kDefaultQuantiles) const {
    std::vector<Point> out;
    for (double q : qs) out.push_back({q, fraction(q)});
    return out;
  }

  static constexpr double kDefaultQuantiles[] = {0.5, 0.9, 0.99, 0.994};

 private:
  std::vector<double> sorted_;
  std::vector<double> prefix_;
};

inline TailStats tail_stats(std::vector<double> errors) { return TailStats(std::move(errors)); }

struct RunCounters {
  // rays rendered for supervision, summed over iterations
  std::uint64_t rendered_rays = 0;
  // field evaluations (MLP forward passes or grid queries)
  std::uint64_t field_queries = 0;
  // rays full supervision would have rendered over the same iterations
  std::uint64_t reference_rays = 0;
  std::uint64_t iterations = 0;
  // largest batch held at once
  std::uint64_t peak_batch = 0;

  void add_iteration(std::uint64_t rays, std::uint64_t queries, std::uint64_t reference) {
    rendered_rays += rays;
    field_queries += queries;
    reference_rays += reference;
    ++iterations;
    peak_batch = std::max(peak_batch, rays);
  }

  friend bool operator==(const RunCounters&, const RunCounters&) = default;
};

struct TimingSample {
  double render_ms = 0.0;  // field forward + backward over the batch
  double step_ms = 0.0;    // whole iteration
};

struct ResourceModel {
  double rho = 0.0;               // |R'| / |R|
  std::optional<double> v;        // measured render share of step time
  std::optional<double> predicted_savings;
  std::optional<double> measured_savings;  // vs baseline mean step time
  bool comparable = false;

  static ResourceModel from(double rho, std::optional<double> v) {
    require(rho >= 0.0 && rho <= 1.0, "ResourceModel: rho must be in [0,1]");
    ResourceModel m;
    m.rho = rho;
    if (v) {
      require(*v >= 0.0 && *v <= 1.0, "ResourceModel: v must be in [0,1]");
      m.v = v;
      m.predicted_savings = (1.0 - rho) * *v;
    }
    return m;
  }
};

inline std::optional<double> measured_v(std::span<const TimingSample> samples) {
  double render = 0.0, step = 0.0;
  for (const auto& s : samples) {
    render += s.render_ms;
    step += s.step_ms;
  }
  if (samples.empty() || step <= 0.0) return std::nullopt;
  return std::clamp(render / step, 0.0, 1.0);
}

inline std::optional<double> mean_step_ms(std::span<const TimingSample> samples) {
  if (samples.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& t : samples) s += t.step_ms;
  return s / static_cast<double>(samples.size());
}

// rho from counters, v from timing; savings are "not comparable" without a
// baseline run that has timing.
inline ResourceModel resource_report(const RunCounters& counters, std::span<const TimingSample> timing,
                                     std::optional<double> baseline_mean_step_ms = std::nullopt) {
  require(counters.reference_rays > 0, "resource_report: counters have no reference ray count");
  const double rho = std::min(1.0, static_cast<double>(counters.rendered_rays) /
                                       static_cast<double>(counters.reference_rays));
  auto m = ResourceModel::from(rho, measured_v(timing));
  const auto mean = mean_step_ms(timing);
  if (baseline_mean_step_ms && *baseline_mean_step_ms > 0.0 && mean) {
    m.measured_savings = 1.0 - *mean / *baseline_mean_step_ms;
    m.comparable = true;
  }
  return m;
}

struct AffineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

// Least-squares y = slope * x + intercept; R^2 is 1 for an exact fit.
inline AffineFit fit_affine(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "fit_affine: need >= 2 paired samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0, "fit_affine: x has no spread");
  AffineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += r * r;
  }
  f.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

}  // namespace esup
