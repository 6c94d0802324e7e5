#pragma once

// Canny edge detection and the progressive threshold search that sizes the
// anchor area to a requested pixel fraction.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "esup/error.hpp"
#include "esup/image.hpp"

namespace esup {

struct EdgeDetectorParams {
  double blur_sigma = 1.4;
  // low hysteresis threshold = low_high_ratio * high
  double low_high_ratio = 0.4;

  void validate() const {
    require(blur_sigma > 0.0, "EdgeDetectorParams: blur_sigma must be > 0");
    require(low_high_ratio > 0.0 && low_high_ratio < 1.0, "EdgeDetectorParams: low_high_ratio must be in (0,1)");
  }
};

struct ThresholdSchedule {
  double mu = 15.0;
  int max_iters = 50;
  double band_lower = 0.8;
  double band_upper = 1.2;
  // Starting threshold, in units of the per-image maximum gradient magnitude.
  double initial_threshold = 0.3;

  void validate() const {
    require(mu > 0.0, "ThresholdSchedule: mu must be > 0");
    require(max_iters >= 1, "ThresholdSchedule: max_iters must be >= 1");
    require(band_lower < 1.0 && 1.0 < band_upper, "ThresholdSchedule: band must straddle 1");
    require(initial_threshold > 0.0, "ThresholdSchedule: initial_threshold must be > 0");
  }
};

struct ThresholdResult {
  double threshold = 0.0;
  BinaryMask mask;
  int iterations = 0;
  // E(T) / (xi_a |I|)
  double ratio = 0.0;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, ThresholdResult best) : Error(what), best_(std::move(best)) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kConvergence; }
  const ThresholdResult& best() const noexcept { return best_; }

 private:
  ThresholdResult best_;
};

inline std::vector<double> gaussian_kernel(double sigma) {
  require(sigma > 0.0, "gaussian_kernel: sigma must be > 0");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur, radius ceil(3 sigma), edge-clamped.
inline ScalarField gaussian_blur(const ScalarField& f, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(f.height);
  const auto w = static_cast<std::ptrdiff_t>(f.width);

  ScalarField tmp(f.height, f.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * f.clamped(y, x + i);
      tmp.data[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  ScalarField out(f.height, f.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp.clamped(y + i, x);
      out.data[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  return out;
}

struct Gradients {
  ScalarField magnitude;
  // atan2(gy, gx) in radians, y axis pointing down the rows.
  ScalarField direction;
};

inline Gradients sobel_gradients(const ScalarField& f) {
  require(f.height >= 3 && f.width >= 3, "sobel_gradients: field must be at least 3x3");
  Gradients g{ScalarField(f.height, f.width), ScalarField(f.height, f.width)};
  for (std::size_t y = 0; y < f.height; ++y) {
    for (std::size_t x = 0; x < f.width; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y);
      const auto xx = static_cast<std::ptrdiff_t>(x);
      const double a = f.clamped(yy - 1, xx - 1), b = f.clamped(yy - 1, xx), c = f.clamped(yy - 1, xx + 1);
      const double d = f.clamped(yy, xx - 1), e = f.clamped(yy, xx + 1);
      const double p = f.clamped(yy + 1, xx - 1), q = f.clamped(yy + 1, xx), s = f.clamped(yy + 1, xx + 1);
      const double gx = (c + 2 * e + s) - (a + 2 * d + p);
      const double gy = (p + 2 * q + s) - (a + 2 * b + c);
      g.magnitude.at(y, x) = std::sqrt(gx * gx + gy * gy);
      g.direction.at(y, x) = std::atan2(gy, gx);
    }
  }
  return g;
}

// Thin ridges: a pixel survives if it is a maximum along its gradient direction
// (quantized to 4 bins). Ties keep the pixel on the negative side only, so a
// symmetric two-pixel ridge collapses to one pixel.
inline ScalarField non_max_suppression(const Gradients& g) {
  const auto& m = g.magnitude;
  ScalarField out(m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      const double v = m.at(y, x);
      if (v <= 0.0) continue;
      double angle = g.direction.at(y, x) * 180.0 / std::numbers::pi;
      if (angle < 0) angle += 180.0;
      int dy = 0, dx = 0;
      if (angle < 22.5 || angle >= 157.5) {
        dx = 1;
      } else if (angle < 67.5) {
        dy = 1, dx = 1;
      } else if (angle < 112.5) {
        dy = 1;
      } else {
        dy = 1, dx = -1;
      }
      const auto yy = static_cast<std::ptrdiff_t>(y);
      const auto xx = static_cast<std::ptrdiff_t>(x);
      const double fwd = m.clamped(yy + dy, xx + dx);
      const double back = m.clamped(yy - dy, xx - dx);
      if (v >= fwd && v > back) out.at(y, x) = v;
    }
  }
  return out;
}

// Double-threshold hysteresis with 8-neighbour connectivity.
inline BinaryMask hysteresis(const ScalarField& nms, double low, double high) {
  BinaryMask mask(nms.height, nms.width);
  std::vector<std::size_t> stack;
  for (std::size_t k = 0; k < nms.size(); ++k) {
    if (nms.data[k] > 0.0 && nms.data[k] >= high) {
      mask.data[k] = 1;
      stack.push_back(k);
    }
  }
  const auto h = static_cast<std::ptrdiff_t>(nms.height);
  const auto w = static_cast<std::ptrdiff_t>(nms.width);
  while (!stack.empty()) {
    const std::size_t k = stack.back();
    stack.pop_back();
    const auto y = static_cast<std::ptrdiff_t>(k) / w;
    const auto x = static_cast<std::ptrdiff_t>(k) % w;
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        const std::ptrdiff_t ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const auto nk = static_cast<std::size_t>(ny * w + nx);
        if (!mask.data[nk] && nms.data[nk] > 0.0 && nms.data[nk] >= low) {
          mask.data[nk] = 1;
          stack.push_back(nk);
        }
      }
    }
  }
  return mask;
}

// Threshold-independent part of Canny: blur, gradients, suppression, with
// magnitudes normalized so the image maximum is 1.
struct EdgeResponse {
  ScalarField suppressed;
  double max_magnitude = 0.0;
};

inline EdgeResponse edge_response(const ScalarField& f, const EdgeDetectorParams& params) {
  params.validate();
  auto g = sobel_gradients(gaussian_blur(f, params.blur_sigma));
  const double peak = *std::max_element(g.magnitude.data.begin(), g.magnitude.data.end());
  EdgeResponse r{non_max_suppression(g), peak};
  if (peak > 0.0) {
    for (auto& v : r.suppressed.data) v /= peak;
  }
  return r;
}

inline BinaryMask threshold_response(const EdgeResponse& r, double high, const EdgeDetectorParams& params) {
  require(high > 0.0, "canny: high threshold must be > 0");
  if (r.max_magnitude <= 0.0) return BinaryMask(r.suppressed.height, r.suppressed.width);
  return hysteresis(r.suppressed, params.low_high_ratio * high, high);
}

inline BinaryMask canny(const ScalarField& f, double high, const EdgeDetectorParams& params = {}) {
  require(high > 0.0, "canny: high threshold must be > 0");
  return threshold_response(edge_response(f, params), high, params);
}

// Searches for a threshold whose edge count E(T) lands within the band around
// xi_a * |I|. Multiplicative update T <- T * (1 + mu * (E(T) - xi_a|I|) / |I|);
// the factor is floored at 0.1 so the threshold stays positive, and mu is halved
// every second sign flip of the count discrepancy.
inline ThresholdResult adapt_threshold(const ScalarField& f, double xi_a, const ThresholdSchedule& sched = {},
                                       const EdgeDetectorParams& params = {}) {
  require(xi_a > 0.0 && xi_a < 1.0, "adapt_threshold: xi_a must be in (0,1)");
  sched.validate();
  const auto response = edge_response(f, params);
  const double total = static_cast<double>(f.size());
  const double target = xi_a * total;

  double threshold = sched.initial_threshold;
  double mu = sched.mu;
  int prev_sign = 0;
  int flips = 0;
  ThresholdResult best;
  double best_dist = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= sched.max_iters; ++it) {
    BinaryMask mask = threshold_response(response, threshold, params);
    const double count = static_cast<double>(mask.count());
    const double ratio = count / target;
    if (std::abs(ratio - 1.0) < best_dist) {
      best_dist = std::abs(ratio - 1.0);
      best = ThresholdResult{threshold, mask, it, ratio};
    }
    if (ratio >= sched.band_lower && ratio <= sched.band_upper) {
      return ThresholdResult{threshold, std::move(mask), it, ratio};
    }
    const double discrepancy = (count - target) / total;
    const int sign = discrepancy > 0 ? 1 : -1;
    if (prev_sign != 0 && sign != prev_sign && ++flips == 2) {
      mu *= 0.5;
      flips = 0;
    }
    prev_sign = sign;
    threshold *= std::max(0.1, 1.0 + mu * discrepancy);
  }
  throw ConvergenceError("adapt_threshold: edge count did not reach the target band within " +
                             std::to_string(sched.max_iters) + " iterations (best ratio " +
                             std::to_string(best.ratio) + ")",
                         std::move(best));
}

// Edge count for a fixed threshold; E(T) in the threshold search.
inline std::size_t edge_count(const ScalarField& f, double threshold, const EdgeDetectorParams& params = {}) {
  return canny(f, threshold, params).count();
}

}  // namespace esup
