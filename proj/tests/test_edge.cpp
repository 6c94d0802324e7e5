#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "esup/edge.hpp"
#include "helpers.hpp"

using namespace esup;

namespace {

ScalarField impulse(std::size_t side, double v = 1.0) {
  ScalarField f(side, side);
  f.at(side / 2, side / 2) = v;
  return f;
}

ScalarField vertical_step(std::size_t h, std::size_t w, std::size_t col, double step) {
  ScalarField f(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = col; x < w; ++x) f.at(y, x) = step;
  return f;
}

ScalarField square(std::size_t side, std::size_t lo, std::size_t hi) {
  ScalarField f(side, side);
  for (std::size_t y = lo; y < hi; ++y)
    for (std::size_t x = lo; x < hi; ++x) f.at(y, x) = 1.0;
  return f;
}

}  // namespace

TEST(GaussianKernel, NormalizedAndSymmetric) {
  const auto k = gaussian_kernel(1.4);
  double s = 0.0;
  for (double v : k) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  for (std::size_t i = 0; i < k.size(); ++i) EXPECT_DOUBLE_EQ(k[i], k[k.size() - 1 - i]);
}

TEST(GaussianBlur, ConstantFieldUnchanged) {
  const auto out = gaussian_blur(ScalarField(9, 12, 0.37), 1.4);
  for (double v : out.data) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(GaussianBlur, ImpulseMatchesDirect2dConvolution) {
  const std::size_t n = 15;
  const auto f = impulse(n);
  const auto out = gaussian_blur(f, 1.0);
  // direct 2-D convolution with the unnormalized isotropic Gaussian, radius 3
  double norm = 0.0;
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) norm += std::exp(-0.5 * (dx * dx + dy * dy));
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const int dy = static_cast<int>(y) - 7, dx = static_cast<int>(x) - 7;
      const double expect = (std::abs(dx) <= 3 && std::abs(dy) <= 3) ? std::exp(-0.5 * (dx * dx + dy * dy)) / norm : 0.0;
      EXPECT_NEAR(out.at(y, x), expect, 1e-12) << y << "," << x;
    }
  }
  const auto k = gaussian_kernel(1.0);
  EXPECT_NEAR(out.at(7, 7), k[k.size() / 2] * k[k.size() / 2], 1e-15);
}

TEST(GaussianBlur, InteriorImpulsePreservesSum) {
  const auto out = gaussian_blur(impulse(21, 2.5), 1.4);
  double s = 0.0;
  for (double v : out.data) s += v;
  EXPECT_NEAR(s, 2.5, 1e-9);
}

TEST(Sobel, ConstantFieldHasZeroMagnitude) {
  const auto g = sobel_gradients(ScalarField(6, 6, 0.8));
  for (double v : g.magnitude.data) EXPECT_EQ(v, 0.0);
}

TEST(Sobel, VerticalStepGivesFourTimesStep) {
  // Unnormalized kernels: the two columns beside a unit step see 1 + 2 + 1.
  const auto g = sobel_gradients(vertical_step(8, 10, 5, 0.5));
  for (std::size_t y = 0; y < 8; ++y) {
    EXPECT_DOUBLE_EQ(g.magnitude.at(y, 4), 2.0);
    EXPECT_DOUBLE_EQ(g.magnitude.at(y, 5), 2.0);
    EXPECT_DOUBLE_EQ(g.magnitude.at(y, 2), 0.0);
    EXPECT_DOUBLE_EQ(g.direction.at(y, 4), 0.0);
  }
}

TEST(Sobel, RotationRotatesMagnitudeAndDirection) {
  const auto f = esup::test::wave_field(9, 9);
  ScalarField r(9, 9);
  // r(y, x) = f(x, 8 - y): 90 degree rotation
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x) r.at(y, x) = f.at(8 - x, y);
  const auto gf = sobel_gradients(f);
  const auto gr = sobel_gradients(r);
  for (std::size_t y = 1; y < 8; ++y) {
    for (std::size_t x = 1; x < 8; ++x) {
      EXPECT_NEAR(gr.magnitude.at(y, x), gf.magnitude.at(8 - x, y), 1e-12);
      if (gf.magnitude.at(8 - x, y) < 1e-9) continue;
      double diff = std::fmod(gr.direction.at(y, x) - gf.direction.at(8 - x, y), std::numbers::pi);
      if (diff < 0) diff += std::numbers::pi;
      EXPECT_NEAR(diff, std::numbers::pi / 2, 1e-9);
    }
  }
}

TEST(Canny, ConstantImageHasNoEdges) { EXPECT_EQ(canny(ScalarField(16, 16, 0.3), 0.1).count(), 0u); }

TEST(Canny, SquareEdgesHugTheBoundary) {
  const std::size_t lo = 16, hi = 48;
  const auto mask = canny(square(64, lo, hi), 0.3);
  ASSERT_GT(mask.count(), 0u);
  std::size_t near = 0;
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      if (!mask.at(y, x)) continue;
      // distance to the boundary of [lo, hi) x [lo, hi), boundary at half-integer positions
      const double fy = y + 0.5, fx = x + 0.5;
      const bool inside = fy > lo && fy < hi && fx > lo && fx < hi;
      double d;
      if (inside) {
        d = std::min({fy - lo, hi - fy, fx - lo, hi - fx});
      } else {
        const double dy = std::max({lo - fy, 0.0, fy - hi});
        const double dx = std::max({lo - fx, 0.0, fx - hi});
        d = std::hypot(dx, dy);
      }
      if (d <= 2.0) ++near;
    }
  }
  EXPECT_GE(static_cast<double>(near), 0.9 * static_cast<double>(mask.count()));
}

TEST(Canny, RaisingHighNeverAddsPixels) {
  const auto f = to_luma(load_image(esup::test::data_path("images_small/camera.png")));
  const auto r = edge_response(f, {});
  BinaryMask prev = threshold_response(r, 0.01, {});
  for (double high = 0.02; high <= 1.0; high += 0.01) {
    const auto cur = threshold_response(r, high, {});
    for (std::size_t k = 0; k < cur.size(); ++k) ASSERT_LE(cur.data[k], prev.data[k]) << "high=" << high;
    prev = cur;
  }
}

TEST(AdaptThreshold, CheckerboardConvergesWhenFeasible) {
  const auto f = to_luma(esup::test::checkerboard(64, 8));
  const double target = 0.25 * 4096;
  // exhaustive sweep: a feasible threshold exists
  bool feasible = false;
  const auto r = edge_response(f, {});
  for (double t = 0.005; t <= 1.0 && !feasible; t += 0.005) {
    const double ratio = threshold_response(r, t, {}).count() / target;
    feasible = ratio >= 0.8 && ratio <= 1.2;
  }
  ASSERT_TRUE(feasible);
  const auto res = adapt_threshold(f, 0.25);
  EXPECT_GE(res.ratio, 0.8);
  EXPECT_LE(res.ratio, 1.2);
  EXPECT_LE(res.iterations, 50);
  EXPECT_NEAR(res.mask.count() / target, res.ratio, 1e-12);
}

TEST(AdaptThreshold, ConstantImageRaisesWithBestMask) {
  try {
    adapt_threshold(ScalarField(32, 32, 0.5), 0.25);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_EQ(e.exit_code(), ExitCode::kConvergence);
    EXPECT_EQ(e.best().mask.count(), 0u);
    EXPECT_EQ(e.best().mask.size(), 1024u);
  }
}

TEST(AdaptThreshold, ConvergedRatioAlwaysInBand) {
  for (const char* name : {"camera", "brick", "coins", "page"}) {
    const auto f = to_luma(load_image(esup::test::data_path(std::string("images/") + name + ".png")));
    for (double xi : {0.075, 0.125, 0.25}) {
      const auto r = adapt_threshold(f, xi);
      EXPECT_GE(r.ratio, 0.8) << name << " xi=" << xi;
      EXPECT_LE(r.ratio, 1.2) << name << " xi=" << xi;
    }
  }
}

TEST(AdaptThreshold, RejectsBadArguments) {
  const ScalarField f(16, 16, 0.0);
  EXPECT_THROW(adapt_threshold(f, 0.0), ArgumentError);
  EXPECT_THROW(adapt_threshold(f, 1.0), ArgumentError);
  ThresholdSchedule s;
  s.mu = 0.0;
  EXPECT_THROW(adapt_threshold(f, 0.25, s), ArgumentError);
}
