#include <gtest/gtest.h>

#include <cmath>

#include "esup/inr.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace esup;

namespace {

MlpShape toy_shape() {
  MlpShape s;
  s.in = 2;
  s.hidden = 8;
  s.hidden_layers = 1;
  s.out = 3;
  return s;
}

}  // namespace

TEST(SirenInit, WeightsWithinBoundsZeroBiases) {
  auto rng = rng_for(1, rng_stream::kInit, 0);
  const MlpShape shape;  // 2 -> 256 x3 -> 3
  const auto p = siren_init<double>(rng, shape);
  ASSERT_EQ(p.layers.size(), 4u);
  EXPECT_LE(p.layers[0].weight.cwiseAbs().maxCoeff(), 0.5);
  const double later = std::sqrt(6.0 / 256.0) / 30.0;
  for (std::size_t l = 1; l < 4; ++l) EXPECT_LE(p.layers[l].weight.cwiseAbs().maxCoeff(), later);
  for (const auto& l : p.layers) EXPECT_EQ(l.bias.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(p.all_finite());
  EXPECT_EQ(p.layers[1].weight.cols(), 256);
  EXPECT_EQ(p.layers[3].weight.rows(), 3);
}

TEST(SirenInit, SameSeedSameParameters) {
  auto r1 = rng_for(9, rng_stream::kInit, 0);
  auto r2 = rng_for(9, rng_stream::kInit, 0);
  const auto a = siren_init<float>(r1, toy_shape());
  const auto b = siren_init<float>(r2, toy_shape());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].weight, b.layers[l].weight);
    EXPECT_EQ(a.layers[l].bias, b.layers[l].bias);
  }
}

TEST(Forward, ZeroNetworkIsOneHalf) {
  auto rng = rng_for(2, rng_stream::kInit, 0);
  auto p = siren_init<double>(rng, toy_shape()).zeros_like();
  const auto grid = pixel_grid(4, 5);
  Mat<double> x(2, 20);
  for (std::size_t i = 0; i < 20; ++i) {
    x(0, static_cast<Eigen::Index>(i)) = grid.coords[i].x;
    x(1, static_cast<Eigen::Index>(i)) = grid.coords[i].y;
  }
  const auto y = forward(p, x);
  EXPECT_EQ(y.rows(), 3);
  for (Eigen::Index i = 0; i < y.size(); ++i) EXPECT_EQ(y(i), 0.5);
}

TEST(Forward, SingleUnitByHand) {
  SineMlpParams<double> p;
  p.omega0 = 30.0;
  p.layers.push_back({Mat<double>::Constant(1, 2, 0.4), Vec<double>::Constant(1, 0.1)});
  p.layers.push_back({Mat<double>::Constant(1, 1, 0.7), Vec<double>::Constant(1, -0.2)});
  Mat<double> x = Mat<double>::Zero(2, 1);
  const double z = 0.7 * std::sin(30.0 * 0.1) - 0.2;
  EXPECT_NEAR(forward(p, x)(0, 0), 1.0 / (1.0 + std::exp(-z)), 1e-15);
  x << 0.5, -0.25;
  const double z2 = 0.7 * std::sin(30.0 * (0.4 * 0.25 + 0.1)) - 0.2;
  EXPECT_NEAR(forward(p, x)(0, 0), 1.0 / (1.0 + std::exp(-z2)), 1e-15);
}

TEST(Forward, OutputInOpenUnitInterval) {
  auto rng = rng_for(4, rng_stream::kInit, 0);
  const auto p = siren_init<double>(rng, toy_shape());
  Mat<double> x = Mat<double>::Random(2, 50);
  const auto y = forward(p, x);
  EXPECT_GT(y.minCoeff(), 0.0);
  EXPECT_LT(y.maxCoeff(), 1.0);
}

TEST(Forward, NonFiniteParameterIsNumericError) {
  auto rng = rng_for(4, rng_stream::kInit, 0);
  auto p = siren_init<double>(rng, toy_shape());
  p.layers[0].weight(0, 0) = std::nan("");
  EXPECT_THROW(forward(p, Mat<double>(Mat<double>::Zero(2, 1))), NumericError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  auto rng = rng_for(5, rng_stream::kInit, 0);
  const auto p = siren_init<double>(rng, toy_shape());
  const Mat<double> x = Mat<double>::Random(2, 6);
  ForwardCache<double> cache;
  forward(p, x, &cache);
  const auto g = backward(p, cache, Mat<double>(Mat<double>::Zero(3, 6)));
  for (const auto& l : g.layers) {
    EXPECT_EQ(l.weight.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(l.bias.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Backward, LinearInUpstreamGradient) {
  auto rng = rng_for(6, rng_stream::kInit, 0);
  const auto p = siren_init<double>(rng, toy_shape());
  const Mat<double> x = Mat<double>::Random(2, 6);
  const Mat<double> g = Mat<double>::Random(3, 6);
  ForwardCache<double> cache;
  forward(p, x, &cache);
  const auto g1 = backward(p, cache, g);
  const auto g2 = backward(p, cache, Mat<double>(2.0 * g));
  for (std::size_t l = 0; l < g1.layers.size(); ++l) {
    EXPECT_TRUE(g2.layers[l].weight.isApprox(2.0 * g1.layers[l].weight, 1e-14));
    EXPECT_TRUE(g2.layers[l].bias.isApprox(2.0 * g1.layers[l].bias, 1e-14));
  }
}

TEST(Backward, ShapeMismatchIsArgumentError) {
  auto rng = rng_for(6, rng_stream::kInit, 0);
  const auto p = siren_init<double>(rng, toy_shape());
  ForwardCache<double> cache;
  forward(p, Mat<double>(Mat<double>::Random(2, 6)), &cache);
  EXPECT_THROW(backward(p, cache, Mat<double>(Mat<double>::Zero(3, 5))), ArgumentError);
}

TEST(Backward, MatchesFiniteDifferencesOnToyNet) {
  EXPECT_LT(esup::test::mlp_gradcheck(17, 8, 1), 1e-5);
}

TEST(Backward, MatchesFiniteDifferencesOnRandomNets) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_LT(esup::test::mlp_gradcheck(seed), 1e-5) << seed;
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto rng = rng_for(7, rng_stream::kInit, 0);
  auto p = siren_init<double>(rng, toy_shape());
  const auto before = p;
  auto st = AdamState<double>::init(p, 1e-3);
  adam_step(p, p.zeros_like(), st);
  for (std::size_t l = 0; l < p.layers.size(); ++l) EXPECT_EQ(p.layers[l].weight, before.layers[l].weight);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  auto rng = rng_for(7, rng_stream::kInit, 0);
  auto p = siren_init<double>(rng, toy_shape());
  const auto before = p;
  auto g = p.zeros_like();
  for (auto& l : g.layers) l.weight.setRandom();
  auto st = AdamState<double>::init(p, 1e-3);
  st.eps = 1e-14;
  adam_step(p, g, st);
  for (std::size_t l = 0; l < p.layers.size(); ++l)
    for (Eigen::Index i = 0; i < p.layers[l].weight.size(); ++i) {
      const double gi = g.layers[l].weight(i);
      const double step = p.layers[l].weight(i) - before.layers[l].weight(i);
      EXPECT_NEAR(step, -1e-3 * (gi > 0 ? 1.0 : -1.0), 1e-9);
    }
}

TEST(Adam, DeterministicFromSnapshot) {
  auto rng = rng_for(8, rng_stream::kInit, 0);
  auto p = siren_init<double>(rng, toy_shape());
  auto g = p.zeros_like();
  for (auto& l : g.layers) l.weight.setConstant(0.3);
  auto st = AdamState<double>::init(p, 1e-3);
  adam_step(p, g, st);
  auto p1 = p, p2 = p;
  auto s1 = st, s2 = st;
  adam_step(p1, g, s1);
  adam_step(p2, g, s2);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    EXPECT_EQ(p1.layers[l].weight, p2.layers[l].weight);
    EXPECT_EQ(s1.v.layers[l].weight, s2.v.layers[l].weight);
    EXPECT_GE(s1.v.layers[l].weight.minCoeff(), 0.0);
  }
}

TEST(MlpCheckpoint, RoundTripsThroughBytes) {
  auto rng = rng_for(10, rng_stream::kInit, 0);
  const auto p = siren_init<float>(rng, toy_shape());
  auto st = AdamState<float>::init(p, 1e-3);
  st.step = 12;
  const auto bytes = serialize_checkpoint(to_checkpoint(p, &st));
  const auto ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(ck), bytes);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 12u);
  const auto q = params_from_checkpoint<float>(ck, 30.0);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    EXPECT_EQ(q.layers[l].weight, p.layers[l].weight);
    EXPECT_EQ(q.layers[l].bias, p.layers[l].bias);
  }
}

TEST(MlpCheckpoint, TruncatedBytesAreFormatError) {
  auto rng = rng_for(10, rng_stream::kInit, 0);
  auto bytes = serialize_checkpoint(to_checkpoint(siren_init<float>(rng, toy_shape())));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
  EXPECT_THROW(deserialize_checkpoint("not a checkpoint"), FormatError);
}

namespace {

TrainConfig small_config(Strategy s, std::size_t iters) {
  TrainConfig c;
  c.iterations = iters;
  c.eval_interval = iters / 2;
  c.plan.strategy = s;
  c.plan.total_iters = iters;
  c.plan.rng_seed = 3;
  return c;
}

MlpShape small_net() {
  MlpShape s;
  s.hidden = 32;
  s.hidden_layers = 2;
  return s;
}

}  // namespace

TEST(FitImage, ExpansiveForwardCountIsHalfTheImage) {
  const auto img = resize_bilinear(load_image(esup::test::data_path("images_small/camera.png")), 32, 32);
  const auto anchor = extract_anchor(img, 0.25);
  const auto r = fit_image(img, small_config(Strategy::kExpansive, 20), anchor, small_net());
  const double per_iter = static_cast<double>(r.report.counters.field_queries) / 20.0;
  EXPECT_EQ(r.report.counters.field_queries, r.report.counters.rendered_rays);
  EXPECT_GE(per_iter, (0.8 * 0.25 + 0.25) * 1024);
  EXPECT_LE(per_iter, (1.2 * 0.25 + 0.25) * 1024);
  EXPECT_EQ(r.report.counters.reference_rays, 20u * 1024u);
  ASSERT_EQ(r.report.rows.size(), 2u);
  EXPECT_EQ(r.report.rows[0].iter, 10u);
  EXPECT_EQ(r.report.rows[1].iter, 20u);
}

TEST(FitImage, StandardForwardCountEqualsBudget) {
  const auto img = resize_bilinear(load_image(esup::test::data_path("images_small/brick.png")), 24, 24);
  auto cfg = small_config(Strategy::kStandard, 10);
  cfg.batch_budget = 100;
  const auto r = fit_image(img, cfg, AnchorMask::none(24, 24), small_net());
  EXPECT_EQ(r.report.counters.rendered_rays, 1000u);
  EXPECT_EQ(r.report.counters.peak_batch, 100u);
}

TEST(FitImage, FiniteBudgetScalesWithSupervisedFraction) {
  const auto img = resize_bilinear(load_image(esup::test::data_path("images_small/camera.png")), 32, 32);
  const auto anchor = extract_anchor(img, 0.25);
  auto cfg = small_config(Strategy::kExpansive, 10);
  cfg.batch_budget = 400;
  const auto r = fit_image(img, cfg, anchor, small_net());
  EXPECT_EQ(r.report.counters.rendered_rays, 10u * 200u);
  EXPECT_EQ(r.report.counters.reference_rays, 10u * 400u);
  EXPECT_DOUBLE_EQ(r.report.supervised_fraction, 0.5);
}

TEST(FitImage, LearnsAndIsDeterministic) {
  const auto img = resize_bilinear(load_image(esup::test::data_path("images_small/chelsea.png")), 24, 24);
  const auto anchor = extract_anchor(img, 0.25);
  auto cfg = small_config(Strategy::kExpansive, 200);
  cfg.learning_rate = 1e-3;
  const auto a = fit_image(img, cfg, anchor, small_net());
  const auto b = fit_image(img, cfg, anchor, small_net());
  EXPECT_EQ(to_csv(a.report.rows), to_csv(b.report.rows));
  EXPECT_EQ(serialize_checkpoint(a.report.checkpoint), serialize_checkpoint(b.report.checkpoint));
  EXPECT_GT(a.report.rows.back().psnr_db, a.report.rows.front().psnr_db);
  for (const auto& row : a.report.rows) EXPECT_EQ(row.step_ms, 0.0);
}

TEST(FitImage, AnchorStrategyNeedsAnchors) {
  const ImageBuffer img(16, 16, 3, 0.5);
  EXPECT_THROW(fit_image(img, small_config(Strategy::kExpansive, 4), AnchorMask::none(16, 16), small_net()),
               ArgumentError);
  EXPECT_THROW(fit_image(img, small_config(Strategy::kStandard, 4), AnchorMask::none(8, 8), small_net()),
               ArgumentError);
}

TEST(FitImage, DivergenceRaisesTrainingErrorWithCheckpoint) {
  const auto img = resize_bilinear(load_image(esup::test::data_path("images_small/coins.png")), 16, 16);
  auto cfg = small_config(Strategy::kStandard, 50);
  cfg.eval_interval = 1;
  cfg.learning_rate = 1e300;
  try {
    fit_image(img, cfg, AnchorMask::none(16, 16), small_net());
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    EXPECT_FALSE(e.last_good().layers.empty());
    EXPECT_EQ(e.exit_code(), ExitCode::kDivergence);
  }
}
