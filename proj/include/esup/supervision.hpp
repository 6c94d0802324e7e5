#pragma once

// Expansive loss estimate: anchor error plus a scheduled expansion of the
// sampled source error, and the per-ray gradient multipliers that realize it.

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "esup/edge.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"
#include "esup/selection.hpp"

namespace esup {

// (1 - xi_a) / xi_a: scales the source error up to the whole non-anchor area.
inline double gamma_sa(double xi_a_eff) {
  require(xi_a_eff > 0.0 && xi_a_eff < 1.0, "gamma_sa: xi_a must be in (0,1)");
  return (1.0 - xi_a_eff) / xi_a_eff;
}

struct ExpansiveSchedule {
  double gamma = 3.0;
  std::size_t total_iters = 1;

  static ExpansiveSchedule from_plan(const SupervisionPlan& plan) {
    return {gamma_sa(apply_beta(plan).xi_a), plan.total_iters};
  }
};

// gamma + (t/T)(1 - gamma): decays linearly from gamma to 1 at t = T.
inline double expansive_weight(std::size_t t, const ExpansiveSchedule& sched) {
  require(sched.total_iters >= 1, "expansive_weight: total_iters must be >= 1");
  require(t <= sched.total_iters, "expansive_weight: t must be <= total_iters");
  const double frac = static_cast<double>(t) / static_cast<double>(sched.total_iters);
  return sched.gamma + frac * (1.0 - sched.gamma);
}

struct LossBreakdown {
  double anchor_term = 0.0;
  double source_term = 0.0;
  double weight_t = 1.0;
  double total = 0.0;
};

struct GroupWeights {
  double anchor = 1.0;
  double source = 1.0;
};

// Multipliers on the anchor and source squared-error sums for one iteration.
inline GroupWeights group_weights(const ExpansiveSchedule& sched, Strategy strategy, std::size_t t) {
  switch (strategy) {
    case Strategy::kStandard:
    case Strategy::kEdgeResample:
    case Strategy::kNoExpansive:
      return {1.0, 1.0};
    case Strategy::kNoAnchorSup:
      return {0.0, expansive_weight(t, sched)};
    case Strategy::kNoSourceSup:
      return {1.0, 0.0};
    default:
      return {1.0, expansive_weight(t, sched)};
  }
}

// pred and truth hold one color (channels values) per ray, rays ordered as
// TrainBatch::all_ids(). Squared errors are summed, not averaged.
template <typename T>
LossBreakdown expansive_loss(std::span<const T> pred, std::span<const T> truth, std::size_t channels,
                             const TrainBatch& batch, const ExpansiveSchedule& sched, Strategy strategy) {
  require(channels >= 1, "expansive_loss: channels must be >= 1");
  require(pred.size() == truth.size(), "expansive_loss: prediction/truth length mismatch");
  require(pred.size() == batch.size() * channels, "expansive_loss: predictions not aligned with batch");
  const std::size_t na = batch.anchor_ids.size();
  double anchor = 0.0;
  double source = 0.0;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    double e = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double d = static_cast<double>(pred[r * channels + c]) - static_cast<double>(truth[r * channels + c]);
      e += d * d;
    }
    (r < na ? anchor : source) += e;
  }
  LossBreakdown out;
  const auto w = group_weights(sched, strategy, batch.t);
  out.weight_t = strategy == Strategy::kNoSourceSup ? expansive_weight(batch.t, sched) : w.source;
  out.anchor_term = w.anchor == 0.0 ? 0.0 : anchor;
  out.source_term = w.source == 0.0 ? 0.0 : source;
  out.total = out.anchor_term + out.weight_t * out.source_term;
  return out;
}

template <typename T>
LossBreakdown expansive_loss(const std::vector<T>& pred, const std::vector<T>& truth, std::size_t channels,
                             const TrainBatch& batch, const ExpansiveSchedule& sched, Strategy strategy) {
  return expansive_loss(std::span<const T>(pred), std::span<const T>(truth), channels, batch, sched, strategy);
}

// Coefficient m_r per ray such that d/dpred of sum_r m_r ||pred_r - truth_r||^2
// is the gradient of the expansive loss.
inline std::vector<double> loss_gradient_weights(const TrainBatch& batch, const ExpansiveSchedule& sched,
                                                 Strategy strategy) {
  const auto w = group_weights(sched, strategy, batch.t);
  std::vector<double> m(batch.size(), w.source);
  std::fill_n(m.begin(), batch.anchor_ids.size(), w.anchor);
  return m;
}

// EGRA-like baseline: pixel sampling probability proportional to blurred Sobel
// magnitude plus a floor of 1% of the mean magnitude.
inline std::vector<double> edge_resample_weights(const ImageBuffer& img, const EdgeDetectorParams& params = {}) {
  params.validate();
  const auto g = sobel_gradients(gaussian_blur(to_luma(img), params.blur_sigma));
  const auto& m = g.magnitude.data;
  const double mean = std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(m.size());
  const double eps = mean > 0.0 ? 0.01 * mean : 1.0;
  std::vector<double> p(m.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    p[i] = m[i] + eps;
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace esup
