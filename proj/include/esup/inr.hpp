#pragma once

// Sinusoidal MLP image fitter: (x, y) -> color, with hand-written reverse mode
// and Adam. Activations are stored feature-major (features x batch).

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "esup/checkpoint.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"
#include "esup/metrics.hpp"
#include "esup/report.hpp"
#include "esup/rng.hpp"
#include "esup/selection.hpp"
#include "esup/supervision.hpp"

namespace esup {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct DenseLayer {
  Mat<S> weight;  // out x in
  Vec<S> bias;    // out
};

struct MlpShape {
  std::size_t in = 2;
  std::size_t hidden = 256;
  std::size_t hidden_layers = 3;
  std::size_t out = 3;
  double omega0 = 30.0;

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{in};
    for (std::size_t i = 0; i < hidden_layers; ++i) w.push_back(hidden);
    w.push_back(out);
    return w;
  }
};

template <typename S>
struct SineMlpParams {
  std::vector<DenseLayer<S>> layers;
  S omega0 = S(30);

  std::size_t in_dim() const { return static_cast<std::size_t>(layers.front().weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(layers.back().weight.rows()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
  }

  template <typename T>
  SineMlpParams<T> cast() const {
    SineMlpParams<T> p;
    p.omega0 = static_cast<T>(omega0);
    for (const auto& l : layers) p.layers.push_back({l.weight.template cast<T>(), l.bias.template cast<T>()});
    return p;
  }

  // Same shapes, all zeros.
  SineMlpParams zeros_like() const {
    SineMlpParams p;
    p.omega0 = omega0;
    for (const auto& l : layers)
      p.layers.push_back({Mat<S>::Zero(l.weight.rows(), l.weight.cols()), Vec<S>::Zero(l.bias.size())});
    return p;
  }
};

// First layer U(-1/fan_in, 1/fan_in); later layers U(-sqrt(6/fan_in)/omega0, +...); zero biases.
template <typename S>
SineMlpParams<S> siren_init(CounterRng& rng, const MlpShape& shape = {}) {
  require(shape.in >= 1 && shape.out >= 1 && shape.hidden >= 1, "siren_init: empty layer");
  require(shape.omega0 > 0.0, "siren_init: omega0 must be > 0");
  const auto w = shape.widths();
  SineMlpParams<S> p;
  p.omega0 = static_cast<S>(shape.omega0);
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const double fan_in = static_cast<double>(w[l]);
    const double bound = l == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / shape.omega0;
    DenseLayer<S> layer{Mat<S>(w[l + 1], w[l]), Vec<S>::Zero(static_cast<Eigen::Index>(w[l + 1]))};
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
        layer.weight(r, c) = static_cast<S>(rng.uniform(-bound, bound));
    p.layers.push_back(std::move(layer));
  }
  return p;
}

template <typename S>
struct ForwardCache {
  Mat<S> input;             // in x B
  std::vector<Mat<S>> pre;  // hidden pre-activations W x + b
  std::vector<Mat<S>> act;  // hidden activations sin(omega0 * pre)
  Mat<S> output;            // out x B, after the sigmoid
};

// Hidden layers sin(omega0 (W x + b)); output sigmoid(W x + b).
template <typename S>
Mat<S> forward(const SineMlpParams<S>& params, const Mat<S>& coords, ForwardCache<S>* cache = nullptr) {
  require(!params.layers.empty(), "forward: empty network");
  require(static_cast<std::size_t>(coords.rows()) == params.in_dim(), "forward: coordinate dimension mismatch");
  if (!params.all_finite()) throw NumericError("forward: non-finite network parameter");
  const std::size_t hidden = params.layers.size() - 1;
  if (cache) {
    cache->input = coords;
    cache->pre.resize(hidden);
    cache->act.resize(hidden);
  }
  Mat<S> x = coords;
  for (std::size_t l = 0; l < hidden; ++l) {
    Mat<S> z = params.layers[l].weight * x;
    z.colwise() += params.layers[l].bias;
    Mat<S> a = (params.omega0 * z.array()).sin().matrix();
    if (cache) {
      cache->pre[l] = std::move(z);
      cache->act[l] = a;
    }
    x = std::move(a);
  }
  Mat<S> z = params.layers.back().weight * x;
  z.colwise() += params.layers.back().bias;
  Mat<S> y = (S(1) / (S(1) + (-z.array()).exp())).matrix();
  if (cache) cache->output = y;
  return y;
}

// Reverse mode for the forward map; grad_out is dLoss/dOutput (out x B).
template <typename S>
SineMlpParams<S> backward(const SineMlpParams<S>& params, const ForwardCache<S>& cache, const Mat<S>& grad_out) {
  const std::size_t hidden = params.layers.size() - 1;
  require(cache.pre.size() == hidden && cache.act.size() == hidden, "backward: cache does not match network");
  require(grad_out.rows() == cache.output.rows() && grad_out.cols() == cache.output.cols(),
          "backward: gradient shape does not match forward output");
  require(static_cast<std::size_t>(grad_out.rows()) == params.out_dim(), "backward: output dimension mismatch");

  SineMlpParams<S> g;
  g.omega0 = params.omega0;
  g.layers.resize(params.layers.size());
  Mat<S> dz = (grad_out.array() * cache.output.array() * (S(1) - cache.output.array())).matrix();
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const Mat<S>& prev = l == 0 ? cache.input : cache.act[l - 1];
    g.layers[l].weight = dz * prev.transpose();
    g.layers[l].bias = dz.rowwise().sum();
    if (l > 0) {
      Mat<S> da = params.layers[l].weight.transpose() * dz;
      dz = (da.array() * params.omega0 * (params.omega0 * cache.pre[l - 1].array()).cos()).matrix();
    }
  }
  return g;
}

template <typename S>
struct AdamState {
  SineMlpParams<S> m;
  SineMlpParams<S> v;
  std::uint64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(const SineMlpParams<S>& params, double lr) {
    AdamState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    s.lr = lr;
    return s;
  }
};

namespace detail {

template <typename Derived, typename GDerived, typename MDerived, typename VDerived>
void adam_update(Eigen::MatrixBase<Derived>& p, const Eigen::MatrixBase<GDerived>& g, Eigen::MatrixBase<MDerived>& m,
                 Eigen::MatrixBase<VDerived>& v, double lr, double b1, double b2, double eps, double bc1, double bc2) {
  using S = typename Derived::Scalar;
  m.derived().array() = S(b1) * m.array() + S(1 - b1) * g.array();
  v.derived().array() = S(b2) * v.array() + S(1 - b2) * g.array().square();
  p.derived().array() -= S(lr) * (m.array() / S(bc1)) / ((v.array() / S(bc2)).sqrt() + S(eps));
}

}  // namespace detail

// Bias-corrected Adam.
template <typename S>
void adam_step(SineMlpParams<S>& params, const SineMlpParams<S>& grads, AdamState<S>& state) {
  require(grads.layers.size() == params.layers.size() && state.m.layers.size() == params.layers.size(),
          "adam_step: shape mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    require(g.weight.rows() == p.weight.rows() && g.weight.cols() == p.weight.cols() && g.bias.size() == p.bias.size(),
            "adam_step: shape mismatch");
    detail::adam_update(p.weight, g.weight, state.m.layers[l].weight, state.v.layers[l].weight, state.lr, state.beta1,
                        state.beta2, state.eps, bc1, bc2);
    detail::adam_update(p.bias, g.bias, state.m.layers[l].bias, state.v.layers[l].bias, state.lr, state.beta1,
                        state.beta2, state.eps, bc1, bc2);
  }
}

namespace detail {

template <typename S>
CheckpointLayer to_checkpoint_layer(const DenseLayer<S>& l) {
  CheckpointLayer c;
  c.rows = static_cast<std::uint32_t>(l.weight.rows());
  c.cols = static_cast<std::uint32_t>(l.weight.cols());
  c.weights.reserve(static_cast<std::size_t>(l.weight.size()));
  for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
    for (Eigen::Index k = 0; k < l.weight.cols(); ++k) c.weights.push_back(static_cast<float>(l.weight(r, k)));
  for (Eigen::Index r = 0; r < l.bias.size(); ++r) c.biases.push_back(static_cast<float>(l.bias(r)));
  return c;
}

template <typename S>
DenseLayer<S> from_checkpoint_layer(const CheckpointLayer& c) {
  require(c.biases.size() == c.rows, "checkpoint: bias shape mismatch");
  DenseLayer<S> l{Mat<S>(c.rows, c.cols), Vec<S>(static_cast<Eigen::Index>(c.rows))};
  for (std::uint32_t r = 0; r < c.rows; ++r) {
    for (std::uint32_t k = 0; k < c.cols; ++k) l.weight(r, k) = static_cast<S>(c.weights[r * c.cols + k]);
    l.bias(r) = static_cast<S>(c.biases[r]);
  }
  return l;
}

}  // namespace detail

template <typename S>
Checkpoint to_checkpoint(const SineMlpParams<S>& params, const AdamState<S>* adam = nullptr) {
  Checkpoint ck;
  ck.version = kCheckpointVersionMlp;
  for (const auto& l : params.layers) ck.layers.push_back(detail::to_checkpoint_layer(l));
  if (adam) {
    OptimizerBlock o;
    for (const auto& l : adam->m.layers) o.first_moment.push_back(detail::to_checkpoint_layer(l));
    for (const auto& l : adam->v.layers) o.second_moment.push_back(detail::to_checkpoint_layer(l));
    o.step = adam->step;
    ck.optimizer = std::move(o);
  }
  return ck;
}

// omega0 is not part of the container; pass the value used for training.
template <typename S>
SineMlpParams<S> params_from_checkpoint(const Checkpoint& ck, double omega0) {
  require(!ck.is_grid(), "params_from_checkpoint: checkpoint holds a radiance grid");
  require(!ck.layers.empty(), "params_from_checkpoint: no layers");
  SineMlpParams<S> p;
  p.omega0 = static_cast<S>(omega0);
  for (const auto& l : ck.layers) p.layers.push_back(detail::from_checkpoint_layer<S>(l));
  for (std::size_t l = 1; l < p.layers.size(); ++l)
    require(p.layers[l].weight.cols() == p.layers[l - 1].weight.rows(), "params_from_checkpoint: layer chain broken");
  return p;
}

struct TrainConfig {
  std::size_t iterations = 5000;
  double learning_rate = 5e-4;
  std::size_t eval_interval = 500;
  SupervisionPlan plan;
  // nullopt: full anchor area + source sample (or every pixel for standard)
  BatchBudget batch_budget;
  // Deterministic mode records no wall-clock timing so reports are byte-stable.
  bool deterministic = true;
  std::string run_id = "run";

  void validate() const {
    plan.validate();
    require(iterations >= 1, "TrainConfig: iterations must be >= 1");
    require(iterations == plan.total_iters, "TrainConfig: iterations must equal plan.total_iters");
    require(eval_interval >= 1, "TrainConfig: eval_interval must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), "TrainConfig: learning_rate must be finite and > 0");
  }
};

// Thrown when the loss turns non-finite; carries the parameters from the last
// evaluation checkpoint.
class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, Checkpoint last_good, std::size_t last_good_iter)
      : NumericError(what), last_good_(std::move(last_good)), last_good_iter_(last_good_iter) {}
  const Checkpoint& last_good() const noexcept { return last_good_; }
  std::size_t last_good_iter() const noexcept { return last_good_iter_; }

 private:
  Checkpoint last_good_;
  std::size_t last_good_iter_;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace detail

template <typename S>
Mat<S> coordinate_matrix(std::size_t h, std::size_t w) {
  const auto grid = pixel_grid(h, w);
  Mat<S> x(2, static_cast<Eigen::Index>(grid.coords.size()));
  for (std::size_t i = 0; i < grid.coords.size(); ++i) {
    x(0, static_cast<Eigen::Index>(i)) = static_cast<S>(grid.coords[i].x);
    x(1, static_cast<Eigen::Index>(i)) = static_cast<S>(grid.coords[i].y);
  }
  return x;
}

template <typename S>
Mat<S> color_matrix(const ImageBuffer& img) {
  Mat<S> c(static_cast<Eigen::Index>(img.channels()), static_cast<Eigen::Index>(img.pixel_count()));
  for (std::size_t p = 0; p < img.pixel_count(); ++p)
    for (std::size_t ch = 0; ch < img.channels(); ++ch)
      c(static_cast<Eigen::Index>(ch), static_cast<Eigen::Index>(p)) = static_cast<S>(img.pixel(p, ch));
  return c;
}

// Full-resolution render, evaluated in chunks.
template <typename S>
ImageBuffer render_image(const SineMlpParams<S>& params, std::size_t h, std::size_t w) {
  const Mat<S> coords = coordinate_matrix<S>(h, w);
  const std::size_t channels = params.out_dim();
  require(channels == 1 || channels == 3, "render_image: network output must have 1 or 3 channels");
  ImageBuffer img(h, w, channels);
  constexpr Eigen::Index kChunk = 8192;
  for (Eigen::Index start = 0; start < coords.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, coords.cols() - start);
    const Mat<S> y = forward(params, Mat<S>(coords.middleCols(start, n)));
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c)
        img.pixel(static_cast<std::size_t>(start + i), c) =
            std::clamp(static_cast<double>(y(static_cast<Eigen::Index>(c), i)), 0.0, 1.0);
  }
  return img;
}

struct ImageFitResult {
  TrainReport report;
  SineMlpParams<float> params;
};

// Trains a sinusoidal MLP on one image under the plan's supervision strategy.
// anchor must come from extract_anchor on img (or be AnchorMask::none for the
// baselines).
inline ImageFitResult fit_image(const ImageBuffer& img, const TrainConfig& config, const AnchorMask& anchor,
                                MlpShape shape = {}) {
  using S = float;
  config.validate();
  const std::size_t n = img.pixel_count();
  require(anchor.total_pixels() == n, "fit_image: anchor mask does not match the image");
  if (uses_anchor(config.plan.strategy))
    require(!anchor.anchor_indices.empty(), "fit_image: strategy needs a non-empty anchor area");
  shape.in = 2;
  shape.out = img.channels();

  auto init_rng = rng_for(config.plan.rng_seed, rng_stream::kInit, 0);
  ImageFitResult result{{}, siren_init<S>(init_rng, shape)};
  auto& params = result.params;
  auto& report = result.report;
  auto adam = AdamState<S>::init(params, config.learning_rate);

  const Mat<S> coords = coordinate_matrix<S>(img.height(), img.width());
  const Mat<S> truth = color_matrix<S>(img);
  const auto sched = ExpansiveSchedule::from_plan(config.plan);
  const std::string strategy_name(to_string(config.plan.strategy));

  std::optional<DiscreteSampler> edge_sampler;
  if (config.plan.strategy == Strategy::kEdgeResample) edge_sampler.emplace(edge_resample_weights(img));
  // a finite batch_budget is the full-supervision ray count b; anchor
  // strategies render their supervised fraction of it
  BatchBudget budget = config.batch_budget;
  if (budget) budget = rays_per_iteration(config.plan, *budget);
  if (config.plan.strategy == Strategy::kEdgeResample && !budget) budget = ratio_count(0.5, n);
  const std::size_t reference = config.batch_budget ? *config.batch_budget : n;

  report.anchor_pixels = anchor.size();
  Checkpoint last_good = to_checkpoint(params);
  std::size_t last_good_iter = 0;
  double interval_step_ms = 0.0;
  std::size_t interval_steps = 0;

  for (std::size_t t = 0; t < config.iterations; ++t) {
    const auto step_start = std::chrono::steady_clock::now();
    const TrainBatch batch =
        make_batch(config.plan, anchor, t, budget, edge_sampler ? &*edge_sampler : nullptr);
    const auto ids = batch.all_ids();
    const Mat<S> x = coords(Eigen::all, ids);
    const Mat<S> target = truth(Eigen::all, ids);

    const auto render_start = std::chrono::steady_clock::now();
    ForwardCache<S> cache;
    const Mat<S> pred = forward(params, x, &cache);
    const auto loss = expansive_loss(std::span<const S>(pred.data(), static_cast<std::size_t>(pred.size())),
                                     std::span<const S>(target.data(), static_cast<std::size_t>(target.size())),
                                     img.channels(), batch, sched, config.plan.strategy);
    if (!std::isfinite(loss.total)) {
      throw TrainingError("fit_image: non-finite loss at iteration " + std::to_string(t), last_good, last_good_iter);
    }
    const auto weights = loss_gradient_weights(batch, sched, config.plan.strategy);
    Mat<S> grad = pred - target;
    for (Eigen::Index r = 0; r < grad.cols(); ++r) grad.col(r) *= static_cast<S>(2.0 * weights[static_cast<std::size_t>(r)]);
    const auto grads = backward(params, cache, grad);
    const double render_ms = detail::elapsed_ms(render_start);

    adam_step(params, grads, adam);
    if (!params.all_finite())
      throw TrainingError("fit_image: non-finite parameters at iteration " + std::to_string(t), last_good,
                          last_good_iter);
    report.counters.add_iteration(ids.size(), ids.size(), reference);
    const double step_ms = detail::elapsed_ms(step_start);
    if (!config.deterministic) report.timing.push_back({render_ms, step_ms});
    interval_step_ms += step_ms;
    ++interval_steps;

    const bool last = t + 1 == config.iterations;
    if ((t + 1) % config.eval_interval == 0 || last) {
      const ImageBuffer render = render_image(params, img.height(), img.width());
      MetricRow row;
      row.run_id = config.run_id;
      row.strategy = strategy_name;
      row.beta = config.plan.beta;
      row.iter = t + 1;
      row.psnr_db = psnr(render, img);
      row.ssim = ssim(render, img);
      row.loss = loss;
      row.rendered_rays_cum = report.counters.rendered_rays;
      row.field_queries_cum = report.counters.field_queries;
      row.step_ms = config.deterministic ? 0.0 : interval_step_ms / static_cast<double>(interval_steps);
      report.rows.push_back(std::move(row));
      interval_step_ms = 0.0;
      interval_steps = 0;
      last_good = to_checkpoint(params);
      last_good_iter = t + 1;
      if (last) report.final_render = render;
    }
  }
  report.supervised_fraction =
      static_cast<double>(report.counters.rendered_rays) / static_cast<double>(report.counters.reference_rays);
  report.checkpoint = to_checkpoint(params, &adam);
  return result;
}

}  // namespace esup
