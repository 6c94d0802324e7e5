#pragma once

// Supervised-set construction: the fixed anchor area, per-iteration source
// samples from its complement, and the batching rules for every strategy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "esup/edge.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"
#include "esup/rng.hpp"

namespace esup {

enum class Strategy {
  kStandard,
  kExpansive,
  kEdgeResample,
  kNoAnchorArea,
  kNoSourceArea,
  kNoAnchorSup,
  kNoSourceSup,
  kNoExpansive,
};

inline constexpr Strategy kAllStrategies[] = {
    Strategy::kStandard,     Strategy::kExpansive,   Strategy::kEdgeResample, Strategy::kNoAnchorArea,
    Strategy::kNoSourceArea, Strategy::kNoAnchorSup, Strategy::kNoSourceSup,  Strategy::kNoExpansive,
};

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kStandard: return "standard";
    case Strategy::kExpansive: return "expansive";
    case Strategy::kEdgeResample: return "edge-resample";
    case Strategy::kNoAnchorArea: return "es-no-anchor-area";
    case Strategy::kNoSourceArea: return "es-no-source-area";
    case Strategy::kNoAnchorSup: return "es-no-anchor-sup";
    case Strategy::kNoSourceSup: return "es-no-source-sup";
    case Strategy::kNoExpansive: return "es-no-expansive";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (to_string(s) == name) return s;
  }
  throw ArgumentError("unknown strategy '" + std::string(name) + "'");
}

// Strategies that need an anchor area.
inline bool uses_anchor(Strategy s) { return s != Strategy::kStandard && s != Strategy::kEdgeResample; }

struct SupervisionPlan {
  Strategy strategy = Strategy::kExpansive;
  double xi_a = 0.25;
  double xi_s = 0.25;
  double beta = 1.0;
  std::size_t total_iters = 5000;
  std::uint64_t rng_seed = 0;

  void validate() const {
    require(xi_a > 0.0 && xi_a < 1.0, "SupervisionPlan: xi_a must be in (0,1)");
    require(xi_s > 0.0 && xi_s < 1.0, "SupervisionPlan: xi_s must be in (0,1)");
    require(xi_a + xi_s <= 1.0, "SupervisionPlan: xi_a + xi_s must be <= 1");
    require(beta > 0.0 && beta <= 1.0, "SupervisionPlan: beta must be in (0,1]");
    require(total_iters >= 1, "SupervisionPlan: total_iters must be >= 1");
  }
};

struct EffectiveRatios {
  double xi_a = 0.0;
  double xi_s = 0.0;
  double total() const { return xi_a + xi_s; }
};

inline EffectiveRatios apply_beta(const SupervisionPlan& plan) {
  plan.validate();
  return {plan.beta * plan.xi_a, plan.beta * plan.xi_s};
}

// floor(ratio * n) with a little slack so products like 0.25 * 4096 are not
// truncated by rounding error.
inline std::size_t ratio_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

struct AnchorMask {
  BinaryMask mask;
  std::vector<std::size_t> anchor_indices;      // strictly increasing
  std::vector<std::size_t> complement_indices;  // strictly increasing
  double threshold = 0.0;
  double xi_a_effective = 0.0;
  int iterations = 0;

  std::size_t total_pixels() const { return mask.size(); }
  std::size_t size() const { return anchor_indices.size(); }

  static AnchorMask from_mask(BinaryMask m, double threshold = 0.0, int iterations = 0) {
    AnchorMask a;
    a.threshold = threshold;
    a.iterations = iterations;
    for (std::size_t k = 0; k < m.size(); ++k) (m.data[k] ? a.anchor_indices : a.complement_indices).push_back(k);
    a.xi_a_effective = m.size() ? static_cast<double>(a.anchor_indices.size()) / static_cast<double>(m.size()) : 0.0;
    a.mask = std::move(m);
    return a;
  }

  // Empty anchor over n pixels, for strategies that do not use one.
  static AnchorMask none(std::size_t height, std::size_t width) { return from_mask(BinaryMask(height, width)); }

  bool contains(std::size_t id) const { return id < mask.size() && mask.data[id] != 0; }
};

// Stacks per-view masks vertically so view v, pixel p maps to v*h*w + p.
inline AnchorMask concat_anchors(std::span<const AnchorMask> views) {
  require(!views.empty(), "concat_anchors: no views");
  const std::size_t w = views.front().mask.width;
  std::size_t h = 0;
  for (const auto& v : views) {
    require(v.mask.width == w, "concat_anchors: views must share a width");
    h += v.mask.height;
  }
  BinaryMask m(h, w);
  std::size_t off = 0;
  double thr = 0.0;
  int iters = 0;
  for (const auto& v : views) {
    std::copy(v.mask.data.begin(), v.mask.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.mask.size();
    thr += v.threshold / static_cast<double>(views.size());
    iters = std::max(iters, v.iterations);
  }
  return AnchorMask::from_mask(std::move(m), thr, iters);
}

inline AnchorMask extract_anchor(const ImageBuffer& img, double xi_a, const ThresholdSchedule& sched = {},
                                 const EdgeDetectorParams& params = {}) {
  require(xi_a > 0.0 && xi_a < 1.0, "extract_anchor: xi_a must be in (0,1)");
  auto r = adapt_threshold(to_luma(img), xi_a, sched, params);
  return AnchorMask::from_mask(std::move(r.mask), r.threshold, r.iterations);
}

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Cache file beside the image, keyed by pixel hash, xi_a and detector settings.
inline std::string anchor_cache_path(const std::string& image_path, const ImageBuffer& img, double xi_a,
                                     const ThresholdSchedule& sched, const EdgeDetectorParams& params) {
  const auto bytes = to_bytes(img);
  std::ostringstream key;
  key << std::setprecision(17) << xi_a << ' ' << sched.mu << ' ' << sched.max_iters << ' ' << sched.initial_threshold
      << ' ' << params.blur_sigma << ' ' << params.low_high_ratio << ' ' << img.height() << 'x' << img.width();
  const std::string k = key.str();
  std::uint64_t h = fnv1a64(bytes);
  h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(k.data()), k.size()), h);
  std::ostringstream name;
  name << image_path << ".anchor-" << std::hex << std::setw(16) << std::setfill('0') << h << std::dec << "-xi"
       << std::fixed << std::setprecision(4) << xi_a << ".pgm";
  return name.str();
}

// extract_anchor with an on-disk PGM cache; the threshold and iteration count
// travel in header comments. A cache write failure is not an error.
inline AnchorMask extract_anchor_cached(const std::string& image_path, const ImageBuffer& img, double xi_a,
                                        const ThresholdSchedule& sched, const EdgeDetectorParams& params,
                                        bool bypass_cache, bool* cache_hit = nullptr) {
  const std::string path = anchor_cache_path(image_path, img, xi_a, sched, params);
  if (cache_hit) *cache_hit = false;
  if (!bypass_cache && std::filesystem::exists(path)) {
    try {
      std::vector<std::string> comments;
      BinaryMask m = load_mask_pgm(path, &comments);
      if (m.height == img.height() && m.width == img.width()) {
        double thr = 0.0;
        int iters = 0;
        for (const auto& c : comments) {
          if (c.rfind("threshold=", 0) == 0) thr = std::stod(c.substr(10));
          if (c.rfind("iterations=", 0) == 0) iters = std::stoi(c.substr(11));
        }
        if (cache_hit) *cache_hit = true;
        return AnchorMask::from_mask(std::move(m), thr, iters);
      }
    } catch (const Error&) {
      // unreadable cache entry: recompute
    }
  }
  AnchorMask a = extract_anchor(img, xi_a, sched, params);
  std::ostringstream thr;
  thr << std::setprecision(17) << a.threshold;
  try {
    save_pgm(path, a.mask, {"threshold=" + thr.str(), "iterations=" + std::to_string(a.iterations)});
  } catch (const IoError&) {
  }
  return a;
}

// Uniform sample of k distinct elements of pool (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::span<const std::size_t> pool, std::size_t k,
                                                           CounterRng& rng) {
  require(k <= pool.size(), "sample_without_replacement: requested " + std::to_string(k) + " of " +
                                std::to_string(pool.size()) + " elements");
  std::vector<std::size_t> work(pool.begin(), pool.end());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(work.size() - i));
    std::swap(work[i], work[j]);
  }
  work.resize(k);
  return work;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Fresh uniform sample of floor(xi_s_eff * total_pixels) non-anchor pixels.
inline std::vector<std::size_t> sample_source(const AnchorMask& anchor, double xi_s_eff, std::size_t total_pixels,
                                              CounterRng& rng) {
  require(total_pixels == anchor.total_pixels(), "sample_source: total_pixels does not match the anchor mask");
  const std::size_t count = ratio_count(xi_s_eff, total_pixels);
  require(count <= anchor.complement_indices.size(),
          "sample_source: requested " + std::to_string(count) + " source pixels but only " +
              std::to_string(anchor.complement_indices.size()) + " lie outside the anchor area");
  return sample_without_replacement(anchor.complement_indices, count, rng);
}

// Inverse-CDF sampler over pixel indices.
class DiscreteSampler {
 public:
  DiscreteSampler() = default;
  explicit DiscreteSampler(std::span<const double> probabilities) : cdf_(probabilities.size()) {
    require(!probabilities.empty(), "DiscreteSampler: empty distribution");
    double acc = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
      require(probabilities[i] >= 0.0, "DiscreteSampler: negative probability");
      acc += probabilities[i];
      cdf_[i] = acc;
    }
    require(acc > 0.0, "DiscreteSampler: zero total mass");
    for (auto& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  std::size_t size() const { return cdf_.size(); }

  std::size_t operator()(CounterRng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

struct TrainBatch {
  std::size_t t = 0;
  std::vector<std::size_t> anchor_ids;
  std::vector<std::size_t> source_ids;

  std::size_t size() const { return anchor_ids.size() + source_ids.size(); }

  // Anchor ids first, then source ids; the ray order used for predictions.
  std::vector<std::size_t> all_ids() const {
    std::vector<std::size_t> ids(anchor_ids);
    ids.insert(ids.end(), source_ids.begin(), source_ids.end());
    return ids;
  }
};

// "Full" budget (nullopt) supervises the whole anchor area plus a fresh source
// sample every iteration; a finite budget draws that many rays.
using BatchBudget = std::optional<std::size_t>;

// Rays per iteration under a finite budget b: the supervised fraction
// beta * (xi_a + xi_s) of b for anchor-based strategies, b otherwise.
inline std::size_t rays_per_iteration(const SupervisionPlan& plan, std::size_t budget) {
  if (!uses_anchor(plan.strategy)) return budget;
  const auto eff = apply_beta(plan);
  return static_cast<std::size_t>(std::llround(eff.total() * static_cast<double>(budget)));
}

inline TrainBatch make_batch(const SupervisionPlan& plan, const AnchorMask& anchor, std::size_t t, BatchBudget budget,
                             const DiscreteSampler* edge_sampler = nullptr) {
  plan.validate();
  require(t < plan.total_iters, "make_batch: iteration t must be < total_iters");
  const std::size_t n = anchor.total_pixels();
  require(n > 0, "make_batch: empty pixel set");
  if (budget) require(*budget <= n, "make_batch: budget exceeds available pixels");

  auto rng = rng_for(plan.rng_seed, rng_stream::kBatch, t);
  const auto eff = apply_beta(plan);
  TrainBatch b;
  b.t = t;

  switch (plan.strategy) {
    case Strategy::kStandard: {
      if (!budget) {
        b.source_ids = iota_indices(n);
      } else {
        const auto all = iota_indices(n);
        b.source_ids = sample_without_replacement(all, *budget, rng);
      }
      return b;
    }
    case Strategy::kEdgeResample: {
      require(edge_sampler != nullptr && edge_sampler->size() == n,
              "make_batch: edge-resample needs a sampling distribution over all pixels");
      const std::size_t count = budget.value_or(ratio_count(0.5, n));
      b.source_ids.reserve(count);
      for (std::size_t i = 0; i < count; ++i) b.source_ids.push_back((*edge_sampler)(rng));
      return b;
    }
    default:
      break;
  }

  require(!anchor.anchor_indices.empty(), "make_batch: strategy '" + std::string(to_string(plan.strategy)) +
                                              "' needs a non-empty anchor area");
  // split of a finite budget between anchor and source rays
  const auto split = [&](std::size_t total) {
    const auto na = static_cast<std::size_t>(std::llround(static_cast<double>(total) * eff.xi_a / eff.total()));
    return std::pair{na, total - na};
  };

  switch (plan.strategy) {
    case Strategy::kNoAnchorArea: {
      const std::size_t count = budget.value_or(ratio_count(eff.total(), n));
      b.source_ids = sample_without_replacement(anchor.complement_indices, count, rng);
      return b;
    }
    case Strategy::kNoSourceArea: {
      // Both groups come from the anchor area.
      const std::size_t total = budget ? *budget : anchor.size();
      auto picked = sample_without_replacement(anchor.anchor_indices, total, rng);
      const auto [na, ns] = split(total);
      b.anchor_ids.assign(picked.begin(), picked.begin() + static_cast<std::ptrdiff_t>(na));
      b.source_ids.assign(picked.begin() + static_cast<std::ptrdiff_t>(na), picked.end());
      return b;
    }
    default: {
      if (!budget) {
        b.anchor_ids = anchor.anchor_indices;
        b.source_ids = sample_source(anchor, eff.xi_s, n, rng);
      } else {
        const auto [na, ns] = split(*budget);
        b.anchor_ids = sample_without_replacement(anchor.anchor_indices, na, rng);
        b.source_ids = sample_without_replacement(anchor.complement_indices, ns, rng);
      }
      return b;
    }
  }
}

// TrainBatch invariants for a given strategy: disjoint groups, anchor ids from
// the anchor area, source ids from its complement (from the anchor area for
// es-no-source-area; anywhere for the baselines).
inline bool batch_invariants_hold(const TrainBatch& b, const AnchorMask& anchor, Strategy s) {
  const std::size_t n = anchor.total_pixels();
  std::vector<std::uint8_t> seen(n, 0);
  for (std::size_t id : b.anchor_ids) {
    if (id >= n || !anchor.contains(id) || seen[id]) return false;
    seen[id] = 1;
  }
  for (std::size_t id : b.source_ids) {
    if (id >= n) return false;
    if (s == Strategy::kEdgeResample) continue;  // drawn with replacement
    if (seen[id]) return false;
    seen[id] = 1;
    if (s == Strategy::kStandard) continue;
    if (s == Strategy::kNoSourceArea ? !anchor.contains(id) : anchor.contains(id)) return false;
  }
  return true;
}

}  // namespace esup
