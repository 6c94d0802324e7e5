#pragma once

// Toy radiance field: pinhole rays, quadrature volume rendering with analytic
// backward pass, a dense trilinear voxel grid as the learnable field, and an
// analytic sphere scene for ground truth.

#include <Eigen/Dense>

#include <array>
#include <concepts>
#include <algorithm>
#include <chrono>
#include <iomanip>
#include <numbers>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "esup/checkpoint.hpp"
#include "esup/error.hpp"
#include "esup/image.hpp"
#include "esup/inr.hpp"
#include "esup/metrics.hpp"
#include "esup/report.hpp"
#include "esup/selection.hpp"
#include "esup/supervision.hpp"

namespace esup {

using Vec3d = Eigen::Vector3d;

template <typename S>
using Rgb = std::array<S, 3>;

struct Ray {
  Vec3d origin = Vec3d::Zero();
  Vec3d direction = Vec3d(0, 0, -1);
  double near = 0.0;
  double far = 1.0;

  Vec3d at(double t) const { return origin + t * direction; }
};

struct Camera {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world-from-camera
  Vec3d position = Vec3d::Zero();
  double focal = 1.0;  // pixels
  std::size_t height = 1;
  std::size_t width = 1;
  double near = 0.1;
  double far = 10.0;

  void validate() const {
    require(height >= 1 && width >= 1, "Camera: empty image");
    require(focal > 0.0, "Camera: focal must be > 0");
    require(near >= 0.0 && near < far, "Camera: need 0 <= near < far");
    require((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9,
            "Camera: rotation is not orthonormal");
  }

  // Camera at eye looking at target; camera -z points at the target.
  static Camera look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, double focal, std::size_t h,
                        std::size_t w, double near, double far) {
    const Vec3d z = (eye - target).normalized();
    const Vec3d x = up.cross(z).normalized();
    const Vec3d y = z.cross(x);
    Camera c;
    c.rotation.col(0) = x;
    c.rotation.col(1) = y;
    c.rotation.col(2) = z;
    c.position = eye;
    c.focal = focal;
    c.height = h;
    c.width = w;
    c.near = near;
    c.far = far;
    return c;
  }

  // Orbit camera around the origin.
  static Camera orbit(double radius, double azimuth_deg, double elevation_deg, double focal, std::size_t h,
                      std::size_t w, double near, double far) {
    const double az = azimuth_deg * std::numbers::pi / 180.0;
    const double el = elevation_deg * std::numbers::pi / 180.0;
    const Vec3d eye(radius * std::cos(el) * std::sin(az), radius * std::sin(el), radius * std::cos(el) * std::cos(az));
    return look_at(eye, Vec3d::Zero(), Vec3d(0, 1, 0), focal, h, w, near, far);
  }
};

// Pinhole rays through pixel centers, row-major.
inline std::vector<Ray> generate_rays(const Camera& cam) {
  cam.validate();
  std::vector<Ray> rays;
  rays.reserve(cam.height * cam.width);
  const double cx = 0.5 * static_cast<double>(cam.width);
  const double cy = 0.5 * static_cast<double>(cam.height);
  for (std::size_t i = 0; i < cam.height; ++i) {
    for (std::size_t j = 0; j < cam.width; ++j) {
      const Vec3d d_cam((static_cast<double>(j) + 0.5 - cx) / cam.focal, -(static_cast<double>(i) + 0.5 - cy) / cam.focal,
                        -1.0);
      rays.push_back({cam.position, (cam.rotation * d_cam).normalized(), cam.near, cam.far});
    }
  }
  return rays;
}

// Per-sample quantities of one rendered ray, kept for the backward pass.
template <typename S>
struct RaySamples {
  S delta = S(0);
  std::vector<S> tau;         // density per sample
  std::vector<Rgb<S>> color;  // color per sample
  std::vector<S> trans;       // T_i, plus T_{n+1} at the end
  Rgb<S> background{};

  std::size_t size() const { return tau.size(); }
};

// C = sum_i T_i (1 - exp(-tau_i delta)) c_i + T_{n+1} bg,  T_i = exp(-sum_{j<i} tau_j delta).
template <typename S>
Rgb<S> composite(RaySamples<S>& s) {
  const std::size_t n = s.size();
  require(s.color.size() == n, "composite: color/density length mismatch");
  s.trans.assign(n + 1, S(1));
  Rgb<S> out{};
  S depth = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    s.trans[i] = std::exp(-depth);
    const S alpha = S(1) - std::exp(-s.tau[i] * s.delta);
    const S w = s.trans[i] * alpha;
    for (int c = 0; c < 3; ++c) out[c] += w * s.color[i][c];
    depth += s.tau[i] * s.delta;
  }
  s.trans[n] = std::exp(-depth);
  for (int c = 0; c < 3; ++c) out[c] += s.trans[n] * s.background[c];
  return out;
}

template <typename S>
struct RenderedRay {
  Rgb<S> color{};
  RaySamples<S> samples;

  S accumulated_alpha() const { return S(1) - samples.trans.back(); }
};

// Midpoint samples t_i = near + (i + 1/2) delta, delta = (far - near) / n.
// field(position, i) returns {density, color} for sample i.
template <typename S, typename Field>
  requires std::invocable<Field&, const Vec3d&, std::size_t>
RenderedRay<S> render_ray(Field&& field, const Ray& ray, std::size_t n_samples, Rgb<S> background = {}) {
  require(n_samples >= 1, "render_ray: n_samples must be >= 1");
  require(ray.near < ray.far, "render_ray: near must be < far");
  RenderedRay<S> r;
  auto& s = r.samples;
  const double delta = (ray.far - ray.near) / static_cast<double>(n_samples);
  s.delta = static_cast<S>(delta);
  s.background = background;
  s.tau.resize(n_samples);
  s.color.resize(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto [tau, color] = field(ray.at(ray.near + (static_cast<double>(i) + 0.5) * delta), i);
    s.tau[i] = tau;
    s.color[i] = color;
  }
  r.color = composite(s);
  return r;
}

template <typename S>
struct RayGradients {
  std::vector<S> d_tau;
  std::vector<Rgb<S>> d_color;
};

// Exact derivatives of the composite color dotted with grad_color:
//   dC/dc_i   = T_i (1 - exp(-tau_i delta))
//   dC/dtau_i = delta (T_{i+1} c_i - sum_{j>i} T_j alpha_j c_j - T_{n+1} bg)
template <typename S>
RayGradients<S> render_ray_backward(const RaySamples<S>& s, const Rgb<S>& grad_color) {
  const std::size_t n = s.size();
  require(s.color.size() == n && s.trans.size() == n + 1, "render_ray_backward: cache shape mismatch");
  RayGradients<S> g;
  g.d_tau.assign(n, S(0));
  g.d_color.assign(n, Rgb<S>{});
  auto dot = [&](const Rgb<S>& c) { return grad_color[0] * c[0] + grad_color[1] * c[1] + grad_color[2] * c[2]; };
  // suffix = sum_{j>i} T_j alpha_j <g, c_j> + T_{n+1} <g, bg>
  S suffix = s.trans[n] * dot(s.background);
  for (std::size_t i = n; i-- > 0;) {
    const S alpha = S(1) - std::exp(-s.tau[i] * s.delta);
    const S w = s.trans[i] * alpha;
    for (int c = 0; c < 3; ++c) g.d_color[i][c] = w * grad_color[c];
    g.d_tau[i] = s.delta * (s.trans[i + 1] * dot(s.color[i]) - suffix);
    suffix += w * dot(s.color[i]);
  }
  return g;
}

namespace detail {

template <typename S>
S softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename S>
S sigmoid(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

}  // namespace detail

// Dense voxel grid of raw (density, r, g, b) parameters. Voxel centers sit at
// bounds_min + (k + 1/2) * cell; raw values are interpolated trilinearly and
// then activated: density = softplus, color = sigmoid.
template <typename S>
struct RadianceGrid {
  std::array<std::size_t, 3> resolution{32, 32, 32};
  Vec3d bounds_min = Vec3d::Constant(-1.0);
  Vec3d bounds_max = Vec3d::Constant(1.0);
  std::vector<S> raw;  // voxel-major, 4 per voxel

  RadianceGrid() = default;
  RadianceGrid(std::array<std::size_t, 3> res, Vec3d lo, Vec3d hi, S raw_density = S(-4), S raw_color = S(0))
      : resolution(res), bounds_min(std::move(lo)), bounds_max(std::move(hi)) {
    for (auto r : res) require(r >= 2, "RadianceGrid: resolution must be >= 2 per axis");
    for (int a = 0; a < 3; ++a) require(bounds_min[a] < bounds_max[a], "RadianceGrid: empty bounds");
    raw.resize(voxel_count() * 4, raw_color);
    for (std::size_t v = 0; v < voxel_count(); ++v) raw[v * 4] = raw_density;
  }

  std::size_t voxel_count() const { return resolution[0] * resolution[1] * resolution[2]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * resolution[1] + y) * resolution[0] + x;
  }
  Vec3d cell() const {
    return (bounds_max - bounds_min).cwiseQuotient(
        Vec3d(static_cast<double>(resolution[0]), static_cast<double>(resolution[1]), static_cast<double>(resolution[2])));
  }
  Vec3d voxel_center(std::size_t x, std::size_t y, std::size_t z) const {
    return bounds_min + (Vec3d(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)) +
                         Vec3d::Constant(0.5)).cwiseProduct(cell());
  }
  bool inside(const Vec3d& p) const {
    return (p.array() >= bounds_min.array()).all() && (p.array() <= bounds_max.array()).all();
  }
};

// Trilinear corners of one query, kept for backprop.
template <typename S>
struct GridSample {
  bool inside = false;
  std::array<std::uint32_t, 8> corner{};
  std::array<S, 8> weight{};
  S raw_density = S(0);
  Rgb<S> raw_color{};
};

template <typename S>
struct FieldValue {
  S density = S(0);
  Rgb<S> color{};
};

// Outside the bounds: zero density and zero color.
template <typename S>
FieldValue<S> grid_query(const RadianceGrid<S>& g, const Vec3d& p, GridSample<S>* cache = nullptr) {
  FieldValue<S> out;
  if (!g.inside(p)) {
    if (cache) cache->inside = false;
    return out;
  }
  const Vec3d u = (p - g.bounds_min).cwiseQuotient(g.cell()) - Vec3d::Constant(0.5);
  std::array<std::size_t, 3> i0{};
  std::array<S, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const double hi = static_cast<double>(g.resolution[a] - 1);
    const double ua = std::clamp(u[a], 0.0, hi);
    const auto base = std::min(static_cast<std::size_t>(ua), g.resolution[a] - 2);
    i0[a] = base;
    f[a] = static_cast<S>(ua - static_cast<double>(base));
  }
  GridSample<S> local;
  GridSample<S>& s = cache ? *cache : local;
  s.inside = true;
  s.raw_density = S(0);
  s.raw_color = {};
  for (int k = 0; k < 8; ++k) {
    const std::size_t dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
    const S w = (dx ? f[0] : S(1) - f[0]) * (dy ? f[1] : S(1) - f[1]) * (dz ? f[2] : S(1) - f[2]);
    const std::size_t v = g.index(i0[0] + dx, i0[1] + dy, i0[2] + dz);
    s.corner[k] = static_cast<std::uint32_t>(v);
    s.weight[k] = w;
    s.raw_density += w * g.raw[v * 4];
    for (int c = 0; c < 3; ++c) s.raw_color[c] += w * g.raw[v * 4 + 1 + c];
  }
  out.density = detail::softplus(s.raw_density);
  for (int c = 0; c < 3; ++c) out.color[c] = detail::sigmoid(s.raw_color[c]);
  return out;
}

// Accumulates d(loss)/d(raw) for one query into grad (same layout as raw).
template <typename S>
void grid_query_backward(const GridSample<S>& s, S d_density, const Rgb<S>& d_color, std::vector<S>& grad) {
  if (!s.inside) return;
  const S dd = d_density * detail::sigmoid(s.raw_density);
  Rgb<S> dc{};
  for (int c = 0; c < 3; ++c) {
    const S col = detail::sigmoid(s.raw_color[c]);
    dc[c] = d_color[c] * col * (S(1) - col);
  }
  for (int k = 0; k < 8; ++k) {
    const std::size_t v = s.corner[k];
    const S w = s.weight[k];
    grad[v * 4] += w * dd;
    for (int c = 0; c < 3; ++c) grad[v * 4 + 1 + c] += w * dc[c];
  }
}

struct Sphere {
  Vec3d center = Vec3d::Zero();
  double radius = 1.0;
  double density = 1.0;
  Rgb<double> color{1, 1, 1};
};

struct AnalyticScene {
  std::vector<Sphere> spheres;
  Rgb<double> background{0, 0, 0};

  void validate() const {
    for (const auto& s : spheres) {
      require(s.radius > 0.0, "AnalyticScene: sphere radius must be > 0");
      require(s.density >= 0.0, "AnalyticScene: sphere density must be >= 0");
    }
  }

  // Point membership: summed density, density-weighted color.
  FieldValue<double> query(const Vec3d& p) const {
    FieldValue<double> out;
    double wsum = 0.0;
    for (const auto& s : spheres) {
      if ((p - s.center).squaredNorm() <= s.radius * s.radius) {
        out.density += s.density;
        for (int c = 0; c < 3; ++c) out.color[c] += s.density * s.color[c];
        wsum += s.density;
      }
    }
    if (wsum > 0.0)
      for (auto& c : out.color) c /= wsum;
    return out;
  }

  // Mean density over [t0, t1] along the ray from exact ray-sphere chords, with
  // the matching density-weighted color.
  FieldValue<double> interval(const Ray& ray, double t0, double t1) const {
    FieldValue<double> out;
    double wsum = 0.0;
    for (const auto& s : spheres) {
      const Vec3d oc = ray.origin - s.center;
      const double b = oc.dot(ray.direction);
      const double disc = b * b - (oc.squaredNorm() - s.radius * s.radius);
      if (disc <= 0.0) continue;
      const double root = std::sqrt(disc);
      const double lo = std::max(t0, -b - root);
      const double hi = std::min(t1, -b + root);
      if (hi <= lo) continue;
      const double mass = s.density * (hi - lo);
      out.density += mass;
      for (int c = 0; c < 3; ++c) out.color[c] += mass * s.color[c];
      wsum += mass;
    }
    if (wsum > 0.0)
      for (auto& c : out.color) c /= wsum;
    out.density /= (t1 - t0);
    return out;
  }
};

inline AnalyticScene parse_scene(const std::string& text) {
  AnalyticScene scene;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    const std::string where = "scene line " + std::to_string(lineno);
    if (first == "bg") {
      if (!(ls >> scene.background[0] >> scene.background[1] >> scene.background[2]))
        throw FormatError(where + ": expected 'bg r g b'");
    } else {
      Sphere s;
      try {
        s.center[0] = std::stod(first);
      } catch (const std::exception&) {
        throw FormatError(where + ": expected a number");
      }
      if (!(ls >> s.center[1] >> s.center[2] >> s.radius >> s.density >> s.color[0] >> s.color[1] >> s.color[2]))
        throw FormatError(where + ": expected 'cx cy cz r density cr cg cb'");
      if (s.radius <= 0.0) throw FormatError(where + ": radius must be > 0");
      if (s.density < 0.0) throw FormatError(where + ": density must be >= 0");
      scene.spheres.push_back(s);
    }
    std::string extra;
    if (ls >> extra) throw FormatError(where + ": trailing tokens");
  }
  for (double c : scene.background)
    if (c < 0.0 || c > 1.0) throw FormatError("scene: background color outside [0,1]");
  return scene;
}

inline std::string format_scene(const AnalyticScene& scene) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const auto& s : scene.spheres) {
    out << s.center[0] << ' ' << s.center[1] << ' ' << s.center[2] << ' ' << s.radius << ' ' << s.density << ' '
        << s.color[0] << ' ' << s.color[1] << ' ' << s.color[2] << '\n';
  }
  out << "bg " << scene.background[0] << ' ' << scene.background[1] << ' ' << scene.background[2] << '\n';
  return out.str();
}

inline constexpr std::size_t kOracleSamples = 512;

inline Rgb<double> render_ray(const AnalyticScene& scene, const Ray& ray, std::size_t n_samples = kOracleSamples) {
  const double delta = (ray.far - ray.near) / static_cast<double>(n_samples);
  auto r = render_ray<double>(
      [&](const Vec3d&, std::size_t i) {
        const double t0 = ray.near + static_cast<double>(i) * delta;
        const auto v = scene.interval(ray, t0, t0 + delta);
        return std::pair{v.density, v.color};
      },
      ray, n_samples, scene.background);
  return r.color;
}

inline ImageBuffer render_view(const AnalyticScene& scene, const Camera& cam, std::size_t n_samples = kOracleSamples) {
  scene.validate();
  const auto rays = generate_rays(cam);
  ImageBuffer img(cam.height, cam.width, 3);
  for (std::size_t p = 0; p < rays.size(); ++p) {
    const auto c = render_ray(scene, rays[p], n_samples);
    for (int k = 0; k < 3; ++k) img.pixel(p, static_cast<std::size_t>(k)) = std::clamp(c[k], 0.0, 1.0);
  }
  return img;
}

template <typename S>
RenderedRay<S> render_ray(const RadianceGrid<S>& grid, const Ray& ray, std::size_t n_samples, const Rgb<S>& bg,
                          std::vector<GridSample<S>>* caches = nullptr) {
  if (caches) caches->assign(n_samples, GridSample<S>{});
  return render_ray<S>(
      [&](const Vec3d& p, std::size_t i) {
        const auto v = grid_query(grid, p, caches ? &(*caches)[i] : nullptr);
        return std::pair{v.density, v.color};
      },
      ray, n_samples, bg);
}

template <typename S>
ImageBuffer render_view(const RadianceGrid<S>& grid, const Camera& cam, std::size_t n_samples,
                        const Rgb<double>& background = {}) {
  const auto rays = generate_rays(cam);
  const Rgb<S> bg{static_cast<S>(background[0]), static_cast<S>(background[1]), static_cast<S>(background[2])};
  ImageBuffer img(cam.height, cam.width, 3);
  for (std::size_t p = 0; p < rays.size(); ++p) {
    const auto r = render_ray(grid, rays[p], n_samples, bg);
    for (int k = 0; k < 3; ++k)
      img.pixel(p, static_cast<std::size_t>(k)) = std::clamp(static_cast<double>(r.color[k]), 0.0, 1.0);
  }
  return img;
}

template <typename S>
Checkpoint to_checkpoint(const RadianceGrid<S>& grid, const std::vector<S>* m = nullptr, const std::vector<S>* v = nullptr,
                         std::uint64_t step = 0) {
  Checkpoint ck;
  ck.version = kCheckpointVersionGrid;
  GridHeader h;
  for (int a = 0; a < 3; ++a) {
    h.resolution[a] = static_cast<std::uint32_t>(grid.resolution[a]);
    h.bounds_min[a] = static_cast<float>(grid.bounds_min[a]);
    h.bounds_max[a] = static_cast<float>(grid.bounds_max[a]);
  }
  ck.grid = h;
  auto layer = [&](const std::vector<S>& values) {
    CheckpointLayer l;
    l.rows = static_cast<std::uint32_t>(grid.voxel_count());
    l.cols = 4;
    l.weights.assign(values.begin(), values.end());
    return l;
  };
  ck.layers.push_back(layer(grid.raw));
  if (m && v) ck.optimizer = OptimizerBlock{{layer(*m)}, {layer(*v)}, step};
  return ck;
}

template <typename S>
RadianceGrid<S> grid_from_checkpoint(const Checkpoint& ck) {
  require(ck.is_grid() && ck.grid && ck.layers.size() == 1, "grid_from_checkpoint: not a grid checkpoint");
  RadianceGrid<S> g;
  for (int a = 0; a < 3; ++a) {
    g.resolution[a] = ck.grid->resolution[a];
    g.bounds_min[a] = ck.grid->bounds_min[a];
    g.bounds_max[a] = ck.grid->bounds_max[a];
  }
  require(ck.layers[0].rows == g.voxel_count() && ck.layers[0].cols == 4, "grid_from_checkpoint: shape mismatch");
  g.raw.assign(ck.layers[0].weights.begin(), ck.layers[0].weights.end());
  return g;
}

struct NerfView {
  Camera camera;
  ImageBuffer image;
};

struct NerfOptions {
  std::array<std::size_t, 3> resolution{32, 32, 32};
  Vec3d bounds_min = Vec3d::Constant(-1.2);
  Vec3d bounds_max = Vec3d::Constant(1.2);
  std::size_t train_samples = 64;
  std::size_t eval_samples = 128;
  // full-supervision rays per iteration (b)
  std::size_t ray_budget = 1024;
  double init_raw_density = -4.0;
  Rgb<double> background{0, 0, 0};
};

struct NerfFitResult {
  TrainReport report;
  RadianceGrid<float> grid;
};

// Camera set used by the fit-nerf command: training views spread evenly over
// an azimuth arc with alternating elevation; the held-out view sits halfway
// between the first two.
struct OrbitRig {
  double radius = 3.0;
  double elevation_deg = 20.0;
  double arc_deg = 60.0;
  double focal = 0.0;  // 0: 45 degree horizontal field of view
  double near = 1.5;
  double far = 4.5;
  std::size_t size = 64;

  Camera view(double azimuth_deg, double elevation_deg_at) const {
    const double f = focal > 0.0 ? focal : 0.5 * static_cast<double>(size) / std::tan(22.5 * std::numbers::pi / 180.0);
    return Camera::orbit(radius, azimuth_deg, elevation_deg_at, f, size, size, near, far);
  }

  double azimuth(double i, std::size_t count) const {
    return count < 2 ? 0.0 : -0.5 * arc_deg + arc_deg * i / static_cast<double>(count - 1);
  }
  double elevation(std::size_t i) const { return i % 2 == 0 ? elevation_deg : 0.0; }

  std::vector<Camera> training(std::size_t count) const {
    require(count >= 1, "OrbitRig: need at least one view");
    std::vector<Camera> cams;
    for (std::size_t i = 0; i < count; ++i) cams.push_back(view(azimuth(static_cast<double>(i), count), elevation(i)));
    return cams;
  }

  Camera held_out(std::size_t count) const { return view(azimuth(0.5, count), 0.5 * elevation_deg); }
};

// Trains a radiance grid on the views. anchors holds one mask per view (or is
// empty for the baselines).
inline NerfFitResult fit_nerf(const std::vector<NerfView>& views, const NerfView& held_out, const TrainConfig& config,
                              const std::vector<AnchorMask>& anchors, const NerfOptions& opt = {}) {
  using S = float;
  config.validate();
  require(views.size() >= 2, "fit_nerf: need at least 2 training views");
  require(opt.train_samples >= 1 && opt.eval_samples >= 1, "fit_nerf: sample counts must be >= 1");
  const std::size_t h = views.front().image.height();
  const std::size_t w = views.front().image.width();
  for (const auto& v : views) {
    require(v.image.height() == h && v.image.width() == w && v.image.channels() == 3,
            "fit_nerf: training views must share size and be RGB");
    require(v.camera.height == h && v.camera.width == w, "fit_nerf: camera size does not match its image");
  }
  const std::size_t per_view = h * w;
  const std::size_t n = per_view * views.size();
  require(opt.ray_budget >= 1 && opt.ray_budget <= n, "fit_nerf: ray budget must be in [1, total pixels]");

  AnchorMask anchor;
  if (uses_anchor(config.plan.strategy)) {
    require(anchors.size() == views.size(), "fit_nerf: need one anchor mask per view");
    anchor = concat_anchors(anchors);
  } else {
    anchor = AnchorMask::none(h * views.size(), w);
  }

  std::vector<Ray> rays;
  rays.reserve(n);
  std::vector<Rgb<S>> truth(n);
  for (std::size_t v = 0; v < views.size(); ++v) {
    auto r = generate_rays(views[v].camera);
    rays.insert(rays.end(), r.begin(), r.end());
    for (std::size_t p = 0; p < per_view; ++p)
      for (std::size_t c = 0; c < 3; ++c) truth[v * per_view + p][c] = static_cast<S>(views[v].image.pixel(p, c));
  }

  std::optional<DiscreteSampler> edge_sampler;
  if (config.plan.strategy == Strategy::kEdgeResample) {
    std::vector<double> p;
    for (const auto& v : views) {
      const auto wv = edge_resample_weights(v.image);
      p.insert(p.end(), wv.begin(), wv.end());
    }
    edge_sampler.emplace(p);
  }

  NerfFitResult result{{}, RadianceGrid<S>(opt.resolution, opt.bounds_min, opt.bounds_max,
                                           static_cast<S>(opt.init_raw_density), S(0))};
  auto& grid = result.grid;
  auto& report = result.report;
  report.anchor_pixels = anchor.size();
  const Rgb<S> bg{static_cast<S>(opt.background[0]), static_cast<S>(opt.background[1]),
                  static_cast<S>(opt.background[2])};

  std::vector<S> grad(grid.raw.size(), S(0));
  std::vector<S> m(grid.raw.size(), S(0)), v2(grid.raw.size(), S(0));
  std::uint64_t adam_step_count = 0;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  const auto sched = ExpansiveSchedule::from_plan(config.plan);
  const std::size_t per_iter = rays_per_iteration(config.plan, opt.ray_budget);
  const std::string strategy_name(to_string(config.plan.strategy));
  Checkpoint last_good = to_checkpoint(grid);
  std::size_t last_good_iter = 0;
  double interval_step_ms = 0.0;
  std::size_t interval_steps = 0;

  std::vector<GridSample<S>> caches;
  std::vector<std::vector<GridSample<S>>> batch_caches;
  std::vector<RenderedRay<S>> rendered;

  for (std::size_t t = 0; t < config.iterations; ++t) {
    const auto step_start = std::chrono::steady_clock::now();
    const TrainBatch batch =
        make_batch(config.plan, anchor, t, per_iter, edge_sampler ? &*edge_sampler : nullptr);
    const auto ids = batch.all_ids();

    const auto render_start = std::chrono::steady_clock::now();
    rendered.resize(ids.size());
    batch_caches.resize(ids.size());
    std::vector<S> pred(ids.size() * 3), target(ids.size() * 3);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      rendered[r] = render_ray(grid, rays[ids[r]], opt.train_samples, bg, &batch_caches[r]);
      for (int c = 0; c < 3; ++c) {
        pred[r * 3 + static_cast<std::size_t>(c)] = rendered[r].color[c];
        target[r * 3 + static_cast<std::size_t>(c)] = truth[ids[r]][c];
      }
    }
    const auto loss = expansive_loss(pred, target, 3, batch, sched, config.plan.strategy);
    if (!std::isfinite(loss.total))
      throw TrainingError("fit_nerf: non-finite loss at iteration " + std::to_string(t), last_good, last_good_iter);
    const auto weights = loss_gradient_weights(batch, sched, config.plan.strategy);
    std::fill(grad.begin(), grad.end(), S(0));
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (weights[r] == 0.0) continue;
      Rgb<S> gc{};
      for (int c = 0; c < 3; ++c)
        gc[c] = static_cast<S>(2.0 * weights[r]) * (pred[r * 3 + static_cast<std::size_t>(c)] -
                                                    target[r * 3 + static_cast<std::size_t>(c)]);
      const auto rg = render_ray_backward(rendered[r].samples, gc);
      for (std::size_t i = 0; i < opt.train_samples; ++i)
        grid_query_backward(batch_caches[r][i], rg.d_tau[i], rg.d_color[i], grad);
    }
    const double render_ms = detail::elapsed_ms(render_start);

    ++adam_step_count;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam_step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam_step_count));
    // plain loop: an Eigen::Map over vector storage vectorizes differently
    // with the allocation's alignment, which breaks run-to-run equality
    for (std::size_t k = 0; k < grid.raw.size(); ++k) {
      m[k] = S(b1) * m[k] + S(1 - b1) * grad[k];
      v2[k] = S(b2) * v2[k] + S(1 - b2) * grad[k] * grad[k];
      grid.raw[k] -= S(config.learning_rate) * (m[k] / S(bc1)) / (std::sqrt(v2[k] / S(bc2)) + S(eps));
    }

    report.counters.add_iteration(ids.size(), ids.size() * opt.train_samples, opt.ray_budget);
    const double step_ms = detail::elapsed_ms(step_start);
    if (!config.deterministic) report.timing.push_back({render_ms, step_ms});
    interval_step_ms += step_ms;
    ++interval_steps;

    const bool last = t + 1 == config.iterations;
    if ((t + 1) % config.eval_interval == 0 || last) {
      const ImageBuffer render = render_view(grid, held_out.camera, opt.eval_samples, opt.background);
      MetricRow row;
      row.run_id = config.run_id;
      row.strategy = strategy_name;
      row.beta = config.plan.beta;
      row.iter = t + 1;
      row.psnr_db = psnr(render, held_out.image);
      row.ssim = ssim(render, held_out.image);
      row.loss = loss;
      row.rendered_rays_cum = report.counters.rendered_rays;
      row.field_queries_cum = report.counters.field_queries;
      row.step_ms = config.deterministic ? 0.0 : interval_step_ms / static_cast<double>(interval_steps);
      report.rows.push_back(std::move(row));
      interval_step_ms = 0.0;
      interval_steps = 0;
      last_good = to_checkpoint(grid);
      last_good_iter = t + 1;
      if (last) report.final_render = render;
    }
  }
  report.supervised_fraction =
      static_cast<double>(report.counters.rendered_rays) / static_cast<double>(report.counters.reference_rays);
  report.checkpoint = to_checkpoint(grid, &m, &v2, adam_step_count);
  return result;
}

}  // namespace esup
