#pragma once

// Flat key=value run configuration shared by the command-line tool.

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "esup/edge.hpp"
#include "esup/error.hpp"
#include "esup/inr.hpp"
#include "esup/nerf.hpp"
#include "esup/report.hpp"
#include "esup/selection.hpp"

namespace esup {

struct RunConfig {
  std::string command = "fit-image";
  std::string input;  // image path (fit-image, extract-anchor, bench) or scene path (fit-nerf)
  std::string out_dir = "out";
  std::string run_id = "run";
  std::uint64_t seed = 0;
  bool deterministic = true;

  // supervision
  std::string strategy = "expansive";
  double xi_a = 0.25;
  double xi_s = 0.25;
  double beta = 1.0;
  double mu = 15.0;
  std::size_t total_iters = 5000;
  std::size_t eval_interval = 500;
  double learning_rate = 5e-4;
  // rays per iteration under full supervision; 0 = every pixel (fit-image only)
  std::size_t batch_budget = 0;
  bool no_cache = false;

  // image backbone
  std::size_t resize = 0;  // square side, 0 keeps the input size
  std::size_t hidden = 256;
  std::size_t hidden_layers = 3;
  double omega0 = 30.0;

  // radiance field
  std::size_t views = 3;
  std::size_t view_size = 64;
  std::size_t grid_resolution = 32;
  double grid_bound = 1.2;
  std::size_t train_samples = 64;
  std::size_t eval_samples = 128;
  double arc_deg = 60.0;

  // bench
  std::string strategies = "standard,expansive,edge-resample";
  std::string betas = "1";

  static RunConfig for_command(const std::string& cmd) {
    RunConfig c;
    c.command = cmd;
    if (cmd == "fit-nerf") {
      c.total_iters = 20000;
      c.eval_interval = 2000;
      c.learning_rate = 0.02;
      c.batch_budget = 1024;
    }
    return c;
  }

  bool operator==(const RunConfig&) const = default;

  SupervisionPlan plan() const {
    SupervisionPlan p;
    p.strategy = parse_strategy(strategy);
    p.xi_a = xi_a;
    p.xi_s = xi_s;
    p.beta = beta;
    p.total_iters = total_iters;
    p.rng_seed = seed;
    p.validate();
    return p;
  }

  ThresholdSchedule schedule() const {
    ThresholdSchedule s;
    s.mu = mu;
    s.validate();
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.iterations = total_iters;
    t.learning_rate = learning_rate;
    t.eval_interval = eval_interval;
    t.plan = plan();
    if (batch_budget > 0) t.batch_budget = batch_budget;
    t.deterministic = deterministic;
    t.run_id = run_id;
    t.validate();
    return t;
  }

  MlpShape shape() const {
    MlpShape s;
    s.hidden = hidden;
    s.hidden_layers = hidden_layers;
    s.omega0 = omega0;
    return s;
  }

  OrbitRig rig() const {
    OrbitRig r;
    r.size = view_size;
    r.arc_deg = arc_deg;
    return r;
  }

  NerfOptions nerf_options() const {
    NerfOptions o;
    o.resolution = {grid_resolution, grid_resolution, grid_resolution};
    o.bounds_min = Vec3d::Constant(-grid_bound);
    o.bounds_max = Vec3d::Constant(grid_bound);
    o.train_samples = train_samples;
    o.eval_samples = eval_samples;
    o.ray_budget = batch_budget;
    return o;
  }

  void validate() const {
    require(!command.empty(), "config: command must be set");
    require(!run_id.empty() && run_id.find(',') == std::string::npos, "config: run_id must be non-empty without commas");
    plan();
    schedule();
    require(eval_interval >= 1, "config: eval_interval must be >= 1");
    require(learning_rate > 0.0, "config: learning_rate must be > 0");
    require(hidden >= 1 && hidden_layers >= 1, "config: network must have at least one hidden unit");
    require(omega0 > 0.0, "config: omega0 must be > 0");
    require(views >= 2, "config: need at least 2 views");
    require(view_size >= 11, "config: view_size must be >= 11");
    require(grid_resolution >= 2, "config: grid_resolution must be >= 2");
    require(grid_bound > 0.0, "config: grid_bound must be > 0");
    require(train_samples >= 1 && eval_samples >= 1, "config: sample counts must be >= 1");
    require(arc_deg >= 0.0 && arc_deg <= 360.0, "config: arc_deg must be in [0, 360]");
  }

  // Visits every field as (key, string getter, string setter).
  template <typename F>
  void fields(F&& f) {
    auto str = [&](const char* k, std::string& v) {
      f(k, [&v] { return v; }, [&v](const std::string& s) { v = s; });
    };
    auto real = [&](const char* k, double& v) {
      f(k, [&v] { return format_shortest(v); }, [&v, k](const std::string& s) { v = parse_real(k, s); });
    };
    auto count = [&](const char* k, std::size_t& v) {
      f(k, [&v] { return std::to_string(v); }, [&v, k](const std::string& s) { v = parse_count(k, s); });
    };
    auto flag = [&](const char* k, bool& v) {
      f(k, [&v] { return std::string(v ? "true" : "false"); }, [&v, k](const std::string& s) { v = parse_flag(k, s); });
    };
    str("command", command);
    str("input", input);
    str("out_dir", out_dir);
    str("run_id", run_id);
    f("seed", [this] { return std::to_string(seed); },
      [this](const std::string& s) { seed = parse_count("seed", s); });
    flag("deterministic", deterministic);
    str("strategy", strategy);
    real("xi_a", xi_a);
    real("xi_s", xi_s);
    real("beta", beta);
    real("mu", mu);
    count("total_iters", total_iters);
    count("eval_interval", eval_interval);
    real("learning_rate", learning_rate);
    count("batch_budget", batch_budget);
    flag("no_cache", no_cache);
    count("resize", resize);
    count("hidden", hidden);
    count("hidden_layers", hidden_layers);
    real("omega0", omega0);
    count("views", views);
    count("view_size", view_size);
    count("grid_resolution", grid_resolution);
    real("grid_bound", grid_bound);
    count("train_samples", train_samples);
    count("eval_samples", eval_samples);
    real("arc_deg", arc_deg);
    str("strategies", strategies);
    str("betas", betas);
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    const_cast<RunConfig*>(this)->fields([&](const char* k, auto get, auto) { m[k] = get(); });
    return m;
  }

  // Keys in file order.
  std::string to_text() const {
    std::ostringstream out;
    const_cast<RunConfig*>(this)->fields([&](const char* k, auto get, auto) { out << k << '=' << get() << '\n'; });
    return out.str();
  }

  void set(const std::string& key, const std::string& value) {
    bool found = false;
    fields([&](const char* k, auto, auto put) {
      if (key == k) {
        put(value);
        found = true;
      }
    });
    if (!found) throw ArgumentError("config: unknown key '" + key + "'");
  }

  // Lines "key=value"; blank lines and '#' comments ignored. Keys not present
  // keep their current value.
  void merge_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ArgumentError("config line " + std::to_string(lineno) + ": expected key=value");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t");
        const auto b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  static RunConfig from_text(const std::string& text) {
    RunConfig c;
    c.merge_text(text);
    return c;
  }

 private:
  static std::string format_shortest(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }
  static double parse_real(const char* key, const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ArgumentError(std::string("config: '") + key + "' expects a number, got '" + s + "'");
    return v;
  }
  static std::size_t parse_count(const char* key, const std::string& s) {
    std::size_t used = 0;
    unsigned long long v = 0;
    const bool digits = !s.empty() && s.find_first_not_of("0123456789") == std::string::npos;
    if (digits) {
      try {
        v = std::stoull(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
    }
    if (!digits || used != s.size())
      throw ArgumentError(std::string("config: '") + key + "' expects a non-negative integer, got '" + s + "'");
    return static_cast<std::size_t>(v);
  }
  static bool parse_flag(const char* key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ArgumentError(std::string("config: '") + key + "' expects true/false, got '" + s + "'");
  }
};

inline RunConfig load_config(const std::string& path) { return RunConfig::from_text(read_text(path)); }
inline void save_config(const std::string& path, const RunConfig& c) { write_text(path, c.to_text()); }

// "a,b,c" -> {"a","b","c"}; empty items rejected.
inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& item : split_csv(s)) {
    if (item.empty()) throw ArgumentError("list '" + s + "' has an empty item");
    out.push_back(item);
  }
  return out;
}

}  // namespace esup
