#pragma once

// Binary checkpoint container.
//
//   "ESUP" | version u16 | layer count u16
//   [grid variant only] nx ny nz u32 | bounds min xyz, max xyz f32
//   per layer: rows u32 | cols u32 | rows*cols f32 weights (row-major) | rows f32 biases
//   optimizer: layer count u16 (0 = absent) | first moments (same layout) |
//              second moments (same layout) | step u64
//
// Everything is little-endian. Grid checkpoints store one layer of
// (voxels x 4) raw parameters and no bias block.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "esup/error.hpp"

namespace esup {

inline constexpr std::uint16_t kCheckpointVersionMlp = 1;
inline constexpr std::uint16_t kCheckpointVersionGrid = 0x0101;

struct CheckpointLayer {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> weights;  // rows * cols, row-major
  std::vector<float> biases;   // rows (empty for grids)

  friend bool operator==(const CheckpointLayer&, const CheckpointLayer&) = default;
};

struct GridHeader {
  std::array<std::uint32_t, 3> resolution{};
  std::array<float, 3> bounds_min{};
  std::array<float, 3> bounds_max{};

  friend bool operator==(const GridHeader&, const GridHeader&) = default;
};

struct OptimizerBlock {
  std::vector<CheckpointLayer> first_moment;
  std::vector<CheckpointLayer> second_moment;
  std::uint64_t step = 0;

  friend bool operator==(const OptimizerBlock&, const OptimizerBlock&) = default;
};

struct Checkpoint {
  std::uint16_t version = kCheckpointVersionMlp;
  std::optional<GridHeader> grid;
  std::vector<CheckpointLayer> layers;
  std::optional<OptimizerBlock> optimizer;

  bool is_grid() const { return version == kCheckpointVersionGrid; }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put(bits, 4);
  }
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  std::string take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : bytes_(b) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() {
    const auto bits = static_cast<std::uint32_t>(get(4));
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint: truncated data");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline void write_layers(ByteWriter& w, const std::vector<CheckpointLayer>& layers, bool biases) {
  for (const auto& l : layers) {
    require(l.weights.size() == static_cast<std::size_t>(l.rows) * l.cols, "checkpoint: weight shape mismatch");
    w.u32(l.rows);
    w.u32(l.cols);
    for (float f : l.weights) w.f32(f);
    if (biases) {
      require(l.biases.size() == l.rows, "checkpoint: bias shape mismatch");
      for (float f : l.biases) w.f32(f);
    }
  }
}

inline std::vector<CheckpointLayer> read_layers(ByteReader& r, std::size_t count, bool biases) {
  std::vector<CheckpointLayer> layers(count);
  for (auto& l : layers) {
    l.rows = r.u32();
    l.cols = r.u32();
    const std::size_t n = static_cast<std::size_t>(l.rows) * l.cols;
    if (n * 4 > r.remaining()) throw FormatError("checkpoint: layer larger than file");
    l.weights.resize(n);
    for (auto& f : l.weights) f = r.f32();
    if (biases) {
      l.biases.resize(l.rows);
      for (auto& f : l.biases) f = r.f32();
    }
  }
  return layers;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  require(ck.version == kCheckpointVersionMlp || ck.version == kCheckpointVersionGrid, "checkpoint: unknown version");
  require(ck.is_grid() == ck.grid.has_value(), "checkpoint: grid header must accompany the grid variant");
  detail::ByteWriter w;
  w.raw("ESUP", 4);
  w.u16(ck.version);
  w.u16(static_cast<std::uint16_t>(ck.layers.size()));
  if (ck.grid) {
    for (auto v : ck.grid->resolution) w.u32(v);
    for (auto v : ck.grid->bounds_min) w.f32(v);
    for (auto v : ck.grid->bounds_max) w.f32(v);
  }
  const bool biases = !ck.is_grid();
  detail::write_layers(w, ck.layers, biases);
  if (ck.optimizer) {
    require(ck.optimizer->first_moment.size() == ck.layers.size() &&
                ck.optimizer->second_moment.size() == ck.layers.size(),
            "checkpoint: optimizer layer count mismatch");
    w.u16(static_cast<std::uint16_t>(ck.layers.size()));
    detail::write_layers(w, ck.optimizer->first_moment, biases);
    detail::write_layers(w, ck.optimizer->second_moment, biases);
    w.u64(ck.optimizer->step);
  } else {
    w.u16(0);
  }
  return w.take();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4) != "ESUP") throw FormatError("checkpoint: bad magic");
  Checkpoint ck;
  ck.version = r.u16();
  if (ck.version != kCheckpointVersionMlp && ck.version != kCheckpointVersionGrid)
    throw FormatError("checkpoint: unsupported version " + std::to_string(ck.version));
  const std::size_t count = r.u16();
  if (ck.is_grid()) {
    GridHeader g;
    for (auto& v : g.resolution) v = r.u32();
    for (auto& v : g.bounds_min) v = r.f32();
    for (auto& v : g.bounds_max) v = r.f32();
    ck.grid = g;
  }
  const bool biases = !ck.is_grid();
  ck.layers = detail::read_layers(r, count, biases);
  const std::size_t opt = r.u16();
  if (opt != 0) {
    if (opt != count) throw FormatError("checkpoint: optimizer layer count mismatch");
    OptimizerBlock o;
    o.first_moment = detail::read_layers(r, opt, biases);
    o.second_moment = detail::read_layers(r, opt, biases);
    o.step = r.u64();
    ck.optimizer = std::move(o);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

}  // namespace esup
