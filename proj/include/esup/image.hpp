#pragma once

// Image containers, 8-bit PNG / PPM / PGM I/O and coordinate grids.

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "esup/error.hpp"

namespace esup {

// Row-major H x W x C intensities in [0, 1], C in {1, 3}.
class ImageBuffer {
 public:
  ImageBuffer() = default;

  ImageBuffer(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels), data_(height * width * channels, fill) {
    require(channels == 1 || channels == 3, "ImageBuffer: channels must be 1 or 3");
    require(fill >= 0.0 && fill <= 1.0, "ImageBuffer: fill outside [0,1]");
  }

  ImageBuffer(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    require(channels == 1 || channels == 3, "ImageBuffer: channels must be 1 or 3");
    require(data_.size() == height * width * channels, "ImageBuffer: data length mismatch");
    require(std::all_of(data_.begin(), data_.end(), [](double v) { return v >= 0.0 && v <= 1.0; }),
            "ImageBuffer: intensity outside [0,1]");
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t pixel_count() const { return height_ * width_; }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data_[(y * width_ + x) * channels_ + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data_[(y * width_ + x) * channels_ + c];
  }

  // Channel c of flat pixel index p.
  double& pixel(std::size_t p, std::size_t c = 0) { return data_[p * channels_ + c]; }
  double pixel(std::size_t p, std::size_t c = 0) const { return data_[p * channels_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const ImageBuffer& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 1;
  std::vector<double> data_;
};

// Row-major H x W real values, unbounded.
struct ScalarField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  ScalarField() = default;
  ScalarField(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}
  ScalarField(std::size_t h, std::size_t w, std::vector<double> values)
      : height(h), width(w), data(std::move(values)) {
    require(data.size() == h * w, "ScalarField: data length mismatch");
  }

  double& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  // Edge-clamped read.
  double clamped(std::ptrdiff_t y, std::ptrdiff_t x) const {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(height) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(width) - 1);
    return data[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)];
  }

  std::size_t size() const { return data.size(); }
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

  bool at(std::size_t y, std::size_t x) const { return data[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { data[y * width + x] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
  }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct Coord2 {
  double x = 0.0;
  double y = 0.0;
};

// One normalized (x, y) per pixel in row-major order; (0,0) -> (-1,-1), (W-1,H-1) -> (1,1).
struct CoordGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Coord2> coords;

  const Coord2& at(std::size_t y, std::size_t x) const { return coords[y * width + x]; }
};

inline CoordGrid pixel_grid(std::size_t h, std::size_t w) {
  require(h >= 2 && w >= 2, "pixel_grid: h and w must be >= 2");
  CoordGrid g{h, w, {}};
  g.coords.reserve(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double cy = -1.0 + 2.0 * static_cast<double>(y) / static_cast<double>(h - 1);
    for (std::size_t x = 0; x < w; ++x) {
      const double cx = -1.0 + 2.0 * static_cast<double>(x) / static_cast<double>(w - 1);
      g.coords.push_back({cx, cy});
    }
  }
  return g;
}

// BT.601 luma for RGB, pass-through for grayscale.
inline ScalarField to_luma(const ImageBuffer& img) {
  ScalarField out(img.height(), img.width());
  const std::size_t n = img.pixel_count();
  if (img.channels() == 1) {
    std::copy(img.data().begin(), img.data().end(), out.data.begin());
    return out;
  }
  for (std::size_t p = 0; p < n; ++p) {
    out.data[p] = 0.299 * img.pixel(p, 0) + 0.587 * img.pixel(p, 1) + 0.114 * img.pixel(p, 2);
  }
  return out;
}

inline ScalarField channel_field(const ImageBuffer& img, std::size_t c) {
  ScalarField out(img.height(), img.width());
  for (std::size_t p = 0; p < img.pixel_count(); ++p) out.data[p] = img.pixel(p, c);
  return out;
}

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::string& header, std::span<const std::uint8_t> body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

struct NetpbmHeader {
  int channels = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 0;
  std::size_t offset = 0;
  std::vector<std::string> comments;
};

// Parses a binary P5 / P6 header; comment lines are collected without the leading '#'.
inline NetpbmHeader parse_netpbm(const std::vector<unsigned char>& bytes) {
  NetpbmHeader h;
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw FormatError("not a binary PGM/PPM file");
  h.channels = bytes[1] == '6' ? 3 : 1;
  std::size_t i = 2;
  long fields[3] = {0, 0, 0};
  for (int f = 0; f < 3; ++f) {
    for (;;) {
      if (i >= bytes.size()) throw FormatError("truncated netpbm header");
      if (bytes[i] == '#') {
        std::string c;
        ++i;
        while (i < bytes.size() && bytes[i] != '\n') c.push_back(static_cast<char>(bytes[i++]));
        h.comments.push_back(c);
      } else if (std::isspace(bytes[i])) {
        ++i;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (i < bytes.size() && std::isdigit(bytes[i])) {
      v = v * 10 + (bytes[i++] - '0');
      any = true;
      if (v > (1L << 30)) throw FormatError("netpbm field too large");
    }
    if (!any) throw FormatError("malformed netpbm header");
    fields[f] = v;
  }
  if (i >= bytes.size() || !std::isspace(bytes[i])) throw FormatError("malformed netpbm header");
  ++i;
  h.width = static_cast<std::size_t>(fields[0]);
  h.height = static_cast<std::size_t>(fields[1]);
  h.maxval = static_cast<int>(fields[2]);
  h.offset = i;
  if (h.maxval != 255) throw FormatError("only 8-bit netpbm (maxval 255) is supported");
  if (h.width == 0 || h.height == 0) throw FormatError("empty netpbm image");
  if (bytes.size() - i < h.width * h.height * static_cast<std::size_t>(h.channels))
    throw FormatError("truncated netpbm pixel data");
  return h;
}

inline ImageBuffer decode_netpbm(const std::vector<unsigned char>& bytes, NetpbmHeader* header_out = nullptr) {
  NetpbmHeader h = parse_netpbm(bytes);
  const std::size_t n = h.width * h.height * static_cast<std::size_t>(h.channels);
  std::vector<double> data(n);
  for (std::size_t k = 0; k < n; ++k) data[k] = bytes[h.offset + k] / 255.0;
  ImageBuffer img(h.height, h.width, static_cast<std::size_t>(h.channels), std::move(data));
  if (header_out) *header_out = std::move(h);
  return img;
}

inline ImageBuffer decode_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("png: " + msg);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw FormatError("png: only 8-bit images are supported");
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t channels = color ? 3 : 1;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("png: " + msg);
  }
  std::vector<double> data(buf.size());
  std::transform(buf.begin(), buf.end(), data.begin(), [](png_byte b) { return b / 255.0; });
  return ImageBuffer(image.height, image.width, channels, std::move(data));
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// Loads an 8-bit PNG, binary PPM (P6) or binary PGM (P5); intensities scaled by 1/255.
inline ImageBuffer load_image(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path + "'");
  unsigned char magic[8] = {};
  const std::size_t got = std::fread(magic, 1, sizeof(magic), f);
  std::fclose(f);
  static constexpr unsigned char kPng[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (got == 8 && std::equal(std::begin(kPng), std::end(kPng), magic)) return detail::decode_png(path);
  if (got >= 2 && magic[0] == 'P' && (magic[1] == '5' || magic[1] == '6'))
    return detail::decode_netpbm(detail::read_file_bytes(path));
  throw FormatError("unsupported image format: '" + path + "'");
}

inline std::vector<std::uint8_t> to_bytes(const ImageBuffer& img) {
  std::vector<std::uint8_t> bytes(img.data().size());
  std::transform(img.data().begin(), img.data().end(), bytes.begin(), quantize8);
  return bytes;
}

inline void save_ppm(const std::string& path, const ImageBuffer& img) {
  const char magic = img.channels() == 3 ? '6' : '5';
  std::ostringstream hdr;
  hdr << 'P' << magic << '\n' << img.width() << ' ' << img.height() << "\n255\n";
  detail::write_file_bytes(path, hdr.str(), to_bytes(img));
}

inline void save_png(const std::string& path, const ImageBuffer& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("png write '" + path + "': " + msg);
  }
}

// Dispatches on extension: .png, otherwise netpbm (P6 for RGB, P5 for gray).
inline void save_image(const std::string& path, const ImageBuffer& img) {
  if (detail::ends_with(path, ".png") || detail::ends_with(path, ".PNG")) {
    save_png(path, img);
  } else {
    save_ppm(path, img);
  }
}

// PGM debug dump; values are clamped to [0,1] before quantization.
inline void save_pgm(const std::string& path, const ScalarField& f, const std::vector<std::string>& comments = {}) {
  std::ostringstream hdr;
  hdr << "P5\n";
  for (const auto& c : comments) hdr << '#' << c << '\n';
  hdr << f.width << ' ' << f.height << "\n255\n";
  std::vector<std::uint8_t> body(f.size());
  std::transform(f.data.begin(), f.data.end(), body.begin(), quantize8);
  detail::write_file_bytes(path, hdr.str(), body);
}

inline void save_pgm(const std::string& path, const BinaryMask& m, const std::vector<std::string>& comments = {}) {
  std::ostringstream hdr;
  hdr << "P5\n";
  for (const auto& c : comments) hdr << '#' << c << '\n';
  hdr << m.width << ' ' << m.height << "\n255\n";
  std::vector<std::uint8_t> body(m.size());
  std::transform(m.data.begin(), m.data.end(), body.begin(), [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
  detail::write_file_bytes(path, hdr.str(), body);
}

// Reads a P5 mask (nonzero = set) together with its header comments.
inline BinaryMask load_mask_pgm(const std::string& path, std::vector<std::string>* comments = nullptr) {
  const auto bytes = detail::read_file_bytes(path);
  const auto h = detail::parse_netpbm(bytes);
  if (h.channels != 1) throw FormatError("mask file must be P5: '" + path + "'");
  BinaryMask m(h.height, h.width);
  for (std::size_t k = 0; k < m.size(); ++k) m.data[k] = bytes[h.offset + k] ? 1 : 0;
  if (comments) *comments = h.comments;
  return m;
}

inline ScalarField mask_to_field(const BinaryMask& m) {
  ScalarField f(m.height, m.width);
  for (std::size_t k = 0; k < m.size(); ++k) f.data[k] = m.data[k] ? 1.0 : 0.0;
  return f;
}

// Per-pixel squared error summed over channels.
inline ScalarField squared_error_map(const ImageBuffer& a, const ImageBuffer& b) {
  require(a.same_shape(b), "squared_error_map: shape mismatch");
  ScalarField f(a.height(), a.width());
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.channels(); ++c) {
      const double d = a.pixel(p, c) - b.pixel(p, c);
      s += d * d;
    }
    f.data[p] = s;
  }
  return f;
}

// Bilinear resize with pixel-center alignment, for test fixtures.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t h, std::size_t w) {
  require(h > 0 && w > 0 && !img.empty(), "resize_bilinear: empty size");
  ImageBuffer out(h, w, img.channels());
  const double sy = static_cast<double>(img.height()) / static_cast<double>(h);
  const double sx = static_cast<double>(img.width()) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height() - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width() - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels(); ++c) {
        const double top = img.at(y0, x0, c) * (1 - tx) + img.at(y0, x1, c) * tx;
        const double bot = img.at(y1, x0, c) * (1 - tx) + img.at(y1, x1, c) * tx;
        out.at(y, x, c) = std::clamp(top * (1 - ty) + bot * ty, 0.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace esup
