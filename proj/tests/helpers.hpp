#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "esup/image.hpp"

#ifndef ESUP_DATA_DIR
#define ESUP_DATA_DIR "data"
#endif

namespace esup::test {

inline std::string data_path(const std::string& rel) { return std::string(ESUP_DATA_DIR) + "/" + rel; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = info ? std::string(info->test_suite_name()) + "_" + info->name() : "esup";
    for (auto& c : name)
      if (c == '/') c = '_';
    path_ = std::filesystem::temp_directory_path() / ("esup_" + name);
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

inline ScalarField wave_field(std::size_t h, std::size_t w) {
  ScalarField f(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) f.at(y, x) = 0.5 + 0.4 * std::sin(0.37 * x + 0.23 * y);
  return f;
}

inline ImageBuffer random_image(std::size_t h, std::size_t w, std::size_t c, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBuffer img(h, w, c);
  for (auto& v : img.data()) v = u(gen);
  return img;
}

inline ImageBuffer checkerboard(std::size_t side, std::size_t cell) {
  ImageBuffer img(side, side, 1);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) img.at(y, x) = ((y / cell + x / cell) % 2) ? 1.0 : 0.0;
  return img;
}

}  // namespace esup::test
