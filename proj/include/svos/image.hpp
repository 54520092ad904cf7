#pragma once

// 8-bit frames and binary masks, their binary PNM encodings (P6 / P5), and
// conversions to C x H x W tensors.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "svos/tensor.hpp"

namespace svos {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
  std::uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool operator==(const Image&) const = default;
};

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;  // 0 or 1

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}
  std::uint8_t& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

struct PnmHeader {
  char kind = 0;  // '5' or '6'
  int width = 0;
  int height = 0;
  int maxval = 0;
};

PnmHeader read_pnm_header(const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);
// Masks are stored as P5 with values 0 / 255; anything else is rejected.
Mask read_mask_pgm(const std::filesystem::path& path);
void write_mask_pgm(const std::filesystem::path& path, const Mask& mask);

// 3 x H x W with values in [0, 1] (divided by 255).
template <typename Real>
Tensor<Real> image_to_tensor(const Image& image);
template <typename Real>
Image tensor_to_image(const Tensor<Real>& t);
// 1 x H x W with values in {0, 1}.
template <typename Real>
Tensor<Real> mask_to_tensor(const Mask& mask);
// Pixels strictly above `threshold` are foreground.
template <typename Real>
Mask tensor_to_mask(const Tensor<Real>& t, double threshold = 0.5);

template <typename Real>
bool is_binary(const Tensor<Real>& t);

// Align-corners bilinear resampling of a C x H x W tensor.
template <typename Real>
Tensor<Real> resize_bilinear(const Tensor<Real>& image, int out_h, int out_w);
// Align-corners nearest-neighbour resampling; keeps binary masks binary.
template <typename Real>
Tensor<Real> resize_nearest(const Tensor<Real>& image, int out_h, int out_w);

}  // namespace svos
