#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tempotrack/common.hpp"

namespace tempotrack {

// Interleaved 8-bit RGB frame.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // height*width*3

  static Image solid(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b);

  std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* px(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool empty() const { return width <= 0 || height <= 0; }
};

// Binary PPM (P6). The synthetic benchmark uses this format; it is lossless
// and needs no codec.
void save_ppm(const std::filesystem::path& path, const Image& img);
Image load_ppm(const std::filesystem::path& path);

// Dispatches on extension: .ppm natively, .jpg/.jpeg via libjpeg when built in.
Image load_image(const std::filesystem::path& path);

// Per-channel means over the full frame, in [0,255].
void channel_means(const Image& img, double out[3]);

// Separable Gaussian blur, full frame.
Image gaussian_blur(const Image& img, double sigma);

// FNV-1a over raw pixel bytes; used for determinism manifests.
std::uint64_t pixel_hash(const Image& img);

}  // namespace tempotrack
