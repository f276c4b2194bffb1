#pragma once

#include <string>
#include <vector>

#include "rap/common.hpp"

namespace rap {

// H x W x 3 color buffer, components in [0, 1], row-major, double precision.
struct Image {
  int height = 0, width = 0;
  std::vector<double> data;  // size height*width*3

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), data(size_t(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
  size_t numel() const { return data.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

// H x W scalar buffer (depth in scene units; 0 is the "no surface" sentinel).
struct DepthMap {
  int height = 0, width = 0;
  std::vector<double> data;

  DepthMap() = default;
  DepthMap(int h, int w, double fill = 0.0) : height(h), width(w), data(size_t(h) * w, fill) {}

  double& at(int y, int x) { return data[size_t(y) * width + x]; }
  double at(int y, int x) const { return data[size_t(y) * width + x]; }
};

// Binary P6 PPM, 8-bit. Values are clamped to [0,1] and quantized.
void save_ppm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);

// Grayscale PFM, little-endian f32, bottom-up scanlines.
void save_pfm(const DepthMap& d, const std::string& path);
DepthMap load_pfm(const std::string& path);

double psnr(const Image& a, const Image& b);
double mean_rgb_l2(const Image& a, const Image& b);  // L2 distance of mean colors

// Sharpness proxy: variance of the 3x3 Laplacian response on the luma channel.
double variance_of_laplacian(const Image& img);

// Per-channel affine appearance shift: out = clamp(gain * in + bias).
Image apply_tint(const Image& img, const Vec3& gain, const Vec3& bias);

}  // namespace rap
