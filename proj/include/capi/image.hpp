#pragma once

#include <array>
#include <string>
#include <vector>

#include "capi/rng.hpp"

namespace capi {

// Interleaved H x W x 3 float image.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // size height * width * 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int ch) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  float at(int y, int x, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  bool operator==(const Image&) const = default;
};

struct CropBox {
  double top = 0;
  double left = 0;
  double height = 0;
  double width = 0;
};

// Bilinear resample of the crop box (pixel coordinates, may be fractional) to
// out_h x out_w, using pixel-center alignment.
Image resample(const Image& src, const CropBox& box, int out_h, int out_w);
Image resize(const Image& src, int out_h, int out_w);
Image hflip(const Image& src);

struct CropParams {
  CropBox box;
  double area_fraction = 1.0;
  bool flipped = false;
};

// Random resized crop: area fraction uniform in [scale_min, scale_max], aspect
// ratio log-uniform in [3/4, 4/3]; falls back to the largest centered crop of
// the sampled area when the box does not fit after ten attempts.
CropParams sample_resized_crop(int height, int width, double scale_min, double scale_max,
                               bool allow_flip, Rng& rng);
Image apply_crop(const Image& src, const CropParams& crop, int out_size);

// Evaluation preprocessing: resize the short side to `resize_to`, then take a
// centered out_size x out_size crop.
Image resize_center_crop(const Image& src, int resize_to, int out_size);

// Per-channel (x - mean) / std.
struct ChannelStats {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};
Image normalize_channels(const Image& src, const ChannelStats& stats = {});

}  // namespace capi
