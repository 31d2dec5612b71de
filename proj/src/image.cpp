#include "capi/image.hpp"

#include <algorithm>
#include <cmath>

#include "capi/error.hpp"

namespace capi {

Image resample(const Image& src, const CropBox& box, int out_h, int out_w) {
  if (src.height < 1 || src.width < 1) throw ShapeError("resample: empty image");
  if (out_h < 1 || out_w < 1) throw ShapeError("resample: empty output");
  Image out(out_h, out_w);
  const double sy = box.height / out_h;
  const double sx = box.width / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp(box.top + (y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp(box.left + (x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < 3; ++ch) {
        const double top = (1 - wx) * src.at(y0, x0, ch) + wx * src.at(y0, x1, ch);
        const double bot = (1 - wx) * src.at(y1, x0, ch) + wx * src.at(y1, x1, ch);
        out.at(y, x, ch) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

Image resize(const Image& src, int out_h, int out_w) {
  if (out_h == src.height && out_w == src.width) return src;
  return resample(src, {0, 0, static_cast<double>(src.height), static_cast<double>(src.width)},
                  out_h, out_w);
}

Image hflip(const Image& src) {
  Image out(src.height, src.width);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(y, src.width - 1 - x, ch) = src.at(y, x, ch);
  return out;
}

CropParams sample_resized_crop(int height, int width, double scale_min, double scale_max,
                               bool allow_flip, Rng& rng) {
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw SpecError("crop scale range must satisfy 0 < min <= max <= 1");
  }
  const double area = static_cast<double>(height) * width;
  CropParams out;
  const double frac = rng.uniform(scale_min, scale_max);
  bool placed = false;
  for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
    const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);  // width / height
    const double w = std::sqrt(frac * area * ratio);
    const double h = std::sqrt(frac * area / ratio);
    if (w <= width && h <= height) {
      out.box = {rng.uniform(0.0, height - h), rng.uniform(0.0, width - w), h, w};
      placed = true;
    }
  }
  if (!placed) {
    // Square-ish fallback keeps the sampled area fraction.
    double h = std::min<double>(height, std::sqrt(frac * area));
    double w = std::min<double>(width, frac * area / h);
    h = frac * area / w;
    out.box = {(height - h) / 2.0, (width - w) / 2.0, h, w};
  }
  out.area_fraction = out.box.height * out.box.width / area;
  out.flipped = allow_flip && rng.bernoulli(0.5);
  return out;
}

Image apply_crop(const Image& src, const CropParams& crop, int out_size) {
  Image out = resample(src, crop.box, out_size, out_size);
  return crop.flipped ? hflip(out) : out;
}

Image resize_center_crop(const Image& src, int resize_to, int out_size) {
  if (resize_to < out_size) throw SpecError("resize_center_crop: resize_to < out_size");
  int h, w;
  if (src.height <= src.width) {
    h = resize_to;
    w = static_cast<int>(std::lround(static_cast<double>(src.width) * resize_to / src.height));
  } else {
    w = resize_to;
    h = static_cast<int>(std::lround(static_cast<double>(src.height) * resize_to / src.width));
  }
  const Image resized = resize(src, h, w);
  const int top = (h - out_size) / 2;
  const int left = (w - out_size) / 2;
  Image out(out_size, out_size);
  for (int y = 0; y < out_size; ++y)
    for (int x = 0; x < out_size; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = resized.at(top + y, left + x, ch);
  return out;
}

Image normalize_channels(const Image& src, const ChannelStats& stats) {
  Image out = src;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const std::size_t ch = i % 3;
    out.pixels[i] = (out.pixels[i] - stats.mean[ch]) / stats.std[ch];
  }
  return out;
}

}  // namespace capi
