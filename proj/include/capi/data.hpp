#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "capi/image.hpp"
#include "capi/masking.hpp"
#include "capi/trainer.hpp"

namespace capi {

// Procedural images whose patches carry known class labels.
//
// Each class owns a texture: a two-color sinusoid whose wave vector has an
// integer number of cycles per patch, so a patch-aligned crop of a class
// looks the same at every lattice position. An image is filled with a
// primary class and one patch-aligned rectangle of a second (uniformly drawn)
// class, which makes each position's label marginal uniform.
struct SyntheticSpec {
  int n_classes = 4;
  int image_size = 32;
  int patch_size = 8;
  double noise = 0.05;
  std::uint64_t library_seed = 0;
  std::size_t count = 4096;  // dataset size when used as a training source

  LatticeShape lattice() const { return {image_size / patch_size, image_size / patch_size}; }
  void validate() const;
  bool operator==(const SyntheticSpec&) const = default;
};

// Parses "classes=4,size=32,patch=8,noise=0.05,count=4096,library=0" (all
// keys optional). A "synthetic:" prefix, or the bare word, is accepted.
SyntheticSpec parse_synthetic_spec(std::string_view text);

struct TextureSpec {
  int kx = 0;
  int ky = 0;
  std::array<float, 3> color_a{};
  std::array<float, 3> color_b{};
};

std::vector<TextureSpec> texture_library(const SyntheticSpec& spec);

// Noise-free texture value of `cls` at pixel (y, x).
std::array<float, 3> texture_pixel(const TextureSpec& texture, int patch_size, int y, int x);

struct SyntheticSample {
  Image image;                   // values in [0, 1] before noise
  std::vector<int> patch_labels;  // raster order over the lattice
  int image_label = 0;            // the primary class
};

SyntheticSample generate_synthetic(const SyntheticSpec& spec, std::uint64_t index, std::uint64_t seed);
std::vector<SyntheticSample> generate_synthetic_batch(const SyntheticSpec& spec, std::size_t count,
                                                      std::uint64_t seed, std::uint64_t first_index = 0);

class SyntheticDataset : public ImageDataset {
 public:
  SyntheticDataset(SyntheticSpec spec, std::uint64_t seed);
  std::size_t size() const override { return spec_.count; }
  Image load(std::size_t index) const override;
  const SyntheticSpec& spec() const { return spec_; }

 private:
  SyntheticSpec spec_;
  std::uint64_t seed_;
};

struct FolderPreprocess {
  int resolution = 224;
  bool train = false;            // false: resize short side then center crop
  double crop_scale_min = 0.08;  // train mode only
  double crop_scale_max = 1.0;
  bool hflip = true;
};

// Decodes an image file to RGB floats in [0, 1].
Image read_image(const std::filesystem::path& path);
void write_image_png(const std::filesystem::path& path, const Image& image);

// Sorted listing of decodable images. Unreadable files are skipped with a
// warning; an empty result is an error.
std::vector<std::filesystem::path> list_image_folder(const std::filesystem::path& dir);

// Decoded and preprocessed (not channel-normalized) images; eval mode resizes
// the short side to resolution * 256 / 224 and center-crops.
std::vector<Image> load_image_folder(const std::filesystem::path& dir, const FolderPreprocess& pre,
                                     std::uint64_t seed);

// Raw decoded images for pretraining (train_view applies augmentation).
class ImageFolderDataset : public ImageDataset {
 public:
  explicit ImageFolderDataset(const std::filesystem::path& dir);
  std::size_t size() const override { return images_.size(); }
  Image load(std::size_t index) const override { return images_.at(index); }

 private:
  std::vector<Image> images_;
};

}  // namespace capi
