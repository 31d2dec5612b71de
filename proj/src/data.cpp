#include "capi/data.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <sstream>

#include "capi/error.hpp"

namespace capi {

void SyntheticSpec::validate() const {
  if (n_classes < 2) throw SpecError("synthetic: at least two classes are required");
  if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0) {
    throw SpecError("synthetic: image_size must be a positive multiple of patch_size");
  }
  if (!(noise >= 0)) throw SpecError("synthetic: noise must be non-negative");
  if (count == 0) throw SpecError("synthetic: count must be positive");
}

SyntheticSpec parse_synthetic_spec(std::string_view text) {
  if (text == "synthetic") text = {};
  if (text.starts_with("synthetic:")) text.remove_prefix(10);
  SyntheticSpec spec;
  std::istringstream is{std::string(text)};
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw SpecError("synthetic spec: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    try {
      if (key == "classes") spec.n_classes = std::stoi(value);
      else if (key == "size") spec.image_size = std::stoi(value);
      else if (key == "patch") spec.patch_size = std::stoi(value);
      else if (key == "noise") spec.noise = std::stod(value);
      else if (key == "count") spec.count = std::stoull(value);
      else if (key == "library") spec.library_seed = std::stoull(value);
      else throw SpecError("synthetic spec: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw SpecError("synthetic spec: bad value for '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

std::vector<TextureSpec> texture_library(const SyntheticSpec& spec) {
  // Wave vectors in cycles per patch; distinct orientations/frequencies first.
  static constexpr std::array<std::array<int, 2>, 8> waves{{
      {1, 0}, {0, 1}, {1, 1}, {1, -1}, {2, 0}, {0, 2}, {2, 1}, {1, 2}}};
  std::vector<TextureSpec> lib;
  for (int c = 0; c < spec.n_classes; ++c) {
    Rng rng = Rng::derive(spec.library_seed, "texture", {static_cast<std::uint64_t>(c)});
    TextureSpec t;
    t.kx = waves[static_cast<std::size_t>(c) % waves.size()][0];
    t.ky = waves[static_cast<std::size_t>(c) % waves.size()][1];
    for (int ch = 0; ch < 3; ++ch) {
      t.color_a[static_cast<std::size_t>(ch)] = static_cast<float>(rng.uniform(0.1, 0.9));
      t.color_b[static_cast<std::size_t>(ch)] = static_cast<float>(rng.uniform(0.1, 0.9));
    }
    lib.push_back(t);
  }
  return lib;
}

std::array<float, 3> texture_pixel(const TextureSpec& t, int patch_size, int y, int x) {
  const double phase = 2.0 * std::numbers::pi * (t.kx * (x + 0.5) + t.ky * (y + 0.5)) / patch_size;
  const double w = 0.5 + 0.5 * std::sin(phase);
  std::array<float, 3> out{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    out[ch] = static_cast<float>(w * t.color_a[ch] + (1.0 - w) * t.color_b[ch]);
  }
  return out;
}

SyntheticSample generate_synthetic(const SyntheticSpec& spec, std::uint64_t index, std::uint64_t seed) {
  spec.validate();
  const std::vector<TextureSpec> lib = texture_library(spec);
  Rng rng = Rng::derive(seed, "synthetic", {index});
  const LatticeShape lattice = spec.lattice();

  SyntheticSample s;
  s.image_label = rng.uniform_int(0, spec.n_classes - 1);
  s.patch_labels.assign(static_cast<std::size_t>(lattice.count()), s.image_label);
  const int other = rng.uniform_int(0, spec.n_classes - 1);
  const int h = rng.uniform_int(1, std::max(1, lattice.rows / 2));
  const int w = rng.uniform_int(1, std::max(1, lattice.cols / 2));
  const int top = rng.uniform_int(0, lattice.rows - h);
  const int left = rng.uniform_int(0, lattice.cols - w);
  for (int r = top; r < top + h; ++r)
    for (int c = left; c < left + w; ++c) s.patch_labels[static_cast<std::size_t>(r * lattice.cols + c)] = other;

  s.image = Image(spec.image_size, spec.image_size);
  for (int y = 0; y < spec.image_size; ++y) {
    for (int x = 0; x < spec.image_size; ++x) {
      const int label = s.patch_labels[static_cast<std::size_t>((y / spec.patch_size) * lattice.cols + x / spec.patch_size)];
      const auto px = texture_pixel(lib[static_cast<std::size_t>(label)], spec.patch_size, y, x);
      for (int ch = 0; ch < 3; ++ch) {
        float v = px[static_cast<std::size_t>(ch)];
        if (spec.noise > 0) v += static_cast<float>(spec.noise * rng.normal());
        s.image.at(y, x, ch) = v;
      }
    }
  }
  return s;
}

std::vector<SyntheticSample> generate_synthetic_batch(const SyntheticSpec& spec, std::size_t count,
                                                      std::uint64_t seed, std::uint64_t first_index) {
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic(spec, first_index + i, seed));
  return out;
}

SyntheticDataset::SyntheticDataset(SyntheticSpec spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
  spec_.validate();
}

Image SyntheticDataset::load(std::size_t index) const {
  return generate_synthetic(spec_, index, seed_).image;
}

// ---------------------------------------------------------------------------
// Image files

Image read_image(const std::filesystem::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image '" + path.string() + "'");
  Image img(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      img.at(y, x, 0) = row[x][2] / 255.0f;
      img.at(y, x, 1) = row[x][1] / 255.0f;
      img.at(y, x, 2) = row[x][0] / 255.0f;
    }
  }
  return img;
}

void write_image_png(const std::filesystem::path& path, const Image& image) {
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(image.at(y, x, ch), 0.0f, 1.0f);
        row[x][2 - ch] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image '" + path.string() + "'");
}

std::vector<std::filesystem::path> list_image_folder(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: '" + dir.string() + "'");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::filesystem::path> readable;
  for (const auto& f : files) {
    if (cv::haveImageReader(f.string())) {
      readable.push_back(f);
    } else {
      std::cerr << "warning: skipping unreadable file '" << f.string() << "'\n";
    }
  }
  if (readable.empty()) throw IoError("no readable images in '" + dir.string() + "'");
  return readable;
}

std::vector<Image> load_image_folder(const std::filesystem::path& dir, const FolderPreprocess& pre,
                                     std::uint64_t seed) {
  std::vector<Image> out;
  std::uint64_t index = 0;
  for (const auto& f : list_image_folder(dir)) {
    Image img;
    try {
      img = read_image(f);
    } catch (const IoError& e) {
      std::cerr << "warning: " << e.what() << "; skipping\n";
      continue;
    }
    if (pre.train) {
      Rng rng = Rng::derive(seed, "folder_augment", {index});
      const CropParams crop =
          sample_resized_crop(img.height, img.width, pre.crop_scale_min, pre.crop_scale_max, pre.hflip, rng);
      out.push_back(apply_crop(img, crop, pre.resolution));
    } else {
      const int resize_to = static_cast<int>(std::lround(pre.resolution * 256.0 / 224.0));
      out.push_back(resize_center_crop(img, resize_to, pre.resolution));
    }
    ++index;
  }
  if (out.empty()) throw IoError("no decodable images in '" + dir.string() + "'");
  return out;
}

ImageFolderDataset::ImageFolderDataset(const std::filesystem::path& dir) {
  for (const auto& f : list_image_folder(dir)) {
    try {
      images_.push_back(read_image(f));
    } catch (const IoError& e) {
      std::cerr << "warning: " << e.what() << "; skipping\n";
    }
  }
  if (images_.empty()) throw IoError("no decodable images in '" + dir.string() + "'");
}

}  // namespace capi
