#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "capi/rng.hpp"

namespace capi {

// Patch lattice dimensions (patch rows x patch cols).
struct LatticeShape {
  int rows = 0;
  int cols = 0;

  int count() const { return rows * cols; }
  // Throws ShapeError when either side is < 1.
  void validate() const;
  bool operator==(const LatticeShape&) const = default;
};

struct Coord {
  int row = 0;
  int col = 0;
  auto operator<=>(const Coord&) const = default;
};

enum class MaskStrategy { random, block, inverse_block, inverse_block_roll };

std::string_view to_string(MaskStrategy strategy);
MaskStrategy parse_mask_strategy(std::string_view name);

// 0.90 for random masking, 0.65 otherwise.
double default_mask_ratio(MaskStrategy strategy);

struct MaskSpec {
  MaskStrategy strategy = MaskStrategy::inverse_block_roll;
  double ratio = 0.65;

  static MaskSpec with_default_ratio(MaskStrategy strategy) {
    return {strategy, default_mask_ratio(strategy)};
  }
  void validate() const;
  bool operator==(const MaskSpec&) const = default;
};

// floor(ratio * n). A 1e-9 guard absorbs representation error in ratios such
// as 0.7 so that 0.7 * 10 yields 7.
int target_masked_count(LatticeShape shape, double ratio);

// Boolean occupancy over the lattice; true = masked (dropped from the encoder).
class PatchMask {
 public:
  PatchMask() = default;
  explicit PatchMask(LatticeShape shape);

  LatticeShape shape() const { return shape_; }
  int rows() const { return shape_.rows; }
  int cols() const { return shape_.cols; }
  int masked_count() const { return masked_count_; }
  int kept_count() const { return shape_.count() - masked_count_; }

  bool at(int row, int col) const { return cells_[index(row, col)] != 0; }
  bool at(Coord c) const { return at(c.row, c.col); }
  bool at_index(int i) const { return cells_[static_cast<std::size_t>(i)] != 0; }
  void set(int row, int col, bool masked);

  // Raster-order indices of masked / kept cells.
  std::vector<int> masked_indices() const;
  std::vector<int> kept_indices() const;

  PatchMask inverted() const;

  bool operator==(const PatchMask&) const = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(shape_.cols) +
           static_cast<std::size_t>(col);
  }

  LatticeShape shape_{};
  std::vector<std::uint8_t> cells_;
  int masked_count_ = 0;
};

// Axis-aligned rectangle on the lattice.
struct BlockRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  int area() const { return height * width; }
  bool operator==(const BlockRect&) const = default;
};

// Samples a rectangle covering at least `target` cells: area target, aspect
// ratio log-uniform in [1/2, 2], sides clamped to the lattice and grown until
// the area suffices, position uniform over valid placements.
BlockRect sample_block_rect(LatticeShape shape, int target, Rng& rng);

// Masks the first `target` cells of `rect` in row-major order, i.e. removes
// the excess at the rectangle's lower-right end.
PatchMask truncated_block_mask(LatticeShape shape, const BlockRect& rect, int target);

// Mask with exactly target_masked_count(shape, spec.ratio) cells set.
PatchMask generate_mask(LatticeShape shape, const MaskSpec& spec, Rng& rng);

// Circular shift: out(r, c) = in((r - drow) mod rows, (c - dcol) mod cols).
PatchMask roll_mask(const PatchMask& mask, int drow, int dcol);

// n_pred distinct masked coordinates, uniformly without replacement.
std::vector<Coord> sample_prediction_targets(const PatchMask& mask, int n_pred, Rng& rng);

// Text fixture: header line "rows cols strategy ratio seed" followed by one
// line of '0'/'1' per lattice row.
struct MaskFixture {
  MaskSpec spec;
  std::uint64_t seed = 0;
  PatchMask mask;
};

std::string serialize_mask_fixture(const MaskFixture& fixture);
MaskFixture parse_mask_fixture(std::string_view text);

}  // namespace capi
