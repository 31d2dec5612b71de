#include "capi/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "capi/error.hpp"

namespace capi {

void LatticeShape::validate() const {
  if (rows < 1 || cols < 1) {
    throw ShapeError("lattice must be at least 1x1, got " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

std::string_view to_string(MaskStrategy strategy) {
  switch (strategy) {
    case MaskStrategy::random: return "random";
    case MaskStrategy::block: return "block";
    case MaskStrategy::inverse_block: return "inverse_block";
    case MaskStrategy::inverse_block_roll: return "inverse_block_roll";
  }
  return "?";
}

MaskStrategy parse_mask_strategy(std::string_view name) {
  for (auto s : {MaskStrategy::random, MaskStrategy::block, MaskStrategy::inverse_block,
                 MaskStrategy::inverse_block_roll}) {
    if (to_string(s) == name) return s;
  }
  throw SpecError("unknown masking strategy '" + std::string(name) + "'");
}

double default_mask_ratio(MaskStrategy strategy) {
  return strategy == MaskStrategy::random ? 0.90 : 0.65;
}

void MaskSpec::validate() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw SpecError("masking ratio must lie in [0, 1], got " + std::to_string(ratio));
  }
}

int target_masked_count(LatticeShape shape, double ratio) {
  shape.validate();
  MaskSpec{MaskStrategy::random, ratio}.validate();
  const int n = shape.count();
  const int t = static_cast<int>(std::floor(ratio * n + 1e-9));
  return std::clamp(t, 0, n);
}

PatchMask::PatchMask(LatticeShape shape)
    : shape_(shape), cells_(static_cast<std::size_t>(shape.count()), 0) {
  shape.validate();
}

void PatchMask::set(int row, int col, bool masked) {
  auto& cell = cells_[index(row, col)];
  if ((cell != 0) != masked) masked_count_ += masked ? 1 : -1;
  cell = masked ? 1 : 0;
}

std::vector<int> PatchMask::masked_indices() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(masked_count_));
  for (int i = 0; i < shape_.count(); ++i)
    if (at_index(i)) out.push_back(i);
  return out;
}

std::vector<int> PatchMask::kept_indices() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(kept_count()));
  for (int i = 0; i < shape_.count(); ++i)
    if (!at_index(i)) out.push_back(i);
  return out;
}

PatchMask PatchMask::inverted() const {
  PatchMask out(shape_);
  for (int r = 0; r < shape_.rows; ++r)
    for (int c = 0; c < shape_.cols; ++c) out.set(r, c, !at(r, c));
  return out;
}

BlockRect sample_block_rect(LatticeShape shape, int target, Rng& rng) {
  shape.validate();
  if (target < 0 || target > shape.count()) throw SpecError("block target out of range");
  if (target == 0) return {0, 0, 0, 0};

  const double log_aspect = rng.uniform(std::log(0.5), std::log(2.0));
  const double aspect = std::exp(log_aspect);  // height / width
  int h = static_cast<int>(std::lround(std::sqrt(target * aspect)));
  int w = static_cast<int>(std::lround(std::sqrt(target / aspect)));
  h = std::clamp(h, 1, shape.rows);
  w = std::clamp(w, 1, shape.cols);
  // Grow the side that still has room until the rectangle covers the target.
  while (h * w < target) {
    if (w < shape.cols) {
      w = std::min(shape.cols, (target + h - 1) / h);
    } else {
      h = std::min(shape.rows, (target + w - 1) / w);
    }
  }
  const int top = rng.uniform_int(0, shape.rows - h);
  const int left = rng.uniform_int(0, shape.cols - w);
  return {top, left, h, w};
}

PatchMask truncated_block_mask(LatticeShape shape, const BlockRect& rect, int target) {
  PatchMask mask(shape);
  if (rect.area() < target) throw SpecError("block rectangle smaller than target count");
  if (rect.top < 0 || rect.left < 0 || rect.top + rect.height > shape.rows ||
      rect.left + rect.width > shape.cols) {
    throw ShapeError("block rectangle exceeds lattice");
  }
  int placed = 0;
  for (int r = rect.top; r < rect.top + rect.height && placed < target; ++r) {
    for (int c = rect.left; c < rect.left + rect.width && placed < target; ++c) {
      mask.set(r, c, true);
      ++placed;
    }
  }
  return mask;
}

namespace {

PatchMask random_mask(LatticeShape shape, int target, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(shape.count()));
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `target` slots are a uniform subset.
  for (int i = 0; i < target; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(shape.count() - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  PatchMask mask(shape);
  for (int i = 0; i < target; ++i) {
    const int cell = order[static_cast<std::size_t>(i)];
    mask.set(cell / shape.cols, cell % shape.cols, true);
  }
  return mask;
}

PatchMask block_mask(LatticeShape shape, int target, Rng& rng) {
  const BlockRect rect = sample_block_rect(shape, target, rng);
  return truncated_block_mask(shape, rect, target);
}

}  // namespace

PatchMask generate_mask(LatticeShape shape, const MaskSpec& spec, Rng& rng) {
  shape.validate();
  spec.validate();
  const int t = target_masked_count(shape, spec.ratio);
  switch (spec.strategy) {
    case MaskStrategy::random:
      return random_mask(shape, t, rng);
    case MaskStrategy::block:
      return block_mask(shape, t, rng);
    case MaskStrategy::inverse_block:
      return block_mask(shape, shape.count() - t, rng).inverted();
    case MaskStrategy::inverse_block_roll: {
      PatchMask base = block_mask(shape, shape.count() - t, rng).inverted();
      const int dr = rng.uniform_int(0, shape.rows - 1);
      const int dc = rng.uniform_int(0, shape.cols - 1);
      return roll_mask(base, dr, dc);
    }
  }
  throw SpecError("unhandled masking strategy");
}

PatchMask roll_mask(const PatchMask& mask, int drow, int dcol) {
  const int rows = mask.rows();
  const int cols = mask.cols();
  PatchMask out(mask.shape());
  auto wrap = [](int v, int m) { return ((v % m) + m) % m; };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (mask.at(wrap(r - drow, rows), wrap(c - dcol, cols))) out.set(r, c, true);
    }
  }
  return out;
}

std::vector<Coord> sample_prediction_targets(const PatchMask& mask, int n_pred, Rng& rng) {
  if (n_pred < 0) throw SpecError("n_pred must be non-negative");
  if (n_pred > mask.masked_count()) {
    throw SpecError("insufficient targets: requested " + std::to_string(n_pred) + " of " +
                    std::to_string(mask.masked_count()) + " masked cells");
  }
  std::vector<int> pool = mask.masked_indices();
  std::vector<Coord> out;
  out.reserve(static_cast<std::size_t>(n_pred));
  for (int i = 0; i < n_pred; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_index(pool.size() - static_cast<std::size_t>(i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    const int cell = pool[static_cast<std::size_t>(i)];
    out.push_back({cell / mask.cols(), cell % mask.cols()});
  }
  return out;
}

std::string serialize_mask_fixture(const MaskFixture& fixture) {
  std::ostringstream os;
  os.precision(17);
  os << fixture.mask.rows() << ' ' << fixture.mask.cols() << ' ' << to_string(fixture.spec.strategy)
     << ' ' << fixture.spec.ratio << ' ' << fixture.seed << '\n';
  for (int r = 0; r < fixture.mask.rows(); ++r) {
    for (int c = 0; c < fixture.mask.cols(); ++c) os << (fixture.mask.at(r, c) ? '1' : '0');
    os << '\n';
  }
  return os.str();
}

MaskFixture parse_mask_fixture(std::string_view text) {
  std::istringstream is{std::string(text)};
  LatticeShape shape;
  std::string strategy;
  MaskFixture fx;
  if (!(is >> shape.rows >> shape.cols >> strategy >> fx.spec.ratio >> fx.seed)) {
    throw SpecError("mask fixture: malformed header");
  }
  fx.spec.strategy = parse_mask_strategy(strategy);
  fx.mask = PatchMask(shape);
  for (int r = 0; r < shape.rows; ++r) {
    std::string line;
    if (!(is >> line) || static_cast<int>(line.size()) != shape.cols) {
      throw ShapeError("mask fixture: row " + std::to_string(r) + " has wrong length");
    }
    for (int c = 0; c < shape.cols; ++c) {
      if (line[static_cast<std::size_t>(c)] != '0' && line[static_cast<std::size_t>(c)] != '1')
        throw SpecError("mask fixture: expected 0/1");
      fx.mask.set(r, c, line[static_cast<std::size_t>(c)] == '1');
    }
  }
  return fx;
}

}  // namespace capi
