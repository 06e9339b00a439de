#include "mixmask/maskgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mixmask {

namespace {

void check_grid_and_ratio(int grid_n, double ratio) {
  if (grid_n <= 0) throw std::invalid_argument("grid_n must be positive");
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw std::invalid_argument("mask ratio must lie in [0, 1]");
}

int target_zero_cells(int grid_n, double ratio) {
  return static_cast<int>(std::llround(ratio * grid_n * grid_n));
}

}  // namespace

MaskPattern parse_mask_pattern(const std::string& name) {
  if (name == "discrete") return MaskPattern::discrete;
  if (name == "blocked") return MaskPattern::blocked;
  throw std::invalid_argument("unknown mask pattern: " + name);
}

const char* mask_pattern_name(MaskPattern p) {
  return p == MaskPattern::discrete ? "discrete" : "blocked";
}

RatioPolicy RatioPolicy::fixed(double r) {
  if (!(r >= 0.0 && r <= 1.0))
    throw std::invalid_argument("fixed ratio must lie in [0, 1]");
  RatioPolicy p;
  p.kind = Kind::fixed;
  p.value = r;
  return p;
}

RatioPolicy RatioPolicy::uniform(double lo, double hi) {
  if (!(lo >= 0.0 && hi <= 1.0 && lo <= hi))
    throw std::invalid_argument("uniform ratio range must satisfy 0 <= lo <= hi <= 1");
  RatioPolicy p;
  p.kind = Kind::uniform;
  p.lo = lo;
  p.hi = hi;
  return p;
}

double RatioPolicy::sample(Rng& rng) const {
  return kind == Kind::fixed ? value : rng.uniform(lo, hi);
}

int GridMask::ones() const {
  return static_cast<int>(std::count(cells.begin(), cells.end(), 1));
}

int GridMask::zeros() const {
  return static_cast<int>(cells.size()) - ones();
}

double lambda_of(const GridMask& mask) {
  return static_cast<double>(mask.ones()) / static_cast<double>(mask.cells.size());
}

double lambda_of(const PixelMask& mask) {
  long ones = std::count(mask.keep.begin(), mask.keep.end(), 1);
  return static_cast<double>(ones) / static_cast<double>(mask.keep.size());
}

GridMask gen_discrete_mask(int grid_n, double ratio, std::uint64_t seed) {
  check_grid_and_ratio(grid_n, ratio);
  int n_cells = grid_n * grid_n;
  int n_zero = target_zero_cells(grid_n, ratio);

  GridMask mask;
  mask.grid_n = grid_n;
  mask.seed = seed;
  mask.cells.assign(n_cells, 1);

  // Partial Fisher-Yates: the first n_zero entries of the shuffled index
  // array are the zeroed cells, a uniform draw without replacement.
  std::vector<int> idx(n_cells);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int i = 0; i < n_zero; ++i) {
    int j = i + static_cast<int>(rng.below(n_cells - i));
    std::swap(idx[i], idx[j]);
    mask.cells[idx[i]] = 0;
  }
  return mask;
}

GridMask gen_blocked_mask(int grid_n, double target_ratio, std::uint64_t seed) {
  check_grid_and_ratio(grid_n, target_ratio);
  int n_cells = grid_n * grid_n;
  int target = target_zero_cells(grid_n, target_ratio);

  GridMask mask;
  mask.grid_n = grid_n;
  mask.seed = seed;
  mask.cells.assign(n_cells, 1);
  if (target == 0) return mask;

  // Per-attempt minimum block area. 4 cells as in BEiT, but capped at half
  // the grid so tiny grids still admit legal blocks smaller than the whole.
  double min_area = std::min(4.0, n_cells / 2.0);
  double log_aspect_lo = std::log(0.3);
  double log_aspect_hi = std::log(10.0 / 3.0);

  Rng rng(seed);
  int zeros = 0;
  long total_attempts = 0;
  while (zeros < target) {
    int deficit = target - zeros;
    double max_area = std::max(min_area, static_cast<double>(deficit));
    // Up to 10 candidates per round; the first legal one is applied. A
    // candidate is legal if its area stays within [min_area, max_area] after
    // clamping to the grid and it zeroes at least one new cell.
    for (int attempt = 0; attempt < 10; ++attempt) {
      if (++total_attempts > 1000000)
        throw std::runtime_error("blocked mask generation stalled");
      double area = rng.uniform(min_area, max_area);
      double aspect = std::exp(rng.uniform(log_aspect_lo, log_aspect_hi));
      int h = static_cast<int>(std::llround(std::sqrt(area * aspect)));
      int w = static_cast<int>(std::llround(std::sqrt(area / aspect)));
      h = std::clamp(h, 1, grid_n);
      w = std::clamp(w, 1, grid_n);
      if (h * w < min_area || h * w > max_area) continue;
      int top = static_cast<int>(rng.below(grid_n - h + 1));
      int left = static_cast<int>(rng.below(grid_n - w + 1));
      int delta = 0;
      for (int y = top; y < top + h; ++y)
        for (int x = left; x < left + w; ++x)
          delta += mask.cells[y * grid_n + x];
      if (delta == 0) continue;
      for (int y = top; y < top + h; ++y)
        for (int x = left; x < left + w; ++x)
          mask.cells[y * grid_n + x] = 0;
      zeros += delta;
      mask.blocks.push_back({top, left, h, w});
      break;
    }
  }
  return mask;
}

GridMask complement(const GridMask& mask) {
  GridMask out;
  out.grid_n = mask.grid_n;
  out.seed = mask.seed;
  out.cells.resize(mask.cells.size());
  for (std::size_t i = 0; i < mask.cells.size(); ++i)
    out.cells[i] = mask.cells[i] ? 0 : 1;
  return out;
}

PixelMask expand_to_pixels(const GridMask& mask, int height, int width) {
  if (mask.grid_n <= 0 || mask.cells.empty())
    throw std::invalid_argument("expand_to_pixels: empty mask");
  if (height <= 0 || width <= 0 || height % mask.grid_n != 0 || width % mask.grid_n != 0)
    throw std::invalid_argument("expand_to_pixels: image dims must be divisible by grid_n");

  PixelMask out;
  out.height = height;
  out.width = width;
  out.keep.resize(static_cast<std::size_t>(height) * width);
  int cell_h = height / mask.grid_n;
  int cell_w = width / mask.grid_n;
  for (int y = 0; y < height; ++y) {
    int gy = y / cell_h;
    for (int x = 0; x < width; ++x) {
      int gx = x / cell_w;
      out.keep[static_cast<std::size_t>(y) * width + x] = mask.cells[gy * mask.grid_n + gx];
    }
  }
  return out;
}

}  // namespace mixmask
