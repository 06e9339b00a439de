#pragma once

// Binary grid mask generation. A mask is an n x n grid of cells, 1 meaning
// "keep the primary image" and 0 meaning "fill from the partner image". Two
// patterns are supported: discrete (i.i.d. random cells, exact count) and
// blocked (union of sampled rectangles, preserving spatial continuity).

#include <cstdint>
#include <string>
#include <vector>

#include "mixmask/rng.hpp"

namespace mixmask {

enum class MaskPattern { discrete, blocked };

MaskPattern parse_mask_pattern(const std::string& name);
const char* mask_pattern_name(MaskPattern p);

// Masking ratio policy: either a fixed fraction of cells to zero out, or a
// fresh draw from uniform[lo, hi] per mask.
struct RatioPolicy {
  enum class Kind { fixed, uniform };
  Kind kind = Kind::fixed;
  double value = 0.5;
  double lo = 0.0;
  double hi = 1.0;

  static RatioPolicy fixed(double r);
  static RatioPolicy uniform(double lo, double hi);
  double sample(Rng& rng) const;
};

struct MaskBlock {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  int area() const { return height * width; }
};

struct GridMask {
  int grid_n = 0;
  std::vector<std::uint8_t> cells;  // n*n, row-major, values 0 or 1
  std::uint64_t seed = 0;
  // For blocked masks, the rectangles whose union is the 0-region, in the
  // order they were accepted. Empty for discrete masks.
  std::vector<MaskBlock> blocks;

  int ones() const;
  int zeros() const;
};

struct PixelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> keep;  // H*W, 1 = keep primary pixel
};

// Fraction of 1-cells (the kept region), exact rational in double.
double lambda_of(const GridMask& mask);
double lambda_of(const PixelMask& mask);

// Exactly round(ratio * n^2) cells are set to 0, chosen uniformly without
// replacement. Throws std::invalid_argument on bad grid_n or ratio.
GridMask gen_discrete_mask(int grid_n, double ratio, std::uint64_t seed);

// BEiT-style blocked masking: rectangles with area between a minimum block
// size and the remaining deficit and log-uniform aspect ratio in [0.3, 10/3]
// are sampled and zeroed until at least round(target_ratio * n^2) cells are 0.
// Overshoot past the target is less than the last accepted block's area.
GridMask gen_blocked_mask(int grid_n, double target_ratio, std::uint64_t seed);

GridMask complement(const GridMask& mask);

// Replicates each cell into an (H/n) x (W/n) pixel block. H and W must be
// divisible by n.
PixelMask expand_to_pixels(const GridMask& mask, int height, int width);

}  // namespace mixmask
