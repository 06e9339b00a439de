#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "mixmask/maskgen.hpp"

using namespace mixmask;

namespace {

// Independent zero count, ignoring GridMask::zeros().
int count_zeros(const GridMask& m) {
  int z = 0;
  for (auto c : m.cells) z += (c == 0);
  return z;
}

long long expected_zero_cells(int n, double ratio) {
  return std::llround(ratio * n * n);
}

}  // namespace

TEST_CASE("pattern names parse and round-trip") {
  CHECK(parse_mask_pattern("discrete") == MaskPattern::discrete);
  CHECK(parse_mask_pattern("blocked") == MaskPattern::blocked);
  CHECK(parse_mask_pattern(mask_pattern_name(MaskPattern::blocked)) ==
        MaskPattern::blocked);
  CHECK_THROWS_AS(parse_mask_pattern("checker"), std::invalid_argument);
}

TEST_CASE("ratio policy") {
  Rng rng(1);
  CHECK(RatioPolicy::fixed(0.3).sample(rng) == 0.3);
  RatioPolicy u = RatioPolicy::uniform(0.2, 0.7);
  for (int i = 0; i < 100; ++i) {
    double r = u.sample(rng);
    CHECK(r >= 0.2);
    CHECK(r < 0.7);
  }
  CHECK_THROWS_AS(RatioPolicy::fixed(1.5), std::invalid_argument);
  CHECK_THROWS_AS(RatioPolicy::uniform(0.8, 0.2), std::invalid_argument);
}

TEST_CASE("discrete mask hits the requested cell count exactly") {
  for (int n : {2, 3, 4, 8, 16}) {
    for (double ratio : {0.0, 0.1, 0.25, 0.5, 0.77, 1.0}) {
      GridMask m = gen_discrete_mask(n, ratio, 99 + n);
      CHECK(count_zeros(m) == expected_zero_cells(n, ratio));
      CHECK(m.zeros() == count_zeros(m));
      CHECK(m.ones() + m.zeros() == n * n);
      CHECK(m.blocks.empty());
    }
  }
}

TEST_CASE("discrete mask edge ratios") {
  GridMask all_keep = gen_discrete_mask(4, 0.0, 5);
  CHECK(all_keep.zeros() == 0);
  CHECK(lambda_of(all_keep) == 1.0);
  GridMask all_fill = gen_discrete_mask(4, 1.0, 5);
  CHECK(all_fill.ones() == 0);
  CHECK(lambda_of(all_fill) == 0.0);
}

TEST_CASE("mask argument validation") {
  CHECK_THROWS_AS(gen_discrete_mask(0, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_discrete_mask(-3, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_discrete_mask(4, -0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_discrete_mask(4, 1.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_blocked_mask(0, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_blocked_mask(4, 2.0, 1), std::invalid_argument);
}

TEST_CASE("masks are deterministic in the seed") {
  for (int i = 0; i < 20; ++i) {
    GridMask a = gen_discrete_mask(8, 0.5, i);
    GridMask b = gen_discrete_mask(8, 0.5, i);
    CHECK(a.cells == b.cells);
    GridMask c = gen_blocked_mask(8, 0.5, i);
    GridMask d = gen_blocked_mask(8, 0.5, i);
    CHECK(c.cells == d.cells);
    CHECK(c.blocks.size() == d.blocks.size());
  }
  // seeds actually matter
  bool any_diff = false;
  for (int i = 0; i < 20 && !any_diff; ++i)
    any_diff = gen_discrete_mask(8, 0.5, 100 + i).cells !=
               gen_discrete_mask(8, 0.5, 200 + i).cells;
  CHECK(any_diff);
}

TEST_CASE("lambda is the exact kept fraction") {
  for (int seed = 0; seed < 30; ++seed) {
    GridMask m = gen_discrete_mask(8, 0.3, seed);
    int ones = 0;
    for (auto c : m.cells) ones += (c == 1);
    CHECK(lambda_of(m) == static_cast<double>(ones) / 64.0);
  }
}

TEST_CASE("complement flips every cell and lambdas sum to one") {
  for (int seed = 0; seed < 30; ++seed) {
    GridMask m = gen_blocked_mask(8, 0.4, seed);
    GridMask c = complement(m);
    for (std::size_t i = 0; i < m.cells.size(); ++i)
      CHECK(m.cells[i] + c.cells[i] == 1);
    CHECK(lambda_of(m) + lambda_of(c) == 1.0);
    CHECK(c.blocks.empty());
  }
}

TEST_CASE("grid 2 at ratio 0.5 always yields a single domino") {
  for (int seed = 0; seed < 300; ++seed) {
    GridMask m = gen_blocked_mask(2, 0.5, seed);
    CHECK(m.zeros() == 2);
    REQUIRE(m.blocks.size() == 1);
    const MaskBlock& b = m.blocks[0];
    bool domino = (b.height == 1 && b.width == 2) || (b.height == 2 && b.width == 1);
    CHECK(domino);
    // the two zero cells are adjacent
    int zi[2], zn = 0;
    for (int i = 0; i < 4; ++i)
      if (m.cells[i] == 0) zi[zn++] = i;
    REQUIRE(zn == 2);
    int dy = std::abs(zi[0] / 2 - zi[1] / 2), dx = std::abs(zi[0] % 2 - zi[1] % 2);
    CHECK(dy + dx == 1);
  }
}

TEST_CASE("blocked mask meets the target with bounded overshoot") {
  for (int seed = 0; seed < 500; ++seed) {
    GridMask m = gen_blocked_mask(8, 0.5, seed);
    long long target = expected_zero_cells(8, 0.5);
    CHECK(m.zeros() >= target);
    REQUIRE(!m.blocks.empty());
    CHECK(m.zeros() - target < m.blocks.back().area());
  }
}

TEST_CASE("blocked mask blocks are in-bounds and at least the minimum size") {
  for (int seed = 0; seed < 200; ++seed) {
    GridMask m = gen_blocked_mask(8, 0.6, seed);
    for (const MaskBlock& b : m.blocks) {
      CHECK(b.top >= 0);
      CHECK(b.left >= 0);
      CHECK(b.top + b.height <= 8);
      CHECK(b.left + b.width <= 8);
      CHECK(b.area() >= 4);  // min(4, 64/2)
      // aspect after clamping stays within the sampling range
      double r = static_cast<double>(b.height) / b.width;
      CHECK(r >= 0.1);
      CHECK(r <= 10.0);
    }
    // union of blocks is exactly the zero set
    std::vector<std::uint8_t> cover(64, 1);
    for (const MaskBlock& b : m.blocks)
      for (int y = b.top; y < b.top + b.height; ++y)
        for (int x = b.left; x < b.left + b.width; ++x) cover[y * 8 + x] = 0;
    CHECK(cover == m.cells);
  }
}

TEST_CASE("blocked mask edge ratios") {
  GridMask none = gen_blocked_mask(8, 0.0, 3);
  CHECK(none.zeros() == 0);
  CHECK(none.blocks.empty());
  GridMask all = gen_blocked_mask(8, 1.0, 3);
  CHECK(all.zeros() == 64);
}

TEST_CASE("expand_to_pixels replicates cells into uniform tiles") {
  GridMask m = gen_discrete_mask(4, 0.5, 17);
  PixelMask p = expand_to_pixels(m, 32, 32);
  REQUIRE(p.height == 32);
  REQUIRE(p.width == 32);
  // brute-force reference expansion
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      CHECK(p.keep[y * 32 + x] == m.cells[(y / 8) * 4 + (x / 8)]);
  CHECK(lambda_of(p) == lambda_of(m));
}

TEST_CASE("expand_to_pixels rejects non-divisible sizes") {
  GridMask m = gen_discrete_mask(3, 0.5, 1);
  CHECK_THROWS_AS(expand_to_pixels(m, 32, 32), std::invalid_argument);
  CHECK_THROWS_AS(expand_to_pixels(m, 33, 32), std::invalid_argument);
  CHECK_NOTHROW(expand_to_pixels(m, 33, 33));
}

TEST_CASE("uniform ratio policy drives blocked masks across the range") {
  RatioPolicy u = RatioPolicy::uniform(0.0, 1.0);
  Rng rng(23);
  std::set<int> counts;
  for (int i = 0; i < 200; ++i) {
    double r = u.sample(rng);
    GridMask m = gen_blocked_mask(8, r, 1000 + i);
    CHECK(m.zeros() >= expected_zero_cells(8, r));
    counts.insert(m.zeros());
  }
  CHECK(counts.size() > 20);
}
