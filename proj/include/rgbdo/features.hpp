#pragma once

// Sparse features: a segment-test corner detector over the pyramid, a
// rotation-compensated 256-bit binary descriptor, and mutual-nearest-
// neighbor Hamming matching with an absolute and a ratio gate.
//
// Everything here is deterministic: the descriptor test pattern comes from
// a fixed seed, detection output is sorted by (level, score, u, v), and all
// ties break toward the lower index.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/geometry.hpp"

namespace rgbdo::features {

struct Descriptor {
  std::array<std::uint64_t, 4> bits{};

  bool operator==(const Descriptor& other) const { return bits == other.bits; }
};

inline int hamming_distance(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (int i = 0; i < 4; ++i) d += std::popcount(a.bits[i] ^ b.bits[i]);
  return d;
}

struct FeaturePoint {
  geom::Pixel pixel;       // level-0 coordinates
  int level = 0;
  double sigma = 1.0;      // measurement scale, 2^level
  double score = 0.0;
  Descriptor descriptor;
  bool has_descriptor = false;
  float depth = 0.f;       // depth sampled at the detection pixel (0 = none)
};

struct DetectorOptions {
  double threshold = 20.0 / 255.0;  // segment test contrast
  int target_count = 1000;
  int grid_size = 8;                // spatial bucketing grid
  bool compute_descriptors = true;

  void validate() const {
    if (!(threshold > 0.0)) throw InvalidArgument("DetectorOptions: threshold must be positive");
    if (target_count < 1 || grid_size < 1)
      throw InvalidArgument("DetectorOptions: counts must be positive");
  }
};

namespace detail {

// Bresenham circle of radius 3: the 16 segment-test offsets in clockwise
// order starting from (0, -3).
inline constexpr std::array<std::array<int, 2>, 16> kCircle = {{{0, -3},
                                                                {1, -3},
                                                                {2, -2},
                                                                {3, -1},
                                                                {3, 0},
                                                                {3, 1},
                                                                {2, 2},
                                                                {1, 3},
                                                                {0, 3},
                                                                {-1, 3},
                                                                {-2, 2},
                                                                {-3, 1},
                                                                {-3, 0},
                                                                {-3, -1},
                                                                {-2, -2},
                                                                {-1, -3}}};

// Longest circular run of set flags in a 16-bit ring.
inline int longest_circular_run(unsigned mask) {
  if (mask == 0xFFFFu) return 16;
  int best = 0, run = 0;
  for (int i = 0; i < 32; ++i) {
    if (mask & (1u << (i % 16))) {
      ++run;
      best = std::max(best, run);
    } else {
      run = 0;
    }
  }
  return std::min(best, 16);
}

struct Corner {
  int x = 0;
  int y = 0;
  int level = 0;
  float score = 0.f;
};

// Segment-test score: total contrast beyond the threshold over all circle
// pixels that exceed it in the dominant polarity.
inline bool segment_test(const RasterF& img, int x, int y, float threshold, float* score) {
  const float center = img(x, y);
  unsigned brighter = 0, darker = 0;
  float bright_sum = 0.f, dark_sum = 0.f;
  for (int i = 0; i < 16; ++i) {
    const float v = img(x + kCircle[i][0], y + kCircle[i][1]);
    const float diff = v - center;
    if (diff > threshold) {
      brighter |= 1u << i;
      bright_sum += diff - threshold;
    } else if (diff < -threshold) {
      darker |= 1u << i;
      dark_sum += -diff - threshold;
    }
  }
  const bool is_bright = longest_circular_run(brighter) >= 9;
  const bool is_dark = longest_circular_run(darker) >= 9;
  if (!is_bright && !is_dark) return false;
  if (is_bright && (!is_dark || bright_sum >= dark_sum))
    *score = bright_sum;
  else
    *score = dark_sum;
  return true;
}

// 256 descriptor test-point pairs inside a disc of radius 13 (so any
// rotation keeps them within the 31x31 patch), generated once from a fixed
// seed with platform-stable arithmetic on the raw mt19937 output.
struct TestPattern {
  std::array<std::array<std::int8_t, 4>, 256> pairs;
};

inline const TestPattern& test_pattern() {
  static const TestPattern pattern = [] {
    TestPattern p;
    std::mt19937 rng(0x52474244u);
    auto coord = [&rng]() { return static_cast<int>(rng() % 27u) - 13; };
    for (int i = 0; i < 256; ++i) {
      int x1, y1, x2, y2;
      do {
        x1 = coord();
        y1 = coord();
      } while (x1 * x1 + y1 * y1 > 13 * 13);
      do {
        x2 = coord();
        y2 = coord();
      } while (x2 * x2 + y2 * y2 > 13 * 13 || (x2 == x1 && y2 == y1));
      p.pairs[i] = {static_cast<std::int8_t>(x1), static_cast<std::int8_t>(y1),
                    static_cast<std::int8_t>(x2), static_cast<std::int8_t>(y2)};
    }
    return p;
  }();
  return pattern;
}

inline constexpr int kPatchRadius = 15;
inline constexpr int kOrientationBins = 12;

}  // namespace detail

// Binary descriptor at an integer patch center of a single pyramid level.
// The patch orientation is estimated from the intensity centroid, quantized
// to 12 bins, and the test pattern is rotated accordingly before sampling.
// Returns nullopt when the 31x31 patch does not fit in the raster.
inline std::optional<Descriptor> describe(const RasterF& img, int cx, int cy) {
  const int r = detail::kPatchRadius;
  if (cx - r < 0 || cy - r < 0 || cx + r >= img.width() || cy + r >= img.height())
    return std::nullopt;

  double m10 = 0.0, m01 = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dx * dx + dy * dy > r * r) continue;
      const double v = img(cx + dx, cy + dy);
      m10 += dx * v;
      m01 += dy * v;
    }
  }
  const double angle = std::atan2(m01, m10);
  const double bin_width = 2.0 * std::numbers::pi / detail::kOrientationBins;
  int bin = static_cast<int>(std::lround(angle / bin_width));
  bin = ((bin % detail::kOrientationBins) + detail::kOrientationBins) % detail::kOrientationBins;
  const double qa = bin * bin_width;
  const double ca = std::cos(qa), sa = std::sin(qa);

  const detail::TestPattern& pattern = detail::test_pattern();
  Descriptor out;
  for (int i = 0; i < 256; ++i) {
    const auto& t = pattern.pairs[i];
    const int x1 = cx + static_cast<int>(std::lround(ca * t[0] - sa * t[1]));
    const int y1 = cy + static_cast<int>(std::lround(sa * t[0] + ca * t[1]));
    const int x2 = cx + static_cast<int>(std::lround(ca * t[2] - sa * t[3]));
    const int y2 = cy + static_cast<int>(std::lround(sa * t[2] + ca * t[3]));
    if (img(x1, y1) < img(x2, y2)) out.bits[i / 64] |= std::uint64_t{1} << (i % 64);
  }
  return out;
}

// Corner detection over all pyramid levels with 3x3 non-maximum suppression
// per level, then spatial bucketing on a grid: buckets are drained round-
// robin by descending score until target_count features are kept, so that
// strong texture in one corner of the image cannot crowd out the rest.
inline std::vector<FeaturePoint> detect(const geom::Pyramid& pyramid,
                                        const DetectorOptions& options = {}) {
  options.validate();
  const float threshold = static_cast<float>(options.threshold);

  std::vector<detail::Corner> corners;
  for (int level = 0; level < pyramid.level_count(); ++level) {
    const RasterF& img = pyramid.level(level).intensity;
    if (img.width() < 7 || img.height() < 7) continue;
    RasterF score_map(img.width(), img.height(), 0.f);
    for (int y = 3; y < img.height() - 3; ++y) {
      for (int x = 3; x < img.width() - 3; ++x) {
        float score = 0.f;
        if (detail::segment_test(img, x, y, threshold, &score))
          score_map(x, y) = std::max(score, std::numeric_limits<float>::min());
      }
    }
    for (int y = 3; y < img.height() - 3; ++y) {
      for (int x = 3; x < img.width() - 3; ++x) {
        const float s = score_map(x, y);
        if (s <= 0.f) continue;
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const float n = score_map(x + dx, y + dy);
            // Strictly greater wins; ties resolve toward the raster-order
            // earlier pixel so exactly one of a tied pair survives.
            if (n > s || (n == s && (dy < 0 || (dy == 0 && dx < 0)))) {
              is_max = false;
              break;
            }
          }
        if (is_max) corners.push_back({x, y, level, s});
      }
    }
  }

  // Spatial bucketing on the level-0 footprint.
  const int grid = options.grid_size;
  const double cell_w = static_cast<double>(pyramid.level(0).intensity.width()) / grid;
  const double cell_h = static_cast<double>(pyramid.level(0).intensity.height()) / grid;
  std::vector<std::vector<int>> buckets(static_cast<std::size_t>(grid) * grid);
  for (std::size_t i = 0; i < corners.size(); ++i) {
    const detail::Corner& c = corners[i];
    const double scale = std::pow(2.0, c.level);
    const int bx = std::min(grid - 1, static_cast<int>(c.x * scale / cell_w));
    const int by = std::min(grid - 1, static_cast<int>(c.y * scale / cell_h));
    buckets[static_cast<std::size_t>(by) * grid + bx].push_back(static_cast<int>(i));
  }
  for (std::vector<int>& bucket : buckets) {
    std::sort(bucket.begin(), bucket.end(), [&corners](int a, int b) {
      if (corners[a].score != corners[b].score) return corners[a].score > corners[b].score;
      return a < b;
    });
  }

  std::vector<int> selected;
  selected.reserve(std::min<std::size_t>(corners.size(), options.target_count));
  std::vector<std::size_t> cursor(buckets.size(), 0);
  bool any = true;
  while (static_cast<int>(selected.size()) < options.target_count && any) {
    any = false;
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      if (cursor[b] >= buckets[b].size()) continue;
      selected.push_back(buckets[b][cursor[b]++]);
      any = true;
      if (static_cast<int>(selected.size()) >= options.target_count) break;
    }
  }

  std::vector<FeaturePoint> out;
  out.reserve(selected.size());
  for (int idx : selected) {
    const detail::Corner& c = corners[idx];
    const geom::PyramidLevel& lv = pyramid.level(c.level);
    FeaturePoint f;
    const double scale = std::pow(2.0, c.level);
    f.pixel = geom::Pixel(c.x * scale, c.y * scale);
    f.level = c.level;
    f.sigma = scale;
    f.score = c.score;
    f.depth = lv.depth(c.x, c.y);
    if (options.compute_descriptors) {
      const std::optional<Descriptor> d = describe(lv.intensity, c.x, c.y);
      if (d) {
        f.descriptor = *d;
        f.has_descriptor = true;
      }
    }
    out.push_back(f);
  }

  std::sort(out.begin(), out.end(), [](const FeaturePoint& a, const FeaturePoint& b) {
    if (a.level != b.level) return a.level < b.level;
    if (a.score != b.score) return a.score > b.score;
    if (a.pixel.u != b.pixel.u) return a.pixel.u < b.pixel.u;
    return a.pixel.v < b.pixel.v;
  });
  return out;
}

struct MatchOptions {
  int max_distance = 64;
  double ratio = 0.8;
};

// Mutual nearest neighbors under Hamming distance. A pair survives only if
// each side is the other's best candidate, the distance passes the absolute
// gate, and on both sides best < ratio * second-best.
inline std::vector<std::pair<int, int>> match(const std::vector<Descriptor>& a,
                                              const std::vector<Descriptor>& b,
                                              const MatchOptions& options = {}) {
  const int n_a = static_cast<int>(a.size());
  const int n_b = static_cast<int>(b.size());
  if (n_a == 0 || n_b == 0) return {};

  constexpr int kInf = std::numeric_limits<int>::max();
  std::vector<int> best_b(n_a, -1), best_b_dist(n_a, kInf), second_b_dist(n_a, kInf);
  std::vector<int> best_a(n_b, -1), best_a_dist(n_b, kInf), second_a_dist(n_b, kInf);

  for (int i = 0; i < n_a; ++i) {
    for (int j = 0; j < n_b; ++j) {
      const int d = hamming_distance(a[i], b[j]);
      if (d < best_b_dist[i]) {
        second_b_dist[i] = best_b_dist[i];
        best_b_dist[i] = d;
        best_b[i] = j;
      } else if (d < second_b_dist[i]) {
        second_b_dist[i] = d;
      }
      if (d < best_a_dist[j]) {
        second_a_dist[j] = best_a_dist[j];
        best_a_dist[j] = d;
        best_a[j] = i;
      } else if (d < second_a_dist[j]) {
        second_a_dist[j] = d;
      }
    }
  }

  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n_a; ++i) {
    const int j = best_b[i];
    if (j < 0 || best_a[j] != i) continue;
    const int d = best_b_dist[i];
    if (d >= options.max_distance) continue;
    const double second_i =
        second_b_dist[i] == kInf ? std::numeric_limits<double>::infinity() : second_b_dist[i];
    const double second_j =
        second_a_dist[j] == kInf ? std::numeric_limits<double>::infinity() : second_a_dist[j];
    if (!(d < options.ratio * second_i) || !(d < options.ratio * second_j)) continue;
    out.emplace_back(i, j);
  }
  return out;
}

}  // namespace rgbdo::features
