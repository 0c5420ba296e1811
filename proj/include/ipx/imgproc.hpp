#pragma once

#include <cstdint>
#include <optional>

#include "ipx/grid.hpp"
#include "ipx/image.hpp"

namespace ipx::imgproc {

/// Block size for a resolution: 16 px at 500 ppi, scaled linearly.
int default_block_size(int ppi);

/// Foreground mask on the block grid. Cell (c, r) covers pixels
/// [c*block_size, (c+1)*block_size) x [r*block_size, (r+1)*block_size).
struct BlockMask {
  int block_size = 16;
  Grid<std::uint8_t> cells;

  bool foreground_at_pixel(int x, int y) const;
  double coverage() const;
};

struct OrientationField {
  int block_size = 16;
  Grid<double> orientation;  // [0, pi), ridge direction (cos t, sin t) in image axes (y down)
  Grid<double> coherence;    // [0, 1]
};

struct RidgeAnalysis {
  int block_size = 16;
  Grid<std::uint8_t> mask;
  Grid<double> orientation;
  Grid<double> frequency;  // cycles/pixel, 0 where undefined
  Grid<double> coherence;

  BlockMask block_mask() const { return {block_size, mask}; }
  /// Bilinear doubled-angle interpolation of the block orientation at a pixel.
  double orientation_at(double x, double y) const;
  /// Mean ridge period over foreground blocks with a defined frequency, or 0.
  double mean_period() const;
};

struct Skeleton {
  int width = 0;
  int height = 0;
  Grid<std::uint8_t> pixels;  // 1 = ridge
  int ppi = 0;                 // 0 when unknown

  bool at(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height && pixels.at(x, y) != 0; }
};

/// Area-averaging resample to a lower resolution.
FingerprintImage downsample(const FingerprintImage& img, int target_ppi);

BlockMask segment(const FingerprintImage& img, int block_size);

OrientationField estimate_orientation(const FingerprintImage& img, int block_size);

/// Per-block ridge frequency from the gray-level signature projected across
/// the ridges. Blocks outside `mask` are 0.
Grid<double> estimate_frequency(const FingerprintImage& img, const OrientationField& field,
                                const BlockMask& mask);

/// Runs segment, orientation and frequency estimation with one block size.
RidgeAnalysis analyze(const FingerprintImage& img, std::optional<int> block_size = std::nullopt);

/// Oriented bandpass (Gabor) filtering steered by the analysis. Ridges stay
/// dark; background is mid-gray (128).
FingerprintImage enhance(const FingerprintImage& img, const RidgeAnalysis& analysis);

Skeleton binarize_and_thin(const FingerprintImage& enhanced, const BlockMask& mask);

/// Thinning step alone, exposed for tests; `ridge` is modified in place.
void thin(Grid<std::uint8_t>& ridge);

/// Full chain for one capture.
struct Preprocessed {
  RidgeAnalysis analysis;
  FingerprintImage enhanced;
  Skeleton skeleton;
};
Preprocessed preprocess(const FingerprintImage& img, std::optional<int> block_size = std::nullopt);

// Helpers shared with other modules.

/// 8-neighborhood in clockwise order starting at east: E, SE, S, SW, W, NW, N, NE.
inline constexpr int kNeighborDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
inline constexpr int kNeighborDy[8] = {0, 1, 1, 1, 0, -1, -1, -1};

/// Half the number of value changes around the 8-neighborhood.
int crossing_number(const Skeleton& skel, int x, int y);

/// Rotates about the image center with bilinear sampling; uncovered pixels take `fill`.
/// A direction (cos a, sin a) maps to (cos(a + angle), sin(a + angle)).
FingerprintImage rotate(const FingerprintImage& img, double angle, std::uint8_t fill = 128);

Grid<float> to_float(const FingerprintImage& img);
FingerprintImage from_float(const Grid<float>& plane, int ppi);

void gaussian_blur(Grid<float>& plane, double sigma);

}  // namespace ipx::imgproc
