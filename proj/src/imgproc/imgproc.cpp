#include "ipx/imgproc.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <vector>

#include "ipx/error.hpp"

namespace ipx::imgproc {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kMinPeriod = 3.0;
constexpr double kMaxPeriod = 40.0;
constexpr double kSegmentRatio = 0.1;
constexpr double kMinBlockVariance = 1.0;

double wrap_pi(double angle) {
  double t = std::fmod(angle, kPi);
  if (t < 0) t += kPi;
  if (t >= kPi) t -= kPi;
  return t;
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

double sample_bilinear(const Grid<float>& plane, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(plane.cols() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(plane.rows() - 1));
  int x0 = static_cast<int>(x);
  int y0 = static_cast<int>(y);
  int x1 = std::min(x0 + 1, plane.cols() - 1);
  int y1 = std::min(y0 + 1, plane.rows() - 1);
  double fx = x - x0;
  double fy = y - y0;
  double top = plane.at(x0, y0) * (1 - fx) + plane.at(x1, y0) * fx;
  double bottom = plane.at(x0, y1) * (1 - fx) + plane.at(x1, y1) * fx;
  return top * (1 - fy) + bottom * fy;
}

// Per-output list of (source index, weight) for box resampling along one axis.
std::vector<std::vector<std::pair<int, double>>> area_weights(int n_in, int n_out) {
  std::vector<std::vector<std::pair<int, double>>> weights(n_out);
  double ratio = static_cast<double>(n_in) / n_out;
  for (int o = 0; o < n_out; ++o) {
    double lo = o * ratio;
    double hi = (o + 1) * ratio;
    int first = static_cast<int>(std::floor(lo));
    int last = std::min(n_in - 1, static_cast<int>(std::ceil(hi)) - 1);
    double total = 0;
    for (int i = first; i <= last; ++i) {
      double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0) {
        weights[o].emplace_back(i, overlap);
        total += overlap;
      }
    }
    for (auto& w : weights[o]) w.second /= total;
  }
  return weights;
}

// Keeps the largest 4-connected foreground component and fills enclosed holes.
void keep_largest_component(Grid<std::uint8_t>& cells) {
  const int cols = cells.cols();
  const int rows = cells.rows();
  Grid<int> label(cols, rows, -1);
  std::vector<int> sizes;
  std::vector<std::pair<int, int>> stack;
  const int dx[4] = {1, -1, 0, 0};
  const int dy[4] = {0, 0, 1, -1};
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (cells.at(c, r) == 0 || label.at(c, r) >= 0) continue;
      int id = static_cast<int>(sizes.size());
      sizes.push_back(0);
      stack.assign(1, {c, r});
      label.at(c, r) = id;
      while (!stack.empty()) {
        auto [x, y] = stack.back();
        stack.pop_back();
        ++sizes[id];
        for (int k = 0; k < 4; ++k) {
          int nx = x + dx[k];
          int ny = y + dy[k];
          if (cells.contains(nx, ny) && cells.at(nx, ny) != 0 && label.at(nx, ny) < 0) {
            label.at(nx, ny) = id;
            stack.emplace_back(nx, ny);
          }
        }
      }
    }
  }
  if (sizes.empty()) return;
  int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());

  // Background reachable from the grid border stays background; the rest is a hole.
  Grid<std::uint8_t> outside(cols, rows, 0);
  stack.clear();
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      bool border = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
      if (border && label.at(c, r) != best) {
        outside.at(c, r) = 1;
        stack.emplace_back(c, r);
      }
    }
  }
  while (!stack.empty()) {
    auto [x, y] = stack.back();
    stack.pop_back();
    for (int k = 0; k < 4; ++k) {
      int nx = x + dx[k];
      int ny = y + dy[k];
      if (cells.contains(nx, ny) && label.at(nx, ny) != best && outside.at(nx, ny) == 0) {
        outside.at(nx, ny) = 1;
        stack.emplace_back(nx, ny);
      }
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) cells.at(c, r) = outside.at(c, r) ? 0 : 1;
  }
}

struct Gradients {
  Grid<float> gx;
  Grid<float> gy;
};

Gradients sobel(const Grid<float>& plane) {
  const int w = plane.cols();
  const int h = plane.rows();
  Gradients g{Grid<float>(w, h), Grid<float>(w, h)};
  auto px = [&](int x, int y) { return plane.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float a = px(x - 1, y - 1), b = px(x, y - 1), c = px(x + 1, y - 1);
      float d = px(x - 1, y), f = px(x + 1, y);
      float gg = px(x - 1, y + 1), hh = px(x, y + 1), i = px(x + 1, y + 1);
      g.gx.at(x, y) = (c + 2 * f + i) - (a + 2 * d + gg);
      g.gy.at(x, y) = (gg + 2 * hh + i) - (a + 2 * b + c);
    }
  }
  return g;
}

// Frequency of the strongest oscillation in a windowed, mean-removed signature,
// or 0 when the oscillation is weak or the period is implausible.
double dominant_frequency(std::vector<double> signature) {
  const int n = static_cast<int>(signature.size());
  if (n < 8) return 0.0;
  double mean = std::accumulate(signature.begin(), signature.end(), 0.0) / n;
  // Remove the linear trend so illumination ramps do not leak into low frequencies.
  double sx = 0, sxy = 0;
  for (int k = 0; k < n; ++k) {
    double t = k - (n - 1) / 2.0;
    sx += t * t;
    sxy += t * (signature[k] - mean);
  }
  double slope = sx > 0 ? sxy / sx : 0.0;
  double energy = 0;
  for (int k = 0; k < n; ++k) {
    double t = k - (n - 1) / 2.0;
    double hann = 0.5 - 0.5 * std::cos(2 * kPi * (k + 0.5) / n);
    signature[k] = (signature[k] - mean - slope * t) * hann;
    energy += signature[k] * signature[k];
  }
  if (energy <= 1e-9) return 0.0;

  auto power = [&](double f) {
    // Phasor recurrence instead of a sin/cos pair per sample.
    const double cs = std::cos(2 * kPi * f), sn = std::sin(2 * kPi * f);
    double zr = 1, zi = 0, re = 0, im = 0;
    for (int k = 0; k < n; ++k) {
      re += signature[k] * zr;
      im -= signature[k] * zi;
      const double t = zr * cs - zi * sn;
      zi = zr * sn + zi * cs;
      zr = t;
    }
    return re * re + im * im;
  };

  const double f_lo = 1.0 / kMaxPeriod;
  const double f_hi = 1.0 / kMinPeriod;
  const double step = 0.5 / n;
  double best_f = 0, best_p = -1;
  for (double f = f_lo; f <= f_hi; f += step) {
    double p = power(f);
    if (p > best_p) {
      best_p = p;
      best_f = f;
    }
  }
  // Golden-section refinement inside the bracketing grid cell.
  double a = std::max(f_lo, best_f - step);
  double b = std::min(f_hi, best_f + step);
  const double golden = (std::sqrt(5.0) - 1) / 2;
  double c = b - golden * (b - a);
  double d = a + golden * (b - a);
  double pc = power(c), pd = power(d);
  for (int it = 0; it < 30; ++it) {
    if (pc > pd) {
      b = d;
      d = c;
      pd = pc;
      c = b - golden * (b - a);
      pc = power(c);
    } else {
      a = c;
      c = d;
      pc = pd;
      d = a + golden * (b - a);
      pd = power(d);
    }
  }
  double f = (a + b) / 2;
  double peak = power(f);
  // A pure Hann-windowed sinusoid peaks at about n * energy / 3.
  if (peak < 0.1 * n * energy) return 0.0;
  double period = 1.0 / f;
  if (period <= kMinPeriod || period >= kMaxPeriod) return 0.0;
  return f;
}

}  // namespace

int default_block_size(int ppi) {
  if (ppi <= 0) throw Error(ErrorCode::InvalidArgument, "ppi must be positive");
  return std::max(4, static_cast<int>(std::lround(16.0 * ppi / 500.0)));
}

bool BlockMask::foreground_at_pixel(int x, int y) const {
  if (x < 0 || y < 0) return false;
  int c = x / block_size;
  int r = y / block_size;
  return cells.contains(c, r) && cells.at(c, r) != 0;
}

double BlockMask::coverage() const {
  if (cells.empty()) return 0.0;
  auto fg = std::count_if(cells.values().begin(), cells.values().end(), [](auto v) { return v != 0; });
  return static_cast<double>(fg) / static_cast<double>(cells.size());
}

double RidgeAnalysis::orientation_at(double x, double y) const {
  if (orientation.empty()) return 0.0;
  double gx = std::clamp(x / block_size - 0.5, 0.0, orientation.cols() - 1.0);
  double gy = std::clamp(y / block_size - 0.5, 0.0, orientation.rows() - 1.0);
  int c0 = static_cast<int>(gx);
  int r0 = static_cast<int>(gy);
  int c1 = std::min(c0 + 1, orientation.cols() - 1);
  int r1 = std::min(r0 + 1, orientation.rows() - 1);
  double fx = gx - c0;
  double fy = gy - r0;
  double vx = 0, vy = 0;
  auto add = [&](int c, int r, double w) {
    double t = orientation.at(c, r);
    double k = w * std::max(coherence.at(c, r), 1e-3);
    vx += k * std::cos(2 * t);
    vy += k * std::sin(2 * t);
  };
  add(c0, r0, (1 - fx) * (1 - fy));
  add(c1, r0, fx * (1 - fy));
  add(c0, r1, (1 - fx) * fy);
  add(c1, r1, fx * fy);
  return wrap_pi(0.5 * std::atan2(vy, vx));
}

double RidgeAnalysis::mean_period() const {
  double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < frequency.size(); ++i) {
    double f = frequency.values()[i];
    if (mask.values()[i] != 0 && f > 0) {
      sum += 1.0 / f;
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

Grid<float> to_float(const FingerprintImage& img) {
  Grid<float> plane(img.width(), img.height());
  auto px = img.pixels();
  std::transform(px.begin(), px.end(), plane.values().begin(), [](std::uint8_t v) { return static_cast<float>(v); });
  return plane;
}

FingerprintImage from_float(const Grid<float>& plane, int ppi) {
  std::vector<std::uint8_t> pixels(plane.size());
  std::transform(plane.values().begin(), plane.values().end(), pixels.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  });
  return FingerprintImage(plane.cols(), plane.rows(), ppi, std::move(pixels));
}

void gaussian_blur(Grid<float>& plane, double sigma) {
  if (sigma <= 0 || plane.empty()) return;
  int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    total += kernel[i + radius];
  }
  for (auto& k : kernel) k = static_cast<float>(k / total);
  const int w = plane.cols();
  const int h = plane.rows();
  std::vector<float> line(w + 2 * radius);
  for (int y = 0; y < h; ++y) {
    float* row = &plane.at(0, y);
    std::fill(line.begin(), line.begin() + radius, row[0]);
    std::copy(row, row + w, line.begin() + radius);
    std::fill(line.begin() + radius + w, line.end(), row[w - 1]);
    for (int x = 0; x < w; ++x) {
      const float* src = line.data() + x;
      float acc = 0;
      for (int i = 0; i <= 2 * radius; ++i) acc += kernel[i] * src[i];
      row[x] = acc;
    }
  }
  Grid<float> tmp(w, h);
  for (int y = 0; y < h; ++y) {
    float* out = &tmp.at(0, y);
    for (int i = -radius; i <= radius; ++i) {
      const float* src = &plane.at(0, std::clamp(y + i, 0, h - 1));
      const float k = kernel[i + radius];
      for (int x = 0; x < w; ++x) out[x] += k * src[x];
    }
  }
  plane = std::move(tmp);
}

FingerprintImage downsample(const FingerprintImage& img, int target_ppi) {
  if (target_ppi <= 0) throw Error(ErrorCode::InvalidArgument, "target ppi must be positive");
  if (target_ppi > img.ppi()) {
    throw Error(ErrorCode::UpsampleRequested,
                "target " + std::to_string(target_ppi) + " ppi exceeds source " + std::to_string(img.ppi()));
  }
  if (target_ppi == img.ppi()) return img;

  const double scale = static_cast<double>(target_ppi) / img.ppi();
  const int out_w = std::max(1, static_cast<int>(std::lround(img.width() * scale)));
  const int out_h = std::max(1, static_cast<int>(std::lround(img.height() * scale)));
  auto wx = area_weights(img.width(), out_w);
  auto wy = area_weights(img.height(), out_h);

  std::vector<double> rows(static_cast<std::size_t>(img.height()) * out_w);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < out_w; ++x) {
      double acc = 0;
      for (auto [i, w] : wx[x]) acc += w * img.at(i, y);
      rows[static_cast<std::size_t>(y) * out_w + x] = acc;
    }
  }
  FingerprintImage out(out_w, out_h, target_ppi);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      double acc = 0;
      for (auto [j, w] : wy[y]) acc += w * rows[static_cast<std::size_t>(j) * out_w + x];
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
    }
  }
  out.set_meta(img.meta());
  return out;
}

BlockMask segment(const FingerprintImage& img, int block_size) {
  if (block_size < 4) throw Error(ErrorCode::InvalidArgument, "block size must be at least 4");
  const int cols = ceil_div(img.width(), block_size);
  const int rows = ceil_div(img.height(), block_size);
  Grid<double> variance(cols, rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double sum = 0, sum2 = 0;
      int n = 0;
      for (int y = r * block_size; y < std::min(img.height(), (r + 1) * block_size); ++y) {
        for (int x = c * block_size; x < std::min(img.width(), (c + 1) * block_size); ++x) {
          double v = img.at(x, y);
          sum += v;
          sum2 += v * v;
          ++n;
        }
      }
      if (n > 0) variance.at(c, r) = std::max(0.0, sum2 / n - (sum / n) * (sum / n));
    }
  }
  BlockMask mask{block_size, Grid<std::uint8_t>(cols, rows, 0)};
  if (variance.empty()) return mask;

  // Foreground variance estimate: mean of the top decile of block variances.
  std::vector<double> sorted = variance.values();
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  std::size_t top = std::max<std::size_t>(1, sorted.size() / 10);
  double estimate = std::accumulate(sorted.begin(), sorted.begin() + static_cast<long>(top), 0.0) / top;
  double threshold = std::max(kMinBlockVariance, kSegmentRatio * estimate);
  for (std::size_t i = 0; i < variance.size(); ++i) mask.cells.values()[i] = variance.values()[i] >= threshold ? 1 : 0;
  keep_largest_component(mask.cells);
  return mask;
}

OrientationField estimate_orientation(const FingerprintImage& img, int block_size) {
  if (img.empty()) throw Error(ErrorCode::InvalidArgument, "empty image");
  if (block_size < 4) throw Error(ErrorCode::InvalidArgument, "block size must be at least 4");
  const int cols = ceil_div(img.width(), block_size);
  const int rows = ceil_div(img.height(), block_size);
  auto grad = sobel(to_float(img));

  // Doubled-angle gradient moments per block.
  Grid<double> vx(cols, rows, 0.0), vy(cols, rows, 0.0), energy(cols, rows, 0.0);
  for (int y = 0; y < img.height(); ++y) {
    int r = y / block_size;
    for (int x = 0; x < img.width(); ++x) {
      int c = x / block_size;
      double gx = grad.gx.at(x, y);
      double gy = grad.gy.at(x, y);
      vx.at(c, r) += 2 * gx * gy;
      vy.at(c, r) += gx * gx - gy * gy;
      energy.at(c, r) += gx * gx + gy * gy;
    }
  }

  OrientationField field{block_size, Grid<double>(cols, rows, 0.0), Grid<double>(cols, rows, 0.0)};
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double sx = 0, sy = 0, se = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          if (!vx.contains(c + dc, r + dr)) continue;
          sx += vx.at(c + dc, r + dr);
          sy += vy.at(c + dc, r + dr);
          se += energy.at(c + dc, r + dr);
        }
      }
      double gradient_angle = 0.5 * std::atan2(sx, sy);
      field.orientation.at(c, r) = wrap_pi(gradient_angle + kPi / 2);
      field.coherence.at(c, r) = se > 1e-9 ? std::clamp(std::hypot(sx, sy) / se, 0.0, 1.0) : 0.0;
    }
  }
  return field;
}

Grid<double> estimate_frequency(const FingerprintImage& img, const OrientationField& field, const BlockMask& mask) {
  const int bs = field.block_size;
  const int cols = field.orientation.cols();
  const int rows = field.orientation.rows();
  if (mask.cells.cols() != cols || mask.cells.rows() != rows) {
    throw Error(ErrorCode::DimensionMismatch, "mask and orientation grids differ");
  }
  auto plane = to_float(img);
  Grid<double> raw(cols, rows, 0.0);
  const int length = 3 * bs;
  const int width = bs;
  std::vector<double> signature(length);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (mask.cells.at(c, r) == 0) continue;
      double theta = field.orientation.at(c, r);
      double dx = std::cos(theta), dy = std::sin(theta);
      double nx = -dy, ny = dx;
      double cx = std::min((c + 0.5) * bs, img.width() - 0.5);
      double cy = std::min((r + 0.5) * bs, img.height() - 0.5);
      for (int k = 0; k < length; ++k) {
        double t = k - (length - 1) / 2.0;
        double acc = 0;
        int n = 0;
        for (int j = 0; j < width; ++j) {
          double s = j - (width - 1) / 2.0;
          double x = cx + t * nx + s * dx;
          double y = cy + t * ny + s * dy;
          if (x < 0 || y < 0 || x > img.width() - 1 || y > img.height() - 1) continue;
          acc += sample_bilinear(plane, x, y);
          ++n;
        }
        signature[k] = n > 0 ? acc / n : std::numeric_limits<double>::quiet_NaN();
      }
      // Off-image samples: replace with the mean of the valid ones.
      double mean = 0;
      int valid = 0;
      for (double v : signature) {
        if (!std::isnan(v)) {
          mean += v;
          ++valid;
        }
      }
      if (valid < length / 2) continue;
      mean /= valid;
      for (double& v : signature) {
        if (std::isnan(v)) v = mean;
      }
      raw.at(c, r) = dominant_frequency(signature);
    }
  }

  // Fill undefined foreground blocks from defined neighbours, then smooth.
  Grid<double> filled = raw;
  for (int pass = 0; pass < cols + rows; ++pass) {
    bool changed = false;
    Grid<double> next = filled;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (mask.cells.at(c, r) == 0 || filled.at(c, r) > 0) continue;
        double sum = 0;
        int n = 0;
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            if (filled.contains(c + dc, r + dr) && filled.at(c + dc, r + dr) > 0) {
              sum += filled.at(c + dc, r + dr);
              ++n;
            }
          }
        }
        if (n > 0) {
          next.at(c, r) = sum / n;
          changed = true;
        }
      }
    }
    filled = std::move(next);
    if (!changed) break;
  }
  Grid<double> smooth(cols, rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (mask.cells.at(c, r) == 0 || filled.at(c, r) <= 0) continue;
      double sum = 0;
      int n = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          if (filled.contains(c + dc, r + dr) && mask.cells.at(c + dc, r + dr) != 0 && filled.at(c + dc, r + dr) > 0) {
            sum += filled.at(c + dc, r + dr);
            ++n;
          }
        }
      }
      smooth.at(c, r) = sum / n;
    }
  }
  return smooth;
}

RidgeAnalysis analyze(const FingerprintImage& img, std::optional<int> block_size) {
  int bs = block_size.value_or(default_block_size(img.ppi()));
  auto mask = segment(img, bs);
  auto field = estimate_orientation(img, bs);
  auto frequency = estimate_frequency(img, field, mask);
  return RidgeAnalysis{bs, std::move(mask.cells), std::move(field.orientation), std::move(frequency),
                       std::move(field.coherence)};
}

namespace {

// Bilinear interpolation of the defined frequencies around a pixel.
double frequency_at(const RidgeAnalysis& analysis, double x, double y) {
  const auto& freq = analysis.frequency;
  double gx = std::clamp(x / analysis.block_size - 0.5, 0.0, freq.cols() - 1.0);
  double gy = std::clamp(y / analysis.block_size - 0.5, 0.0, freq.rows() - 1.0);
  int c0 = static_cast<int>(gx);
  int r0 = static_cast<int>(gy);
  int c1 = std::min(c0 + 1, freq.cols() - 1);
  int r1 = std::min(r0 + 1, freq.rows() - 1);
  double fx = gx - c0;
  double fy = gy - r0;
  double sum = 0, weight = 0;
  auto add = [&](int c, int r, double w) {
    if (freq.at(c, r) > 0) {
      sum += w * freq.at(c, r);
      weight += w;
    }
  };
  add(c0, r0, (1 - fx) * (1 - fy));
  add(c1, r0, fx * (1 - fy));
  add(c0, r1, (1 - fx) * fy);
  add(c1, r1, fx * fy);
  if (weight > 1e-9) return sum / weight;
  int c = std::clamp(static_cast<int>(x / analysis.block_size), 0, freq.cols() - 1);
  int r = std::clamp(static_cast<int>(y / analysis.block_size), 0, freq.rows() - 1);
  return freq.at(c, r);
}

}  // namespace

FingerprintImage enhance(const FingerprintImage& img, const RidgeAnalysis& analysis) {
  const int bs = analysis.block_size;
  const int cols = ceil_div(img.width(), std::max(bs, 1));
  const int rows = ceil_div(img.height(), std::max(bs, 1));
  if (bs < 4 || analysis.mask.cols() != cols || analysis.mask.rows() != rows ||
      analysis.orientation.cols() != cols || analysis.frequency.cols() != cols ||
      analysis.coherence.cols() != cols || analysis.orientation.rows() != rows) {
    throw Error(ErrorCode::MissingAnalysis, "ridge analysis does not match the image");
  }
  const int w = img.width();
  const int h = img.height();
  const auto mask = analysis.block_mask();
  Grid<float> response(w, h, 0.0f);
  Grid<std::uint8_t> computed(w, h, 0);

  auto plane = to_float(img);
  double mean = 0;
  for (float v : plane.values()) mean += v;
  mean /= std::max<std::size_t>(1, plane.size());
  for (float& v : plane.values()) v = static_cast<float>(v - mean);

  const int tile = std::max(8, bs / 2);
  std::vector<float> re_rows, im_rows, dc_rows;
  std::vector<float> gauss, cos_x, sin_x, cos_y, sin_y;
  for (int ty = 0; ty < h; ty += tile) {
    for (int tx = 0; tx < w; tx += tile) {
      const int x1 = std::min(w, tx + tile);
      const int y1 = std::min(h, ty + tile);
      bool any = false;
      for (int y = ty; y < y1 && !any; y += std::max(1, std::min(tile, bs) / 2)) {
        for (int x = tx; x < x1 && !any; x += std::max(1, std::min(tile, bs) / 2)) any = mask.foreground_at_pixel(x, y);
      }
      any = any || mask.foreground_at_pixel(x1 - 1, y1 - 1) || mask.foreground_at_pixel(tx, y1 - 1) ||
            mask.foreground_at_pixel(x1 - 1, ty);
      if (!any) continue;

      double cx = (tx + x1) / 2.0;
      double cy = (ty + y1) / 2.0;
      double freq = frequency_at(analysis, cx, cy);
      if (freq <= 0) continue;
      double theta = analysis.orientation_at(cx, cy);
      double period = 1.0 / freq;
      double sigma = 0.5 * period;
      int radius = static_cast<int>(std::ceil(2.5 * sigma));
      int taps = 2 * radius + 1;
      // Wave vector points across the ridges.
      double u = 2 * kPi * freq * -std::sin(theta);
      double v = 2 * kPi * freq * std::cos(theta);

      gauss.resize(taps);
      cos_x.resize(taps);
      sin_x.resize(taps);
      cos_y.resize(taps);
      sin_y.resize(taps);
      std::complex<double> sx_sum = 0, sy_sum = 0;
      double g_sum = 0;
      for (int i = -radius; i <= radius; ++i) {
        double g = std::exp(-0.5 * i * i / (sigma * sigma));
        gauss[i + radius] = static_cast<float>(g);
        cos_x[i + radius] = static_cast<float>(g * std::cos(u * i));
        sin_x[i + radius] = static_cast<float>(g * std::sin(u * i));
        cos_y[i + radius] = static_cast<float>(std::cos(v * i));
        sin_y[i + radius] = static_cast<float>(std::sin(v * i));
        sx_sum += g * std::polar(1.0, u * i);
        sy_sum += g * std::polar(1.0, v * i);
        g_sum += g;
      }
      // The even kernel's DC gain, removed so flat regions give zero response.
      const double dc_gain = (sx_sum * sy_sum).real() / (g_sum * g_sum);
      const double norm = 1.0 / (g_sum * g_sum);

      const int tw = x1 - tx;
      const int ry0 = ty - radius;
      const int rh = (y1 + radius) - ry0;
      re_rows.assign(static_cast<std::size_t>(rh) * tw, 0.0f);
      im_rows.assign(static_cast<std::size_t>(rh) * tw, 0.0f);
      dc_rows.assign(static_cast<std::size_t>(rh) * tw, 0.0f);
      std::vector<float> line(tw + 2 * radius);
      for (int j = 0; j < rh; ++j) {
        int sy = std::clamp(ry0 + j, 0, h - 1);
        for (int i = 0; i < tw + 2 * radius; ++i) line[i] = plane.at(std::clamp(tx - radius + i, 0, w - 1), sy);
        for (int i = 0; i < tw; ++i) {
          float re = 0, im = 0, dc = 0;
          const float* src = line.data() + i;
          for (int k = 0; k < taps; ++k) {
            re += src[k] * cos_x[k];
            im += src[k] * sin_x[k];
            dc += src[k] * gauss[k];
          }
          re_rows[static_cast<std::size_t>(j) * tw + i] = re;
          im_rows[static_cast<std::size_t>(j) * tw + i] = im;
          dc_rows[static_cast<std::size_t>(j) * tw + i] = dc;
        }
      }
      // Column pass: real part of the complex separable response.
      for (int y = ty; y < y1; ++y) {
        for (int x = tx; x < x1; ++x) {
          if (!mask.foreground_at_pixel(x, y)) continue;
          double even = 0, dc = 0;
          for (int k = 0; k < taps; ++k) {
            std::size_t idx = static_cast<std::size_t>(y - ty + k) * tw + (x - tx);
            double g = gauss[k];
            even += g * (re_rows[idx] * cos_y[k] - im_rows[idx] * sin_y[k]);
            dc += g * dc_rows[idx];
          }
          response.at(x, y) = static_cast<float>((even - dc_gain * dc) * norm);
          computed.at(x, y) = 1;
        }
      }
    }
  }

  double sum2 = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (computed.values()[i]) {
      sum2 += static_cast<double>(response.values()[i]) * response.values()[i];
      ++n;
    }
  }
  double rms = n > 0 ? std::sqrt(sum2 / n) : 0.0;
  FingerprintImage out(w, h, img.ppi(), 128);
  if (rms > 1e-9) {
    double gain = 127.0 / (2.0 * rms);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!computed.at(x, y)) continue;
        out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(128 + gain * response.at(x, y)), 0L, 255L));
      }
    }
  }
  out.set_meta(img.meta());
  return out;
}

int crossing_number(const Skeleton& skel, int x, int y) {
  int transitions = 0;
  for (int k = 0; k < 8; ++k) {
    int a = skel.at(x + kNeighborDx[k], y + kNeighborDy[k]) ? 1 : 0;
    int b = skel.at(x + kNeighborDx[(k + 1) % 8], y + kNeighborDy[(k + 1) % 8]) ? 1 : 0;
    transitions += std::abs(a - b);
  }
  return transitions / 2;
}

namespace {

// Zhang-Suen neighbourhood labels: P2 = N, then clockwise.
std::array<int, 8> zs_neighbors(const Grid<std::uint8_t>& g, int x, int y) {
  auto v = [&](int dx, int dy) { return g.contains(x + dx, y + dy) && g.at(x + dx, y + dy) ? 1 : 0; };
  return {v(0, -1), v(1, -1), v(1, 0), v(1, 1), v(0, 1), v(-1, 1), v(-1, 0), v(-1, -1)};
}

// Removes pixels whose set neighbours form one 8-connected group (redundant
// staircase pixels) while keeping line ends.
bool remove_redundant(Grid<std::uint8_t>& g) {
  bool changed = false;
  for (int y = 0; y < g.rows(); ++y) {
    for (int x = 0; x < g.cols(); ++x) {
      if (!g.at(x, y)) continue;
      std::array<int, 8> idx{};
      int n = 0;
      for (int k = 0; k < 8; ++k) {
        int nx = x + kNeighborDx[k], ny = y + kNeighborDy[k];
        if (g.contains(nx, ny) && g.at(nx, ny)) idx[n++] = k;
      }
      if (n < 2 || n > 6) continue;
      std::array<int, 8> parent{};
      std::iota(parent.begin(), parent.end(), 0);
      auto find = [&](int i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
      };
      for (int a = 0; a < n; ++a) {
        for (int b = a + 1; b < n; ++b) {
          int ddx = kNeighborDx[idx[a]] - kNeighborDx[idx[b]];
          int ddy = kNeighborDy[idx[a]] - kNeighborDy[idx[b]];
          if (std::abs(ddx) <= 1 && std::abs(ddy) <= 1) parent[find(a)] = find(b);
        }
      }
      int groups = 0;
      for (int a = 0; a < n; ++a) groups += find(a) == a ? 1 : 0;
      if (groups != 1) continue;
      // An orthogonal/diagonal neighbour pair is a line end; only an
      // orthogonal pair is a staircase corner.
      if (n == 2) {
        bool a_orth = idx[0] % 2 == 0;
        bool b_orth = idx[1] % 2 == 0;
        if (!(a_orth && b_orth)) continue;
      }
      g.at(x, y) = 0;
      changed = true;
    }
  }
  return changed;
}

}  // namespace

void thin(Grid<std::uint8_t>& ridge) {
  std::vector<std::pair<int, int>> remove;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      remove.clear();
      for (int y = 0; y < ridge.rows(); ++y) {
        for (int x = 0; x < ridge.cols(); ++x) {
          if (!ridge.at(x, y)) continue;
          auto p = zs_neighbors(ridge, x, y);
          int b = std::accumulate(p.begin(), p.end(), 0);
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int k = 0; k < 8; ++k) a += (p[k] == 0 && p[(k + 1) % 8] == 1) ? 1 : 0;
          if (a != 1) continue;
          // p[0]=P2 (N), p[2]=P4 (E), p[4]=P6 (S), p[6]=P8 (W)
          if (pass == 0) {
            if (p[0] * p[2] * p[4] != 0 || p[2] * p[4] * p[6] != 0) continue;
          } else {
            if (p[0] * p[2] * p[6] != 0 || p[0] * p[4] * p[6] != 0) continue;
          }
          remove.emplace_back(x, y);
        }
      }
      for (auto [x, y] : remove) ridge.at(x, y) = 0;
      changed = changed || !remove.empty();
    }
  }
  while (remove_redundant(ridge)) {
  }
}

Skeleton binarize_and_thin(const FingerprintImage& enhanced, const BlockMask& mask) {
  const int w = enhanced.width();
  const int h = enhanced.height();
  Skeleton skel{w, h, Grid<std::uint8_t>(w, h, 0), enhanced.ppi()};
  if (w == 0 || h == 0) return skel;

  // Integral image for the local mean over a block-sized window.
  std::vector<double> integral(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  auto I = [&](int x, int y) -> double& { return integral[static_cast<std::size_t>(y) * (w + 1) + x]; };
  for (int y = 0; y < h; ++y) {
    double row = 0;
    for (int x = 0; x < w; ++x) {
      row += enhanced.at(x, y);
      I(x + 1, y + 1) = I(x + 1, y) + row;
    }
  }
  const int half = std::max(2, mask.block_size / 2);
  bool any = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.foreground_at_pixel(x, y)) continue;
      int x0 = std::max(0, x - half), x1 = std::min(w, x + half + 1);
      int y0 = std::max(0, y - half), y1 = std::min(h, y + half + 1);
      double local = (I(x1, y1) - I(x0, y1) - I(x1, y0) + I(x0, y0)) / ((x1 - x0) * (y1 - y0));
      if (enhanced.at(x, y) < local) {
        skel.pixels.at(x, y) = 1;
        any = true;
      }
    }
  }
  if (any) thin(skel.pixels);
  return skel;
}

Preprocessed preprocess(const FingerprintImage& img, std::optional<int> block_size) {
  Preprocessed out;
  out.analysis = analyze(img, block_size);
  out.enhanced = enhance(img, out.analysis);
  out.skeleton = binarize_and_thin(out.enhanced, out.analysis.block_mask());
  return out;
}

FingerprintImage rotate(const FingerprintImage& img, double angle, std::uint8_t fill) {
  FingerprintImage out(img.width(), img.height(), img.ppi(), fill);
  auto plane = to_float(img);
  const double cx = (img.width() - 1) / 2.0;
  const double cy = (img.height() - 1) / 2.0;
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      double dx = x - cx, dy = y - cy;
      double sx = cx + c * dx + s * dy;
      double sy = cy - s * dx + c * dy;
      if (sx < 0 || sy < 0 || sx > img.width() - 1 || sy > img.height() - 1) continue;
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(sample_bilinear(plane, sx, sy)), 0L, 255L));
    }
  }
  out.set_meta(img.meta());
  return out;
}

}  // namespace ipx::imgproc
