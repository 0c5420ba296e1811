#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "ipx/error.hpp"
#include "ipx/imgproc.hpp"
#include "test_support.hpp"

using namespace ipx;
using namespace ipx::imgproc;
using namespace ipx::test;

namespace {

FingerprintImage random_image(std::mt19937& rng, int max_dim) {
  std::uniform_int_distribution<int> dim(1, max_dim);
  std::uniform_int_distribution<int> byte(0, 255);
  FingerprintImage img(dim(rng), dim(rng), 500 + byte(rng));
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(byte(rng));
  return img;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

// Variance of one block computed straight from the pixels.
double block_variance(const FingerprintImage& img, int bs, int c, int r) {
  double s = 0, s2 = 0;
  int n = 0;
  for (int y = r * bs; y < std::min(img.height(), (r + 1) * bs); ++y) {
    for (int x = c * bs; x < std::min(img.width(), (c + 1) * bs); ++x) {
      s += img.at(x, y);
      s2 += img.at(x, y) * img.at(x, y);
      ++n;
    }
  }
  return s2 / n - (s / n) * (s / n);
}

int count_endpoints(const Skeleton& skel) {
  int n = 0;
  for (int y = 0; y < skel.height; ++y) {
    for (int x = 0; x < skel.width; ++x) {
      if (!skel.at(x, y)) continue;
      int neighbors = 0;
      for (int k = 0; k < 8; ++k) neighbors += skel.at(x + kNeighborDx[k], y + kNeighborDy[k]) ? 1 : 0;
      n += neighbors == 1 ? 1 : 0;
    }
  }
  return n;
}

int count_components(const Skeleton& skel) {
  Grid<std::uint8_t> seen(skel.width, skel.height, 0);
  int components = 0;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < skel.height; ++y) {
    for (int x = 0; x < skel.width; ++x) {
      if (!skel.at(x, y) || seen.at(x, y)) continue;
      ++components;
      stack.assign(1, {x, y});
      seen.at(x, y) = 1;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        for (int k = 0; k < 8; ++k) {
          int nx = cx + kNeighborDx[k], ny = cy + kNeighborDy[k];
          if (skel.at(nx, ny) && !seen.at(nx, ny)) {
            seen.at(nx, ny) = 1;
            stack.emplace_back(nx, ny);
          }
        }
      }
    }
  }
  return components;
}

bool one_pixel_wide(const Skeleton& skel) {
  for (int y = 1; y + 1 < skel.height; ++y) {
    for (int x = 1; x + 1 < skel.width; ++x) {
      if (!skel.at(x, y)) continue;
      int neighbors = 0;
      for (int k = 0; k < 8; ++k) neighbors += skel.at(x + kNeighborDx[k], y + kNeighborDy[k]) ? 1 : 0;
      if (neighbors == 8) return false;
    }
  }
  return true;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("load_image decodes an all-zero graymap with a declared resolution") {
  std::string pgm = "P5\n8 8\n255\n" + std::string(64, '\0');
  auto img = load_image(bytes_of(pgm), 1900);
  CHECK(img.width() == 8);
  CHECK(img.height() == 8);
  CHECK(img.ppi() == 1900);
  CHECK(std::all_of(img.pixels().begin(), img.pixels().end(), [](auto v) { return v == 0; }));
}

TEST_CASE("load_image resolution handling") {
  std::string pgm = "P5\n# ppi=1270\n2 1\n255\n\x01\x02";
  CHECK(load_image(bytes_of(pgm)).ppi() == 1270);
  CHECK(load_image(bytes_of(pgm), 1900).ppi() == 1900);

  std::string bare = "P5\n2 1\n255\n\x01\x02";
  CHECK_THROWS_AS(load_image(bytes_of(bare)), Error);
  try {
    load_image(bytes_of(bare));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingResolution);
  }
}

TEST_CASE("load_image rejects unsupported and corrupt input") {
  auto code_of = [](const std::string& data) {
    try {
      load_image(bytes_of(data), 500);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::InvalidArgument;
  };
  CHECK(code_of("P2\n2 1\n255\n1 2\n") == ErrorCode::UnsupportedFormat);
  CHECK(code_of("GIF89a") == ErrorCode::UnsupportedFormat);
  CHECK(code_of("P5\n2 2\n65535\n") == ErrorCode::UnsupportedFormat);
  CHECK(code_of("P5\n4 4\n255\n\x01\x02") == ErrorCode::CorruptData);
  CHECK(code_of("P5\nxx 4\n255\n") == ErrorCode::CorruptData);

  FingerprintImage img(16, 16, 1900, 7);
  auto png = write_image(img, ImageFormat::Png);
  png.resize(png.size() / 2);
  CHECK(code_of(std::string(png.begin(), png.end())) == ErrorCode::CorruptData);
}

TEST_CASE("write_image/load_image round trip is bit exact for random images") {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 100; ++trial) {
    auto img = random_image(rng, 40);
    for (auto format : {ImageFormat::Pgm, ImageFormat::Png}) {
      auto decoded = load_image(write_image(img, format));
      REQUIRE(decoded.width() == img.width());
      REQUIRE(decoded.height() == img.height());
      CHECK(decoded.ppi() == img.ppi());
      CHECK(std::equal(decoded.pixels().begin(), decoded.pixels().end(), img.pixels().begin()));
    }
  }
}

TEST_CASE("downsample scale arithmetic and identities") {
  FingerprintImage big(1024, 1024, 1900, 77);
  auto small = downsample(big, 500);
  CHECK(small.width() == 269);
  CHECK(small.height() == 269);
  CHECK(small.ppi() == 500);
  CHECK(std::all_of(small.pixels().begin(), small.pixels().end(), [](auto v) { return v == 77; }));

  std::mt19937 rng(5);
  auto img = random_image(rng, 64);
  CHECK(downsample(img, img.ppi()) == img);

  CHECK_THROWS_AS(downsample(small, 1000), Error);
}

TEST_CASE("downsample preserves metadata and the mean of the image") {
  auto img = grating(380, 190, 1900, 17, 0.3);
  CaptureMeta meta{"s1", Finger::RightThumb, 2, 1, 40, 0};
  img.set_meta(meta);
  auto small = downsample(img, 500);
  REQUIRE(small.meta().has_value());
  CHECK(*small.meta() == meta);
  double a = 0, b = 0;
  for (auto v : img.pixels()) a += v;
  for (auto v : small.pixels()) b += v;
  CHECK(a / img.pixels().size() == doctest::Approx(b / small.pixels().size()).epsilon(0.01));
}

TEST_CASE("downsample composition matches direct dimensions within one pixel") {
  std::mt19937 rng(99);
  std::uniform_int_distribution<int> dim(50, 1500);
  for (int trial = 0; trial < 50; ++trial) {
    FingerprintImage img(dim(rng), dim(rng), 1900, 1);
    auto two_step = downsample(downsample(img, 1000), 500);
    auto direct = downsample(img, 500);
    CHECK(std::abs(two_step.width() - direct.width()) <= 1);
    CHECK(std::abs(two_step.height() - direct.height()) <= 1);
  }
}

TEST_CASE("segment on uniform and grating inputs") {
  FingerprintImage flat(200, 200, 500, 180);
  auto mask = segment(flat, 16);
  CHECK(mask.coverage() == 0.0);
  CHECK(mask.cells.cols() == 13);
  CHECK(mask.cells.rows() == 13);

  auto full = grating(256, 256, 500, 9.5, 0.7);
  auto fm = segment(full, 16);
  for (int r = 0; r < fm.cells.rows(); ++r) {
    for (int c = 0; c < fm.cells.cols(); ++c) {
      // Oracle: every block of a full-frame grating carries comparable variance.
      REQUIRE(block_variance(full, 16, c, r) > 1000);
      CHECK(fm.cells.at(c, r) == 1);
    }
  }

  auto half = grating(256, 256, 500, 9.5, 0.2);
  for (int y = 0; y < 256; ++y) {
    for (int x = 128; x < 256; ++x) half.at(x, y) = 200;
  }
  auto hm = segment(half, 16);
  for (int r = 0; r < hm.cells.rows(); ++r) {
    for (int c = 0; c < hm.cells.cols(); ++c) {
      bool left = c < 8;
      CHECK(hm.cells.at(c, r) == (block_variance(half, 16, c, r) > 100 ? 1 : 0));
      CHECK(hm.cells.at(c, r) == (left ? 1 : 0));
    }
  }
  CHECK_THROWS_AS(segment(half, 3), Error);
}

TEST_CASE("orientation of vertical and rotated gratings") {
  auto vertical = grating(320, 320, 500, 9.5, kPi / 2);
  auto field = estimate_orientation(vertical, 16);
  CHECK(field.orientation.cols() == 20);
  for (int r = 1; r < field.orientation.rows() - 1; ++r) {
    for (int c = 1; c < field.orientation.cols() - 1; ++c) {
      CHECK(deg(orientation_error(field.orientation.at(c, r), kPi / 2)) < 2.0);
      CHECK(field.coherence.at(c, r) > 0.9);
    }
  }
  for (double phi_deg : {10.0, 25.0, 45.0, 60.0, 95.0, 150.0}) {
    double phi = rad(phi_deg);
    auto img = grating(320, 320, 500, 9.5, kPi / 2 + phi);
    auto f = estimate_orientation(img, 16);
    for (int r = 1; r < f.orientation.rows() - 1; ++r) {
      for (int c = 1; c < f.orientation.cols() - 1; ++c) {
        CHECK(deg(orientation_error(f.orientation.at(c, r), std::fmod(kPi / 2 + phi, kPi))) < 5.0);
      }
    }
  }
}

TEST_CASE("orientation of a constant image has zero coherence") {
  FingerprintImage flat(100, 60, 500, 90);
  auto f = estimate_orientation(flat, 16);
  for (double c : f.coherence.values()) CHECK(c == doctest::Approx(0.0).epsilon(1e-12));
  for (double o : f.orientation.values()) {
    CHECK(o >= 0.0);
    CHECK(o < kPi);
  }
}

TEST_CASE("orientation is equivariant under image rotation") {
  std::mt19937 rng(42);
  std::uniform_real_distribution<double> angle(-kPi / 3, kPi / 3);
  for (int trial = 0; trial < 6; ++trial) {
    auto img = rings(400, 400, 500, 9.0, -250.0 + 60 * trial, -180.0);
    auto base = analyze(img, 16);
    double phi = angle(rng);
    auto turned = rotate(img, phi);
    auto field = estimate_orientation(turned, 16);
    const double c0 = (img.width() - 1) / 2.0;
    std::vector<double> errors;
    for (int r = 0; r < field.orientation.rows(); ++r) {
      for (int c = 0; c < field.orientation.cols(); ++c) {
        double x = (c + 0.5) * 16, y = (r + 0.5) * 16;
        // Pre-image of this block centre in the unrotated image.
        double dx = x - c0, dy = y - c0;
        double sx = c0 + std::cos(phi) * dx + std::sin(phi) * dy;
        double sy = c0 - std::sin(phi) * dx + std::cos(phi) * dy;
        if (sx < 40 || sy < 40 || sx > 360 || sy > 360 || field.coherence.at(c, r) < 0.8) continue;
        errors.push_back(deg(orientation_error(field.orientation.at(c, r), base.orientation_at(sx, sy) + phi)));
      }
    }
    REQUIRE(errors.size() > 50);
    CHECK(median(errors) < 5.0);
  }
}

TEST_CASE("frequency of infant and adult spacings") {
  SUBCASE("infant spacing at 1900 ppi") {
    auto img = grating(610, 610, 1900, 17.0, 0.4);
    int bs = default_block_size(1900);
    CHECK(bs == 61);
    auto analysis = analyze(img, bs);
    for (int r = 1; r < analysis.frequency.rows() - 1; ++r) {
      for (int c = 1; c < analysis.frequency.cols() - 1; ++c) {
        CHECK(std::abs(analysis.frequency.at(c, r) - 1.0 / 17.0) / (1.0 / 17.0) < 0.05);
      }
    }
  }
  SUBCASE("adult spacing at 500 ppi") {
    auto img = grating(256, 256, 500, 9.5, 2.1);
    auto analysis = analyze(img, 16);
    for (int r = 1; r < analysis.frequency.rows() - 1; ++r) {
      for (int c = 1; c < analysis.frequency.cols() - 1; ++c) {
        CHECK(std::abs(analysis.frequency.at(c, r) - 1.0 / 9.5) * 9.5 < 0.05);
      }
    }
  }
  SUBCASE("background blocks are undefined") {
    auto img = grating(256, 256, 500, 9.5, 0.0);
    for (int y = 0; y < 256; ++y) {
      for (int x = 160; x < 256; ++x) img.at(x, y) = 230;
    }
    auto analysis = analyze(img, 16);
    for (int r = 0; r < analysis.frequency.rows(); ++r) {
      for (int c = 0; c < analysis.frequency.cols(); ++c) {
        double f = analysis.frequency.at(c, r);
        if (analysis.mask.at(c, r) == 0) CHECK(f == 0.0);
        CHECK(f < 0.5);
        CHECK((f == 0.0 || (f > 1.0 / 40 && f < 1.0 / 3)));
      }
    }
    CHECK(analysis.frequency.at(15, 8) == 0.0);
  }
}

TEST_CASE("enhance keeps clean gratings and suppresses impulse noise") {
  auto clean = grating(320, 320, 500, 9.5, 1.0);
  auto analysis = analyze(clean, 16);
  auto out = enhance(clean, analysis);
  auto mask = analysis.block_mask();
  CHECK(correlation(out, clean, mask) >= 0.9);

  auto noisy = clean;
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& p : noisy.pixels()) {
    double r = u(rng);
    if (r < 0.1) p = 0;
    else if (r < 0.2) p = 255;
  }
  auto noisy_analysis = analyze(noisy, 16);
  auto restored = enhance(noisy, noisy_analysis);
  CHECK(correlation(restored, clean, mask) > correlation(noisy, clean, mask));
}

TEST_CASE("enhance of an all-background image is mid-gray") {
  FingerprintImage flat(96, 96, 500, 210);
  auto analysis = analyze(flat, 16);
  auto out = enhance(flat, analysis);
  CHECK(std::all_of(out.pixels().begin(), out.pixels().end(), [](auto v) { return v == 128; }));
  RidgeAnalysis empty;
  CHECK_THROWS_AS(enhance(flat, empty), Error);
}

TEST_CASE("thinning a thick bar leaves a one-pixel line on its axis") {
  FingerprintImage img(120, 60, 500, 255);
  for (int y = 26; y <= 34; ++y) {
    for (int x = 20; x < 100; ++x) img.at(x, y) = 0;
  }
  auto skel = binarize_and_thin(img, full_mask(120, 60, 16));
  CHECK(count_components(skel) == 1);
  CHECK(count_endpoints(skel) == 2);
  CHECK(one_pixel_wide(skel));
  int on_axis = 0, total = 0;
  for (int y = 0; y < 60; ++y) {
    for (int x = 0; x < 120; ++x) {
      if (!skel.at(x, y)) continue;
      ++total;
      on_axis += std::abs(y - 30) <= 1 ? 1 : 0;
      CHECK(x >= 20);
      CHECK(x < 100);
    }
  }
  CHECK(on_axis >= total - 8);
  // Each interior column holds exactly one skeleton pixel.
  for (int x = 30; x < 90; ++x) {
    int n = 0;
    for (int y = 0; y < 60; ++y) n += skel.at(x, y) ? 1 : 0;
    CHECK(n == 1);
  }
}

TEST_CASE("thinning a ring gives a closed loop without endpoints") {
  FingerprintImage img(100, 100, 500, 255);
  for (int y = 0; y < 100; ++y) {
    for (int x = 0; x < 100; ++x) {
      double r = std::hypot(x - 50, y - 50);
      if (r >= 22 && r <= 30) img.at(x, y) = 0;
    }
  }
  auto skel = binarize_and_thin(img, full_mask(100, 100, 16));
  CHECK(count_components(skel) == 1);
  CHECK(count_endpoints(skel) == 0);
  CHECK(one_pixel_wide(skel));
  int total = 0;
  for (auto v : skel.pixels.values()) total += v;
  CHECK(total > 100);
}

TEST_CASE("empty mask yields an empty skeleton") {
  auto img = grating(64, 64, 500, 9.5, 0.0);
  BlockMask empty{16, Grid<std::uint8_t>(4, 4, 0)};
  auto skel = binarize_and_thin(img, empty);
  CHECK(std::all_of(skel.pixels.values().begin(), skel.pixels.values().end(), [](auto v) { return v == 0; }));
}

TEST_CASE("skeletons are one pixel wide on random inputs") {
  std::mt19937 rng(2024);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    FingerprintImage img(90, 90, 500);
    for (auto& p : img.pixels()) p = u(rng) < 0.5 ? 0 : 255;
    auto plane = to_float(img);
    gaussian_blur(plane, 1.0 + trial * 0.2);
    auto blurred = from_float(plane, 500);
    auto skel = binarize_and_thin(blurred, full_mask(90, 90, 16));
    CHECK(one_pixel_wide(skel));
  }
}

TEST_CASE("analysis invariants on a curved pattern") {
  auto img = rings(300, 300, 500, 8.5, -50, 150);
  auto a = analyze(img);
  CHECK(a.block_size == 16);
  CHECK(a.mask.cols() == 19);
  CHECK(a.mask.rows() == 19);
  for (std::size_t i = 0; i < a.orientation.size(); ++i) {
    CHECK(a.orientation.values()[i] >= 0.0);
    CHECK(a.orientation.values()[i] < kPi);
    CHECK(a.coherence.values()[i] >= 0.0);
    CHECK(a.coherence.values()[i] <= 1.0);
    double f = a.frequency.values()[i];
    if (f > 0) CHECK(a.mask.values()[i] == 1);
  }
}
