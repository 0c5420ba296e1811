#include "ipx/texture.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "ipx/error.hpp"

namespace ipx::texture {

namespace {

constexpr int kTile = 16;
constexpr int kTilesPerSide = kFrameSize / kTile;
constexpr int kCellsPerSide = kFrameSize / kCellSize;
constexpr int kBins = 8;
constexpr int kCellFeatures = kBins + 2;
constexpr int kRawDimension = kCellsPerSide * kCellsPerSide * kCellFeatures;
constexpr double kFrequencyWeight = 2.0;
constexpr double kEnergyWeight = 0.5;
constexpr std::uint8_t kEmbMagic[4] = {'I', 'P', 'X', 'E'};

double standard_normal(std::mt19937_64& rng) {
  // Box-Muller on 53-bit uniforms keeps the stream identical across standard libraries.
  auto uniform = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  double u1 = uniform(), u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// kRawDimension x kDimension matrix with orthonormal columns.
const Eigen::MatrixXd& projection() {
  static Eigen::MatrixXd p;
  static std::once_flag once;
  std::call_once(once, [] {
    std::mt19937_64 rng(kProjectionSeed);
    Eigen::MatrixXd g(kRawDimension, kDimension);
    for (int c = 0; c < kDimension; ++c) {
      for (int r = 0; r < kRawDimension; ++r) g(r, c) = standard_normal(rng);
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    p = qr.householderQ() * Eigen::MatrixXd::Identity(kRawDimension, kDimension);
  });
  return p;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  auto mid = v.begin() + v.size() / 2;
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

// Centroid of band-passed ridge energy, computed on a 2x box-averaged copy.
std::pair<double, double> ridge_centroid(const FingerprintImage& img, const imgproc::RidgeAnalysis& analysis) {
  double period = analysis.mean_period();
  if (period <= 0) period = 4.5 * img.ppi() / 500.0;
  period /= 2;
  const int w = img.width() / 2, h = img.height() / 2;
  Grid<float> fine(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      fine.at(x, y) = 0.25f * (img.at(2 * x, 2 * y) + img.at(2 * x + 1, 2 * y) + img.at(2 * x, 2 * y + 1) +
                               img.at(2 * x + 1, 2 * y + 1));
    }
  }
  auto coarse = fine;
  imgproc::gaussian_blur(fine, period / 4.0);
  imgproc::gaussian_blur(coarse, period);
  auto& e = fine.values();
  for (std::size_t i = 0; i < e.size(); ++i) {
    float b = e[i] - coarse.values()[i];
    e[i] = b * b;
  }
  imgproc::gaussian_blur(fine, period);
  double sw = 0, sx = 0, sy = 0;
  if (!e.empty()) {
    std::vector<float> sorted = e;
    auto q = sorted.begin() + static_cast<std::ptrdiff_t>(0.99 * (sorted.size() - 1));
    std::nth_element(sorted.begin(), q, sorted.end());
    const double threshold = 0.25 * *q;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double wt = fine.at(x, y) - threshold;
        if (wt <= 0) continue;
        sw += wt;
        sx += wt * (2 * x + 0.5);
        sy += wt * (2 * y + 0.5);
      }
    }
  }
  if (sw > 0) return {sx / sw, sy / sw};
  // Flat image: fall back to the block mask.
  const auto mask = analysis.block_mask();
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (!mask.foreground_at_pixel(x, y)) continue;
      sw += 1;
      sx += x;
      sy += y;
    }
  }
  return sw > 0 ? std::pair{sx / sw, sy / sw} : std::pair{img.width() / 2.0, img.height() / 2.0};
}

struct TileStats {
  double gxx = 0, gyy = 0, gxy = 0;
  int count = 0;
};

}  // namespace

std::vector<double> raw_descriptor(const FingerprintImage& img, const imgproc::RidgeAnalysis& analysis,
                                   const TextureOptions& options, const FingerprintImage* enhanced) {
  if (img.ppi() != kTexturePpi) {
    throw Error(ErrorCode::WrongResolution,
                "texture descriptor expects " + std::to_string(kTexturePpi) + " ppi, got " + std::to_string(img.ppi()));
  }
  const auto mask = analysis.block_mask();
  if (mask.cells.empty() || mask.coverage() < 0.05) throw Error(ErrorCode::EmptyForeground, "foreground covers under 5%");

  FingerprintImage computed;
  const FingerprintImage* source = &img;
  if (!options.raw) {
    if (enhanced == nullptr) {
      computed = imgproc::enhance(img, analysis);
      enhanced = &computed;
    }
    source = enhanced;
  }
  const auto [cx, cy] = ridge_centroid(img, analysis);
  const int ox = static_cast<int>(std::lround(cx)) - kFrameSize / 2;
  const int oy = static_cast<int>(std::lround(cy)) - kFrameSize / 2;

  const int w = img.width(), h = img.height();
  std::vector<TileStats> tiles(kTilesPerSide * kTilesPerSide);
  for (int y = 1; y + 1 < h; ++y) {
    const int fy = y - oy;
    if (fy < 0 || fy >= kFrameSize) continue;
    for (int x = 1; x + 1 < w; ++x) {
      const int fx = x - ox;
      if (fx < 0 || fx >= kFrameSize || !mask.foreground_at_pixel(x, y)) continue;
      double gx = 0.5 * (source->at(x + 1, y) - source->at(x - 1, y));
      double gy = 0.5 * (source->at(x, y + 1) - source->at(x, y - 1));
      auto& t = tiles[(fy / kTile) * kTilesPerSide + fx / kTile];
      t.gxx += gx * gx;
      t.gyy += gy * gy;
      t.gxy += gx * gy;
      ++t.count;
    }
  }

  constexpr int kMinCount = kTile * kTile / 8;
  auto tile_frequency = [&](int i, int j) {
    int px = std::clamp(ox + i * kTile + kTile / 2, 0, w - 1);
    int py = std::clamp(oy + j * kTile + kTile / 2, 0, h - 1);
    int c = std::min(px / analysis.block_size, analysis.frequency.cols() - 1);
    int r = std::min(py / analysis.block_size, analysis.frequency.rows() - 1);
    return analysis.frequency.at(c, r);
  };
  std::vector<double> energies, frequencies;
  for (int j = 0; j < kTilesPerSide; ++j) {
    for (int i = 0; i < kTilesPerSide; ++i) {
      const auto& t = tiles[j * kTilesPerSide + i];
      if (t.count < kMinCount) continue;
      energies.push_back((t.gxx + t.gyy) / t.count);
      double f = tile_frequency(i, j);
      if (f > 0) frequencies.push_back(f);
    }
  }
  const double energy_ref = median(energies);
  const double frequency_ref = median(frequencies);

  std::vector<double> raw(kRawDimension, 0.0);
  auto cell = [&](int c, int r) { return raw.data() + (r * kCellsPerSide + c) * kCellFeatures; };
  for (int j = 0; j < kTilesPerSide; ++j) {
    for (int i = 0; i < kTilesPerSide; ++i) {
      const auto& t = tiles[j * kTilesPerSide + i];
      if (t.count < kMinCount) continue;
      const double sum = t.gxx + t.gyy;
      if (sum <= 0) continue;
      const double presence = static_cast<double>(t.count) / (kTile * kTile);
      const double coherence = std::sqrt((t.gxx - t.gyy) * (t.gxx - t.gyy) + 4 * t.gxy * t.gxy) / sum;
      double theta = 0.5 * std::atan2(2 * t.gxy, t.gxx - t.gyy) + std::numbers::pi / 2;
      theta = std::fmod(theta + std::numbers::pi, std::numbers::pi);
      const double weight = presence * coherence;

      // Soft orientation bin.
      double b = theta / std::numbers::pi * kBins - 0.5;
      int b0 = static_cast<int>(std::floor(b));
      double bf = b - b0;
      int bin0 = (b0 + kBins) % kBins, bin1 = (b0 + 1 + kBins) % kBins;

      double f = tile_frequency(i, j);
      double rel_f = f > 0 && frequency_ref > 0 ? std::clamp(f / frequency_ref - 1.0, -0.5, 0.5) : 0.0;
      double rel_e = energy_ref > 0 ? std::clamp(std::log(sum / t.count / energy_ref), -2.0, 2.0) : 0.0;

      // Bilinear spread over the four nearest cell centers.
      double u = (i * kTile + kTile / 2.0 - kCellSize / 2.0) / kCellSize;
      double v = (j * kTile + kTile / 2.0 - kCellSize / 2.0) / kCellSize;
      int c0 = static_cast<int>(std::floor(u)), r0 = static_cast<int>(std::floor(v));
      double fu = u - c0, fv = v - r0;
      for (int dr = 0; dr <= 1; ++dr) {
        for (int dc = 0; dc <= 1; ++dc) {
          int c = c0 + dc, r = r0 + dr;
          if (c < 0 || r < 0 || c >= kCellsPerSide || r >= kCellsPerSide) continue;
          double s = (dc ? fu : 1 - fu) * (dr ? fv : 1 - fv);
          double* out = cell(c, r);
          out[bin0] += s * weight * (1 - bf);
          out[bin1] += s * weight * bf;
          out[kBins] += s * presence * rel_f * kFrequencyWeight;
          out[kBins + 1] += s * presence * rel_e * kEnergyWeight;
        }
      }
    }
  }
  constexpr double kTilesPerCell = (kCellSize / kTile) * (kCellSize / kTile);
  for (int k = 0; k < kCellsPerSide * kCellsPerSide; ++k) {
    double* out = raw.data() + k * kCellFeatures;
    double mass = 0;
    for (int b = 0; b < kBins; ++b) mass += out[b];
    for (int b = 0; b < kBins; ++b) out[b] = (out[b] - mass / kBins) / kTilesPerCell;
    out[kBins] /= kTilesPerCell;
    out[kBins + 1] /= kTilesPerCell;
  }
  return raw;
}

TextureEmbedding extract_embedding(const FingerprintImage& img, const imgproc::RidgeAnalysis& analysis,
                                   const TextureOptions& options, const FingerprintImage* enhanced) {
  auto raw = raw_descriptor(img, analysis, options, enhanced);
  Eigen::Map<const Eigen::VectorXd> x(raw.data(), kRawDimension);
  Eigen::VectorXd y = projection().transpose() * x;
  const double norm = y.norm();
  if (!(norm > 0)) throw Error(ErrorCode::EmptyForeground, "no ridge structure to describe");
  TextureEmbedding e;
  e.vector.resize(kDimension);
  for (int i = 0; i < kDimension; ++i) e.vector[i] = static_cast<float>(y[i] / norm);
  e.extractor_id = options.raw ? std::string(kExtractorId) + "-raw" : std::string(kExtractorId);
  e.source_ppi = img.ppi();
  return e;
}

float dot512(const float* a, const float* b) noexcept {
  float acc[16] = {};
  for (int i = 0; i < kDimension; i += 16) {
    for (int j = 0; j < 16; ++j) acc[j] += a[i + j] * b[i + j];
  }
  for (int width = 8; width > 0; width /= 2) {
    for (int j = 0; j < width; ++j) acc[j] += acc[j + width];
  }
  return acc[0];
}

double compare(const TextureEmbedding& a, const TextureEmbedding& b) { return compare_checked(a, b).similarity; }

Comparison compare_checked(const TextureEmbedding& a, const TextureEmbedding& b) {
  if (a.vector.size() != kDimension || b.vector.size() != kDimension) {
    throw Error(ErrorCode::DimensionMismatch, "embeddings must have " + std::to_string(kDimension) + " components");
  }
  return {dot512(a.vector.data(), b.vector.data()), a.extractor_id != b.extractor_id};
}

void EmbeddingMatrix::add(const TextureEmbedding& e) { add(std::span<const float>(e.vector)); }

void EmbeddingMatrix::add(std::span<const float> row) {
  if (row.size() != kDimension) throw Error(ErrorCode::DimensionMismatch, "gallery rows must have 512 components");
  data_.insert(data_.end(), row.begin(), row.end());
}

std::vector<SearchHit> batch_search(const TextureEmbedding& probe, const EmbeddingMatrix& gallery, std::size_t k) {
  if (gallery.empty()) throw Error(ErrorCode::EmptyGallery, "gallery is empty");
  if (probe.vector.size() != kDimension) throw Error(ErrorCode::DimensionMismatch, "probe must have 512 components");
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  const std::size_t n = gallery.rows();
  k = std::min(k, n);
  std::vector<SearchHit> hits(n);
  for (std::size_t i = 0; i < n; ++i) hits[i] = {i, dot512(probe.vector.data(), gallery.row(i))};
  auto order = [](const SearchHit& a, const SearchHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.index < b.index;
  };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), order);
  hits.resize(k);
  return hits;
}

namespace {

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void write_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<float> read_floats(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kDimension * 4) {
    throw Error(ErrorCode::WrongDimension, "expected " + std::to_string(kDimension) + " floats, got " +
                                               std::to_string(bytes.size() / 4));
  }
  std::vector<float> v(kDimension);
  for (int i = 0; i < kDimension; ++i) v[i] = std::bit_cast<float>(read_u32(bytes.data() + 4 * i));
  return v;
}

void check_finite(const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteValue, "embedding contains a non-finite value");
  }
}

std::span<const std::uint8_t> emb_payload(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw Error(ErrorCode::CorruptData, "embedding file too short");
  std::uint32_t dim = read_u32(bytes.data() + 4);
  if (dim != kDimension) throw Error(ErrorCode::WrongDimension, "embedding dimension " + std::to_string(dim));
  if (bytes.size() != 8 + 4ull * dim) throw Error(ErrorCode::CorruptData, "embedding file length mismatch");
  return bytes.subspan(8);
}

bool has_emb_magic(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 4 && std::memcmp(bytes.data(), kEmbMagic, 4) == 0;
}

}  // namespace

TextureEmbedding import_external_embedding(std::span<const std::uint8_t> bytes, std::string_view extractor_name) {
  std::vector<float> v;
  auto first = std::find_if(bytes.begin(), bytes.end(), [](std::uint8_t c) { return !std::isspace(c); });
  if (first != bytes.end() && *first == '[') {
    nlohmann::json j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded() || !j.is_array()) throw Error(ErrorCode::CorruptData, "embedding json is not an array");
    if (j.size() != kDimension) throw Error(ErrorCode::WrongDimension, "expected 512 numbers, got " + std::to_string(j.size()));
    v.reserve(kDimension);
    for (const auto& x : j) {
      if (x.is_null()) throw Error(ErrorCode::NonFiniteValue, "embedding contains null");
      if (!x.is_number()) throw Error(ErrorCode::CorruptData, "embedding entries must be numbers");
      v.push_back(x.get<float>());
    }
  } else {
    v = read_floats(has_emb_magic(bytes) ? emb_payload(bytes) : bytes);
  }
  check_finite(v);
  double norm2 = 0;
  for (float x : v) norm2 += static_cast<double>(x) * x;
  if (!(norm2 > 0)) throw Error(ErrorCode::NonFiniteValue, "embedding has zero norm");
  const double norm = std::sqrt(norm2);
  TextureEmbedding e;
  e.vector.resize(kDimension);
  for (int i = 0; i < kDimension; ++i) e.vector[i] = static_cast<float>(v[i] / norm);
  e.extractor_id = "external:" + std::string(extractor_name);
  return e;
}

std::vector<std::uint8_t> to_emb(const TextureEmbedding& e) {
  if (e.vector.size() != kDimension) throw Error(ErrorCode::WrongDimension, "embedding must have 512 components");
  std::vector<std::uint8_t> out(kEmbMagic, kEmbMagic + 4);
  write_u32(out, kDimension);
  for (float x : e.vector) write_u32(out, std::bit_cast<std::uint32_t>(x));
  return out;
}

TextureEmbedding from_emb(std::span<const std::uint8_t> bytes) {
  if (!has_emb_magic(bytes)) throw Error(ErrorCode::UnsupportedFormat, "not an embedding file");
  TextureEmbedding e;
  e.vector = read_floats(emb_payload(bytes));
  check_finite(e.vector);
  return e;
}

nlohmann::json to_json(const TextureEmbedding& e) {
  return {{"extractor_id", e.extractor_id}, {"source_ppi", e.source_ppi}, {"vector", e.vector}};
}

TextureEmbedding from_json(const nlohmann::json& j) {
  TextureEmbedding e;
  try {
    e.extractor_id = j.at("extractor_id").get<std::string>();
    e.source_ppi = j.at("source_ppi").get<int>();
    for (const auto& x : j.at("vector")) {
      if (!x.is_number()) throw Error(ErrorCode::NonFiniteValue, "embedding contains a non-number");
      e.vector.push_back(x.get<float>());
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::CorruptData, std::string("embedding json: ") + ex.what());
  }
  if (e.vector.size() != kDimension) throw Error(ErrorCode::WrongDimension, "embedding must have 512 components");
  check_finite(e.vector);
  return e;
}

}  // namespace ipx::texture
