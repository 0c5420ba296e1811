#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ipx/image.hpp"
#include "ipx/imgproc.hpp"

namespace ipx::texture {

inline constexpr int kDimension = 512;
inline constexpr int kFrameSize = 1024;
inline constexpr int kCellSize = 64;
inline constexpr int kTexturePpi = 1900;
inline constexpr std::string_view kExtractorId = "ipx-texture-v1";
inline constexpr std::uint64_t kProjectionSeed = 0x5EED0512C0FFEE01ULL;

struct TextureEmbedding {
  std::vector<float> vector;  // kDimension components, unit norm
  std::string extractor_id{kExtractorId};
  int source_ppi = kTexturePpi;

  bool operator==(const TextureEmbedding&) const = default;
};

struct TextureOptions {
  /// Describe the raw capture instead of the enhanced image.
  bool raw = false;
};

/// Handcrafted 512-d descriptor. `img` is the capture; `enhanced` may pass a
/// precomputed enhancement of it, otherwise it is computed when needed.
TextureEmbedding extract_embedding(const FingerprintImage& img, const imgproc::RidgeAnalysis& analysis,
                                   const TextureOptions& options = {},
                                   const FingerprintImage* enhanced = nullptr);

/// Raw (pre-projection) descriptor, exposed for tests.
std::vector<double> raw_descriptor(const FingerprintImage& img, const imgproc::RidgeAnalysis& analysis,
                                   const TextureOptions& options = {}, const FingerprintImage* enhanced = nullptr);

/// Dot product of two kDimension vectors. Every similarity in the library goes through here.
float dot512(const float* a, const float* b) noexcept;

/// Cosine similarity (dot product of unit vectors).
double compare(const TextureEmbedding& a, const TextureEmbedding& b);

struct Comparison {
  double similarity = 0;
  bool extractor_mismatch = false;
};
Comparison compare_checked(const TextureEmbedding& a, const TextureEmbedding& b);

/// Similarity mapped to [0, 1] for fusion.
inline double to_unit_score(double similarity) { return (1.0 + similarity) / 2.0; }

/// Contiguous row-major matrix of embeddings.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  explicit EmbeddingMatrix(std::size_t reserve_rows) { data_.reserve(reserve_rows * kDimension); }

  void add(const TextureEmbedding& e);
  void add(std::span<const float> row);
  std::size_t rows() const noexcept { return data_.size() / kDimension; }
  bool empty() const noexcept { return data_.empty(); }
  const float* row(std::size_t i) const noexcept { return data_.data() + i * kDimension; }
  std::span<const float> data() const noexcept { return data_; }

 private:
  std::vector<float> data_;
};

struct SearchHit {
  std::size_t index = 0;
  double similarity = 0;

  bool operator==(const SearchHit&) const = default;
};

/// Exact top-k by similarity, descending; ties go to the lower index.
std::vector<SearchHit> batch_search(const TextureEmbedding& probe, const EmbeddingMatrix& gallery, std::size_t k);

/// Accepts 512 little-endian f32 (bare or in an .emb container) or a JSON array of 512 numbers.
TextureEmbedding import_external_embedding(std::span<const std::uint8_t> bytes, std::string_view extractor_name);

/// .emb container: "IPXE", u32 dimension, then little-endian f32 components.
std::vector<std::uint8_t> to_emb(const TextureEmbedding& e);
TextureEmbedding from_emb(std::span<const std::uint8_t> bytes);

nlohmann::json to_json(const TextureEmbedding& e);
TextureEmbedding from_json(const nlohmann::json& j);

}  // namespace ipx::texture
