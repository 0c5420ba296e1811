#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ipx {

enum class Finger { LeftThumb, RightThumb };

std::string_view to_string(Finger finger);
/// Accepts "left", "left_thumb", "LeftThumb", "L" and the right-hand equivalents.
Finger parse_finger(std::string_view text);

struct CaptureMeta {
  std::string subject_id;
  Finger finger = Finger::LeftThumb;
  int session = 1;
  int impression_index = 1;
  int age_at_capture_days = 0;
  std::int64_t captured_at = 0;  // unix seconds, UTC

  bool operator==(const CaptureMeta&) const = default;
};

/// 8-bit grayscale raster with its spatial resolution.
class FingerprintImage {
 public:
  FingerprintImage() = default;
  FingerprintImage(int width, int height, int ppi, std::uint8_t fill = 0);
  FingerprintImage(int width, int height, int ppi, std::vector<std::uint8_t> pixels);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int ppi() const noexcept { return ppi_; }
  bool empty() const noexcept { return pixels_.empty(); }

  std::uint8_t at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  std::uint8_t& at(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }
  std::span<std::uint8_t> pixels() noexcept { return pixels_; }

  const std::optional<CaptureMeta>& meta() const noexcept { return meta_; }
  void set_meta(std::optional<CaptureMeta> meta) { meta_ = std::move(meta); }

  bool operator==(const FingerprintImage&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int ppi_ = 0;
  std::vector<std::uint8_t> pixels_;
  std::optional<CaptureMeta> meta_;
};

enum class ImageFormat { Pgm, Png };

/// Decodes a binary graymap (P5, maxval 255) or an 8-bit grayscale PNG.
/// Resolution comes from the PNG pHYs chunk or a "# ppi=N" graymap comment,
/// and `declared_ppi` overrides either.
FingerprintImage load_image(std::span<const std::uint8_t> bytes,
                            std::optional<int> declared_ppi = std::nullopt);
FingerprintImage load_image_file(const std::string& path,
                                 std::optional<int> declared_ppi = std::nullopt);

std::vector<std::uint8_t> write_image(const FingerprintImage& img, ImageFormat format = ImageFormat::Pgm);
void write_image_file(const FingerprintImage& img, const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace ipx
