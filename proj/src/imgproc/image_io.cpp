#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ipx/error.hpp"
#include "ipx/image.hpp"

namespace ipx {

namespace {

constexpr double kMetersPerInch = 0.0254;

bool has_prefix(std::span<const std::uint8_t> bytes, std::string_view prefix) {
  return bytes.size() >= prefix.size() &&
         std::equal(prefix.begin(), prefix.end(), bytes.begin(),
                    [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; });
}

// Graymap header tokenizer that also collects "# ppi=N" comments.
class PgmHeader {
 public:
  explicit PgmHeader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  long next_int() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
      throw Error(ErrorCode::CorruptData, "malformed graymap header");
    }
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_++] - '0');
      if (value > 1'000'000'000L) throw Error(ErrorCode::CorruptData, "graymap header value too large");
    }
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw Error(ErrorCode::CorruptData, "missing raster separator");
    }
    return pos_ + 1;
  }

  std::optional<int> ppi() const { return ppi_; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        std::size_t end = pos_;
        while (end < bytes_.size() && bytes_[end] != '\n') ++end;
        parse_comment(std::string(bytes_.begin() + pos_ + 1, bytes_.begin() + end));
        pos_ = end;
      } else {
        break;
      }
    }
  }

  void parse_comment(const std::string& text) {
    auto at = text.find("ppi=");
    if (at == std::string::npos) return;
    int value = std::atoi(text.c_str() + at + 4);
    if (value > 0) ppi_ = value;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
  std::optional<int> ppi_;
};

FingerprintImage decode_pgm(std::span<const std::uint8_t> bytes, std::optional<int> declared_ppi) {
  PgmHeader header(bytes);
  long width = header.next_int();
  long height = header.next_int();
  long maxval = header.next_int();
  if (maxval != 255) throw Error(ErrorCode::UnsupportedFormat, "graymap maxval must be 255");
  if (width <= 0 || height <= 0) throw Error(ErrorCode::CorruptData, "graymap has empty dimensions");
  std::size_t offset = header.raster_offset();
  std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() < offset + count) throw Error(ErrorCode::CorruptData, "graymap raster truncated");

  int ppi = declared_ppi.value_or(header.ppi().value_or(0));
  if (ppi <= 0) throw Error(ErrorCode::MissingResolution, "graymap carries no resolution; pass a ppi");
  std::vector<std::uint8_t> pixels(bytes.begin() + offset, bytes.begin() + offset + count);
  return FingerprintImage(static_cast<int>(width), static_cast<int>(height), ppi, std::move(pixels));
}

struct PngReadSource {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

void png_read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* src = static_cast<PngReadSource*>(png_get_io_ptr(png));
  if (src->pos + length > src->bytes.size()) png_error(png, "read past end of buffer");
  std::memcpy(out, src->bytes.data() + src->pos, length);
  src->pos += length;
}

[[noreturn]] void png_error_callback(png_structp, png_const_charp message) {
  throw Error(ErrorCode::CorruptData, std::string("png: ") + message);
}

void png_warning_callback(png_structp, png_const_charp) {}

FingerprintImage decode_png(std::span<const std::uint8_t> bytes, std::optional<int> declared_ppi) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_callback,
                                           png_warning_callback);
  if (png == nullptr) throw Error(ErrorCode::CorruptData, "png: cannot allocate decoder");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};

  PngReadSource source{bytes, 0};
  png_set_read_fn(png, &source, png_read_callback);
  png_read_info(png, info);

  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int bit_depth = 0;
  int color_type = 0;
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  if (color_type != PNG_COLOR_TYPE_GRAY || bit_depth != 8) {
    throw Error(ErrorCode::UnsupportedFormat, "only 8-bit grayscale PNG is supported");
  }
  if (png_get_interlace_type(png, info) != PNG_INTERLACE_NONE) png_set_interlace_handling(png);
  png_read_update_info(png, info);

  std::optional<int> embedded_ppi;
  png_uint_32 res_x = 0;
  png_uint_32 res_y = 0;
  int unit = 0;
  if (png_get_pHYs(png, info, &res_x, &res_y, &unit) != 0 && unit == PNG_RESOLUTION_METER && res_x > 0) {
    embedded_ppi = static_cast<int>(std::lround(res_x * kMetersPerInch));
  }
  int ppi = declared_ppi.value_or(embedded_ppi.value_or(0));
  if (ppi <= 0) throw Error(ErrorCode::MissingResolution, "PNG has no pHYs chunk; pass a ppi");

  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return FingerprintImage(static_cast<int>(width), static_cast<int>(height), ppi, std::move(pixels));
}

void png_write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_callback(png_structp) {}

std::vector<std::uint8_t> encode_png(const FingerprintImage& img) {
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_callback,
                                            png_warning_callback);
  if (png == nullptr) throw Error(ErrorCode::IoError, "png: cannot allocate encoder");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};

  png_set_write_fn(png, &out, png_write_callback, png_flush_callback);
  png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  auto ppm = static_cast<png_uint_32>(std::lround(img.ppi() / kMetersPerInch));
  png_set_pHYs(png, info, ppm, ppm, PNG_RESOLUTION_METER);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height());
  auto pixels = img.pixels();
  for (int y = 0; y < img.height(); ++y) {
    rows[y] = const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * img.width());
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  return out;
}

std::vector<std::uint8_t> encode_pgm(const FingerprintImage& img) {
  std::string header = "P5\n# ppi=" + std::to_string(img.ppi()) + "\n" + std::to_string(img.width()) + " " +
                       std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  auto pixels = img.pixels();
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

}  // namespace

std::string_view to_string(Finger finger) {
  return finger == Finger::LeftThumb ? "left_thumb" : "right_thumb";
}

Finger parse_finger(std::string_view text) {
  std::string lower;
  for (char c : text) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "left" || lower == "left_thumb" || lower == "leftthumb" || lower == "l") return Finger::LeftThumb;
  if (lower == "right" || lower == "right_thumb" || lower == "rightthumb" || lower == "r") return Finger::RightThumb;
  throw Error(ErrorCode::InvalidArgument, "unknown finger label '" + std::string(text) + "'");
}

FingerprintImage::FingerprintImage(int width, int height, int ppi, std::uint8_t fill)
    : FingerprintImage(width, height, ppi,
                       std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(width, 0)) *
                                                     static_cast<std::size_t>(std::max(height, 0)),
                                                 fill)) {}

FingerprintImage::FingerprintImage(int width, int height, int ppi, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), ppi_(ppi), pixels_(std::move(pixels)) {
  if (width < 0 || height < 0) throw Error(ErrorCode::InvalidArgument, "negative image dimensions");
  if (ppi <= 0) throw Error(ErrorCode::InvalidArgument, "ppi must be positive");
  if (pixels_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw Error(ErrorCode::InvalidArgument, "pixel count does not match dimensions");
  }
}

FingerprintImage load_image(std::span<const std::uint8_t> bytes, std::optional<int> declared_ppi) {
  if (declared_ppi && *declared_ppi <= 0) throw Error(ErrorCode::InvalidArgument, "declared ppi must be positive");
  if (has_prefix(bytes, "P5")) return decode_pgm(bytes, declared_ppi);
  if (has_prefix(bytes, "\x89PNG\r\n\x1a\n")) return decode_png(bytes, declared_ppi);
  throw Error(ErrorCode::UnsupportedFormat, "expected a binary graymap (P5) or PNG");
}

FingerprintImage load_image_file(const std::string& path, std::optional<int> declared_ppi) {
  auto bytes = read_file_bytes(path);
  return load_image(bytes, declared_ppi);
}

std::vector<std::uint8_t> write_image(const FingerprintImage& img, ImageFormat format) {
  return format == ImageFormat::Png ? encode_png(img) : encode_pgm(img);
}

void write_image_file(const FingerprintImage& img, const std::string& path) {
  bool png = path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0;
  write_file_bytes(path, write_image(img, png ? ImageFormat::Png : ImageFormat::Pgm));
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

}  // namespace ipx
