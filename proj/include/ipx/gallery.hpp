#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ipx/error.hpp"
#include "ipx/fusion.hpp"
#include "ipx/thresholds.hpp"

namespace ipx::gallery {

using Date = std::chrono::year_month_day;

/// "YYYY-MM-DD". Errors: InvalidArgument.
Date parse_date(std::string_view text);
std::string format_date(Date d);

enum class Sex { Female, Male, Other };
std::string_view to_string(Sex s);
Sex parse_sex(std::string_view text);

struct Vaccination {
  std::string vaccine;
  int dose = 1;  // positive
  Date administered_at;
  bool operator==(const Vaccination&) const = default;
};

struct SubjectMeta {
  std::string display_name;
  Date date_of_birth;
  std::optional<Sex> sex;
  std::vector<Vaccination> vaccination_records;
  std::string notes;

  /// Errors: InvalidArgument (invalid dates, dose < 1, vaccination before birth).
  void validate() const;
  bool operator==(const SubjectMeta&) const = default;
};

nlohmann::json to_json(const SubjectMeta& m);
/// Parses and validates.
SubjectMeta subject_meta_from_json(const nlohmann::json& j);

struct GalleryRecord {
  std::string subject_id;
  fusion::SubjectTemplate templ;  // Enrollment role
  SubjectMeta metadata;
  std::int64_t enrolled_at = 0;  // unix seconds

  bool operator==(const GalleryRecord&) const = default;
};

struct Candidate {
  std::string subject_id;
  double score = 0;  // fused
  fusion::MatchScore breakdown;
};

/// Sorted by descending score, ties by ascending subject_id.
using CandidateList = std::vector<Candidate>;

nlohmann::json to_json(const Candidate& c);
nlohmann::json to_json(const CandidateList& list);

/// Raised by enroll when de-duplication finds candidates at or above the threshold.
class PotentialDuplicateFound : public Error {
 public:
  explicit PotentialDuplicateFound(CandidateList candidates);
  const CandidateList& candidates() const { return candidates_; }

 private:
  CandidateList candidates_;
};

struct GalleryConfig {
  fusion::Calibration calibration = fusion::Calibration::uncalibrated();
  std::optional<ThresholdTable> thresholds;
  std::size_t shortlist = 200;
  double default_far = 0.001;

  bool operator==(const GalleryConfig&) const = default;
};

nlohmann::json to_json(const GalleryConfig& c);
GalleryConfig gallery_config_from_json(const nlohmann::json& j);

struct EnrollOptions {
  bool dedup = true;
  /// Fused-score threshold; defaults to the table threshold at the configured FAR.
  std::optional<double> dedup_threshold;
  /// Enroll even when de-duplication reports candidates.
  bool override_duplicates = false;
};

struct EnrollResult {
  std::string subject_id;
  std::size_t gallery_size = 0;
  CandidateList duplicates;  // reported candidates when enrolled with the override
};

struct VerifyResult {
  bool decision = false;
  double far = 0;
  double threshold = 0;
  fusion::MatchScore score;
};

/// Subject registry. Readers work on an immutable snapshot; enrollments are serialized and
/// publish a new snapshot atomically. A gallery opened from or saved to a file appends each
/// new enrollment to that file before publishing it.
class Gallery {
 public:
  explicit Gallery(GalleryConfig config = {});

  Gallery(const Gallery&) = delete;
  Gallery& operator=(const Gallery&) = delete;
  Gallery(Gallery&& other) noexcept;
  Gallery& operator=(Gallery&& other) noexcept;

  /// Errors: DuplicateId, PotentialDuplicateFound, NoCaptures (empty template),
  /// MissingThresholdTable (dedup without threshold or table).
  EnrollResult enroll(GalleryRecord record, const EnrollOptions& options = {});

  /// Errors: UnknownSubject, MissingThresholdTable, InvalidArgument (far outside the table).
  VerifyResult verify(const std::string& subject_id, const fusion::SubjectTemplate& probe,
                      std::optional<double> far = std::nullopt) const;

  /// Texture shortlist, then full fusion on the shortlist; k is clamped to the gallery size.
  /// `shortlist` overrides the configured size; 0 means the whole gallery. Errors: EmptyGallery.
  CandidateList identify(const fusion::SubjectTemplate& probe, std::size_t k,
                         std::optional<std::size_t> shortlist = std::nullopt) const;

  std::size_t size() const;
  bool contains(const std::string& subject_id) const;
  std::shared_ptr<const GalleryRecord> record(const std::string& subject_id) const;
  /// Records in enrollment order.
  std::vector<std::shared_ptr<const GalleryRecord>> records() const;
  GalleryConfig config() const;
  /// Replaces the configuration (rewriting the bound file). Errors: IoError.
  void set_config(GalleryConfig config);

  /// Writes the whole gallery to `path` (via a temporary file and rename) and binds it.
  void save(const std::filesystem::path& path);
  /// Errors: IoError, UnsupportedFormat, VersionMismatch, ChecksumMismatch.
  static Gallery load(const std::filesystem::path& path);
  /// Loads `path` if it exists, else creates it with `config`.
  static Gallery open(const std::filesystem::path& path, const GalleryConfig& config = {});
  const std::optional<std::filesystem::path>& path() const { return path_; }

  /// Same config and records in the same order.
  bool same_content(const Gallery& other) const;

 private:
  struct Snapshot;
  std::shared_ptr<const Snapshot> snapshot() const;
  static CandidateList rank(const Snapshot& snap, const fusion::SubjectTemplate& probe, std::size_t k,
                            std::size_t shortlist);
  void write_file(const std::filesystem::path& path, const Snapshot& snap);

  std::shared_ptr<const Snapshot> current_;
  std::unique_ptr<std::mutex> write_mutex_;
  std::optional<std::filesystem::path> path_;
  // State of the bound file, needed to append without rereading it.
  std::uint64_t config_offset_ = 0;
  std::vector<std::uint64_t> record_offsets_;
  std::uint64_t file_size_ = 0;
  std::uint32_t file_crc_ = 0;
};

}  // namespace ipx::gallery
