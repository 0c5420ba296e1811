#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ipx/fusion.hpp"
#include "ipx/synthgen.hpp"
#include "ipx/thresholds.hpp"

namespace ipx::eval {

/// Matcher stacks of the ablation. Fused combines the channels weighted by the calibration.
enum class Stack { Minutiae500, Minutiae1900, Texture1900, Fused };
inline constexpr std::array<Stack, 4> kAllStacks{Stack::Minutiae500, Stack::Minutiae1900, Stack::Texture1900,
                                                 Stack::Fused};

std::string_view to_string(Stack s);
Stack parse_stack(std::string_view name);

struct ProtocolSpec {
  std::set<int> enroll_sessions{1, 2};
  std::set<int> probe_sessions{3};
  int min_enroll_age_days = 0;
  std::vector<Stack> stacks{kAllStacks.begin(), kAllStacks.end()};
  std::vector<double> far_points{0.001, 0.01};

  /// Errors: InvalidArgument (overlapping or empty session sets, FAR outside (0, 1], no stacks).
  void validate() const;
  bool operator==(const ProtocolSpec&) const = default;
};

nlohmann::json to_json(const ProtocolSpec& p);
ProtocolSpec protocol_from_json(const nlohmann::json& j);

/// One subject of a stratum with the captures that form its two templates.
struct SubjectPlan {
  std::string subject_id;
  int enrollment_age_days = 0;
  std::vector<synth::CaptureEntry> enroll;
  std::vector<synth::CaptureEntry> probe;
};

struct PairPlan {
  std::vector<SubjectPlan> subjects;  // returning subjects of the stratum, by subject_id
  std::vector<std::pair<std::size_t, std::size_t>> genuine;   // (enroll subject, probe subject)
  std::vector<std::pair<std::size_t, std::size_t>> impostor;
};

/// Returning subjects at or above the minimum enrollment age, one genuine pair each and every
/// probe against every other subject's enrollment. Errors: EmptyCohort (no impostor pairs).
PairPlan build_pairs(const synth::CohortManifest& manifest, const ProtocolSpec& spec);

/// Threshold = smallest observed score whose impostor exceedance rate (score >= t) is at most `far`;
/// kMaxScore when no score qualifies. Errors: InsufficientImpostors (far * |impostor| < 1),
/// InvalidArgument (far outside (0, 1]).
double threshold_at_far(std::span<const double> genuine, std::span<const double> impostor, double far);

/// Fraction of genuine scores at or above threshold_at_far.
double tar_at_far(std::span<const double> genuine, std::span<const double> impostor, double far);

struct DetPoint {
  double threshold = 0;
  double fmr = 0;   // impostor scores >= threshold
  double fnmr = 0;  // genuine scores < threshold
  bool operator==(const DetPoint&) const = default;
};

/// One point per unique observed score, ascending threshold.
std::vector<DetPoint> det_curve(std::span<const double> genuine, std::span<const double> impostor);

/// Produces the image of one manifest capture.
using CaptureSource = std::function<FingerprintImage(const synth::SubjectEntry&, const synth::CaptureEntry&)>;

/// Reads captures relative to the manifest directory.
CaptureSource disk_source(const std::filesystem::path& manifest_dir);

/// Renders captures in memory from the manifest seeds; identical pixels to gen_cohort.
CaptureSource render_source(const synth::CohortManifest& manifest);

struct CohortTemplates {
  std::vector<SubjectPlan> subjects;
  std::vector<fusion::SubjectTemplate> enroll;
  std::vector<fusion::SubjectTemplate> probe;
  int failed_captures = 0;                // captures whose features could not be extracted
  std::vector<std::string> excluded;      // subjects left without an enrollment or probe thumb in common
};

struct RunOptions {
  fusion::FeatureOptions features;
  unsigned threads = 1;
  std::function<void(std::string_view stage, std::size_t done, std::size_t total)> progress;
};

/// Feature extraction for every subject of build_pairs(manifest, spec). Captures that fail
/// extraction are dropped; subjects whose templates then share no thumb are excluded.
CohortTemplates extract_templates(const synth::CohortManifest& manifest, const ProtocolSpec& spec,
                                  const CaptureSource& source, const RunOptions& options = {});

/// Per-thumb raw scores on every channel for every (probe, enroll) subject pair.
struct ScoreCube {
  std::vector<std::string> subject_ids;
  std::vector<int> enrollment_ages;
  std::vector<std::map<Finger, std::map<fusion::Channel, double>>> raw;  // [probe * n + enroll]

  std::size_t size() const { return subject_ids.size(); }
  const std::map<Finger, std::map<fusion::Channel, double>>& at(std::size_t probe, std::size_t enroll) const {
    return raw[probe * size() + enroll];
  }
};

ScoreCube score_cohort(const CohortTemplates& templates, const RunOptions& options = {});

/// Comparison score of one stack: the channel's thumb-averaged raw score, or the fused score.
/// A pair without a thumb in common scores 0.
double stack_score(const std::map<Finger, std::map<fusion::Channel, double>>& raw, Stack stack,
                   const fusion::Calibration& calibration);

struct CohortInfo {
  int n_subjects = 0;
  int min_age_days = 0;
  int max_age_days = 0;
  bool operator==(const CohortInfo&) const = default;
};

struct EvalReport {
  Stack stack = Stack::Fused;
  int min_enroll_age_days = 0;
  std::vector<double> genuine_scores;
  std::vector<double> impostor_scores;
  std::map<double, double> tar_at_far;  // FARs the impostor count cannot resolve are absent
  std::map<double, double> threshold_at_far;
  std::vector<DetPoint> det_curve;
  CohortInfo cohort;
  std::string config_hash;
};

nlohmann::json to_json(const EvalReport& r);

/// Report of one stack over the cube subjects at or above spec.min_enroll_age_days.
EvalReport evaluate(const ScoreCube& cube, const ProtocolSpec& spec, Stack stack,
                    const fusion::Calibration& calibration);

struct IdentificationSummary {
  int min_enroll_age_days = 0;
  int probes = 0;
  int rank1_hits = 0;
  double rank1_rate() const { return probes ? static_cast<double>(rank1_hits) / probes : 0.0; }
};

/// Closed-set identification of every probe against all enrollments of the stratum by fused
/// score, ties broken by subject_id.
IdentificationSummary identify_rank1(const ScoreCube& cube, int min_enroll_age_days,
                                     const fusion::Calibration& calibration);

struct AblationTable {
  std::vector<int> strata;  // minimum enrollment ages
  std::vector<Stack> stacks;
  std::vector<double> far_points;
  std::vector<EvalReport> reports;  // [stratum * stacks.size() + stack]
  std::vector<IdentificationSummary> identification;  // one per stratum

  const EvalReport& at(std::size_t stratum, std::size_t stack) const { return reports[stratum * stacks.size() + stack]; }
};

/// One report per (stratum, stack). Errors: EmptyCohort for a stratum without impostors.
AblationTable run_ablation(const ScoreCube& cube, const ProtocolSpec& base, const std::vector<int>& strata,
                           const fusion::Calibration& calibration);

/// Extracts, scores and tabulates in one go; strata must be at or above base.min_enroll_age_days.
AblationTable run_ablation(const synth::CohortManifest& manifest, const CaptureSource& source,
                           const ProtocolSpec& base, const std::vector<int>& strata,
                           const fusion::Calibration& calibration, const RunOptions& options = {});

nlohmann::json to_json(const AblationTable& t);
/// stratum,n_subjects,stack,far,tar,threshold rows.
std::string to_csv(const AblationTable& t);
/// Text table: one row per stratum, TAR at each FAR under each stack.
std::string format_table(const AblationTable& t);
/// threshold,fmr,fnmr rows.
std::string det_csv(const EvalReport& r);

/// SHA-256 of the canonical report JSON.
std::string report_hash(const AblationTable& t);

/// Writes report.json, report.csv, table.txt and det_<stratum>_<stack>.csv into `dir`.
void write_report(const AblationTable& t, const std::filesystem::path& dir);

/// FAR -> threshold on the report's scores (FAR 0 maps to kMaxScore), with the report's config hash.
ThresholdTable export_threshold_table(const EvalReport& report, const std::vector<double>& far_points);

struct CalibrationFitOptions {
  std::vector<int> strata{0, 28, 56};
  std::vector<double> far_points{0.001, 0.01};
  /// Candidate texture weights; minutiae gets the complement.
  std::vector<double> texture_weights{0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8};
};

struct CalibrationFit {
  fusion::Calibration calibration;
  std::map<double, double> objective;  // texture weight -> summed fused TAR over strata and FARs
};

/// Per-channel min/max over every score of the cube, then the texture weight with the highest
/// summed fused TAR (ties to the weight nearest 0.5). FARs a stratum cannot resolve are skipped.
CalibrationFit fit_calibration(const ScoreCube& cube, const CalibrationFitOptions& options = {},
                               const std::string& provenance = {});

/// Stratum label in 28-day months, e.g. "1 - 3 months".
std::string stratum_label(int min_enroll_age_days);

}  // namespace ipx::eval
