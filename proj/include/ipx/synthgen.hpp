#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ipx/grid.hpp"
#include "ipx/image.hpp"

namespace ipx::synth {

/// Masters are drawn at half the capture resolution.
inline constexpr int kMasterPpi = 950;
inline constexpr int kCapturePpi = 1900;

enum class PatternClass { Arch, TentedArch, Loop, Whorl };
std::string_view to_string(PatternClass c);

enum class SingularityKind { Core, Delta };

struct Singularity {
  SingularityKind kind = SingularityKind::Core;
  double x = 0;  // master pixels
  double y = 0;
};

struct MasterOptions {
  std::optional<PatternClass> pattern;  // drawn from the seed when empty
  double min_period_500 = 4.2;          // ridge period range at 500 ppi
  double max_period_500 = 5.2;
  int size = 400;                       // master canvas, pixels at kMasterPpi
  int iterations = 5;
};

struct MasterPrint {
  std::uint64_t seed = 0;
  PatternClass pattern = PatternClass::Loop;
  std::vector<Singularity> singularities;
  double base_ridge_period_at_500ppi = 4.5;
  int block_size = 8;
  Grid<double> orientation;  // [0, pi) per block
  Grid<double> period;       // ridge period per block, master pixels
  FingerprintImage pattern_image;  // ridges dark, kMasterPpi
};

MasterPrint synth_master(std::uint64_t seed, const MasterOptions& options = {});

/// Raw orientation model used for the master, in [0, pi).
double model_orientation(const MasterPrint& master, double x, double y);

struct Perturbation {
  double rotation_deg = 6.0;      // standard deviation of the placement rotation
  double translation_px = 40.0;   // standard deviation of the placement shift, capture pixels
  double elastic_amplitude = 1.5; // largest displacement, in ridge periods
  int elastic_bumps = 6;
  double blur_sigma = 1.6;        // capture pixels
  double wetness = 0.15;          // standard deviation of the wet/dry bias
  double contrast = 0.85;         // ridge/valley contrast in [0, 1]
  double noise_sigma = 7.0;       // gray levels
  double touch_jitter = 0.10;     // relative variation of the contact ellipse

  /// No placement, distortion or noise randomness; only the ridge rendering remains.
  static Perturbation none();
  bool operator==(const Perturbation&) const = default;
};

struct GrowthModel {
  double growth_at_90_days = 0.12;  // s(90) - 1; s grows linearly and extrapolates

  double scale(double age_days) const { return 1.0 + growth_at_90_days * age_days / 90.0; }
  bool operator==(const GrowthModel&) const = default;
};

struct RenderOptions {
  int canvas = 576;                // capture pixels per side
  double contact_diameter = 0.85;  // contact ellipse size relative to the canvas at s = 1
  bool operator==(const RenderOptions&) const = default;
};

/// Renders one capture at kCapturePpi. Zero perturbation makes the result seed-independent.
FingerprintImage render_capture(const MasterPrint& master, double age_days, const Perturbation& perturbation,
                                std::uint64_t impression_seed, const GrowthModel& growth = {},
                                const RenderOptions& render = {});

struct SessionSpec {
  int session = 1;
  int offset_min_days = 0;  // offset from the enrollment visit
  int offset_max_days = 0;
  int impressions_per_thumb = 2;
  double attendance = 1.0;  // probability a subject returns for this session
  Perturbation perturbation;

  bool operator==(const SessionSpec&) const = default;
};

struct Schedule {
  std::vector<SessionSpec> sessions;
  int enrollment_age_min_days = 7;
  int enrollment_age_max_days = 84;
  /// Share of subjects enrolled before day 28, in [28, 56) and from day 56.
  std::vector<double> age_band_weights{0.115, 0.231, 0.654};
  GrowthModel growth;
  /// Extra capture severity for younger infants: factor 1 + young_severity * (1 - age / 90), clamped at 90 days.
  double young_severity = 1.5;
  RenderOptions render;

  /// Three sessions mirroring the longitudinal collection: +2..3 days and +~90 days.
  static Schedule standard();
  bool operator==(const Schedule&) const = default;
};

nlohmann::json to_json(const Schedule& s);
Schedule schedule_from_json(const nlohmann::json& j);

struct CaptureEntry {
  std::string path;  // relative to the manifest directory
  CaptureMeta meta;
};

struct SessionVisit {
  int session = 1;
  int offset_days = 0;  // from the enrollment visit
};

struct SubjectEntry {
  std::string subject_id;
  int birth_offset = 0;  // days from birth to the enrollment visit
  int enrollment_age_days = 0;
  std::uint64_t left_seed = 0;
  std::uint64_t right_seed = 0;
  std::vector<SessionVisit> visits;  // attended sessions
  std::vector<CaptureEntry> captures;
};

struct CohortManifest {
  std::uint64_t master_seed = 0;
  Schedule schedule;
  std::vector<SubjectEntry> subjects;
};

nlohmann::json to_json(const CohortManifest& m);
CohortManifest manifest_from_json(const nlohmann::json& j);

CohortManifest load_manifest(const std::filesystem::path& path);

/// Plans the cohort (ages, attendance, seeds) without rendering.
CohortManifest plan_cohort(int n_subjects, const Schedule& schedule, std::uint64_t master_seed);

/// Renders every capture of a planned cohort into `out_dir` and writes manifest.json there.
CohortManifest gen_cohort(int n_subjects, const Schedule& schedule, std::uint64_t master_seed,
                          const std::filesystem::path& out_dir);

/// Master of one thumb of a planned subject.
MasterPrint finger_master(const SubjectEntry& subject, Finger finger);

/// Renders one planned capture from the master of its thumb.
FingerprintImage render_entry(const MasterPrint& master, const SubjectEntry& subject, const CaptureEntry& capture,
                              const Schedule& schedule);

/// Session perturbation scaled by the age severity factor.
Perturbation perturbation_at_age(const Schedule& schedule, const SessionSpec& session, double age_days);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace ipx::synth
