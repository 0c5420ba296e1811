#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ipx/image.hpp"
#include "ipx/minutiae.hpp"
#include "ipx/texture.hpp"

namespace ipx::fusion {

/// Matcher channels. Minutiae runs on the 1900 ppi skeleton, Minutiae500 on a 500 ppi downsample.
enum class Channel { Texture, Minutiae, Minutiae500 };
inline constexpr std::array<Channel, 3> kAllChannels{Channel::Texture, Channel::Minutiae, Channel::Minutiae500};

std::string_view to_string(Channel c);
Channel parse_channel(std::string_view name);

struct PreparedMinutiae {
  minutiae::PreparedSet native;
  minutiae::PreparedSet low;
};

struct ImpressionFeatures {
  texture::TextureEmbedding embedding;
  minutiae::MinutiaSet minutiae;     // from the native capture
  minutiae::MinutiaSet minutiae500;  // from the 500 ppi downsample
  CaptureMeta meta;
  double quality = 0;  // foreground coverage x mean coherence
  /// Matcher cache filled by prepare(); stale once the minutiae change. Not compared or serialized.
  std::shared_ptr<const PreparedMinutiae> prepared;

  bool operator==(const ImpressionFeatures& o) const {
    return embedding == o.embedding && minutiae == o.minutiae && minutiae500 == o.minutiae500 && meta == o.meta &&
           quality == o.quality;
  }
};

/// (Re)builds the matcher cache of `f`.
void prepare(ImpressionFeatures& f);

struct FeatureOptions {
  bool raw_texture = false;
  bool with_500 = true;
};

/// imgproc -> minutiae + texture for one capture. The capture must carry metadata.
ImpressionFeatures extract_features(const FingerprintImage& capture, const FeatureOptions& options = {});

enum class Role { Enrollment, Probe };
std::string_view to_string(Role r);

inline constexpr int kMaxEnrollImpressions = 4;
inline constexpr int kMaxProbeImpressions = 2;

struct Template {
  Finger finger = Finger::LeftThumb;
  Role role = Role::Enrollment;
  std::vector<ImpressionFeatures> impressions;

  bool operator==(const Template&) const = default;
};

struct SubjectTemplate {
  std::optional<Template> left;
  std::optional<Template> right;

  const std::optional<Template>& finger(Finger f) const { return f == Finger::LeftThumb ? left : right; }
  std::string subject_id() const;
  bool operator==(const SubjectTemplate&) const = default;
};

/// Groups features by thumb. Errors: NoCaptures (empty or over the role's per-thumb cap), MixedSubjects.
SubjectTemplate assemble_template(std::vector<ImpressionFeatures> impressions, Role role);

/// Feature extraction for every capture, then assemble_template.
SubjectTemplate build_template(std::span<const FingerprintImage> captures, Role role, const FeatureOptions& options = {});

/// Raw score of one impression pair on a channel, in [0, 1].
double pair_score(const ImpressionFeatures& a, const ImpressionFeatures& b, Channel channel);

/// Mean pair score over all enroll x probe impressions. Errors: FingerMismatch.
double score_impressions(const Template& enroll, const Template& probe, Channel channel);

struct Range {
  double min = 0;
  double max = 1;
  bool operator==(const Range&) const = default;
};

struct Calibration {
  int version = 1;
  std::map<Channel, Range> ranges;
  std::map<Channel, double> weights;  // channels fused into the final score
  std::string provenance;

  /// Identity ranges and equal texture/minutiae weights.
  static Calibration uncalibrated();
  bool operator==(const Calibration&) const = default;
};

nlohmann::json to_json(const Calibration& c);
Calibration calibration_from_json(const nlohmann::json& j);
Calibration load_calibration(const std::string& path);

/// Min-max map to [0, 1], clamped. Errors: MissingCalibration.
double normalize_score(double raw, Channel channel, const Calibration& calibration);

/// Convex combination. Errors: BadWeights (negative, not summing to 1, or a channel without a score).
double fuse_matchers(const std::map<Channel, double>& normalized, const std::map<Channel, double>& weights);

/// Mean of the available thumbs. Errors: NoScores.
double fuse_fingers(std::optional<double> left, std::optional<double> right);

struct MatchScore {
  std::map<Channel, double> per_matcher_raw;         // mean over compared thumbs
  std::map<Channel, double> per_matcher_normalized;  // mean over compared thumbs
  std::map<Finger, double> per_finger;
  double fused = 0;
  std::optional<bool> decision;
  std::optional<double> threshold_far;
  std::optional<double> threshold;

  bool operator==(const MatchScore&) const = default;
};

nlohmann::json to_json(const MatchScore& s);

/// Per-thumb impression-level scores on `channels`, for the thumbs both templates hold.
std::map<Finger, std::map<Channel, double>> raw_scores(const SubjectTemplate& enroll, const SubjectTemplate& probe,
                                                      std::span<const Channel> channels);

/// Matcher-level then thumb-level fusion of per-thumb raw scores. Channels without weight are
/// reported but not fused. Errors: NoScores, BadWeights, MissingCalibration.
MatchScore fuse_raw(const std::map<Finger, std::map<Channel, double>>& raw, const Calibration& calibration);

/// Impression-, thumb- and matcher-level fusion over the thumbs both templates hold.
MatchScore score_subjects(const SubjectTemplate& enroll, const SubjectTemplate& probe, const Calibration& calibration);

/// Template bundle: JSON manifest with per-impression embedding and minutiae.
nlohmann::json to_json(const SubjectTemplate& t);
SubjectTemplate template_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CaptureMeta& m);
CaptureMeta meta_from_json(const nlohmann::json& j);

}  // namespace ipx::fusion
