#pragma once

#include <limits>
#include <map>
#include <string>

#include <json.hpp>

namespace ipx {

/// Threshold for FAR 0 and for requests no score can satisfy: nothing reaches it.
inline constexpr double kMaxScore = std::numeric_limits<double>::max();

/// FAR -> fused-score threshold, exported by the evaluation harness and consumed by verification.
struct ThresholdTable {
  std::string stack = "fused";
  std::map<double, double> thresholds;
  std::string provenance;  // hash of the generating configuration

  /// Exact FAR entry, else the largest tabulated FAR below the request (never looser than asked).
  /// Errors: InvalidArgument when far is outside [0, 1] or below every entry; MissingThresholdTable when empty.
  double threshold_for(double far) const;

  bool operator==(const ThresholdTable&) const = default;
};

nlohmann::json to_json(const ThresholdTable& t);
ThresholdTable threshold_table_from_json(const nlohmann::json& j);
ThresholdTable load_threshold_table(const std::string& path);

}  // namespace ipx
