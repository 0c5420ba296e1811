#pragma once

// Fusion by enumeration: every impression pair listed explicitly, then the three averaging levels
// written out from their definitions.

#include <algorithm>
#include <vector>

#include "ipx/fusion.hpp"

namespace ipx::test {

inline double oracle_impression_mean(const fusion::Template& enroll, const fusion::Template& probe,
                                     fusion::Channel channel) {
  std::vector<double> pairs;
  for (std::size_t i = 0; i < enroll.impressions.size(); ++i) {
    for (std::size_t j = 0; j < probe.impressions.size(); ++j) {
      pairs.push_back(fusion::pair_score(enroll.impressions[i], probe.impressions[j], channel));
    }
  }
  double sum = 0;
  for (double s : pairs) sum += s;
  return sum / static_cast<double>(pairs.size());
}

inline double oracle_normalize(double raw, const fusion::Range& r) {
  return std::clamp((raw - r.min) / (r.max - r.min), 0.0, 1.0);
}

inline fusion::MatchScore oracle_subject_score(const fusion::SubjectTemplate& enroll,
                                               const fusion::SubjectTemplate& probe,
                                               const fusion::Calibration& cal) {
  fusion::MatchScore out;
  std::vector<double> thumbs;
  for (Finger f : {Finger::LeftThumb, Finger::RightThumb}) {
    if (!enroll.finger(f) || !probe.finger(f)) continue;
    double fused = 0;
    for (const auto& [ch, w] : cal.weights) {
      const double raw = oracle_impression_mean(*enroll.finger(f), *probe.finger(f), ch);
      const double norm = oracle_normalize(raw, cal.ranges.at(ch));
      out.per_matcher_raw[ch] += raw;
      out.per_matcher_normalized[ch] += norm;
      if (w != 0) fused += w * norm;
    }
    fused = std::clamp(fused, 0.0, 1.0);
    out.per_finger[f] = fused;
    thumbs.push_back(fused);
  }
  for (auto& [ch, v] : out.per_matcher_raw) v /= static_cast<double>(thumbs.size());
  for (auto& [ch, v] : out.per_matcher_normalized) v /= static_cast<double>(thumbs.size());
  out.fused = thumbs.size() == 2 ? (thumbs[0] + thumbs[1]) / 2.0 : thumbs.at(0);
  return out;
}

}  // namespace ipx::test
