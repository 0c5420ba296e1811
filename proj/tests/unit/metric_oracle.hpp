#pragma once

// Brute-force metric definitions, O(n^2), sharing nothing with the library's sweep.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ipx/evalharness.hpp"

namespace ipx::test {

inline double oracle_threshold(const std::vector<double>& gen, const std::vector<double>& imp, double far) {
  std::vector<double> candidates = gen;
  candidates.insert(candidates.end(), imp.begin(), imp.end());
  candidates.push_back(kMaxScore);
  double best = kMaxScore;
  for (double t : candidates) {
    std::size_t above = 0;
    for (double s : imp) above += s >= t;
    if (static_cast<double>(above) <= far * static_cast<double>(imp.size())) best = std::min(best, t);
  }
  return best;
}

inline double oracle_tar(const std::vector<double>& gen, const std::vector<double>& imp, double far) {
  const double t = oracle_threshold(gen, imp, far);
  std::size_t hits = 0;
  for (double s : gen) hits += s >= t;
  return static_cast<double>(hits) / static_cast<double>(gen.size());
}

inline std::vector<eval::DetPoint> oracle_det(const std::vector<double>& gen, const std::vector<double>& imp) {
  std::vector<double> ts = gen;
  ts.insert(ts.end(), imp.begin(), imp.end());
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  std::vector<eval::DetPoint> out;
  for (double t : ts) {
    std::size_t fa = 0, fr = 0;
    for (double s : imp) fa += s >= t;
    for (double s : gen) fr += s < t;
    out.push_back({t, static_cast<double>(fa) / static_cast<double>(imp.size()),
                   static_cast<double>(fr) / static_cast<double>(gen.size())});
  }
  return out;
}

/// Scores in [0, 1]; `grid` > 0 quantizes them so ties are common.
template <class Rng>
std::vector<double> random_scores(Rng& rng, std::size_t n, double mean, double sd, int grid) {
  std::normal_distribution<double> d(mean, sd);
  std::vector<double> out(n);
  for (auto& s : out) {
    s = std::clamp(d(rng), 0.0, 1.0);
    if (grid > 0) s = std::round(s * grid) / grid;
  }
  return out;
}

}  // namespace ipx::test
