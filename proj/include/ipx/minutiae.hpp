#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ipx/imgproc.hpp"

namespace ipx::minutiae {

/// Reference resolution at which templates are compared.
inline constexpr int kReferencePpi = 500;

enum class MinutiaKind { Ending, Bifurcation };

std::string_view to_string(MinutiaKind kind);

/// Ridge ending or bifurcation. `direction` is in [0, 2pi), image axes (y down).
/// Endings point out of the ridge toward the gap; bifurcations point into the fork.
struct Minutia {
  double x = 0;
  double y = 0;
  double direction = 0;
  MinutiaKind kind = MinutiaKind::Ending;
  double quality = 0;

  bool operator==(const Minutia&) const = default;
};

struct MinutiaSet {
  std::vector<Minutia> minutiae;
  int source_ppi = kReferencePpi;
  int width = 0;
  int height = 0;

  std::size_t size() const noexcept { return minutiae.size(); }
  bool operator==(const MinutiaSet&) const = default;
};

/// Raw crossing-number detection: CN=1 is an ending, CN=3 a bifurcation.
struct Candidate {
  int x = 0;
  int y = 0;
  MinutiaKind kind = MinutiaKind::Ending;

  bool operator==(const Candidate&) const = default;
};
std::vector<Candidate> detect_candidates(const imgproc::Skeleton& skel);

struct ExtractOptions {
  /// Distances below are at 500 ppi and scale with the skeleton resolution.
  double border_margin = 8.0;
  double duplicate_radius = 4.0;
  /// Also treat the outline of the ridge area itself (closing of the skeleton)
  /// as border, so endings where the print fades out are dropped.
  bool ridge_area_border = false;
};

MinutiaSet extract_minutiae(const imgproc::Skeleton& skel, const imgproc::RidgeAnalysis& analysis,
                            const ExtractOptions& options = {});

/// Rescales coordinates to `ppi` (default: the reference resolution).
MinutiaSet rescale(const MinutiaSet& set, int ppi = kReferencePpi);

struct MatchOptions {
  double distance_tolerance = 12.0;  // px at 500 ppi
  double direction_tolerance = 0.3490658503988659;  // 20 degrees
  int max_hypotheses = 16;
  int random_hypotheses = 4;
  std::uint64_t seed = 0x1F2E3D4C5B6A7988ULL;
};

struct MatchResult {
  double score = 0.0;    // [0, 1]
  int matched = 0;
  bool empty_set = false;  // either side had fewer than two minutiae
  std::vector<std::pair<int, int>> pairs;  // indices into the (rescaled) inputs
};

/// Pairing score after the best rigid alignment. Symmetric in its arguments.
MatchResult match_minutiae(const MinutiaSet& a, const MinutiaSet& b, const MatchOptions& options = {});

struct NeighborFeature {
  double distance;
  double bearing;   // position angle relative to the minutia direction
  double relative;  // neighbour direction relative to the minutia direction
};

/// A set at the reference resolution with its neighbourhoods, for repeated matching.
struct PreparedSet {
  std::vector<Minutia> minutiae;
  std::vector<std::vector<NeighborFeature>> neighbors;
};

PreparedSet prepare(const MinutiaSet& set);

/// Same result as match_minutiae on the sets the operands were prepared from.
MatchResult match_prepared(const PreparedSet& a, const PreparedSet& b, const MatchOptions& options = {});

/// Text template: "# ppi=P width=W height=H" then one "x y direction_deg kind quality" per line.
std::string to_text(const MinutiaSet& set);
MinutiaSet parse_text(std::string_view text);

nlohmann::json to_json(const MinutiaSet& set);
MinutiaSet from_json(const nlohmann::json& j);

}  // namespace ipx::minutiae
