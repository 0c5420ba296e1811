#include "ipx/minutiae.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "ipx/error.hpp"

namespace ipx::minutiae {

using imgproc::kNeighborDx;
using imgproc::kNeighborDy;
using imgproc::Skeleton;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2 * std::numbers::pi;

double wrap_two_pi(double a) {
  double t = std::fmod(a, kTwoPi);
  if (t < 0) t += kTwoPi;
  if (t >= kTwoPi) t -= kTwoPi;
  return t;
}

// Absolute angular difference in [0, pi].
double angle_diff(double a, double b) {
  double d = std::abs(a - b);
  if (d >= kTwoPi) d = std::fmod(d, kTwoPi);
  return d > kPi ? kTwoPi - d : d;
}


struct Trace {
  int end_x = 0;
  int end_y = 0;
  int steps = 0;
  enum class Stop { Length, LineEnd, Junction } stop = Stop::Length;
};

// Follows the skeleton from (x, y) for up to `length` steps, never revisiting
// the pixels in `blocked`.
Trace follow(const Skeleton& skel, int x, int y, int length, std::vector<std::pair<int, int>> blocked) {
  Trace t{x, y, 0, Trace::Stop::Length};
  auto is_blocked = [&](int px, int py) {
    return std::find(blocked.begin(), blocked.end(), std::make_pair(px, py)) != blocked.end();
  };
  blocked.emplace_back(x, y);
  int cx = x, cy = y;
  while (t.steps < length) {
    int next = -1;
    // Orthogonal moves first so staircases are followed pixel by pixel.
    for (int pass = 0; pass < 2 && next < 0; ++pass) {
      for (int k = pass; k < 8; k += 2) {
        int nx = cx + kNeighborDx[k], ny = cy + kNeighborDy[k];
        if (skel.at(nx, ny) && !is_blocked(nx, ny)) {
          next = k;
          break;
        }
      }
    }
    if (next < 0) {
      t.stop = Trace::Stop::LineEnd;
      break;
    }
    cx += kNeighborDx[next];
    cy += kNeighborDy[next];
    blocked.emplace_back(cx, cy);
    ++t.steps;
    t.end_x = cx;
    t.end_y = cy;
    if (imgproc::crossing_number(skel, cx, cy) >= 3) {
      t.stop = Trace::Stop::Junction;
      break;
    }
  }
  return t;
}

// First pixel of each run of set pixels around (x, y).
std::vector<std::pair<int, int>> branch_starts(const Skeleton& skel, int x, int y) {
  std::array<int, 8> v{};
  for (int k = 0; k < 8; ++k) v[k] = skel.at(x + kNeighborDx[k], y + kNeighborDy[k]) ? 1 : 0;
  std::vector<std::pair<int, int>> starts;
  for (int k = 0; k < 8; ++k) {
    if (v[k] && !v[(k + 7) % 8]) {
      // Prefer the orthogonal pixel of a run as its representative.
      int pick = k;
      for (int j = k; v[j % 8] && j < k + 8; ++j) {
        if ((j % 8) % 2 == 0) {
          pick = j % 8;
          break;
        }
      }
      starts.emplace_back(x + kNeighborDx[pick], y + kNeighborDy[pick]);
    }
  }
  return starts;
}

struct Working {
  Minutia m;
  Trace trace;  // for endings: the ridge behind the minutia
  bool removed = false;
};

double local_period(const imgproc::RidgeAnalysis& analysis, double x, double y, double fallback) {
  if (analysis.frequency.empty()) return fallback;
  int c = std::clamp(static_cast<int>(x / analysis.block_size), 0, analysis.frequency.cols() - 1);
  int r = std::clamp(static_cast<int>(y / analysis.block_size), 0, analysis.frequency.rows() - 1);
  double f = analysis.frequency.at(c, r);
  return f > 0 ? 1.0 / f : fallback;
}

// Two-pass chamfer distance to the nearest pixel where `source` is set.
Grid<float> distance_to(const Grid<std::uint8_t>& source, bool outside_is_source) {
  const int w = source.cols(), h = source.rows();
  constexpr float kInf = 1e9f;
  constexpr float kDiag = 1.41421356f;
  Grid<float> d(w, h, kInf);
  auto get = [&](int x, int y) -> float {
    if (x < 0 || y < 0 || x >= w || y >= h) return outside_is_source ? 0.0f : kInf;
    return d.at(x, y);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (source.at(x, y)) {
        d.at(x, y) = 0;
        continue;
      }
      float best = d.at(x, y);
      best = std::min({best, get(x - 1, y) + 1, get(x, y - 1) + 1, get(x - 1, y - 1) + kDiag, get(x + 1, y - 1) + kDiag});
      d.at(x, y) = best;
    }
  }
  for (int y = h - 1; y >= 0; --y) {
    for (int x = w - 1; x >= 0; --x) {
      float best = d.at(x, y);
      best = std::min({best, get(x + 1, y) + 1, get(x, y + 1) + 1, get(x + 1, y + 1) + kDiag, get(x - 1, y + 1) + kDiag});
      d.at(x, y) = best;
    }
  }
  return d;
}

// Distance from each pixel to the outside of the closed ridge area.
Grid<float> ridge_area_depth(const Skeleton& skel, double radius) {
  auto to_ridge = distance_to(skel.pixels, false);
  Grid<std::uint8_t> outside(skel.width, skel.height, 0);
  for (std::size_t i = 0; i < outside.size(); ++i) outside.values()[i] = to_ridge.values()[i] > radius ? 1 : 0;
  auto to_outside = distance_to(outside, true);
  Grid<std::uint8_t> closed_outside(skel.width, skel.height, 0);
  for (std::size_t i = 0; i < outside.size(); ++i) closed_outside.values()[i] = to_outside.values()[i] <= radius ? 1 : 0;
  return distance_to(closed_outside, true);
}

bool near_mask_border(const imgproc::RidgeAnalysis& analysis, int width, int height, double x, double y, double margin) {
  if (x < margin || y < margin || x > width - 1 - margin || y > height - 1 - margin) return true;
  const int bs = analysis.block_size;
  int c0 = static_cast<int>(std::floor((x - margin) / bs));
  int c1 = static_cast<int>(std::floor((x + margin) / bs));
  int r0 = static_cast<int>(std::floor((y - margin) / bs));
  int r1 = static_cast<int>(std::floor((y + margin) / bs));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      bool background = !analysis.mask.contains(c, r) || analysis.mask.at(c, r) == 0;
      if (!background) continue;
      double nx = std::clamp(x, static_cast<double>(c * bs), static_cast<double>((c + 1) * bs));
      double ny = std::clamp(y, static_cast<double>(r * bs), static_cast<double>((r + 1) * bs));
      if (std::hypot(nx - x, ny - y) <= margin) return true;
    }
  }
  return false;
}

}  // namespace

std::string_view to_string(MinutiaKind kind) { return kind == MinutiaKind::Ending ? "ending" : "bifurcation"; }

std::vector<Candidate> detect_candidates(const Skeleton& skel) {
  std::vector<Candidate> out;
  for (int y = 0; y < skel.height; ++y) {
    for (int x = 0; x < skel.width; ++x) {
      if (!skel.at(x, y)) continue;
      int cn = imgproc::crossing_number(skel, x, y);
      if (cn == 1) out.push_back({x, y, MinutiaKind::Ending});
      else if (cn == 3) out.push_back({x, y, MinutiaKind::Bifurcation});
    }
  }
  return out;
}

MinutiaSet extract_minutiae(const Skeleton& skel, const imgproc::RidgeAnalysis& analysis, const ExtractOptions& options) {
  MinutiaSet set;
  set.width = skel.width;
  set.height = skel.height;
  const int bs = analysis.block_size;
  // Without a recorded resolution, infer it from the block size (16 px at 500 ppi).
  set.source_ppi = skel.ppi > 0 ? skel.ppi : static_cast<int>(std::lround(kReferencePpi * (bs > 0 ? bs / 16.0 : 1.0)));
  const double scale = static_cast<double>(set.source_ppi) / kReferencePpi;
  const double fallback_period = 9.0 * scale;

  auto candidates = detect_candidates(skel);
  std::vector<Working> work;
  work.reserve(candidates.size());
  for (const auto& c : candidates) {
    double period = local_period(analysis, c.x, c.y, fallback_period);
    int length = std::max(4, static_cast<int>(std::lround(0.75 * period)));
    Working w;
    w.m.x = c.x;
    w.m.y = c.y;
    w.m.kind = c.kind;
    if (c.kind == MinutiaKind::Ending) {
      w.trace = follow(skel, c.x, c.y, length, {});
      w.m.direction = wrap_two_pi(std::atan2(c.y - w.trace.end_y, c.x - w.trace.end_x));
    } else {
      auto starts = branch_starts(skel, c.x, c.y);
      std::vector<double> angles;
      for (const auto& s : starts) {
        std::vector<std::pair<int, int>> blocked = starts;
        blocked.erase(std::find(blocked.begin(), blocked.end(), s));
        blocked.emplace_back(c.x, c.y);
        auto t = follow(skel, s.first, s.second, length - 1, blocked);
        angles.push_back(std::atan2(t.end_y - c.y, t.end_x - c.x));
      }
      // Bisector of the two branches that are closest in angle (the fork).
      double best = kTwoPi;
      double direction = 0;
      for (std::size_t i = 0; i < angles.size(); ++i) {
        for (std::size_t j = i + 1; j < angles.size(); ++j) {
          double d = angle_diff(angles[i], angles[j]);
          if (d < best) {
            best = d;
            direction = std::atan2(std::sin(angles[i]) + std::sin(angles[j]), std::cos(angles[i]) + std::cos(angles[j]));
          }
        }
      }
      w.m.direction = wrap_two_pi(direction);
    }
    int bc = std::clamp(c.x / std::max(bs, 1), 0, std::max(0, analysis.coherence.cols() - 1));
    int br = std::clamp(c.y / std::max(bs, 1), 0, std::max(0, analysis.coherence.rows() - 1));
    w.m.quality = analysis.coherence.empty() ? 1.0 : std::clamp(analysis.coherence.at(bc, br), 0.0, 1.0);
    work.push_back(w);
  }

  const double margin = options.border_margin * scale;
  Grid<float> depth;
  if (options.ridge_area_border && !work.empty()) depth = ridge_area_depth(skel, 1.25 * fallback_period);
  for (auto& w : work) {
    if (near_mask_border(analysis, skel.width, skel.height, w.m.x, w.m.y, margin)) w.removed = true;
    if (!depth.empty() && depth.at(static_cast<int>(w.m.x), static_cast<int>(w.m.y)) <= margin) w.removed = true;
  }

  // Broken ridges: two endings facing each other across a short gap.
  for (std::size_t i = 0; i < work.size(); ++i) {
    auto& a = work[i];
    if (a.m.kind != MinutiaKind::Ending) continue;
    double period = local_period(analysis, a.m.x, a.m.y, fallback_period);
    for (std::size_t j = i + 1; j < work.size(); ++j) {
      auto& b = work[j];
      if (b.m.kind != MinutiaKind::Ending) continue;
      double dist = std::hypot(b.m.x - a.m.x, b.m.y - a.m.y);
      if (dist >= period || dist == 0) continue;
      double ab = std::atan2(b.m.y - a.m.y, b.m.x - a.m.x);
      double ba = std::atan2(a.m.y - b.m.y, a.m.x - b.m.x);
      if (angle_diff(a.m.direction, ab) < kPi / 4 && angle_diff(b.m.direction, ba) < kPi / 4) {
        a.removed = true;
        b.removed = true;
      }
    }
  }
  // Spurs and short islands: an ending whose ridge stops within one period.
  for (auto& a : work) {
    if (a.m.kind != MinutiaKind::Ending) continue;
    if (a.trace.stop == Trace::Stop::Length) continue;
    a.removed = true;
    for (auto& b : work) {
      if (&b == &a) continue;
      if (std::hypot(b.m.x - a.trace.end_x, b.m.y - a.trace.end_y) <= 1.5) b.removed = true;
    }
  }

  // Duplicate suppression, best quality first.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (!work[i].removed) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return work[a].m.quality > work[b].m.quality; });
  const double dup = options.duplicate_radius * scale;
  std::vector<std::size_t> kept;
  for (auto i : order) {
    bool clash = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return std::hypot(work[k].m.x - work[i].m.x, work[k].m.y - work[i].m.y) < dup;
    });
    if (!clash) kept.push_back(i);
  }
  std::sort(kept.begin(), kept.end());
  for (auto i : kept) set.minutiae.push_back(work[i].m);
  return set;
}

MinutiaSet rescale(const MinutiaSet& set, int ppi) {
  if (ppi <= 0 || set.source_ppi <= 0) throw Error(ErrorCode::InvalidArgument, "ppi must be positive");
  if (ppi == set.source_ppi) return set;
  const double s = static_cast<double>(ppi) / set.source_ppi;
  MinutiaSet out = set;
  out.source_ppi = ppi;
  out.width = static_cast<int>(std::lround(set.width * s));
  out.height = static_cast<int>(std::lround(set.height * s));
  for (auto& m : out.minutiae) {
    m.x *= s;
    m.y *= s;
  }
  return out;
}

namespace {

using Neighbor = NeighborFeature;

constexpr std::size_t kNeighbors = 6;

std::vector<std::vector<Neighbor>> neighborhoods(const std::vector<Minutia>& ms) {
  constexpr double kRadius = 70.0;
  std::vector<std::vector<Neighbor>> out(ms.size());
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    dist.clear();
    for (std::size_t j = 0; j < ms.size(); ++j) {
      if (i == j) continue;
      double d = std::hypot(ms[j].x - ms[i].x, ms[j].y - ms[i].y);
      if (d <= kRadius) dist.emplace_back(d, j);
    }
    std::sort(dist.begin(), dist.end());
    if (dist.size() > kNeighbors) dist.resize(kNeighbors);
    for (auto [d, j] : dist) {
      double pos = std::atan2(ms[j].y - ms[i].y, ms[j].x - ms[i].x);
      out[i].push_back({d, wrap_two_pi(pos - ms[i].direction), wrap_two_pi(ms[j].direction - ms[i].direction)});
    }
  }
  return out;
}

double neighborhood_similarity(const std::vector<Neighbor>& a, const std::vector<Neighbor>& b) {
  constexpr double kAngleTol = 0.35;
  std::array<char, kNeighbors> used{};
  std::size_t lo = 0;
  double score = 0;
  for (const auto& na : a) {
    int best = -1;
    double best_cost = std::numeric_limits<double>::max();
    // Both lists are sorted by distance and the lower bound grows with it.
    const double tol = std::max(3.0, 0.15 * na.distance);
    while (lo < b.size() && b[lo].distance < na.distance - tol) ++lo;
    for (std::size_t j = lo; j < b.size(); ++j) {
      const auto& nb = b[j];
      if (nb.distance > na.distance + tol) break;
      if (used[j]) continue;
      double dd = std::abs(na.distance - nb.distance);
      double da = angle_diff(na.bearing, nb.bearing);
      double dr = angle_diff(na.relative, nb.relative);
      if (da > kAngleTol || dr > kAngleTol) continue;
      double cost = dd / 10.0 + da + dr;
      if (cost < best_cost) {
        best_cost = cost;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) {
      used[best] = 1;
      score += 1.0;
    }
  }
  return score;
}

struct Transform {
  double angle = 0;
  double tx = 0;
  double ty = 0;
};

struct Pairing {
  int count = 0;
  double distance_sum = 0;
  std::vector<std::pair<int, int>> pairs;
};

// Buckets of `b` on a square lattice with the pairing tolerance as cell size.
struct PointIndex {
  double x0 = 0, y0 = 0, cell = 1;
  int cols = 0, rows = 0;
  std::vector<int> start;
  std::vector<int> members;

  PointIndex(const std::vector<Minutia>& pts, double cell_size) : cell(cell_size) {
    double x1 = 0, y1 = 0;
    x0 = y0 = std::numeric_limits<double>::max();
    x1 = y1 = std::numeric_limits<double>::lowest();
    for (const auto& m : pts) {
      x0 = std::min(x0, m.x);
      y0 = std::min(y0, m.y);
      x1 = std::max(x1, m.x);
      y1 = std::max(y1, m.y);
    }
    cols = static_cast<int>((x1 - x0) / cell) + 1;
    rows = static_cast<int>((y1 - y0) / cell) + 1;
    std::vector<int> count(static_cast<std::size_t>(cols) * rows + 1, 0);
    for (const auto& m : pts) ++count[slot(m.x, m.y) + 1];
    for (std::size_t k = 1; k < count.size(); ++k) count[k] += count[k - 1];
    start = count;
    members.resize(pts.size());
    for (std::size_t j = 0; j < pts.size(); ++j) members[count[slot(pts[j].x, pts[j].y)]++] = static_cast<int>(j);
  }

  int slot(double x, double y) const {
    return static_cast<int>((y - y0) / cell) * cols + static_cast<int>((x - x0) / cell);
  }
};

struct Scratch {
  struct Cand {
    double d2;
    int i;
    int j;
  };
  std::vector<Cand> cands;
  std::vector<char> ua, ub;
};

Pairing pair_up(const std::vector<Minutia>& a, const std::vector<Minutia>& b, const PointIndex& index,
                const Transform& t, const MatchOptions& opt, Scratch& scratch) {
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  const double tol2 = opt.distance_tolerance * opt.distance_tolerance;
  auto& cands = scratch.cands;
  cands.clear();
  for (std::size_t i = 0; i < a.size(); ++i) {
    double x = c * a[i].x - s * a[i].y + t.tx;
    double y = s * a[i].x + c * a[i].y + t.ty;
    double dir = a[i].direction + t.angle;
    int cx = static_cast<int>(std::floor((x - index.x0) / index.cell));
    int cy = static_cast<int>(std::floor((y - index.y0) / index.cell));
    for (int gy = std::max(0, cy - 1); gy <= std::min(index.rows - 1, cy + 1); ++gy) {
      for (int gx = std::max(0, cx - 1); gx <= std::min(index.cols - 1, cx + 1); ++gx) {
        const int k = gy * index.cols + gx;
        for (int m = index.start[k]; m < index.start[k + 1]; ++m) {
          const int j = index.members[m];
          double dx = b[j].x - x, dy = b[j].y - y;
          double d2 = dx * dx + dy * dy;
          if (d2 > tol2) continue;
          if (angle_diff(dir, b[j].direction) > opt.direction_tolerance) continue;
          cands.push_back({d2, static_cast<int>(i), j});
        }
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Scratch::Cand& p, const Scratch::Cand& q) {
    if (p.d2 != q.d2) return p.d2 < q.d2;
    if (p.i != q.i) return p.i < q.i;
    return p.j < q.j;
  });
  scratch.ua.assign(a.size(), 0);
  scratch.ub.assign(b.size(), 0);
  Pairing out;
  for (const auto& cd : cands) {
    if (scratch.ua[cd.i] || scratch.ub[cd.j]) continue;
    scratch.ua[cd.i] = scratch.ub[cd.j] = 1;
    ++out.count;
    out.distance_sum += std::sqrt(cd.d2);
    out.pairs.emplace_back(cd.i, cd.j);
  }
  return out;
}

// Least-squares rigid transform taking the paired points of `a` onto `b`.
Transform fit_rigid(const std::vector<Minutia>& a, const std::vector<Minutia>& b, const std::vector<std::pair<int, int>>& pairs) {
  double ax = 0, ay = 0, bx = 0, by = 0;
  for (auto [i, j] : pairs) {
    ax += a[i].x;
    ay += a[i].y;
    bx += b[j].x;
    by += b[j].y;
  }
  const double n = static_cast<double>(pairs.size());
  ax /= n;
  ay /= n;
  bx /= n;
  by /= n;
  double sxx = 0, sxy = 0;
  for (auto [i, j] : pairs) {
    double pax = a[i].x - ax, pay = a[i].y - ay;
    double pbx = b[j].x - bx, pby = b[j].y - by;
    sxx += pax * pbx + pay * pby;
    sxy += pax * pby - pay * pbx;
  }
  Transform t;
  t.angle = std::atan2(sxy, sxx);
  double c = std::cos(t.angle), s = std::sin(t.angle);
  t.tx = bx - (c * ax - s * ay);
  t.ty = by - (s * ax + c * ay);
  return t;
}

bool better(const Pairing& p, const Pairing& q) {
  if (p.count != q.count) return p.count > q.count;
  return p.distance_sum < q.distance_sum;
}

// Lexicographic order used to put the operands in a canonical order.
bool set_less(const std::vector<Minutia>& a, const std::vector<Minutia>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto ka = std::tie(a[i].x, a[i].y, a[i].direction);
    auto kb = std::tie(b[i].x, b[i].y, b[i].direction);
    if (ka != kb) return ka < kb;
    if (a[i].kind != b[i].kind) return a[i].kind < b[i].kind;
    if (a[i].quality != b[i].quality) return a[i].quality < b[i].quality;
  }
  return false;
}

}  // namespace

PreparedSet prepare(const MinutiaSet& set) {
  PreparedSet p;
  p.minutiae = rescale(set).minutiae;
  p.neighbors = neighborhoods(p.minutiae);
  return p;
}

MatchResult match_minutiae(const MinutiaSet& a, const MinutiaSet& b, const MatchOptions& opt) {
  return match_prepared(prepare(a), prepare(b), opt);
}

MatchResult match_prepared(const PreparedSet& a_in, const PreparedSet& b_in, const MatchOptions& opt) {
  MatchResult result;
  if (a_in.minutiae.size() < 2 || b_in.minutiae.size() < 2) {
    result.empty_set = true;
    return result;
  }
  const bool swapped = set_less(b_in.minutiae, a_in.minutiae);
  const auto& a = swapped ? b_in.minutiae : a_in.minutiae;
  const auto& b = swapped ? a_in.minutiae : b_in.minutiae;
  const auto& na = swapped ? b_in.neighbors : a_in.neighbors;
  const auto& nb = swapped ? a_in.neighbors : b_in.neighbors;
  struct Hyp {
    double sim;
    int i;
    int j;
  };
  std::vector<Hyp> hyps;
  hyps.reserve(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      hyps.push_back({neighborhood_similarity(na[i], nb[j]), static_cast<int>(i), static_cast<int>(j)});
    }
  }
  const std::size_t top = std::min<std::size_t>(hyps.size(), opt.max_hypotheses);
  std::partial_sort(hyps.begin(), hyps.begin() + top, hyps.end(), [](const Hyp& p, const Hyp& q) {
    if (p.sim != q.sim) return p.sim > q.sim;
    if (p.i != q.i) return p.i < q.i;
    return p.j < q.j;
  });
  std::vector<Hyp> chosen(hyps.begin(), hyps.begin() + top);
  if (hyps.size() > chosen.size() && opt.random_hypotheses > 0) {
    std::mt19937_64 rng(opt.seed);
    for (int k = 0; k < opt.random_hypotheses; ++k) {
      std::size_t pick = top + rng() % (hyps.size() - top);
      chosen.push_back(hyps[pick]);
    }
  }

  const PointIndex index(b, opt.distance_tolerance);
  Scratch scratch;
  Pairing best;
  for (const auto& h : chosen) {
    const auto& ma = a[h.i];
    const auto& mb = b[h.j];
    Transform t;
    t.angle = mb.direction - ma.direction;
    double c = std::cos(t.angle), s = std::sin(t.angle);
    t.tx = mb.x - (c * ma.x - s * ma.y);
    t.ty = mb.y - (s * ma.x + c * ma.y);
    auto p = pair_up(a, b, index, t, opt, scratch);
    if (p.count >= 2) {
      auto refined = pair_up(a, b, index, fit_rigid(a, b, p.pairs), opt, scratch);
      if (better(refined, p)) p = std::move(refined);
    }
    if (better(p, best)) best = std::move(p);
  }

  result.matched = best.count;
  result.score = std::clamp(static_cast<double>(best.count) / static_cast<double>(std::min(a.size(), b.size())), 0.0, 1.0);
  for (auto [i, j] : best.pairs) result.pairs.emplace_back(swapped ? j : i, swapped ? i : j);
  std::sort(result.pairs.begin(), result.pairs.end());
  return result;
}

std::string to_text(const MinutiaSet& set) {
  std::ostringstream out;
  out << "# ppi=" << set.source_ppi << " width=" << set.width << " height=" << set.height << "\n";
  out << std::setprecision(17);
  for (const auto& m : set.minutiae) {
    out << m.x << ' ' << m.y << ' ' << m.direction * 180.0 / kPi << ' ' << to_string(m.kind) << ' ' << m.quality << '\n';
  }
  return out.str();
}

MinutiaSet parse_text(std::string_view text) {
  MinutiaSet set;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream header(line.substr(1));
      std::string token;
      while (header >> token) {
        auto eq = token.find('=');
        if (eq == std::string::npos) continue;
        auto key = token.substr(0, eq);
        int value = std::atoi(token.c_str() + eq + 1);
        if (key == "ppi") set.source_ppi = value;
        else if (key == "width") set.width = value;
        else if (key == "height") set.height = value;
      }
      continue;
    }
    std::istringstream fields(line);
    Minutia m;
    double degrees = 0;
    std::string kind;
    if (!(fields >> m.x >> m.y >> degrees >> kind >> m.quality)) {
      throw Error(ErrorCode::CorruptData, "malformed minutia on line " + std::to_string(line_no));
    }
    if (kind == "ending" || kind == "E") m.kind = MinutiaKind::Ending;
    else if (kind == "bifurcation" || kind == "B") m.kind = MinutiaKind::Bifurcation;
    else throw Error(ErrorCode::CorruptData, "unknown minutia kind '" + kind + "'");
    m.direction = wrap_two_pi(degrees * kPi / 180.0);
    set.minutiae.push_back(m);
  }
  if (set.source_ppi <= 0) throw Error(ErrorCode::CorruptData, "template ppi must be positive");
  return set;
}

nlohmann::json to_json(const MinutiaSet& set) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& m : set.minutiae) {
    list.push_back({{"x", m.x}, {"y", m.y}, {"direction", m.direction}, {"kind", to_string(m.kind)}, {"quality", m.quality}});
  }
  return {{"ppi", set.source_ppi}, {"width", set.width}, {"height", set.height}, {"minutiae", list}};
}

MinutiaSet from_json(const nlohmann::json& j) {
  try {
    MinutiaSet set;
    set.source_ppi = j.at("ppi").get<int>();
    set.width = j.at("width").get<int>();
    set.height = j.at("height").get<int>();
    for (const auto& e : j.at("minutiae")) {
      Minutia m;
      m.x = e.at("x").get<double>();
      m.y = e.at("y").get<double>();
      m.direction = e.at("direction").get<double>();
      m.kind = e.at("kind").get<std::string>() == "bifurcation" ? MinutiaKind::Bifurcation : MinutiaKind::Ending;
      m.quality = e.at("quality").get<double>();
      set.minutiae.push_back(m);
    }
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("minutiae json: ") + e.what());
  }
}

}  // namespace ipx::minutiae
