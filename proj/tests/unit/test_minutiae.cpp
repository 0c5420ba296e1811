#include <doctest.h>

#include <algorithm>
#include <random>

#include "ipx/error.hpp"
#include "ipx/minutiae.hpp"
#include "skeleton_oracle.hpp"
#include "test_support.hpp"

using namespace ipx;
using namespace ipx::imgproc;
using namespace ipx::minutiae;
using namespace ipx::test;

namespace {

// Full-foreground analysis with a uniform period, as at 500 ppi.
RidgeAnalysis flat_analysis(int w, int h, double period = 9.0) {
  RidgeAnalysis a;
  a.block_size = 16;
  int c = (w + 15) / 16, r = (h + 15) / 16;
  a.mask = Grid<std::uint8_t>(c, r, 1);
  a.orientation = Grid<double>(c, r, 0.0);
  a.frequency = Grid<double>(c, r, 1.0 / period);
  a.coherence = Grid<double>(c, r, 0.9);
  return a;
}

MinutiaSet random_set(std::mt19937_64& rng, int n, double extent) {
  std::uniform_real_distribution<double> pos(0, extent);
  std::uniform_real_distribution<double> dir(0, 2 * kPi);
  MinutiaSet s;
  s.width = s.height = static_cast<int>(extent);
  for (int i = 0; i < n; ++i) {
    s.minutiae.push_back({pos(rng), pos(rng), dir(rng), i % 3 == 0 ? MinutiaKind::Bifurcation : MinutiaKind::Ending, 0.8});
  }
  return s;
}

MinutiaSet transformed(const MinutiaSet& s, double angle, double tx, double ty) {
  MinutiaSet out = s;
  double c = std::cos(angle), sn = std::sin(angle);
  double cx = s.width / 2.0, cy = s.height / 2.0;
  for (auto& m : out.minutiae) {
    double x = m.x - cx, y = m.y - cy;
    m.x = c * x - sn * y + cx + tx;
    m.y = sn * x + c * y + cy + ty;
    m.direction = std::fmod(m.direction + angle + 2 * kPi, 2 * kPi);
  }
  return out;
}

}  // namespace

TEST_CASE("crossing-number candidates agree with brute force on random skeletons") {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    auto skel = random_skeleton(rng);
    auto got = detect_candidates(skel);
    std::vector<Candidate> want;
    for (int y = 0; y < skel.height; ++y) {
      for (int x = 0; x < skel.width; ++x) {
        if (!skel.pixels.at(x, y)) continue;
        int cn = oracle_cn(skel, x, y);
        if (cn == 1) want.push_back({x, y, MinutiaKind::Ending});
        if (cn == 3) want.push_back({x, y, MinutiaKind::Bifurcation});
      }
    }
    REQUIRE(got == want);
  }
}

TEST_CASE("straight segment gives two antiparallel endings") {
  auto skel = blank(100, 100);
  draw_line(skel, 35, 50, 64, 50);
  auto set = extract_minutiae(skel, flat_analysis(100, 100), {});
  REQUIRE(set.size() == 2);
  for (const auto& m : set.minutiae) CHECK(m.kind == MinutiaKind::Ending);
  double d = std::abs(set.minutiae[0].direction - set.minutiae[1].direction);
  CHECK(std::abs(deg(d) - 180.0) < 10.0);
  // The left end points left, the right end points right.
  const auto& left = set.minutiae[0].x < set.minutiae[1].x ? set.minutiae[0] : set.minutiae[1];
  CHECK(std::cos(left.direction) < -0.98);

  auto diagonal = blank(100, 100);
  draw_line(diagonal, 30, 30, 55, 55);
  auto dset = extract_minutiae(diagonal, flat_analysis(100, 100), {});
  REQUIRE(dset.size() == 2);
  double dd = std::abs(dset.minutiae[0].direction - dset.minutiae[1].direction);
  CHECK(std::abs(deg(dd) - 180.0) < 10.0);
}

TEST_CASE("Y shape gives one bifurcation and three endings before pruning") {
  auto skel = blank(100, 100);
  draw_line(skel, 50, 50, 50, 85);
  draw_line(skel, 49, 49, 30, 30);
  draw_line(skel, 51, 49, 70, 30);
  auto cands = detect_candidates(skel);
  int endings = 0, bifurcations = 0;
  for (const auto& c : cands) (c.kind == MinutiaKind::Ending ? endings : bifurcations)++;
  CHECK(endings == 3);
  CHECK(bifurcations == 1);

  auto set = extract_minutiae(skel, flat_analysis(100, 100), {});
  auto fork = std::find_if(set.minutiae.begin(), set.minutiae.end(),
                           [](const Minutia& m) { return m.kind == MinutiaKind::Bifurcation; });
  REQUIRE(fork != set.minutiae.end());
  // The fork opens upward (negative y).
  CHECK(std::abs(deg(fork->direction) - 270.0) < 15.0);
}

TEST_CASE("empty skeleton gives an empty set") {
  CHECK(extract_minutiae(blank(64, 64), flat_analysis(64, 64)).size() == 0);
  CHECK(detect_candidates(blank(0, 0)).empty());
}

TEST_CASE("border and facing endings are pruned") {
  // Segment touching the image edge: its edge ending is dropped.
  auto edge = blank(100, 100);
  draw_line(edge, 0, 50, 40, 50);
  auto set = extract_minutiae(edge, flat_analysis(100, 100));
  REQUIRE(set.size() == 1);
  CHECK(set.minutiae[0].x == doctest::Approx(40));

  // A ridge broken by a gap shorter than one period.
  auto broken = blank(120, 100);
  draw_line(broken, 20, 50, 56, 50);
  draw_line(broken, 62, 50, 100, 50);
  auto bset = extract_minutiae(broken, flat_analysis(120, 100));
  for (const auto& m : bset.minutiae) CHECK((m.x < 30 || m.x > 90));

  // Short spur off a long ridge.
  auto spur = blank(120, 100);
  draw_line(spur, 20, 50, 100, 50);
  draw_line(spur, 60, 49, 60, 46);
  auto sset = extract_minutiae(spur, flat_analysis(120, 100));
  for (const auto& m : sset.minutiae) CHECK(std::abs(m.x - 60) > 5);
}

TEST_CASE("extracted sets satisfy the type invariants") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto skel = random_skeleton(rng);
    auto set = extract_minutiae(skel, flat_analysis(120, 120));
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto& m = set.minutiae[i];
      CHECK(m.direction >= 0);
      CHECK(m.direction < 2 * kPi);
      CHECK(m.x >= 0);
      CHECK(m.x < 120);
      for (std::size_t j = i + 1; j < set.size(); ++j) {
        CHECK(std::hypot(m.x - set.minutiae[j].x, m.y - set.minutiae[j].y) >= 4.0);
      }
    }
  }
}

TEST_CASE("resolution scales pruning distances") {
  auto skel = blank(400, 400);
  draw_line(skel, 100, 200, 300, 200);
  skel.ppi = 1900;
  auto a = flat_analysis(400, 400, 34.0);
  a.block_size = 61;
  a.mask = Grid<std::uint8_t>(7, 7, 1);
  a.frequency = Grid<double>(7, 7, 1.0 / 34);
  a.coherence = Grid<double>(7, 7, 0.9);
  a.orientation = Grid<double>(7, 7, 0.0);
  auto set = extract_minutiae(skel, a);
  CHECK(set.source_ppi == 1900);
  CHECK(set.size() == 2);
  auto r = rescale(set);
  CHECK(r.source_ppi == 500);
  CHECK(r.minutiae[0].x == doctest::Approx(set.minutiae[0].x * 500.0 / 1900.0));
  CHECK_THROWS_AS(rescale(set, 0), Error);
}

TEST_CASE("self-match scores at least 0.99") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_set(rng, 10 + trial, 300);
    auto r = match_minutiae(a, a);
    CHECK(r.score >= 0.99);
    CHECK_FALSE(r.empty_set);
  }
}

TEST_CASE("rigid motion barely changes the score") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_set(rng, 25, 300);
    double self = match_minutiae(a, a).score;
    auto b = transformed(a, rad(10), 10, 5);
    CHECK(std::abs(match_minutiae(a, b).score - self) <= 0.05);
  }
  std::uniform_real_distribution<double> shift(-30, 30);
  std::uniform_real_distribution<double> turn(-30, 30);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_set(rng, 20, 300);
    double self = match_minutiae(a, a).score;
    auto b = transformed(a, rad(turn(rng)), shift(rng), shift(rng));
    CHECK(std::abs(match_minutiae(a, b).score - self) <= 0.05);
  }
}

TEST_CASE("translated and rotated copy agrees with an exhaustive alignment grid") {
  std::mt19937_64 rng(23);
  auto a = random_set(rng, 12, 200);
  auto b = transformed(a, rad(10), 10, 5);
  // Exhaustive search over a 1 px / 1 degree grid around the true motion.
  int best = 0;
  MatchOptions opt;
  for (int t = 5; t <= 15; ++t) {
    for (int dx = -5; dx <= 5; ++dx) {
      for (int dy = -5; dy <= 5; ++dy) {
        auto moved = transformed(a, rad(t), 10 + dx, 5 + dy);
        int count = 0;
        std::vector<char> used(b.size(), 0);
        for (const auto& m : moved.minutiae) {
          for (std::size_t j = 0; j < b.size(); ++j) {
            double dd = std::fmod(std::abs(m.direction - b.minutiae[j].direction), 2 * kPi);
            dd = std::min(dd, 2 * kPi - dd);
            if (!used[j] && std::hypot(m.x - b.minutiae[j].x, m.y - b.minutiae[j].y) <= opt.distance_tolerance &&
                dd <= opt.direction_tolerance) {
              used[j] = 1;
              ++count;
              break;
            }
          }
        }
        best = std::max(best, count);
      }
    }
  }
  double oracle = static_cast<double>(best) / 12.0;
  CHECK(std::abs(match_minutiae(a, b).score - oracle) <= 0.05);
}

TEST_CASE("independent random sets rarely score above 0.2") {
  std::mt19937_64 rng(2024);
  int low = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto a = random_set(rng, 30, 500);
    auto b = random_set(rng, 30, 500);
    low += match_minutiae(a, b).score <= 0.2 ? 1 : 0;
  }
  CHECK(low >= 950);
}

TEST_CASE("matching is symmetric, bounded and deterministic") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> n(0, 40);
  for (int trial = 0; trial < 200; ++trial) {
    auto a = random_set(rng, n(rng), 300);
    auto b = trial % 2 ? random_set(rng, n(rng), 300) : transformed(a, 0.2, 4, -3);
    auto ab = match_minutiae(a, b);
    auto ba = match_minutiae(b, a);
    CHECK(ab.score == ba.score);
    CHECK(ab.matched == ba.matched);
    CHECK(ab.score >= 0.0);
    CHECK(ab.score <= 1.0);
    CHECK(match_minutiae(a, b).score == ab.score);
  }
}

TEST_CASE("fewer than two minutiae flags an empty set") {
  std::mt19937_64 rng(1);
  auto a = random_set(rng, 1, 100);
  auto b = random_set(rng, 20, 100);
  auto r = match_minutiae(a, b);
  CHECK(r.empty_set);
  CHECK(r.score == 0.0);
  CHECK(match_minutiae(MinutiaSet{}, MinutiaSet{}).empty_set);
}

TEST_CASE("template text and json round trip") {
  std::mt19937_64 rng(8);
  auto a = random_set(rng, 15, 400);
  a.source_ppi = 1900;
  auto text = parse_text(to_text(a));
  CHECK(text.source_ppi == 1900);
  CHECK(text.width == a.width);
  REQUIRE(text.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(text.minutiae[i].x == a.minutiae[i].x);
    CHECK(text.minutiae[i].kind == a.minutiae[i].kind);
    CHECK(text.minutiae[i].direction == doctest::Approx(a.minutiae[i].direction).epsilon(1e-12));
  }
  CHECK(from_json(to_json(a)) == a);
  CHECK_THROWS_AS(parse_text("# ppi=500\n1 2 three ending 1\n"), Error);
  CHECK_THROWS_AS(parse_text("1 2 3 loop 1\n"), Error);
  CHECK_THROWS_AS(from_json(nlohmann::json::object()), Error);
}
