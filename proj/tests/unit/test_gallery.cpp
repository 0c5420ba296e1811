#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "gallery_fixtures.hpp"
#include "ipx/error.hpp"
#include "ipx/gallery.hpp"

using namespace ipx;
using namespace ipx::gallery;
using namespace ipx::test;

namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an ipx::Error");
  return ErrorCode::InvalidArgument;
}

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() / ("ipx_gallery_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

GalleryConfig test_config() {
  GalleryConfig c;
  c.thresholds = test_thresholds();
  return c;
}

struct Population {
  std::vector<FakeSubject> subjects;
  Gallery gallery{test_config()};
};

Population populate(std::mt19937_64& rng, int n, int impressions = 2) {
  Population p;
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "S%04d", i);
    p.subjects.push_back(fake_subject(rng, id));
    p.gallery.enroll(fake_record(p.subjects.back(), rng, impressions), {.dedup = false});
  }
  return p;
}

CandidateList brute_force(const Gallery& g, const fusion::SubjectTemplate& probe) {
  CandidateList out;
  for (const auto& r : g.records()) {
    auto s = fusion::score_subjects(r->templ, probe, g.config().calibration);
    out.push_back({r->subject_id, s.fused, s});
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    return a.score != b.score ? a.score > b.score : a.subject_id < b.subject_id;
  });
  return out;
}

bool same_ranking(const CandidateList& a, const CandidateList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].subject_id != b[i].subject_id || a[i].score != b[i].score || !(a[i].breakdown == b[i].breakdown)) {
      return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("dates and metadata validate and round trip") {
  CHECK(format_date(parse_date("2024-02-29")) == "2024-02-29");
  for (const char* bad : {"2023-02-29", "2024-13-01", "24-01-01", "2024-01-01x", ""}) {
    CHECK(code_of([&] { parse_date(bad); }) == ErrorCode::InvalidArgument);
  }
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    SubjectMeta m = random_meta(rng, "baby " + std::to_string(i));
    CHECK(subject_meta_from_json(nlohmann::json::parse(to_json(m).dump())) == m);
  }

  SubjectMeta m = random_meta(rng, "x");
  m.vaccination_records = {{"BCG", 0, m.date_of_birth}};
  CHECK(code_of([&] { m.validate(); }) == ErrorCode::InvalidArgument);
  using namespace std::chrono;
  m.vaccination_records = {{"BCG", 1, year_month_day{sys_days{m.date_of_birth} - days{1}}}};
  CHECK(code_of([&] { m.validate(); }) == ErrorCode::InvalidArgument);
  m.vaccination_records = {{"BCG", 1, m.date_of_birth}};
  CHECK_NOTHROW(m.validate());
  CHECK(code_of([] { subject_meta_from_json({{"display_name", "x"}}); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { subject_meta_from_json({{"date_of_birth", "2024-01-01"}, {"sex", "unknown"}}); }) ==
        ErrorCode::InvalidArgument);
}

TEST_CASE("enroll basics") {
  std::mt19937_64 rng(11);
  Gallery g(test_config());
  auto a = fake_subject(rng, "A");
  auto r = g.enroll(fake_record(a, rng), {.dedup = false});
  CHECK(r.gallery_size == 1);
  CHECK(g.size() == 1);
  CHECK(g.contains("A"));
  CHECK(g.record("A")->metadata.display_name == "A");
  CHECK(g.record("missing") == nullptr);

  CHECK(code_of([&] { g.enroll(fake_record(a, rng), {.dedup = false}); }) == ErrorCode::DuplicateId);

  GalleryRecord empty{"E", {}, random_meta(rng, "E"), 0};
  CHECK(code_of([&] { g.enroll(empty, {.dedup = false}); }) == ErrorCode::NoCaptures);
  GalleryRecord blank = fake_record(a, rng);
  blank.subject_id = "";
  CHECK(code_of([&] { g.enroll(blank, {.dedup = false}); }) == ErrorCode::InvalidArgument);
  GalleryRecord bad = fake_record(fake_subject(rng, "B"), rng);
  bad.metadata.vaccination_records = {{"BCG", -1, bad.metadata.date_of_birth}};
  CHECK(code_of([&] { g.enroll(bad, {.dedup = false}); }) == ErrorCode::InvalidArgument);
  CHECK(g.size() == 1);

  GalleryRecord stamped = fake_record(fake_subject(rng, "C"), rng);
  stamped.enrolled_at = 0;
  g.enroll(stamped, {.dedup = false});
  CHECK(g.record("C")->enrolled_at > 1600000000);
}

TEST_CASE("de-duplication reports the original subject at rank 1") {
  std::mt19937_64 rng(12);
  auto p = populate(rng, 30);
  GalleryRecord copy = *p.gallery.record("S0007");
  copy.subject_id = "NEW";

  try {
    p.gallery.enroll(copy, {.dedup = true, .dedup_threshold = 0.7});
    FAIL("expected PotentialDuplicateFound");
  } catch (const PotentialDuplicateFound& e) {
    CHECK(e.code() == ErrorCode::PotentialDuplicateFound);
    REQUIRE_FALSE(e.candidates().empty());
    CHECK(e.candidates().front().subject_id == "S0007");
    for (const auto& c : e.candidates()) CHECK(c.score >= 0.7);
  }
  CHECK_FALSE(p.gallery.contains("NEW"));

  // Threshold defaults to the table entry at the configured FAR.
  CHECK(code_of([&] { p.gallery.enroll(copy); }) == ErrorCode::PotentialDuplicateFound);

  auto r = p.gallery.enroll(copy, {.dedup = true, .dedup_threshold = 0.7, .override_duplicates = true});
  CHECK(p.gallery.contains("NEW"));
  REQUIRE_FALSE(r.duplicates.empty());
  CHECK(r.duplicates.front().subject_id == "S0007");

  // A new subject passes de-duplication.
  auto fresh = fake_subject(rng, "FRESH");
  CHECK(p.gallery.enroll(fake_record(fresh, rng)).duplicates.empty());

  Gallery no_table;
  no_table.enroll(fake_record(fake_subject(rng, "X"), rng), {.dedup = false});
  CHECK(code_of([&] { no_table.enroll(fake_record(fake_subject(rng, "Y"), rng)); }) ==
        ErrorCode::MissingThresholdTable);
  CHECK_NOTHROW(no_table.enroll(fake_record(fake_subject(rng, "Z"), rng), {.dedup = true, .dedup_threshold = 0.99}));
}

TEST_CASE("verify maps FAR through the threshold table") {
  std::mt19937_64 rng(13);
  auto p = populate(rng, 40);

  // Own enrollment impressions as the probe.
  const auto own = p.gallery.record("S0003")->templ;
  auto v = p.gallery.verify("S0003", own, 0.01);
  CHECK(v.decision);
  CHECK(v.threshold == 0.7);
  CHECK(v.far == 0.01);
  CHECK(v.score.decision == true);
  CHECK(v.score.threshold == 0.7);
  CHECK(v.score.fused == fusion::score_subjects(own, own, p.gallery.config().calibration).fused);

  // Default FAR is the configured one.
  CHECK(p.gallery.verify("S0003", own).far == 0.001);
  CHECK(p.gallery.verify("S0003", own).threshold == 0.8);
  // Between entries the stricter one applies.
  CHECK(p.gallery.verify("S0003", own, 0.05).threshold == 0.7);

  int rejected = 0, trials = 0;
  for (std::size_t i = 0; i < p.subjects.size(); ++i) {
    auto probe = fake_template(p.subjects[i], rng, fusion::Role::Probe, 2);
    CHECK(p.gallery.verify(p.subjects[i].id, probe, 0.01).decision);
    const auto& other = p.subjects[(i + 1) % p.subjects.size()].id;
    rejected += !p.gallery.verify(other, probe, 0.01).decision;
    ++trials;
  }
  CHECK(rejected >= 0.99 * trials);

  CHECK(code_of([&] { p.gallery.verify("nobody", own); }) == ErrorCode::UnknownSubject);
  CHECK(code_of([&] { p.gallery.verify("S0003", own, 1.5); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { p.gallery.verify("S0003", own, -0.1); }) == ErrorCode::InvalidArgument);

  Gallery bare;
  bare.enroll(fake_record(p.subjects[0], rng), {.dedup = false});
  CHECK(code_of([&] { bare.verify(p.subjects[0].id, own); }) == ErrorCode::MissingThresholdTable);
}

TEST_CASE("identify errors and clamping") {
  std::mt19937_64 rng(14);
  Gallery g(test_config());
  auto a = fake_subject(rng, "A");
  auto probe = fake_template(a, rng, fusion::Role::Probe, 1);
  CHECK(code_of([&] { g.identify(probe, 1); }) == ErrorCode::EmptyGallery);

  g.enroll(fake_record(a, rng), {.dedup = false});
  auto one = g.identify(probe, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].subject_id == "A");
  CHECK(g.identify(probe, 50).size() == 1);
  CHECK(code_of([&] { g.identify(probe, 0); }) == ErrorCode::InvalidArgument);

  // Records without a thumb in common with the probe are not candidates.
  g.enroll(fake_record(fake_subject(rng, "R"), rng, 2, false, true), {.dedup = false});
  auto left_only = fake_template(a, rng, fusion::Role::Probe, 1, true, false);
  auto hits = g.identify(left_only, 10);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].subject_id == "A");
}

TEST_CASE("two-stage identify equals the exhaustive ranking when the shortlist covers the gallery") {
  std::mt19937_64 rng(15);
  auto p = populate(rng, 120, 1);
  for (int t = 0; t < 5; ++t) {
    const auto& s = p.subjects[static_cast<std::size_t>(t * 23)];
    auto probe = fake_template(s, rng, fusion::Role::Probe, 2, true, t % 3 != 0, 0.9);
    auto oracle = brute_force(p.gallery, probe);
    CHECK(same_ranking(p.gallery.identify(probe, 1000, 0), oracle));
    CHECK(same_ranking(p.gallery.identify(probe, 1000, 120), oracle));
    CHECK(same_ranking(p.gallery.identify(probe, 1000, 500), oracle));
    auto top5 = p.gallery.identify(probe, 5, 0);
    CHECK(same_ranking(top5, CandidateList(oracle.begin(), oracle.begin() + 5)));

    // A shortlist narrower than the gallery returns a sorted subset with exact fused scores.
    auto narrow = p.gallery.identify(probe, 1000, 10);
    CHECK(narrow.size() == 10);
    for (std::size_t i = 1; i < narrow.size(); ++i) {
      CHECK((narrow[i - 1].score > narrow[i].score ||
             (narrow[i - 1].score == narrow[i].score && narrow[i - 1].subject_id < narrow[i].subject_id)));
    }
    for (const auto& c : narrow) {
      auto it = std::find_if(oracle.begin(), oracle.end(), [&](const Candidate& o) { return o.subject_id == c.subject_id; });
      REQUIRE(it != oracle.end());
      CHECK(it->score == c.score);
    }
    CHECK(narrow.front().subject_id == s.id);
  }
}

TEST_CASE("ties are broken by subject id") {
  std::mt19937_64 rng(16);
  Gallery g(test_config());
  auto a = fake_subject(rng, "A");
  GalleryRecord rec = fake_record(a, rng);
  for (const char* id : {"m", "c", "x", "a"}) {
    rec.subject_id = id;
    g.enroll(rec, {.dedup = false});
  }
  auto hits = g.identify(fake_template(a, rng, fusion::Role::Probe, 1), 4);
  REQUIRE(hits.size() == 4);
  CHECK(hits[0].subject_id == "a");
  CHECK(hits[1].subject_id == "c");
  CHECK(hits[2].subject_id == "m");
  CHECK(hits[3].subject_id == "x");
  CHECK(hits[0].score == hits[3].score);
}

TEST_CASE("genuine probes rank first and outscore the best impostor") {
  std::mt19937_64 rng(17);
  auto p = populate(rng, 300, 1);
  int first = 0, above = 0, trials = 0;
  for (int t = 0; t < 20; ++t) {
    const auto& s = p.subjects[static_cast<std::size_t>(t * 13)];
    auto probe = fake_template(s, rng, fusion::Role::Probe, 1);
    auto hits = p.gallery.identify(probe, 2);
    first += hits[0].subject_id == s.id;
    const auto& impostor = hits[0].subject_id == s.id ? hits[1] : hits[0];
    above += p.gallery.verify(s.id, probe).score.fused >= impostor.score;
    ++trials;
  }
  CHECK(first == trials);
  CHECK(above >= 0.95 * trials);
}

TEST_CASE("save and load round trip") {
  TempDir dir;
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    GalleryConfig cfg = trial % 2 ? test_config() : GalleryConfig{};
    cfg.shortlist = 50 + static_cast<std::size_t>(trial);
    cfg.calibration.provenance = "trial " + std::to_string(trial);
    Gallery g(cfg);
    const int n = trial % 5;
    for (int i = 0; i < n; ++i) {
      auto s = fake_subject(rng, "T" + std::to_string(trial) + "_" + std::to_string(i));
      g.enroll(fake_record(s, rng, 1 + i % 4, i % 3 != 1, i % 3 != 2), {.dedup = false});
    }
    const fs::path file = dir.path / ("g" + std::to_string(trial) + ".ipxg");
    g.save(file);
    Gallery back = Gallery::load(file);
    CHECK(back.same_content(g));
    CHECK(back.size() == static_cast<std::size_t>(n));
    CHECK(back.path() == file);
  }
}

TEST_CASE("loaded galleries score like the original") {
  TempDir dir;
  std::mt19937_64 rng(19);
  auto p = populate(rng, 20);
  p.gallery.save(dir.path / "g.ipxg");
  Gallery back = Gallery::load(dir.path / "g.ipxg");
  auto probe = fake_template(p.subjects[4], rng, fusion::Role::Probe, 2);
  CHECK(same_ranking(back.identify(probe, 20, 0), p.gallery.identify(probe, 20, 0)));
  CHECK(back.verify("S0004", probe, 0.01).score == p.gallery.verify("S0004", probe, 0.01).score);
}

TEST_CASE("enrollments append to the bound file") {
  TempDir dir;
  const fs::path file = dir.path / "log.ipxg";
  std::mt19937_64 rng(20);
  {
    Gallery g = Gallery::open(file, test_config());
    CHECK(fs::exists(file));
    CHECK(g.size() == 0);
    g.enroll(fake_record(fake_subject(rng, "A"), rng), {.dedup = false});
  }
  const auto size_one = fs::file_size(file);
  {
    Gallery g = Gallery::open(file);
    CHECK(g.size() == 1);
    CHECK(g.config() == test_config());
    g.enroll(fake_record(fake_subject(rng, "B"), rng), {.dedup = false});
    g.enroll(fake_record(fake_subject(rng, "C"), rng), {.dedup = false});
    Gallery again = Gallery::load(file);
    CHECK(again.same_content(g));
    // Rejected enrollments leave the file alone.
    const auto before = fs::file_size(file);
    CHECK_THROWS_AS(g.enroll(fake_record(fake_subject(rng, "A"), rng), {.dedup = false}), Error);
    CHECK(fs::file_size(file) == before);
  }
  CHECK(fs::file_size(file) > size_one);
  Gallery g = Gallery::load(file);
  CHECK(g.size() == 3);
  CHECK(g.records()[2]->subject_id == "C");

  // Compaction by save keeps the content.
  g.save(dir.path / "compact.ipxg");
  CHECK(Gallery::load(dir.path / "compact.ipxg").same_content(g));
  CHECK(fs::file_size(dir.path / "compact.ipxg") < fs::file_size(file));
}

TEST_CASE("corrupted, truncated and foreign files are rejected") {
  TempDir dir;
  std::mt19937_64 rng(21);
  auto p = populate(rng, 3);
  const fs::path file = dir.path / "g.ipxg";
  p.gallery.save(file);
  const auto bytes = slurp(file);
  const fs::path bad = dir.path / "bad.ipxg";

  for (std::size_t cut : {std::size_t{0}, std::size_t{4}, std::size_t{12}, std::size_t{16}, bytes.size() / 2,
                          bytes.size() - 33, bytes.size() - 1}) {
    spit(bad, std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
    CHECK(code_of([&] { Gallery::load(bad); }) == ErrorCode::ChecksumMismatch);
  }

  std::uniform_int_distribution<std::size_t> pos(16, bytes.size() - 1);
  for (int t = 0; t < 200; ++t) {
    auto flipped = bytes;
    flipped[pos(rng)] ^= static_cast<std::uint8_t>(1u << (t % 8));
    spit(bad, flipped);
    CHECK(code_of([&] { Gallery::load(bad); }) == ErrorCode::ChecksumMismatch);
  }

  auto versioned = bytes;
  versioned[8] = 2;
  spit(bad, versioned);
  CHECK(code_of([&] { Gallery::load(bad); }) == ErrorCode::VersionMismatch);

  auto foreign = bytes;
  foreign[0] = 'X';
  spit(bad, foreign);
  CHECK(code_of([&] { Gallery::load(bad); }) == ErrorCode::UnsupportedFormat);

  CHECK(code_of([&] { Gallery::load(dir.path / "missing.ipxg"); }) == ErrorCode::IoError);
  CHECK(code_of([&] { p.gallery.save(dir.path / "no" / "such" / "dir.ipxg"); }) == ErrorCode::IoError);
}

TEST_CASE("readers see whole snapshots while a writer enrolls") {
  std::mt19937_64 rng(22);
  auto p = populate(rng, 10);
  std::vector<GalleryRecord> pending;
  for (int i = 0; i < 40; ++i) pending.push_back(fake_record(fake_subject(rng, "W" + std::to_string(100 + i)), rng));
  auto probe = fake_template(p.subjects[2], rng, fusion::Role::Probe, 1);

  std::atomic<bool> done{false};
  std::atomic<int> violations{0};
  std::vector<std::thread> readers;
  for (int r = 0; r < 3; ++r) {
    readers.emplace_back([&] {
      std::size_t last = 0;
      while (!done.load()) {
        auto recs = p.gallery.records();
        if (recs.size() < last) ++violations;
        last = recs.size();
        for (const auto& rec : recs) {
          if (!rec || !p.gallery.record(rec->subject_id)) ++violations;
        }
        auto hits = p.gallery.identify(probe, 1);
        if (hits.empty() || hits[0].subject_id != p.subjects[2].id) ++violations;
      }
    });
  }
  for (auto& rec : pending) p.gallery.enroll(std::move(rec), {.dedup = false});
  done = true;
  for (auto& t : readers) t.join();
  CHECK(violations.load() == 0);
  CHECK(p.gallery.size() == 50);
}

TEST_CASE("set_config swaps the table and persists it") {
  TempDir dir;
  std::mt19937_64 rng(23);
  const fs::path file = dir.path / "g.ipxg";
  Gallery g = Gallery::open(file);
  auto a = fake_subject(rng, "A");
  g.enroll(fake_record(a, rng), {.dedup = false});
  auto own = g.record("A")->templ;
  CHECK(code_of([&] { g.verify("A", own); }) == ErrorCode::MissingThresholdTable);

  GalleryConfig cfg = g.config();
  cfg.thresholds = test_thresholds();
  g.set_config(cfg);
  CHECK(g.verify("A", own).decision);
  Gallery back = Gallery::load(file);
  CHECK(back.config() == cfg);
  CHECK(back.same_content(g));
  back.enroll(fake_record(fake_subject(rng, "B"), rng), {.dedup = false});
  CHECK(Gallery::load(file).size() == 2);
}
