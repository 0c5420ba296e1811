#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "gallery_fixtures.hpp"
#include "ipx/error.hpp"
#include "ipx/parallel.hpp"
#include "ipx/synthgen.hpp"
#include "ipx/texture.hpp"

using namespace ipx;
using namespace ipx::texture;
using namespace ipx::test;

namespace {

FingerprintImage clean_print(std::uint64_t seed) {
  return synth::render_capture(synth::synth_master(seed), 30, synth::Perturbation::none(), 1);
}

FingerprintImage shifted(const FingerprintImage& img, int dx, int dy) {
  FingerprintImage out(img.width(), img.height(), img.ppi(), img.at(0, 0));
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      int sx = x - dx, sy = y - dy;
      if (sx >= 0 && sy >= 0 && sx < img.width() && sy < img.height()) out.at(x, y) = img.at(sx, sy);
    }
  }
  return out;
}

TextureEmbedding embed(const FingerprintImage& img) { return extract_embedding(img, imgproc::analyze(img)); }

double norm(const TextureEmbedding& e) {
  double s = 0;
  for (float v : e.vector) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

std::vector<std::uint8_t> float_bytes(const std::vector<float>& v) {
  std::vector<std::uint8_t> out(v.size() * 4);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

}  // namespace

TEST_CASE("extraction is deterministic and unit norm") {
  auto img = clean_print(11);
  auto a = embed(img), b = embed(img);
  CHECK(a == b);
  CHECK(a.vector.size() == kDimension);
  CHECK(norm(a) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(a.extractor_id == kExtractorId);
  CHECK(compare(a, a) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("raw and enhanced inputs give different descriptors") {
  auto img = clean_print(12);
  auto analysis = imgproc::analyze(img);
  auto enhanced = extract_embedding(img, analysis);
  auto raw = extract_embedding(img, analysis, {true});
  CHECK(norm(raw) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_FALSE(raw == enhanced);
}

TEST_CASE("8 px translations keep the descriptor") {
  std::vector<double> sims;
  for (std::uint64_t seed = 100; seed < 112; ++seed) {
    auto img = clean_print(seed);
    auto base = embed(img);
    for (auto [dx, dy] : {std::pair{8, 0}, std::pair{-5, 6}}) sims.push_back(compare(base, embed(shifted(img, dx, dy))));
  }
  std::sort(sims.begin(), sims.end());
  MESSAGE("median translated similarity " << sims[sims.size() / 2] << ", min " << sims.front());
  CHECK(sims[sims.size() / 2] >= 0.95);
}

TEST_CASE("independent masters rarely look alike") {
  std::vector<TextureEmbedding> e(34);
  parallel_for(e.size(), 0, [&](std::size_t i) { e[i] = embed(clean_print(1000 + i)); });
  int trials = 0, below = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      ++trials;
      below += compare(e[i], e[j]) < 0.8;
    }
  }
  REQUIRE(trials >= 500);
  MESSAGE(below << " of " << trials << " impostor pairs below 0.8");
  CHECK(below >= 0.95 * trials);
}

TEST_CASE("compare properties") {
  std::mt19937_64 rng(3);
  auto a = random_embedding(rng), b = random_embedding(rng);
  CHECK(compare(a, b) == compare(b, a));
  CHECK(compare(a, a) >= compare(a, b));

  TextureEmbedding x, y;
  x.vector.assign(kDimension, 0.0f);
  y.vector.assign(kDimension, 0.0f);
  x.vector[0] = 1.0f;
  y.vector[1] = 1.0f;
  CHECK(compare(x, y) == 0.0);
  CHECK(to_unit_score(1.0) == 1.0);
  CHECK(to_unit_score(-1.0) == 0.0);

  y.extractor_id = "external:cnn";
  auto c = compare_checked(x, y);
  CHECK(c.extractor_mismatch);
  CHECK(c.similarity == 0.0);
  CHECK_FALSE(compare_checked(x, x).extractor_mismatch);

  y.vector.resize(10);
  CHECK_THROWS_AS(compare(x, y), Error);
  try {
    compare(x, y);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
}

TEST_CASE("batch_search equals compare-and-sort on a 10,000 gallery") {
  std::mt19937_64 rng(4);
  EmbeddingMatrix m(10000);
  std::vector<TextureEmbedding> rows;
  for (int i = 0; i < 10000; ++i) {
    rows.push_back(random_embedding(rng));
    m.add(rows.back());
  }
  // duplicates force ties
  for (int i = 0; i < 50; ++i) m.add(rows[static_cast<std::size_t>(i) * 7]);
  for (int trial = 0; trial < 5; ++trial) {
    auto probe = trial == 0 ? rows[14] : random_embedding(rng);
    std::vector<SearchHit> oracle;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      oracle.push_back({i, static_cast<double>(dot512(probe.vector.data(), m.row(i)))});
    }
    std::stable_sort(oracle.begin(), oracle.end(),
                     [](const SearchHit& a, const SearchHit& b) { return a.similarity > b.similarity; });
    for (std::size_t k : {1u, 10u, 200u}) {
      auto hits = batch_search(probe, m, k);
      REQUIRE(hits.size() == k);
      CHECK(std::equal(hits.begin(), hits.end(), oracle.begin()));
    }
    if (trial == 0) {
      auto hits = batch_search(probe, m, 1);
      CHECK(hits[0].index == 14);
      CHECK(hits[0].similarity == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("batch_search exhaustive and degenerate cases") {
  std::mt19937_64 rng(5);
  EmbeddingMatrix m;
  for (int i = 0; i < 37; ++i) m.add(random_embedding(rng));
  auto probe = random_embedding(rng);
  auto all = batch_search(probe, m, m.rows());
  std::vector<std::size_t> idx;
  for (const auto& h : all) idx.push_back(h.index);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i] == i);
  CHECK(batch_search(probe, m, 1000).size() == m.rows());
  CHECK_THROWS_AS(batch_search(probe, EmbeddingMatrix{}, 1), Error);
  CHECK_THROWS_AS(batch_search(probe, m, 0), Error);
}

TEST_CASE("external embeddings are normalized and checked") {
  std::vector<float> ones(kDimension, 1.0f);
  auto e = import_external_embedding(float_bytes(ones), "cnn");
  CHECK(e.extractor_id == "external:cnn");
  for (float v : e.vector) CHECK(v == doctest::Approx(1.0 / std::sqrt(512.0)).epsilon(1e-6));

  std::mt19937_64 rng(6);
  auto unit = random_embedding(rng);
  auto again = import_external_embedding(float_bytes(unit.vector), "cnn");
  for (std::size_t i = 0; i < kDimension; ++i) CHECK(std::abs(again.vector[i] - unit.vector[i]) <= 1e-7);

  nlohmann::json arr = nlohmann::json::array();
  for (float v : unit.vector) arr.push_back(v);
  auto text = arr.dump();
  auto from_text = import_external_embedding({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}, "cnn");
  CHECK(compare(from_text, unit) == doctest::Approx(1.0).epsilon(1e-6));

  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::InvalidArgument;
  };
  auto nan = ones;
  nan[100] = std::nanf("");
  CHECK(code_of([&] { import_external_embedding(float_bytes(nan), "x"); }) == ErrorCode::NonFiniteValue);
  std::vector<float> short_vec(511, 1.0f);
  CHECK(code_of([&] { import_external_embedding(float_bytes(short_vec), "x"); }) == ErrorCode::WrongDimension);
  std::string bad = "[1, 2, null]";
  CHECK(code_of([&] {
          import_external_embedding({reinterpret_cast<const std::uint8_t*>(bad.data()), bad.size()}, "x");
        }) == ErrorCode::WrongDimension);
}

TEST_CASE("embedding files round trip bit exactly") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 10; ++i) {
    auto e = random_embedding(rng);
    if (i % 2) e.extractor_id = "external:net";
    CHECK(from_emb(to_emb(e)).vector == e.vector);
    CHECK(from_json(to_json(e)) == e);
  }
  auto bytes = to_emb(random_embedding(rng));
  CHECK(bytes.size() == 8 + 4 * kDimension);
  bytes.pop_back();
  CHECK_THROWS_AS(from_emb(bytes), Error);
  std::vector<std::uint8_t> junk(2056, 0);
  CHECK_THROWS_AS(from_emb(junk), Error);
}

TEST_CASE("extraction preconditions") {
  auto img = clean_print(13);
  auto low = imgproc::downsample(img, 500);
  CHECK_THROWS_AS(extract_embedding(low, imgproc::analyze(low)), Error);
  FingerprintImage blank(576, 576, 1900, 200);
  try {
    extract_embedding(blank, imgproc::analyze(blank));
    FAIL("blank image accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyForeground);
  }
}
