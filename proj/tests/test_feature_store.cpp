#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vpr/errors.hpp"
#include "vpr/feature_store.hpp"

using namespace vpr;
namespace tu = testutil;

TEST_CASE("load_features normalizes rows") {
  tu::TempDir dir("epfv");
  const auto path = dir.path / "f.epfv";
  {
    auto m = FeatureMatrix::from_raw_rows(2, 2, {2.f, 0.f, 0.f, 3.f});
    save_features(path, m);
  }
  const auto m = load_features(path);
  REQUIRE(m.count() == 2);
  REQUIRE(m.dim() == 2);
  CHECK(m.row(0)[0] == doctest::Approx(1.0f));
  CHECK(m.row(0)[1] == doctest::Approx(0.0f));
  CHECK(m.row(1)[0] == doctest::Approx(0.0f));
  CHECK(m.row(1)[1] == doctest::Approx(1.0f));
}

TEST_CASE("empty feature file keeps the declared dim") {
  tu::TempDir dir("epfv");
  const auto path = dir.path / "f.epfv";
  save_features(path, FeatureMatrix::from_raw_rows(0, 7, {}));
  const auto m = load_features(path);
  CHECK(m.count() == 0);
  CHECK(m.dim() == 7);
}

TEST_CASE("zero-norm row is a data error naming the row") {
  CHECK_THROWS_WITH_AS(FeatureMatrix::from_raw_rows(1, 2, {0.f, 0.f}),
                       doctest::Contains("row at index 0"), DataError);
  CHECK_THROWS_AS(FeatureMatrix::from_raw_rows(3, 2,
                                               {1.f, 0.f, 0.f, 0.f, 0.f, 1.f}),
                  DataError);
}

TEST_CASE("malformed feature files are format errors") {
  tu::TempDir dir("epfv");
  const auto path = dir.path / "bad.epfv";
  SUBCASE("bad magic") {
    std::ofstream(path, std::ios::binary) << "XXXXjunkjunkjunkjunkjunk";
    CHECK_THROWS_AS(load_features(path), FormatError);
  }
  SUBCASE("truncated payload") {
    auto m = FeatureMatrix::from_raw_rows(2, 2, {1.f, 0.f, 0.f, 1.f});
    save_features(path, m);
    auto bytes = tu::read_file_bytes(path);
    std::ofstream(path, std::ios::binary)
        << bytes.substr(0, bytes.size() - 4);
    CHECK_THROWS_AS(load_features(path), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_features(dir.path / "nope.epfv"), FormatError);
  }
}

TEST_CASE("feature file round trip is byte-identical") {
  tu::TempDir dir("epfv");
  std::mt19937_64 rng(11);
  const auto m = tu::random_unit_matrix(rng, 17, 9);
  save_features(dir.path / "a.epfv", m);
  save_features(dir.path / "b.epfv", load_features(dir.path / "a.epfv"));
  CHECK(tu::read_file_bytes(dir.path / "a.epfv") ==
        tu::read_file_bytes(dir.path / "b.epfv"));
}

TEST_CASE("knn_search worked example") {
  const auto db =
      tu::matrix_from_rows({{1.f, 0.f}, {0.f, 1.f}, {0.7071f, 0.7071f}});
  const auto q = QueryFeature::normalized("q", {1.f, 0.f});
  const auto r = knn_search(db, q, 2);
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[0].index == 0);
  CHECK(r.entries[1].index == 2);
  CHECK(r.entries[0].distance == doctest::Approx(0.0));
  // sqrt(2 - 2 * cos(45 deg))
  CHECK(r.entries[1].distance == doctest::Approx(0.7653668647).epsilon(1e-6));
}

TEST_CASE("self-match has distance zero") {
  std::mt19937_64 rng(3);
  const auto db = tu::random_unit_matrix(rng, 5, 8);
  const auto row = db.row(3);
  const auto q = QueryFeature{"q", {row.begin(), row.end()}};
  const auto r = knn_search(db, q, 1);
  CHECK(r.entries[0].index == 3);
  CHECK(r.entries[0].distance == 0.0);
}

TEST_CASE("ties break toward the lower index") {
  const auto db =
      tu::matrix_from_rows({{0.f, 1.f}, {1.f, 0.f}, {1.f, 0.f}});
  const auto q = QueryFeature::normalized("q", {1.f, 0.1f});
  const auto r = knn_search(db, q, 3);
  CHECK(r.entries[0].index == 1);
  CHECK(r.entries[1].index == 2);
  CHECK(r.entries[2].index == 0);
}

TEST_CASE("knn argument errors") {
  const auto db = tu::matrix_from_rows({{1.f, 0.f}});
  const auto q = QueryFeature::normalized("q", {1.f, 0.f});
  CHECK_THROWS_AS(knn_search(db, q, 2), ArgumentError);
  CHECK_THROWS_AS(knn_search(db, q, 0), ArgumentError);
  const auto q3 = QueryFeature::normalized("q", {1.f, 0.f, 0.f});
  CHECK_THROWS_AS(knn_search(db, q3, 1), ArgumentError);
}

TEST_CASE("knn matches the brute-force oracle on random instances") {
  std::mt19937_64 rng(1234);
  for (int it = 0; it < 25; ++it) {
    const std::size_t n = 1 + rng() % 300;
    const std::size_t dim = 1 + rng() % 32;
    const std::size_t k = 1 + rng() % std::min<std::size_t>(n, 20);
    const auto db = tu::random_unit_matrix(rng, n, dim);
    const auto qv = tu::random_unit_vector(rng, dim);
    const auto got = knn_search(db, "q", qv, k);
    const auto want = tu::brute_force_knn(db, qv, k);
    REQUIRE(got.entries.size() == want.size());
    for (std::size_t i = 0; i < k; ++i)
      CHECK(got.entries[i].index == want[i]);
  }
}

TEST_CASE("knn with k = N returns a permutation of all indices") {
  std::mt19937_64 rng(77);
  const auto db = tu::random_unit_matrix(rng, 40, 6);
  const auto qv = tu::random_unit_vector(rng, 6);
  const auto r = knn_search(db, "q", qv, 40);
  std::vector<bool> seen(40, false);
  for (const auto& c : r.entries) {
    CHECK_FALSE(seen[c.index]);
    seen[c.index] = true;
  }
  for (bool s : seen) CHECK(s);
  for (std::size_t i = 1; i < r.entries.size(); ++i)
    CHECK(r.entries[i - 1].distance <= r.entries[i].distance);
}

TEST_CASE("squared distance equals 2 - 2 cos for unit rows") {
  std::mt19937_64 rng(99);
  const auto db = tu::random_unit_matrix(rng, 60, 16);
  const auto qv = tu::random_unit_vector(rng, 16);

  // ordering agrees with a cosine-similarity oracle
  const auto r = knn_search(db, "q", qv, 60);
  std::vector<std::pair<double, std::uint32_t>> by_cos;
  for (std::size_t i = 0; i < db.count(); ++i)
    by_cos.emplace_back(-dot(std::span<const float>(qv), db.row(i)),
                        std::uint32_t(i));
  std::sort(by_cos.begin(), by_cos.end());
  for (std::size_t i = 0; i < db.count(); ++i) {
    CHECK(r.entries[i].index == by_cos[i].second);
    const double d2 = r.entries[i].distance * r.entries[i].distance;
    const double cos_equiv = 2.0 + 2.0 * by_cos[i].first;
    CHECK(std::abs(d2 - cos_equiv) < 1e-5);
  }
}

TEST_CASE("pairwise_similarity examples") {
  const auto db =
      tu::matrix_from_rows({{1.f, 0.f}, {0.f, 1.f}, {0.7071f, 0.7071f}});
  CHECK(pairwise_similarity(db, 0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(pairwise_similarity(db, 0, 1) == doctest::Approx(0.0));
  CHECK(pairwise_similarity(db, 0, 2) ==
        doctest::Approx(0.7071067811).epsilon(1e-6));
  CHECK_THROWS_AS(pairwise_similarity(db, 0, 3), ArgumentError);
}

TEST_CASE("query normalization is unconditional") {
  const auto q = QueryFeature::normalized("q", {3.f, 4.f});
  CHECK(q.vector[0] == doctest::Approx(0.6f));
  CHECK(q.vector[1] == doctest::Approx(0.8f));
  CHECK_THROWS_AS(QueryFeature::normalized("z", {0.f, 0.f}), DataError);
}

TEST_CASE("metadata round trip and validation") {
  tu::TempDir dir("meta");
  const auto path = dir.path / "m.jsonl";
  std::vector<MetaRecord> records(3);
  records[0] = {"a", std::array<double, 2>{1.0, 2.0}, 10.5};
  records[1] = {"b", std::nullopt, std::nullopt};
  records[2] = {"c", std::array<double, 2>{-3.5, 0.25}, std::nullopt};
  save_metadata(path, records);
  const auto loaded = load_metadata(path);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].id == "a");
  CHECK((*loaded[0].gps)[0] == 1.0);
  CHECK(*loaded[0].timestamp == 10.5);
  CHECK_FALSE(loaded[1].gps.has_value());
  CHECK((*loaded[2].gps)[1] == 0.25);

  SUBCASE("missing id") {
    std::ofstream(path) << "{\"gps\": [1, 2]}\n";
    CHECK_THROWS_AS(load_metadata(path), FormatError);
  }
  SUBCASE("bad gps shape") {
    std::ofstream(path) << "{\"id\": \"x\", \"gps\": [1]}\n";
    CHECK_THROWS_AS(load_metadata(path), FormatError);
  }
  SUBCASE("invalid json line") {
    std::ofstream(path) << "{\"id\": \"x\"\n";
    CHECK_THROWS_WITH_AS(load_metadata(path), doctest::Contains("line 1"),
                         FormatError);
  }
}

TEST_CASE("zip_queries checks the row/record counts") {
  std::mt19937_64 rng(5);
  const auto m = tu::random_unit_matrix(rng, 2, 4);
  std::vector<MetaRecord> meta(2);
  meta[0].id = "q0";
  meta[1].id = "q1";
  const auto qs = zip_queries(m, meta);
  CHECK(qs[1].id == "q1");
  meta.pop_back();
  CHECK_THROWS_WITH_AS(zip_queries(m, meta), doctest::Contains("2"),
                       DataError);
}
