#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vpr {

// Squared-norm thresholds shared by every normalization site. A row whose
// squared norm is below kZeroNorm2 has no direction and cannot be normalized.
// Rows already inside the unit band are left bit-for-bit unchanged: float32
// rows normalized at ingestion land within ~1e-7 of unit norm, and dividing
// them again would only inject rounding noise.
inline constexpr double kZeroNorm2 = 1e-24;
inline constexpr double kUnitNorm2Band = 1e-6;

// In-place L2 normalization. Returns false when the vector norm is below
// 1e-12; the caller decides whether that is an error or a fallback.
bool normalize_unit(std::span<float> v);
bool normalize_unit(std::span<double> v);

double l2_distance(std::span<const float> a, std::span<const float> b);
double l2_distance(std::span<const float> a, std::span<const double> b);
double l2_distance(std::span<const double> a, std::span<const double> b);
double dot(std::span<const float> a, std::span<const float> b);

// Immutable N x D row-major matrix of unit-norm float32 feature vectors.
// Safe to share across threads once constructed.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  // Takes rows that are already unit-norm (within 1e-4); throws DataError
  // otherwise, naming the offending row.
  static FeatureMatrix from_unit_rows(std::size_t count, std::size_t dim,
                                      std::vector<float> data);

  // Normalizes rows in place; throws DataError on a zero-norm row.
  static FeatureMatrix from_raw_rows(std::size_t count, std::size_t dim,
                                     std::vector<float> data);

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }
  const float* row_ptr(std::size_t i) const { return data_.data() + i * dim_; }
  std::span<const float> data() const { return data_; }

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

struct QueryFeature {
  std::string id;
  std::vector<float> vector;

  // Queries are normalized unconditionally; whether extractors pre-normalize
  // is not assumed. Throws DataError on a zero-norm vector.
  static QueryFeature normalized(std::string id, std::vector<float> raw);
};

struct Candidate {
  std::uint32_t index;
  double distance;
};

// Ordered top-k retrieval result: distances nondecreasing, indices unique.
struct CandidateList {
  std::string query_id;
  std::vector<Candidate> entries;
};

// One metadata record per database/query row, parallel to the feature rows.
struct MetaRecord {
  std::string id;
  std::optional<std::array<double, 2>> gps;  // projected easting/northing, m
  std::optional<double> timestamp;           // seconds
};

// Binary feature file: magic "EPFV", u32 version = 1, u64 row count,
// u32 dim, then count*dim float32 little-endian values row-major.
FeatureMatrix load_features(const std::filesystem::path& path);
void save_features(const std::filesystem::path& path, const FeatureMatrix& m);

// JSON-lines metadata: {"id": ..., "gps": [e, n], "timestamp": t} per row.
std::vector<MetaRecord> load_metadata(const std::filesystem::path& path);
void save_metadata(const std::filesystem::path& path,
                   const std::vector<MetaRecord>& records);

// Pairs a feature matrix with ids from its metadata file.
std::vector<QueryFeature> zip_queries(const FeatureMatrix& features,
                                      const std::vector<MetaRecord>& meta);

// Exact exhaustive k-nearest-neighbor search by Euclidean distance.
// Ties break toward the lower row index. Throws ArgumentError when k is 0,
// k > N, or dimensions mismatch.
CandidateList knn_search(const FeatureMatrix& db, const QueryFeature& q,
                         std::size_t k);

// Raw-vector variant; the query is used as given (query expansion relies on
// searching with an unnormalized vector).
CandidateList knn_search(const FeatureMatrix& db, std::string_view query_id,
                         std::span<const float> vec, std::size_t k);

// Cosine similarity of two database rows, clamped to [-1, 1].
double pairwise_similarity(const FeatureMatrix& db, std::size_t i,
                           std::size_t j);

}  // namespace vpr
