#include "vpr/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "vpr/errors.hpp"

namespace vpr {

namespace {

constexpr char kFeatureMagic[4] = {'E', 'P', 'F', 'V'};
constexpr std::uint32_t kFeatureVersion = 1;

void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  put_bytes(out, b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::uint64_t get_u64(const unsigned char* p) {
  return std::uint64_t(get_u32(p)) | std::uint64_t(get_u32(p + 4)) << 32;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace

bool normalize_unit(std::span<float> v) {
  double n2 = 0.0;
  for (float x : v) n2 += double(x) * double(x);
  if (n2 < kZeroNorm2) return false;
  if (std::abs(n2 - 1.0) > kUnitNorm2Band) {
    const double inv = 1.0 / std::sqrt(n2);
    for (float& x : v) x = static_cast<float>(double(x) * inv);
  }
  return true;
}

bool normalize_unit(std::span<double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  if (n2 < kZeroNorm2) return false;
  if (std::abs(n2 - 1.0) > kUnitNorm2Band) {
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
  }
  return true;
}

double l2_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = double(a[d]) - double(b[d]);
    s += diff * diff;
  }
  return std::sqrt(s);
}

double l2_distance(std::span<const float> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = double(a[d]) - b[d];
    s += diff * diff;
  }
  return std::sqrt(s);
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return std::sqrt(s);
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) s += double(a[d]) * double(b[d]);
  return s;
}

FeatureMatrix FeatureMatrix::from_unit_rows(std::size_t count, std::size_t dim,
                                            std::vector<float> data) {
  if (dim == 0) throw ArgumentError("feature dimension must be positive");
  if (data.size() != count * dim)
    throw ArgumentError("feature buffer size does not match count*dim");
  for (std::size_t i = 0; i < count; ++i) {
    double n2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double x = data[i * dim + d];
      n2 += x * x;
    }
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-4)
      throw DataError("row " + std::to_string(i) + " is not unit-norm");
  }
  FeatureMatrix m;
  m.count_ = count;
  m.dim_ = dim;
  m.data_ = std::move(data);
  return m;
}

FeatureMatrix FeatureMatrix::from_raw_rows(std::size_t count, std::size_t dim,
                                           std::vector<float> data) {
  if (dim == 0) throw ArgumentError("feature dimension must be positive");
  if (data.size() != count * dim)
    throw ArgumentError("feature buffer size does not match count*dim");
  for (std::size_t i = 0; i < count; ++i) {
    if (!normalize_unit(std::span<float>(data.data() + i * dim, dim)))
      throw DataError("zero-norm feature row at index " + std::to_string(i));
  }
  FeatureMatrix m;
  m.count_ = count;
  m.dim_ = dim;
  m.data_ = std::move(data);
  return m;
}

QueryFeature QueryFeature::normalized(std::string id, std::vector<float> raw) {
  if (!normalize_unit(std::span<float>(raw)))
    throw DataError("zero-norm query feature: " + id);
  return QueryFeature{std::move(id), std::move(raw)};
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 20)
    throw FormatError("feature file too short for header: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kFeatureMagic, 4) != 0)
    throw FormatError("bad magic in feature file: " + path.string());
  const std::uint32_t version = get_u32(p + 4);
  if (version != kFeatureVersion)
    throw FormatError("unsupported feature file version " +
                      std::to_string(version));
  const std::uint64_t count = get_u64(p + 8);
  const std::uint32_t dim = get_u32(p + 16);
  if (dim == 0) throw FormatError("feature file declares dim = 0");
  if (count > std::numeric_limits<std::uint32_t>::max())
    throw FormatError("feature file row count exceeds 32-bit index space");
  const std::uint64_t expected = 20 + count * std::uint64_t(dim) * 4;
  if (bytes.size() != expected)
    throw FormatError("feature file payload size mismatch: expected " +
                      std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));

  std::vector<float> data(std::size_t(count) * dim);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = std::bit_cast<float>(get_u32(p + 20 + i * 4));
  return FeatureMatrix::from_raw_rows(std::size_t(count), dim,
                                      std::move(data));
}

void save_features(const std::filesystem::path& path, const FeatureMatrix& m) {
  std::string out;
  out.reserve(20 + m.data().size() * 4);
  put_bytes(out, kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  put_u64(out, m.count());
  put_u32(out, static_cast<std::uint32_t>(m.dim()));
  for (float x : m.data()) put_u32(out, std::bit_cast<std::uint32_t>(x));
  write_file(path, out);
}

std::vector<MetaRecord> load_metadata(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open metadata file: " + path.string());
  std::vector<MetaRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("metadata line " + std::to_string(line_no) +
                        ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
      throw FormatError("metadata line " + std::to_string(line_no) +
                        ": missing required string field 'id'");
    MetaRecord r;
    r.id = j["id"].get<std::string>();
    if (j.contains("gps") && !j["gps"].is_null()) {
      const auto& g = j["gps"];
      if (!g.is_array() || g.size() != 2 || !g[0].is_number() ||
          !g[1].is_number())
        throw FormatError("metadata line " + std::to_string(line_no) +
                          ": 'gps' must be [easting_m, northing_m]");
      r.gps = std::array<double, 2>{g[0].get<double>(), g[1].get<double>()};
    }
    if (j.contains("timestamp") && !j["timestamp"].is_null()) {
      if (!j["timestamp"].is_number())
        throw FormatError("metadata line " + std::to_string(line_no) +
                          ": 'timestamp' must be a number");
      r.timestamp = j["timestamp"].get<double>();
    }
    records.push_back(std::move(r));
  }
  return records;
}

void save_metadata(const std::filesystem::path& path,
                   const std::vector<MetaRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    if (r.gps) j["gps"] = {(*r.gps)[0], (*r.gps)[1]};
    if (r.timestamp) j["timestamp"] = *r.timestamp;
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

std::vector<QueryFeature> zip_queries(const FeatureMatrix& features,
                                      const std::vector<MetaRecord>& meta) {
  if (features.count() != meta.size())
    throw DataError("feature row count " + std::to_string(features.count()) +
                    " does not match metadata record count " +
                    std::to_string(meta.size()));
  std::vector<QueryFeature> out;
  out.reserve(meta.size());
  for (std::size_t i = 0; i < meta.size(); ++i) {
    const auto r = features.row(i);
    out.push_back(QueryFeature{meta[i].id, {r.begin(), r.end()}});
  }
  return out;
}

CandidateList knn_search(const FeatureMatrix& db, std::string_view query_id,
                         std::span<const float> vec, std::size_t k) {
  if (vec.size() != db.dim())
    throw ArgumentError("query dimension " + std::to_string(vec.size()) +
                        " does not match database dimension " +
                        std::to_string(db.dim()));
  if (k == 0) throw ArgumentError("k must be positive");
  if (k > db.count())
    throw ArgumentError("k = " + std::to_string(k) +
                        " exceeds database size " + std::to_string(db.count()));

  const std::size_t n = db.count();
  std::vector<std::pair<double, std::uint32_t>> d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* r = db.row_ptr(i);
    double s = 0.0;
    for (std::size_t d = 0; d < vec.size(); ++d) {
      const double diff = double(vec[d]) - double(r[d]);
      s += diff * diff;
    }
    d2[i] = {s, static_cast<std::uint32_t>(i)};
  }
  // pair ordering sorts by distance, then lower index
  std::partial_sort(d2.begin(), d2.begin() + k, d2.end());

  CandidateList out;
  out.query_id.assign(query_id);
  out.entries.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.entries.push_back({d2[i].second, std::sqrt(d2[i].first)});
  return out;
}

CandidateList knn_search(const FeatureMatrix& db, const QueryFeature& q,
                         std::size_t k) {
  return knn_search(db, q.id, q.vector, k);
}

double pairwise_similarity(const FeatureMatrix& db, std::size_t i,
                           std::size_t j) {
  if (i >= db.count() || j >= db.count())
    throw ArgumentError("row index out of range in pairwise_similarity");
  const double s = dot(db.row(i), db.row(j));
  return std::clamp(s, -1.0, 1.0);
}

}  // namespace vpr
