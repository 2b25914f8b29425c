#include "vpr/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "json.hpp"
#include "vpr/errors.hpp"

namespace vpr {

const GroundTruthEntry& GroundTruth::at(const std::string& query_id) const {
  auto it = by_query.find(query_id);
  if (it == by_query.end())
    throw ArgumentError("no ground truth entry for query '" + query_id + "'");
  return it->second;
}

bool GroundTruth::is_positive(const std::string& query_id,
                              std::uint32_t index) const {
  const auto& e = at(query_id);
  return std::binary_search(e.positives.begin(), e.positives.end(), index);
}

bool GroundTruth::is_ambiguous(const std::string& query_id,
                               std::uint32_t index) const {
  const auto& e = at(query_id);
  return std::binary_search(e.ambiguous.begin(), e.ambiguous.end(), index);
}

GroundTruth build_ground_truth(const std::vector<MetaRecord>& query_meta,
                               const std::vector<MetaRecord>& db_meta,
                               double epsilon_m) {
  if (epsilon_m < 0) throw ArgumentError("epsilon_m must be non-negative");
  for (const auto& r : db_meta)
    if (!r.gps) throw DataError("database record '" + r.id + "' has no gps");
  GroundTruth gt;
  for (const auto& q : query_meta) {
    if (!q.gps) throw DataError("query record '" + q.id + "' has no gps");
    GroundTruthEntry e;
    for (std::size_t i = 0; i < db_meta.size(); ++i) {
      const double dx = (*q.gps)[0] - (*db_meta[i].gps)[0];
      const double dy = (*q.gps)[1] - (*db_meta[i].gps)[1];
      if (std::sqrt(dx * dx + dy * dy) <= epsilon_m)
        e.positives.push_back(std::uint32_t(i));
    }
    if (!gt.by_query.emplace(q.id, std::move(e)).second)
      throw DataError("duplicate query id '" + q.id + "' in metadata");
  }
  return gt;
}

GroundTruth build_ground_truth_timestamp(
    const std::vector<MetaRecord>& query_meta,
    const std::vector<MetaRecord>& db_meta, double t, double t_margin) {
  if (t <= 0) throw ArgumentError("t must be positive");
  if (t_margin < 0) throw ArgumentError("t_margin must be non-negative");
  for (const auto& r : db_meta)
    if (!r.timestamp)
      throw DataError("database record '" + r.id + "' has no timestamp");
  GroundTruth gt;
  for (const auto& q : query_meta) {
    if (!q.timestamp)
      throw DataError("query record '" + q.id + "' has no timestamp");
    GroundTruthEntry e;
    for (std::size_t i = 0; i < db_meta.size(); ++i) {
      const double dt = std::abs(*q.timestamp - *db_meta[i].timestamp);
      if (dt <= t)
        e.positives.push_back(std::uint32_t(i));
      else if (dt <= t + t_margin)
        e.ambiguous.push_back(std::uint32_t(i));
    }
    if (!gt.by_query.emplace(q.id, std::move(e)).second)
      throw DataError("duplicate query id '" + q.id + "' in metadata");
  }
  return gt;
}

namespace {

EvalReport score_lists(const std::vector<const CandidateList*>& results,
                       const GroundTruth& gt, std::vector<int> ks) {
  if (ks.empty()) throw ArgumentError("at least one K value is required");
  for (int k : ks)
    if (k < 1) throw ArgumentError("recall K values must be positive");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  EvalReport report;
  report.n_queries = results.size();
  report.per_query_hits.reserve(results.size());
  for (const CandidateList* cl : results) {
    const auto& entry = gt.at(cl->query_id);
    int first = -1;
    for (std::size_t r = 0; r < cl->entries.size(); ++r) {
      if (std::binary_search(entry.positives.begin(), entry.positives.end(),
                             cl->entries[r].index)) {
        first = int(r) + 1;
        break;
      }
    }
    report.per_query_hits.push_back(first);
  }
  for (int k : ks) {
    std::size_t hits = 0;
    for (int rank : report.per_query_hits)
      if (rank > 0 && rank <= k) ++hits;
    report.recall_at[k] =
        results.empty() ? 0.0 : 100.0 * double(hits) / double(results.size());
  }
  return report;
}

}  // namespace

EvalReport recall_at_k(const std::vector<CandidateList>& results,
                       const GroundTruth& gt, const std::vector<int>& ks) {
  std::vector<const CandidateList*> ptrs;
  ptrs.reserve(results.size());
  for (const auto& r : results) ptrs.push_back(&r);
  return score_lists(ptrs, gt, ks);
}

EvalReport recall_at_k(const std::vector<RerankResult>& results,
                       const GroundTruth& gt, const std::vector<int>& ks) {
  std::vector<const CandidateList*> ptrs;
  ptrs.reserve(results.size());
  for (const auto& r : results) ptrs.push_back(&r.reranked);
  return score_lists(ptrs, gt, ks);
}

namespace {

nlohmann::json latency_to_json(const LatencyStats& s) {
  return {{"mean_ns", s.mean_ns}, {"p50_ns", s.p50_ns}, {"p99_ns", s.p99_ns}};
}

}  // namespace

std::string report_to_json_string(const EvalReport& report) {
  nlohmann::json j;
  j["n_queries"] = report.n_queries;
  nlohmann::json recalls = nlohmann::json::object();
  for (const auto& [k, pct] : report.recall_at)
    recalls[std::to_string(k)] = pct;
  j["recall_at"] = std::move(recalls);
  j["per_query_hits"] = report.per_query_hits;
  if (report.retrieval_latency || report.refine_latency) {
    nlohmann::json lat = nlohmann::json::object();
    if (report.retrieval_latency)
      lat["retrieval"] = latency_to_json(*report.retrieval_latency);
    if (report.refine_latency)
      lat["refine"] = latency_to_json(*report.refine_latency);
    j["latency"] = std::move(lat);
  }
  return j.dump();
}

namespace {

// Deterministic RNG helpers independent of libstdc++ distribution internals,
// so identical seeds give identical datasets on any build.
struct Rng {
  std::mt19937_64 gen;
  bool has_spare = false;
  double spare = 0.0;

  explicit Rng(std::uint64_t seed) : gen(seed) {}

  double uniform01() {  // [0, 1)
    return double(gen() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }
  double normal() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare = r * std::sin(a);
    has_spare = true;
    return r * std::cos(a);
  }
};

std::vector<double> gaussian_vector(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

void subtract_projection(std::vector<double>& v,
                         const std::vector<double>& unit) {
  double p = 0.0;
  for (std::size_t d = 0; d < v.size(); ++d) p += v[d] * unit[d];
  for (std::size_t d = 0; d < v.size(); ++d) v[d] -= p * unit[d];
}

// Uniform averaging over the candidate and all of its graph neighbors; the
// generation-time stand-in for a trained mixture.
std::vector<double> uniform_neighbor_average(const FeatureMatrix& db,
                                             const ConstraintGraph& graph,
                                             std::uint32_t candidate) {
  const std::size_t dim = db.dim();
  std::vector<double> mean(dim);
  const float* self = db.row_ptr(candidate);
  for (std::size_t d = 0; d < dim; ++d) mean[d] = double(self[d]);
  for (const auto& e : graph.adjacency[candidate]) {
    const float* r = db.row_ptr(e.index);
    for (std::size_t d = 0; d < dim; ++d) mean[d] += double(r[d]);
  }
  const double denom = double(graph.adjacency[candidate].size() + 1);
  for (double& x : mean) x /= denom;
  if (!normalize_unit(std::span<double>(mean)))
    for (std::size_t d = 0; d < dim; ++d) mean[d] = double(self[d]);
  return mean;
}

constexpr std::size_t kOracleRerankK = 10;

double brute_force_r1(const FeatureMatrix& db,
                      const std::vector<QueryFeature>& queries,
                      const GroundTruth& gt) {
  std::size_t hits = 0;
  for (const auto& q : queries) {
    const auto top = knn_search(db, q, 1);
    if (gt.is_positive(q.id, top.entries[0].index)) ++hits;
  }
  return 100.0 * double(hits) / double(queries.size());
}

double oracle_refined_r1(const FeatureMatrix& db, const ConstraintGraph& graph,
                         const std::vector<QueryFeature>& queries,
                         const GroundTruth& gt) {
  const std::size_t k = std::min<std::size_t>(kOracleRerankK, db.count());
  std::size_t hits = 0;
  for (const auto& q : queries) {
    const auto baseline = knn_search(db, q, k);
    double best_dist = 0.0;
    std::uint32_t best_index = 0;
    bool first = true;
    for (const auto& c : baseline.entries) {
      const auto refined = uniform_neighbor_average(db, graph, c.index);
      const double dist = l2_distance(std::span<const float>(q.vector),
                                      std::span<const double>(refined));
      if (first || dist < best_dist) {
        best_dist = dist;
        best_index = c.index;
        first = false;
      }
    }
    if (gt.is_positive(q.id, best_index)) ++hits;
  }
  return 100.0 * double(hits) / double(queries.size());
}

}  // namespace

SynthData generate_synthetic(const SynthSpec& spec) {
  if (spec.n_places == 0 || spec.views_per_place == 0)
    throw ArgumentError("n_places and views_per_place must be positive");
  if (spec.dim < 2) throw ArgumentError("dim must be at least 2");
  if (spec.intra_place_noise < 0)
    throw ArgumentError("intra_place_noise must be non-negative");

  const double spacing = 2.0 * std::numbers::pi / double(spec.n_places);
  if (spec.n_places > 1 && spec.intra_place_noise >= 0.5 * spacing)
    throw GenerationError(
        "intra_place_noise " + std::to_string(spec.intra_place_noise) +
        " is not below half the inter-place separation " +
        std::to_string(0.5 * spacing) + "; lower the noise or n_places");

  Rng rng(spec.seed);
  const std::size_t dim = spec.dim;

  // Random orthonormal 2-plane holding the ring of place centers.
  std::vector<double> e1 = gaussian_vector(rng, dim);
  if (!normalize_unit(std::span<double>(e1)))
    throw GenerationError("degenerate basis draw");
  std::vector<double> e2;
  do {
    e2 = gaussian_vector(rng, dim);
    subtract_projection(e2, e1);
  } while (!normalize_unit(std::span<double>(e2)));

  // In-plane angular jitter is bounded uniform. On top of it, a small
  // fraction of samples are aliased outliers that land up to 1.5 place
  // spacings away: the retrieval-confusing views whose constraint neighbors
  // still sit at the true place. A small out-of-plane jitter keeps distances
  // generic. Noise 0 disables all of it.
  const double ortho_scale = 0.25 * spec.intra_place_noise;
  const double outlier_rate = spec.intra_place_noise > 0 ? 0.25 : 0.0;
  const double outlier_span =
      std::min(1.2 * spacing, 0.5 * std::numbers::pi);
  auto sample_point = [&](double place_angle, bool allow_outlier) {
    const bool outlier = allow_outlier && rng.uniform01() < outlier_rate;
    const double span =
        outlier ? outlier_span : spec.intra_place_noise;
    const double angle = place_angle + rng.uniform(-span, span);
    std::vector<double> v(dim, 0.0);
    for (std::size_t d = 0; d < dim; ++d)
      v[d] = std::cos(angle) * e1[d] + std::sin(angle) * e2[d];
    if (ortho_scale > 0 && dim > 2) {
      auto g = gaussian_vector(rng, dim);
      subtract_projection(g, e1);
      subtract_projection(g, e2);
      if (normalize_unit(std::span<double>(g)))
        for (std::size_t d = 0; d < dim; ++d) v[d] += ortho_scale * g[d];
    }
    if (!normalize_unit(std::span<double>(v)))
      throw GenerationError("degenerate sample draw");
    return v;
  };

  // GPS grid: one cell per place (and per distractor), spaced 10 * epsilon
  // so the 25 m threshold separates cells with a wide margin.
  constexpr double kEpsilonM = 25.0;
  constexpr double kCellSpacing = 10.0 * kEpsilonM;
  const std::size_t total_cells = spec.n_places + spec.distractor_count;
  const std::size_t grid_cols =
      std::size_t(std::ceil(std::sqrt(double(total_cells))));
  auto cell_center = [&](std::size_t cell) {
    return std::array<double, 2>{double(cell % grid_cols) * kCellSpacing,
                                 double(cell / grid_cols) * kCellSpacing};
  };
  auto jittered_gps = [&](std::size_t cell) {
    auto c = cell_center(cell);
    c[0] += rng.uniform(-kEpsilonM / 4, kEpsilonM / 4);
    c[1] += rng.uniform(-kEpsilonM / 4, kEpsilonM / 4);
    return c;
  };

  const std::size_t n_db =
      spec.n_places * spec.views_per_place + spec.distractor_count;
  std::vector<float> db_data(n_db * dim);
  std::vector<MetaRecord> db_meta(n_db);
  std::vector<MatchStats> match_stats;

  std::size_t row = 0;
  for (std::size_t p = 0; p < spec.n_places; ++p) {
    const double theta = spacing * double(p);
    for (std::size_t v = 0; v < spec.views_per_place; ++v, ++row) {
      const auto point = sample_point(theta, true);
      for (std::size_t d = 0; d < dim; ++d)
        db_data[row * dim + d] = float(point[d]);
      MetaRecord r;
      r.id = "db_p" + std::to_string(p) + "_v" + std::to_string(v);
      r.gps = jittered_gps(p);
      r.timestamp = double(p) * 1000.0 + double(v);
      db_meta[row] = std::move(r);
    }
  }
  for (std::size_t i = 0; i < spec.distractor_count; ++i, ++row) {
    auto g = gaussian_vector(rng, dim);
    if (!normalize_unit(std::span<double>(g)))
      throw GenerationError("degenerate distractor draw");
    for (std::size_t d = 0; d < dim; ++d) db_data[row * dim + d] = float(g[d]);
    MetaRecord r;
    r.id = "db_x" + std::to_string(i);
    r.gps = jittered_gps(spec.n_places + i);
    r.timestamp = 1e7 + double(i) * 1000.0;
    db_meta[row] = std::move(r);
  }

  SynthData out;
  out.db = FeatureMatrix::from_unit_rows(n_db, dim, std::move(db_data));
  out.db_meta = std::move(db_meta);

  out.queries.reserve(spec.n_places);
  out.query_meta.reserve(spec.n_places);
  for (std::size_t p = 0; p < spec.n_places; ++p) {
    const auto point = sample_point(spacing * double(p), false);
    std::vector<float> qv(dim);
    for (std::size_t d = 0; d < dim; ++d) qv[d] = float(point[d]);
    const std::string id = "q" + std::to_string(p);
    out.queries.push_back(QueryFeature{id, std::move(qv)});
    MetaRecord r;
    r.id = id;
    r.gps = jittered_gps(p);
    r.timestamp = double(p) * 1000.0 + double(spec.views_per_place);
    out.query_meta.push_back(std::move(r));
  }

  out.gt = build_ground_truth(out.query_meta, out.db_meta, kEpsilonM);

  switch (spec.constraint_kind) {
    case ConstraintKind::gps:
      out.graph = build_gps_graph(out.db_meta, kEpsilonM);
      break;
    case ConstraintKind::timestamp:
      out.graph = build_timestamp_graph(out.db_meta,
                                        double(spec.views_per_place), 10.0);
      break;
    case ConstraintKind::matching: {
      // Same-place pairs get a strong inlier ratio, consecutive places a
      // weak one, so sigma = 0.5 keeps exactly the same-place edges.
      for (std::size_t p = 0; p < spec.n_places; ++p) {
        const std::size_t base = p * spec.views_per_place;
        for (std::size_t a = 0; a < spec.views_per_place; ++a)
          for (std::size_t b = a + 1; b < spec.views_per_place; ++b)
            match_stats.push_back({std::uint32_t(base + a),
                                   std::uint32_t(base + b),
                                   600 + (a + b) % 100, 1000});
        if (p + 1 < spec.n_places)
          match_stats.push_back(
              {std::uint32_t(base),
               std::uint32_t(base + spec.views_per_place), 100, 1000});
      }
      out.graph = build_matching_graph(n_db, match_stats, 0.5);
      break;
    }
    case ConstraintKind::selfsim: {
      // Threshold halfway between the same-place and adjacent-place chord
      // similarities.
      const double delta = std::cos(0.5 * spacing);
      out.graph = build_selfsim_graph(out.db, std::clamp(delta, -0.99, 0.99));
      break;
    }
  }

  out.baseline_r1 = brute_force_r1(out.db, out.queries, out.gt);
  out.oracle_r1 = oracle_refined_r1(out.db, out.graph, out.queries, out.gt);
  if (out.baseline_r1 < 100.0 && out.oracle_r1 <= out.baseline_r1)
    throw GenerationError(
        "uniform-averaging refinement did not improve R@1 (baseline " +
        std::to_string(out.baseline_r1) + ", refined " +
        std::to_string(out.oracle_r1) + "); lower intra_place_noise");
  return out;
}

namespace {

LatencyStats summarize_ns(std::vector<double> samples) {
  LatencyStats s;
  if (samples.empty()) return s;
  double sum = 0.0;
  for (double x : samples) sum += x;
  s.mean_ns = sum / double(samples.size());
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    const auto idx = std::size_t(std::llround(q * double(samples.size() - 1)));
    return samples[idx];
  };
  s.p50_ns = quantile(0.5);
  s.p99_ns = quantile(0.99);
  return s;
}

}  // namespace

BenchReport latency_bench(const FeatureMatrix& db, const ConstraintGraph& graph,
                          const MoFWeights& weights,
                          std::span<const QueryFeature> queries, std::size_t k,
                          std::size_t l, std::size_t repetitions,
                          std::string note) {
  if (queries.empty()) throw ArgumentError("latency_bench needs queries");
  if (repetitions == 0) throw ArgumentError("repetitions must be positive");

  // warm-up pass
  for (const auto& q : queries) {
    auto baseline = knn_search(db, q, k);
    (void)rerank_given_baseline(db, graph, weights, q, std::move(baseline), l);
  }

  std::vector<double> retrieval_ns, refine_ns;
  retrieval_ns.reserve(repetitions * queries.size());
  refine_ns.reserve(repetitions * queries.size());
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (const auto& q : queries) {
      const auto t0 = std::chrono::steady_clock::now();
      auto baseline = knn_search(db, q, k);
      const auto t1 = std::chrono::steady_clock::now();
      const auto result =
          rerank_given_baseline(db, graph, weights, q, std::move(baseline), l);
      retrieval_ns.push_back(double(
          std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0)
              .count()));
      refine_ns.push_back(double(result.refine_time_ns));
    }
  }

  BenchReport report;
  report.retrieval = summarize_ns(std::move(retrieval_ns));
  report.refine = summarize_ns(std::move(refine_ns));
  report.repetitions = repetitions;
  report.n_queries = queries.size();
  report.k = k;
  report.l = l;
  report.dim = db.dim();
  report.threads = 1;
  report.note = std::move(note);
  return report;
}

std::string bench_to_json_string(const BenchReport& report) {
  nlohmann::json j;
  j["retrieval"] = latency_to_json(report.retrieval);
  j["refine"] = latency_to_json(report.refine);
  j["repetitions"] = report.repetitions;
  j["n_queries"] = report.n_queries;
  j["k"] = report.k;
  j["l"] = report.l;
  j["dim"] = report.dim;
  j["threads"] = report.threads;
  j["note"] = report.note;
  return j.dump();
}

}  // namespace vpr
