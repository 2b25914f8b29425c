#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vpr/constraints.hpp"
#include "vpr/feature_store.hpp"
#include "vpr/mof.hpp"
#include "vpr/pipeline.hpp"

namespace vpr {

struct GroundTruthEntry {
  std::vector<std::uint32_t> positives;  // sorted
  std::vector<std::uint32_t> ambiguous;  // sorted; timestamp margin band only
};

struct GroundTruth {
  std::unordered_map<std::string, GroundTruthEntry> by_query;

  const GroundTruthEntry& at(const std::string& query_id) const;
  bool is_positive(const std::string& query_id, std::uint32_t index) const;
  bool is_ambiguous(const std::string& query_id, std::uint32_t index) const;
};

// Positives per query: database rows within epsilon_m planar meters.
GroundTruth build_ground_truth(const std::vector<MetaRecord>& query_meta,
                               const std::vector<MetaRecord>& db_meta,
                               double epsilon_m);

// Timestamp variant: |dt| <= t positive, (t, t + t_margin] ambiguous.
GroundTruth build_ground_truth_timestamp(
    const std::vector<MetaRecord>& query_meta,
    const std::vector<MetaRecord>& db_meta, double t, double t_margin);

struct LatencyStats {
  double mean_ns = 0;
  double p50_ns = 0;
  double p99_ns = 0;
};

struct EvalReport {
  std::map<int, double> recall_at;  // K -> percentage in [0, 100]
  std::size_t n_queries = 0;
  // Per query, 1-based rank of the first positive in the scored list
  // (-1 when no positive appears); recall at any K derives from this.
  std::vector<int> per_query_hits;
  std::optional<LatencyStats> retrieval_latency;
  std::optional<LatencyStats> refine_latency;
};

EvalReport recall_at_k(const std::vector<CandidateList>& results,
                       const GroundTruth& gt, const std::vector<int>& ks);
EvalReport recall_at_k(const std::vector<RerankResult>& results,
                       const GroundTruth& gt, const std::vector<int>& ks);

std::string report_to_json_string(const EvalReport& report);

// Desk-scale synthetic benchmark. Place centers sit on a circle in a random
// 2-plane of the feature space; views and queries are angular perturbations
// of magnitude intra_place_noise. Metadata lays places out on a GPS grid
// with 10 * epsilon spacing (epsilon = 25 m) so geographic ground truth
// matches place membership exactly.
struct SynthSpec {
  std::size_t n_places = 50;
  std::size_t views_per_place = 8;
  std::size_t dim = 64;
  double intra_place_noise = 0.04;
  std::size_t distractor_count = 0;
  ConstraintKind constraint_kind = ConstraintKind::gps;
  std::uint64_t seed = 5;
};

struct SynthData {
  FeatureMatrix db;
  std::vector<MetaRecord> db_meta;
  std::vector<QueryFeature> queries;
  std::vector<MetaRecord> query_meta;
  GroundTruth gt;
  ConstraintGraph graph;
  // Brute-force figures computed at generation time: baseline R@1 and the
  // R@1 after uniform averaging over each candidate's constraint neighbors.
  double baseline_r1 = 0;
  double oracle_r1 = 0;
};

// Throws GenerationError when the noise margin is violated or when the
// uniform-averaging oracle fails to improve an imperfect baseline.
SynthData generate_synthetic(const SynthSpec& spec);

struct BenchReport {
  LatencyStats retrieval;
  LatencyStats refine;
  std::size_t repetitions = 0;
  std::size_t n_queries = 0;
  std::size_t k = 0;
  std::size_t l = 0;
  std::size_t dim = 0;
  int threads = 1;
  std::string note;
};

// Single-threaded per-query wall times; one warm-up pass runs first. The
// refine stage excludes retrieval.
BenchReport latency_bench(const FeatureMatrix& db, const ConstraintGraph& graph,
                          const MoFWeights& weights,
                          std::span<const QueryFeature> queries, std::size_t k,
                          std::size_t l, std::size_t repetitions,
                          std::string note = {});

std::string bench_to_json_string(const BenchReport& report);

}  // namespace vpr
