#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vpr/constraints.hpp"
#include "vpr/feature_store.hpp"
#include "vpr/mof.hpp"

namespace vpr {

// Re-ranked retrieval for one query. reranked permutes baseline's indices;
// its distances are measured against the refined candidate features.
struct RerankResult {
  std::string query_id;
  CandidateList baseline;
  CandidateList reranked;
  std::int64_t refine_time_ns = 0;  // refine + sort stage only
};

// Refine + re-rank a pre-retrieved candidate list. Only this stage is timed.
RerankResult rerank_given_baseline(const FeatureMatrix& db,
                                   const ConstraintGraph& graph,
                                   const MoFWeights& weights,
                                   const QueryFeature& q,
                                   CandidateList baseline, std::size_t l);

// Retrieve top-k, resolve neighbor sets, refine, and sort by refined
// distance (ties keep the baseline order).
RerankResult rerank(const FeatureMatrix& db, const ConstraintGraph& graph,
                    const MoFWeights& weights, const QueryFeature& q,
                    std::size_t k, std::size_t l);

struct BatchError {
  std::size_t query_index;
  std::string message;
};

// results[i] corresponds to queries[i]; failed queries leave an empty slot
// and an entry in errors (sorted by query index).
struct BatchRerank {
  std::vector<std::optional<RerankResult>> results;
  std::vector<BatchError> errors;
};

// Fans queries out over `threads` workers (0 = hardware concurrency).
// Results are identical for any thread count.
BatchRerank rerank_batch(const FeatureMatrix& db, const ConstraintGraph& graph,
                         const MoFWeights& weights,
                         std::span<const QueryFeature> queries, std::size_t k,
                         std::size_t l, unsigned threads = 0);

}  // namespace vpr
