#pragma once

#include <span>
#include <vector>

#include "vpr/constraints.hpp"
#include "vpr/feature_store.hpp"
#include "vpr/pipeline.hpp"

namespace vpr {

struct BaselineConfig {
  double beta = 0.15;          // query/candidate mixing factor, in [0, 1]
  std::size_t k_neighbors = 10;
  std::size_t top_m = 100;     // refinement scope for superglobal_refine
};

// q_e = beta * q + (1 - beta) * mean of q's k nearest database rows.
// Deliberately not renormalized.
std::vector<float> expanded_query(const FeatureMatrix& db,
                                  const QueryFeature& q,
                                  const BaselineConfig& cfg);

// Second retrieval with the expanded query.
CandidateList query_expansion(const FeatureMatrix& db, const QueryFeature& q,
                              const BaselineConfig& cfg, std::size_t top_n);

// Each row becomes the mean of itself and its k nearest database rows
// (self excluded from the neighbor set), then renormalized. k = 0 is the
// degenerate identity. The input matrix is untouched.
FeatureMatrix database_augmentation(const FeatureMatrix& db,
                                    const BaselineConfig& cfg);

// Approximate reconstruction of top-M global-feature refinement: each of the
// top_m candidates is mixed with the mean of its k nearest database rows as
// (1 - beta) * f_c + beta * mean, renormalized, and the top_m re-ranked.
CandidateList superglobal_refine(const FeatureMatrix& db,
                                 const QueryFeature& q,
                                 const BaselineConfig& cfg);

// w_j = sim(f_nj, f_q) / (sum_k sim(f_nk, f_q) + 1e-8). Negative cosine
// similarities are clamped to zero first unless clamp_negative is false.
std::vector<double> adaptive_mof_weights(std::span<const float> query,
                                         std::span<const float> neighbor_feats,
                                         bool clamp_negative = true);

// Re-rank using the adaptive weights with scalar-mode refinement.
RerankResult rerank_adaptive(const FeatureMatrix& db,
                             const ConstraintGraph& graph,
                             const QueryFeature& q, std::size_t k,
                             std::size_t l, bool clamp_negative = true);

}  // namespace vpr
