#include "vpr/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "vpr/errors.hpp"

namespace vpr {

namespace {

void check_beta(double beta) {
  if (beta < 0.0 || beta > 1.0)
    throw ArgumentError("beta must lie in [0, 1]");
}

// k nearest rows of db row `self`, self excluded.
std::vector<std::uint32_t> nearest_rows_excluding_self(const FeatureMatrix& db,
                                                       std::uint32_t self,
                                                       std::size_t k) {
  const std::size_t fetch = std::min(db.count(), k + 1);
  const auto cl = knn_search(db, "", db.row(self), fetch);
  std::vector<std::uint32_t> out;
  out.reserve(k);
  for (const auto& c : cl.entries) {
    if (c.index == self) continue;
    out.push_back(c.index);
    if (out.size() == k) break;
  }
  return out;
}

}  // namespace

std::vector<float> expanded_query(const FeatureMatrix& db,
                                  const QueryFeature& q,
                                  const BaselineConfig& cfg) {
  check_beta(cfg.beta);
  if (cfg.k_neighbors == 0)
    throw ArgumentError("query expansion requires k_neighbors >= 1");
  if (cfg.k_neighbors > db.count())
    throw ArgumentError("k_neighbors exceeds database size");

  const auto neighbors = knn_search(db, q, cfg.k_neighbors);
  const std::size_t dim = db.dim();
  std::vector<double> mean(dim, 0.0);
  for (const auto& c : neighbors.entries) {
    const float* r = db.row_ptr(c.index);
    for (std::size_t d = 0; d < dim; ++d) mean[d] += double(r[d]);
  }
  for (double& x : mean) x /= double(cfg.k_neighbors);

  std::vector<float> expanded(dim);
  for (std::size_t d = 0; d < dim; ++d)
    expanded[d] = static_cast<float>(cfg.beta * double(q.vector[d]) +
                                     (1.0 - cfg.beta) * mean[d]);
  return expanded;
}

CandidateList query_expansion(const FeatureMatrix& db, const QueryFeature& q,
                              const BaselineConfig& cfg, std::size_t top_n) {
  const auto q_e = expanded_query(db, q, cfg);
  return knn_search(db, q.id, q_e, top_n);
}

FeatureMatrix database_augmentation(const FeatureMatrix& db,
                                    const BaselineConfig& cfg) {
  if (cfg.k_neighbors > 0 && cfg.k_neighbors >= db.count())
    throw ArgumentError("k_neighbors must be smaller than the database size");
  const std::size_t n = db.count();
  const std::size_t dim = db.dim();
  std::vector<float> out(db.data().begin(), db.data().end());
  if (cfg.k_neighbors == 0)
    return FeatureMatrix::from_unit_rows(n, dim, std::move(out));

  for (std::size_t i = 0; i < n; ++i) {
    const auto neighbors = nearest_rows_excluding_self(
        db, static_cast<std::uint32_t>(i), cfg.k_neighbors);
    std::vector<double> mean(dim);
    const float* self = db.row_ptr(i);
    for (std::size_t d = 0; d < dim; ++d) mean[d] = double(self[d]);
    for (const std::uint32_t idx : neighbors) {
      const float* r = db.row_ptr(idx);
      for (std::size_t d = 0; d < dim; ++d) mean[d] += double(r[d]);
    }
    const double denom = double(neighbors.size() + 1);
    for (std::size_t d = 0; d < dim; ++d) mean[d] /= denom;
    if (!normalize_unit(std::span<double>(mean)))
      throw DataError("augmented row " + std::to_string(i) +
                      " has zero norm");
    for (std::size_t d = 0; d < dim; ++d)
      out[i * dim + d] = static_cast<float>(mean[d]);
  }
  return FeatureMatrix::from_unit_rows(n, dim, std::move(out));
}

CandidateList superglobal_refine(const FeatureMatrix& db,
                                 const QueryFeature& q,
                                 const BaselineConfig& cfg) {
  check_beta(cfg.beta);
  if (cfg.top_m == 0 || cfg.top_m > db.count())
    throw ArgumentError("top_m must lie in [1, N]");
  if (cfg.k_neighbors == 0 || cfg.k_neighbors >= db.count())
    throw ArgumentError("k_neighbors must lie in [1, N)");

  const auto baseline = knn_search(db, q, cfg.top_m);
  const std::size_t dim = db.dim();
  struct Scored {
    double distance;
    std::size_t baseline_rank;
  };
  std::vector<Scored> scored(cfg.top_m);
  for (std::size_t r = 0; r < cfg.top_m; ++r) {
    const std::uint32_t idx = baseline.entries[r].index;
    const auto neighbors =
        nearest_rows_excluding_self(db, idx, cfg.k_neighbors);
    std::vector<double> mean(dim, 0.0);
    for (const std::uint32_t nb : neighbors) {
      const float* rp = db.row_ptr(nb);
      for (std::size_t d = 0; d < dim; ++d) mean[d] += double(rp[d]);
    }
    for (double& x : mean) x /= double(neighbors.size());
    const float* self = db.row_ptr(idx);
    std::vector<double> refined(dim);
    for (std::size_t d = 0; d < dim; ++d)
      refined[d] = (1.0 - cfg.beta) * double(self[d]) + cfg.beta * mean[d];
    if (!normalize_unit(std::span<double>(refined)))
      throw DataError("refined candidate " + std::to_string(idx) +
                      " has zero norm");
    scored[r] = {l2_distance(std::span<const float>(q.vector),
                             std::span<const double>(refined)),
                 r};
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.baseline_rank < b.baseline_rank;
  });
  CandidateList out;
  out.query_id = q.id;
  out.entries.reserve(cfg.top_m);
  for (const auto& s : scored)
    out.entries.push_back(
        {baseline.entries[s.baseline_rank].index, s.distance});
  return out;
}

std::vector<double> adaptive_mof_weights(std::span<const float> query,
                                         std::span<const float> neighbor_feats,
                                         bool clamp_negative) {
  constexpr double kEps = 1e-8;
  const std::size_t dim = query.size();
  if (dim == 0 || neighbor_feats.size() % dim != 0)
    throw ArgumentError("neighbor feature buffer is not a multiple of D");
  const std::size_t l = neighbor_feats.size() / dim;

  double qn = 0.0;
  for (float x : query) qn += double(x) * double(x);
  qn = std::sqrt(qn);

  std::vector<double> sims(l);
  for (std::size_t j = 0; j < l; ++j) {
    std::span<const float> row = neighbor_feats.subspan(j * dim, dim);
    double s = 0.0, rn = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      s += double(row[d]) * double(query[d]);
      rn += double(row[d]) * double(row[d]);
    }
    double sim = s / (std::sqrt(rn) * qn + kEps);
    if (clamp_negative && sim < 0.0) sim = 0.0;
    sims[j] = sim;
  }
  double sum = 0.0;
  for (double s : sims) sum += s;
  std::vector<double> weights(l);
  for (std::size_t j = 0; j < l; ++j) weights[j] = sims[j] / (sum + kEps);
  return weights;
}

RerankResult rerank_adaptive(const FeatureMatrix& db,
                             const ConstraintGraph& graph,
                             const QueryFeature& q, std::size_t k,
                             std::size_t l, bool clamp_negative) {
  if (graph.n != db.count())
    throw ArgumentError("graph node count does not match database size");
  CandidateList baseline = knn_search(db, q, k);

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t dim = db.dim();
  struct Scored {
    double distance;
    std::size_t baseline_rank;
  };
  std::vector<Scored> scored(k);
  std::vector<float> gathered(l * dim);
  std::vector<const float*> rows(l);
  for (std::size_t r = 0; r < k; ++r) {
    const std::uint32_t idx = baseline.entries[r].index;
    const NeighborSet ns = select_neighbors(graph, idx, l);
    for (std::size_t j = 0; j < l; ++j) {
      const float* rp = db.row_ptr(ns.neighbors[j]);
      std::copy(rp, rp + dim, gathered.begin() + j * dim);
      rows[j] = db.row_ptr(ns.neighbors[j]);
    }
    const auto weights = adaptive_mof_weights(
        std::span<const float>(q.vector), std::span<const float>(gathered),
        clamp_negative);
    const auto refined = refine_scalar(
        std::span<const double>(weights),
        std::span<const float* const>(rows), dim);
    scored[r] = {l2_distance(std::span<const float>(q.vector),
                             std::span<const double>(refined)),
                 r};
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.baseline_rank < b.baseline_rank;
  });
  const auto t1 = std::chrono::steady_clock::now();

  RerankResult out;
  out.query_id = q.id;
  out.reranked.query_id = q.id;
  out.reranked.entries.reserve(k);
  for (const auto& s : scored)
    out.reranked.entries.push_back(
        {baseline.entries[s.baseline_rank].index, s.distance});
  out.baseline = std::move(baseline);
  out.refine_time_ns =
      std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
  return out;
}

}  // namespace vpr
