#include "vpr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <thread>

#include "vpr/errors.hpp"

namespace vpr {

RerankResult rerank_given_baseline(const FeatureMatrix& db,
                                   const ConstraintGraph& graph,
                                   const MoFWeights& weights,
                                   const QueryFeature& q,
                                   CandidateList baseline, std::size_t l) {
  if (l != weights.l)
    throw ArgumentError("l = " + std::to_string(l) +
                        " does not match weight rows " +
                        std::to_string(weights.l));
  if (db.dim() != weights.dim)
    throw ArgumentError("database dimension does not match weight dimension");
  if (graph.n != db.count())
    throw ArgumentError("graph node count does not match database size");

  const auto t0 = std::chrono::steady_clock::now();

  const std::size_t k = baseline.entries.size();
  struct Scored {
    double distance;
    std::size_t baseline_rank;
  };
  std::vector<Scored> scored(k);
  std::vector<const float*> rows(l);
  for (std::size_t r = 0; r < k; ++r) {
    const std::uint32_t idx = baseline.entries[r].index;
    const NeighborSet ns = select_neighbors(graph, idx, l);
    for (std::size_t j = 0; j < l; ++j) rows[j] = db.row_ptr(ns.neighbors[j]);
    const auto refined = refine_rows(weights, rows);
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

RerankResult rerank(const FeatureMatrix& db, const ConstraintGraph& graph,
                    const MoFWeights& weights, const QueryFeature& q,
                    std::size_t k, std::size_t l) {
  return rerank_given_baseline(db, graph, weights, q, knn_search(db, q, k), l);
}

BatchRerank rerank_batch(const FeatureMatrix& db, const ConstraintGraph& graph,
                         const MoFWeights& weights,
                         std::span<const QueryFeature> queries, std::size_t k,
                         std::size_t l, unsigned threads) {
  BatchRerank out;
  out.results.resize(queries.size());
  if (queries.empty()) return out;

  if (threads == 0) threads = std::thread::hardware_concurrency();
  if (threads == 0) threads = 1;
  threads = std::min<std::size_t>(threads, queries.size());

  std::vector<std::string> failures(queries.size());
  auto worker = [&](unsigned tid) {
    for (std::size_t i = tid; i < queries.size(); i += threads) {
      try {
        out.results[i] = rerank(db, graph, weights, queries[i], k, l);
      } catch (const std::exception& e) {
        failures[i] = e.what();
        if (failures[i].empty()) failures[i] = "unknown error";
      }
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < queries.size(); ++i)
    if (!out.results[i]) out.errors.push_back({i, failures[i]});
  return out;
}

}  // namespace vpr
