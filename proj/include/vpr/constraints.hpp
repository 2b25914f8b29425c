#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vpr/feature_store.hpp"

namespace vpr {

// The four non-visual data associations available between database images.
enum class ConstraintKind { gps, timestamp, matching, selfsim };

std::string to_string(ConstraintKind kind);
ConstraintKind constraint_kind_from_string(std::string_view s);

struct GraphEdge {
  std::uint32_t index;
  float strength;  // larger = stronger association
};

// Sparse undirected graph over database rows. No self-loops are stored; the
// candidate itself is injected by select_neighbors. Adjacency lists are
// sorted by neighbor index and the graph is symmetric by construction.
struct ConstraintGraph {
  ConstraintKind kind = ConstraintKind::gps;
  std::size_t n = 0;
  std::vector<std::vector<GraphEdge>> adjacency;
  std::map<std::string, double> params;
  // Timestamp pairs falling in the (t, t + t_margin] band: neither similar
  // nor dissimilar, exported so training labels can mask them. i < j.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> ambiguous;
};

// Local-feature match statistics for one image pair.
struct MatchStats {
  std::uint32_t i = 0;
  std::uint32_t j = 0;
  std::uint64_t inliers = 0;
  std::uint64_t total = 0;
};

// Exactly l row ids, neighbors[0] == candidate; deficits are padded by
// repeating the candidate and flagged.
struct NeighborSet {
  std::uint32_t candidate = 0;
  std::vector<std::uint32_t> neighbors;
  bool padded = false;
};

// Edge iff planar distance(gps_i, gps_j) <= epsilon_m; strength = -distance.
ConstraintGraph build_gps_graph(const std::vector<MetaRecord>& meta,
                                double epsilon_m);

// Edge iff |t_i - t_j| <= t; pairs with t < |dt| <= t + t_margin are kept out
// of the adjacency and recorded as ambiguous; strength = -|dt|.
ConstraintGraph build_timestamp_graph(const std::vector<MetaRecord>& meta,
                                      double t, double t_margin);

// Edge iff total > 0 and inliers/total > sigma; strength = inlier ratio.
ConstraintGraph build_matching_graph(std::size_t n,
                                     const std::vector<MatchStats>& stats,
                                     double sigma);

// Edge iff delta < cos(i, j) < 1 (strict upper bound drops exact duplicates).
// Works in row blocks; only above-threshold pairs are ever stored.
ConstraintGraph build_selfsim_graph(const FeatureMatrix& db, double delta);

// neighbors[0] = candidate, then graph neighbors by descending strength
// (ascending index on ties), padded with the candidate itself.
NeighborSet select_neighbors(const ConstraintGraph& graph,
                             std::uint32_t candidate, std::size_t l);

// CSV with header "i,j,inliers,total".
std::vector<MatchStats> load_match_stats(const std::filesystem::path& path);

// JSON graph serialization (test fixtures and the build-constraints command).
std::string graph_to_json_string(const ConstraintGraph& g);
ConstraintGraph graph_from_json_string(const std::string& text);
void save_graph(const std::filesystem::path& path, const ConstraintGraph& g);
ConstraintGraph load_graph(const std::filesystem::path& path);

}  // namespace vpr
