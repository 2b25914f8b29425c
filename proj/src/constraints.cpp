#include "vpr/constraints.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vpr/errors.hpp"

namespace vpr {

namespace {

// Edges are emitted with i < j in ascending order, so per-node adjacency
// lists come out sorted by index without a final sort.
struct GraphBuilder {
  explicit GraphBuilder(std::size_t n) : adjacency(n) {}
  void add_edge(std::uint32_t i, std::uint32_t j, float strength) {
    adjacency[i].push_back({j, strength});
    adjacency[j].push_back({i, strength});
  }
  std::vector<std::vector<GraphEdge>> adjacency;
};

void require_gps(const std::vector<MetaRecord>& meta) {
  for (const auto& r : meta)
    if (!r.gps) throw DataError("metadata record '" + r.id + "' has no gps");
}

void require_timestamp(const std::vector<MetaRecord>& meta) {
  for (const auto& r : meta)
    if (!r.timestamp)
      throw DataError("metadata record '" + r.id + "' has no timestamp");
}

}  // namespace

std::string to_string(ConstraintKind kind) {
  switch (kind) {
    case ConstraintKind::gps: return "gps";
    case ConstraintKind::timestamp: return "timestamp";
    case ConstraintKind::matching: return "matching";
    case ConstraintKind::selfsim: return "selfsim";
  }
  throw ArgumentError("invalid constraint kind");
}

ConstraintKind constraint_kind_from_string(std::string_view s) {
  if (s == "gps") return ConstraintKind::gps;
  if (s == "timestamp") return ConstraintKind::timestamp;
  if (s == "matching") return ConstraintKind::matching;
  if (s == "selfsim") return ConstraintKind::selfsim;
  throw ArgumentError("unknown constraint kind: " + std::string(s));
}

ConstraintGraph build_gps_graph(const std::vector<MetaRecord>& meta,
                                double epsilon_m) {
  if (epsilon_m < 0) throw ArgumentError("epsilon_m must be non-negative");
  require_gps(meta);
  const std::size_t n = meta.size();
  GraphBuilder b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& gi = *meta[i].gps;
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& gj = *meta[j].gps;
      const double dx = gi[0] - gj[0];
      const double dy = gi[1] - gj[1];
      const double d = std::sqrt(dx * dx + dy * dy);
      if (d <= epsilon_m)
        b.add_edge(std::uint32_t(i), std::uint32_t(j), float(-d));
    }
  }
  ConstraintGraph g;
  g.kind = ConstraintKind::gps;
  g.n = n;
  g.adjacency = std::move(b.adjacency);
  g.params = {{"epsilon_m", epsilon_m}};
  return g;
}

ConstraintGraph build_timestamp_graph(const std::vector<MetaRecord>& meta,
                                      double t, double t_margin) {
  if (t <= 0) throw ArgumentError("t must be positive");
  if (t_margin < 0) throw ArgumentError("t_margin must be non-negative");
  require_timestamp(meta);
  const std::size_t n = meta.size();
  GraphBuilder b(n);
  ConstraintGraph g;
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = *meta[i].timestamp;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dt = std::abs(ti - *meta[j].timestamp);
      if (dt <= t) {
        b.add_edge(std::uint32_t(i), std::uint32_t(j), float(-dt));
      } else if (dt <= t + t_margin) {
        g.ambiguous.emplace_back(std::uint32_t(i), std::uint32_t(j));
      }
    }
  }
  g.kind = ConstraintKind::timestamp;
  g.n = n;
  g.adjacency = std::move(b.adjacency);
  g.params = {{"t", t}, {"t_margin", t_margin}};
  return g;
}

ConstraintGraph build_matching_graph(std::size_t n,
                                     const std::vector<MatchStats>& stats,
                                     double sigma) {
  if (sigma <= 0 || sigma >= 1)
    throw ArgumentError("sigma must lie in (0, 1)");
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  GraphBuilder b(n);
  for (const auto& s : stats) {
    if (s.i >= n || s.j >= n)
      throw DataError("match stats pair (" + std::to_string(s.i) + ", " +
                      std::to_string(s.j) + ") references a row >= " +
                      std::to_string(n));
    if (s.i == s.j)
      throw DataError("match stats pair (" + std::to_string(s.i) + ", " +
                      std::to_string(s.j) + ") is a self-pair");
    if (s.inliers > s.total)
      throw DataError("match stats pair (" + std::to_string(s.i) + ", " +
                      std::to_string(s.j) + ") has inliers > total");
    const auto key = std::minmax(s.i, s.j);
    if (!seen.insert(key).second)
      throw DataError("duplicate match stats pair (" + std::to_string(s.i) +
                      ", " + std::to_string(s.j) + ")");
    if (s.total == 0) continue;
    const double ratio = double(s.inliers) / double(s.total);
    if (ratio > sigma) b.add_edge(key.first, key.second, float(ratio));
  }
  for (auto& adj : b.adjacency)
    std::sort(adj.begin(), adj.end(),
              [](const GraphEdge& a, const GraphEdge& c) {
                return a.index < c.index;
              });
  ConstraintGraph g;
  g.kind = ConstraintKind::matching;
  g.n = n;
  g.adjacency = std::move(b.adjacency);
  g.params = {{"sigma", sigma}};
  return g;
}

ConstraintGraph build_selfsim_graph(const FeatureMatrix& db, double delta) {
  if (delta <= -1 || delta >= 1)
    throw ArgumentError("delta must lie in (-1, 1)");
  const std::size_t n = db.count();
  GraphBuilder b(n);
  // Row blocks keep the working set small; the full similarity matrix is
  // never formed.
  constexpr std::size_t kBlock = 256;
  for (std::size_t b0 = 0; b0 < n; b0 += kBlock) {
    const std::size_t b1 = std::min(n, b0 + kBlock);
    for (std::size_t i = b0; i < b1; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double sim = dot(db.row(i), db.row(j));
        if (sim > delta && sim < 1.0)
          b.add_edge(std::uint32_t(i), std::uint32_t(j), float(sim));
      }
    }
  }
  ConstraintGraph g;
  g.kind = ConstraintKind::selfsim;
  g.n = n;
  g.adjacency = std::move(b.adjacency);
  g.params = {{"delta", delta}};
  return g;
}

NeighborSet select_neighbors(const ConstraintGraph& graph,
                             std::uint32_t candidate, std::size_t l) {
  if (candidate >= graph.n)
    throw ArgumentError("candidate " + std::to_string(candidate) +
                        " out of range for graph with n = " +
                        std::to_string(graph.n));
  if (l == 0) throw ArgumentError("l must be positive");

  NeighborSet ns;
  ns.candidate = candidate;
  ns.neighbors.reserve(l);
  ns.neighbors.push_back(candidate);

  std::vector<GraphEdge> ranked = graph.adjacency[candidate];
  std::sort(ranked.begin(), ranked.end(),
            [](const GraphEdge& a, const GraphEdge& b) {
              if (a.strength != b.strength) return a.strength > b.strength;
              return a.index < b.index;
            });
  for (const auto& e : ranked) {
    if (ns.neighbors.size() == l) break;
    ns.neighbors.push_back(e.index);
  }
  ns.padded = ns.neighbors.size() < l;
  while (ns.neighbors.size() < l) ns.neighbors.push_back(candidate);
  return ns;
}

std::vector<MatchStats> load_match_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open match stats file: " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw FormatError("match stats file is empty: " + path.string());
  auto strip = [](std::string s) {
    s.erase(s.find_last_not_of(" \t\r") + 1);
    s.erase(0, s.find_first_not_of(" \t"));
    return s;
  };
  if (strip(line) != "i,j,inliers,total")
    throw FormatError("match stats header must be 'i,j,inliers,total'");

  std::vector<MatchStats> stats;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (strip(line).empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::uint64_t values[4];
    for (int f = 0; f < 4; ++f) {
      if (!std::getline(ss, field, ','))
        throw FormatError("match stats line " + std::to_string(line_no) +
                          ": expected 4 comma-separated fields");
      try {
        values[f] = std::stoull(strip(field));
      } catch (const std::exception&) {
        throw FormatError("match stats line " + std::to_string(line_no) +
                          ": field '" + field + "' is not a valid integer");
      }
    }
    MatchStats s;
    s.i = static_cast<std::uint32_t>(values[0]);
    s.j = static_cast<std::uint32_t>(values[1]);
    s.inliers = values[2];
    s.total = values[3];
    stats.push_back(s);
  }
  return stats;
}

std::string graph_to_json_string(const ConstraintGraph& g) {
  nlohmann::json j;
  j["kind"] = to_string(g.kind);
  j["n"] = g.n;
  j["params"] = g.params;
  auto adjacency = nlohmann::json::array();
  for (const auto& adj : g.adjacency) {
    auto node = nlohmann::json::array();
    for (const auto& e : adj) node.push_back({e.index, e.strength});
    adjacency.push_back(std::move(node));
  }
  j["adjacency"] = std::move(adjacency);
  auto ambiguous = nlohmann::json::array();
  for (const auto& [a, b] : g.ambiguous) ambiguous.push_back({a, b});
  j["ambiguous"] = std::move(ambiguous);
  return j.dump();
}

ConstraintGraph graph_from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid graph JSON: ") + e.what());
  }
  ConstraintGraph g;
  try {
    g.kind = constraint_kind_from_string(j.at("kind").get<std::string>());
    g.n = j.at("n").get<std::size_t>();
    for (const auto& [key, value] : j.at("params").items())
      g.params[key] = value.get<double>();
    for (const auto& node : j.at("adjacency")) {
      std::vector<GraphEdge> adj;
      for (const auto& e : node)
        adj.push_back({e.at(0).get<std::uint32_t>(), e.at(1).get<float>()});
      g.adjacency.push_back(std::move(adj));
    }
    for (const auto& p : j.at("ambiguous"))
      g.ambiguous.emplace_back(p.at(0).get<std::uint32_t>(),
                               p.at(1).get<std::uint32_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("graph JSON schema violation: ") + e.what());
  }
  if (g.adjacency.size() != g.n)
    throw FormatError("graph JSON adjacency length does not match n");
  return g;
}

void save_graph(const std::filesystem::path& path, const ConstraintGraph& g) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open graph file for writing: " +
                              path.string());
  out << graph_to_json_string(g) << '\n';
}

ConstraintGraph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open graph file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return graph_from_json_string(buf.str());
}

}  // namespace vpr
