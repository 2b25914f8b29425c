// vprr: ingestion, constraint graphs, training, re-ranking, evaluation, and
// benchmarking over pre-extracted place-recognition features.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vpr/baselines.hpp"
#include "vpr/constraints.hpp"
#include "vpr/errors.hpp"
#include "vpr/eval.hpp"
#include "vpr/feature_store.hpp"
#include "vpr/mof.hpp"
#include "vpr/pipeline.hpp"
#include "vpr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConstraintParams {
  std::string constraint = "gps";
  double epsilon = 25.0;
  double t = 2.0;
  double t_margin = 0.0;
  double sigma = 0.5;
  double delta = 0.9;
  std::string match_stats;  // CSV path, matching constraint only
};

void validate_constraint_params(const ConstraintParams& p) {
  vpr::constraint_kind_from_string(p.constraint);
  if (p.epsilon < 0) throw vpr::ConfigError("epsilon must be >= 0");
  if (p.t <= 0) throw vpr::ConfigError("t must be > 0");
  if (p.t_margin < 0) throw vpr::ConfigError("t_margin must be >= 0");
  if (p.sigma <= 0 || p.sigma >= 1)
    throw vpr::ConfigError("sigma must lie in (0, 1)");
  if (p.delta <= -1 || p.delta >= 1)
    throw vpr::ConfigError("delta must lie in (-1, 1)");
}

void add_constraint_options(CLI::App* cmd, ConstraintParams& p) {
  cmd->add_option("--constraint", p.constraint,
                  "constraint kind: gps, timestamp, matching, selfsim")
      ->capture_default_str();
  cmd->add_option("--epsilon", p.epsilon, "gps threshold in meters")
      ->capture_default_str();
  cmd->add_option("--t", p.t, "timestamp similarity window in seconds")
      ->capture_default_str();
  cmd->add_option("--t-margin", p.t_margin,
                  "timestamp ambiguity margin in seconds")
      ->capture_default_str();
  cmd->add_option("--sigma", p.sigma, "inlier-ratio threshold in (0, 1)")
      ->capture_default_str();
  cmd->add_option("--delta", p.delta, "self-similarity threshold in (-1, 1)")
      ->capture_default_str();
  cmd->add_option("--match-stats", p.match_stats,
                  "CSV of i,j,inliers,total pairs (matching constraint)");
}

vpr::ConstraintGraph build_graph(const ConstraintParams& p,
                                 const vpr::FeatureMatrix& db,
                                 const std::vector<vpr::MetaRecord>& meta) {
  validate_constraint_params(p);
  switch (vpr::constraint_kind_from_string(p.constraint)) {
    case vpr::ConstraintKind::gps:
      return vpr::build_gps_graph(meta, p.epsilon);
    case vpr::ConstraintKind::timestamp:
      return vpr::build_timestamp_graph(meta, p.t, p.t_margin);
    case vpr::ConstraintKind::matching: {
      if (p.match_stats.empty())
        throw vpr::ConfigError(
            "matching constraint requires --match-stats / match_stats");
      const auto stats = vpr::load_match_stats(p.match_stats);
      return vpr::build_matching_graph(db.count(), stats, p.sigma);
    }
    case vpr::ConstraintKind::selfsim:
      return vpr::build_selfsim_graph(db, p.delta);
  }
  throw vpr::ConfigError("invalid constraint kind");
}

struct Bundle {
  vpr::FeatureMatrix features;
  std::vector<vpr::MetaRecord> meta;
};

Bundle load_bundle(const std::string& features_path,
                   const std::string& meta_path) {
  Bundle b;
  b.features = vpr::load_features(features_path);
  b.meta = vpr::load_metadata(meta_path);
  if (b.features.count() != b.meta.size())
    throw vpr::DataError("feature rows (" + std::to_string(b.features.count()) +
                         ") and metadata records (" +
                         std::to_string(b.meta.size()) + ") disagree");
  return b;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw vpr::FormatError("cannot open for writing: " + path.string());
  out << text;
}

json candidate_list_to_json(const vpr::CandidateList& cl) {
  json indices = json::array();
  json distances = json::array();
  for (const auto& e : cl.entries) {
    indices.push_back(e.index);
    distances.push_back(e.distance);
  }
  return {{"indices", std::move(indices)}, {"distances", std::move(distances)}};
}

vpr::CandidateList candidate_list_from_json(const std::string& query_id,
                                            const json& j) {
  vpr::CandidateList cl;
  cl.query_id = query_id;
  const auto& indices = j.at("indices");
  const auto& distances = j.at("distances");
  if (indices.size() != distances.size())
    throw vpr::FormatError("results entry: indices/distances length mismatch");
  for (std::size_t i = 0; i < indices.size(); ++i)
    cl.entries.push_back(
        {indices[i].get<std::uint32_t>(), distances[i].get<double>()});
  return cl;
}

void write_results_jsonl(const fs::path& path,
                         const std::vector<vpr::RerankResult>& results,
                         bool timings) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw vpr::FormatError("cannot open for writing: " + path.string());
  for (const auto& r : results) {
    json j;
    j["query_id"] = r.query_id;
    j["baseline"] = candidate_list_to_json(r.baseline);
    j["reranked"] = candidate_list_to_json(r.reranked);
    j["refine_time_ns"] = timings ? r.refine_time_ns : 0;
    out << j.dump() << '\n';
  }
}

std::vector<vpr::RerankResult> read_results_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw vpr::FormatError("cannot open results file: " + path.string());
  std::vector<vpr::RerankResult> results;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
      vpr::RerankResult r;
      r.query_id = j.at("query_id").get<std::string>();
      r.baseline = candidate_list_from_json(r.query_id, j.at("baseline"));
      r.reranked = candidate_list_from_json(r.query_id, j.at("reranked"));
      r.refine_time_ns = j.at("refine_time_ns").get<std::int64_t>();
      results.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw vpr::FormatError("results line " + std::to_string(line_no) + ": " +
                             e.what());
    }
  }
  return results;
}

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
  std::string db_features, db_metadata;
  std::string query_features, query_metadata;
  std::string out_dir = "run_out";
  std::string weights_in;
  ConstraintParams constraint;
  std::size_t k = 10;
  std::size_t l = 8;
  std::string reranker = "mof";
  double beta = 0.15;
  std::size_t k_neighbors = 10;
  std::size_t top_m = 100;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::vector<int> recall_ks = {1, 5, 10};
  bool timings = false;
  bool train_enabled = true;
  vpr::TrainConfig train;
};

const std::set<std::string> kRerankers = {"none",       "qe",       "dba",
                                          "superglobal", "adaptive", "mof"};

void validate_run_config(const RunConfig& c) {
  validate_constraint_params(c.constraint);
  if (c.db_features.empty() || c.db_metadata.empty())
    throw vpr::ConfigError("db_features and db_metadata are required");
  if (c.query_features.empty() || c.query_metadata.empty())
    throw vpr::ConfigError("query_features and query_metadata are required");
  if (!kRerankers.count(c.reranker))
    throw vpr::ConfigError("unknown reranker '" + c.reranker + "'");
  if (c.k == 0 || c.l == 0) throw vpr::ConfigError("k and l must be >= 1");
  if (c.beta < 0 || c.beta > 1)
    throw vpr::ConfigError("beta must lie in [0, 1]");
  if (c.top_m == 0) throw vpr::ConfigError("top_m must be >= 1");
  if (c.recall_ks.empty())
    throw vpr::ConfigError("recall_ks must not be empty");
  for (int kk : c.recall_ks)
    if (kk < 1) throw vpr::ConfigError("recall_ks entries must be >= 1");
  c.train.validate();
}

double require_number(const json& j, const std::string& key) {
  if (!j.is_number())
    throw vpr::ConfigError("config field '" + key + "' must be a number");
  return j.get<double>();
}

RunConfig parse_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw vpr::ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw vpr::ConfigError(std::string("config is not valid JSON: ") +
                           e.what());
  }
  if (!j.is_object()) throw vpr::ConfigError("config root must be an object");

  static const std::set<std::string> allowed = {
      "db_features", "db_metadata", "query_features", "query_metadata",
      "match_stats", "out_dir",     "weights_in",     "constraint",
      "epsilon",     "t",           "t_margin",       "sigma",
      "delta",       "k",           "l",              "reranker",
      "beta",        "k_neighbors", "top_m",          "seed",
      "threads",     "recall_ks",   "timings",        "train"};
  static const std::set<std::string> train_allowed = {
      "enabled",       "learning_rate", "batch_size",
      "patience_epochs", "lambda_direct", "lambda_intra",
      "margin_alpha",  "hinge",         "scalar_weights",
      "max_epochs"};
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw vpr::ConfigError("unknown config key '" + key + "'");

  RunConfig c;
  auto str = [&](const char* key, std::string& out) {
    if (j.contains(key)) out = j.at(key).get<std::string>();
  };
  str("db_features", c.db_features);
  str("db_metadata", c.db_metadata);
  str("query_features", c.query_features);
  str("query_metadata", c.query_metadata);
  str("out_dir", c.out_dir);
  str("weights_in", c.weights_in);
  str("constraint", c.constraint.constraint);
  str("match_stats", c.constraint.match_stats);
  str("reranker", c.reranker);
  auto num = [&](const char* key, auto& out) {
    if (j.contains(key))
      out = static_cast<std::decay_t<decltype(out)>>(
          require_number(j.at(key), key));
  };
  num("epsilon", c.constraint.epsilon);
  num("t", c.constraint.t);
  num("t_margin", c.constraint.t_margin);
  num("sigma", c.constraint.sigma);
  num("delta", c.constraint.delta);
  num("k", c.k);
  num("l", c.l);
  num("beta", c.beta);
  num("k_neighbors", c.k_neighbors);
  num("top_m", c.top_m);
  num("seed", c.seed);
  num("threads", c.threads);
  if (j.contains("recall_ks")) {
    c.recall_ks.clear();
    for (const auto& e : j.at("recall_ks"))
      c.recall_ks.push_back(e.get<int>());
  }
  if (j.contains("timings")) c.timings = j.at("timings").get<bool>();
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (!t.is_object())
      throw vpr::ConfigError("config field 'train' must be an object");
    for (const auto& [key, value] : t.items())
      if (!train_allowed.count(key))
        throw vpr::ConfigError("unknown config key 'train." + key + "'");
    if (t.contains("enabled")) c.train_enabled = t.at("enabled").get<bool>();
    auto tnum = [&](const char* key, auto& out) {
      if (t.contains(key))
        out = static_cast<std::decay_t<decltype(out)>>(
            require_number(t.at(key), key));
    };
    tnum("learning_rate", c.train.learning_rate);
    tnum("batch_size", c.train.batch_size);
    tnum("patience_epochs", c.train.patience_epochs);
    tnum("lambda_direct", c.train.lambda_direct);
    tnum("lambda_intra", c.train.lambda_intra);
    tnum("margin_alpha", c.train.margin_alpha);
    tnum("max_epochs", c.train.max_epochs);
    if (t.contains("hinge")) c.train.hinge = t.at("hinge").get<bool>();
    if (t.contains("scalar_weights"))
      c.train.scalar_weights = t.at("scalar_weights").get<bool>();
  }
  c.train.seed = c.seed;
  return c;
}

// ---------------------------------------------------------------------------
// subcommand bodies

int cmd_ingest(const std::string& features, const std::string& metadata,
               const std::string& out_prefix) {
  const Bundle b = load_bundle(features, metadata);
  vpr::save_features(out_prefix + ".epfv", b.features);
  vpr::save_metadata(out_prefix + ".meta.jsonl", b.meta);
  std::cout << "ingested " << b.features.count() << " rows of dim "
            << b.features.dim() << "\n";
  return 0;
}

int cmd_build_constraints(const std::string& features,
                          const std::string& metadata,
                          const ConstraintParams& params,
                          const std::string& out) {
  const Bundle b = load_bundle(features, metadata);
  const auto graph = build_graph(params, b.features, b.meta);
  vpr::save_graph(out, graph);
  std::size_t edges = 0;
  for (const auto& adj : graph.adjacency) edges += adj.size();
  std::cout << "built " << vpr::to_string(graph.kind) << " graph: " << graph.n
            << " nodes, " << edges / 2 << " edges\n";
  return 0;
}

// Ground truth covering both the listed query records and, when train-on-db
// is active, the database records acting as queries.
vpr::GroundTruth combined_ground_truth(
    const std::vector<vpr::MetaRecord>& query_meta,
    const std::vector<vpr::MetaRecord>& db_meta, double epsilon,
    bool include_db) {
  auto gt = vpr::build_ground_truth(query_meta, db_meta, epsilon);
  if (include_db) {
    auto db_gt = vpr::build_ground_truth(db_meta, db_meta, epsilon);
    for (auto& [id, entry] : db_gt.by_query)
      gt.by_query.emplace(id, std::move(entry));
  }
  return gt;
}

std::vector<vpr::TrainQuery> db_rows_as_queries(const Bundle& db) {
  std::vector<vpr::TrainQuery> out;
  out.reserve(db.features.count());
  for (std::size_t i = 0; i < db.features.count(); ++i) {
    const auto row = db.features.row(i);
    out.push_back({vpr::QueryFeature{db.meta[i].id, {row.begin(), row.end()}},
                   std::uint32_t(i)});
  }
  return out;
}

int cmd_synth(const vpr::SynthSpec& spec, const std::string& out_dir) {
  const auto data = vpr::generate_synthetic(spec);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  vpr::save_features(dir / "db.epfv", data.db);
  vpr::save_metadata(dir / "db.meta.jsonl", data.db_meta);
  std::vector<float> qdata;
  qdata.reserve(data.queries.size() * data.db.dim());
  for (const auto& q : data.queries)
    qdata.insert(qdata.end(), q.vector.begin(), q.vector.end());
  vpr::save_features(
      dir / "queries.epfv",
      vpr::FeatureMatrix::from_unit_rows(data.queries.size(), data.db.dim(),
                                         std::move(qdata)));
  vpr::save_metadata(dir / "queries.meta.jsonl", data.query_meta);
  std::cout << "synthetic bundle written to " << out_dir << "\n"
            << "db rows: " << data.db.count()
            << ", queries: " << data.queries.size() << "\n"
            << "baseline R@1: " << data.baseline_r1
            << ", uniform-refined R@1: " << data.oracle_r1 << "\n";
  return 0;
}

json eval_report_json(const vpr::EvalReport& report) {
  return json::parse(vpr::report_to_json_string(report));
}

// Dispatch over the reranker kinds. graph is only consulted for the
// constraint-driven rerankers (mof, adaptive); weights only for mof.
std::vector<vpr::RerankResult> execute_reranker(
    const RunConfig& cfg, const vpr::FeatureMatrix& db,
    const std::vector<vpr::QueryFeature>& queries,
    const vpr::ConstraintGraph* graph, const vpr::MoFWeights* weights) {
  std::vector<vpr::RerankResult> results;
  results.reserve(queries.size());
  if (cfg.reranker == "mof") {
    auto batch = vpr::rerank_batch(db, *graph, *weights, queries, cfg.k,
                                   cfg.l, cfg.threads);
    if (!batch.errors.empty())
      throw vpr::DataError("rerank failed for query index " +
                           std::to_string(batch.errors[0].query_index) + ": " +
                           batch.errors[0].message);
    for (auto& r : batch.results) results.push_back(std::move(*r));
  } else if (cfg.reranker == "adaptive") {
    for (const auto& q : queries)
      results.push_back(vpr::rerank_adaptive(db, *graph, q, cfg.k, cfg.l));
  } else if (cfg.reranker == "none") {
    for (const auto& q : queries) {
      vpr::RerankResult r;
      r.query_id = q.id;
      r.baseline = vpr::knn_search(db, q, cfg.k);
      r.reranked = r.baseline;
      results.push_back(std::move(r));
    }
  } else if (cfg.reranker == "qe") {
    vpr::BaselineConfig bc{cfg.beta, cfg.k_neighbors, cfg.top_m};
    for (const auto& q : queries) {
      vpr::RerankResult r;
      r.query_id = q.id;
      r.baseline = vpr::knn_search(db, q, cfg.k);
      r.reranked = vpr::query_expansion(db, q, bc, cfg.k);
      results.push_back(std::move(r));
    }
  } else if (cfg.reranker == "dba") {
    vpr::BaselineConfig bc{cfg.beta, cfg.k_neighbors, cfg.top_m};
    const auto augmented = vpr::database_augmentation(db, bc);
    for (const auto& q : queries) {
      vpr::RerankResult r;
      r.query_id = q.id;
      r.baseline = vpr::knn_search(db, q, cfg.k);
      r.reranked = vpr::knn_search(augmented, q, cfg.k);
      results.push_back(std::move(r));
    }
  } else {  // superglobal
    vpr::BaselineConfig bc{cfg.beta, cfg.k_neighbors,
                           std::min(cfg.top_m, db.count())};
    for (const auto& q : queries) {
      vpr::RerankResult r;
      r.query_id = q.id;
      r.baseline = vpr::knn_search(db, q, cfg.k);
      r.reranked = vpr::superglobal_refine(db, q, bc);
      if (r.reranked.entries.size() > cfg.k) r.reranked.entries.resize(cfg.k);
      results.push_back(std::move(r));
    }
  }
  return results;
}

int cmd_run(RunConfig cfg) {
  validate_run_config(cfg);
  fs::create_directories(cfg.out_dir);
  const fs::path out_dir(cfg.out_dir);
  std::vector<std::string> artifacts;
  std::string stage = "load";

  auto flag_status = [&](const std::string& status, const std::string& error) {
    json s;
    s["status"] = status;
    s["stage"] = stage;
    if (!error.empty()) s["error"] = error;
    s["artifacts"] = artifacts;
    write_text(out_dir / "run_status.json", s.dump() + "\n");
  };

  try {
    const Bundle db = load_bundle(cfg.db_features, cfg.db_metadata);
    const Bundle qb = load_bundle(cfg.query_features, cfg.query_metadata);
    const auto queries = vpr::zip_queries(qb.features, qb.meta);

    stage = "build-constraints";
    const auto graph = build_graph(cfg.constraint, db.features, db.meta);

    stage = "train";
    vpr::MoFWeights weights;
    const bool needs_weights =
        cfg.reranker == "mof" || cfg.reranker == "adaptive";
    if (cfg.reranker == "mof") {
      if (!cfg.weights_in.empty()) {
        weights = vpr::load_weights(cfg.weights_in);
        if (weights.l != cfg.l || weights.dim != db.features.dim())
          throw vpr::ConfigError("weight file shape does not match --l / dim");
      } else if (cfg.train_enabled) {
        const auto gt = combined_ground_truth(qb.meta, db.meta,
                                              cfg.constraint.epsilon, true);
        const auto train_queries = db_rows_as_queries(db);
        const auto result =
            vpr::train(db.features, graph, train_queries, queries, gt, cfg.k,
                       cfg.l, cfg.train);
        weights = result.weights;
        vpr::save_weights(out_dir / "weights.epmw", weights);
        artifacts.push_back("weights.epmw");
        vpr::save_train_log(out_dir / "train_log.jsonl", result.log);
        artifacts.push_back("train_log.jsonl");
      } else {
        weights = vpr::MoFWeights::identity(cfg.l, db.features.dim());
      }
    } else if (needs_weights) {
      weights = vpr::MoFWeights::identity(cfg.l, db.features.dim());
    }

    stage = "rerank";
    const auto results =
        execute_reranker(cfg, db.features, queries, &graph, &weights);
    write_results_jsonl(out_dir / "results.jsonl", results, cfg.timings);
    artifacts.push_back("results.jsonl");

    stage = "eval";
    const auto gt =
        vpr::build_ground_truth(qb.meta, db.meta, cfg.constraint.epsilon);
    std::vector<vpr::CandidateList> baseline_lists;
    for (const auto& r : results) baseline_lists.push_back(r.baseline);
    const auto baseline_report =
        vpr::recall_at_k(baseline_lists, gt, cfg.recall_ks);
    const auto reranked_report = vpr::recall_at_k(results, gt, cfg.recall_ks);
    json report;
    report["reranker"] = cfg.reranker;
    report["constraint"] = cfg.constraint.constraint;
    report["k"] = cfg.k;
    report["l"] = cfg.l;
    report["seed"] = cfg.seed;
    report["baseline"] = eval_report_json(baseline_report);
    report["reranked"] = eval_report_json(reranked_report);
    write_text(out_dir / "report.json", report.dump(2) + "\n");
    artifacts.push_back("report.json");

    stage = "done";
    flag_status("ok", "");
    std::cout << "baseline R@1: "
              << baseline_report.recall_at.at(cfg.recall_ks.front())
              << ", reranked R@1: "
              << reranked_report.recall_at.at(cfg.recall_ks.front()) << "\n";
    return 0;
  } catch (const std::exception& e) {
    flag_status("failed", e.what());
    std::cerr << "error in stage '" << stage << "': " << e.what() << "\n";
    return 1;
  }
}

std::vector<int> parse_ks(const std::string& csv) {
  std::vector<int> ks;
  std::istringstream ss(csv);
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      ks.push_back(std::stoi(field));
    } catch (const std::exception&) {
      throw vpr::ConfigError("--ks expects comma-separated integers, got '" +
                             field + "'");
    }
  }
  if (ks.empty()) throw vpr::ConfigError("--ks must not be empty");
  return ks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"global-feature re-ranking for place recognition"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "print help for every subcommand");

  // ingest
  auto* ingest = app.add_subcommand(
      "ingest", "validate and normalize a feature/metadata pair");
  std::string in_features, in_metadata, out_path = "store";
  ingest->add_option("--features", in_features, "input feature file (.epfv)")
      ->required();
  ingest->add_option("--metadata", in_metadata, "input metadata (.jsonl)")
      ->required();
  ingest->add_option("--out", out_path, "output path prefix")
      ->capture_default_str();

  // build-constraints
  auto* bc = app.add_subcommand("build-constraints",
                                "build a constraint graph over the database");
  std::string bc_features, bc_metadata, bc_out = "graph.json";
  ConstraintParams bc_params;
  bc->add_option("--features", bc_features, "database features")->required();
  bc->add_option("--metadata", bc_metadata, "database metadata")->required();
  add_constraint_options(bc, bc_params);
  bc->add_option("--out", bc_out, "output graph JSON")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train mixture weights");
  std::string tr_db_f, tr_db_m, tr_q_f, tr_q_m, tr_val_f, tr_val_m;
  std::string tr_out = "weights.epmw", tr_log = "train_log.jsonl";
  ConstraintParams tr_params;
  vpr::TrainConfig tr_cfg;
  std::size_t tr_k = 10, tr_l = 8;
  std::uint64_t tr_seed = 0;
  bool tr_on_db = false;
  tr->add_option("--db-features", tr_db_f, "database features")->required();
  tr->add_option("--db-metadata", tr_db_m, "database metadata")->required();
  tr->add_option("--query-features", tr_q_f, "training query features")
      ->required();
  tr->add_option("--query-metadata", tr_q_m, "training query metadata")
      ->required();
  tr->add_option("--val-features", tr_val_f,
                 "validation query features (default: split from train)");
  tr->add_option("--val-metadata", tr_val_m, "validation query metadata");
  add_constraint_options(tr, tr_params);
  tr->add_option("--k", tr_k, "retrieval depth")->capture_default_str();
  tr->add_option("--l", tr_l, "neighbors per candidate")
      ->capture_default_str();
  tr->add_option("--lr", tr_cfg.learning_rate, "Adam learning rate")
      ->capture_default_str();
  tr->add_option("--batch-size", tr_cfg.batch_size, "examples per batch")
      ->capture_default_str();
  tr->add_option("--patience", tr_cfg.patience_epochs,
                 "epochs without val improvement before stopping")
      ->capture_default_str();
  tr->add_option("--lambda-direct", tr_cfg.lambda_direct,
                 "weight of the direct refinement loss")
      ->capture_default_str();
  tr->add_option("--lambda-intra", tr_cfg.lambda_intra,
                 "weight of the intra-class refinement loss")
      ->capture_default_str();
  tr->add_option("--margin-alpha", tr_cfg.margin_alpha,
                 "hinge margin (hinge mode only)")
      ->capture_default_str();
  tr->add_flag("--hinge", tr_cfg.hinge, "use the hinged loss form");
  tr->add_flag("--scalar-weights", tr_cfg.scalar_weights,
               "one scalar per neighbor instead of per-dimension weights");
  tr->add_option("--max-epochs", tr_cfg.max_epochs, "epoch cap")
      ->capture_default_str();
  tr->add_flag("--train-on-db", tr_on_db,
               "use database rows as training queries (self-excluded)");
  tr->add_option("--seed", tr_seed, "rng seed")->capture_default_str();
  tr->add_option("--out", tr_out, "output weight file")->capture_default_str();
  tr->add_option("--log", tr_log, "output training log")
      ->capture_default_str();

  // rerank
  auto* rr = app.add_subcommand("rerank", "re-rank retrieval candidates");
  std::string rr_db_f, rr_db_m, rr_q_f, rr_q_m, rr_weights;
  std::string rr_out = "results.jsonl", rr_reranker = "mof";
  ConstraintParams rr_params;
  std::size_t rr_k = 10, rr_l = 8;
  double rr_beta = 0.15;
  std::size_t rr_kn = 10, rr_top_m = 100;
  unsigned rr_threads = 0;
  bool rr_timings = false;
  rr->add_option("--db-features", rr_db_f, "database features")->required();
  rr->add_option("--db-metadata", rr_db_m, "database metadata")->required();
  rr->add_option("--query-features", rr_q_f, "query features")->required();
  rr->add_option("--query-metadata", rr_q_m, "query metadata")->required();
  add_constraint_options(rr, rr_params);
  rr->add_option("--reranker", rr_reranker,
                 "none, qe, dba, superglobal, adaptive, or mof")
      ->capture_default_str();
  rr->add_option("--weights", rr_weights, "weight file (mof; else identity)");
  rr->add_option("--k", rr_k, "retrieval depth")->capture_default_str();
  rr->add_option("--l", rr_l, "neighbors per candidate")
      ->capture_default_str();
  rr->add_option("--beta", rr_beta, "mixing factor for qe/dba/superglobal")
      ->capture_default_str();
  rr->add_option("--k-neighbors", rr_kn, "neighbor count for qe/dba")
      ->capture_default_str();
  rr->add_option("--top-m", rr_top_m, "superglobal refinement scope")
      ->capture_default_str();
  rr->add_option("--threads", rr_threads, "worker threads (0 = all cores)")
      ->capture_default_str();
  rr->add_flag("--timings", rr_timings, "record refine_time_ns in results");
  rr->add_option("--out", rr_out, "output results JSONL")
      ->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "score results against ground truth");
  std::string ev_results, ev_db_m, ev_q_m, ev_out = "report.json";
  std::string ev_ks = "1,5,10";
  double ev_epsilon = 25.0;
  ev->add_option("--results", ev_results, "results JSONL from rerank")
      ->required();
  ev->add_option("--db-metadata", ev_db_m, "database metadata")->required();
  ev->add_option("--query-metadata", ev_q_m, "query metadata")->required();
  ev->add_option("--epsilon", ev_epsilon, "gps threshold in meters")
      ->capture_default_str();
  ev->add_option("--ks", ev_ks, "comma-separated recall cutoffs")
      ->capture_default_str();
  ev->add_option("--out", ev_out, "output report JSON")->capture_default_str();

  // bench
  auto* be = app.add_subcommand("bench", "latency benchmark");
  std::string be_db_f, be_db_m, be_q_f, be_q_m, be_weights;
  std::string be_out = "bench.json", be_note;
  ConstraintParams be_params;
  std::size_t be_k = 10, be_l = 8, be_reps = 10;
  be->add_option("--db-features", be_db_f, "database features")->required();
  be->add_option("--db-metadata", be_db_m, "database metadata")->required();
  be->add_option("--query-features", be_q_f, "query features")->required();
  be->add_option("--query-metadata", be_q_m, "query metadata")->required();
  add_constraint_options(be, be_params);
  be->add_option("--weights", be_weights, "weight file (else identity)");
  be->add_option("--k", be_k, "retrieval depth")->capture_default_str();
  be->add_option("--l", be_l, "neighbors per candidate")
      ->capture_default_str();
  be->add_option("--repetitions", be_reps, "passes over the query set")
      ->capture_default_str();
  be->add_option("--note", be_note, "free-text hardware note");
  be->add_option("--out", be_out, "output bench JSON")->capture_default_str();

  // synth
  auto* sy = app.add_subcommand("synth", "generate a synthetic bundle");
  vpr::SynthSpec sy_spec;
  std::string sy_out = "synth_out";
  std::string sy_constraint = "gps";
  sy->add_option("--places", sy_spec.n_places, "number of places")
      ->capture_default_str();
  sy->add_option("--views", sy_spec.views_per_place, "database views per place")
      ->capture_default_str();
  sy->add_option("--dim", sy_spec.dim, "feature dimension")
      ->capture_default_str();
  sy->add_option("--noise", sy_spec.intra_place_noise,
                 "intra-place angular noise (radians)")
      ->capture_default_str();
  sy->add_option("--distractors", sy_spec.distractor_count,
                 "random unit-vector distractor rows")
      ->capture_default_str();
  sy->add_option("--constraint", sy_constraint,
                 "constraint kind baked into the bundle")
      ->capture_default_str();
  sy->add_option("--seed", sy_spec.seed, "rng seed")->capture_default_str();
  sy->add_option("--out", sy_out, "output directory")->capture_default_str();

  // run
  auto* rn = app.add_subcommand(
      "run", "build constraints, optionally train, re-rank, and evaluate");
  std::string rn_config;
  RunConfig rn_overrides;
  rn->add_option("--config", rn_config, "JSON run configuration")->required();
  auto* o_k = rn->add_option("--k", rn_overrides.k, "retrieval depth");
  auto* o_l = rn->add_option("--l", rn_overrides.l, "neighbors per candidate");
  auto* o_rr = rn->add_option("--reranker", rn_overrides.reranker,
                              "none, qe, dba, superglobal, adaptive, or mof");
  auto* o_ct = rn->add_option("--constraint",
                              rn_overrides.constraint.constraint,
                              "constraint kind");
  auto* o_eps =
      rn->add_option("--epsilon", rn_overrides.constraint.epsilon,
                     "gps threshold in meters");
  auto* o_t = rn->add_option("--t", rn_overrides.constraint.t,
                             "timestamp window in seconds");
  auto* o_tm = rn->add_option("--t-margin", rn_overrides.constraint.t_margin,
                              "timestamp ambiguity margin");
  auto* o_sg = rn->add_option("--sigma", rn_overrides.constraint.sigma,
                              "inlier-ratio threshold");
  auto* o_dl = rn->add_option("--delta", rn_overrides.constraint.delta,
                              "self-similarity threshold");
  auto* o_bt = rn->add_option("--beta", rn_overrides.beta, "mixing factor");
  auto* o_kn = rn->add_option("--k-neighbors", rn_overrides.k_neighbors,
                              "neighbor count for qe/dba");
  auto* o_tp = rn->add_option("--top-m", rn_overrides.top_m,
                              "superglobal refinement scope");
  auto* o_sd = rn->add_option("--seed", rn_overrides.seed, "rng seed");
  auto* o_th = rn->add_option("--threads", rn_overrides.threads,
                              "worker threads (0 = all cores)");
  auto* o_out = rn->add_option("--out", rn_overrides.out_dir,
                               "output directory override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return cmd_ingest(in_features, in_metadata, out_path);
    if (*bc) {
      validate_constraint_params(bc_params);
      return cmd_build_constraints(bc_features, bc_metadata, bc_params, bc_out);
    }
    if (*tr) {
      validate_constraint_params(tr_params);
      tr_cfg.seed = tr_seed;
      tr_cfg.validate();
      const Bundle db = load_bundle(tr_db_f, tr_db_m);
      const Bundle qb = load_bundle(tr_q_f, tr_q_m);
      const auto all_queries = vpr::zip_queries(qb.features, qb.meta);
      const auto graph = build_graph(tr_params, db.features, db.meta);

      std::vector<vpr::TrainQuery> train_queries;
      std::vector<vpr::QueryFeature> val_queries;
      std::vector<vpr::MetaRecord> train_meta = qb.meta;
      if (!tr_val_f.empty()) {
        if (tr_val_m.empty())
          throw vpr::ConfigError("--val-features requires --val-metadata");
        const Bundle vb = load_bundle(tr_val_f, tr_val_m);
        val_queries = vpr::zip_queries(vb.features, vb.meta);
        train_meta.insert(train_meta.end(), vb.meta.begin(), vb.meta.end());
        for (const auto& q : all_queries)
          train_queries.push_back({q, std::nullopt});
      } else if (tr_on_db) {
        train_queries = db_rows_as_queries(db);
        val_queries = all_queries;
      } else {
        // deterministic 1-in-5 split
        for (std::size_t i = 0; i < all_queries.size(); ++i) {
          if (i % 5 == 0)
            val_queries.push_back(all_queries[i]);
          else
            train_queries.push_back({all_queries[i], std::nullopt});
        }
      }
      if (val_queries.empty())
        throw vpr::ConfigError("validation query set is empty");

      const auto gt = combined_ground_truth(train_meta, db.meta,
                                            tr_params.epsilon, tr_on_db);
      const auto result = vpr::train(db.features, graph, train_queries,
                                     val_queries, gt, tr_k, tr_l, tr_cfg);
      vpr::save_weights(tr_out, result.weights);
      vpr::save_train_log(tr_log, result.log);
      std::cout << "trained " << result.log.size() - 1 << " epochs, best epoch "
                << result.best_epoch << " (val R@1 "
                << result.log[std::size_t(result.best_epoch)].val_r1 << "), "
                << result.examples_used << " examples ("
                << result.examples_dropped << " dropped)\n";
      return 0;
    }
    if (*rr) {
      RunConfig cfg;
      cfg.db_features = rr_db_f;
      cfg.db_metadata = rr_db_m;
      cfg.query_features = rr_q_f;
      cfg.query_metadata = rr_q_m;
      cfg.constraint = rr_params;
      cfg.k = rr_k;
      cfg.l = rr_l;
      cfg.reranker = rr_reranker;
      cfg.beta = rr_beta;
      cfg.k_neighbors = rr_kn;
      cfg.top_m = rr_top_m;
      cfg.threads = rr_threads;
      cfg.timings = rr_timings;
      cfg.weights_in = rr_weights;
      cfg.train_enabled = false;
      validate_run_config(cfg);

      const Bundle db = load_bundle(cfg.db_features, cfg.db_metadata);
      const Bundle qb = load_bundle(cfg.query_features, cfg.query_metadata);
      const auto queries = vpr::zip_queries(qb.features, qb.meta);
      const bool needs_graph =
          cfg.reranker == "mof" || cfg.reranker == "adaptive";
      vpr::ConstraintGraph graph;
      if (needs_graph)
        graph = build_graph(cfg.constraint, db.features, db.meta);
      vpr::MoFWeights weights =
          rr_weights.empty()
              ? vpr::MoFWeights::identity(cfg.l, db.features.dim())
              : vpr::load_weights(rr_weights);

      const auto results =
          execute_reranker(cfg, db.features, queries, &graph, &weights);
      write_results_jsonl(rr_out, results, rr_timings);
      std::cout << "wrote " << results.size() << " results to " << rr_out
                << "\n";
      return 0;
    }
    if (*ev) {
      const auto db_meta = vpr::load_metadata(ev_db_m);
      const auto q_meta = vpr::load_metadata(ev_q_m);
      const auto results = read_results_jsonl(ev_results);
      const auto gt = vpr::build_ground_truth(q_meta, db_meta, ev_epsilon);
      const auto ks = parse_ks(ev_ks);
      std::vector<vpr::CandidateList> baseline_lists;
      for (const auto& r : results) baseline_lists.push_back(r.baseline);
      json report;
      report["baseline"] =
          eval_report_json(vpr::recall_at_k(baseline_lists, gt, ks));
      report["reranked"] =
          eval_report_json(vpr::recall_at_k(results, gt, ks));
      write_text(ev_out, report.dump(2) + "\n");
      std::cout << "report written to " << ev_out << "\n";
      return 0;
    }
    if (*be) {
      validate_constraint_params(be_params);
      const Bundle db = load_bundle(be_db_f, be_db_m);
      const Bundle qb = load_bundle(be_q_f, be_q_m);
      const auto queries = vpr::zip_queries(qb.features, qb.meta);
      const auto graph = build_graph(be_params, db.features, db.meta);
      const auto weights =
          be_weights.empty()
              ? vpr::MoFWeights::identity(be_l, db.features.dim())
              : vpr::load_weights(be_weights);
      const auto report = vpr::latency_bench(db.features, graph, weights,
                                             queries, be_k, be_l, be_reps,
                                             be_note);
      write_text(be_out, vpr::bench_to_json_string(report) + "\n");
      std::cout << "refine stage mean " << report.refine.mean_ns / 1e3
                << " us/query (p99 " << report.refine.p99_ns / 1e3
                << " us); report written to " << be_out << "\n";
      return 0;
    }
    if (*sy) {
      sy_spec.constraint_kind =
          vpr::constraint_kind_from_string(sy_constraint);
      return cmd_synth(sy_spec, sy_out);
    }
    if (*rn) {
      RunConfig cfg = parse_run_config(rn_config);
      if (o_k->count()) cfg.k = rn_overrides.k;
      if (o_l->count()) cfg.l = rn_overrides.l;
      if (o_rr->count()) cfg.reranker = rn_overrides.reranker;
      if (o_ct->count())
        cfg.constraint.constraint = rn_overrides.constraint.constraint;
      if (o_eps->count())
        cfg.constraint.epsilon = rn_overrides.constraint.epsilon;
      if (o_t->count()) cfg.constraint.t = rn_overrides.constraint.t;
      if (o_tm->count())
        cfg.constraint.t_margin = rn_overrides.constraint.t_margin;
      if (o_sg->count()) cfg.constraint.sigma = rn_overrides.constraint.sigma;
      if (o_dl->count()) cfg.constraint.delta = rn_overrides.constraint.delta;
      if (o_bt->count()) cfg.beta = rn_overrides.beta;
      if (o_kn->count()) cfg.k_neighbors = rn_overrides.k_neighbors;
      if (o_tp->count()) cfg.top_m = rn_overrides.top_m;
      if (o_sd->count()) {
        cfg.seed = rn_overrides.seed;
        cfg.train.seed = rn_overrides.seed;
      }
      if (o_th->count()) cfg.threads = rn_overrides.threads;
      if (o_out->count()) cfg.out_dir = rn_overrides.out_dir;
      return cmd_run(std::move(cfg));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
