#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vpr/errors.hpp"
#include "vpr/eval.hpp"
#include "vpr/trainer.hpp"

using namespace vpr;
namespace tu = testutil;

namespace {

SynthSpec small_spec(double noise, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_places = 12;
  spec.views_per_place = 5;
  spec.dim = 16;
  spec.intra_place_noise = noise;
  spec.seed = seed;
  return spec;
}

std::vector<TrainQuery> as_train_queries(const std::vector<QueryFeature>& qs) {
  std::vector<TrainQuery> out;
  for (const auto& q : qs) out.push_back({q, std::nullopt});
  return out;
}

}  // namespace

TEST_CASE("build_examples labels candidates and resolves neighbors") {
  const auto data = generate_synthetic(small_spec(0.05, 3));
  std::size_t dropped = 0;
  const auto examples =
      build_examples(data.db, data.graph, as_train_queries(data.queries),
                     data.gt, 6, 4, &dropped);
  CHECK(examples.size() + dropped == data.queries.size());
  for (const auto& ex : examples) {
    CHECK(ex.candidates.size() <= 6);
    std::size_t pos = 0, neg = 0;
    for (const auto& c : ex.candidates) {
      (c.label == 1 ? pos : neg)++;
      CHECK(c.label == (data.gt.is_positive(ex.query_id, c.index) ? 1 : 0));
      CHECK(c.neighbor_feats.size() == 4 * data.db.dim());
    }
    CHECK(pos >= 1);
    CHECK(neg >= 1);
  }
}

TEST_CASE("build_examples excludes the query's own database row") {
  const auto data = generate_synthetic(small_spec(0.05, 3));
  std::vector<TrainQuery> queries;
  const auto row = data.db.row(0);
  queries.push_back(
      {QueryFeature{data.db_meta[0].id, {row.begin(), row.end()}}, 0u});
  auto gt = data.gt;
  gt.by_query.emplace(
      data.db_meta[0].id,
      build_ground_truth({data.db_meta[0]}, data.db_meta, 25.0)
          .by_query.at(data.db_meta[0].id));
  const auto examples =
      build_examples(data.db, data.graph, queries, gt, 5, 3, nullptr);
  REQUIRE(examples.size() == 1);
  for (const auto& c : examples[0].candidates) CHECK(c.index != 0);
}

TEST_CASE("build_examples drops single-class queries and counts them") {
  // epsilon so large every row is a positive: no negatives anywhere
  const auto data = generate_synthetic(small_spec(0.05, 4));
  const auto gt = build_ground_truth(data.query_meta, data.db_meta, 1e9);
  std::size_t dropped = 0;
  const auto examples =
      build_examples(data.db, data.graph, as_train_queries(data.queries), gt,
                     5, 3, &dropped);
  CHECK(examples.empty());
  CHECK(dropped == data.queries.size());
}

TEST_CASE("ambiguous candidates are left out of examples") {
  const auto data = generate_synthetic(small_spec(0.05, 5));
  auto gt = build_ground_truth(data.query_meta, data.db_meta, 25.0);
  // flag the first retrieved candidate of q0 as ambiguous
  const auto q0 = data.queries[0];
  const auto top = knn_search(data.db, q0, 5);
  auto& entry = gt.by_query.at(q0.id);
  entry.ambiguous.push_back(top.entries[0].index);
  std::sort(entry.ambiguous.begin(), entry.ambiguous.end());

  const auto examples = build_examples(
      data.db, data.graph, {{q0, std::nullopt}}, gt, 5, 3, nullptr);
  if (!examples.empty())
    for (const auto& c : examples[0].candidates)
      CHECK(c.index != top.entries[0].index);
}

TEST_CASE("max_epochs 0 returns the identity initialization") {
  const auto data = generate_synthetic(small_spec(0.05, 6));
  TrainConfig cfg;
  cfg.max_epochs = 0;
  const auto result =
      train(data.db, data.graph, as_train_queries(data.queries), data.queries,
            data.gt, 6, 4, cfg);
  REQUIRE(result.log.size() == 1);
  CHECK(result.log[0].epoch == 0);
  CHECK(result.best_epoch == 0);
  const auto identity = MoFWeights::identity(4, data.db.dim());
  CHECK(result.weights.w == identity.w);
  CHECK(result.log[0].val_r1 == doctest::Approx(data.baseline_r1));
}

TEST_CASE("patience stops after three stagnant epochs") {
  // noise 0 gives a perfect dataset: val R@1 sits at 100 from the start, so
  // epochs 1..3 cannot improve and training stops right after epoch 3.
  const auto data = generate_synthetic(small_spec(0.0, 7));
  REQUIRE(data.baseline_r1 == 100.0);
  TrainConfig cfg;
  cfg.max_epochs = 50;
  const auto result =
      train(data.db, data.graph, as_train_queries(data.queries), data.queries,
            data.gt, 6, 4, cfg);
  CHECK(result.log.size() == 1 + 3);
  CHECK(result.best_epoch == 0);
  for (const auto& e : result.log) CHECK(e.val_r1 == doctest::Approx(100.0));
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto data = generate_synthetic(small_spec(0.06, 8));
  TrainConfig cfg;
  cfg.max_epochs = 6;
  cfg.seed = 99;
  const auto a =
      train(data.db, data.graph, as_train_queries(data.queries), data.queries,
            data.gt, 6, 4, cfg);
  const auto b =
      train(data.db, data.graph, as_train_queries(data.queries), data.queries,
            data.gt, 6, 4, cfg);
  REQUIRE(a.weights.w.size() == b.weights.w.size());
  for (std::size_t i = 0; i < a.weights.w.size(); ++i)
    CHECK(a.weights.w[i] == b.weights.w[i]);  // bit-identical
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].val_r1 == b.log[i].val_r1);
  }
}

TEST_CASE("best-epoch selection never regresses below the initial val R@1") {
  const auto data = generate_synthetic(small_spec(0.06, 9));
  TrainConfig cfg;
  cfg.max_epochs = 15;
  const auto result =
      train(data.db, data.graph, as_train_queries(data.queries), data.queries,
            data.gt, 6, 4, cfg);
  double best_seen = result.log[0].val_r1;
  for (const auto& e : result.log) best_seen = std::max(best_seen, e.val_r1);
  CHECK(result.log[std::size_t(result.best_epoch)].val_r1 ==
        doctest::Approx(best_seen));
  CHECK(best_seen >= result.log[0].val_r1);
}

TEST_CASE("training with no usable examples fails loudly") {
  const auto data = generate_synthetic(small_spec(0.05, 10));
  const auto gt = build_ground_truth(data.query_meta, data.db_meta, 1e9);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(data.db, data.graph,
                        as_train_queries(data.queries), data.queries, gt, 6,
                        4, cfg),
                  TrainingError);
}

TEST_CASE("scalar-weight mode keeps rows constant") {
  const auto data = generate_synthetic(small_spec(0.06, 11));
  TrainConfig cfg;
  cfg.max_epochs = 4;
  cfg.scalar_weights = true;
  const auto result =
      train(data.db, data.graph, as_train_queries(data.queries), data.queries,
            data.gt, 6, 4, cfg);
  for (std::size_t j = 0; j < result.weights.l; ++j)
    for (std::size_t d = 1; d < result.weights.dim; ++d)
      CHECK(result.weights.at(j, d) == result.weights.at(j, 0));
}

TEST_CASE("train log serialization") {
  tu::TempDir dir("log");
  const std::vector<EpochLog> log = {{0, 0.5, 80.0}, {1, -0.25, 90.0}};
  save_train_log(dir.path / "log.jsonl", log);
  const auto text = tu::read_file_bytes(dir.path / "log.jsonl");
  CHECK(text.find("\"epoch\":0") != std::string::npos);
  CHECK(text.find("\"val_r1\":90.0") != std::string::npos);
}
