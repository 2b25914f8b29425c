#include "vpr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"
#include "vpr/errors.hpp"

namespace vpr {

namespace {

struct Adam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<double> m, v;

  Adam(double learning_rate, std::size_t n)
      : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& w, const std::vector<double>& grad) {
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, double(step_count));
    const double c2 = 1.0 - std::pow(beta2, double(step_count));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// Ablation mode: rows carry one scalar each, so the gradient is averaged
// per row before the update.
void project_to_scalar_rows(std::vector<double>& grad, std::size_t l,
                            std::size_t dim) {
  for (std::size_t j = 0; j < l; ++j) {
    double sum = 0.0;
    for (std::size_t d = 0; d < dim; ++d) sum += grad[j * dim + d];
    const double mean = sum / double(dim);
    for (std::size_t d = 0; d < dim; ++d) grad[j * dim + d] = mean;
  }
}

// |L_Direct| <= 2 * #candidates and |L_Intra| <= 2 * #pairs on the unit
// sphere; violations mean a refined feature escaped the sphere.
void check_loss_bounds(const TrainExample& ex, double direct, double intra,
                       const TrainConfig& cfg) {
  const double n = double(ex.candidates.size());
  std::size_t pos = 0, neg = 0;
  for (const auto& c : ex.candidates) (c.label == 1 ? pos : neg)++;
  const double pairs =
      double(pos) * double(pos - (pos ? 1 : 0)) / 2.0 + double(pos * neg);
  const double slack = 1e-6;
  const double term = cfg.hinge ? 2.0 + cfg.margin_alpha : 2.0;
  double direct_bound, intra_bound;
  if (cfg.hinge) {
    direct_bound = term * double(pos * neg) + slack;
    intra_bound = term * double(pos * (pos ? pos - 1 : 0) * neg) + slack;
  } else {
    direct_bound = 2.0 * n + slack;
    intra_bound = 2.0 * pairs + slack;
  }
  if (std::abs(direct) > direct_bound || std::abs(intra) > intra_bound)
    throw NumericError("loss bound violated for query '" + ex.query_id +
                       "': direct " + std::to_string(direct) + ", intra " +
                       std::to_string(intra));
}

double validation_r1(const FeatureMatrix& db, const ConstraintGraph& graph,
                     const MoFWeights& weights,
                     const std::vector<QueryFeature>& val_queries,
                     const std::vector<CandidateList>& val_baselines,
                     const GroundTruth& gt, std::size_t l) {
  std::vector<RerankResult> results;
  results.reserve(val_queries.size());
  for (std::size_t i = 0; i < val_queries.size(); ++i)
    results.push_back(rerank_given_baseline(db, graph, weights, val_queries[i],
                                            val_baselines[i], l));
  const auto report = recall_at_k(results, gt, {1});
  return report.recall_at.at(1);
}

}  // namespace

std::vector<TrainExample> build_examples(const FeatureMatrix& db,
                                         const ConstraintGraph& graph,
                                         const std::vector<TrainQuery>& queries,
                                         const GroundTruth& gt, std::size_t k,
                                         std::size_t l,
                                         std::size_t* dropped) {
  if (k == 0 || l == 0) throw ArgumentError("k and l must be positive");
  std::size_t dropped_count = 0;
  std::vector<TrainExample> examples;
  examples.reserve(queries.size());
  const std::size_t dim = db.dim();

  for (const auto& tq : queries) {
    const std::size_t fetch =
        std::min(db.count(), k + (tq.db_index ? 1 : 0));
    const auto retrieved = knn_search(db, tq.query, fetch);
    const auto& entry = gt.at(tq.query.id);

    TrainExample ex;
    ex.query_id = tq.query.id;
    ex.query = tq.query.vector;
    std::size_t pos = 0, neg = 0;
    for (const auto& c : retrieved.entries) {
      if (ex.candidates.size() == k) break;
      if (tq.db_index && c.index == *tq.db_index) continue;
      if (std::binary_search(entry.ambiguous.begin(), entry.ambiguous.end(),
                             c.index))
        continue;
      LabeledCandidate lc;
      lc.index = c.index;
      lc.label = std::binary_search(entry.positives.begin(),
                                    entry.positives.end(), c.index)
                     ? 1
                     : 0;
      (lc.label == 1 ? pos : neg)++;
      const NeighborSet ns = select_neighbors(graph, c.index, l);
      lc.neighbor_feats.resize(l * dim);
      for (std::size_t j = 0; j < l; ++j) {
        const float* r = db.row_ptr(ns.neighbors[j]);
        std::copy(r, r + dim, lc.neighbor_feats.begin() + j * dim);
      }
      ex.candidates.push_back(std::move(lc));
    }
    if (pos == 0 || neg == 0) {
      ++dropped_count;
      continue;
    }
    examples.push_back(std::move(ex));
  }
  if (dropped) *dropped = dropped_count;
  return examples;
}

TrainResult train(const FeatureMatrix& db, const ConstraintGraph& graph,
                  const std::vector<TrainQuery>& train_queries,
                  const std::vector<QueryFeature>& val_queries,
                  const GroundTruth& gt, std::size_t k, std::size_t l,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (val_queries.empty())
    throw TrainingError("validation query set is empty");

  TrainResult result;
  auto examples = build_examples(db, graph, train_queries, gt, k, l,
                                 &result.examples_dropped);
  result.examples_used = examples.size();
  if (examples.empty())
    throw TrainingError(
        "no usable training examples: every query lacked a positive or a "
        "negative candidate (" +
        std::to_string(result.examples_dropped) + " dropped)");

  // Baselines for the validation queries never change; cache them once.
  std::vector<CandidateList> val_baselines;
  val_baselines.reserve(val_queries.size());
  const std::size_t val_k = std::min(k, db.count());
  for (const auto& q : val_queries)
    val_baselines.push_back(knn_search(db, q, val_k));

  MoFWeights weights = MoFWeights::identity(l, db.dim());

  double init_loss = 0.0;
  for (const auto& ex : examples) init_loss += example_loss(weights, ex, cfg);
  init_loss /= double(examples.size());
  const double init_r1 =
      validation_r1(db, graph, weights, val_queries, val_baselines, gt, l);
  result.log.push_back({0, init_loss, init_r1});

  MoFWeights best = weights;
  double best_r1 = init_r1;
  result.best_epoch = 0;

  Adam adam(cfg.learning_rate, weights.w.size());
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  int stagnant = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    std::size_t scored = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + cfg.batch_size);
      std::vector<double> batch_grad(weights.w.size(), 0.0);
      bool skip = false;
      double batch_loss_sum = 0.0;
      std::size_t batch_scored = 0;
      for (std::size_t b = start; b < end && !skip; ++b) {
        const TrainExample& ex = examples[order[b]];
        const auto fwd_refined = [&] {
          std::vector<RefinedCandidate> rc;
          for (const auto& c : ex.candidates)
            rc.push_back({refine(weights, c.neighbor_feats), c.label});
          return rc;
        }();
        std::span<const float> q(ex.query);
        const double direct =
            cfg.lambda_direct == 0
                ? 0.0
                : (cfg.hinge
                       ? loss_direct_hinge(q, fwd_refined, cfg.margin_alpha)
                       : loss_direct(q, fwd_refined));
        const double intra =
            cfg.lambda_intra == 0
                ? 0.0
                : (cfg.hinge ? loss_intra_hinge(fwd_refined, cfg.margin_alpha)
                             : loss_intra(fwd_refined));
        const double loss = loss_total(direct, intra, cfg);
        if (!std::isfinite(loss))
          throw TrainingError("loss is not finite for query '" + ex.query_id +
                              "' at epoch " + std::to_string(epoch));
        try {
          check_loss_bounds(ex, direct, intra, cfg);
          const auto grad = grad_weights(weights, ex, cfg);
          for (std::size_t i = 0; i < batch_grad.size(); ++i)
            batch_grad[i] += grad[i];
        } catch (const NumericError&) {
          skip = true;
        }
        batch_loss_sum += loss;
        ++batch_scored;
      }
      if (skip) {
        ++result.batches_skipped;
        continue;
      }
      epoch_loss += batch_loss_sum;
      scored += batch_scored;
      if (cfg.scalar_weights)
        project_to_scalar_rows(batch_grad, weights.l, weights.dim);
      adam.step(weights.w, batch_grad);
    }
    epoch_loss = scored ? epoch_loss / double(scored) : 0.0;

    const double val_r1 =
        validation_r1(db, graph, weights, val_queries, val_baselines, gt, l);
    result.log.push_back({epoch, epoch_loss, val_r1});

    if (val_r1 > best_r1) {
      best_r1 = val_r1;
      best = weights;
      result.best_epoch = epoch;
      stagnant = 0;
    } else {
      ++stagnant;
      if (stagnant >= cfg.patience_epochs) break;
    }
  }

  result.weights = std::move(best);
  return result;
}

void save_train_log(const std::filesystem::path& path,
                    const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw FormatError("cannot open training log for writing: " +
                      path.string());
  for (const auto& e : log) {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["val_r1"] = e.val_r1;
    out << j.dump() << '\n';
  }
}

}  // namespace vpr
