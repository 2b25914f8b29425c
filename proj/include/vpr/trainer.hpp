#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "vpr/eval.hpp"
#include "vpr/mof.hpp"
#include "vpr/pipeline.hpp"

namespace vpr {

// A training query; db_index marks queries drawn from the database itself so
// their own row can be excluded from the candidate list.
struct TrainQuery {
  QueryFeature query;
  std::optional<std::uint32_t> db_index;
};

struct EpochLog {
  int epoch;       // 0 = initialization
  double loss;     // mean example loss over the epoch
  double val_r1;
};

struct TrainResult {
  MoFWeights weights;  // from the best validation-R@1 epoch
  std::vector<EpochLog> log;
  int best_epoch = 0;
  std::size_t examples_used = 0;
  std::size_t examples_dropped = 0;  // lacked a positive or a negative
  std::size_t batches_skipped = 0;   // numeric errors
};

// Retrieves top-k per query, labels candidates against the ground truth,
// resolves constraint neighbor sets, and drops uninformative examples
// (those without both a positive and a negative candidate). Candidates in
// a query's ambiguous set are left out entirely.
std::vector<TrainExample> build_examples(const FeatureMatrix& db,
                                         const ConstraintGraph& graph,
                                         const std::vector<TrainQuery>& queries,
                                         const GroundTruth& gt, std::size_t k,
                                         std::size_t l,
                                         std::size_t* dropped = nullptr);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over identity-initialized weights;
// validation R@1 runs the full rerank pipeline after every epoch and stops
// training after patience_epochs epochs without improvement.
TrainResult train(const FeatureMatrix& db, const ConstraintGraph& graph,
                  const std::vector<TrainQuery>& train_queries,
                  const std::vector<QueryFeature>& val_queries,
                  const GroundTruth& gt, std::size_t k, std::size_t l,
                  const TrainConfig& cfg);

// One JSON object per epoch: {"epoch": ..., "loss": ..., "val_r1": ...}.
void save_train_log(const std::filesystem::path& path,
                    const std::vector<EpochLog>& log);

}  // namespace vpr
