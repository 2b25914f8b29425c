#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vpr/feature_store.hpp"

namespace vpr {

// Learnable L x D elementwise mixing weights. Row j scales neighbor j's
// feature; the row-0-all-ones initialization makes refinement the identity.
// Held in float64 for training; the file format stores float32.
struct MoFWeights {
  std::size_t l = 0;
  std::size_t dim = 0;
  std::vector<double> w;  // l * dim, row-major

  static MoFWeights identity(std::size_t l, std::size_t dim);
  double at(std::size_t j, std::size_t d) const { return w[j * dim + d]; }
  double& at(std::size_t j, std::size_t d) { return w[j * dim + d]; }
};

// Weight file: magic "EPMW", u32 version = 1, u32 L, u32 D, L*D float32 LE.
MoFWeights load_weights(const std::filesystem::path& path);
void save_weights(const std::filesystem::path& path, const MoFWeights& w);

struct TrainConfig {
  double learning_rate = 0.003;
  std::size_t batch_size = 64;
  int patience_epochs = 3;
  double lambda_direct = 1.0;
  double lambda_intra = 0.0;
  double margin_alpha = 0.0;
  // Off by default: the sub-losses carry no hinge as written. When on, each
  // positive/negative distance pairing becomes max(0, d_pos - d_neg + alpha).
  bool hinge = false;
  // Ablation switch: constrain every weight row to a single scalar.
  bool scalar_weights = false;
  int max_epochs = 100;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Weighted elementwise mix of the L neighbor rows, then renormalized to unit
// length. A vanishing pre-normalization norm falls back to the candidate's
// own feature (rows[0]).
std::vector<double> refine(const MoFWeights& w,
                           std::span<const float> neighbor_feats);
std::vector<double> refine_rows(const MoFWeights& w,
                                std::span<const float* const> rows);

// Scalar-per-neighbor mix with the same renormalization and fallback; used
// by the adaptive-weight baseline and the scalar ablation.
std::vector<double> refine_scalar(std::span<const double> weights,
                                  std::span<const float* const> rows,
                                  std::size_t dim);

struct RefinedCandidate {
  std::vector<double> feature;
  int label;  // 1 positive, 0 negative
};

// Sum of positive distances to the query minus sum of negative distances.
double loss_direct(std::span<const float> query,
                   const std::vector<RefinedCandidate>& refined);

// Unordered positive-positive distances minus positive-negative distances.
double loss_intra(const std::vector<RefinedCandidate>& refined);

double loss_total(double direct, double intra, const TrainConfig& cfg);

// Triplet forms used when cfg.hinge is on.
double loss_direct_hinge(std::span<const float> query,
                         const std::vector<RefinedCandidate>& refined,
                         double alpha);
double loss_intra_hinge(const std::vector<RefinedCandidate>& refined,
                        double alpha);

struct LabeledCandidate {
  std::uint32_t index = 0;
  int label = 0;
  std::vector<float> neighbor_feats;  // l * dim, row-major
};

struct TrainExample {
  std::string query_id;
  std::vector<float> query;
  std::vector<LabeledCandidate> candidates;
};

// Refines every candidate of the example and evaluates the combined loss.
double example_loss(const MoFWeights& w, const TrainExample& ex,
                    const TrainConfig& cfg);

// Exact gradient of example_loss with respect to w, including the
// renormalization Jacobian; the fallback branch contributes zero. Throws
// NumericError on non-finite intermediates.
std::vector<double> grad_weights(const MoFWeights& w, const TrainExample& ex,
                                 const TrainConfig& cfg);

}  // namespace vpr
