#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vpr/errors.hpp"
#include "vpr/mof.hpp"

using namespace vpr;
namespace tu = testutil;

namespace {

// Central finite differences through example_loss; the independent oracle
// for grad_weights.
std::vector<double> fd_gradient(const MoFWeights& w, const TrainExample& ex,
                                const TrainConfig& cfg, double h = 1e-5) {
  std::vector<double> grad(w.w.size());
  MoFWeights probe = w;
  for (std::size_t i = 0; i < w.w.size(); ++i) {
    probe.w[i] = w.w[i] + h;
    const double up = example_loss(probe, ex, cfg);
    probe.w[i] = w.w[i] - h;
    const double down = example_loss(probe, ex, cfg);
    probe.w[i] = w.w[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_rel_error(const std::vector<double>& a,
                     const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

TrainExample random_example(std::mt19937_64& rng, std::size_t dim,
                            std::size_t l, std::size_t n_candidates) {
  TrainExample ex;
  ex.query_id = "q";
  ex.query = tu::random_unit_vector(rng, dim);
  ex.candidates.resize(n_candidates);
  for (std::size_t c = 0; c < n_candidates; ++c) {
    auto& cand = ex.candidates[c];
    cand.index = std::uint32_t(c);
    cand.label = int(rng() % 2);
    cand.neighbor_feats.reserve(l * dim);
    for (std::size_t j = 0; j < l; ++j) {
      const auto row = tu::random_unit_vector(rng, dim);
      cand.neighbor_feats.insert(cand.neighbor_feats.end(), row.begin(),
                                 row.end());
    }
  }
  // force at least one of each label
  ex.candidates.front().label = 1;
  ex.candidates.back().label = 0;
  return ex;
}

MoFWeights random_weights(std::mt19937_64& rng, std::size_t l,
                          std::size_t dim) {
  MoFWeights w;
  w.l = l;
  w.dim = dim;
  w.w.resize(l * dim);
  for (auto& x : w.w) x = double(rng() % 2000) / 1000.0 - 1.0;
  return w;
}

}  // namespace

TEST_CASE("identity weights reproduce the candidate feature exactly") {
  std::mt19937_64 rng(1);
  const std::size_t dim = 6, l = 3;
  const auto w = MoFWeights::identity(l, dim);
  std::vector<float> feats;
  for (std::size_t j = 0; j < l; ++j) {
    const auto row = tu::random_unit_vector(rng, dim);
    feats.insert(feats.end(), row.begin(), row.end());
  }
  const auto out = refine(w, feats);
  for (std::size_t d = 0; d < dim; ++d)
    CHECK(out[d] == double(feats[d]));  // bit-exact
}

TEST_CASE("refine worked example with renormalization") {
  MoFWeights w;
  w.l = 2;
  w.dim = 2;
  w.w = {0.5, 0.5, 0.5, 0.5};
  const std::vector<float> feats = {1.f, 0.f, 0.f, 1.f};
  const auto out = refine(w, feats);
  CHECK(out[0] == doctest::Approx(std::sqrt(0.5)));
  CHECK(out[1] == doctest::Approx(std::sqrt(0.5)));
}

TEST_CASE("all-zero weights fall back to the candidate") {
  MoFWeights w;
  w.l = 2;
  w.dim = 2;
  w.w = {0.0, 0.0, 0.0, 0.0};
  const std::vector<float> feats = {0.6f, 0.8f, 0.f, 1.f};
  const auto out = refine(w, feats);
  CHECK(out[0] == double(0.6f));
  CHECK(out[1] == double(0.8f));
}

TEST_CASE("refine shape validation") {
  const auto w = MoFWeights::identity(2, 3);
  CHECK_THROWS_AS(refine(w, std::vector<float>(5)), ArgumentError);
  CHECK_THROWS_AS(MoFWeights::identity(0, 3), ArgumentError);
}

TEST_CASE("loss_direct worked examples") {
  const std::vector<float> q = {1.f, 0.f};
  SUBCASE("positive at 0.5, negative at 0.8") {
    std::vector<RefinedCandidate> refined;
    refined.push_back({{0.7, 0.4}, 1});    // 3-4-5: distance 0.5
    refined.push_back({{0.52, -0.64}, 0}); // distance 0.8
    CHECK(loss_direct(q, refined) == doctest::Approx(-0.3));
  }
  SUBCASE("perfect positives") {
    std::vector<RefinedCandidate> refined;
    refined.push_back({{1.0, 0.0}, 1});
    refined.push_back({{1.0, 0.0}, 1});
    CHECK(loss_direct(q, refined) == doctest::Approx(0.0));
  }
  SUBCASE("no negatives leaves the positive sum") {
    std::vector<RefinedCandidate> refined;
    refined.push_back({{0.7, 0.4}, 1});
    refined.push_back({{0.52, 0.64}, 1});
    CHECK(loss_direct(q, refined) == doctest::Approx(0.5 + 0.8));
  }
}

TEST_CASE("loss_intra worked examples") {
  SUBCASE("coincident positives") {
    std::vector<RefinedCandidate> refined;
    refined.push_back({{1.0, 0.0}, 1});
    refined.push_back({{1.0, 0.0}, 1});
    CHECK(loss_intra(refined) == doctest::Approx(0.0));
  }
  SUBCASE("two positives, one negative") {
    std::vector<RefinedCandidate> refined;
    refined.push_back({{1.0, 0.0}, 1});
    refined.push_back({{0.0, 1.0}, 1});
    refined.push_back({{-1.0, 0.0}, 0});
    // sqrt(2) - (2 + sqrt(2))
    CHECK(loss_intra(refined) == doctest::Approx(-2.0));
  }
  SUBCASE("no positive pairs") {
    std::vector<RefinedCandidate> refined;
    refined.push_back({{1.0, 0.0}, 0});
    refined.push_back({{0.0, 1.0}, 0});
    CHECK(loss_intra(refined) == doctest::Approx(0.0));
  }
}

TEST_CASE("loss_total combines with the lambda weights") {
  TrainConfig cfg;
  cfg.lambda_direct = 1.0;
  cfg.lambda_intra = 0.0;
  CHECK(loss_total(-0.3, 123.0, cfg) == doctest::Approx(-0.3));
  cfg.lambda_direct = 0.5;
  cfg.lambda_intra = 0.5;
  CHECK(loss_total(1.0, -1.0, cfg) == doctest::Approx(0.0));
  cfg.lambda_direct = 1.0;
  cfg.lambda_intra = 1.0;
  CHECK(loss_total(-0.3, -2.0, cfg) == doctest::Approx(-2.3));
}

TEST_CASE("analytic gradient matches central finite differences") {
  std::mt19937_64 rng(2024);
  for (int it = 0; it < 20; ++it) {
    const std::size_t dim = 2 + rng() % 15;   // <= 16
    const std::size_t l = 1 + rng() % 4;      // <= 4
    const std::size_t cands = 2 + rng() % 5;  // <= 6
    const auto ex = random_example(rng, dim, l, cands);
    const auto w = random_weights(rng, l, dim);
    TrainConfig cfg;
    cfg.lambda_direct = 0.25 + double(rng() % 100) / 100.0;
    cfg.lambda_intra = (it % 3 == 0) ? 0.0 : 0.25 + double(rng() % 100) / 100.0;
    const auto analytic = grad_weights(w, ex, cfg);
    const auto numeric = fd_gradient(w, ex, cfg);
    CHECK(max_rel_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("hinge-mode gradient matches finite differences") {
  std::mt19937_64 rng(4096);
  for (int it = 0; it < 10; ++it) {
    const std::size_t dim = 2 + rng() % 10;
    const std::size_t l = 1 + rng() % 3;
    const auto ex = random_example(rng, dim, l, 3 + rng() % 3);
    const auto w = random_weights(rng, l, dim);
    TrainConfig cfg;
    cfg.hinge = true;
    cfg.margin_alpha = 0.2;
    cfg.lambda_direct = 1.0;
    cfg.lambda_intra = (it % 2 == 0) ? 0.7 : 0.0;
    const auto analytic = grad_weights(w, ex, cfg);
    const auto numeric = fd_gradient(w, ex, cfg);
    CHECK(max_rel_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("hinge losses reduce to zero without a margin violation") {
  // positive refined right on the query, negative far away
  const std::vector<float> q = {1.f, 0.f};
  std::vector<RefinedCandidate> refined;
  refined.push_back({{1.0, 0.0}, 1});
  refined.push_back({{-1.0, 0.0}, 0});
  CHECK(loss_direct_hinge(q, refined, 0.0) == doctest::Approx(0.0));
  CHECK(loss_direct_hinge(q, refined, 0.5) == doctest::Approx(0.0));
  // alpha large enough to activate: 0 - 2 + 2.5 = 0.5
  CHECK(loss_direct_hinge(q, refined, 2.5) == doctest::Approx(0.5));
}

TEST_CASE("coincident query and fully padded candidate has zero gradient") {
  const std::size_t dim = 4, l = 3;
  const auto w = MoFWeights::identity(l, dim);
  TrainExample ex;
  ex.query_id = "q";
  ex.query = {0.5f, 0.5f, 0.5f, 0.5f};
  LabeledCandidate c;
  c.index = 0;
  c.label = 1;
  for (std::size_t j = 0; j < l; ++j)
    c.neighbor_feats.insert(c.neighbor_feats.end(), ex.query.begin(),
                            ex.query.end());
  ex.candidates.push_back(c);
  TrainConfig cfg;
  const auto grad = grad_weights(w, ex, cfg);
  for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("without the intra term, candidates contribute independently") {
  std::mt19937_64 rng(555);
  const std::size_t dim = 8, l = 2;
  auto ex = random_example(rng, dim, l, 4);
  const auto w = random_weights(rng, l, dim);
  TrainConfig cfg;
  cfg.lambda_direct = 1.0;
  cfg.lambda_intra = 0.0;

  TrainExample only_last = ex;
  only_last.candidates = {ex.candidates.back()};
  TrainExample without_last = ex;
  without_last.candidates.pop_back();

  const auto full = grad_weights(w, ex, cfg);
  const auto part1 = grad_weights(w, without_last, cfg);
  const auto part2 = grad_weights(w, only_last, cfg);
  for (std::size_t i = 0; i < full.size(); ++i)
    CHECK(full[i] == doctest::Approx(part1[i] + part2[i]).epsilon(1e-12));

  // with the intra term the decomposition no longer holds
  cfg.lambda_intra = 1.0;
  const auto full_intra = grad_weights(w, ex, cfg);
  const auto p1 = grad_weights(w, without_last, cfg);
  const auto p2 = grad_weights(w, only_last, cfg);
  double diff = 0.0;
  for (std::size_t i = 0; i < full_intra.size(); ++i)
    diff += std::abs(full_intra[i] - p1[i] - p2[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("loss is invariant under candidate permutation") {
  std::mt19937_64 rng(31);
  auto ex = random_example(rng, 6, 3, 5);
  const auto w = random_weights(rng, 3, 6);
  for (const bool hinge : {false, true}) {
    TrainConfig cfg;
    cfg.hinge = hinge;
    cfg.margin_alpha = hinge ? 0.3 : 0.0;
    cfg.lambda_direct = 0.8;
    cfg.lambda_intra = 0.6;
    const double base = example_loss(w, ex, cfg);
    auto shuffled = ex;
    std::shuffle(shuffled.candidates.begin(), shuffled.candidates.end(), rng);
    CHECK(example_loss(w, shuffled, cfg) == doctest::Approx(base));
  }
}

TEST_CASE("loss bounds hold for unit-norm refined features") {
  std::mt19937_64 rng(808);
  for (int it = 0; it < 10; ++it) {
    const std::size_t n = 2 + rng() % 8;
    std::vector<RefinedCandidate> refined;
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = tu::random_unit_vector(rng, 12);
      RefinedCandidate rc;
      rc.feature.assign(v.begin(), v.end());
      rc.label = int(rng() % 2);
      (rc.label ? pos : neg)++;
      refined.push_back(std::move(rc));
    }
    const std::vector<float> q = tu::random_unit_vector(rng, 12);
    CHECK(std::abs(loss_direct(q, refined)) <= 2.0 * double(n) + 1e-9);
    const double pairs =
        double(pos * (pos ? pos - 1 : 0)) / 2.0 + double(pos * neg);
    CHECK(std::abs(loss_intra(refined)) <= 2.0 * pairs + 1e-9);
  }
}

TEST_CASE("weight files round trip and have the expected size") {
  tu::TempDir dir("epmw");
  const auto path = dir.path / "w.epmw";
  MoFWeights w;
  w.l = 3;
  w.dim = 4;
  w.w.resize(12);
  for (std::size_t i = 0; i < 12; ++i)
    w.w[i] = double(float(i) * 0.25f - 1.0f);  // exactly float-representable
  save_weights(path, w);
  CHECK(std::filesystem::file_size(path) == 16 + 12 * 4);
  const auto back = load_weights(path);
  CHECK(back.l == 3);
  CHECK(back.dim == 4);
  for (std::size_t i = 0; i < 12; ++i) CHECK(back.w[i] == w.w[i]);

  SUBCASE("the production-scale file is about 24.6 kB") {
    const auto big = MoFWeights::identity(8, 768);
    save_weights(path, big);
    CHECK(std::filesystem::file_size(path) == 16 + 8 * 768 * 4);
  }
  SUBCASE("bad magic") {
    std::ofstream(path, std::ios::binary) << "NOPE0000000000000000";
    CHECK_THROWS_AS(load_weights(path), FormatError);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("learning rate") {
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("both lambdas zero") {
    cfg.lambda_direct = 0.0;
    cfg.lambda_intra = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("negative lambda") {
    cfg.lambda_intra = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("batch size") {
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
