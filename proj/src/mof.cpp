#include "vpr/mof.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vpr/errors.hpp"

namespace vpr {

namespace {

constexpr char kWeightMagic[4] = {'E', 'P', 'M', 'W'};
constexpr std::uint32_t kWeightVersion = 1;

enum class RenormBranch { fallback, pass_through, normalized };

struct Refined {
  std::vector<double> feature;
  RenormBranch branch = RenormBranch::normalized;
  double inv_norm = 1.0;
};

Refined mix_and_renorm(std::vector<double> g, const float* row0,
                       std::size_t dim) {
  double n2 = 0.0;
  for (double x : g) n2 += x * x;
  Refined r;
  if (n2 < kZeroNorm2) {
    r.branch = RenormBranch::fallback;
    for (std::size_t d = 0; d < dim; ++d) g[d] = double(row0[d]);
  } else if (std::abs(n2 - 1.0) <= kUnitNorm2Band) {
    // already unit at float32 precision; keep bits unchanged so identity
    // weights are exactly transparent
    r.branch = RenormBranch::pass_through;
  } else {
    r.branch = RenormBranch::normalized;
    r.inv_norm = 1.0 / std::sqrt(n2);
    for (double& x : g) x *= r.inv_norm;
  }
  r.feature = std::move(g);
  return r;
}

Refined refine_internal(const MoFWeights& w,
                        std::span<const float* const> rows) {
  if (rows.size() != w.l)
    throw ArgumentError("neighbor row count " + std::to_string(rows.size()) +
                        " does not match weight rows " + std::to_string(w.l));
  std::vector<double> g(w.dim, 0.0);
  for (std::size_t j = 0; j < w.l; ++j) {
    const float* r = rows[j];
    const double* wj = w.w.data() + j * w.dim;
    for (std::size_t d = 0; d < w.dim; ++d) g[d] += wj[d] * double(r[d]);
  }
  return mix_and_renorm(std::move(g), rows[0], w.dim);
}

std::vector<const float*> row_pointers(const LabeledCandidate& c,
                                       std::size_t l, std::size_t dim) {
  if (c.neighbor_feats.size() != l * dim)
    throw ArgumentError("candidate neighbor feature buffer has wrong size");
  std::vector<const float*> rows(l);
  for (std::size_t j = 0; j < l; ++j) rows[j] = c.neighbor_feats.data() + j * dim;
  return rows;
}

}  // namespace

MoFWeights MoFWeights::identity(std::size_t l, std::size_t dim) {
  if (l == 0 || dim == 0)
    throw ArgumentError("weight shape must be positive in both dimensions");
  MoFWeights w;
  w.l = l;
  w.dim = dim;
  w.w.assign(l * dim, 0.0);
  for (std::size_t d = 0; d < dim; ++d) w.w[d] = 1.0;
  return w;
}

MoFWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = std::move(buf).str();
  if (bytes.size() < 16)
    throw FormatError("weight file too short for header: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kWeightMagic, 4) != 0)
    throw FormatError("bad magic in weight file: " + path.string());
  auto u32 = [&](std::size_t off) {
    return std::uint32_t(p[off]) | std::uint32_t(p[off + 1]) << 8 |
           std::uint32_t(p[off + 2]) << 16 | std::uint32_t(p[off + 3]) << 24;
  };
  if (u32(4) != kWeightVersion)
    throw FormatError("unsupported weight file version");
  const std::uint32_t l = u32(8);
  const std::uint32_t dim = u32(12);
  if (l == 0 || dim == 0) throw FormatError("weight file declares empty shape");
  if (bytes.size() != 16 + std::size_t(l) * dim * 4)
    throw FormatError("weight file payload size mismatch");
  MoFWeights w;
  w.l = l;
  w.dim = dim;
  w.w.resize(std::size_t(l) * dim);
  for (std::size_t i = 0; i < w.w.size(); ++i)
    w.w[i] = double(std::bit_cast<float>(u32(16 + i * 4)));
  return w;
}

void save_weights(const std::filesystem::path& path, const MoFWeights& w) {
  std::string out;
  out.reserve(16 + w.w.size() * 4);
  out.append(kWeightMagic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
    out.append(b, 4);
  };
  put_u32(kWeightVersion);
  put_u32(static_cast<std::uint32_t>(w.l));
  put_u32(static_cast<std::uint32_t>(w.dim));
  for (double x : w.w)
    put_u32(std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open weight file for writing: " +
                            path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patience_epochs < 1) throw ConfigError("patience_epochs must be >= 1");
  if (lambda_direct < 0 || lambda_intra < 0)
    throw ConfigError("loss weights must be non-negative");
  if (lambda_direct == 0 && lambda_intra == 0)
    throw ConfigError("lambda_direct and lambda_intra cannot both be zero");
  if (margin_alpha < 0) throw ConfigError("margin_alpha must be >= 0");
  if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
}

std::vector<double> refine_rows(const MoFWeights& w,
                                std::span<const float* const> rows) {
  return refine_internal(w, rows).feature;
}

std::vector<double> refine(const MoFWeights& w,
                           std::span<const float> neighbor_feats) {
  if (neighbor_feats.size() != w.l * w.dim)
    throw ArgumentError("neighbor feature buffer size does not match L x D");
  std::vector<const float*> rows(w.l);
  for (std::size_t j = 0; j < w.l; ++j)
    rows[j] = neighbor_feats.data() + j * w.dim;
  return refine_internal(w, rows).feature;
}

std::vector<double> refine_scalar(std::span<const double> weights,
                                  std::span<const float* const> rows,
                                  std::size_t dim) {
  if (weights.size() != rows.size())
    throw ArgumentError("scalar weight count does not match row count");
  std::vector<double> g(dim, 0.0);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const float* r = rows[j];
    for (std::size_t d = 0; d < dim; ++d) g[d] += weights[j] * double(r[d]);
  }
  return mix_and_renorm(std::move(g), rows[0], dim).feature;
}

double loss_direct(std::span<const float> query,
                   const std::vector<RefinedCandidate>& refined) {
  double loss = 0.0;
  for (const auto& c : refined) {
    const double d = l2_distance(query, std::span<const double>(c.feature));
    loss += c.label == 1 ? d : -d;
  }
  return loss;
}

double loss_intra(const std::vector<RefinedCandidate>& refined) {
  double loss = 0.0;
  const std::size_t n = refined.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (refined[i].label != 1) continue;
    for (std::size_t j = i + 1; j < n; ++j)
      if (refined[j].label == 1)
        loss += l2_distance(std::span<const double>(refined[i].feature),
                            std::span<const double>(refined[j].feature));
    for (std::size_t k = 0; k < n; ++k)
      if (refined[k].label == 0)
        loss -= l2_distance(std::span<const double>(refined[i].feature),
                            std::span<const double>(refined[k].feature));
  }
  return loss;
}

double loss_total(double direct, double intra, const TrainConfig& cfg) {
  return cfg.lambda_direct * direct + cfg.lambda_intra * intra;
}

double loss_direct_hinge(std::span<const float> query,
                         const std::vector<RefinedCandidate>& refined,
                         double alpha) {
  std::vector<double> dist(refined.size());
  for (std::size_t i = 0; i < refined.size(); ++i)
    dist[i] = l2_distance(query, std::span<const double>(refined[i].feature));
  double loss = 0.0;
  for (std::size_t i = 0; i < refined.size(); ++i) {
    if (refined[i].label != 1) continue;
    for (std::size_t k = 0; k < refined.size(); ++k)
      if (refined[k].label == 0)
        loss += std::max(0.0, dist[i] - dist[k] + alpha);
  }
  return loss;
}

double loss_intra_hinge(const std::vector<RefinedCandidate>& refined,
                        double alpha) {
  const std::size_t n = refined.size();
  auto d = [&](std::size_t a, std::size_t b) {
    return l2_distance(std::span<const double>(refined[a].feature),
                       std::span<const double>(refined[b].feature));
  };
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (refined[i].label != 1) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || refined[j].label != 1) continue;
      for (std::size_t k = 0; k < n; ++k)
        if (refined[k].label == 0)
          loss += std::max(0.0, d(i, j) - d(i, k) + alpha);
    }
  }
  return loss;
}

namespace {

std::vector<Refined> forward_example(const MoFWeights& w,
                                     const TrainExample& ex) {
  if (ex.query.size() != w.dim)
    throw ArgumentError("example query dimension does not match weights");
  std::vector<Refined> out;
  out.reserve(ex.candidates.size());
  for (const auto& c : ex.candidates) {
    auto rows = row_pointers(c, w.l, w.dim);
    out.push_back(refine_internal(w, rows));
  }
  return out;
}

std::vector<RefinedCandidate> to_refined_candidates(
    const std::vector<Refined>& fwd, const TrainExample& ex) {
  std::vector<RefinedCandidate> rc;
  rc.reserve(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i)
    rc.push_back({fwd[i].feature, ex.candidates[i].label});
  return rc;
}

}  // namespace

double example_loss(const MoFWeights& w, const TrainExample& ex,
                    const TrainConfig& cfg) {
  const auto fwd = forward_example(w, ex);
  const auto refined = to_refined_candidates(fwd, ex);
  std::span<const float> q(ex.query);
  double direct = 0.0, intra = 0.0;
  if (cfg.lambda_direct != 0)
    direct = cfg.hinge ? loss_direct_hinge(q, refined, cfg.margin_alpha)
                       : loss_direct(q, refined);
  if (cfg.lambda_intra != 0)
    intra = cfg.hinge ? loss_intra_hinge(refined, cfg.margin_alpha)
                      : loss_intra(refined);
  return loss_total(direct, intra, cfg);
}

std::vector<double> grad_weights(const MoFWeights& w, const TrainExample& ex,
                                 const TrainConfig& cfg) {
  const std::size_t dim = w.dim;
  const std::size_t n = ex.candidates.size();
  const auto fwd = forward_example(w, ex);
  std::span<const float> q(ex.query);

  // u[c] accumulates dLoss/d(refined feature of candidate c)
  std::vector<std::vector<double>> u(n, std::vector<double>(dim, 0.0));

  auto feat = [&](std::size_t c) {
    return std::span<const double>(fwd[c].feature);
  };
  // adds coef * (f_a - f_b) / dist to u[a]; dist 0 takes the 0 subgradient
  auto add_pair = [&](std::size_t a, std::span<const double> other,
                      double dist, double coef) {
    if (dist == 0.0) return;
    const double s = coef / dist;
    const auto fa = feat(a);
    for (std::size_t d = 0; d < dim; ++d) u[a][d] += s * (fa[d] - other[d]);
  };
  auto query_as_double = [&](std::size_t d) { return double(q[d]); };

  if (!cfg.hinge) {
    if (cfg.lambda_direct != 0) {
      for (std::size_t c = 0; c < n; ++c) {
        const double dist = l2_distance(q, feat(c));
        if (dist == 0.0) continue;
        const double s =
            cfg.lambda_direct * (ex.candidates[c].label == 1 ? 1.0 : -1.0) /
            dist;
        const auto fc = feat(c);
        for (std::size_t d = 0; d < dim; ++d)
          u[c][d] += s * (fc[d] - query_as_double(d));
      }
    }
    if (cfg.lambda_intra != 0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (ex.candidates[i].label != 1) continue;
        for (std::size_t j = i + 1; j < n; ++j) {
          if (ex.candidates[j].label != 1) continue;
          const double dist = l2_distance(feat(i), feat(j));
          add_pair(i, feat(j), dist, cfg.lambda_intra);
          add_pair(j, feat(i), dist, cfg.lambda_intra);
        }
        for (std::size_t k = 0; k < n; ++k) {
          if (ex.candidates[k].label != 0) continue;
          const double dist = l2_distance(feat(i), feat(k));
          add_pair(i, feat(k), dist, -cfg.lambda_intra);
          add_pair(k, feat(i), dist, -cfg.lambda_intra);
        }
      }
    }
  } else {
    std::vector<double> dq(n);
    for (std::size_t c = 0; c < n; ++c) dq[c] = l2_distance(q, feat(c));
    if (cfg.lambda_direct != 0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (ex.candidates[i].label != 1) continue;
        for (std::size_t k = 0; k < n; ++k) {
          if (ex.candidates[k].label != 0) continue;
          if (dq[i] - dq[k] + cfg.margin_alpha <= 0.0) continue;
          if (dq[i] != 0.0) {
            const double s = cfg.lambda_direct / dq[i];
            const auto fi = feat(i);
            for (std::size_t d = 0; d < dim; ++d)
              u[i][d] += s * (fi[d] - query_as_double(d));
          }
          if (dq[k] != 0.0) {
            const double s = -cfg.lambda_direct / dq[k];
            const auto fk = feat(k);
            for (std::size_t d = 0; d < dim; ++d)
              u[k][d] += s * (fk[d] - query_as_double(d));
          }
        }
      }
    }
    if (cfg.lambda_intra != 0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (ex.candidates[i].label != 1) continue;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i || ex.candidates[j].label != 1) continue;
          const double dij = l2_distance(feat(i), feat(j));
          for (std::size_t k = 0; k < n; ++k) {
            if (ex.candidates[k].label != 0) continue;
            const double dik = l2_distance(feat(i), feat(k));
            if (dij - dik + cfg.margin_alpha <= 0.0) continue;
            add_pair(i, feat(j), dij, cfg.lambda_intra);
            add_pair(j, feat(i), dij, cfg.lambda_intra);
            add_pair(i, feat(k), dik, -cfg.lambda_intra);
            add_pair(k, feat(i), dik, -cfg.lambda_intra);
          }
        }
      }
    }
  }

  // back through the renormalization into the weights
  std::vector<double> grad(w.l * dim, 0.0);
  std::vector<double> v(dim);
  for (std::size_t c = 0; c < n; ++c) {
    switch (fwd[c].branch) {
      case RenormBranch::fallback:
        continue;  // the fallback output does not depend on w
      case RenormBranch::pass_through:
        v = u[c];
        break;
      case RenormBranch::normalized: {
        const auto f = feat(c);
        double uf = 0.0;
        for (std::size_t d = 0; d < dim; ++d) uf += u[c][d] * f[d];
        for (std::size_t d = 0; d < dim; ++d)
          v[d] = fwd[c].inv_norm * (u[c][d] - uf * f[d]);
        break;
      }
    }
    const float* feats = ex.candidates[c].neighbor_feats.data();
    for (std::size_t j = 0; j < w.l; ++j) {
      const float* r = feats + j * dim;
      double* gj = grad.data() + j * dim;
      for (std::size_t d = 0; d < dim; ++d) gj[d] += v[d] * double(r[d]);
    }
  }

  for (double g : grad)
    if (!std::isfinite(g))
      throw NumericError("non-finite gradient entry for query '" +
                         ex.query_id + "'");
  return grad;
}

}  // namespace vpr
