#pragma once

// Finite probability spaces, sampled batches and score-function plumbing.

#include "crpg/rng.hpp"
#include "crpg/types.hpp"

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace crpg {

/// Probability mass over outcomes 0..n-1, optionally carrying the score
/// d/dtheta log P(w) as one row per outcome.
class FiniteDist {
 public:
  explicit FiniteDist(Vector probs, std::optional<Matrix> scores = std::nullopt)
      : probs_(std::move(probs)), scores_(std::move(scores)) {
    if (probs_.size() == 0) throw ConfigError("distribution has no outcomes");
    if (!probs_.allFinite() || (probs_.array() < 0.0).any())
      throw ConfigError("probabilities must be finite and non-negative");
    if (std::abs(probs_.sum() - 1.0) > 1e-12 * std::max<double>(1.0, probs_.size()))
      throw ConfigError("probabilities must sum to 1");
    if (scores_) {
      if (scores_->rows() != probs_.size())
        throw ConfigError("score matrix needs one row per outcome");
      if (!scores_->allFinite()) throw ConfigError("scores must be finite");
    }
  }

  Index size() const { return probs_.size(); }
  const Vector& probs() const { return probs_; }
  double prob(Index w) const { return probs_(w); }
  bool has_scores() const { return scores_.has_value(); }
  Index param_dim() const { return scores_ ? scores_->cols() : 0; }

  const Matrix& scores() const {
    if (!scores_) throw ConfigError("distribution carries no scores");
    return *scores_;
  }

  /// Outcomes with strictly positive mass, in increasing order.
  std::vector<Index> support() const {
    std::vector<Index> out;
    for (Index w = 0; w < size(); ++w)
      if (probs_(w) > 0.0) out.push_back(w);
    return out;
  }

 private:
  Vector probs_;
  std::optional<Matrix> scores_;
};

/// Random cost Z(w), one finite value per outcome. Smaller is better.
class CostVariable {
 public:
  explicit CostVariable(Vector values) : values_(std::move(values)) {
    if (!values_.allFinite()) throw ConfigError("cost values must be finite");
  }
  Index size() const { return values_.size(); }
  const Vector& values() const { return values_; }
  double operator()(Index w) const { return values_(w); }

 private:
  Vector values_;
};

/// One i.i.d. draw: which outcome, its cost and its score. `tag` is free for
/// application payload (e.g. the asset chosen).
struct Draw {
  Index id = 0;
  double cost = 0.0;
  Vector score;
  std::int64_t tag = -1;
};

struct SampleBatch {
  std::vector<Draw> draws;
  std::uint64_t seed = 0;

  std::size_t size() const { return draws.size(); }
  Index param_dim() const { return draws.empty() ? 0 : draws.front().score.size(); }
};

/// P_N(w) = #{i : w_i = w} / N. Atoms never drawn get mass 0; the score row of
/// an observed atom is taken from its first draw, unobserved rows are zero.
inline FiniteDist empirical_from_samples(const SampleBatch& batch, Index support_size) {
  if (batch.draws.empty()) throw ConfigError("no samples");
  std::vector<std::size_t> counts(static_cast<std::size_t>(support_size), 0);
  const Index k = batch.param_dim();
  Matrix scores = Matrix::Zero(support_size, k);
  for (const auto& d : batch.draws) {
    if (d.id < 0 || d.id >= support_size) throw ConfigError("sample outcome id outside support");
    if (counts[static_cast<std::size_t>(d.id)]++ == 0 && k > 0) scores.row(d.id) = d.score.transpose();
  }
  const double n = static_cast<double>(batch.draws.size());
  Vector probs(support_size);
  for (Index w = 0; w < support_size; ++w) probs(w) = static_cast<double>(counts[static_cast<std::size_t>(w)]) / n;
  if (k == 0) return FiniteDist(std::move(probs));
  return FiniteDist(std::move(probs), std::move(scores));
}

/// Cost per atom as seen in the batch (0 for unobserved atoms).
inline CostVariable empirical_costs(const SampleBatch& batch, Index support_size) {
  Vector z = Vector::Zero(support_size);
  for (const auto& d : batch.draws) {
    if (d.id < 0 || d.id >= support_size) throw ConfigError("sample outcome id outside support");
    z(d.id) = d.cost;
  }
  return CostVariable(std::move(z));
}

/// E_xi[Z] = sum_w P(w) xi(w) Z(w).
inline double weighted_expectation(const FiniteDist& dist, const Vector& xi, const CostVariable& z) {
  if (xi.size() != dist.size() || z.size() != dist.size())
    throw ConfigError("weighted_expectation: length mismatch");
  if ((xi.array() < 0.0).any()) throw ConfigError("weighted_expectation: density must be non-negative");
  return (dist.probs().array() * xi.array() * z.values().array()).sum();
}

inline double expectation(const FiniteDist& dist, const CostVariable& z) {
  return weighted_expectation(dist, Vector::Ones(dist.size()), z);
}

/// A sampling model that can be enumerated at any parameter value.
template <class M>
concept ParametricModel = requires(const M& m, const Vector& theta) {
  { m.probs(theta) } -> std::convertible_to<Vector>;
  { m.scores(theta) } -> std::convertible_to<Matrix>;
};

/// P_theta(w) proportional to exp(theta . phi(w)); phi(w) is row w of `features`.
class SoftmaxModel {
 public:
  explicit SoftmaxModel(Matrix features) : features_(std::move(features)) {
    if (features_.rows() == 0) throw ConfigError("softmax model needs at least one outcome");
  }

  Index size() const { return features_.rows(); }
  Index param_dim() const { return features_.cols(); }
  const Matrix& features() const { return features_; }

  Vector probs(const Vector& theta) const {
    Vector logits = features_ * theta;
    Vector e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
  }

  Matrix scores(const Vector& theta) const {
    const Vector p = probs(theta);
    const Eigen::RowVectorXd mean = p.transpose() * features_;
    return features_.rowwise() - mean;
  }

  FiniteDist dist(const Vector& theta) const { return FiniteDist(probs(theta), scores(theta)); }

  SampleBatch sample(const Vector& theta, const CostVariable& z, std::size_t n, Rng& rng) const {
    const Vector p = probs(theta);
    const Matrix s = scores(theta);
    std::discrete_distribution<Index> pick(p.data(), p.data() + p.size());
    SampleBatch batch;
    batch.seed = rng.seed();
    batch.draws.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Index w = pick(rng);
      batch.draws.push_back(Draw{w, z(w), s.row(w).transpose(), w});
    }
    return batch;
  }

 private:
  Matrix features_;
};

/// Max over outcomes and coordinates of |score_k(w) - central difference of log P(w)|.
template <ParametricModel M>
double score_selfcheck(const M& model, const Vector& theta, double h) {
  const Vector p = model.probs(theta);
  const Matrix s = model.scores(theta);
  if ((p.array() <= 0.0).any()) throw NumericalError("score undefined at null atom");
  double worst = 0.0;
  for (Index k = 0; k < theta.size(); ++k) {
    Vector tp = theta, tm = theta;
    tp(k) += h;
    tm(k) -= h;
    const Vector pp = model.probs(tp), pm = model.probs(tm);
    if ((pp.array() <= 0.0).any() || (pm.array() <= 0.0).any())
      throw NumericalError("score undefined at null atom");
    const Vector fd = (pp.array().log() - pm.array().log()) / (2.0 * h);
    worst = std::max(worst, (fd - s.col(k)).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace crpg
