#pragma once

// Finite MDPs, linear-softmax policies and trajectory simulation.

#include "crpg/rng.hpp"
#include "crpg/types.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <sstream>
#include <utility>
#include <vector>

namespace crpg {

/// M = (X, A, C, P, gamma, x0). `kernel[a]` holds P(x'|x, a) in row x; costs
/// are per (x, a), a state-only cost being replicated across actions.
class Mdp {
 public:
  Mdp(Matrix cost, std::vector<Matrix> kernel, double gamma, Index x0)
      : cost_(std::move(cost)), kernel_(std::move(kernel)), gamma_(gamma), x0_(x0) {
    const Index n = cost_.rows();
    if (n == 0 || cost_.cols() == 0) throw ConfigError("MDP needs at least one state and one action");
    if (static_cast<Index>(kernel_.size()) != cost_.cols()) throw ConfigError("kernel needs one matrix per action");
    if (!(gamma_ > 0.0 && gamma_ < 1.0)) throw ConfigError("discount factor must lie in (0, 1)");
    if (x0_ < 0 || x0_ >= n) throw ConfigError("initial state out of range");
    if (!cost_.allFinite()) throw ConfigError("costs must be finite");
    for (std::size_t a = 0; a < kernel_.size(); ++a) {
      const Matrix& k = kernel_[a];
      if (k.rows() != n || k.cols() != n) throw ConfigError("kernel matrices must be n_states x n_states");
      if (!k.allFinite() || (k.array() < 0.0).any()) throw ConfigError("transition probabilities must be non-negative");
      for (Index x = 0; x < n; ++x) {
        if (std::abs(k.row(x).sum() - 1.0) > 1e-12) {
          std::ostringstream os;
          os << "kernel row (x=" << x << ", a=" << a << ") does not sum to 1";
          throw ConfigError(os.str());
        }
      }
    }
  }

  /// State-only cost C(x).
  static Mdp with_state_cost(const Vector& state_cost, std::vector<Matrix> kernel, double gamma, Index x0) {
    Matrix c = state_cost.replicate(1, static_cast<Index>(kernel.size()));
    return Mdp(std::move(c), std::move(kernel), gamma, x0);
  }

  Index n_states() const { return cost_.rows(); }
  Index n_actions() const { return cost_.cols(); }
  double gamma() const { return gamma_; }
  Index x0() const { return x0_; }
  const Matrix& cost() const { return cost_; }
  double cost(Index x, Index a) const { return cost_(x, a); }
  const Matrix& kernel(Index a) const { return kernel_[static_cast<std::size_t>(a)]; }
  double transition(Index x, Index a, Index y) const { return kernel_[static_cast<std::size_t>(a)](x, y); }
  double c_max() const { return cost_.cwiseAbs().maxCoeff(); }

 private:
  Matrix cost_;
  std::vector<Matrix> kernel_;
  double gamma_;
  Index x0_;
};

/// mu_theta(a|x) proportional to exp(theta . phi(x, a)); features[x] is n_actions x K.
class SoftmaxPolicy {
 public:
  SoftmaxPolicy(std::vector<Matrix> features, Vector theta) : features_(std::move(features)), theta_(std::move(theta)) {
    if (features_.empty()) throw ConfigError("policy needs features for at least one state");
    const Index k = features_.front().cols();
    const Index na = features_.front().rows();
    for (const auto& f : features_)
      if (f.cols() != k || f.rows() != na) throw ConfigError("policy features must share shape across states");
    if (theta_.size() != k) throw ConfigError("theta length does not match the feature dimension");
  }

  /// One-hot (x, a) features: theta has n_states * n_actions entries.
  static std::vector<Matrix> tabular_features(Index n_states, Index n_actions) {
    std::vector<Matrix> f;
    for (Index x = 0; x < n_states; ++x) {
      Matrix m = Matrix::Zero(n_actions, n_states * n_actions);
      for (Index a = 0; a < n_actions; ++a) m(a, x * n_actions + a) = 1.0;
      f.push_back(std::move(m));
    }
    return f;
  }

  Index n_states() const { return static_cast<Index>(features_.size()); }
  Index n_actions() const { return features_.front().rows(); }
  Index param_dim() const { return theta_.size(); }
  const Vector& theta() const { return theta_; }
  const std::vector<Matrix>& features() const { return features_; }

  SoftmaxPolicy with_theta(Vector theta) const { return SoftmaxPolicy(features_, std::move(theta)); }

  Vector probs(Index x) const {
    const Vector logits = features_[static_cast<std::size_t>(x)] * theta_;
    const Vector e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
  }

  /// Rows: actions; columns: parameters.
  Matrix scores(Index x) const {
    const Matrix& f = features_[static_cast<std::size_t>(x)];
    const Eigen::RowVectorXd mean = probs(x).transpose() * f;
    return f.rowwise() - mean;
  }

  Vector score(Index x, Index a) const { return scores(x).row(a).transpose(); }

 private:
  std::vector<Matrix> features_;
  Vector theta_;
};

inline void check_compatible(const Mdp& mdp, const SoftmaxPolicy& pi) {
  if (pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions())
    throw ConfigError("policy and MDP disagree on state or action counts");
}

inline Vector policy_score(const SoftmaxPolicy& pi, Index x, Index a) { return pi.score(x, a); }

/// P_theta(x'|x) = sum_a P(x'|x, a) mu(a|x).
inline Matrix induced_kernel(const Mdp& mdp, const SoftmaxPolicy& pi) {
  check_compatible(mdp, pi);
  Matrix k = Matrix::Zero(mdp.n_states(), mdp.n_states());
  for (Index x = 0; x < mdp.n_states(); ++x) {
    const Vector mu = pi.probs(x);
    for (Index a = 0; a < mdp.n_actions(); ++a) k.row(x) += mu(a) * mdp.kernel(a).row(x);
  }
  return k;
}

/// C_theta(x) = sum_a mu(a|x) C(x, a).
inline Vector policy_cost(const Mdp& mdp, const SoftmaxPolicy& pi) {
  check_compatible(mdp, pi);
  Vector c(mdp.n_states());
  for (Index x = 0; x < mdp.n_states(); ++x) c(x) = pi.probs(x).dot(mdp.cost().row(x).transpose());
  return c;
}

struct Step {
  Index x = 0;
  Index a = 0;
  double cost = 0.0;
};

struct Trajectory {
  std::vector<Step> steps;
  std::size_t size() const { return steps.size(); }
};

inline void check_stochastic(const Matrix& k, Index n) {
  if (k.rows() != n || k.cols() != n) throw ConfigError("kernel override must be n_states x n_states");
  if ((k.array() < -1e-12).any()) throw ConfigError("kernel override has negative entries");
  for (Index x = 0; x < n; ++x)
    if (std::abs(k.row(x).sum() - 1.0) > 1e-8) throw ConfigError("kernel override is not row-stochastic");
}

/// Samples x_0 = mdp.x0(), a_t ~ mu(.|x_t), x_{t+1} ~ P(.|x_t, a_t). With a
/// state-to-state override the next state is drawn from override(x_t, .)
/// instead, independently of the action.
inline Trajectory simulate(const Mdp& mdp, const SoftmaxPolicy& pi, std::size_t horizon, Rng& rng,
                           const std::optional<Matrix>& kernel_override = std::nullopt,
                           std::optional<Index> start = std::nullopt) {
  check_compatible(mdp, pi);
  if (horizon == 0) throw ConfigError("horizon must be at least 1");
  if (kernel_override) check_stochastic(*kernel_override, mdp.n_states());
  const Index n = mdp.n_states();
  std::vector<std::discrete_distribution<Index>> act, next_override;
  std::vector<std::vector<std::discrete_distribution<Index>>> next(static_cast<std::size_t>(n));
  for (Index x = 0; x < n; ++x) {
    const Vector mu = pi.probs(x);
    act.emplace_back(mu.data(), mu.data() + mu.size());
    if (kernel_override) {
      const Vector row = kernel_override->row(x).transpose().cwiseMax(0.0);
      next_override.emplace_back(row.data(), row.data() + row.size());
    } else {
      for (Index a = 0; a < mdp.n_actions(); ++a) {
        const Vector row = mdp.kernel(a).row(x).transpose();
        next[static_cast<std::size_t>(x)].emplace_back(row.data(), row.data() + row.size());
      }
    }
  }
  Trajectory tr;
  tr.steps.reserve(horizon);
  Index x = start.value_or(mdp.x0());
  for (std::size_t t = 0; t < horizon; ++t) {
    const Index a = act[static_cast<std::size_t>(x)](rng);
    tr.steps.push_back(Step{x, a, mdp.cost(x, a)});
    x = kernel_override ? next_override[static_cast<std::size_t>(x)](rng)
                        : next[static_cast<std::size_t>(x)][static_cast<std::size_t>(a)](rng);
  }
  return tr;
}

inline double discounted_return(const Trajectory& tr, double gamma) {
  double g = 0.0, w = 1.0;
  for (const auto& s : tr.steps) {
    g += w * s.cost;
    w *= gamma;
  }
  return g;
}

/// Smallest T with gamma^T C_max / (1 - gamma) <= eps.
inline std::size_t horizon_for(double gamma, double c_max, double eps = 1e-6) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("discount factor must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("truncation tolerance must be positive");
  if (c_max <= 0.0) return 1;
  const double t = std::ceil(std::log(eps * (1.0 - gamma) / c_max) / std::log(gamma));
  return static_cast<std::size_t>(std::max(1.0, t));
}

}  // namespace crpg
