#pragma once

// Markov coherent risk: risk-sensitive Bellman operator, exact value
// iteration, projected value iteration with linear features, the stage-wise
// cost h(x, a) and the dynamic policy gradient (exact and two-phase sampled).
//
// Per-state envelope problems are posed on P_theta(.|x) with cost Z = gamma V,
// so T[V](x) = C_theta(x) + rho_x(gamma V).

#include "crpg/envelope.hpp"
#include "crpg/mdp.hpp"
#include "crpg/probspace.hpp"
#include "crpg/risk.hpp"
#include "crpg/saddle.hpp"
#include "crpg/staticgrad.hpp"
#include "crpg/types.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace crpg {

/// V as a table over states or as Phi v with Phi (n_states x k) of full column rank.
class ValueFn {
 public:
  static ValueFn tabular(Vector table) {
    if (!table.allFinite()) throw NumericalError("value table is not finite");
    ValueFn v;
    v.weights_ = std::move(table);
    return v;
  }

  static ValueFn linear(Matrix phi, Vector weights) {
    if (phi.cols() != weights.size()) throw ConfigError("feature and weight dimensions differ");
    Eigen::ColPivHouseholderQR<Matrix> qr(phi);
    if (qr.rank() < phi.cols()) throw ConfigError("feature matrix must have full column rank");
    ValueFn v;
    v.phi_ = std::move(phi);
    v.weights_ = std::move(weights);
    return v;
  }

  bool is_tabular() const { return !phi_.has_value(); }
  const Vector& weights() const { return weights_; }
  const Matrix& features() const {
    if (!phi_) throw ConfigError("tabular value function has no feature matrix");
    return *phi_;
  }
  Index n_states() const { return phi_ ? phi_->rows() : weights_.size(); }
  Vector values() const { return phi_ ? Vector(*phi_ * weights_) : weights_; }
  double operator()(Index x) const { return phi_ ? phi_->row(x).dot(weights_) : weights_(x); }

 private:
  ValueFn() = default;
  std::optional<Matrix> phi_;
  Vector weights_;
};

/// Saddle of the envelope problem at every state, plus the per-successor
/// adjustment adj_x(y) = xi(y)(gamma V(y) - lam_p) - sum lam_i df_i/dp(y) - sum lam_e dg_e/dp(y)
/// (0 off the support) that enters the stage-wise cost.
struct StateSaddles {
  std::vector<SaddlePoint> sp;
  std::vector<Vector> adj;
  Vector rho;
  Matrix kernel;  // P(.|x) the saddles were computed on

  const SaddlePoint& at(Index x) const { return sp[static_cast<std::size_t>(x)]; }
};

struct InnerOptions {
  double reg = 0.0;
  SolverOptions solver{};
};

namespace detail {

inline Vector saddle_adjustment(const RiskEnvelope& env, const Vector& p_full, const Vector& z_full,
                                const SaddlePoint& sp) {
  const auto red = reduce(FiniteDist(p_full), z_full);
  const Index n = red.p.size();
  const Vector xi = restrict_to(sp.xi, red.support);
  const auto& m = env.model();
  Vector adj = xi.cwiseProduct((red.z.array() - sp.lam_p).matrix());
  if (m.num_equalities(n) > 0) adj -= m.equality_dp(xi, red.p).transpose() * sp.lam_e;
  if (m.num_inequalities(n) > 0) adj -= m.inequality_dp(xi, red.p).transpose() * sp.lam_i;
  return expand(adj, red.support, p_full.size());
}

inline Vector normalized_row(const Matrix& k, Index x) {
  Vector row = k.row(x).transpose();
  const double s = row.sum();
  if (std::abs(s - 1.0) > 1e-9) {
    std::ostringstream os;
    os << "transition row of state " << x << " sums to " << s;
    throw ConfigError(os.str());
  }
  return row / s;
}

}  // namespace detail

/// Solves the envelope problem for every state with rows of `kernel` as the
/// distributions and Z = gamma * values.
inline StateSaddles compute_state_saddles(const Matrix& kernel, const RiskEnvelope& env, const Vector& values,
                                          double gamma, const InnerOptions& opt = {}) {
  const Index n = kernel.rows();
  if (values.size() != kernel.cols()) throw ConfigError("value function length does not match the state count");
  const Vector z = gamma * values;
  StateSaddles out;
  out.rho.resize(n);
  out.kernel = kernel;
  for (Index x = 0; x < n; ++x) {
    const Vector p = detail::normalized_row(kernel, x);
    try {
      SaddlePoint sp;
      if (opt.reg > 0.0) {
        EnvelopeProgram prog{FiniteDist(p), CostVariable(z), env, opt.reg, opt.solver.tol, opt.solver.max_iter};
        sp = solve_envelope_program(prog, opt.solver).sp;
      } else {
        sp = evaluate_risk(env, FiniteDist(p), CostVariable(z), opt.solver).sp;
      }
      out.rho(x) = sp.objective;
      out.adj.push_back(detail::saddle_adjustment(env, p, z, sp));
      out.sp.push_back(std::move(sp));
    } catch (const Error& e) {
      std::ostringstream os;
      os << "state " << x << ": " << e.what();
      if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(os.str());
      throw NumericalError(os.str());
    }
  }
  return out;
}

/// T[V](x) = C_theta(x) + rho_x(gamma V).
inline ValueFn bellman_apply(const Mdp& mdp, const SoftmaxPolicy& pi, const RiskEnvelope& env, const ValueFn& v,
                             const InnerOptions& opt = {}) {
  const auto s = compute_state_saddles(induced_kernel(mdp, pi), env, v.values(), mdp.gamma(), opt);
  return ValueFn::tabular(policy_cost(mdp, pi) + s.rho);
}

struct ValueSolution {
  ValueFn value = ValueFn::tabular(Vector(0));
  StateSaddles saddles;
  int iterations = 0;
};

/// Fixed-point iteration of the Bellman operator from V = 0 (or `init`) until
/// ||V_{k+1} - V_k||_inf < tol (1 - gamma) / gamma.
inline ValueSolution solve_value_exact(const Mdp& mdp, const SoftmaxPolicy& pi, const RiskEnvelope& env,
                                       double tol = 1e-10, std::optional<Vector> init = std::nullopt,
                                       const InnerOptions& opt = {}) {
  if (!(tol > 0.0)) throw ConfigError("value iteration tolerance must be positive");
  const double g = mdp.gamma();
  const Matrix k = induced_kernel(mdp, pi);
  const Vector c = policy_cost(mdp, pi);
  const double cmax = std::max(mdp.c_max(), 1e-300);
  const int cap = static_cast<int>(std::ceil(std::log(tol * (1.0 - g) / (2.0 * cmax)) / std::log(g))) + 100;
  Vector v = init.value_or(Vector::Zero(mdp.n_states()));
  if (v.size() != mdp.n_states()) throw ConfigError("initial value has the wrong length");
  const double stop = tol * (1.0 - g) / g;
  ValueSolution out;
  for (int it = 1;; ++it) {
    const auto s = compute_state_saddles(k, env, v, g, opt);
    const Vector next = c + s.rho;
    const double diff = (next - v).cwiseAbs().maxCoeff();
    v = next;
    if (diff < stop) {
      out.iterations = it;
      break;
    }
    if (it >= std::max(cap, 1)) {
      std::ostringstream os;
      os << "value iteration did not converge in " << it << " sweeps (last change " << diff << ")";
      throw NumericalError(os.str());
    }
  }
  out.value = ValueFn::tabular(v);
  out.saddles = compute_state_saddles(k, env, v, g, opt);
  return out;
}

/// P^xi(x'|x) = P_theta(x'|x) xi_x(x').
inline Matrix xi_weighted_kernel(const StateSaddles& s) {
  Matrix k = s.kernel;
  for (Index x = 0; x < k.rows(); ++x) k.row(x) = k.row(x).cwiseProduct(s.at(x).xi.transpose());
  return k;
}

// ---------------------------------------------------------------------------
// Critic

enum class KernelSource { empirical, exact };

struct PrsviOptions {
  int k_iters = 1000;
  double tol = 1e-10;
  std::optional<double> reg;  // default: 1/(2N) for the empirical kernel, 0 for the exact one
  KernelSource kernel = KernelSource::empirical;
  bool check_contraction = true;
  SolverOptions solver{};
};

struct PrsviResult {
  ValueFn value = ValueFn::tabular(Vector(0));
  int iterations = 0;
  bool converged = false;
};

/// P_N(x'|x) = sum_a P_N(x'|x, a) mu(a|x) from the transitions of `tr`, with mu
/// renormalized over the actions observed at x. Rows of unvisited states are zero.
inline Matrix empirical_kernel(const Trajectory& tr, const SoftmaxPolicy& pi, Index n_states) {
  const Index na = pi.n_actions();
  std::vector<Matrix> counts(static_cast<std::size_t>(n_states), Matrix::Zero(na, n_states));
  for (std::size_t t = 0; t + 1 < tr.size(); ++t)
    counts[static_cast<std::size_t>(tr.steps[t].x)](tr.steps[t].a, tr.steps[t + 1].x) += 1.0;
  Matrix k = Matrix::Zero(n_states, n_states);
  for (Index x = 0; x < n_states; ++x) {
    const Matrix& c = counts[static_cast<std::size_t>(x)];
    const Vector mu = pi.probs(x);
    double mass = 0.0;
    for (Index a = 0; a < na; ++a) {
      const double visits = c.row(a).sum();
      if (visits == 0.0) continue;
      k.row(x) += mu(a) * c.row(a) / visits;
      mass += mu(a);
    }
    if (mass > 0.0) k.row(x) /= mass;
  }
  return k;
}

/// Projected risk-sensitive value iteration
///   v <- (sum_t phi_t phi_t^T)^{-1} [sum_t phi_t C_theta(x_t) + gamma sum_t phi_t rho_{x_t}(Phi v)]
/// over the states of `tr`. The inner problems use the empirical kernel of the
/// trajectory (l2-regularized) or the exact kernel.
inline PrsviResult prsvi(const Trajectory& tr, const Matrix& phi, const RiskEnvelope& env, const Mdp& mdp,
                         const SoftmaxPolicy& pi, const PrsviOptions& opt = {}) {
  check_compatible(mdp, pi);
  if (phi.rows() != mdp.n_states()) throw ConfigError("feature matrix needs one row per state");
  if (tr.size() < 2) throw ConfigError("trajectory too short for value estimation");
  const double g = mdp.gamma();

  // Samples: steps with an observed successor, so both kernels see the same states.
  const std::size_t count = tr.size() - 1;
  Vector visits = Vector::Zero(mdp.n_states());
  for (std::size_t t = 0; t < count; ++t) visits(tr.steps[t].x) += 1.0;

  const Matrix kernel =
      opt.kernel == KernelSource::empirical ? empirical_kernel(tr, pi, mdp.n_states()) : induced_kernel(mdp, pi);
  const double reg = opt.reg.value_or(opt.kernel == KernelSource::empirical ? 0.5 / static_cast<double>(count) : 0.0);

  std::vector<Index> visited;
  for (Index x = 0; x < mdp.n_states(); ++x)
    if (visits(x) > 0.0) visited.push_back(x);

  if (opt.check_contraction) {
    for (Index x : visited) {
      const Vector p = kernel.row(x).transpose();
      Vector pr(static_cast<Index>((p.array() > 0.0).count()));
      for (Index y = 0, j = 0; y < p.size(); ++y)
        if (p(y) > 0.0) pr(j++) = p(y);
      const auto bound = env->density_upper_bound(pr);
      if (!bound) throw ConfigError("contraction condition fails: envelope gives no density bound");
      if (!(*bound * g < 1.0)) {
        std::ostringstream os;
        os << "contraction condition fails: gamma * max density = " << *bound * g << " >= 1 at state " << x;
        throw ConfigError(os.str());
      }
    }
  }

  const Matrix w = visits.asDiagonal() * phi;  // rows weighted by visit counts
  const Matrix gram = phi.transpose() * w;
  Eigen::ColPivHouseholderQR<Matrix> qr(gram);
  if (qr.rank() < gram.cols()) throw ConfigError("singular feature Gram matrix on the visited states");
  const Vector base = w.transpose() * policy_cost(mdp, pi);

  // Kernel restricted to visited rows; other rows are never used.
  Matrix sub = Matrix::Zero(static_cast<Index>(visited.size()), mdp.n_states());
  for (std::size_t i = 0; i < visited.size(); ++i) sub.row(static_cast<Index>(i)) = kernel.row(visited[i]);

  InnerOptions inner{reg, opt.solver};
  Vector v = Vector::Zero(phi.cols());
  PrsviResult out;
  for (int k = 1; k <= opt.k_iters; ++k) {
    // rho_N(Phi v) per visited state; gamma is applied outside as in the update rule.
    const auto s = compute_state_saddles(sub, env, phi * v, 1.0, inner);
    Vector rho_full = Vector::Zero(mdp.n_states());
    for (std::size_t i = 0; i < visited.size(); ++i) rho_full(visited[i]) = s.rho(static_cast<Index>(i));
    const Vector next = qr.solve(base + g * (w.transpose() * rho_full));
    const double diff = (next - v).cwiseAbs().maxCoeff();
    v = next;
    out.iterations = k;
    if (diff < opt.tol) {
      out.converged = true;
      break;
    }
  }
  out.value = ValueFn::linear(phi, v);
  return out;
}

// ---------------------------------------------------------------------------
// Actor

/// h(x, a) = C(x, a) + sum_y P(y|x, a) adj_x(y), with adj_x from the state saddles.
inline double stage_cost_h(const Mdp& mdp, const StateSaddles& s, Index x, Index a) {
  return mdp.cost(x, a) + mdp.kernel(a).row(x).dot(s.adj[static_cast<std::size_t>(x)].transpose());
}

/// Sample-average h_N(x, a) = C(x, a) + (1/N) sum_k adj_x(y_k) over next-state draws y_k ~ P(.|x, a).
inline double stage_cost_h(const Mdp& mdp, const StateSaddles& s, Index x, Index a, const std::vector<Index>& next) {
  if (next.empty()) throw ConfigError("no next-state samples");
  const Vector& adj = s.adj[static_cast<std::size_t>(x)];
  double acc = 0.0;
  for (Index y : next) acc += adj(y);
  return mdp.cost(x, a) + acc / static_cast<double>(next.size());
}

inline std::vector<Index> sample_next_states(const Mdp& mdp, Index x, Index a, std::size_t n, Rng& rng) {
  const Vector row = mdp.kernel(a).row(x).transpose();
  std::discrete_distribution<Index> pick(row.data(), row.data() + row.size());
  std::vector<Index> out(n);
  for (auto& y : out) y = pick(rng);
  return out;
}

/// grad V(x0) = sum_x d(x) sum_a mu(a|x) score(x, a) h(x, a) with the
/// unnormalized discounted occupancy d = (I - gamma (P^xi)^T)^{-1} e_{x0}.
inline GradEstimate grad_dynamic_exact(const Mdp& mdp, const SoftmaxPolicy& pi, const RiskEnvelope& env,
                                       double tol = 1e-12) {
  const auto sol = solve_value_exact(mdp, pi, env, tol);
  const Index n = mdp.n_states();
  const Matrix pxi = xi_weighted_kernel(sol.saddles);
  Vector e = Vector::Zero(n);
  e(mdp.x0()) = 1.0;
  const Matrix lhs = Matrix::Identity(n, n) - mdp.gamma() * pxi.transpose();
  const Vector d = lhs.partialPivLu().solve(e);

  GradEstimate out;
  out.grad = Vector::Zero(pi.param_dim());
  for (Index x = 0; x < n; ++x) {
    const Vector mu = pi.probs(x);
    const Matrix sc = pi.scores(x);
    for (Index a = 0; a < mdp.n_actions(); ++a)
      out.grad += d(x) * mu(a) * stage_cost_h(mdp, sol.saddles, x, a) * sc.row(a).transpose();
  }
  out.diagnostics["value_x0"] = sol.value(mdp.x0());
  out.diagnostics["xi_row_sum_error"] = (pxi.rowwise().sum().array() - 1.0).abs().maxCoeff();
  out.diagnostics["value_iterations"] = sol.iterations;
  return out;
}

struct TwoPhaseOptions {
  std::size_t n_trajectories = 1000;
  std::size_t n_next = 0;   // phase-2 draws per (x, a); 0 means n_trajectories
  std::size_t horizon = 0;  // 0 means horizon_for(gamma, C_max, eps)
  double eps = 1e-6;
  bool baseline = false;  // subtract sum_a mu(a|x) h_N(x, a) from h_N(x, a)
  InnerOptions inner{};
};

/// Two-phase estimate of grad V(x0): trajectories under the xi-weighted
/// kernel (phase 1) and next-state sampling for h (phase 2, one estimate per
/// distinct (x, a), reused across occurrences).
inline GradEstimate grad_dynamic_twophase(const Mdp& mdp, const SoftmaxPolicy& pi, const RiskEnvelope& env,
                                          const ValueFn& v, const TwoPhaseOptions& opt, Rng& rng) {
  check_compatible(mdp, pi);
  if (opt.n_trajectories == 0) throw ConfigError("two-phase sampler needs at least one trajectory");
  if (v.n_states() != mdp.n_states()) throw ConfigError("value function length does not match the state count");
  const double g = mdp.gamma();
  const std::size_t t_bound = horizon_for(g, mdp.c_max(), opt.eps);
  const std::size_t horizon = opt.horizon == 0 ? t_bound : opt.horizon;
  const std::size_t n2 = opt.n_next == 0 ? opt.n_trajectories : opt.n_next;

  const auto saddles = compute_state_saddles(induced_kernel(mdp, pi), env, v.values(), g, opt.inner);
  Matrix pxi = xi_weighted_kernel(saddles).cwiseMax(0.0);
  for (Index x = 0; x < pxi.rows(); ++x) pxi.row(x) /= pxi.row(x).sum();

  const Index na = mdp.n_actions();
  std::map<Index, double> h_cache;
  std::vector<Matrix> scores;
  for (Index x = 0; x < mdp.n_states(); ++x) scores.push_back(pi.scores(x));

  auto h_of = [&](Index x, Index a) {
    const Index key = x * na + a;
    auto it = h_cache.find(key);
    if (it == h_cache.end()) {
      Rng inner = rng.split(2 + static_cast<std::uint64_t>(key));
      it = h_cache.emplace(key, stage_cost_h(mdp, saddles, x, a, sample_next_states(mdp, x, a, n2, inner))).first;
    }
    return it->second;
  };
  std::map<Index, double> base_cache;
  auto base_of = [&](Index x) {
    auto it = base_cache.find(x);
    if (it == base_cache.end()) {
      const Vector mu = pi.probs(x);
      double b = 0.0;
      for (Index a = 0; a < na; ++a) b += mu(a) * h_of(x, a);
      it = base_cache.emplace(x, b).first;
    }
    return it->second;
  };

  Rng traj_rng = rng.split(1);
  GradEstimate out;
  out.grad = Vector::Zero(pi.param_dim());
  for (std::size_t j = 0; j < opt.n_trajectories; ++j) {
    const Trajectory tr = simulate(mdp, pi, horizon, traj_rng, pxi);
    double w = 1.0;
    for (const auto& st : tr.steps) {
      const double h = h_of(st.x, st.a) - (opt.baseline ? base_of(st.x) : 0.0);
      out.grad += w * h * scores[static_cast<std::size_t>(st.x)].row(st.a).transpose();
      w *= g;
    }
  }
  out.grad /= static_cast<double>(opt.n_trajectories);
  out.n_samples = opt.n_trajectories;
  out.diagnostics["horizon"] = static_cast<double>(horizon);
  out.diagnostics["distinct_pairs"] = static_cast<double>(h_cache.size());
  if (horizon < t_bound) out.flags.emplace_back("horizon below truncation bound");
  return out;
}

}  // namespace crpg
