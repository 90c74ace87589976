#pragma once

// CLI commands as library functions: benchmark runs, gradient checks,
// optimization, critic fits and risk evaluation.

#include "crpg/dynrisk.hpp"
#include "crpg/harness/assets.hpp"
#include "crpg/harness/config.hpp"
#include "crpg/optimizer.hpp"
#include "crpg/risk.hpp"
#include "crpg/staticgrad.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

namespace crpg::harness {

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_numerical = 2, exit_tolerance = 3 };

namespace detail {

inline double mean_std_of(const Vector& p, const Vector& z, double c) {
  const double m = p.dot(z);
  const double var = p.dot((z.array() - m).square().matrix());
  return m + c * std::sqrt(std::max(var, 0.0));
}

/// Risk of the empirical distribution of a batch (each draw one atom of mass 1/N).
inline double batch_risk(const ObjectiveSpec& o, const SampleBatch& b) {
  Vector z(static_cast<Index>(b.size()));
  for (std::size_t i = 0; i < b.size(); ++i) z(static_cast<Index>(i)) = b.draws[i].cost;
  const Vector p = Vector::Constant(z.size(), 1.0 / static_cast<double>(z.size()));
  if (o.risk == "meanstd") return mean_std_of(p, z, o.c);
  return evaluate_risk(*o.envelope(), FiniteDist(p), CostVariable(z)).rho;
}

/// Gradient from a sample batch for the sampled static estimators.
inline GradEstimate sampled_gradient(const ExperimentConfig& c, const SampleBatch& batch, Index support) {
  const auto& e = c.estimator;
  if (e == "lr") return grad_lr_mean(batch);
  if (e == "cvar") return grad_cvar_sampled(batch, c.objective.alpha);
  if (e == "gmsd") return grad_gmsd(batch, c.objective.alpha);
  if (e == "meanstd") return grad_meanstd_baseline(batch, c.objective.c);
  if (e == "saa") return grad_saa(*c.objective.envelope(), batch, support);
  throw ConfigError("estimator '" + e + "' does not use samples");
}

}  // namespace detail

/// Exact objective of an enumerable model (atoms or MDP) at theta.
inline double exact_objective(const ExperimentConfig& c, const Vector& theta) {
  if (c.model_type == "atoms") {
    const SoftmaxModel m(c.atoms->features);
    const Vector p = m.probs(theta);
    if (c.objective.risk == "meanstd") return detail::mean_std_of(p, c.atoms->costs, c.objective.c);
    return evaluate_risk(*c.objective.envelope(), FiniteDist(p), CostVariable(c.atoms->costs)).rho;
  }
  if (c.model_type == "mdp") {
    const auto pi = c.mdp->policy.with_theta(theta);
    return solve_value_exact(c.mdp->mdp, pi, *c.objective.envelope(), 1e-13).value(c.mdp->mdp.x0());
  }
  throw ConfigError("the asset model has no exact objective");
}

/// Critic fit by PRSVI at the policy `pi` from one simulated trajectory.
inline PrsviResult fit_critic(const ExperimentConfig& c, const SoftmaxPolicy& pi, Rng& rng) {
  const Mdp& m = c.mdp->mdp;
  const Matrix phi = c.critic.features.value_or(Matrix::Identity(m.n_states(), m.n_states()));
  const Trajectory tr = simulate(m, pi, c.critic.trajectory_length, rng);
  PrsviOptions opt;
  opt.k_iters = c.critic.k_iters;
  opt.kernel = c.critic.kernel;
  opt.reg = c.critic.reg;
  return prsvi(tr, phi, *c.objective.envelope(), m, pi, opt);
}

/// theta -> gradient estimate for the configured model and estimator.
inline GradFn make_grad_fn(const ExperimentConfig& c) {
  if (c.model_type == "assets") {
    return [c](const Vector& th, Rng& rng) {
      const auto batch = AssetModel{}.sample(th, c.samples_per_iter, rng);
      return detail::sampled_gradient(c, batch, static_cast<Index>(batch.size()));
    };
  }
  if (c.model_type == "atoms") {
    return [c](const Vector& th, Rng& rng) {
      const SoftmaxModel m(c.atoms->features);
      const CostVariable z(c.atoms->costs);
      if (c.estimator == "theorem2") return exact_risk_gradient(m, th, z, *c.objective.envelope()).second;
      return detail::sampled_gradient(c, m.sample(th, z, c.samples_per_iter, rng), m.size());
    };
  }
  if (c.estimator == "dynamic-exact") {
    return [c](const Vector& th, Rng&) {
      return grad_dynamic_exact(c.mdp->mdp, c.mdp->policy.with_theta(th), *c.objective.envelope());
    };
  }
  return [c](const Vector& th, Rng& rng) {
    const auto pi = c.mdp->policy.with_theta(th);
    Rng critic_rng = rng.split(1), actor_rng = rng.split(2);
    const auto critic = fit_critic(c, pi, critic_rng);
    TwoPhaseOptions opt;
    opt.n_trajectories = c.samples_per_iter;
    opt.n_next = c.twophase.n_next;
    opt.horizon = c.twophase.horizon;
    opt.baseline = c.twophase.baseline;
    auto g = grad_dynamic_twophase(c.mdp->mdp, pi, *c.objective.envelope(), critic.value, opt, actor_rng);
    g.diagnostics["critic_value_x0"] = critic.value(c.mdp->mdp.x0());
    return g;
  };
}

/// theta -> objective: exact for enumerable models, a fresh-batch empirical estimate for assets.
inline ObjFn make_obj_fn(const ExperimentConfig& c) {
  if (c.model_type == "assets") {
    return [c](const Vector& th, Rng& rng) {
      return detail::batch_risk(c.objective, AssetModel{}.sample(th, c.samples_per_iter, rng));
    };
  }
  return [c](const Vector& th, Rng&) { return exact_objective(c, th); };
}

// ---------------------------------------------------------------------------

struct BenchResult {
  RunTrace trace;
  Matrix probs;  // row k: P(A1), P(A2), P(A3) at iterate k
};

/// SGD on the asset benchmark. The objective column stays empty; only selection
/// probabilities are recorded.
inline BenchResult bench_assets(const ExperimentConfig& c) {
  if (c.model_type != "assets") throw ConfigError("bench-assets needs the asset model");
  BenchResult r;
  r.trace = sgd_minimize(make_grad_fn(c), nullptr, c.sgd);
  r.probs.resize(static_cast<Index>(r.trace.rows.size()), 3);
  for (std::size_t k = 0; k < r.trace.rows.size(); ++k)
    r.probs.row(static_cast<Index>(k)) = AssetModel{}.probs(r.trace.rows[k].theta).transpose();
  return r;
}

inline void write_bench_csv(const BenchResult& r, std::ostream& os) {
  os << "iter,p_a1,p_a2,p_a3\n";
  for (Index k = 0; k < r.probs.rows(); ++k)
    os << k << ',' << format_double(r.probs(k, 0)) << ',' << format_double(r.probs(k, 1)) << ','
       << format_double(r.probs(k, 2)) << '\n';
}

inline json bench_json(const BenchResult& r) {
  json rows = json::array();
  for (Index k = 0; k < r.probs.rows(); ++k) rows.push_back({{"iter", k}, {"p", to_std(r.probs.row(k).transpose())}});
  return {{"rows", rows}, {"aborted", r.trace.aborted}, {"abort_reason", r.trace.abort_reason}};
}

struct GradCheckReport {
  Vector grad;
  Vector reference;
  std::string reference_kind;
  double max_abs_dev = 0.0;
  double max_rel_dev = 0.0;
  double tolerance = 0.0;
  std::optional<double> classical_dev;  // expectation only: distance to the classical policy gradient
  bool pass = false;

  json to_json() const {
    json j{{"grad", to_std(grad)},
           {"reference", to_std(reference)},
           {"reference_kind", reference_kind},
           {"max_abs_dev", max_abs_dev},
           {"max_rel_dev", max_rel_dev},
           {"tolerance", tolerance},
           {"pass", pass}};
    if (classical_dev) j["classical_dev"] = *classical_dev;
    return j;
  }
};

/// Classical likelihood-ratio gradient of E[Z] (atoms) or of the discounted
/// cost V(x0) via Q-values and the discounted occupancy (MDP).
inline Vector classical_gradient(const ExperimentConfig& c, const Vector& theta) {
  if (c.model_type == "atoms") {
    const SoftmaxModel m(c.atoms->features);
    const Vector p = m.probs(theta);
    return m.scores(theta).transpose() * p.cwiseProduct(c.atoms->costs);
  }
  const Mdp& m = c.mdp->mdp;
  const auto pi = c.mdp->policy.with_theta(theta);
  const Index n = m.n_states();
  const Matrix k = induced_kernel(m, pi);
  const Vector v = (Matrix::Identity(n, n) - m.gamma() * k).partialPivLu().solve(policy_cost(m, pi));
  Vector e = Vector::Zero(n);
  e(m.x0()) = 1.0;
  const Vector d = (Matrix::Identity(n, n) - m.gamma() * k.transpose()).partialPivLu().solve(e);
  Vector g = Vector::Zero(pi.param_dim());
  for (Index x = 0; x < n; ++x) {
    const Vector mu = pi.probs(x);
    for (Index a = 0; a < m.n_actions(); ++a) {
      const double q = m.cost(x, a) + m.gamma() * m.kernel(a).row(x).dot(v.transpose());
      g += d(x) * mu(a) * q * pi.score(x, a);
    }
  }
  return g;
}

/// Compares the configured estimator at theta with central differences of the
/// exact objective. Relative deviation is max |g - fd| / max |fd|.
inline GradCheckReport grad_check(const ExperimentConfig& c) {
  if (c.model_type == "assets") throw ConfigError("grad-check needs an enumerable model (atoms or mdp)");
  const Vector theta = c.eval_theta();
  Rng rng(c.seed);
  GradCheckReport r;
  r.grad = make_grad_fn(c)(theta, rng).grad;
  r.reference_kind = "central finite differences";
  r.reference.resize(theta.size());
  for (Index k = 0; k < theta.size(); ++k) {
    Vector tp = theta, tm = theta;
    tp(k) += c.fd_step;
    tm(k) -= c.fd_step;
    r.reference(k) = (exact_objective(c, tp) - exact_objective(c, tm)) / (2.0 * c.fd_step);
  }
  r.max_abs_dev = (r.grad - r.reference).cwiseAbs().maxCoeff();
  r.max_rel_dev = r.max_abs_dev / std::max(r.reference.cwiseAbs().maxCoeff(), 1e-12);
  const double default_tol = c.is_exact_estimator() ? (c.is_dynamic() ? 1e-3 : 1e-4) : 0.1;
  r.tolerance = c.tolerance.value_or(default_tol);
  r.pass = r.max_rel_dev < r.tolerance;
  if (c.objective.risk == "expectation") {
    r.classical_dev = (r.grad - classical_gradient(c, theta)).cwiseAbs().maxCoeff();
    if (c.is_exact_estimator()) r.pass = r.pass && *r.classical_dev < 1e-6;
  }
  return r;
}

/// SGD on the configured objective. Objective column: exact for enumerable
/// models, a fresh-batch estimate for the asset model.
inline RunTrace optimize(const ExperimentConfig& c) { return sgd_minimize(make_grad_fn(c), make_obj_fn(c), c.sgd); }

inline json theta_json(const RunTrace& t) {
  return {{"theta", to_std(t.final_theta())},
          {"iterations", static_cast<int>(t.rows.size()) - 1},
          {"objective", t.rows.back().objective},
          {"aborted", t.aborted}};
}

inline json trace_json(const RunTrace& t) {
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"iter", r.iter},
                    {"theta", to_std(r.theta)},
                    {"objective", r.objective},
                    {"grad_norm", std::isfinite(r.grad_norm) ? json(r.grad_norm) : json(nullptr)}});
  return {{"rows", rows}, {"final", theta_json(t)}, {"abort_reason", t.abort_reason}};
}

inline json critic_json(const ExperimentConfig& c, const PrsviResult& r) {
  const Mdp& m = c.mdp->mdp;
  return {{"weights", to_std(r.value.weights())},
          {"values", to_std(r.value.values())},
          {"value_x0", r.value(m.x0())},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"kernel", c.critic.kernel == KernelSource::exact ? "exact" : "empirical"}};
}

/// PRSVI critic at theta.
inline PrsviResult critic(const ExperimentConfig& c) {
  if (c.model_type != "mdp") throw ConfigError("critic needs an MDP model");
  Rng rng(c.seed);
  return fit_critic(c, c.mdp->policy.with_theta(c.eval_theta()), rng);
}

/// Objective at theta: exact for enumerable models, a batch estimate for the asset model.
inline json eval_risk(const ExperimentConfig& c) {
  const Vector theta = c.eval_theta();
  json j{{"risk", c.objective.risk}, {"theta", to_std(theta)}};
  if (c.model_type == "assets") {
    Rng rng(c.seed);
    const auto batch = AssetModel{}.sample(theta, c.samples_per_iter, rng);
    j["rho"] = detail::batch_risk(c.objective, batch);
    j["samples"] = c.samples_per_iter;
    j["exact"] = false;
    return j;
  }
  j["rho"] = exact_objective(c, theta);
  j["exact"] = true;
  if (c.model_type == "mdp") {
    const auto pi = c.mdp->policy.with_theta(theta);
    j["values"] = to_std(solve_value_exact(c.mdp->mdp, pi, *c.objective.envelope(), 1e-13).value.values());
  }
  return j;
}

}  // namespace crpg::harness
