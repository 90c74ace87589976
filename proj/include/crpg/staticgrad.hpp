#pragma once

// Gradient estimators for static coherent risk rho(Z) of a cost Z ~ P_theta.

#include "crpg/envelope.hpp"
#include "crpg/probspace.hpp"
#include "crpg/risk.hpp"
#include "crpg/saddle.hpp"
#include "crpg/types.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace crpg {

struct GradEstimate {
  Vector grad;
  std::size_t n_samples = 0;
  std::map<std::string, double> diagnostics;
  std::vector<std::string> flags;

  bool has_flag(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }
};

namespace detail {

inline Vector theorem2_eval(const FiniteDist& dist, const CostVariable& z, const SaddlePoint& sp,
                            const RiskEnvelope& env) {
  const auto red = reduce(dist, z.values());
  const Index n = red.p.size();
  Matrix s(n, dist.param_dim());
  for (Index j = 0; j < n; ++j) s.row(j) = dist.scores().row(red.support[static_cast<std::size_t>(j)]);
  const Vector xi = restrict_to(sp.xi, red.support);

  const auto& m = env.model();
  Vector weight = red.p.cwiseProduct(xi).cwiseProduct((red.z.array() - sp.lam_p).matrix());
  if (m.num_equalities(n) > 0) weight -= red.p.cwiseProduct(m.equality_dp(xi, red.p).transpose() * sp.lam_e);
  if (m.num_inequalities(n) > 0) weight -= red.p.cwiseProduct(m.inequality_dp(xi, red.p).transpose() * sp.lam_i);
  return s.transpose() * weight;
}

}  // namespace detail

/// Theorem-2 gradient evaluated by enumeration over the support of `dist`:
///   sum_w P xi (Z - lam_p) s  -  sum_e lam_e sum_w dg_e/dp(w) P(w) s(w)
///                             -  sum_i lam_i sum_w df_i/dp(w) P(w) s(w),
/// where s(w) is the score row of atom w. Throws "saddle point invalid" when
/// the saddle fails its KKT check by more than `kkt_tol`.
inline GradEstimate grad_theorem2(const FiniteDist& dist, const CostVariable& z, const SaddlePoint& sp,
                                  const RiskEnvelope& env, double kkt_tol = 1e-6) {
  if (!dist.has_scores()) throw ConfigError("gradient needs per-outcome scores");
  const auto kkt = kkt_verify(env, dist, z, sp);
  if (kkt.max() > kkt_tol) {
    std::ostringstream os;
    os << "saddle point invalid: KKT residual " << kkt.max() << " exceeds " << kkt_tol;
    throw NumericalError(os.str());
  }
  GradEstimate out;
  out.grad = detail::theorem2_eval(dist, z, sp, env);
  out.diagnostics["kkt_residual"] = kkt.max();
  return out;
}

namespace detail {

inline void require_scores(const SampleBatch& batch, std::size_t min_n) {
  if (batch.size() < min_n) {
    std::ostringstream os;
    os << "estimator needs at least " << min_n << " samples, got " << batch.size();
    throw ConfigError(os.str());
  }
  if (batch.param_dim() == 0) throw ConfigError("samples carry no scores");
}

/// (1/N) sum_i s_i z_i and the sample mean of z.
inline std::pair<Vector, double> lr_mean(const SampleBatch& batch) {
  const double n = static_cast<double>(batch.size());
  Vector g = Vector::Zero(batch.param_dim());
  double mean = 0.0;
  for (const auto& d : batch.draws) {
    g += d.cost * d.score;
    mean += d.cost;
  }
  return {g / n, mean / n};
}

}  // namespace detail

/// Likelihood-ratio gradient of E[Z]: (1/N) sum_i score_i z_i.
inline GradEstimate grad_lr_mean(const SampleBatch& batch) {
  detail::require_scores(batch, 1);
  GradEstimate out;
  auto [g, mean] = detail::lr_mean(batch);
  out.grad = std::move(g);
  out.n_samples = batch.size();
  out.diagnostics["mean"] = mean;
  return out;
}

/// Sampled CVaR gradient (1/(alpha N)) sum_{z_i > q} score_i (z_i - q), with q
/// the smallest order statistic whose empirical cumulative mass reaches 1 - alpha.
inline GradEstimate grad_cvar_sampled(const SampleBatch& batch, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("CVaR level must lie in (0, 1]");
  detail::require_scores(batch, 1);
  const auto n = batch.size();
  if (static_cast<double>(n) * alpha < 10.0) throw ConfigError("CVaR estimator needs N * alpha >= 10");

  std::vector<double> sorted;
  sorted.reserve(n);
  for (const auto& d : batch.draws) sorted.push_back(d.cost);
  const double need = (1.0 - alpha) * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(need - 1e-9)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
  const double q = sorted[k - 1];

  GradEstimate out;
  out.grad = Vector::Zero(batch.param_dim());
  std::size_t tail = 0;
  for (const auto& d : batch.draws) {
    if (d.cost > q) {
      out.grad += (d.cost - q) * d.score;
      ++tail;
    }
  }
  out.grad /= alpha * static_cast<double>(n);
  out.n_samples = n;
  out.diagnostics["quantile"] = q;
  out.diagnostics["tail_count"] = static_cast<double>(tail);
  if (tail == 0) out.flags.emplace_back("no tail samples");
  return out;
}

enum class GmsdForm {
  exact,     // derivative of E[Z] + c SD+[Z]
  verbatim,  // published form: the score (z - m) term lacks the factor 1/2
};

/// GMSD: gradient of E[Z] + c SD+[Z] from samples,
///   g_E + (c / SD) (1/N) sum_i (z_i - m)_+ (k s_i (z_i - m) - g_E),
/// with k = 1/2 for GmsdForm::exact and k = 1 for GmsdForm::verbatim.
inline GradEstimate grad_gmsd(const SampleBatch& batch, double c, GmsdForm form = GmsdForm::exact) {
  if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("mean-semideviation trade-off must lie in [0, 1]");
  detail::require_scores(batch, 2);
  const double n = static_cast<double>(batch.size());
  const auto [g_mean, mean] = detail::lr_mean(batch);
  double semi = 0.0;
  for (const auto& d : batch.draws) semi += std::pow(std::max(d.cost - mean, 0.0), 2);
  const double sd = std::sqrt(semi / n);

  GradEstimate out;
  out.n_samples = batch.size();
  out.diagnostics["mean"] = mean;
  out.diagnostics["semideviation"] = sd;
  out.grad = g_mean;
  if (!(sd > 0.0)) {
    out.flags.emplace_back("zero semideviation");
    return out;
  }
  if (c == 0.0) return out;
  const double k = form == GmsdForm::exact ? 0.5 : 1.0;
  Vector acc = Vector::Zero(g_mean.size());
  for (const auto& d : batch.draws) {
    const double up = std::max(d.cost - mean, 0.0);
    if (up > 0.0) acc += up * (k * (d.cost - mean) * d.score - g_mean);
  }
  out.grad += (c / sd) * acc / n;
  return out;
}

/// Gradient of E[Z] + c sqrt(Var[Z]) via the chain rule on sample moments.
inline GradEstimate grad_meanstd_baseline(const SampleBatch& batch, double c) {
  if (!(c >= 0.0)) throw ConfigError("mean-std coefficient must be non-negative");
  detail::require_scores(batch, 2);
  const double n = static_cast<double>(batch.size());
  Vector g1 = Vector::Zero(batch.param_dim()), g2 = Vector::Zero(batch.param_dim());
  double m1 = 0.0;
  for (const auto& d : batch.draws) {
    g1 += d.cost * d.score;
    g2 += d.cost * d.cost * d.score;
    m1 += d.cost;
  }
  g1 /= n;
  g2 /= n;
  m1 /= n;
  double var = 0.0;
  for (const auto& d : batch.draws) var += (d.cost - m1) * (d.cost - m1);
  var /= n;

  GradEstimate out;
  out.n_samples = batch.size();
  out.diagnostics["mean"] = m1;
  out.diagnostics["variance"] = var;
  out.grad = g1;
  if (!(var > 1e-300)) {
    out.flags.emplace_back("zero variance");
    return out;
  }
  out.grad += c * (g2 - 2.0 * m1 * g1) / (2.0 * std::sqrt(var));
  return out;
}

struct SaaOptions {
  double reg = 0.0;
  bool force_numeric = false;  // solve the program even when a closed form exists
  SolverOptions solver{};
};

/// Sample-average estimator: build P_N from the batch, solve the envelope
/// program under P_N and evaluate the Theorem-2 expression under P_N. When
/// the envelope has a closed-form saddle (and reg = 0) that saddle is used,
/// which fixes the quantile convention for CVaR.
inline GradEstimate grad_saa(const RiskEnvelope& env, const SampleBatch& batch, Index support_size,
                             const SaaOptions& opt = {}) {
  detail::require_scores(batch, 1);
  const FiniteDist emp = empirical_from_samples(batch, support_size);
  const CostVariable z = empirical_costs(batch, support_size);

  SaddlePoint sp;
  double residual = 0.0;
  int iterations = 0;
  if (opt.reg == 0.0 && !opt.force_numeric) {
    sp = evaluate_risk(env, emp, z, opt.solver).sp;
  } else {
    EnvelopeProgram prog{emp, z, env, opt.reg, opt.solver.tol, opt.solver.max_iter};
    auto rep = solve_envelope_program(prog, opt.solver);
    residual = rep.kkt_residual;
    iterations = rep.iterations;
    sp = std::move(rep.sp);
  }
  GradEstimate out;
  if (opt.reg == 0.0) {
    out = grad_theorem2(emp, z, sp, env);
  } else {
    // The penalized program's stationarity carries the extra -2 reg P^2 xi
    // term, so the plain KKT check does not apply.
    out.grad = detail::theorem2_eval(emp, z, sp, env);
    out.diagnostics["kkt_residual"] = residual;
  }
  out.n_samples = batch.size();
  out.diagnostics["rho"] = sp.objective;
  out.diagnostics["solver_iterations"] = iterations;
  return out;
}

/// Exact rho and Theorem-2 gradient of a parametric model at theta.
template <ParametricModel M>
std::pair<double, GradEstimate> exact_risk_gradient(const M& model, const Vector& theta, const CostVariable& z,
                                                    const RiskEnvelope& env, const SolverOptions& opt = {}) {
  const FiniteDist d(model.probs(theta), model.scores(theta));
  auto r = evaluate_risk(env, d, z, opt);
  auto g = grad_theorem2(d, z, r.sp, env);
  return {r.rho, std::move(g)};
}

/// Largest probability mass carried by atoms tied at the CVaR quantile.
inline double cvar_quantile_mass(const FiniteDist& dist, const CostVariable& z, double alpha) {
  const auto sp = analytic_saddle_cvar(dist, z, alpha);
  double mass = 0.0;
  for (Index w = 0; w < dist.size(); ++w)
    if (z(w) == sp.lam_p) mass += dist.prob(w);
  return mass;
}

}  // namespace crpg
