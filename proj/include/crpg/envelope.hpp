#pragma once

// Risk envelopes in canonical convex-program form:
//
//   U(p) = { xi p : g_e(xi, p) = 0, f_i(xi, p) <= 0, sum_w xi(w) p(w) = 1, xi >= 0 }
//
// with g_e affine and f_i convex in xi. rho(Z) = max_{xi p in U(p)} E_xi[Z].
//
// Every model method works on a *reduced* support: `p` holds only atoms with
// strictly positive mass. The number of constraints may depend on the support
// size (CVaR and mean-semideviation carry one constraint per atom).

#include "crpg/probspace.hpp"
#include "crpg/types.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace crpg {

/// Primal optimizer and KKT multipliers of the envelope Lagrangian
///   L = sum p xi Z - lam_p (sum p xi - 1) - sum lam_e g_e - sum lam_i f_i.
/// `xi` spans the full outcome set (0 off the support); the multipliers refer
/// to the constraints of the program reduced to `support`.
struct SaddlePoint {
  Vector xi;
  double lam_p = 0.0;
  Vector lam_e;
  Vector lam_i;
  double objective = 0.0;
  std::vector<Index> support;
};

class EnvelopeModel {
 public:
  virtual ~EnvelopeModel() = default;

  virtual std::string name() const = 0;

  virtual Index num_equalities(Index n) const = 0;
  virtual Index num_inequalities(Index n) const = 0;

  virtual Vector equalities(const Vector& xi, const Vector& p) const = 0;
  /// d g / d xi; constant in xi because g is affine.
  virtual Matrix equality_jacobian(const Vector& p) const = 0;
  /// d g_e / d p(w), rows = constraints.
  virtual Matrix equality_dp(const Vector& xi, const Vector& p) const = 0;

  virtual Vector inequalities(const Vector& xi, const Vector& p) const = 0;
  virtual Matrix inequality_jacobian(const Vector& xi, const Vector& p) const = 0;
  /// sum_i weights(i) * Hessian_xi f_i(xi, p).
  virtual Matrix inequality_hessian(const Vector& xi, const Vector& p, const Vector& weights) const = 0;
  virtual Matrix inequality_dp(const Vector& xi, const Vector& p) const = 0;

  /// Uniform bound M on |d f_i / d p(w)| and |d g_e / d p(w)| over the envelope.
  virtual double dp_bound(const Vector& p) const = 0;

  /// A strictly feasible density for the given support.
  virtual Vector interior_point(const Vector& p) const = 0;

  /// Largest density value any member of U(p) can take, if known.
  virtual std::optional<double> density_upper_bound(const Vector& /*p*/) const { return std::nullopt; }

  /// Closed-form saddle point on a reduced support, if one is known.
  virtual std::optional<SaddlePoint> analytic_saddle(const Vector& /*p*/, const Vector& /*z*/) const {
    return std::nullopt;
  }
};

/// Immutable, cheaply copyable handle to an envelope model.
class RiskEnvelope {
 public:
  explicit RiskEnvelope(std::shared_ptr<const EnvelopeModel> model) : model_(std::move(model)) {
    if (!model_) throw ConfigError("null envelope model");
  }

  std::string name() const { return model_->name(); }
  const EnvelopeModel& model() const { return *model_; }
  const EnvelopeModel* operator->() const { return model_.get(); }

 private:
  std::shared_ptr<const EnvelopeModel> model_;
};

namespace detail {

/// Reduced view of a (dist, z) pair: atoms with positive mass only.
struct Reduced {
  std::vector<Index> support;
  Vector p;
  Vector z;
};

inline Reduced reduce(const FiniteDist& dist, const Vector& z) {
  if (z.size() != dist.size()) throw ConfigError("cost and distribution sizes differ");
  Reduced r;
  r.support = dist.support();
  const auto m = static_cast<Index>(r.support.size());
  r.p.resize(m);
  r.z.resize(m);
  for (Index j = 0; j < m; ++j) {
    r.p(j) = dist.prob(r.support[static_cast<std::size_t>(j)]);
    r.z(j) = z(r.support[static_cast<std::size_t>(j)]);
  }
  return r;
}

inline Vector expand(const Vector& reduced, const std::vector<Index>& support, Index n) {
  Vector full = Vector::Zero(n);
  for (std::size_t j = 0; j < support.size(); ++j) full(support[j]) = reduced(static_cast<Index>(j));
  return full;
}

inline Vector restrict_to(const Vector& full, const std::vector<Index>& support) {
  Vector r(static_cast<Index>(support.size()));
  for (std::size_t j = 0; j < support.size(); ++j) r(static_cast<Index>(j)) = full(support[j]);
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CVaR sort-and-fill

/// Closed-form CVaR saddle on a reduced support. lam_p is the smallest
/// (1-alpha)-quantile; atoms strictly above it get 1/alpha, atoms strictly
/// below get 0, and atoms tied at the quantile share the remainder so that
/// sum p xi = 1. Inequality multipliers belong to the bounds xi(w) <= 1/alpha.
inline SaddlePoint cvar_saddle_reduced(const Vector& p, const Vector& z, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("CVaR level must lie in (0, 1]");
  const Index n = p.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return z(a) < z(b); });

  const double target = 1.0 - alpha;
  double cum = 0.0;
  double var = z(order.back());
  for (Index w : order) {
    cum += p(w);
    if (cum >= target - 1e-12) {
      var = z(w);
      break;
    }
  }

  double above = 0.0, at = 0.0;
  for (Index w = 0; w < n; ++w) {
    if (z(w) > var) above += p(w);
    else if (z(w) == var) at += p(w);
  }
  const double fill = std::clamp((1.0 - above / alpha) / at, 0.0, 1.0 / alpha);

  SaddlePoint sp;
  sp.xi.resize(n);
  sp.lam_i.resize(n);
  for (Index w = 0; w < n; ++w) {
    sp.xi(w) = z(w) > var ? 1.0 / alpha : (z(w) < var ? 0.0 : fill);
    sp.lam_i(w) = p(w) * std::max(z(w) - var, 0.0);
  }
  sp.lam_p = var;
  sp.lam_e = Vector(0);
  sp.objective = (p.array() * sp.xi.array() * z.array()).sum();
  return sp;
}

/// CVaR saddle over a full distribution (null atoms get xi = 0).
inline SaddlePoint analytic_saddle_cvar(const FiniteDist& dist, const CostVariable& z, double alpha) {
  const auto r = detail::reduce(dist, z.values());
  SaddlePoint sp = cvar_saddle_reduced(r.p, r.z, alpha);
  sp.xi = detail::expand(sp.xi, r.support, dist.size());
  sp.support = r.support;
  return sp;
}

// ---------------------------------------------------------------------------
// Built-in models

/// U = { xi == 1 }, written as equalities xi(w) - 1 = 0.
class ExpectationModel final : public EnvelopeModel {
 public:
  explicit ExpectationModel(std::string label = "expectation") : label_(std::move(label)) {}

  std::string name() const override { return label_; }
  Index num_equalities(Index n) const override { return n; }
  Index num_inequalities(Index) const override { return 0; }

  Vector equalities(const Vector& xi, const Vector&) const override { return xi.array() - 1.0; }
  Matrix equality_jacobian(const Vector& p) const override { return Matrix::Identity(p.size(), p.size()); }
  Matrix equality_dp(const Vector&, const Vector& p) const override { return Matrix::Zero(p.size(), p.size()); }

  Vector inequalities(const Vector&, const Vector&) const override { return Vector(0); }
  Matrix inequality_jacobian(const Vector&, const Vector& p) const override { return Matrix(0, p.size()); }
  Matrix inequality_hessian(const Vector&, const Vector& p, const Vector&) const override {
    return Matrix::Zero(p.size(), p.size());
  }
  Matrix inequality_dp(const Vector&, const Vector& p) const override { return Matrix(0, p.size()); }

  double dp_bound(const Vector&) const override { return 0.0; }
  Vector interior_point(const Vector& p) const override { return Vector::Ones(p.size()); }
  std::optional<double> density_upper_bound(const Vector&) const override { return 1.0; }

  // The normalization multiplier is pinned to 0; the equality multipliers
  // absorb the cost, lam_e(w) = p(w) Z(w).
  std::optional<SaddlePoint> analytic_saddle(const Vector& p, const Vector& z) const override {
    SaddlePoint sp;
    sp.xi = Vector::Ones(p.size());
    sp.lam_p = 0.0;
    sp.lam_e = p.cwiseProduct(z);
    sp.lam_i = Vector(0);
    sp.objective = p.dot(z);
    return sp;
  }

 private:
  std::string label_;
};

/// U = { 0 <= xi <= 1/alpha, sum p xi = 1 }; the upper bounds are the
/// inequalities f_w = xi(w) - 1/alpha, xi >= 0 is the canonical sign constraint.
class CvarModel final : public EnvelopeModel {
 public:
  explicit CvarModel(double alpha) : alpha_(alpha) {}

  double alpha() const { return alpha_; }
  std::string name() const override { return "cvar"; }
  Index num_equalities(Index) const override { return 0; }
  Index num_inequalities(Index n) const override { return n; }

  Vector equalities(const Vector&, const Vector&) const override { return Vector(0); }
  Matrix equality_jacobian(const Vector& p) const override { return Matrix(0, p.size()); }
  Matrix equality_dp(const Vector&, const Vector& p) const override { return Matrix(0, p.size()); }

  Vector inequalities(const Vector& xi, const Vector&) const override { return xi.array() - 1.0 / alpha_; }
  Matrix inequality_jacobian(const Vector&, const Vector& p) const override {
    return Matrix::Identity(p.size(), p.size());
  }
  Matrix inequality_hessian(const Vector&, const Vector& p, const Vector&) const override {
    return Matrix::Zero(p.size(), p.size());
  }
  Matrix inequality_dp(const Vector&, const Vector& p) const override {
    return Matrix::Zero(p.size(), p.size());
  }

  double dp_bound(const Vector&) const override { return 0.0; }
  Vector interior_point(const Vector& p) const override { return Vector::Ones(p.size()); }
  std::optional<double> density_upper_bound(const Vector&) const override { return 1.0 / alpha_; }

  std::optional<SaddlePoint> analytic_saddle(const Vector& p, const Vector& z) const override {
    return cvar_saddle_reduced(p, z, alpha_);
  }

 private:
  double alpha_;
};

/// Mean-semideviation E[Z] + c * SD+[Z]. The envelope
///   { 1 + c(eta - E eta) : eta >= 0, E[eta^2] <= 1 }
/// is written directly in xi = 1 + c(eta - E eta). Eliminating eta leaves
///   E[(xi - 1)^2] + max_w (1 - xi(w))_+^2 <= c^2,
/// expressed as one smooth convex inequality per atom:
///   f_w(xi, p) = sum_v p(v)(xi(v) - 1)^2 + (1 - xi(w))_+^2 - c^2 <= 0.
class MsdModel final : public EnvelopeModel {
 public:
  explicit MsdModel(double c) : c_(c) {}

  double alpha() const { return c_; }
  std::string name() const override { return "msd"; }
  Index num_equalities(Index) const override { return 0; }
  Index num_inequalities(Index n) const override { return n; }

  Vector equalities(const Vector&, const Vector&) const override { return Vector(0); }
  Matrix equality_jacobian(const Vector& p) const override { return Matrix(0, p.size()); }
  Matrix equality_dp(const Vector&, const Vector& p) const override { return Matrix(0, p.size()); }

  Vector inequalities(const Vector& xi, const Vector& p) const override {
    const Vector d = xi.array() - 1.0;
    const double spread = p.dot(d.cwiseAbs2());
    const Vector below = (-d).cwiseMax(0.0);
    return (spread + below.cwiseAbs2().array() - c_ * c_).matrix();
  }

  Matrix inequality_jacobian(const Vector& xi, const Vector& p) const override {
    const Index n = p.size();
    const Vector d = xi.array() - 1.0;
    const Eigen::RowVectorXd common = (2.0 * p.cwiseProduct(d)).transpose();
    Matrix jac = common.replicate(n, 1);
    for (Index w = 0; w < n; ++w) jac(w, w) -= 2.0 * std::max(-d(w), 0.0);
    return jac;
  }

  Matrix inequality_hessian(const Vector& xi, const Vector& p, const Vector& weights) const override {
    Vector diag = 2.0 * weights.sum() * p;
    for (Index w = 0; w < p.size(); ++w)
      if (xi(w) < 1.0) diag(w) += 2.0 * weights(w);
    return diag.asDiagonal();
  }

  Matrix inequality_dp(const Vector& xi, const Vector& p) const override {
    const Eigen::RowVectorXd sq = (xi.array() - 1.0).square().matrix().transpose();
    return sq.replicate(p.size(), 1);
  }

  double dp_bound(const Vector& p) const override { return c_ * c_ / p.minCoeff(); }
  Vector interior_point(const Vector& p) const override { return Vector::Ones(p.size()); }
  std::optional<double> density_upper_bound(const Vector& p) const override {
    return 1.0 + c_ / std::sqrt(p.minCoeff());
  }

  /// Contact-point saddle: xi_bar = (Z - EZ)_+ / SD, xi = 1 + c(xi_bar - m)
  /// with m = E[xi_bar]; lam_p = EZ + SD m and the per-atom multipliers are
  /// p(w)(EZ - Z(w))_+ / (2 c m), active exactly on the atoms at or below the mean.
  std::optional<SaddlePoint> analytic_saddle(const Vector& p, const Vector& z) const override {
    const Index n = p.size();
    const double mean = p.dot(z);
    const Vector up = (z.array() - mean).max(0.0).matrix();
    const double sd = std::sqrt(p.dot(up.cwiseAbs2()));
    SaddlePoint sp;
    sp.lam_e = Vector(0);
    sp.lam_i = Vector::Zero(n);
    if (sd <= 1e-14 * (1.0 + std::abs(mean))) {
      sp.xi = Vector::Ones(n);
      sp.lam_p = mean;
      sp.objective = mean;
      return sp;
    }
    const Vector bar = up / sd;
    const double m = p.dot(bar);
    sp.xi = (1.0 + c_ * (bar.array() - m)).matrix();
    sp.lam_p = mean + sd * m;
    for (Index w = 0; w < n; ++w) sp.lam_i(w) = p(w) * std::max(mean - z(w), 0.0) / (2.0 * c_ * m);
    sp.objective = mean + c_ * sd;
    return sp;
  }

 private:
  double c_;
};

/// Callback-backed envelope: the extension point for risk measures without a
/// built-in model. Only g, g_jacobian, interior_point and the counts are
/// mandatory; missing f callbacks mean "no inequalities", missing Hessian
/// means f is affine, missing p-derivatives mean p-independent constraints.
struct CustomEnvelopeSpec {
  std::string name = "custom";
  std::function<Index(Index)> num_equalities;
  std::function<Index(Index)> num_inequalities;
  std::function<Vector(const Vector&, const Vector&)> g;
  std::function<Matrix(const Vector&)> g_jacobian;
  std::function<Matrix(const Vector&, const Vector&)> g_dp;
  std::function<Vector(const Vector&, const Vector&)> f;
  std::function<Matrix(const Vector&, const Vector&)> f_jacobian;
  std::function<Matrix(const Vector&, const Vector&, const Vector&)> f_hessian;
  std::function<Matrix(const Vector&, const Vector&)> f_dp;
  std::function<Vector(const Vector&)> interior_point;
  double dp_bound = 0.0;
};

class CallbackModel final : public EnvelopeModel {
 public:
  explicit CallbackModel(CustomEnvelopeSpec spec) : s_(std::move(spec)) {
    if (!s_.num_equalities || !s_.num_inequalities || !s_.interior_point)
      throw ConfigError("custom envelope needs constraint counts and an interior point");
  }

  std::string name() const override { return s_.name; }
  Index num_equalities(Index n) const override { return s_.num_equalities(n); }
  Index num_inequalities(Index n) const override { return s_.num_inequalities(n); }

  Vector equalities(const Vector& xi, const Vector& p) const override {
    return s_.g ? s_.g(xi, p) : Vector(0);
  }
  Matrix equality_jacobian(const Vector& p) const override {
    return s_.g_jacobian ? s_.g_jacobian(p) : Matrix(0, p.size());
  }
  Matrix equality_dp(const Vector& xi, const Vector& p) const override {
    return s_.g_dp ? s_.g_dp(xi, p) : Matrix::Zero(num_equalities(p.size()), p.size());
  }
  Vector inequalities(const Vector& xi, const Vector& p) const override {
    return s_.f ? s_.f(xi, p) : Vector(0);
  }
  Matrix inequality_jacobian(const Vector& xi, const Vector& p) const override {
    return s_.f_jacobian ? s_.f_jacobian(xi, p) : Matrix(0, p.size());
  }
  Matrix inequality_hessian(const Vector& xi, const Vector& p, const Vector& w) const override {
    return s_.f_hessian ? s_.f_hessian(xi, p, w) : Matrix::Zero(p.size(), p.size());
  }
  Matrix inequality_dp(const Vector& xi, const Vector& p) const override {
    return s_.f_dp ? s_.f_dp(xi, p) : Matrix::Zero(num_inequalities(p.size()), p.size());
  }
  double dp_bound(const Vector&) const override { return s_.dp_bound; }
  Vector interior_point(const Vector& p) const override { return s_.interior_point(p); }

 private:
  CustomEnvelopeSpec s_;
};

inline RiskEnvelope make_expectation() { return RiskEnvelope(std::make_shared<ExpectationModel>()); }

/// CVaR at level alpha in (0, 1]. alpha = 1 collapses the box to {xi == 1},
/// which has no strictly feasible point, so it is represented by the
/// expectation equalities instead.
inline RiskEnvelope make_cvar(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("CVaR level must lie in (0, 1]");
  if (alpha == 1.0) return RiskEnvelope(std::make_shared<ExpectationModel>("cvar"));
  return RiskEnvelope(std::make_shared<CvarModel>(alpha));
}

/// Mean-semideviation with trade-off alpha in [0, 1]; alpha = 0 is the expectation.
inline RiskEnvelope make_msd(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("mean-semideviation trade-off must lie in [0, 1]");
  if (alpha == 0.0) return RiskEnvelope(std::make_shared<ExpectationModel>("msd"));
  return RiskEnvelope(std::make_shared<MsdModel>(alpha));
}

inline RiskEnvelope make_custom(CustomEnvelopeSpec spec) {
  return RiskEnvelope(std::make_shared<CallbackModel>(std::move(spec)));
}

// ---------------------------------------------------------------------------
// Structural checks

struct EnvelopeCheck {
  double affinity_error = 0.0;   // max |g(mix) - mix(g)|
  double convexity_excess = 0.0; // max f(mid) - (f1 + f2)/2, <= 0 when convex
  double dp_excess = 0.0;        // max |dp| - M at the sampled points, <= 0 when bounded
  double interior_margin = 0.0;  // min slack of the stored interior point
  bool ok(double tol = 1e-10) const {
    return affinity_error <= tol && convexity_excess <= tol && dp_excess <= tol && interior_margin > 0.0;
  }
};

/// Randomized affinity / convexity / derivative-bound / Slater checks on one support.
inline EnvelopeCheck check_envelope(const RiskEnvelope& env, const Vector& p, Rng& rng, int trials = 50) {
  const auto& m = env.model();
  const Index n = p.size();
  auto random_density = [&] {
    Vector x(n);
    for (Index w = 0; w < n; ++w) x(w) = 2.0 * rng.uniform();
    return x;
  };
  EnvelopeCheck out;
  for (int t = 0; t < trials; ++t) {
    const Vector a = random_density(), b = random_density();
    const double mix = rng.uniform();
    const Vector c = mix * a + (1.0 - mix) * b;
    if (m.num_equalities(n) > 0) {
      const Vector lhs = m.equalities(c, p);
      const Vector rhs = mix * m.equalities(a, p) + (1.0 - mix) * m.equalities(b, p);
      out.affinity_error = std::max(out.affinity_error, (lhs - rhs).cwiseAbs().maxCoeff());
    }
    if (m.num_inequalities(n) > 0) {
      const Vector mid = m.inequalities(0.5 * (a + b), p);
      const Vector avg = 0.5 * (m.inequalities(a, p) + m.inequalities(b, p));
      out.convexity_excess = std::max(out.convexity_excess, (mid - avg).maxCoeff());
    }
  }
  const Vector bar = m.interior_point(p);
  double margin = std::min(bar.minCoeff(), 1.0);
  if (m.num_inequalities(n) > 0) margin = std::min(margin, -m.inequalities(bar, p).maxCoeff());
  if (std::abs(p.dot(bar) - 1.0) > 1e-10) margin = -1.0;
  if (m.num_equalities(n) > 0 && m.equalities(bar, p).cwiseAbs().maxCoeff() > 1e-10) margin = -1.0;
  out.interior_margin = margin;

  std::vector<Vector> probes{bar};
  for (int t = 0; t < 5; ++t) {
    Vector z(n);
    for (Index w = 0; w < n; ++w) z(w) = rng.normal(0.0, 1.0);
    if (auto sp = m.analytic_saddle(p, z)) probes.push_back(sp->xi);
  }
  const double bound = m.dp_bound(p);
  for (const auto& x : probes) {
    double worst = 0.0;
    if (m.num_equalities(n) > 0) worst = std::max(worst, m.equality_dp(x, p).cwiseAbs().maxCoeff());
    if (m.num_inequalities(n) > 0) worst = std::max(worst, m.inequality_dp(x, p).cwiseAbs().maxCoeff());
    out.dp_excess = std::max(out.dp_excess, worst - bound);
  }
  return out;
}

}  // namespace crpg
