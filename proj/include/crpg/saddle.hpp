#pragma once

// Log-barrier interior-point solver for the (sample-average) envelope program
//
//   max_xi  sum_w p(w) xi(w) Z(w) - reg * sum_w (p(w) xi(w))^2
//   s.t.    xi p in U(p)
//
// returning the optimizer together with the KKT multipliers of the envelope
// Lagrangian. Equalities are kept exactly by Newton steps in the nullspace of
// the (constant) equality matrix; inequality multipliers are read off the
// central path, lam_i = 1 / (t * -f_i).

#include "crpg/envelope.hpp"
#include "crpg/probspace.hpp"
#include "crpg/types.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace crpg {

struct SolverOptions {
  double tol = 1e-8;          // duality-gap target m / t
  int max_iter = 200;         // total Newton steps across all centering rounds
  double t0 = 1.0;
  double mu = 10.0;
  double interior_margin = 1e-8;
  Index max_atoms = 2000;     // dense linear algebra; larger supports are refused
  bool force_numeric = false; // evaluate_risk: skip the analytic routine
};

struct EnvelopeProgram {
  FiniteDist dist;
  CostVariable z;
  RiskEnvelope env;
  double reg = 0.0;
  double tol = 1e-8;
  int max_iter = 200;
};

struct SolveReport {
  SaddlePoint sp;
  int iterations = 0;
  double kkt_residual = 0.0;
  std::vector<std::pair<double, double>> barrier_path;  // (t, m / t)
};

struct KktReport {
  double primal = 0.0;
  double dual = 0.0;
  double complementarity = 0.0;
  double stationarity = 0.0;
  double max() const { return std::max(std::max(primal, dual), std::max(complementarity, stationarity)); }
};

namespace detail {

/// Smooth convex problem: minimize f0(x) subject to c(x) < 0, x[0..n_pos) > 0, A x = b.
struct BarrierProblem {
  Index dim = 0;
  Index n_pos = 0;
  std::function<double(const Vector&)> f0;
  std::function<Vector(const Vector&)> f0_grad;
  std::function<Matrix(const Vector&)> f0_hess;
  std::function<Vector(const Vector&)> cons;
  std::function<Matrix(const Vector&)> cons_jac;
  std::function<Matrix(const Vector&, const Vector&)> cons_hess;
  Matrix A;
  Vector b;
};

struct BarrierState {
  Vector x;
  double t = 1.0;
  int steps = 0;
  bool stopped_early = false;
  std::vector<std::pair<double, double>> path;
};

inline Matrix nullspace(const Matrix& a, Index dim) {
  if (a.rows() == 0) return Matrix::Identity(dim, dim);
  Eigen::FullPivHouseholderQR<Matrix> qr(a.transpose());
  qr.setThreshold(1e-12);
  const Index rank = qr.rank();
  const Matrix q = qr.matrixQ();
  return q.rightCols(dim - rank);
}

inline double barrier_value(const BarrierProblem& bp, const Vector& x, double t) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (bp.n_pos > 0 && (x.head(bp.n_pos).array() <= 0.0).any()) return inf;
  const Vector c = bp.cons(x);
  if (c.size() > 0 && ((c.array() >= 0.0).any() || !c.allFinite())) return inf;
  double v = t * bp.f0(x);
  if (c.size() > 0) v -= (-c.array()).log().sum();
  if (bp.n_pos > 0) v -= x.head(bp.n_pos).array().log().sum();
  return v;
}

inline BarrierState run_barrier(const BarrierProblem& bp, Vector x, const SolverOptions& opt,
                                const std::function<bool(const Vector&)>& stop_early = {}) {
  const Matrix null = nullspace(bp.A, bp.dim);
  const auto m = static_cast<double>(bp.cons(x).size() + bp.n_pos);
  BarrierState st;
  st.t = opt.t0;
  if (null.cols() == 0) {
    // Feasible set is a single point; jump straight to the final barrier weight.
    st.t = std::max(opt.t0, opt.mu * m / opt.tol);
    st.x = std::move(x);
    st.path.emplace_back(st.t, m / st.t);
    return st;
  }
  for (;;) {
    for (;;) {
      if (stop_early && stop_early(x)) {
        st.x = std::move(x);
        st.stopped_early = true;
        return st;
      }
      const Vector c = bp.cons(x);
      Vector g = st.t * bp.f0_grad(x);
      Matrix h = st.t * bp.f0_hess(x);
      if (c.size() > 0) {
        const Vector inv = (-c).cwiseInverse();
        const Matrix jac = bp.cons_jac(x);
        g.noalias() += jac.transpose() * inv;
        h.noalias() += jac.transpose() * inv.cwiseAbs2().asDiagonal() * jac;
        h += bp.cons_hess(x, inv);
      }
      if (bp.n_pos > 0) {
        const Vector xi = x.head(bp.n_pos);
        g.head(bp.n_pos) -= xi.cwiseInverse();
        h.diagonal().head(bp.n_pos) += xi.cwiseInverse().cwiseAbs2();
      }
      const Matrix hr = null.transpose() * h * null;
      const Vector gr = null.transpose() * g;
      // Jacobi scaling keeps the late, badly scaled barrier systems solvable.
      const Vector scale = hr.diagonal().cwiseAbs().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
      const Matrix hs = scale.asDiagonal() * hr * scale.asDiagonal();
      Eigen::LDLT<Matrix> ldlt(hs);
      Vector dy = scale.cwiseProduct(ldlt.solve(-scale.cwiseProduct(gr)));
      if (ldlt.info() != Eigen::Success || !dy.allFinite()) {
        Matrix reg = hs;
        reg.diagonal().array() += 1e-12;
        dy = scale.cwiseProduct(reg.ldlt().solve(-scale.cwiseProduct(gr)));
      }
      const Vector dx = null * dy;
      const double decrement = -g.dot(dx);
      if (!(decrement > 2e-10)) break;
      if (++st.steps > opt.max_iter) {
        std::ostringstream os;
        os << "did not converge: Newton step cap " << opt.max_iter << " reached at t=" << st.t
           << ", Newton decrement " << decrement << ", gap " << m / st.t;
        throw NumericalError(os.str());
      }
      const double f = barrier_value(bp, x, st.t);
      double s = 1.0;
      bool moved = false;
      while (s > 1e-14) {
        Vector xn = x + s * dx;
        const double fn = barrier_value(bp, xn, st.t);
        if (fn <= f - 0.25 * s * decrement + 1e-14 * std::abs(f)) {
          x = std::move(xn);
          moved = true;
          break;
        }
        s *= 0.5;
      }
      if (!moved) break;  // stalled in floating point: treat as centered
    }
    st.path.emplace_back(st.t, m / st.t);
    if (m / st.t < opt.tol) break;
    st.t *= opt.mu;
  }
  st.x = std::move(x);
  return st;
}

/// Least-squares multipliers nu for A^T nu = rhs. When A has dependent rows
/// the normalization multiplier (row 0) is pinned to 0 if that loses nothing.
inline Vector equality_multipliers(const Matrix& a, const Vector& rhs) {
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(a.transpose());
  Vector nu = cod.solve(rhs);
  if (cod.rank() < a.rows() && a.rows() > 1) {
    const Matrix rest = a.bottomRows(a.rows() - 1).transpose();
    const Vector tail = rest.completeOrthogonalDecomposition().solve(rhs);
    const double base = (a.transpose() * nu - rhs).cwiseAbs().maxCoeff();
    const double pinned = (rest * tail - rhs).cwiseAbs().maxCoeff();
    if (pinned <= base + 1e-12 * (1.0 + rhs.cwiseAbs().maxCoeff())) {
      nu(0) = 0.0;
      nu.tail(a.rows() - 1) = tail;
    }
  }
  return nu;
}

inline KktReport kkt_reduced(const EnvelopeModel& m, const Vector& p, const Vector& z, const Vector& x,
                             const SaddlePoint& sp, double reg) {
  const Index n = p.size();
  const Index ne = m.num_equalities(n), ni = m.num_inequalities(n);
  if (sp.lam_e.size() != ne || sp.lam_i.size() != ni || x.size() != n)
    throw ConfigError("saddle point dimensions do not match the envelope program");
  KktReport r;
  r.primal = std::abs(p.dot(x) - 1.0);
  r.primal = std::max(r.primal, (-x).maxCoeff());
  Vector grad = p.cwiseProduct(z) - 2.0 * reg * p.cwiseAbs2().cwiseProduct(x) - sp.lam_p * p;
  if (ne > 0) {
    r.primal = std::max(r.primal, m.equalities(x, p).cwiseAbs().maxCoeff());
    grad -= m.equality_jacobian(p).transpose() * sp.lam_e;
  }
  if (ni > 0) {
    const Vector f = m.inequalities(x, p);
    r.primal = std::max(r.primal, f.maxCoeff());
    r.dual = std::max(0.0, (-sp.lam_i).maxCoeff());
    r.complementarity = sp.lam_i.cwiseProduct(f).cwiseAbs().maxCoeff();
    grad -= m.inequality_jacobian(x, p).transpose() * sp.lam_i;
  }
  r.primal = std::max(r.primal, 0.0);
  // Natural residual of the sign-constrained stationarity: xi >= 0, dL/dxi <= 0, xi * dL/dxi = 0.
  r.stationarity = x.cwiseMin(-grad).cwiseAbs().maxCoeff();
  return r;
}

}  // namespace detail

/// Primal feasibility, multiplier sign, complementary slackness and
/// stationarity residuals of the envelope Lagrangian at `sp`.
inline KktReport kkt_verify(const RiskEnvelope& env, const FiniteDist& dist, const CostVariable& z,
                            const SaddlePoint& sp, double reg = 0.0) {
  if (sp.xi.size() != dist.size()) throw ConfigError("saddle point dimensions do not match the distribution");
  const auto r = detail::reduce(dist, z.values());
  if (!sp.support.empty() && sp.support != r.support)
    throw ConfigError("saddle point was computed on a different support");
  return detail::kkt_reduced(env.model(), r.p, r.z, detail::restrict_to(sp.xi, r.support), sp, reg);
}

/// Interior-point solve of the envelope program on the positive-mass atoms of
/// prog.dist; null atoms are excluded and reported with xi = 0.
inline SolveReport solve_envelope_program(const EnvelopeProgram& prog, SolverOptions opt = {}) {
  if (prog.reg < 0.0) throw ConfigError("regularization must be non-negative");
  if (!(prog.tol > 0.0)) throw ConfigError("solver tolerance must be positive");
  opt.tol = prog.tol;
  opt.max_iter = prog.max_iter;

  const auto& model = prog.env.model();
  const auto red = detail::reduce(prog.dist, prog.z.values());
  const Vector& p = red.p;
  const Vector& z = red.z;
  const Index n = p.size();
  if (n > opt.max_atoms) {
    std::ostringstream os;
    os << "envelope program with " << n << " atoms exceeds the dense solver limit " << opt.max_atoms;
    throw NumericalError(os.str());
  }
  const Index ne = model.num_equalities(n), ni = model.num_inequalities(n);

  Matrix a(1 + ne, n);
  a.row(0) = p.transpose();
  Vector b(1 + ne);
  b(0) = 1.0;
  if (ne > 0) {
    const Matrix g = model.equality_jacobian(p);
    a.bottomRows(ne) = g;
    b.tail(ne) = -model.equalities(Vector::Zero(n), p);
  }

  auto project = [&](const Vector& x) -> Vector {
    const Vector resid = a * x - b;
    return x - a.completeOrthogonalDecomposition().solve(resid);
  };
  auto margin_of = [&](const Vector& x) {
    double mg = x.minCoeff();
    if (ni > 0) mg = std::min(mg, -model.inequalities(x, p).maxCoeff());
    return mg;
  };

  Vector x0 = model.interior_point(p);
  if (x0.size() != n) throw ConfigError("interior point has the wrong dimension");
  if ((a * x0 - b).cwiseAbs().maxCoeff() > 1e-10) x0 = project(x0);

  int steps = 0;
  if (margin_of(x0) < opt.interior_margin) {
    // Phase I: minimize s subject to f(x) <= s, -x <= s, A x = b.
    detail::BarrierProblem ph;
    ph.dim = n + 1;
    ph.f0 = [n](const Vector& v) { return v(n); };
    ph.f0_grad = [n](const Vector&) {
      Vector g = Vector::Zero(n + 1);
      g(n) = 1.0;
      return g;
    };
    ph.f0_hess = [n](const Vector&) { return Matrix::Zero(n + 1, n + 1); };
    ph.cons = [&, n, ni](const Vector& v) {
      const Vector x = v.head(n);
      Vector c(ni + n);
      if (ni > 0) c.head(ni) = model.inequalities(x, p).array() - v(n);
      c.tail(n) = -x.array() - v(n);
      return c;
    };
    ph.cons_jac = [&, n, ni](const Vector& v) {
      Matrix j = Matrix::Zero(ni + n, n + 1);
      if (ni > 0) j.topLeftCorner(ni, n) = model.inequality_jacobian(v.head(n), p);
      j.bottomLeftCorner(n, n) = -Matrix::Identity(n, n);
      j.col(n).setConstant(-1.0);
      return j;
    };
    ph.cons_hess = [&, n, ni](const Vector& v, const Vector& w) {
      Matrix h = Matrix::Zero(n + 1, n + 1);
      if (ni > 0) h.topLeftCorner(n, n) = model.inequality_hessian(v.head(n), p, w.head(ni));
      return h;
    };
    ph.A = Matrix::Zero(a.rows(), n + 1);
    ph.A.leftCols(n) = a;
    ph.b = b;
    Vector v0(n + 1);
    v0.head(n) = x0;
    v0(n) = std::max(0.0, -margin_of(x0)) + 1.0;
    SolverOptions popt = opt;
    popt.tol = 1e-10;
    const double want = -10.0 * opt.interior_margin;
    const auto res = detail::run_barrier(ph, v0, popt, [&](const Vector& v) { return v(n) < want; });
    steps += res.steps;
    if (!(res.x(n) < 0.0)) throw NumericalError("infeasible: empty risk envelope (no strictly feasible density)");
    x0 = res.x.head(n);
  }

  detail::BarrierProblem bp;
  bp.dim = n;
  bp.n_pos = n;
  const double reg = prog.reg;
  const Vector pz = p.cwiseProduct(z);
  const Vector p2 = p.cwiseAbs2();
  bp.f0 = [pz, p2, reg](const Vector& x) { return -(pz.dot(x) - reg * p2.dot(x.cwiseAbs2())); };
  bp.f0_grad = [pz, p2, reg](const Vector& x) -> Vector { return -pz + 2.0 * reg * p2.cwiseProduct(x); };
  bp.f0_hess = [p2, reg](const Vector&) -> Matrix { return Matrix((2.0 * reg * p2).asDiagonal()); };
  bp.cons = [&](const Vector& x) { return ni > 0 ? model.inequalities(x, p) : Vector(0); };
  bp.cons_jac = [&](const Vector& x) { return model.inequality_jacobian(x, p); };
  bp.cons_hess = [&](const Vector& x, const Vector& w) { return model.inequality_hessian(x, p, w); };
  bp.A = a;
  bp.b = b;

  SolverOptions mopt = opt;
  mopt.max_iter = opt.max_iter - steps;
  const auto st = detail::run_barrier(bp, x0, mopt);

  const Vector& x = st.x;
  SaddlePoint sp;
  sp.support = red.support;
  sp.lam_i = Vector(ni);
  Vector rhs = pz - 2.0 * reg * p2.cwiseProduct(x) + x.cwiseInverse() / st.t;
  if (ni > 0) {
    const Vector f = model.inequalities(x, p);
    sp.lam_i = (-f).cwiseInverse() / st.t;
    rhs -= model.inequality_jacobian(x, p).transpose() * sp.lam_i;
  }
  const Vector nu = detail::equality_multipliers(a, rhs);
  sp.lam_p = nu(0);
  sp.lam_e = nu.tail(ne);
  sp.objective = pz.dot(x) - reg * p2.dot(x.cwiseAbs2());
  sp.xi = detail::expand(x, red.support, prog.dist.size());

  double resid = detail::kkt_reduced(model, p, z, x, sp, reg).max();
  if (ni > 0) {
    // Central-path multipliers of nearly active constraints inherit the
    // rounding error of f_i ~ 1/t; re-fit them jointly with the equality
    // multipliers on the stationarity system and keep the fit if it is better.
    const double big = sp.lam_i.maxCoeff();
    std::vector<Index> active;
    for (Index i = 0; i < ni; ++i)
      if (sp.lam_i(i) > 1e-6 * big) active.push_back(i);
    const Matrix jac = model.inequality_jacobian(x, p);
    const auto na = static_cast<Index>(active.size());
    Matrix bt(n, a.rows() + na);
    bt.leftCols(a.rows()) = a.transpose();
    Vector base = pz - 2.0 * reg * p2.cwiseProduct(x) + x.cwiseInverse() / st.t;
    Vector lam = sp.lam_i;
    for (Index j = 0; j < na; ++j) {
      bt.col(a.rows() + j) = jac.row(active[static_cast<std::size_t>(j)]).transpose();
      lam(active[static_cast<std::size_t>(j)]) = 0.0;
    }
    base -= jac.transpose() * lam;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(bt);
    if (cod.rank() == bt.cols()) {
      const Vector u = cod.solve(base);
      SaddlePoint alt = sp;
      alt.lam_p = u(0);
      alt.lam_e = u.segment(1, ne);
      for (Index j = 0; j < na; ++j) lam(active[static_cast<std::size_t>(j)]) = u(a.rows() + j);
      alt.lam_i = lam;
      const double r = detail::kkt_reduced(model, p, z, x, alt, reg).max();
      if (lam.minCoeff() >= 0.0 && r < resid) {
        sp = std::move(alt);
        resid = r;
      }
    }
  }

  SolveReport rep;
  rep.iterations = steps + st.steps;
  rep.barrier_path = st.path;
  rep.kkt_residual = resid;
  rep.sp = std::move(sp);
  return rep;
}

}  // namespace crpg
