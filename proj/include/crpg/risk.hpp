#pragma once

#include "crpg/envelope.hpp"
#include "crpg/probspace.hpp"
#include "crpg/saddle.hpp"

#include <utility>

namespace crpg {

struct RiskValue {
  double rho = 0.0;
  SaddlePoint sp;
};

/// rho(Z) = max over the envelope of E_xi[Z] with a saddle point. Uses the
/// model's closed form when it has one unless opts.force_numeric is set.
inline RiskValue evaluate_risk(const RiskEnvelope& env, const FiniteDist& dist, const CostVariable& z,
                               const SolverOptions& opts = {}) {
  if (z.size() != dist.size()) throw ConfigError("cost and distribution sizes differ");
  if (!opts.force_numeric) {
    const auto r = detail::reduce(dist, z.values());
    if (auto sp = env->analytic_saddle(r.p, r.z)) {
      sp->xi = detail::expand(sp->xi, r.support, dist.size());
      sp->support = r.support;
      return {sp->objective, std::move(*sp)};
    }
  }
  EnvelopeProgram prog{dist, z, env, 0.0, opts.tol, opts.max_iter};
  auto rep = solve_envelope_program(prog, opts);
  return {rep.sp.objective, std::move(rep.sp)};
}

}  // namespace crpg
