#pragma once

// Stochastic gradient descent over policy parameters with iterate logging.

#include "crpg/rng.hpp"
#include "crpg/staticgrad.hpp"
#include "crpg/types.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace crpg {

enum class StepSchedule {
  constant,  // a
  harmonic,  // a / (k + 1)
  shifted,   // a / (b + k)
};

struct SgdConfig {
  StepSchedule schedule = StepSchedule::shifted;
  double a = 1.0;
  double b = 10.0;
  int iters = 100;
  Vector theta0;
  std::optional<double> grad_clip;
  std::uint64_t seed = 0;

  double step(int k) const {
    switch (schedule) {
      case StepSchedule::constant: return a;
      case StepSchedule::harmonic: return a / (k + 1.0);
      case StepSchedule::shifted: return a / (b + k);
    }
    return a;
  }

  void validate() const {
    if (iters < 1) throw ConfigError("SGD needs at least one iteration");
    if (!(a > 0.0)) throw ConfigError("step size must be positive");
    if (schedule == StepSchedule::shifted && !(b > 0.0)) throw ConfigError("step offset b must be positive");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("gradient clip must be positive");
    if (theta0.size() == 0) throw ConfigError("initial parameter vector is empty");
  }
};

inline StepSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return StepSchedule::constant;
  if (s == "harmonic" || s == "1/k") return StepSchedule::harmonic;
  if (s == "shifted" || s == "a/(b+k)") return StepSchedule::shifted;
  throw ConfigError("unknown step schedule '" + s + "'");
}

struct TraceRow {
  int iter = 0;
  Vector theta;
  double objective = std::nan("");
  double grad_norm = std::nan("");
  double wall_time = 0.0;  // seconds since the start of the run
};

struct RunTrace {
  std::vector<TraceRow> rows;
  bool aborted = false;
  std::string abort_reason;

  const Vector& final_theta() const { return rows.back().theta; }
};

/// Gradient and objective callbacks receive the iterate and a per-iteration RNG stream.
using GradFn = std::function<GradEstimate(const Vector&, Rng&)>;
using ObjFn = std::function<double(const Vector&, Rng&)>;

/// theta_{k+1} = theta_k - step(k) g_k, with g_k clipped to grad_clip in l2 norm.
/// Rows 0..iters record theta_k, the objective at theta_k and ||g_k||. A
/// non-finite gradient stops the run and returns the rows so far.
inline RunTrace sgd_minimize(const GradFn& grad_fn, const ObjFn& obj_fn, const SgdConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  const auto start = std::chrono::steady_clock::now();
  RunTrace trace;
  Vector theta = cfg.theta0;
  for (int k = 0; k <= cfg.iters; ++k) {
    Rng grng = root.split(2 * static_cast<std::uint64_t>(k));
    Rng orng = root.split(2 * static_cast<std::uint64_t>(k) + 1);
    TraceRow row;
    row.iter = k;
    row.theta = theta;
    if (obj_fn) row.objective = obj_fn(theta, orng);
    GradEstimate g;
    try {
      g = grad_fn(theta, grng);
    } catch (const NumericalError& e) {
      trace.aborted = true;
      trace.abort_reason = e.what();
    }
    if (!trace.aborted && (g.grad.size() != theta.size() || !g.grad.allFinite())) {
      trace.aborted = true;
      trace.abort_reason = g.grad.size() != theta.size() ? "gradient has the wrong dimension"
                                                           : "non-finite gradient";
    }
    if (!trace.aborted) row.grad_norm = g.grad.norm();
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.rows.push_back(std::move(row));
    if (trace.aborted) {
      trace.abort_reason += " at iteration " + std::to_string(k);
      break;
    }
    if (k == cfg.iters) break;
    Vector step = g.grad;
    if (cfg.grad_clip && step.norm() > *cfg.grad_clip) step *= *cfg.grad_clip / step.norm();
    theta -= cfg.step(k) * step;
  }
  return trace;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV: iter,theta_0..theta_{K-1},objective,grad_norm.
inline void write_trace_csv(const RunTrace& trace, std::ostream& os) {
  if (trace.rows.empty()) return;
  os << "iter";
  for (Index j = 0; j < trace.rows.front().theta.size(); ++j) os << ",theta_" << j;
  os << ",objective,grad_norm\n";
  for (const auto& r : trace.rows) {
    os << r.iter;
    for (Index j = 0; j < r.theta.size(); ++j) os << ',' << format_double(r.theta(j));
    os << ',' << format_double(r.objective) << ',' << format_double(r.grad_norm) << '\n';
  }
}

}  // namespace crpg
