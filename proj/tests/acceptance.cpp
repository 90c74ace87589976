// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "crpg/crpg.hpp"
#include "crpg/harness/commands.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

using namespace crpg;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double oracle_rho(const std::string& kind, double a, const Vector& p, const Vector& z) {
  if (kind == "cvar") return oracle::cvar(p, z, a);
  if (kind == "msd") return oracle::msd(p, z, a);
  return oracle::mean(p, z);
}

RiskEnvelope envelope(const std::string& kind, double a) {
  if (kind == "cvar") return make_cvar(a);
  if (kind == "msd") return make_msd(a);
  return make_expectation();
}

// AC1: Theorem-2 gradient vs central differences of the exactly computed risk.
Outcome ac1() {
  const std::vector<std::pair<std::string, double>> cases{
      {"expectation", 0}, {"cvar", 0.3}, {"cvar", 0.7}, {"msd", 0.5}, {"msd", 1.0}};
  Rng rng(1001);
  double worst = 0.0;
  int count = 0;
  for (const auto& [kind, a] : cases) {
    const RiskEnvelope env = envelope(kind, a);
    for (int done = 0; done < 5;) {
      const Index n = 3 + static_cast<Index>(rng.uniform() * 10);  // 3..12 outcomes
      const Index k = 1 + static_cast<Index>(rng.uniform() * 6);   // 1..6 parameters
      auto s = fixtures::random_softmax(rng, n, k);
      if (kind == "cvar" && fixtures::quantile_gap(s.model.probs(s.theta), s.z.values(), a) < 1e-3) continue;
      ++done;
      const Vector g = exact_risk_gradient(s.model, s.theta, s.z, env).second.grad;
      const Vector fd = oracle::fd_grad(
          [&](const Vector& th) { return oracle_rho(kind, a, oracle::softmax(s.model.features(), th), s.z.values()); },
          s.theta, 1e-6);
      worst = std::max(worst, fixtures::rel_sup(g, fd));
      ++count;
    }
  }
  return {worst < 1e-4, fmt("%.0f instances, max rel sup err %.2e (< 1e-4)", count, worst)};
}

// AC2: SAA gradient error shrinks with N.
Outcome ac2() {
  const auto s = fixtures::six_atoms();
  bool pass = true;
  std::string detail;
  for (const auto& [kind, a] : std::vector<std::pair<std::string, double>>{{"cvar", 0.5}, {"msd", 0.7}}) {
    const RiskEnvelope env = envelope(kind, a);
    const Vector exact = exact_risk_gradient(s.model, s.theta, s.z, env).second.grad;
    std::vector<double> med;
    for (std::size_t n : {100u, 1000u, 10000u}) {
      std::vector<double> err;
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(Rng(7).split(seed * 1000 + n).seed());
        const auto batch = s.model.sample(s.theta, s.z, n, rng);
        err.push_back((grad_saa(env, batch, s.model.size()).grad - exact).norm());
      }
      med.push_back(median(err));
    }
    const double bound = 0.1 * (1.0 + exact.norm());
    const bool ok = med[0] > med[1] && med[1] > med[2] && med[2] < bound;
    pass = pass && ok;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s(%.1f) medians %.3g > %.3g > %.3g, last < %.3g; ", kind.c_str(), a, med[0],
                  med[1], med[2], bound);
    detail += buf;
  }
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

// AC3: GMSD at N = 1e5 within 5% of the exact MSD gradient in >= 95% of 50 seeds.
Outcome ac3() {
  const auto s = fixtures::three_atoms();
  const double c = 1.0;
  const Vector exact = exact_risk_gradient(s.model, s.theta, s.z, make_msd(c)).second.grad;
  int hits = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(Rng(11).split(seed).seed());
    const auto g = grad_gmsd(s.model.sample(s.theta, s.z, 100000, rng), c).grad;
    const double rel = (g - exact).norm() / exact.norm();
    worst = std::max(worst, rel);
    if (rel < 0.05) ++hits;
  }
  return {hits >= 48, fmt("%.0f/50 seeds within 5%% (need 48), worst rel err %.3f", hits, worst)};
}

fixtures::MdpInstance cvar_mdp(std::uint64_t seed) {
  Rng rng(seed);
  return fixtures::random_mdp(rng, 3, 2, 0.5);
}

// AC4: exact dynamic gradient vs central differences of V_theta(x0).
Outcome ac4() {
  const auto env = make_cvar(0.8);
  Rng rng(404);
  auto s = cvar_mdp(40);
  double worst = 0.0;
  for (int i = 0; i < 5; ++i) {
    Vector theta(s.pi.param_dim());
    for (Index j = 0; j < theta.size(); ++j) theta(j) = rng.normal(0.0, 1.0);
    const auto pi = s.pi.with_theta(theta);
    const Vector g = grad_dynamic_exact(s.mdp, pi, env).grad;
    const Vector fd = oracle::fd_grad(
        [&](const Vector& th) { return solve_value_exact(s.mdp, s.pi.with_theta(th), env, 1e-14).value(s.mdp.x0()); },
        theta, 1e-6);
    worst = std::max(worst, (g - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff());
  }
  return {worst < 1e-3, fmt("5 random theta, max rel err %.2e (< 1e-3)", worst)};
}

// AC5: tabular PRSVI with the exact kernel equals value iteration; T is a
// gamma-contraction and monotone on 100 random pairs.
Outcome ac5() {
  const auto env = make_cvar(0.8);
  auto s = cvar_mdp(50);
  Rng rng(505);
  PrsviOptions opt;
  opt.kernel = KernelSource::exact;
  const auto tr = simulate(s.mdp, s.pi, 500, rng);
  const Vector vi = solve_value_exact(s.mdp, s.pi, env, 1e-13).value.values();
  const Vector pv = prsvi(tr, Matrix::Identity(3, 3), env, s.mdp, s.pi, opt).value.values();
  const double gap = (vi - pv).cwiseAbs().maxCoeff();

  double ratio = 0.0, mono = -1.0;
  for (int i = 0; i < 100; ++i) {
    Vector v1(3), v2(3), up(3);
    for (Index x = 0; x < 3; ++x) {
      v1(x) = rng.normal(0.0, 3.0);
      v2(x) = rng.normal(0.0, 3.0);
      up(x) = v1(x) + std::abs(rng.normal(0.0, 1.0));
    }
    const Vector t1 = bellman_apply(s.mdp, s.pi, env, ValueFn::tabular(v1)).values();
    const Vector t2 = bellman_apply(s.mdp, s.pi, env, ValueFn::tabular(v2)).values();
    const Vector tu = bellman_apply(s.mdp, s.pi, env, ValueFn::tabular(up)).values();
    ratio = std::max(ratio, (t1 - t2).cwiseAbs().maxCoeff() / (v1 - v2).cwiseAbs().maxCoeff());
    mono = std::max(mono, (t1 - tu).maxCoeff());
  }
  const double g = s.mdp.gamma();
  const bool pass = gap < 1e-8 && ratio <= g + 1e-12 && mono <= 1e-9;
  return {pass, fmt("PRSVI vs VI %.1e (< 1e-8); max contraction ratio %.4f (<= %.2f); max monotonicity violation %.1e",
                    gap, ratio, g, mono)};
}

// AC6: two-phase estimate error vs the exact gradient shrinks with N.
Outcome ac6() {
  const auto env = make_cvar(0.8);
  auto s = cvar_mdp(60);
  const Vector exact = grad_dynamic_exact(s.mdp, s.pi, env).grad;
  PrsviOptions po;
  po.kernel = KernelSource::exact;
  Rng crng(606);
  const auto critic = prsvi(simulate(s.mdp, s.pi, 500, crng), Matrix::Identity(3, 3), env, s.mdp, s.pi, po);
  std::vector<double> med;
  for (std::size_t n : {100u, 1000u, 10000u}) {
    std::vector<double> err;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(Rng(66).split(seed * 100000 + n).seed());
      TwoPhaseOptions opt;
      opt.n_trajectories = n;
      err.push_back((grad_dynamic_twophase(s.mdp, s.pi, env, critic.value, opt, rng).grad - exact).norm() /
                    exact.norm());
    }
    med.push_back(median(err));
  }
  const bool pass = med[0] > med[1] && med[1] > med[2] && med[2] < 0.1;
  return {pass, fmt("median rel err %.4f > %.4f > %.4f, last < 0.1", med[0], med[1], med[2])};
}

// AC7: asset benchmark, 5 seeds, 300 iterations of 1e4 samples each.
Outcome ac7() {
  using namespace crpg::harness;
  struct Run {
    std::string name, json;
    Index expect;
  };
  const std::vector<Run> runs{
      {"expectation", R"({"objective": {"risk": "expectation"}, "estimator": "lr"})", 1},
      {"msd(1)", R"({"objective": {"risk": "msd", "alpha": 1.0}, "estimator": "gmsd"})", 2},
      {"meanstd(1)", R"({"objective": {"risk": "meanstd", "c": 1.0}, "estimator": "meanstd"})", 0},
  };
  bool pass = true;
  std::string detail;
  for (const auto& r : runs) {
    auto c = config_from_json(json::parse(r.json));
    c.samples_per_iter = 10000;
    c.sgd.iters = 300;
    Vector avg = Vector::Zero(3);
    double slowest = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      c.seed = seed;
      c.sgd.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = bench_assets(c);
      slowest = std::max(slowest, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      avg += res.probs.row(res.probs.rows() - 1).transpose() / 5.0;
    }
    Index arg;
    avg.maxCoeff(&arg);
    bool ok = arg == r.expect && slowest < 180.0;
    if (r.name == "expectation") ok = ok && avg(1) > 0.9;
    pass = pass && ok;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s -> P=(%.3f, %.3f, %.3f) argmax A%ld [%s], slowest run %.1fs; ", r.name.c_str(),
                  avg(0), avg(1), avg(2), static_cast<long>(arg + 1), ok ? "ok" : "wrong", slowest);
    detail += buf;
  }
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

// AC8: coherence axioms for every built-in envelope on 100 random instances.
Outcome ac8() {
  const std::vector<RiskEnvelope> envs{make_expectation(), make_cvar(0.1), make_cvar(0.5), make_cvar(1.0),
                                       make_msd(0.0),      make_msd(0.5),  make_msd(1.0)};
  auto rho = [](const RiskEnvelope& e, const Vector& p, const Vector& z) {
    return evaluate_risk(e, FiniteDist(p), CostVariable(z)).rho;
  };
  Rng rng(808);
  double worst = 0.0;
  int checks = 0;
  for (const auto& env : envs) {
    for (int t = 0; t < 100; ++t) {
      const Index n = 2 + static_cast<Index>(rng.uniform() * 10);
      Vector p(n), z(n), w(n);
      for (Index i = 0; i < n; ++i) {
        p(i) = rng.uniform() + 0.05;
        z(i) = rng.normal(0.0, 2.0);
        w(i) = rng.normal(0.0, 2.0);
      }
      p /= p.sum();
      const double rz = rho(env, p, z), rw = rho(env, p, w);
      const double lam = rng.uniform();
      const double shift = rng.normal(0.0, 3.0);
      const double scale = 3.0 * rng.uniform();
      const double convex = rho(env, p, lam * z + (1.0 - lam) * w) - (lam * rz + (1.0 - lam) * rw);
      const double monotone = rz - rho(env, p, z.cwiseMax(w));
      const double translate = std::abs(rho(env, p, z.array() + shift) - (rz + shift));
      const double homog = std::abs(rho(env, p, scale * z) - scale * rz);
      worst = std::max({worst, convex, monotone, translate, homog});
      checks += 4;
    }
  }
  return {worst <= 1e-9, fmt("%.0f checks over 7 envelopes, worst violation %.1e (<= 1e-9)", checks, worst)};
}

}  // namespace

int main() {
  struct Criterion {
    const char* id;
    double budget;  // seconds
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{{"AC1", 10, ac1},  {"AC2", 120, ac2}, {"AC3", 60, ac3},  {"AC4", 30, ac4},
                                   {"AC5", 10, ac5},  {"AC6", 300, ac6}, {"AC7", 900, ac7}, {"AC8", 5, ac8}};
  int failures = 0;
  for (const auto& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o{false, ""};
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::printf("%s %s: %s [%.1fs, budget %.0fs%s]\n", pass ? "PASS" : "FAIL", c.id, o.detail.c_str(), secs, c.budget,
                in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
