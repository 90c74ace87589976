#include "crpg/staticgrad.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

using namespace crpg;
using fixtures::rel_sup;
using Catch::Matchers::ContainsSubstring;

namespace {

double exact_rho(const SoftmaxModel& m, const Vector& theta, const CostVariable& z, const RiskEnvelope& env) {
  return evaluate_risk(env, FiniteDist(m.probs(theta)), z).rho;
}

Vector exact_grad(const fixtures::StaticInstance& s, const RiskEnvelope& env) {
  return exact_risk_gradient(s.model, s.theta, s.z, env).second.grad;
}

double oracle_rho(const std::string& kind, double a, const Vector& p, const Vector& z) {
  if (kind == "cvar") return oracle::cvar(p, z, a);
  if (kind == "msd") return oracle::msd(p, z, a);
  return oracle::mean(p, z);
}

}  // namespace

TEST_CASE("Theorem 2 gradient matches finite differences of the exact risk") {
  struct Case {
    std::string kind;
    double a;
  };
  const std::vector<Case> cases{{"expectation", 0}, {"cvar", 0.3}, {"cvar", 0.7}, {"msd", 0.5}, {"msd", 1.0}};
  Rng rng(101);
  for (const auto& c : cases) {
    const RiskEnvelope env =
        c.kind == "cvar" ? make_cvar(c.a) : (c.kind == "msd" ? make_msd(c.a) : make_expectation());
    int done = 0;
    while (done < 5) {
      const Index n = 3 + static_cast<Index>(rng.uniform() * 10);
      const Index k = 2 + static_cast<Index>(rng.uniform() * 5);
      auto s = fixtures::random_softmax(rng, n, k);
      if (c.kind == "cvar" && fixtures::quantile_gap(s.model.probs(s.theta), s.z.values(), c.a) < 1e-3) continue;
      ++done;
      const Vector g = exact_grad(s, env);
      const Vector fd = oracle::fd_grad(
          [&](const Vector& th) { return oracle_rho(c.kind, c.a, oracle::softmax(s.model.features(), th), s.z.values()); },
          s.theta, 1e-6);
      INFO(c.kind << " " << c.a << " n=" << n << " k=" << k);
      CHECK(rel_sup(g, fd) < 1e-4);
    }
  }
}

TEST_CASE("Theorem 2 special cases") {
  // Parameter-free model, p-independent constraints: zero gradient.
  SoftmaxModel flat(Matrix::Zero(4, 2));
  const Vector th = Vector::Constant(2, 0.3);
  const CostVariable z(from_std({1, 4, 2, 3}));
  CHECK(exact_risk_gradient(flat, th, z, make_cvar(0.4)).second.grad.cwiseAbs().maxCoeff() == 0.0);

  // Expectation: likelihood-ratio form.
  auto s = fixtures::three_atoms();
  const Vector p = s.model.probs(s.theta);
  const Vector lr = s.model.scores(s.theta).transpose() * p.cwiseProduct(s.z.values());
  const Vector g = exact_grad(s, make_expectation());
  CHECK((g - lr).cwiseAbs().maxCoeff() < 1e-12);
  const Vector fd = oracle::fd_grad([&](const Vector& t) { return oracle::mean(s.model.probs(t), s.z.values()); }, s.theta);
  CHECK((g - fd).cwiseAbs().maxCoeff() < 1e-6);

  // CVaR(0.3) on 8 atoms at five random theta away from quantile ties.
  Rng rng(5);
  int done = 0;
  while (done < 5) {
    auto r = fixtures::random_softmax(rng, 8, 3);
    if (fixtures::quantile_gap(r.model.probs(r.theta), r.z.values(), 0.3) < 1e-3) continue;
    ++done;
    const Vector fd8 = oracle::fd_grad(
        [&](const Vector& t) { return exact_rho(r.model, t, r.z, make_cvar(0.3)); }, r.theta, 1e-6);
    CHECK((exact_grad(r, make_cvar(0.3)) - fd8).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("Theorem 2 rejects bad inputs") {
  auto s = fixtures::three_atoms();
  const FiniteDist d(s.model.probs(s.theta), s.model.scores(s.theta));
  auto sp = evaluate_risk(make_cvar(0.4), d, s.z).sp;
  CHECK_THROWS_AS(grad_theorem2(FiniteDist(s.model.probs(s.theta)), s.z, sp, make_cvar(0.4)), ConfigError);
  auto stale = sp;
  stale.xi(0) += 0.2;
  CHECK_THROWS_WITH(grad_theorem2(d, s.z, stale, make_cvar(0.4)), ContainsSubstring("saddle point invalid"));
}

TEST_CASE("gradient homogeneity and translation") {
  Rng rng(7);
  for (const auto& env : {make_cvar(0.3), make_msd(0.5), make_expectation()}) {
    auto s = fixtures::random_softmax(rng, 7, 3);
    while (fixtures::quantile_gap(s.model.probs(s.theta), s.z.values(), 0.3) < 1e-3) s = fixtures::random_softmax(rng, 7, 3);
    const Vector g = exact_grad(s, env);
    auto doubled = s;
    doubled.z = CostVariable(2.0 * s.z.values());
    CHECK((exact_grad(doubled, env) - 2.0 * g).cwiseAbs().maxCoeff() < 1e-10);
    auto shifted = s;
    shifted.z = CostVariable(s.z.values().array() + 7.0);
    CHECK((exact_grad(shifted, env) - g).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("sampled CVaR gradient") {
  auto s = fixtures::three_atoms();
  Rng rng(1);
  {
    auto flat = s;
    flat.z = CostVariable(Vector::Constant(3, 2.0));
    auto b = flat.model.sample(flat.theta, flat.z, 1000, rng);
    auto g = grad_cvar_sampled(b, 0.3);
    CHECK(g.grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.has_flag("no tail samples"));
  }
  CHECK_THROWS_AS(grad_cvar_sampled(s.model.sample(s.theta, s.z, 20, rng), 0.3), ConfigError);

  const Vector mean_grad = exact_grad(s, make_expectation());
  {
    Rng r(2);
    auto b = s.model.sample(s.theta, s.z, 100000, r);
    const Vector g = grad_cvar_sampled(b, 1.0).grad;
    CHECK((g - mean_grad).norm() < 0.02 * mean_grad.norm());
  }

  const Vector exact = exact_grad(s, make_cvar(0.4));
  int good = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const Vector g = grad_cvar_sampled(s.model.sample(s.theta, s.z, 100000, r), 0.4).grad;
    if ((g - exact).norm() < 0.05 * exact.norm()) ++good;
  }
  CHECK(good >= 19);
}

TEST_CASE("GMSD") {
  auto s = fixtures::three_atoms();
  Rng rng(3);
  auto b = s.model.sample(s.theta, s.z, 5000, rng);
  CHECK((grad_gmsd(b, 0.0).grad - grad_lr_mean(b).grad).cwiseAbs().maxCoeff() == 0.0);

  auto flat = s;
  flat.z = CostVariable(Vector::Constant(3, -1.0));
  auto g0 = grad_gmsd(flat.model.sample(flat.theta, flat.z, 100, rng), 1.0);
  CHECK(g0.has_flag("zero semideviation"));

  const Vector exact = exact_grad(s, make_msd(1.0));
  int good = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const Vector g = grad_gmsd(s.model.sample(s.theta, s.z, 100000, r), 1.0).grad;
    if ((g - exact).norm() < 0.05 * exact.norm()) ++good;
  }
  CHECK(good >= 19);
  CHECK_THROWS_AS(grad_gmsd(b, 1.5), ConfigError);

  // The verbatim form is biased away from the exact gradient.
  Rng r(77);
  const Vector v = grad_gmsd(s.model.sample(s.theta, s.z, 100000, r), 1.0, GmsdForm::verbatim).grad;
  CHECK((v - exact).norm() > 0.2 * exact.norm());
}

TEST_CASE("sampled estimators are centred on the exact gradient") {
  auto s = fixtures::three_atoms();
  const Vector cv = exact_grad(s, make_cvar(0.4)), ms = exact_grad(s, make_msd(0.8));
  std::vector<Vector> gc, gm;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng r(1000 + seed);
    auto b = s.model.sample(s.theta, s.z, 10000, r);
    gc.push_back(grad_cvar_sampled(b, 0.4).grad);
    gm.push_back(grad_gmsd(b, 0.8).grad);
  }
  auto check = [](const std::vector<Vector>& xs, const Vector& target) {
    Vector mean = Vector::Zero(target.size());
    for (const auto& x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    Vector var = Vector::Zero(target.size());
    for (const auto& x : xs) var += (x - mean).cwiseAbs2();
    const Vector se = (var / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size())).cwiseSqrt();
    for (Index k = 0; k < target.size(); ++k) CHECK(std::abs(mean(k) - target(k)) <= 3.0 * se(k) + 1e-12);
  };
  check(gc, cv);
  check(gm, ms);
}

TEST_CASE("SAA gradient") {
  auto s = fixtures::three_atoms();
  Rng rng(9);
  auto b = s.model.sample(s.theta, s.z, 2000, rng);
  CHECK((grad_saa(make_expectation(), b, 3).grad - grad_lr_mean(b).grad).cwiseAbs().maxCoeff() < 1e-12);
  SaaOptions numeric;
  numeric.force_numeric = true;
  CHECK((grad_saa(make_expectation(), b, 3, numeric).grad - grad_lr_mean(b).grad).cwiseAbs().maxCoeff() < 1e-8);

  CHECK((grad_saa(make_cvar(0.5), b, 3).grad - grad_cvar_sampled(b, 0.5).grad).cwiseAbs().maxCoeff() < 1e-6);

  const Vector exact = exact_grad(s, make_msd(0.7));
  int good = 0, good_numeric = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    auto batch = s.model.sample(s.theta, s.z, 10000, r);
    if ((grad_saa(make_msd(0.7), batch, 3).grad - exact).norm() < 0.1 * exact.norm()) ++good;
    if ((grad_saa(make_msd(0.7), batch, 3, numeric).grad - exact).norm() < 0.1 * exact.norm()) ++good_numeric;
  }
  CHECK(good >= 18);
  CHECK(good_numeric >= 18);
}

TEST_CASE("SAA gradient on continuous samples treats each draw as an atom") {
  Rng rng(15);
  SampleBatch b;
  for (Index i = 0; i < 400; ++i) {
    Vector s(2);
    s << rng.normal(0, 1), rng.normal(0, 1);
    b.draws.push_back(Draw{i, rng.normal(0, 1), s, -1});
  }
  const Vector saa = grad_saa(make_cvar(0.25), b, 400).grad;
  CHECK((saa - grad_cvar_sampled(b, 0.25).grad).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("regularized SAA gradient approaches the plain one") {
  auto s = fixtures::six_atoms();
  Rng rng(21);
  auto b = s.model.sample(s.theta, s.z, 5000, rng);
  SaaOptions reg;
  reg.reg = 1.0 / (2.0 * 5000.0);
  const Vector plain = grad_saa(make_msd(0.7), b, 6).grad;
  CHECK((grad_saa(make_msd(0.7), b, 6, reg).grad - plain).norm() < 1e-3 * (1.0 + plain.norm()));
}

TEST_CASE("mean-std baseline") {
  auto s = fixtures::three_atoms();
  Rng rng(4);
  auto b = s.model.sample(s.theta, s.z, 3000, rng);
  CHECK((grad_meanstd_baseline(b, 0.0).grad - grad_lr_mean(b).grad).cwiseAbs().maxCoeff() < 1e-15);

  // Symmetric two-point cost under a parameter-free model.
  SoftmaxModel flat(Matrix::Zero(2, 2));
  auto fb = flat.sample(Vector::Zero(2), CostVariable(from_std({-1, 1})), 1000, rng);
  CHECK(grad_meanstd_baseline(fb, 1.0).grad.cwiseAbs().maxCoeff() == 0.0);

  const Vector fd = oracle::fd_grad(
      [&](const Vector& t) { return oracle::mean_std(s.model.probs(t), s.z.values(), 1.0); }, s.theta, 1e-6);
  int good = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    if ((grad_meanstd_baseline(s.model.sample(s.theta, s.z, 100000, r), 1.0).grad - fd).norm() < 0.05 * fd.norm()) ++good;
  }
  CHECK(good >= 19);

  auto cb = s;
  cb.z = CostVariable(Vector::Constant(3, 4.0));
  CHECK(grad_meanstd_baseline(cb.model.sample(cb.theta, cb.z, 50, rng), 1.0).has_flag("zero variance"));
}

TEST_CASE("quantile mass diagnostic") {
  const FiniteDist d(from_std({0.5, 0.3, 0.2}));
  CHECK(cvar_quantile_mass(d, CostVariable(from_std({1, 3, 6})), 0.4) == Catch::Approx(0.3));
}
