#pragma once

// Shared random instances for the test suites and the acceptance gate.

#include "crpg/envelope.hpp"
#include "crpg/mdp.hpp"
#include "crpg/probspace.hpp"
#include "crpg/rng.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace fixtures {

using namespace crpg;

struct StaticInstance {
  SoftmaxModel model;
  Vector theta;
  CostVariable z;
};

inline StaticInstance random_softmax(Rng& rng, Index n, Index k) {
  Matrix phi(n, k);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) phi(i, j) = rng.normal(0.0, 1.0);
  Vector theta(k), z(n);
  for (Index j = 0; j < k; ++j) theta(j) = rng.normal(0.0, 0.7);
  for (Index i = 0; i < n; ++i) z(i) = rng.normal(0.0, 2.0);
  return {SoftmaxModel(phi), theta, CostVariable(z)};
}

/// Distance of every partial sum of the cost-sorted masses from 1 - alpha.
inline double quantile_gap(const Vector& p, const Vector& z, double alpha) {
  std::vector<Index> order(static_cast<std::size_t>(p.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return z(a) < z(b); });
  double cum = 0.0, gap = 1.0;
  for (Index w : order) {
    cum += p(w);
    gap = std::min(gap, std::abs(cum - (1.0 - alpha)));
  }
  return gap;
}

/// Three outcomes, costs [1, 3, 6], probabilities [0.5, 0.3, 0.2] at theta0.
inline StaticInstance three_atoms() {
  Vector theta(3);
  theta << std::log(0.5), std::log(0.3), std::log(0.2);
  Vector z(3);
  z << 1.0, 3.0, 6.0;
  return {SoftmaxModel(Matrix::Identity(3, 3)), theta, CostVariable(z)};
}

/// Six outcomes with two-dimensional features.
inline StaticInstance six_atoms() {
  Matrix phi(6, 2);
  phi << 1.0, 0.0, 0.5, 0.5, 0.0, 1.0, -0.5, 0.5, -1.0, 0.0, 0.3, -0.8;
  Vector theta(2);
  theta << 0.4, -0.3;
  Vector z(6);
  z << 2.0, -1.0, 0.5, 3.0, 1.5, -2.0;
  return {SoftmaxModel(phi), theta, CostVariable(z)};
}

struct MdpInstance {
  Mdp mdp;
  SoftmaxPolicy pi;
};

/// Random kernels with full support, costs in [0, 2], K-dimensional action features.
inline MdpInstance random_mdp(Rng& rng, Index n, Index na, double gamma, Index k = 3) {
  Matrix cost(n, na);
  std::vector<Matrix> kernel;
  for (Index a = 0; a < na; ++a) {
    Matrix m(n, n);
    for (Index x = 0; x < n; ++x) {
      for (Index y = 0; y < n; ++y) m(x, y) = 0.05 + rng.uniform();
      m.row(x) /= m.row(x).sum();
    }
    kernel.push_back(m);
  }
  for (Index x = 0; x < n; ++x)
    for (Index a = 0; a < na; ++a) cost(x, a) = 2.0 * rng.uniform();
  std::vector<Matrix> feats;
  for (Index x = 0; x < n; ++x) {
    Matrix f(na, k);
    for (Index a = 0; a < na; ++a)
      for (Index j = 0; j < k; ++j) f(a, j) = rng.normal(0.0, 1.0);
    feats.push_back(f);
  }
  Vector theta(k);
  for (Index j = 0; j < k; ++j) theta(j) = rng.normal(0.0, 0.7);
  return {Mdp(cost, kernel, gamma, 0), SoftmaxPolicy(feats, theta)};
}

inline double rel_sup(const Vector& a, const Vector& b) {
  return (a - b).cwiseAbs().maxCoeff() / (1.0 + b.cwiseAbs().maxCoeff());
}

}  // namespace fixtures
