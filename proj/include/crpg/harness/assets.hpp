#pragma once

// Three-asset selection benchmark: A1 ~ N(1, 1), A2 ~ N(4, 6^2), A3 Pareto
// with shape 1.5 and scale 1. The policy picks asset i with probability
// proportional to exp(theta_i); the cost of a draw is minus its return.

#include "crpg/probspace.hpp"
#include "crpg/rng.hpp"
#include "crpg/types.hpp"

#include <cmath>
#include <random>

namespace crpg::harness {

class AssetModel {
 public:
  static constexpr Index n_assets = 3;
  static constexpr double pareto_shape = 1.5;
  static constexpr double pareto_scale = 1.0;

  Vector probs(const Vector& theta) const {
    check(theta);
    const Vector e = (theta.array() - theta.maxCoeff()).exp();
    return e / e.sum();
  }

  /// Row i: d/dtheta log P(A_i) = e_i - P.
  Matrix scores(const Vector& theta) const {
    const Vector p = probs(theta);
    return Matrix::Identity(n_assets, n_assets).rowwise() - p.transpose();
  }

  static double pareto(Rng& rng) {
    const double u = 1.0 - rng.uniform();  // (0, 1]
    return pareto_scale * std::pow(u, -1.0 / pareto_shape);
  }

  static double draw_return(Index asset, Rng& rng) {
    switch (asset) {
      case 0: return rng.normal(1.0, 1.0);
      case 1: return rng.normal(4.0, 6.0);
      default: return pareto(rng);
    }
  }

  /// N draws; draw i is its own outcome (id = i) with `tag` the chosen asset.
  SampleBatch sample(const Vector& theta, std::size_t n, Rng& rng) const {
    const Vector p = probs(theta);
    const Matrix s = scores(theta);
    std::discrete_distribution<Index> pick(p.data(), p.data() + p.size());
    SampleBatch batch;
    batch.seed = rng.seed();
    batch.draws.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Index a = pick(rng);
      batch.draws.push_back(Draw{static_cast<Index>(i), -draw_return(a, rng), s.row(a).transpose(), a});
    }
    return batch;
  }

 private:
  static void check(const Vector& theta) {
    if (theta.size() != n_assets) throw ConfigError("asset policy needs a 3-dimensional theta");
  }
};

}  // namespace crpg::harness
