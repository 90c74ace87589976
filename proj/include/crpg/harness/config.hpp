#pragma once

// Experiment configuration: JSON parsing, MDP documents and compatibility
// checks between risk objectives, models and gradient estimators.

#include "crpg/dynrisk.hpp"
#include "crpg/envelope.hpp"
#include "crpg/mdp.hpp"
#include "crpg/optimizer.hpp"
#include "crpg/probspace.hpp"
#include "crpg/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace crpg::harness {

using nlohmann::json;

struct ObjectiveSpec {
  std::string risk = "expectation";  // expectation | cvar | msd | meanstd
  double alpha = 0.5;                // CVaR level or semideviation weight
  double c = 1.0;                    // mean-std weight

  /// Envelope of a coherent objective; mean-std has none.
  std::optional<RiskEnvelope> envelope() const {
    if (risk == "expectation") return make_expectation();
    if (risk == "cvar") return make_cvar(alpha);
    if (risk == "msd") return make_msd(alpha);
    return std::nullopt;
  }
};

/// Finite outcome space with softmax features and fixed costs.
struct AtomsSpec {
  Matrix features;
  Vector costs;
};

struct MdpSpec {
  Mdp mdp;
  SoftmaxPolicy policy;  // theta is a placeholder; iterates supply their own
};

struct CriticSpec {
  std::size_t trajectory_length = 2000;
  KernelSource kernel = KernelSource::empirical;
  std::optional<double> reg;
  std::optional<Matrix> features;  // n_states x k; identity when absent
  int k_iters = 1000;
};

struct TwoPhaseSpec {
  std::size_t n_next = 0;
  std::size_t horizon = 0;
  bool baseline = false;
};

struct ExperimentConfig {
  ObjectiveSpec objective;
  std::string model_type = "assets";  // assets | atoms | mdp
  std::optional<AtomsSpec> atoms;
  std::optional<MdpSpec> mdp;
  std::string estimator = "lr";
  std::size_t samples_per_iter = 10000;
  SgdConfig sgd;
  std::optional<Vector> theta;  // evaluation point; defaults to sgd.theta0
  std::optional<double> tolerance;
  double fd_step = 1e-6;
  CriticSpec critic;
  TwoPhaseSpec twophase;
  std::uint64_t seed = 0;
  std::string output;

  Index param_dim() const {
    if (model_type == "assets") return 3;
    if (model_type == "atoms") return atoms->features.cols();
    return mdp->policy.param_dim();
  }

  Vector eval_theta() const { return theta.value_or(sgd.theta0); }

  bool is_dynamic() const { return model_type == "mdp"; }
  bool is_exact_estimator() const {
    return estimator == "theorem2" || estimator == "dynamic-exact";
  }
};

namespace detail {

inline Vector vector_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + " must be an array of numbers");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + " must be an array of numbers");
    v(static_cast<Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline Matrix matrix_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw ConfigError(what + " must be a non-empty 2-D array");
  const std::size_t cols = j[0].size();
  Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError(what + " rows must have equal length");
    m.row(static_cast<Index>(r)) = vector_from(j[r], what).transpose();
  }
  return m;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("field '") + key + "' has the wrong type");
  }
}

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown field '" + it.key() + "' in " + where);
}

}  // namespace detail

/// MDP document: {n_states, n_actions, gamma, x0, cost: [n] or [n][A],
/// kernel: [x][a][x'], features (optional): [x][a][k]}. Without features the
/// policy is tabular (one parameter per state-action pair).
inline MdpSpec mdp_from_json(const json& j) {
  detail::check_keys(j, {"n_states", "n_actions", "gamma", "x0", "cost", "kernel", "features"}, "MDP document");
  for (const char* k : {"n_states", "n_actions", "gamma", "cost", "kernel"})
    if (!j.contains(k)) throw ConfigError(std::string("MDP document lacks '") + k + "'");
  const auto n = detail::get_or<Index>(j, "n_states", 0);
  const auto na = detail::get_or<Index>(j, "n_actions", 0);
  if (n < 1 || na < 1) throw ConfigError("MDP needs n_states >= 1 and n_actions >= 1");

  Matrix cost(n, na);
  const json& jc = j["cost"];
  if (!jc.is_array() || static_cast<Index>(jc.size()) != n) throw ConfigError("cost needs one entry per state");
  if (!jc.empty() && jc[0].is_array()) {
    cost = detail::matrix_from(jc, "cost");
    if (cost.cols() != na) throw ConfigError("cost rows need one entry per action");
  } else {
    cost = detail::vector_from(jc, "cost").replicate(1, na);
  }

  const json& jk = j["kernel"];
  if (!jk.is_array() || static_cast<Index>(jk.size()) != n) throw ConfigError("kernel needs one block per state");
  std::vector<Matrix> kernel(static_cast<std::size_t>(na), Matrix::Zero(n, n));
  for (Index x = 0; x < n; ++x) {
    const Matrix block = detail::matrix_from(jk[static_cast<std::size_t>(x)], "kernel");
    if (block.rows() != na || block.cols() != n) throw ConfigError("kernel[x] must be n_actions x n_states");
    for (Index a = 0; a < na; ++a) kernel[static_cast<std::size_t>(a)].row(x) = block.row(a);
  }
  Mdp mdp(cost, std::move(kernel), detail::get_or<double>(j, "gamma", 0.0), detail::get_or<Index>(j, "x0", 0));

  std::vector<Matrix> feats;
  if (j.contains("features") && !j["features"].is_null()) {
    const json& jf = j["features"];
    if (!jf.is_array() || static_cast<Index>(jf.size()) != n) throw ConfigError("features need one block per state");
    for (Index x = 0; x < n; ++x) {
      Matrix f = detail::matrix_from(jf[static_cast<std::size_t>(x)], "features");
      if (f.rows() != na) throw ConfigError("features[x] must have one row per action");
      feats.push_back(std::move(f));
    }
  } else {
    feats = SoftmaxPolicy::tabular_features(n, na);
  }
  const Index k = feats.front().cols();
  return {std::move(mdp), SoftmaxPolicy(std::move(feats), Vector::Zero(k))};
}

inline json mdp_to_json(const Mdp& m, const std::vector<Matrix>* features = nullptr) {
  json j;
  j["n_states"] = m.n_states();
  j["n_actions"] = m.n_actions();
  j["gamma"] = m.gamma();
  j["x0"] = m.x0();
  json cost = json::array(), kernel = json::array();
  for (Index x = 0; x < m.n_states(); ++x) {
    cost.push_back(to_std(m.cost().row(x).transpose()));
    json block = json::array();
    for (Index a = 0; a < m.n_actions(); ++a) block.push_back(to_std(m.kernel(a).row(x).transpose()));
    kernel.push_back(block);
  }
  j["cost"] = cost;
  j["kernel"] = kernel;
  if (features) {
    json f = json::array();
    for (const auto& fx : *features) {
      json rows = json::array();
      for (Index a = 0; a < fx.rows(); ++a) rows.push_back(to_std(fx.row(a).transpose()));
      f.push_back(rows);
    }
    j["features"] = f;
  }
  return j;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + p.string() + "': " + e.what());
  }
}

/// Rejects estimator/objective/model combinations that have no meaning.
inline void validate(const ExperimentConfig& c) {
  static const std::set<std::string> risks{"expectation", "cvar", "msd", "meanstd"};
  static const std::set<std::string> estimators{"theorem2", "lr",    "cvar",          "gmsd",
                                                "saa",      "meanstd", "dynamic-exact", "dynamic-twophase"};
  const std::string& r = c.objective.risk;
  const std::string& e = c.estimator;
  if (!risks.count(r)) throw ConfigError("unknown risk '" + r + "'");
  if (!estimators.count(e)) throw ConfigError("unknown estimator '" + e + "'");
  if (c.samples_per_iter < 1) throw ConfigError("samples_per_iter must be at least 1");
  if (r == "cvar" && !(c.objective.alpha > 0.0 && c.objective.alpha <= 1.0))
    throw ConfigError("CVaR level must lie in (0, 1]");
  if (r == "msd" && !(c.objective.alpha >= 0.0 && c.objective.alpha <= 1.0))
    throw ConfigError("mean-semideviation weight must lie in [0, 1]");
  if (r == "meanstd" && !(c.objective.c >= 0.0)) throw ConfigError("mean-std weight must be non-negative");

  auto bad = [&](const std::string& why) {
    throw ConfigError("estimator '" + e + "' is incompatible with " + why);
  };
  const bool dynamic_est = e == "dynamic-exact" || e == "dynamic-twophase";
  if (c.model_type == "mdp") {
    if (!dynamic_est) bad("an MDP model (use dynamic-exact or dynamic-twophase)");
    if (r == "meanstd") bad("the mean-std objective (not a coherent risk)");
  } else {
    if (dynamic_est) bad("a static model");
    if (e == "theorem2" && c.model_type == "assets") bad("the asset model (returns are continuous, not enumerable)");
    if (e == "theorem2" && r == "meanstd") bad("the mean-std objective (not a coherent risk)");
    if (e == "lr" && r != "expectation") bad("risk '" + r + "' (lr estimates the expectation)");
    if (e == "cvar" && r != "cvar") bad("risk '" + r + "'");
    if (e == "gmsd" && r != "msd") bad("risk '" + r + "'");
    if (e == "meanstd" && r != "meanstd") bad("risk '" + r + "'");
    if (e == "saa" && r == "meanstd") bad("the mean-std objective (not a coherent risk)");
    if (r == "meanstd" && e != "meanstd") bad("the mean-std objective");
  }
  if (c.sgd.theta0.size() != c.param_dim()) throw ConfigError("theta0 length does not match the model");
  if (c.theta && c.theta->size() != c.param_dim()) throw ConfigError("theta length does not match the model");
  if (c.critic.features && c.mdp && c.critic.features->rows() != c.mdp->mdp.n_states())
    throw ConfigError("critic features need one row per state");
}

inline std::string default_estimator(const std::string& model, const std::string& risk) {
  if (model == "mdp") return "dynamic-exact";
  if (risk == "cvar") return "cvar";
  if (risk == "msd") return "gmsd";
  if (risk == "meanstd") return "meanstd";
  return model == "atoms" ? "theorem2" : "lr";
}

/// Parses a configuration document. Relative MDP file paths resolve against `base_dir`.
inline ExperimentConfig config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get_or;
  detail::check_keys(j,
                     {"objective", "model", "estimator", "samples_per_iter", "sgd", "theta", "seed", "output",
                      "grad_check", "critic", "twophase"},
                     "config");
  ExperimentConfig c;
  try {
    if (j.contains("objective")) {
      const json& o = j["objective"];
      detail::check_keys(o, {"risk", "alpha", "c"}, "objective");
      c.objective.risk = get_or<std::string>(o, "risk", "expectation");
      c.objective.alpha = get_or<double>(o, "alpha", c.objective.risk == "msd" ? 1.0 : 0.5);
      c.objective.c = get_or<double>(o, "c", 1.0);
    }

    const json m = j.value("model", json{{"type", "assets"}});
    detail::check_keys(m, {"type", "features", "costs", "file", "mdp"}, "model");
    c.model_type = get_or<std::string>(m, "type", "assets");
    if (c.model_type == "atoms") {
      if (!m.contains("features") || !m.contains("costs")) throw ConfigError("atoms model needs features and costs");
      AtomsSpec a{detail::matrix_from(m["features"], "features"), detail::vector_from(m["costs"], "costs")};
      if (a.costs.size() != a.features.rows()) throw ConfigError("atoms model needs one cost per feature row");
      c.atoms = std::move(a);
    } else if (c.model_type == "mdp") {
      if (m.contains("mdp")) {
        c.mdp = mdp_from_json(m["mdp"]);
      } else if (m.contains("file")) {
        std::filesystem::path p = get_or<std::string>(m, "file", "");
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        c.mdp = mdp_from_json(read_json_file(p));
      } else {
        throw ConfigError("mdp model needs 'file' or an inline 'mdp' document");
      }
    } else if (c.model_type != "assets") {
      throw ConfigError("unknown model type '" + c.model_type + "'");
    }

    const bool bench = c.model_type == "assets";
    c.estimator = get_or<std::string>(j, "estimator", default_estimator(c.model_type, c.objective.risk));
    const auto spi = get_or<long long>(j, "samples_per_iter", 10000);
    if (spi < 1) throw ConfigError("samples_per_iter must be at least 1");
    c.samples_per_iter = static_cast<std::size_t>(spi);
    c.seed = get_or<std::uint64_t>(j, "seed", 0);
    c.output = get_or<std::string>(j, "output", "");

    // Benchmark runs default to a=5, b=20, 300 iterations; everything else to a=1, b=10.
    const json s = j.value("sgd", json::object());
    detail::check_keys(s, {"schedule", "a", "b", "iters", "theta0", "grad_clip"}, "sgd");
    c.sgd.schedule = parse_schedule(get_or<std::string>(s, "schedule", "shifted"));
    c.sgd.a = get_or<double>(s, "a", bench ? 5.0 : 1.0);
    c.sgd.b = get_or<double>(s, "b", bench ? 20.0 : 10.0);
    c.sgd.iters = get_or<int>(s, "iters", bench ? 300 : 100);
    if (s.contains("grad_clip") && !s["grad_clip"].is_null()) c.sgd.grad_clip = s["grad_clip"].get<double>();
    c.sgd.theta0 = s.contains("theta0") ? detail::vector_from(s["theta0"], "theta0") : Vector::Zero(c.param_dim());
    c.sgd.seed = c.seed;
    c.sgd.validate();
    if (j.contains("theta")) c.theta = detail::vector_from(j["theta"], "theta");

    if (j.contains("grad_check")) {
      const json& g = j["grad_check"];
      detail::check_keys(g, {"tolerance", "fd_step"}, "grad_check");
      if (g.contains("tolerance")) c.tolerance = g["tolerance"].get<double>();
      c.fd_step = get_or<double>(g, "fd_step", 1e-6);
      if (!(c.fd_step > 0.0)) throw ConfigError("fd_step must be positive");
    }
    if (j.contains("critic")) {
      const json& k = j["critic"];
      detail::check_keys(k, {"trajectory_length", "kernel", "reg", "features", "k_iters"}, "critic");
      c.critic.trajectory_length = get_or<std::size_t>(k, "trajectory_length", 2000);
      const auto src = get_or<std::string>(k, "kernel", "empirical");
      if (src != "empirical" && src != "exact") throw ConfigError("critic kernel must be 'empirical' or 'exact'");
      c.critic.kernel = src == "exact" ? KernelSource::exact : KernelSource::empirical;
      if (k.contains("reg") && !k["reg"].is_null()) c.critic.reg = k["reg"].get<double>();
      if (k.contains("features")) c.critic.features = detail::matrix_from(k["features"], "critic features");
      c.critic.k_iters = get_or<int>(k, "k_iters", 1000);
    }
    if (j.contains("twophase")) {
      const json& t = j["twophase"];
      detail::check_keys(t, {"n_next", "horizon", "baseline"}, "twophase");
      c.twophase.n_next = get_or<std::size_t>(t, "n_next", 0);
      c.twophase.horizon = get_or<std::size_t>(t, "horizon", 0);
      c.twophase.baseline = get_or<bool>(t, "baseline", false);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
  return config_from_json(read_json_file(p), p.parent_path());
}

}  // namespace crpg::harness
