// crpg_cli: command-line front end.
//
//   crpg_cli bench-assets --config run.json [--seed N] [--out file.csv] [--format csv|json]
//   crpg_cli grad-check   --config check.json          (JSON report)
//   crpg_cli optimize     --config opt.json --out trace.csv
//   crpg_cli critic       --config critic.json
//   crpg_cli eval-risk    --config eval.json           (JSON report)
//
// Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 tolerance breach.

#include "crpg/harness/commands.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

using namespace crpg;
using namespace crpg::harness;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format = "csv";
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig c = load_config(o.config);
  if (o.seed) {
    c.seed = *o.seed;
    c.sgd.seed = *o.seed;
  }
  return c;
}

std::string out_path(const Options& o, const ExperimentConfig& c) { return o.out.empty() ? c.output : o.out; }

void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

int aborted(const RunTrace& t) {
  if (!t.aborted) return exit_ok;
  std::cerr << "error: " << t.abort_reason << "\n";
  return exit_numerical;
}

int run_bench(const Options& o) {
  const auto c = load(o);
  const auto r = bench_assets(c);
  std::ostringstream s;
  if (o.format == "json") s << bench_json(r).dump(2) << "\n";
  else write_bench_csv(r, s);
  emit(out_path(o, c), s.str());
  return aborted(r.trace);
}

int run_grad_check(const Options& o) {
  const auto c = load(o);
  const auto r = grad_check(c);
  emit(out_path(o, c), r.to_json().dump(2) + "\n");
  if (!r.pass) {
    std::cerr << "tolerance breach: max relative deviation " << r.max_rel_dev << " (tolerance " << r.tolerance
              << ")\n";
    return exit_tolerance;
  }
  return exit_ok;
}

int run_optimize(const Options& o) {
  const auto c = load(o);
  const auto t = optimize(c);
  const std::string path = out_path(o, c);
  std::ostringstream s;
  if (o.format == "json") {
    s << trace_json(t).dump(2) << "\n";
  } else {
    write_trace_csv(t, s);
    const std::string theta = theta_json(t).dump(2) + "\n";
    if (path.empty()) std::cerr << theta;
    else emit(std::filesystem::path(path).replace_extension(".theta.json").string(), theta);
  }
  emit(path, s.str());
  return aborted(t);
}

int run_critic(const Options& o) {
  const auto c = load(o);
  const auto r = critic(c);
  std::ostringstream s;
  if (o.format == "json") {
    s << critic_json(c, r).dump(2) << "\n";
  } else {
    s << "state,value\n";
    const Vector v = r.value.values();
    for (Index x = 0; x < v.size(); ++x) s << x << ',' << format_double(v(x)) << '\n';
  }
  emit(out_path(o, c), s.str());
  return exit_ok;
}

int run_eval(const Options& o) {
  const auto c = load(o);
  emit(out_path(o, c), eval_risk(c).dump(2) + "\n");
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Policy gradients for coherent risk measures"};
  app.require_subcommand(1);
  Options o;
  auto add = [&](const std::string& name, const std::string& help, int (*fn)(const Options&)) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "override the configured seed");
    sub->add_option("--out", o.out, "output path (default: config 'output' or stdout)");
    sub->add_option("--format", o.format, "output format")->check(CLI::IsMember({"csv", "json"}));
    return std::make_pair(sub, fn);
  };
  std::vector<std::pair<CLI::App*, int (*)(const Options&)>> subs{
      add("bench-assets", "three-asset selection benchmark", run_bench),
      add("grad-check", "compare a gradient estimator with finite differences", run_grad_check),
      add("optimize", "SGD on the configured risk objective", run_optimize),
      add("critic", "fit the PRSVI critic at theta", run_critic),
      add("eval-risk", "evaluate the risk objective at theta", run_eval),
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_config;
  }

  try {
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) return fn(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const ToleranceError& e) {
    std::cerr << "tolerance breach: " << e.what() << "\n";
    return exit_tolerance;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return exit_numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_numerical;
  }
  return exit_config;
}
