// difftraj: config-driven runner for the trajectory experiments.
//
//   difftraj simulate  --config cfg.json [--out dir] [--method m[,m]] [--seed s] [--threads n]
//   difftraj analyze   dump.dtrj... [--config cfg.json] [--out dir] [--threads n]
//   difftraj perturb   --config cfg.json ...
//   difftraj splitting --config cfg.json ...
//   difftraj curves    [--config cfg.json] [--out dir]
//
// exit codes: 0 ok, 1 unexpected, 2 config, 3 numeric divergence, 4 I/O

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difftraj/config.hpp"
#include "difftraj/error.hpp"
#include "difftraj/experiments.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string method;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::vector<std::string> inputs;
};

void add_common(CLI::App* cmd, Flags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--out", f.out, "output directory (default: config 'out', else ./out)");
  cmd->add_option("--method", f.method, "sampler(s), comma separated: euler, ddim, ab4, rk4, exact");
  cmd->add_option("--seed", f.seed, "run a single seed instead of the config's list");
  cmd->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
}

difftraj::ExperimentConfig configure(const Flags& f) {
  difftraj::ExperimentConfig cfg;
  if (!f.config.empty()) cfg = difftraj::load_config(f.config);
  if (!f.method.empty()) {
    cfg.sampler.methods.clear();
    std::stringstream ss(f.method);
    std::string name;
    while (std::getline(ss, name, ',')) {
      try {
        cfg.sampler.methods.push_back(difftraj::parse_method(name));
      } catch (const difftraj::ParameterError& e) {
        throw difftraj::ConfigError("--method", e.what());
      }
    }
    if (cfg.sampler.methods.empty()) throw difftraj::ConfigError("--method", "no method given");
  }
  if (f.seed) cfg.seeds = {*f.seed};
  return cfg;
}

std::string out_dir(const Flags& f, const difftraj::ExperimentConfig& cfg) {
  if (!f.out.empty()) return f.out;
  return cfg.out.empty() ? "out" : cfg.out;
}

void report(const std::string& dir, const difftraj::OutputFiles& files) {
  difftraj::write_outputs(dir, files);
  std::cerr << "wrote " << files.size() << " file(s) to " << dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probability-flow trajectory experiments"};
  app.require_subcommand(1);
  Flags f;
  auto* simulate = app.add_subcommand("simulate", "integrate trajectories and compare with the closed form");
  auto* analyze = app.add_subcommand("analyze", "PCA spectra and residual variances of trajectory dumps");
  auto* perturb = app.add_subcommand("perturb", "perturbation grids");
  auto* splitting = app.add_subcommand("splitting", "commitment traces and predicted vs observed split times");
  auto* curves = app.add_subcommand("curves", "psi / xi / phi response curves");
  add_common(simulate, f, true);
  add_common(analyze, f, false);
  analyze->add_option("inputs", f.inputs, "trajectory dumps (.dtrj)");
  add_common(perturb, f, true);
  add_common(splitting, f, true);
  add_common(curves, f, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const difftraj::ExperimentConfig cfg = configure(f);
    const std::string dir = out_dir(f, cfg);
    if (simulate->parsed()) {
      report(dir, difftraj::run_simulate(cfg, f.threads).files);
    } else if (analyze->parsed()) {
      std::vector<std::string> inputs = f.inputs;
      bool center = true;
      if (cfg.analyze) {
        if (inputs.empty()) inputs = cfg.analyze->inputs;
        center = cfg.analyze->center_spectrum;
      }
      const auto res = difftraj::run_analyze(inputs, cfg.schedule, center, f.threads);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      report(dir, res.files);
    } else if (perturb->parsed()) {
      report(dir, difftraj::run_perturb(cfg, f.threads).files);
    } else if (splitting->parsed()) {
      report(dir, difftraj::run_splitting(cfg, f.threads).files);
    } else if (curves->parsed()) {
      report(dir, difftraj::run_curves(cfg));
    }
  } catch (const difftraj::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const difftraj::ParameterError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return 2;
  } catch (const difftraj::DomainError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return 2;
  } catch (const difftraj::OrderingError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return 2;
  } catch (const difftraj::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const difftraj::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const difftraj::FormatError& e) {
    std::cerr << "bad input file: " << e.what() << "\n";
    return 4;
  } catch (const difftraj::ValidationError& e) {
    std::cerr << "bad input file: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
