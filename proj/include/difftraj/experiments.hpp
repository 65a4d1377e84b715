#pragma once

// The experiments behind each CLI subcommand. Every runner validates first, computes into
// memory, and returns the files to write; nothing touches disk until all of it succeeded.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "difftraj/config.hpp"
#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/io.hpp"
#include "difftraj/mixture.hpp"
#include "difftraj/parallel.hpp"
#include "difftraj/perturblab.hpp"
#include "difftraj/samplers.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/score_field.hpp"
#include "difftraj/trajectory.hpp"
#include "difftraj/trajgeom.hpp"

namespace difftraj {

/// File name -> contents, in the order they are written.
using OutputFiles = std::vector<std::pair<std::string, std::string>>;

inline void write_outputs(const std::filesystem::path& dir, const OutputFiles& files) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  for (const auto& [name, data] : files) detail::write_file(dir / name, data);
}

struct Model {
  std::shared_ptr<const GaussianMixture> mixture;
  std::shared_ptr<const GaussianMode> mode;  ///< set for single-component models
  ScoreField field;
};

/// `hierarchy_offset` is added to the hierarchy seed (one hierarchy per run seed when splitting).
inline Model build_model(const ModelConfig& m, std::uint64_t hierarchy_offset = 0) {
  std::shared_ptr<const GaussianMixture> mix;
  switch (m.type) {
    case ModelConfig::Type::mode: {
      std::mt19937_64 rng(m.seed);
      mix = std::make_shared<const GaussianMixture>(
          GaussianMixture::single(random_mode(m.dim, m.rank, rng, m.lambda_min, m.lambda_max, m.mean_scale)));
      break;
    }
    case ModelConfig::Type::mixture: {
      std::mt19937_64 rng(m.seed);
      std::vector<GaussianMode> modes;
      for (int k = 0; k < m.components; ++k)
        modes.push_back(random_mode(m.dim, m.rank, rng, m.lambda_min, m.lambda_max, m.separation));
      mix = std::make_shared<const GaussianMixture>(std::vector<double>(modes.size(), 1.0), std::move(modes));
      break;
    }
    case ModelConfig::Type::hierarchy: {
      HierarchyParams p = m.hierarchy;
      p.seed += hierarchy_offset;
      mix = std::make_shared<const GaussianMixture>(build_hierarchy(p));
      break;
    }
    case ModelConfig::Type::file:
      mix = std::make_shared<const GaussianMixture>(load_mixture(m.path));
      break;
  }
  std::shared_ptr<const GaussianMode> mode;
  if (mix->size() == 1) mode = std::make_shared<const GaussianMode>(mix->mode(0));
  ScoreField field = mode ? make_mode_field(mode) : make_mixture_field(mix);
  return {mix, mode, std::move(field)};
}

namespace detail {

inline std::string model_name(ModelConfig::Type t) {
  switch (t) {
    case ModelConfig::Type::mode: return "mode";
    case ModelConfig::Type::mixture: return "mixture";
    case ModelConfig::Type::hierarchy: return "hierarchy";
    case ModelConfig::Type::file: return "file";
  }
  return "?";
}

inline std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

// Integrates one run and attaches endpoint estimates and alpha^2 so the dump stands alone.
inline Trajectory sample(const Model& model, const ExperimentConfig& cfg, Method method, std::uint64_t seed) {
  const TimeGrid grid = TimeGrid::uniform(cfg.sampler.n_times);
  const Vector x_T = initial_noise(model.field.dim(), seed);
  Trajectory traj = method == Method::rk4
                        ? integrate_reference(model.field, x_T, grid, cfg.schedule, cfg.sampler.rk4_substeps)
                        : integrate(model.field, x_T, grid, cfg.schedule, method);
  traj = record_endpoint_estimates(model.field, std::move(traj), cfg.schedule);
  std::vector<double> a2;
  for (double t : grid.times()) a2.push_back(std::exp(cfg.schedule.log_alpha_sq(t)));
  traj.alpha_sq = std::move(a2);
  return traj;
}

inline void require_single_mode(const Model& model, const std::string& key, const std::string& what) {
  if (!model.mode) throw ConfigError(key, what + " needs a single-mode model");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// simulate

struct SimulateRun {
  std::uint64_t seed = 0;
  Method method = Method::ddim;
  Trajectory trajectory;
  std::vector<double> abs_dev;  ///< per node, vs closed form (single-mode only)
  std::vector<double> rel_dev;
};

struct SimulateResult {
  std::vector<SimulateRun> runs;            ///< seed-major, then method in config order
  std::map<std::uint64_t, Trajectory> closed_form;
  OutputFiles files;
};

inline SimulateResult run_simulate(const ExperimentConfig& cfg, unsigned threads = 1) {
  const Model model = build_model(cfg.model);
  for (Method m : cfg.sampler.methods)
    if (m == Method::exact) detail::require_single_mode(model, "sampler.methods", "the exact method");

  SimulateResult res;
  const std::size_t nm = cfg.sampler.methods.size();
  res.runs.resize(cfg.seeds.size() * nm);
  std::vector<std::optional<Trajectory>> closed(cfg.seeds.size());
  parallel_for(res.runs.size() + (model.mode ? cfg.seeds.size() : 0), threads, [&](std::size_t idx) {
    if (idx >= res.runs.size()) {
      const std::size_t s = idx - res.runs.size();
      closed[s] = detail::sample(model, cfg, Method::exact, cfg.seeds[s]);
      return;
    }
    SimulateRun& run = res.runs[idx];
    run.seed = cfg.seeds[idx / nm];
    run.method = cfg.sampler.methods[idx % nm];
    run.trajectory = detail::sample(model, cfg, run.method, run.seed);
  });

  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    const std::string tag = detail::seed_tag(cfg.seeds[s]);
    if (closed[s]) {
      res.files.push_back({"closed_form_" + tag + ".dtrj", encode_trajectory(*closed[s])});
      res.closed_form.emplace(cfg.seeds[s], *closed[s]);
    }
    for (std::size_t k = 0; k < nm; ++k) {
      SimulateRun& run = res.runs[s * nm + k];
      const std::string stem = std::string(to_string(run.method)) + "_" + tag;
      res.files.push_back({"traj_" + stem + ".dtrj", encode_trajectory(run.trajectory)});
      nlohmann::json entry = {{"seed", run.seed},
                              {"method", to_string(run.method)},
                              {"dump", "traj_" + stem + ".dtrj"},
                              {"final_norm", run.trajectory.final().norm()}};
      if (closed[s]) {
        const Trajectory& ref = *closed[s];
        std::string dev = "step,t,abs_dev,rel_dev\n";
        double worst = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) {
          const double a = (run.trajectory.states[i] - ref.states[i]).norm();
          const double r = a / ref.states[i].norm();
          run.abs_dev.push_back(a);
          run.rel_dev.push_back(r);
          worst = std::max(worst, r);
          dev += std::to_string(i) + "," + format_double(ref.grid[i]) + "," + format_double(a) + "," +
                 format_double(r) + "\n";
        }
        res.files.push_back({"deviation_" + stem + ".csv", dev});

        // where the endpoint error lives: each eigen-direction, then the off-manifold rest
        const GaussianMode& mode = *model.mode;
        const Vector err = run.trajectory.final() - ref.final();
        const double total = err.squaredNorm();
        const Vector c = mode.axes().transpose() * err;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        std::string pc = "component,lambda,fraction\n";
        for (Index j = 0; j < mode.rank(); ++j)
          pc += std::to_string(j + 1) + "," + format_double(mode.eigenvalues()[j]) + "," +
                format_double(total > 0.0 ? c[j] * c[j] / total : nan) + "\n";
        pc += "off," + format_double(0.0) + "," + format_double(total > 0.0 ? (total - c.squaredNorm()) / total : nan) +
              "\n";
        res.files.push_back({"pc_error_" + stem + ".csv", pc});
        entry["deviation"] = "deviation_" + stem + ".csv";
        entry["max_rel_dev"] = worst;
        entry["final_rel_dev"] = run.rel_dev.back();
      }
      runs.push_back(entry);
    }
  }
  const nlohmann::json summary = {{"command", "simulate"},
                                  {"model", {{"type", detail::model_name(cfg.model.type)}, {"dim", model.field.dim()}}},
                                  {"n_times", cfg.sampler.n_times},
                                  {"rk4_substeps", cfg.sampler.rk4_substeps},
                                  {"runs", runs}};
  res.files.push_back({"summary.json", detail::dump_json(summary)});
  return res;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeResult {
  std::vector<GeometryReport> reports;
  std::vector<std::string> warnings;
  OutputFiles files;
};

/// Dumps without their own alpha^2 record use `schedule` for the rotation residual.
inline AnalyzeResult run_analyze(const std::vector<std::string>& inputs, const NoiseSchedule& schedule,
                                 bool center_spectrum = true, unsigned threads = 1) {
  if (inputs.empty()) throw ConfigError("analyze.inputs", "no trajectory dumps given");
  std::vector<std::vector<GeometryReport>> per(inputs.size());
  std::vector<std::vector<std::string>> warn(inputs.size());
  parallel_for(inputs.size(), threads, [&](std::size_t i) {
    const std::filesystem::path p(inputs[i]);
    const Trajectory traj = load_trajectory(p, &warn[i]);
    per[i] = analyze_trajectory(traj, &schedule, p.filename().string(), center_spectrum);
  });
  AnalyzeResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    res.reports.insert(res.reports.end(), per[i].begin(), per[i].end());
    res.warnings.insert(res.warnings.end(), warn[i].begin(), warn[i].end());
  }
  res.files.push_back({"geometry.csv", geometry_csv(res.reports)});
  res.files.push_back({"geometry.json", detail::dump_json(geometry_json(res.reports))});
  return res;
}

// ---------------------------------------------------------------------------
// perturb

struct PerturbResult {
  /// One grid per (seed, method), seed-major.
  std::vector<std::pair<std::uint64_t, Method>> runs;
  std::vector<PerturbationGrid> grids;
  OutputFiles files;
};

namespace detail {
inline std::string direction_file_tag(const DirectionConfig& d) {
  if (d.source == DirectionSource::random_gaussian) return "random_gaussian" + std::to_string(d.seed);
  return std::string(to_string(d.source)) + std::to_string(d.index);
}
inline PerturbationSpec direction_spec(const DirectionConfig& d) {
  PerturbationSpec s;
  s.source = d.source;
  s.index = d.index;
  s.seed = d.seed;
  return s;
}
}  // namespace detail

inline PerturbResult run_perturb(const ExperimentConfig& cfg, unsigned threads = 1) {
  if (!cfg.perturb) throw ConfigError("perturb", "section required for the perturb command");
  const PerturbConfig& pc = *cfg.perturb;
  const Model model = build_model(cfg.model);
  const std::size_t n = cfg.sampler.n_times;
  const std::size_t max_pc = std::min<std::size_t>(n, static_cast<std::size_t>(model.field.dim()));
  for (std::size_t i = 0; i < pc.directions.size(); ++i) {
    const DirectionConfig& d = pc.directions[i];
    const std::string key = "perturb.directions[" + std::to_string(i) + "].index";
    switch (d.source) {
      case DirectionSource::eigvec:
        detail::require_single_mode(model, key, "eigvec");
        if (d.index > model.mode->rank())
          throw ConfigError(key, "eigenvector " + std::to_string(d.index) + " exceeds the rank " +
                                     std::to_string(model.mode->rank()));
        break;
      case DirectionSource::trajectory_pc:
      case DirectionSource::eps_pc:
        if (static_cast<std::size_t>(d.index) > max_pc)
          throw ConfigError(key, "principal component " + std::to_string(d.index) + " exceeds " +
                                     std::to_string(max_pc));
        break;
      case DirectionSource::random_gaussian:
        break;
    }
  }
  for (std::size_t s : pc.inject_steps)
    if (s >= n) throw ConfigError("perturb.inject_steps", "step " + std::to_string(s) + " outside the grid");
  for (Method m : cfg.sampler.methods)
    if (m == Method::exact) detail::require_single_mode(model, "sampler.methods", "the exact method");

  PerturbResult res;
  for (std::uint64_t seed : cfg.seeds)
    for (Method m : cfg.sampler.methods) res.runs.push_back({seed, m});
  res.grids.resize(res.runs.size());
  // runs in parallel over (seed, method); each sweep stays serial to keep the thread count bounded
  parallel_for(res.runs.size(), threads, [&](std::size_t r) {
    const auto [seed, method] = res.runs[r];
    const TimeGrid grid = TimeGrid::uniform(n);
    const Trajectory base =
        integrate(model.field, initial_noise(model.field.dim(), seed), grid, cfg.schedule, method);
    std::vector<NamedDirection> dirs;
    for (const auto& d : pc.directions) {
      const PerturbationSpec spec = detail::direction_spec(d);
      NamedDirection nd;
      nd.name = describe(spec);
      nd.direction = resolve_direction(spec, base, model.mode.get());
      nd.unit = pc.units == ScaleUnits::trajectory_std ? trajectory_std(base, nd.direction) : 1.0;
      dirs.push_back(std::move(nd));
    }
    res.grids[r] = sweep(model.field, base, dirs, pc.inject_steps, pc.K, cfg.schedule, method, 1);
  });

  std::string summary = "seed,method,direction,t_inject,K,endpoint_dev_x,endpoint_dev_xhat,final_projection\n";
  const std::size_t per_dir = pc.inject_steps.size() * pc.K.size();
  for (std::size_t r = 0; r < res.runs.size(); ++r) {
    const auto [seed, method] = res.runs[r];
    const std::string stem = std::string(to_string(method)) + "_" + detail::seed_tag(seed);
    const PerturbationGrid& g = res.grids[r];
    for (std::size_t d = 0; d < pc.directions.size(); ++d) {
      PerturbationGrid part;
      part.cells.assign(g.cells.begin() + static_cast<std::ptrdiff_t>(d * per_dir),
                        g.cells.begin() + static_cast<std::ptrdiff_t>((d + 1) * per_dir));
      res.files.push_back(
          {"perturb_" + stem + "_" + detail::direction_file_tag(pc.directions[d]) + ".csv", perturbation_csv(part)});
    }
    res.files.push_back({"perturb_" + stem + ".json", detail::dump_json(perturbation_json(g))});
    for (const auto& c : g.cells)
      summary += std::to_string(seed) + "," + std::string(to_string(method)) + "," + c.direction + "," +
                 format_double(c.t_inject) + "," + format_double(c.K) + "," + format_double(c.endpoint_deviation()) +
                 "," + format_double(c.rows.back().dev_xhat) + "," + format_double(c.final_projection()) + "\n";
  }
  res.files.push_back({"perturb_summary.csv", summary});
  return res;
}

// ---------------------------------------------------------------------------
// splitting

struct SplittingSeed {
  std::uint64_t seed = 0;
  CommitmentTrace trace;
  std::vector<double> predicted;  ///< per level, for this seed's hierarchy
  bool committed = false;         ///< nearest component constant over the final commit_fraction of steps
};

struct SplittingResult {
  std::vector<SplittingSeed> seeds;
  std::vector<double> predicted_median;  ///< per level
  std::vector<double> observed_median;
  std::size_t committed_count = 0;
  double median_switch_count = 0.0;  ///< argmax switches
  double median_split_count = 0.0;   ///< level splits
  double spacing_ratio = std::numeric_limits<double>::quiet_NaN();  ///< max/min gap between consecutive observed medians
  OutputFiles files;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// One hierarchy per seed (hierarchy seed + run seed), x_T from the run seed.
inline SplittingResult run_splitting(const ExperimentConfig& cfg, unsigned threads = 1) {
  if (cfg.model.type != ModelConfig::Type::hierarchy)
    throw ConfigError("model.type", "the splitting command needs a hierarchy model");
  const SplittingConfig sc = cfg.splitting.value_or(SplittingConfig{});
  const Method method = cfg.sampler.methods.front();
  if (method == Method::exact) throw ConfigError("sampler.methods", "the exact method needs a single-mode model");
  const int depth = cfg.model.hierarchy.depth;

  SplittingResult res;
  res.seeds.resize(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), threads, [&](std::size_t i) {
    SplittingSeed& s = res.seeds[i];
    s.seed = cfg.seeds[i];
    const Model model = build_model(cfg.model, s.seed);
    const Trajectory traj = detail::sample(model, cfg, method, s.seed);
    s.trace = detect_commitments(*model.mixture, traj, cfg.schedule);
    s.predicted = estimate_splitting_schedule(*model.mixture, cfg.schedule);
    const std::size_t steps = traj.size() - 1;
    const double tail = sc.commit_fraction * static_cast<double>(steps);
    s.committed = static_cast<double>(steps - s.trace.commit_step()) >= tail;
  });

  std::vector<double> switches;
  std::vector<double> splits;
  for (const auto& s : res.seeds) {
    res.committed_count += s.committed ? 1 : 0;
    switches.push_back(static_cast<double>(s.trace.switch_events.size()));
    splits.push_back(static_cast<double>(s.trace.split_events.size()));
  }
  res.median_switch_count = median(switches);
  res.median_split_count = median(splits);
  for (int l = 0; l < depth; ++l) {
    std::vector<double> pred;
    std::vector<double> obs;
    for (const auto& s : res.seeds) {
      pred.push_back(s.predicted[static_cast<std::size_t>(l)]);
      obs.push_back(s.trace.split_events[static_cast<std::size_t>(l)].t);
    }
    res.predicted_median.push_back(median(pred));
    res.observed_median.push_back(median(obs));
  }
  if (depth >= 3) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = 0.0;
    for (int l = 0; l + 1 < depth; ++l) {
      const double gap = res.observed_median[static_cast<std::size_t>(l)] - res.observed_median[static_cast<std::size_t>(l + 1)];
      lo = std::min(lo, gap);
      hi = std::max(hi, gap);
    }
    res.spacing_ratio = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  }

  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& s : res.seeds) {
    const std::string tag = detail::seed_tag(s.seed);
    res.files.push_back({"commitment_" + tag + ".csv", commitment_csv(s.trace)});
    res.files.push_back({"commitment_" + tag + ".json", detail::dump_json(commitment_json(s.trace))});
    std::vector<double> split_t;
    for (const auto& e : s.trace.split_events) split_t.push_back(e.t);
    per_seed.push_back({{"seed", s.seed},
                        {"committed", s.committed},
                        {"committed_component", s.trace.committed()},
                        {"commit_step", s.trace.commit_step()},
                        {"switch_events", s.trace.switch_events.size()},
                        {"split_times", split_t},
                        {"predicted", s.predicted}});
  }
  std::string table = "level,predicted_t,observed_median_t,rel_error\n";
  for (int l = 0; l < depth; ++l) {
    const double p = res.predicted_median[static_cast<std::size_t>(l)];
    const double o = res.observed_median[static_cast<std::size_t>(l)];
    table += std::to_string(l + 1) + "," + format_double(p) + "," + format_double(o) + "," +
             format_double(std::abs(o - p) / p) + "\n";
  }
  res.files.push_back({"splitting.csv", table});
  const nlohmann::json summary = {{"command", "splitting"},
                                  {"method", to_string(method)},
                                  {"n_times", cfg.sampler.n_times},
                                  {"commit_fraction", sc.commit_fraction},
                                  {"committed", res.committed_count},
                                  {"n_seeds", res.seeds.size()},
                                  {"median_switch_events", res.median_switch_count},
                                  {"median_split_events", res.median_split_count},
                                  {"predicted_median", res.predicted_median},
                                  {"observed_median", res.observed_median},
                                  {"spacing_ratio", detail::number(res.spacing_ratio)},
                                  {"seeds", per_seed}};
  res.files.push_back({"splitting_summary.json", detail::dump_json(summary)});
  return res;
}

// ---------------------------------------------------------------------------
// curves

/// psi, xi, phi on a uniform grid from t = 1 down to 0, one block per lambda.
inline OutputFiles run_curves(const ExperimentConfig& cfg) {
  const CurvesConfig cc = cfg.curves.value_or(CurvesConfig{});
  for (double l : cc.lambdas)
    if (!(l >= 0.0)) throw ConfigError("curves.lambdas", "lambda must be non-negative");
  const TimeGrid grid = TimeGrid::uniform(cc.n_times);
  std::string out = "t,lambda,psi,xi,phi\n";
  for (double lam : cc.lambdas)
    for (double t : grid.times())
      out += format_double(t) + "," + format_double(lam) + "," + format_double(psi(t, lam, cfg.schedule)) + "," +
             format_double(xi(t, lam, cfg.schedule)) + "," + format_double(phi(t, lam, cfg.schedule)) + "\n";
  return {{"curves.csv", out}};
}

}  // namespace difftraj
