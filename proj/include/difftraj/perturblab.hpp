#pragma once

// Perturbation experiments: inject K * direction at one grid node, re-integrate,
// and record how the deviation evolves.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/parallel.hpp"
#include "difftraj/samplers.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/score_field.hpp"
#include "difftraj/trajectory.hpp"
#include "difftraj/trajgeom.hpp"

namespace difftraj {

enum class DirectionSource { trajectory_pc, eps_pc, eigvec, random_gaussian };

inline std::string_view to_string(DirectionSource d) {
  switch (d) {
    case DirectionSource::trajectory_pc: return "trajectory_pc";
    case DirectionSource::eps_pc: return "eps_pc";
    case DirectionSource::eigvec: return "eigvec";
    case DirectionSource::random_gaussian: return "random_gaussian";
  }
  return "?";
}

inline DirectionSource parse_direction_source(std::string_view s) {
  if (s == "trajectory_pc") return DirectionSource::trajectory_pc;
  if (s == "eps_pc") return DirectionSource::eps_pc;
  if (s == "eigvec") return DirectionSource::eigvec;
  if (s == "random_gaussian") return DirectionSource::random_gaussian;
  throw ParameterError("unknown direction source '" + std::string(s) + "'");
}

/// How K is measured: raw state units, or multiples of the base trajectory's
/// standard deviation along the direction.
enum class ScaleUnits { absolute, trajectory_std };

struct PerturbationSpec {
  DirectionSource source = DirectionSource::eigvec;
  int index = 1;            ///< 1-based component for trajectory_pc / eps_pc / eigvec
  std::uint64_t seed = 0;   ///< random_gaussian only
  double K = 1.0;
  double t_inject = 0.5;
  ScaleUnits units = ScaleUnits::absolute;
};

inline std::string describe(const PerturbationSpec& s) {
  if (s.source == DirectionSource::random_gaussian) return "random_gaussian(" + std::to_string(s.seed) + ")";
  return std::string(to_string(s.source)) + "(" + std::to_string(s.index) + ")";
}

/// Unit direction for `spec`. PCs are centred principal axes of the base trajectory's series.
inline Vector resolve_direction(const PerturbationSpec& spec, const Trajectory& base, const GaussianMode* mode = nullptr) {
  const Index d = base.dim();
  Vector v;
  switch (spec.source) {
    case DirectionSource::trajectory_pc:
    case DirectionSource::eps_pc: {
      if (spec.source == DirectionSource::eps_pc && !base.eps_outputs)
        throw ParameterError("eps_pc needs a trajectory with eps outputs");
      const auto& series = spec.source == DirectionSource::eps_pc ? *base.eps_outputs : base.states;
      const PcaResult pca = pca_spectrum(series, true);
      if (spec.index < 1 || spec.index > pca.axes.cols())
        throw ParameterError("principal component " + std::to_string(spec.index) + " not available (have " +
                             std::to_string(pca.axes.cols()) + ")");
      v = pca.axes.col(spec.index - 1);
      break;
    }
    case DirectionSource::eigvec:
      if (mode == nullptr) throw ParameterError("eigvec directions need a single-mode model");
      if (spec.index < 1 || spec.index > mode->rank())
        throw ParameterError("eigenvector " + std::to_string(spec.index) + " not available (rank " +
                             std::to_string(mode->rank()) + ")");
      return mode->axes().col(spec.index - 1);
    case DirectionSource::random_gaussian: {
      std::mt19937_64 rng(spec.seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      v.resize(d);
      for (Index j = 0; j < d; ++j) v[j] = normal(rng);
      break;
    }
  }
  const double n = v.norm();
  if (!(n > 0.0)) throw NumericalError("direction has zero norm");
  return v / n;
}

/// Standard deviation over time of the base states projected on `dir`.
inline double trajectory_std(const Trajectory& base, const Vector& dir) {
  double mean = 0.0;
  for (const auto& x : base.states) mean += dir.dot(x);
  mean /= static_cast<double>(base.size());
  double var = 0.0;
  for (const auto& x : base.states) var += (dir.dot(x) - mean) * (dir.dot(x) - mean);
  return std::sqrt(var / static_cast<double>(base.size()));
}

/// Grid index of time t (exact match up to 1e-12).
inline std::size_t grid_index(const TimeGrid& grid, double t) {
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (std::abs(grid[i] - t) <= 1e-12) return i;
  throw ParameterError("t_inject = " + std::to_string(t) + " is not a node of the base grid");
}

struct DeviationRow {
  std::size_t step = 0;  ///< base-grid index
  double t = 0.0;
  double dev_x = 0.0;
  double dev_xhat = 0.0;
  double projection = 0.0;  ///< (x~ - x) . direction
  double cosine = 1.0;      ///< cos angle between x~ and x
};

struct PerturbationCell {
  std::string direction;
  double t_inject = 0.0;
  std::size_t inject_step = 0;
  double K = 0.0;           ///< as requested
  double amplitude = 0.0;   ///< K in state units
  std::vector<DeviationRow> rows;  ///< from inject_step to the end of the grid

  double endpoint_deviation() const { return rows.back().dev_x; }
  double final_projection() const { return rows.back().projection; }
};

struct PerturbationGrid {
  std::vector<PerturbationCell> cells;
};

struct PerturbationRun {
  Trajectory perturbed;  ///< base prefix followed by the perturbed continuation
  Trajectory reference;  ///< unperturbed continuation restarted at the same node
  PerturbationCell cell;
};

/// Replaces the state at the injection node by x + amplitude * direction and integrates on with
/// `method`. Deviations are measured against the unperturbed state re-integrated from the same
/// node with the same restart, so K = 0 reproduces it bit for bit.
inline PerturbationRun run_perturbation(const ScoreField& field, const Trajectory& base, const Vector& direction,
                                        std::size_t inject_step, double amplitude, const NoiseSchedule& schedule,
                                        Method method) {
  if (inject_step >= base.size()) throw ParameterError("injection step outside the base grid");
  if (direction.size() != base.dim()) throw ParameterError("direction dimension mismatch");
  PerturbationRun run;
  run.cell.inject_step = inject_step;
  run.cell.t_inject = base.grid[inject_step];
  run.cell.amplitude = amplitude;
  const Vector start = base.states[inject_step];
  const Vector kicked = start + amplitude * direction;

  std::vector<Vector> ref_states;
  std::vector<Vector> new_states;
  if (inject_step + 1 == base.size()) {
    ref_states = {start};
    new_states = {kicked};
  } else {
    const TimeGrid tail = base.grid.tail(inject_step);
    ref_states = integrate(field, start, tail, schedule, method).states;
    new_states = integrate(field, kicked, tail, schedule, method).states;
  }
  run.perturbed.grid = base.grid;
  run.perturbed.states.assign(base.states.begin(), base.states.begin() + static_cast<std::ptrdiff_t>(inject_step));
  run.reference = run.perturbed;
  for (std::size_t j = 0; j < new_states.size(); ++j) {
    const std::size_t i = inject_step + j;
    const NoiseLevel level = schedule.level(base.grid[i]);
    const Vector diff = new_states[j] - ref_states[j];
    DeviationRow row;
    row.step = i;
    row.t = base.grid[i];
    row.dev_x = diff.norm();
    row.dev_xhat =
        (field.endpoint_estimate(new_states[j], level) - field.endpoint_estimate(ref_states[j], level)).norm();
    row.projection = diff.dot(direction);
    const double denom = new_states[j].norm() * ref_states[j].norm();
    row.cosine = denom > 0.0 ? new_states[j].dot(ref_states[j]) / denom : 1.0;
    run.cell.rows.push_back(row);
  }
  run.perturbed.states.insert(run.perturbed.states.end(), new_states.begin(), new_states.end());
  run.reference.states.insert(run.reference.states.end(), ref_states.begin(), ref_states.end());
  return run;
}

inline PerturbationRun run_perturbation(const ScoreField& field, const Trajectory& base, const PerturbationSpec& spec,
                                        const NoiseSchedule& schedule, Method method) {
  const Vector dir = resolve_direction(spec, base, field.mode());
  const double unit = spec.units == ScaleUnits::trajectory_std ? trajectory_std(base, dir) : 1.0;
  PerturbationRun run =
      run_perturbation(field, base, dir, grid_index(base.grid, spec.t_inject), spec.K * unit, schedule, method);
  run.cell.direction = describe(spec);
  run.cell.K = spec.K;
  return run;
}

struct NamedDirection {
  std::string name;
  Vector direction;  ///< unit norm
  double unit = 1.0; ///< state-space length of K = 1
};

/// Every (direction, injection step, K) cell, ordered direction-major, then step, then K.
inline PerturbationGrid sweep(const ScoreField& field, const Trajectory& base, const std::vector<NamedDirection>& dirs,
                              const std::vector<std::size_t>& inject_steps, const std::vector<double>& K_grid,
                              const NoiseSchedule& schedule, Method method, unsigned threads = 1) {
  const std::size_t n = dirs.size() * inject_steps.size() * K_grid.size();
  PerturbationGrid grid;
  grid.cells.resize(n);
  parallel_for(n, threads, [&](std::size_t idx) {
    const std::size_t k = idx % K_grid.size();
    const std::size_t s = (idx / K_grid.size()) % inject_steps.size();
    const std::size_t d = idx / (K_grid.size() * inject_steps.size());
    PerturbationRun run = run_perturbation(field, base, dirs[d].direction, inject_steps[s],
                                           K_grid[k] * dirs[d].unit, schedule, method);
    run.cell.direction = dirs[d].name;
    run.cell.K = K_grid[k];
    grid.cells[idx] = std::move(run.cell);
  });
  return grid;
}

}  // namespace difftraj
