#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "difftraj/error.hpp"
#include "difftraj/schedule.hpp"

namespace difftraj {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Time grid plus latent states, optionally with per-step network-style
/// outputs eps = -sigma_t * s(x_t, t) and endpoint estimates.
struct Trajectory {
  TimeGrid grid = TimeGrid::uniform(2);
  std::vector<Vector> states;
  std::optional<std::vector<Vector>> eps_outputs;
  std::optional<std::vector<Vector>> xhat_outputs;
  /// alpha_t^2 per grid time; set when the trajectory came from an external dump.
  std::optional<std::vector<double>> alpha_sq;

  Index dim() const { return states.empty() ? 0 : states.front().size(); }
  std::size_t size() const { return states.size(); }
  const Vector& initial() const { return states.front(); }
  const Vector& final() const { return states.back(); }

  void validate() const {
    if (states.size() != grid.size()) throw ValidationError("state count does not match the time grid");
    const Index d = dim();
    auto check = [&](const std::vector<Vector>& series, const char* name) {
      if (series.size() != grid.size())
        throw ValidationError(std::string(name) + " length does not match the time grid");
      for (const auto& v : series) {
        if (v.size() != d) throw ValidationError(std::string(name) + " dimension mismatch");
        if (!v.allFinite()) throw ValidationError(std::string(name) + " contains non-finite entries");
      }
    };
    check(states, "states");
    if (eps_outputs) check(*eps_outputs, "eps outputs");
    if (xhat_outputs) check(*xhat_outputs, "endpoint estimates");
    if (alpha_sq && alpha_sq->size() != grid.size())
      throw ValidationError("alpha_sq length does not match the time grid");
  }
};

/// alpha_t at every grid time, from the trajectory's own record when present.
inline std::vector<double> grid_alphas(const Trajectory& traj, const NoiseSchedule* schedule) {
  std::vector<double> out(traj.grid.size());
  if (traj.alpha_sq) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt((*traj.alpha_sq)[i]);
    return out;
  }
  if (schedule == nullptr) throw ParameterError("alpha_t unavailable: no schedule and no recorded alpha_sq");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = schedule->alpha(traj.grid[i]);
  return out;
}

}  // namespace difftraj
