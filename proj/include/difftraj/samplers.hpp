#pragma once

// Deterministic integrators for the probability-flow ODE
//   dx/dt = -beta(t) x - beta(t) s(x, t)        (g^2 = 2 beta)
// run backward from grid.front() to t = 0.
//
// euler, ab4 and rk4 step in the noise level sigma instead of t. Using
// dsigma/dt = beta alpha^2 / sigma the flow becomes
//   dx/dsigma = -sigma (x + s) / alpha^2,
// in which the off-manifold motion is linear in sigma, whereas in t it
// behaves like sqrt(t) near t = 0 and defeats every explicit scheme. The
// final step onto sigma = 0, where the right-hand side is singular, is an
// extrapolation: euler takes its ordinary step (it only evaluates at the
// left node); ab4 and rk4 extrapolate the endpoint estimate to sigma^2 = 0
// from the last four positive nodes.
//
// ddim is the exponential integrator that holds x_hat_0 fixed over a step.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/score_field.hpp"
#include "difftraj/trajectory.hpp"

namespace difftraj {

enum class Method { euler, ddim, ab4, rk4, exact };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::euler: return "euler";
    case Method::ddim: return "ddim";
    case Method::ab4: return "ab4";
    case Method::rk4: return "rk4";
    case Method::exact: return "exact";
  }
  return "?";
}

inline Method parse_method(std::string_view name) {
  if (name == "euler") return Method::euler;
  if (name == "ddim") return Method::ddim;
  if (name == "ab4" || name == "pndm") return Method::ab4;
  if (name == "rk4" || name == "rk4_reference") return Method::rk4;
  if (name == "exact") return Method::exact;
  throw ParameterError("unknown sampler method '" + std::string(name) + "'");
}

/// Abort threshold: ||x|| may not exceed this multiple of the initial norm.
inline constexpr double kDivergenceFactor = 1e6;

namespace detail {

class FlowStepper {
 public:
  FlowStepper(const ScoreField& field, const NoiseSchedule& schedule, double x_norm0)
      : field_(field), schedule_(schedule), limit_(kDivergenceFactor * std::max(x_norm0, 1e-300)) {}

  // dx/dsigma given the score at x.
  static Vector sigma_derivative(const Vector& x, const Vector& s, const NoiseLevel& l) {
    return (-l.sigma / (l.alpha * l.alpha)) * (x + s);
  }

  Vector derivative(const Vector& x, const NoiseLevel& l) const { return sigma_derivative(x, field_(x, l), l); }

  Vector derivative_at_sigma(const Vector& x, double sigma) const {
    return derivative(x, schedule_.level_at_sigma(sigma));
  }

  void guard(const Vector& x, std::size_t step) const {
    if (!x.allFinite()) throw DivergenceError(step, "non-finite state");
    if (x.norm() > limit_) throw DivergenceError(step, "state norm exceeded the divergence bound");
  }

 private:
  const ScoreField& field_;
  const NoiseSchedule& schedule_;
  double limit_;
};

// Value at 0 of the polynomial through (nodes[i], values[i]) (Neville).
inline Vector extrapolate_to_zero(const std::vector<double>& nodes, std::vector<Vector> values) {
  const std::size_t n = nodes.size();
  for (std::size_t m = 1; m < n; ++m)
    for (std::size_t i = 0; i + m < n; ++i) {
      const double xi = nodes[i];
      const double xj = nodes[i + m];
      values[i] = (xj * values[i] - xi * values[i + 1]) / (xj - xi);
    }
  return values.front();
}

// Integral over [a, b] of the Lagrange basis polynomials on `nodes` (up to 4 nodes),
// exact via 2-point Gauss-Legendre since the degree is at most 3.
inline std::vector<double> adams_weights(const std::vector<double>& nodes, double a, double b) {
  const double half = 0.5 * (b - a);
  const double mid = 0.5 * (a + b);
  const double g = 1.0 / std::sqrt(3.0);
  const std::array<double, 2> pts = {mid - half * g, mid + half * g};
  std::vector<double> w(nodes.size(), 0.0);
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    for (double p : pts) {
      double basis = 1.0;
      for (std::size_t m = 0; m < nodes.size(); ++m)
        if (m != j) basis *= (p - nodes[m]) / (nodes[j] - nodes[m]);
      w[j] += half * basis;
    }
  }
  return w;
}

}  // namespace detail

/// Integrates the probability-flow ODE of `field` from x_T at grid.front() to t = 0.
/// eps_outputs hold -sigma_t s(x_t, t) at every positive node; the t = 0 entry repeats
/// the output used for the last step.
inline Trajectory integrate(const ScoreField& field, const Vector& x_T, const TimeGrid& grid,
                            const NoiseSchedule& schedule, Method method) {
  if (x_T.size() != field.dim()) throw ParameterError("initial state dimension mismatch");
  if (!x_T.allFinite()) throw DivergenceError(0, "non-finite initial state");
  const std::size_t n = grid.size();
  std::vector<NoiseLevel> levels(n);
  for (std::size_t i = 0; i < n; ++i) levels[i] = schedule.level(grid[i]);
  if (!(levels.front().sigma > 0.0)) throw DomainError("integration must start at t > 0");

  Trajectory traj;
  traj.grid = grid;
  if (method == Method::exact) {
    if (field.mode() == nullptr) throw ParameterError("the exact method needs a single-mode field");
    traj.states = solve_trajectory(*field.mode(), x_T, grid, schedule).trajectory.states;
    std::vector<Vector> eps;
    for (std::size_t i = 0; i + 1 < n; ++i) eps.push_back(-levels[i].sigma * field(traj.states[i], levels[i]));
    eps.push_back(eps.back());
    traj.eps_outputs = std::move(eps);
    return traj;
  }

  detail::FlowStepper stepper(field, schedule, x_T.norm());
  traj.states.reserve(n);
  traj.states.push_back(x_T);
  std::vector<Vector> eps;
  eps.reserve(n);
  // derivative history for ab4: (sigma, dx/dsigma)
  std::vector<double> hist_sigma;
  std::vector<Vector> hist_deriv;

  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Vector& x = traj.states[i];
    const NoiseLevel& from = levels[i];
    const NoiseLevel& to = levels[i + 1];
    const Vector s = field(x, from);
    eps.push_back(-from.sigma * s);
    const double h = to.sigma - from.sigma;
    Vector next;
    const bool last = to.sigma == 0.0;

    if ((method == Method::rk4 || method == Method::ab4) && last) {
      // extrapolate x_hat_0 to sigma^2 = 0 from the last (up to) four positive nodes
      std::vector<double> nodes;
      std::vector<Vector> values;
      for (std::size_t k = 0; k < 4 && k <= i; ++k) {
        const std::size_t j = i - k;
        nodes.push_back(levels[j].sigma * levels[j].sigma);
        values.push_back(field.endpoint_estimate(traj.states[j], levels[j]));
      }
      next = detail::extrapolate_to_zero(nodes, std::move(values));
    } else {
      switch (method) {
        case Method::euler:
          next = x + h * detail::FlowStepper::sigma_derivative(x, s, from);
          break;
        case Method::ddim: {
          const Vector xhat = (x + (from.sigma * from.sigma) * s) / from.alpha;
          next = to.alpha * xhat + (to.sigma / from.sigma) * (x - from.alpha * xhat);
          break;
        }
        case Method::rk4:
        case Method::ab4: {
          const Vector k1 = detail::FlowStepper::sigma_derivative(x, s, from);
          const bool warmup = method == Method::rk4 || hist_sigma.size() < 3;
          if (method == Method::ab4) {
            hist_sigma.push_back(from.sigma);
            hist_deriv.push_back(k1);
            if (hist_sigma.size() > 4) {
              hist_sigma.erase(hist_sigma.begin());
              hist_deriv.erase(hist_deriv.begin());
            }
          }
          if (warmup) {
            const double mid = from.sigma + 0.5 * h;
            const Vector k2 = stepper.derivative_at_sigma(x + (0.5 * h) * k1, mid);
            const Vector k3 = stepper.derivative_at_sigma(x + (0.5 * h) * k2, mid);
            const Vector k4 = stepper.derivative(x + h * k3, to);
            next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
          } else {
            const std::vector<double> w = detail::adams_weights(hist_sigma, from.sigma, to.sigma);
            next = x;
            for (std::size_t j = 0; j < w.size(); ++j) next += w[j] * hist_deriv[j];
          }
          break;
        }
        case Method::exact:
          break;
      }
    }
    stepper.guard(next, i + 1);
    traj.states.push_back(std::move(next));
  }
  eps.push_back(eps.back());
  traj.eps_outputs = std::move(eps);
  return traj;
}

/// Fills xhat_outputs with (x_t + sigma_t^2 s(x_t, t)) / alpha_t; the t = 0 entry is x_0.
inline Trajectory record_endpoint_estimates(const ScoreField& field, Trajectory traj, const NoiseSchedule& schedule) {
  std::vector<Vector> xhat;
  xhat.reserve(traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i)
    xhat.push_back(field.endpoint_estimate(traj.states[i], schedule.level(traj.grid[i])));
  traj.xhat_outputs = std::move(xhat);
  return traj;
}

/// rk4 on a grid refined `substeps` times, sampled back at the nodes of `grid`.
inline Trajectory integrate_reference(const ScoreField& field, const Vector& x_T, const TimeGrid& grid,
                                      const NoiseSchedule& schedule, std::size_t substeps = 200) {
  if (substeps <= 1) return integrate(field, x_T, grid, schedule, Method::rk4);
  const Trajectory fine = integrate(field, x_T, grid.refined(substeps), schedule, Method::rk4);
  Trajectory traj;
  traj.grid = grid;
  std::vector<Vector> eps;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    traj.states.push_back(fine.states[i * substeps]);
    if (i + 1 < grid.size()) eps.push_back((*fine.eps_outputs)[i * substeps]);
  }
  eps.push_back(eps.back());
  traj.eps_outputs = std::move(eps);
  return traj;
}

/// Standard normal x_T for run `seed`; the stream is separate from any model seeded with the same value.
inline Vector initial_noise(Index dim, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32), 0x6e6f6973u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector x(dim);
  for (Index j = 0; j < dim; ++j) x[j] = normal(rng);
  return x;
}

}  // namespace difftraj
