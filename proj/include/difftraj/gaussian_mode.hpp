#pragma once

// Single Gaussian mode N(mu, U diag(lambda) U^T): exact score, closed-form
// probability-flow trajectory, endpoint estimate, the scalar response
// functions psi / xi / phi, rotation decomposition and perturbation transport.
//
// All algebra goes through the (U, lambda) factors; a D x D covariance is never formed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difftraj/error.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/trajectory.hpp"

namespace difftraj {

class GaussianMode {
 public:
  GaussianMode(Vector mu, Matrix axes, Vector lambda) : mu_(std::move(mu)), U_(std::move(axes)), lambda_(std::move(lambda)) {
    if (mu_.size() == 0) throw ParameterError("mode dimension must be positive");
    if (U_.rows() != mu_.size() && U_.cols() != 0) throw ParameterError("axes must have D rows");
    if (U_.cols() == 0) U_.resize(mu_.size(), 0);
    if (U_.cols() != lambda_.size()) throw ParameterError("one eigenvalue per axis required");
    if (U_.cols() > mu_.size()) throw ParameterError("rank cannot exceed dimension");
    for (Index k = 0; k < lambda_.size(); ++k)
      if (!(lambda_[k] > 0.0) || !std::isfinite(lambda_[k]))
        throw ParameterError("eigenvalues must be positive and finite");
    if (U_.cols() > 0) {
      const Matrix gram = U_.transpose() * U_;
      const double err = (gram - Matrix::Identity(U_.cols(), U_.cols())).cwiseAbs().maxCoeff();
      if (err > 1e-10) throw ParameterError("axes must be orthonormal (max |U^T U - I| = " + std::to_string(err) + ")");
    }
  }

  /// Point mass at mu (rank 0).
  static GaussianMode delta(Vector mu) {
    const Index d = mu.size();
    return GaussianMode(std::move(mu), Matrix(d, 0), Vector(0));
  }

  /// Isotropic N(mu, variance I).
  static GaussianMode isotropic(Vector mu, double variance) {
    const Index d = mu.size();
    return GaussianMode(std::move(mu), Matrix::Identity(d, d), Vector::Constant(d, variance));
  }

  Index dim() const noexcept { return mu_.size(); }
  Index rank() const noexcept { return U_.cols(); }
  const Vector& mean() const noexcept { return mu_; }
  const Matrix& axes() const noexcept { return U_; }
  const Vector& eigenvalues() const noexcept { return lambda_; }

  /// Dense covariance; for tests and small D only.
  Matrix dense_covariance() const { return U_ * lambda_.asDiagonal() * U_.transpose(); }

 private:
  Vector mu_;
  Matrix U_;
  Vector lambda_;
};

/// Random mode with orthonormal axes (QR of a Gaussian matrix), log-uniform
/// eigenvalues sorted in descending order and a Gaussian mean.
template <class Rng>
GaussianMode random_mode(Index dim, Index rank, Rng& rng, double lambda_min = 0.5, double lambda_max = 10.0,
                         double mean_scale = 1.0) {
  if (rank > dim || rank < 0) throw ParameterError("rank must lie in [0, dim]");
  if (!(lambda_min > 0.0 && lambda_min <= lambda_max)) throw ParameterError("invalid eigenvalue range");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Vector mu(dim);
  for (Index i = 0; i < dim; ++i) mu[i] = mean_scale * normal(rng);
  Matrix g(dim, rank);
  for (Index j = 0; j < rank; ++j)
    for (Index i = 0; i < dim; ++i) g(i, j) = normal(rng);
  Matrix U = Matrix::Identity(dim, rank);
  if (rank > 0) U = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(dim, rank);
  std::vector<double> lam(static_cast<std::size_t>(rank));
  const double lo = std::log(lambda_min);
  const double hi = std::log(lambda_max);
  for (auto& l : lam) l = std::exp(lo + (hi - lo) * uniform(rng));
  std::sort(lam.begin(), lam.end(), std::greater<>());
  return GaussianMode(std::move(mu), std::move(U), Eigen::Map<Vector>(lam.data(), rank));
}

// ---------------------------------------------------------------------------
// Scalar response functions

namespace detail {
inline void check_lambda(double lam) {
  if (!(lam >= 0.0)) throw ParameterError("lambda must be non-negative");
}
inline double total_variance(const NoiseLevel& l, double lam) { return l.sigma * l.sigma + lam * l.alpha * l.alpha; }
}  // namespace detail

/// Growth factor of the state coefficient along an axis of variance lam, from `start` to `at`.
inline double psi(const NoiseLevel& at, const NoiseLevel& start, double lam) {
  detail::check_lambda(lam);
  return std::sqrt(detail::total_variance(at, lam) / detail::total_variance(start, lam));
}

/// Endpoint-estimate coefficient along an axis of variance lam (relative to c_k at `start`).
inline double xi(const NoiseLevel& at, const NoiseLevel& start, double lam) {
  detail::check_lambda(lam);
  if (lam == 0.0) return 0.0;
  return at.alpha * lam / std::sqrt(detail::total_variance(at, lam) * detail::total_variance(start, lam));
}

/// Diagonal of the Woodbury filter: alpha^2 lam / (alpha^2 lam + sigma^2).
inline double phi(const NoiseLevel& at, double lam) {
  detail::check_lambda(lam);
  if (lam == 0.0) return 0.0;
  const double s = at.alpha * at.alpha * lam;
  return s / (s + at.sigma * at.sigma);
}

namespace detail {
inline void check_times(double t, double T) {
  if (!(t >= 0.0 && T <= 1.0)) throw DomainError("times must lie in [0, 1]");
  if (t > T) throw OrderingError("t must not exceed the start time T");
}
}  // namespace detail

inline double psi(double t, double lam, const NoiseSchedule& schedule, double T = 1.0) {
  detail::check_times(t, T);
  return psi(schedule.level(t), schedule.level(T), lam);
}

inline double xi(double t, double lam, const NoiseSchedule& schedule, double T = 1.0) {
  detail::check_times(t, T);
  return xi(schedule.level(t), schedule.level(T), lam);
}

inline double phi(double t, double lam, const NoiseSchedule& schedule) { return phi(schedule.level(t), lam); }

// ---------------------------------------------------------------------------
// Score and endpoint estimate

/// Score of N(alpha mu, sigma^2 I + alpha^2 Sigma) at x, via the Woodbury form.
inline Vector score(const GaussianMode& mode, const Vector& x, const NoiseLevel& level) {
  if (!(level.sigma > 0.0))
    throw DomainError("score is singular at t = 0; use the t -> 0 limit operations instead");
  const Vector y = x - level.alpha * mode.mean();
  Vector s = -y;
  if (mode.rank() > 0) {
    const Vector c = mode.axes().transpose() * y;
    Vector filtered(c.size());
    for (Index k = 0; k < c.size(); ++k) filtered[k] = phi(level, mode.eigenvalues()[k]) * c[k];
    s.noalias() += mode.axes() * filtered;
  }
  return s / (level.sigma * level.sigma);
}

inline Vector score(const GaussianMode& mode, const Vector& x, double t, const NoiseSchedule& schedule) {
  if (!(t > 0.0)) throw DomainError("score is singular at t = 0; use the t -> 0 limit operations instead");
  return score(mode, x, schedule.level(t));
}

/// x_hat_0 = mu + (1/alpha) U Lambda~ U^T (x - alpha mu); equals x at t = 0.
inline Vector endpoint_estimate(const GaussianMode& mode, const Vector& x, const NoiseLevel& level) {
  if (level.sigma == 0.0) return x;
  Vector out = mode.mean();
  if (mode.rank() > 0) {
    const Vector c = mode.axes().transpose() * (x - level.alpha * mode.mean());
    Vector filtered(c.size());
    for (Index k = 0; k < c.size(); ++k) {
      const double lam = mode.eigenvalues()[k];
      filtered[k] = level.alpha * lam / detail::total_variance(level, lam) * c[k];
    }
    out.noalias() += mode.axes() * filtered;
  }
  return out;
}

inline Vector endpoint_estimate(const GaussianMode& mode, const Vector& x, double t, const NoiseSchedule& schedule) {
  return endpoint_estimate(mode, x, schedule.level(t));
}

// ---------------------------------------------------------------------------
// State decomposition and the closed-form trajectory

/// x = alpha_t mu + y_perp + sum_k c_k u_k.
struct ModeState {
  double t = 0.0;
  Vector x;
  Vector y_perp;
  Vector c;
};

inline ModeState decompose(const GaussianMode& mode, const Vector& x, const NoiseLevel& level) {
  ModeState st;
  st.t = level.t;
  st.x = x;
  const Vector y = x - level.alpha * mode.mean();
  st.c = mode.axes().transpose() * y;
  st.y_perp = y - mode.axes() * st.c;
  return st;
}

struct AnalyticSolution {
  Trajectory trajectory;          ///< states and endpoint estimates on the grid
  std::vector<double> perp_norms; ///< ||y_perp(t)||
  std::vector<Vector> coefficients; ///< c_k(t)
};

/// Exact solution of the probability-flow ODE for one mode, starting at grid.front().
inline AnalyticSolution solve_trajectory(const GaussianMode& mode, const Vector& x_T, const TimeGrid& grid,
                                         const NoiseSchedule& schedule) {
  if (x_T.size() != mode.dim()) throw ParameterError("initial state dimension mismatch");
  if (!x_T.allFinite()) throw ParameterError("initial state must be finite");
  const NoiseLevel start = schedule.level(grid.front());
  if (!(start.sigma > 0.0)) throw DomainError("trajectory must start at t > 0");
  const ModeState init = decompose(mode, x_T, start);
  const double perp_norm_T = init.y_perp.norm();
  const Vector& lam = mode.eigenvalues();

  AnalyticSolution sol;
  sol.trajectory.grid = grid;
  sol.trajectory.states.reserve(grid.size());
  std::vector<Vector> xhat;
  xhat.reserve(grid.size());
  for (double t : grid.times()) {
    const NoiseLevel at = schedule.level(t);
    Vector c(mode.rank());
    Vector xc(mode.rank());
    for (Index k = 0; k < mode.rank(); ++k) {
      c[k] = psi(at, start, lam[k]) * init.c[k];
      xc[k] = xi(at, start, lam[k]) * init.c[k];
    }
    const double decay = at.sigma / start.sigma;  // psi(t, 0)
    Vector x = at.alpha * mode.mean() + decay * init.y_perp;
    x.noalias() += mode.axes() * c;
    Vector xh = mode.mean();
    xh.noalias() += mode.axes() * xc;
    sol.trajectory.states.push_back(std::move(x));
    xhat.push_back(std::move(xh));
    sol.perp_norms.push_back(decay * perp_norm_T);
    sol.coefficients.push_back(std::move(c));
  }
  sol.trajectory.xhat_outputs = std::move(xhat);
  return sol;
}

/// dx/dt of the closed-form trajectory at 0 < t < T (T = start of dynamics).
inline Vector tangent(const GaussianMode& mode, const Vector& x_T, double t, const NoiseSchedule& schedule,
                      double T = 1.0) {
  if (!(t > 0.0 && t < T)) throw DomainError("tangent is defined for 0 < t < T only");
  const NoiseLevel at = schedule.level(t);
  const NoiseLevel start = schedule.level(T);
  const double beta = schedule.beta(t);
  const ModeState init = decompose(mode, x_T, start);
  const double a2b = at.alpha * at.alpha * beta;
  Vector v = -at.alpha * beta * mode.mean() + (a2b / (start.sigma * at.sigma)) * init.y_perp;
  if (mode.rank() > 0) {
    Vector cdot(mode.rank());
    for (Index k = 0; k < mode.rank(); ++k) {
      const double lam = mode.eigenvalues()[k];
      cdot[k] = -init.c[k] * (lam - 1.0) * a2b /
                std::sqrt(detail::total_variance(start, lam) * detail::total_variance(at, lam));
    }
    v.noalias() += mode.axes() * cdot;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Rotation decomposition x_t = K_t x_0 + L_t x_T + R(t)

enum class RotationVariant {
  start_consistent,  ///< L = sigma_t / sigma_T, K = alpha_t - alpha_T L (exact for any alpha_T)
  zero_start,        ///< K = alpha_t, L = sqrt(1 - alpha_t^2) (the alpha_T = 0 simplification)
};

inline void rotation_coefficients(double alpha_t, double alpha_T, RotationVariant variant, double& K, double& L) {
  const double sig_t = std::sqrt(std::max(0.0, 1.0 - alpha_t * alpha_t));
  if (variant == RotationVariant::zero_start) {
    K = alpha_t;
    L = sig_t;
    return;
  }
  const double sig_T = std::sqrt(std::max(0.0, 1.0 - alpha_T * alpha_T));
  L = sig_t / sig_T;
  K = alpha_t - alpha_T * L;
}

/// Per-axis remainder factor multiplying c_k(T) u_k for the start-consistent variant:
/// psi(t, lam) - L_t - K_t psi(0, lam), all normalised at alpha_T.
inline double rotation_remainder_factor(double alpha_t, double alpha_T, double lam) {
  const double n_t = 1.0 + (lam - 1.0) * alpha_t * alpha_t;
  const double n_T = 1.0 + (lam - 1.0) * alpha_T * alpha_T;
  double K = 0.0;
  double L = 0.0;
  rotation_coefficients(alpha_t, alpha_T, RotationVariant::start_consistent, K, L);
  return std::sqrt(n_t / n_T) - L - K * std::sqrt(lam / n_T);
}

struct RotationDecomposition {
  std::vector<double> x0_coeff;   ///< K_t
  std::vector<double> xT_coeff;   ///< L_t
  std::vector<Vector> remainders; ///< R(t)
  std::vector<double> remainder_norms;
  bool degenerate = false;        ///< x_0 and x_T (nearly) parallel
};

namespace detail {
inline bool endpoints_degenerate(const Vector& x0, const Vector& xT) {
  const double n0 = x0.norm();
  const double nT = xT.norm();
  if (n0 == 0.0 || nT == 0.0) return true;
  return std::abs(x0.dot(xT)) / (n0 * nT) > 1.0 - 1e-12;
}
}  // namespace detail

/// Remainder measured directly from a trajectory's states and its endpoints.
inline RotationDecomposition rotation_decompose(const Trajectory& traj, const NoiseSchedule* schedule,
                                                RotationVariant variant = RotationVariant::start_consistent) {
  if (traj.size() < 2) throw ParameterError("rotation decomposition needs both endpoints");
  const std::vector<double> alphas = grid_alphas(traj, schedule);
  const Vector& x0 = traj.final();
  const Vector& xT = traj.initial();
  RotationDecomposition out;
  out.degenerate = detail::endpoints_degenerate(x0, xT);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    double K = 0.0;
    double L = 0.0;
    rotation_coefficients(alphas[i], alphas.front(), variant, K, L);
    Vector r = traj.states[i] - K * x0 - L * xT;
    out.x0_coeff.push_back(K);
    out.xT_coeff.push_back(L);
    out.remainder_norms.push_back(r.norm());
    out.remainders.push_back(std::move(r));
  }
  return out;
}

/// Remainder computed from the mode's (lambda_k, c_k(T)) without integrating.
inline RotationDecomposition rotation_decompose(const GaussianMode& mode, const Vector& x_T, const TimeGrid& grid,
                                                const NoiseSchedule& schedule,
                                                RotationVariant variant = RotationVariant::start_consistent) {
  const NoiseLevel start = schedule.level(grid.front());
  const ModeState init = decompose(mode, x_T, start);
  const Vector& lam = mode.eigenvalues();
  RotationDecomposition out;
  Vector x0 = mode.mean();
  {
    Vector c0(mode.rank());
    for (Index k = 0; k < mode.rank(); ++k) c0[k] = psi(NoiseLevel{0.0, 1.0, 0.0}, start, lam[k]) * init.c[k];
    x0.noalias() += mode.axes() * c0;
  }
  out.degenerate = detail::endpoints_degenerate(x0, x_T);
  for (double t : grid.times()) {
    const NoiseLevel at = schedule.level(t);
    double K = 0.0;
    double L = 0.0;
    rotation_coefficients(at.alpha, start.alpha, variant, K, L);
    Vector coeff(mode.rank());
    for (Index k = 0; k < mode.rank(); ++k) {
      const double psi_t = psi(at, start, lam[k]);
      const double psi_0 = psi(NoiseLevel{0.0, 1.0, 0.0}, start, lam[k]);
      coeff[k] = (psi_t - L - K * psi_0) * init.c[k];
    }
    Vector r = mode.axes() * coeff;
    if (variant == RotationVariant::zero_start) {
      // mu and y_perp no longer cancel once alpha_T != 0
      r += (at.alpha - K - L * start.alpha) * mode.mean() + (at.sigma / start.sigma - L) * init.y_perp;
    }
    out.x0_coeff.push_back(K);
    out.xT_coeff.push_back(L);
    out.remainder_norms.push_back(r.norm());
    out.remainders.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation transport

struct PropagatedPerturbation {
  Vector delta_y_perp;
  Vector delta_c;
  Vector delta_xhat;
};

/// Transports a perturbation injected at t_inject to t_eval <= t_inject.
inline PropagatedPerturbation perturb_propagate(const GaussianMode& mode, const Vector& delta_y_perp,
                                                const Vector& delta_c, double t_inject, double t_eval,
                                                const NoiseSchedule& schedule) {
  if (t_eval > t_inject) throw OrderingError("t_eval must not exceed t_inject");
  if (!(t_eval >= 0.0 && t_inject <= 1.0)) throw DomainError("times must lie in [0, 1]");
  if (delta_y_perp.size() != mode.dim()) throw ParameterError("delta_y_perp dimension mismatch");
  if (delta_c.size() != mode.rank()) throw ParameterError("delta_c needs one entry per axis");
  if (mode.rank() > 0) {
    const double leak = (mode.axes().transpose() * delta_y_perp).norm();
    if (leak > 1e-8 * std::max(1.0, delta_y_perp.norm()))
      throw ParameterError("delta_y_perp must be orthogonal to the mode's axes");
  }
  const NoiseLevel inj = schedule.level(t_inject);
  const NoiseLevel ev = schedule.level(t_eval);
  const Vector& lam = mode.eigenvalues();
  PropagatedPerturbation out;
  if (t_eval == t_inject) {
    out.delta_y_perp = delta_y_perp;
    out.delta_c = delta_c;
  } else {
    out.delta_y_perp = (ev.sigma / inj.sigma) * delta_y_perp;
    out.delta_c.resize(mode.rank());
    for (Index k = 0; k < mode.rank(); ++k) out.delta_c[k] = psi(ev, inj, lam[k]) * delta_c[k];
  }
  Vector dx(mode.rank());
  for (Index k = 0; k < mode.rank(); ++k) dx[k] = xi(ev, inj, lam[k]) * delta_c[k];
  out.delta_xhat = mode.axes() * dx;
  return out;
}

}  // namespace difftraj
