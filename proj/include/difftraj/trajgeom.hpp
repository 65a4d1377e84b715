#pragma once

// Trajectory geometry: PCA spectra, effective dimensionality and residual variance
// of the top-2 PC, endpoint-plane and rotation approximations.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/SVD>

#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/trajectory.hpp"

namespace difftraj {

enum class SeriesTag { states, differences, eps_outputs };

inline std::string_view to_string(SeriesTag s) {
  switch (s) {
    case SeriesTag::states: return "states";
    case SeriesTag::differences: return "differences";
    case SeriesTag::eps_outputs: return "eps_outputs";
  }
  return "?";
}

inline SeriesTag parse_series_tag(std::string_view s) {
  if (s == "states") return SeriesTag::states;
  if (s == "differences") return SeriesTag::differences;
  if (s == "eps_outputs" || s == "eps") return SeriesTag::eps_outputs;
  throw ParameterError("unknown series tag '" + std::string(s) + "'");
}

enum class Approximation { top2_pc, x0xT_plane, rotation };

struct PcaResult {
  Vector ratios;  ///< explained-variance ratios, descending
  Matrix axes;    ///< D x k principal axes, matching ratios
  Vector mean;    ///< subtracted mean (zero when uncentered)
};

/// Rows of the returned matrix are the series vectors.
inline Matrix stack_rows(const std::vector<Vector>& series) {
  if (series.empty()) throw ParameterError("empty series");
  Matrix m(static_cast<Index>(series.size()), series.front().size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i].size() != m.cols()) throw ParameterError("series vectors differ in dimension");
    m.row(static_cast<Index>(i)) = series[i].transpose();
  }
  return m;
}

inline PcaResult pca_spectrum(const std::vector<Vector>& series, bool center) {
  if (series.size() < 2) throw ParameterError("PCA needs at least two vectors");
  Matrix X = stack_rows(series);
  PcaResult out;
  out.mean = Vector::Zero(X.cols());
  if (center) {
    out.mean = X.colwise().mean().transpose();
    X.rowwise() -= out.mean.transpose();
  }
  Eigen::BDCSVD<Matrix> svd(X, Eigen::ComputeThinV);
  const Vector sq = svd.singularValues().array().square();
  const double total = sq.sum();
  if (!(total > 0.0)) throw DomainError("series has zero variance");
  out.ratios = sq / total;
  out.axes = svd.matrixV();
  return out;
}

/// Number of leading ratios needed to reach `threshold` of the total.
inline int effective_dim(const Vector& ratios, double threshold = 0.999) {
  if (ratios.size() == 0) throw ParameterError("empty spectrum");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ParameterError("threshold must lie in (0, 1]");
  double cum = 0.0;
  for (Index k = 0; k < ratios.size(); ++k) {
    cum += ratios[k];
    if (cum >= threshold - 1e-12) return static_cast<int>(k + 1);
  }
  return static_cast<int>(ratios.size());
}

/// k (x_{i+1} - x_i) per step, with k = 1 / (t_i - t_{i+1}) unless a scale is given.
inline std::vector<Vector> difference_series(const Trajectory& traj, std::optional<double> scale = std::nullopt) {
  if (traj.size() < 2) throw ParameterError("differences need at least two states");
  std::vector<Vector> out;
  out.reserve(traj.size() - 1);
  for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
    const double k = scale ? *scale : 1.0 / (traj.grid[i] - traj.grid[i + 1]);
    out.push_back(k * (traj.states[i + 1] - traj.states[i]));
  }
  return out;
}

namespace detail {

inline double ratio_of_sums(const std::vector<Vector>& states, const std::vector<Vector>& approx) {
  double err = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    err += (states[i] - approx[i]).squaredNorm();
    total += states[i].squaredNorm();
  }
  if (!(total > 0.0)) throw DomainError("residual variance is undefined for a zero-norm trajectory");
  return err / total;
}

// Orthonormal basis of span{a, b}; vectors below 1e-12 of the larger norm are dropped.
inline Matrix plane_basis(const Vector& a, const Vector& b) {
  const double scale = std::max(a.norm(), b.norm());
  std::vector<Vector> basis;
  for (const Vector* v : {&a, &b}) {
    Vector w = *v;
    for (const auto& q : basis) w -= q.dot(w) * q;
    if (w.norm() > 1e-12 * scale) basis.push_back(w / w.norm());
  }
  Matrix Q(a.size(), static_cast<Index>(basis.size()));
  for (std::size_t j = 0; j < basis.size(); ++j) Q.col(static_cast<Index>(j)) = basis[j];
  return Q;
}

inline std::vector<Vector> project(const std::vector<Vector>& states, const Matrix& Q) {
  std::vector<Vector> out;
  out.reserve(states.size());
  for (const auto& x : states) out.push_back(Q * (Q.transpose() * x));
  return out;
}

}  // namespace detail

/// Sum_t ||x_t - approx_t||^2 / Sum_t ||x_t||^2. The rotation approximation needs alpha_t,
/// taken from the trajectory's own record or from `schedule`.
inline double residual_variance(const Trajectory& traj, Approximation approx, const NoiseSchedule* schedule = nullptr,
                                RotationVariant variant = RotationVariant::zero_start) {
  if (traj.size() < 2) throw ParameterError("residual variance needs both endpoints");
  switch (approx) {
    case Approximation::top2_pc: {
      const PcaResult pca = pca_spectrum(traj.states, false);
      const Index k = std::min<Index>(2, pca.axes.cols());
      return detail::ratio_of_sums(traj.states, detail::project(traj.states, pca.axes.leftCols(k)));
    }
    case Approximation::x0xT_plane:
      return detail::ratio_of_sums(traj.states,
                                   detail::project(traj.states, detail::plane_basis(traj.final(), traj.initial())));
    case Approximation::rotation: {
      const RotationDecomposition rot = rotation_decompose(traj, schedule, variant);
      double err = 0.0;
      double total = 0.0;
      for (std::size_t i = 0; i < traj.size(); ++i) {
        err += rot.remainder_norms[i] * rot.remainder_norms[i];
        total += traj.states[i].squaredNorm();
      }
      if (!(total > 0.0)) throw DomainError("residual variance is undefined for a zero-norm trajectory");
      return err / total;
    }
  }
  throw ParameterError("unknown approximation");
}

struct GeometryReport {
  std::string trajectory;  ///< source label (file name or run id)
  SeriesTag series = SeriesTag::states;
  Vector explained_variance_ratios;
  int effective_dim_999 = 0;
  /// Residuals are defined for the state series only; NaN otherwise.
  double residual_top2 = std::numeric_limits<double>::quiet_NaN();
  double residual_plane = std::numeric_limits<double>::quiet_NaN();
  double residual_rotation = std::numeric_limits<double>::quiet_NaN();
};

/// One report per available series of the trajectory (states, differences, eps outputs).
/// The spectrum is centred unless `center_spectrum` is false; residuals are uncentred.
inline std::vector<GeometryReport> analyze_trajectory(const Trajectory& traj, const NoiseSchedule* schedule,
                                                      const std::string& label = {}, bool center_spectrum = true) {
  traj.validate();
  std::vector<GeometryReport> out;
  auto spectrum = [&](GeometryReport& r, const std::vector<Vector>& series) {
    const PcaResult pca = pca_spectrum(series, center_spectrum);
    r.explained_variance_ratios = pca.ratios;
    r.effective_dim_999 = effective_dim(pca.ratios, 0.999);
  };
  GeometryReport states;
  states.trajectory = label;
  states.series = SeriesTag::states;
  spectrum(states, traj.states);
  states.residual_top2 = residual_variance(traj, Approximation::top2_pc);
  states.residual_plane = residual_variance(traj, Approximation::x0xT_plane);
  if (traj.alpha_sq || schedule != nullptr)
    states.residual_rotation = residual_variance(traj, Approximation::rotation, schedule);
  out.push_back(std::move(states));

  GeometryReport diff;
  diff.trajectory = label;
  diff.series = SeriesTag::differences;
  spectrum(diff, difference_series(traj));
  out.push_back(std::move(diff));

  if (traj.eps_outputs) {
    GeometryReport eps;
    eps.trajectory = label;
    eps.series = SeriesTag::eps_outputs;
    // samplers repeat the last positive-time output at t = 0; drop the copy
    std::vector<Vector> series = *traj.eps_outputs;
    if (series.size() > 2 && series.back() == series[series.size() - 2]) series.pop_back();
    spectrum(eps, series);
    out.push_back(std::move(eps));
  }
  return out;
}

}  // namespace difftraj
