#pragma once

// Variance-preserving noise schedule: alpha_t, sigma_t, beta(t) on t in [0, 1],
// discrete sampling grids, and the notation-conversion table.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "difftraj/error.hpp"

namespace difftraj {

/// alpha and sigma at one time point; the only schedule data a score field needs.
struct NoiseLevel {
  double t = 0.0;
  double alpha = 1.0;
  double sigma = 0.0;
};

namespace detail {

// log1p(u) - u, accurate for small |u|.
inline double log1p_minus_x(double u) {
  if (std::abs(u) > 0.125) return std::log1p(u) - u;
  double term = u * u;
  double sum = 0.0;
  double sign = -1.0;
  for (int k = 2; k < 60; ++k) {
    const double add = sign * term / k;
    sum += add;
    if (std::abs(add) <= 1e-18 * std::abs(sum)) break;
    term *= u;
    sign = -sign;
  }
  return sum;
}

// B_{2k} / (2k (2k-1)), k = 1..6 (Stirling series for log-gamma).
inline constexpr std::array<double, 6> kStirling = {
    1.0 / 12.0, -1.0 / 360.0, 1.0 / 1260.0, -1.0 / 1680.0, 1.0 / 1188.0, -691.0 / 360360.0};
// B_{2k} / (2k), k = 1..6 (asymptotic series for digamma).
inline constexpr std::array<double, 6> kDigamma = {
    1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0, 1.0 / 132.0, -691.0 / 32760.0};

inline constexpr double kAsymptoticThreshold = 20.0;

// lgamma(z) - lgamma(z - s) - s*log(z) for z > s >= 0, without cancellation.
inline double log_gamma_excess(double z, double s) {
  const double w = z - s;
  if (w < kAsymptoticThreshold) {
    const double m = std::ceil(kAsymptoticThreshold - w);
    double shift = s * std::log1p(m / z);
    for (int i = 0; i < static_cast<int>(m); ++i) shift -= std::log1p(s / (w + i));
    return log_gamma_excess(z + m, s) + shift;
  }
  const double u = s / w;
  double result = w * log1p_minus_x(u) - 0.5 * std::log1p(u);
  double zp = 1.0 / z;
  double wp = 1.0 / w;
  const double z2 = zp * zp;
  const double w2 = wp * wp;
  for (double c : kStirling) {
    result += c * (zp - wp);
    zp *= z2;
    wp *= w2;
  }
  return result;
}

// d/ds log_gamma_excess(z, s) = digamma(z - s) - log(z).
inline double log_gamma_excess_derivative(double z, double s) {
  double w = z - s;
  double shift = 0.0;
  while (w < kAsymptoticThreshold) {
    shift -= 1.0 / w;
    w += 1.0;
  }
  // digamma(w) - log(z) with w already shifted; log(w / z) = log1p((w - z) / z).
  double result = std::log1p((w - z) / z) - 0.5 / w;
  const double w2 = 1.0 / (w * w);
  double wp = w2;
  for (double c : kDigamma) {
    result -= c * wp;
    wp *= w2;
  }
  return result + shift;
}

}  // namespace detail

/// Discrete cumulative-product schedule mapped linearly onto t in [0, 1].
///
/// Knot i (i = 0..n_train) sits at t = i / n_train; knot 0 is the clean-data
/// endpoint with alpha^2 = 1 and knot i >= 1 carries alpha_sq[i - 1].
/// Linear-beta schedules are extended to continuous time through the exact
/// analytic continuation of prod_j (1 - beta_j), which is smooth and passes
/// through every knot. Tabulated schedules interpolate log(alpha^2) linearly
/// between knots.
class NoiseSchedule {
 public:
  enum class Kind { linear_beta, tabulated };

  static NoiseSchedule linear(std::size_t n_train = 1000, double beta_min = 1e-4,
                              double beta_max = 0.02) {
    if (n_train < 1) throw ParameterError("n_train must be at least 1");
    if (!(beta_min >= 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
      throw ParameterError("beta range must satisfy 0 <= beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.kind_ = Kind::linear_beta;
    s.beta_min_ = beta_min;
    s.beta_max_ = beta_max;
    s.alpha_sq_.resize(n_train);
    s.log_knots_.assign(n_train + 1, 0.0);
    const double slope = n_train > 1 ? (beta_max - beta_min) / static_cast<double>(n_train - 1) : 0.0;
    double prod = 1.0;
    for (std::size_t j = 0; j < n_train; ++j) {
      const double beta_j = n_train > 1 ? beta_min + slope * static_cast<double>(j) : beta_min;
      prod *= 1.0 - beta_j;
      s.alpha_sq_[j] = prod;
      s.log_knots_[j + 1] = s.log_knots_[j] + std::log1p(-beta_j);
    }
    s.slope_ = slope;
    return s;
  }

  static NoiseSchedule from_alpha_sq(std::vector<double> alpha_sq) {
    if (alpha_sq.empty()) throw ParameterError("alpha_sq must not be empty");
    double prev = 1.0;
    for (std::size_t i = 0; i < alpha_sq.size(); ++i) {
      const double a = alpha_sq[i];
      if (!(a > 0.0) || !(a < prev))
        throw ParameterError("alpha_sq must lie in (0, 1) and be strictly decreasing (index " +
                             std::to_string(i) + ")");
      prev = a;
    }
    NoiseSchedule s;
    s.kind_ = Kind::tabulated;
    s.log_knots_.assign(alpha_sq.size() + 1, 0.0);
    for (std::size_t i = 0; i < alpha_sq.size(); ++i) s.log_knots_[i + 1] = std::log(alpha_sq[i]);
    s.alpha_sq_ = std::move(alpha_sq);
    return s;
  }

  Kind kind() const noexcept { return kind_; }
  std::size_t n_train() const noexcept { return alpha_sq_.size(); }
  const std::vector<double>& alpha_sq() const noexcept { return alpha_sq_; }
  double beta_min() const noexcept { return beta_min_; }
  double beta_max() const noexcept { return beta_max_; }

  /// log(alpha_t^2).
  double log_alpha_sq(double t) const {
    check_time(t);
    const double s = t * static_cast<double>(n_train());
    if (kind_ == Kind::linear_beta) return continued_log_alpha_sq(s);
    if (t == 1.0) return log_knots_.back();
    const auto i = static_cast<std::size_t>(std::floor(s));
    const double frac = s - static_cast<double>(i);
    return log_knots_[i] + frac * (log_knots_[i + 1] - log_knots_[i]);
  }

  double alpha(double t) const { return std::exp(0.5 * log_alpha_sq(t)); }
  double sigma(double t) const { return std::sqrt(sigma_sq(t)); }
  double sigma_sq(double t) const { return -std::expm1(log_alpha_sq(t)); }

  /// beta(t) = -d/dt log alpha(t); g(t)^2 = 2 beta(t).
  double beta(double t) const {
    check_time(t);
    const double n = static_cast<double>(n_train());
    const double s = t * n;
    if (kind_ == Kind::linear_beta) return -0.5 * n * continued_log_alpha_sq_derivative(s);
    auto i = static_cast<std::size_t>(std::floor(s));
    if (i >= n_train()) i = n_train() - 1;
    return -0.5 * n * (log_knots_[i + 1] - log_knots_[i]);
  }

  double g(double t) const { return std::sqrt(2.0 * beta(t)); }

  NoiseLevel level(double t) const {
    const double l = log_alpha_sq(t);
    return {t, std::exp(0.5 * l), std::sqrt(-std::expm1(l))};
  }

  /// Inverse of sigma(t) on [0, 1]; sigma must lie in [0, sigma(1)].
  double time_at_sigma(double sigma) const {
    if (!(sigma >= 0.0)) throw DomainError("sigma must be non-negative");
    if (sigma == 0.0) return 0.0;
    const double target = std::log1p(-sigma * sigma);
    if (target < log_knots_.back() * (1.0 + 1e-14) - 1e-300)
      throw DomainError("sigma exceeds the schedule's terminal noise level");
    // knots are strictly decreasing in log
    const auto it = std::lower_bound(log_knots_.begin(), log_knots_.end(), target,
                                     [](double knot, double v) { return knot > v; });
    std::size_t hi = static_cast<std::size_t>(std::distance(log_knots_.begin(), it));
    if (hi == 0) return 0.0;
    if (hi >= log_knots_.size()) return 1.0;
    const std::size_t lo = hi - 1;
    const double n = static_cast<double>(n_train());
    const double span = log_knots_[hi] - log_knots_[lo];
    double s = static_cast<double>(lo) + (target - log_knots_[lo]) / span;
    if (kind_ == Kind::tabulated) return std::clamp(s / n, 0.0, 1.0);
    double a = static_cast<double>(lo);
    double b = static_cast<double>(hi);
    for (int iter = 0; iter < 60; ++iter) {
      const double f = continued_log_alpha_sq(s) - target;
      if (f > 0.0) a = s; else b = s;
      const double df = continued_log_alpha_sq_derivative(s);
      double next = s - f / df;
      if (!(next > a && next < b)) next = 0.5 * (a + b);
      if (std::abs(next - s) <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, s)) {
        s = next;
        break;
      }
      s = next;
    }
    return std::clamp(s / n, 0.0, 1.0);
  }

  NoiseLevel level_at_sigma(double sigma) const {
    const double t = time_at_sigma(sigma);
    return {t, std::sqrt(std::max(0.0, 1.0 - sigma * sigma)), sigma};
  }

 private:
  NoiseSchedule() = default;

  static void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time must lie in [0, 1], got " + std::to_string(t));
  }

  double continued_log_alpha_sq(double s) const {
    const double lead = std::log1p(slope_ - beta_min_);
    if (slope_ == 0.0) return s * std::log1p(-beta_min_);
    const double z = (1.0 - beta_min_) / slope_ + 1.0;
    return s * lead + detail::log_gamma_excess(z, s);
  }

  double continued_log_alpha_sq_derivative(double s) const {
    if (slope_ == 0.0) return std::log1p(-beta_min_);
    const double z = (1.0 - beta_min_) / slope_ + 1.0;
    return std::log1p(slope_ - beta_min_) + detail::log_gamma_excess_derivative(z, s);
  }

  Kind kind_ = Kind::tabulated;
  std::vector<double> alpha_sq_;
  std::vector<double> log_knots_;
  double beta_min_ = 0.0;
  double beta_max_ = 0.0;
  double slope_ = 0.0;
};

/// Strictly decreasing sampling times from t = T down to t = 0.
/// size() counts time points; n_steps() counts intervals.
class TimeGrid {
 public:
  /// `n_times` evenly spaced times from t_start down to 0 (n_times - 1 steps).
  static TimeGrid uniform(std::size_t n_times = 51, double t_start = 1.0) {
    if (n_times < 2) throw ParameterError("a time grid needs at least two points");
    if (!(t_start > 0.0 && t_start <= 1.0)) throw ParameterError("grid start must lie in (0, 1]");
    const std::size_t n_steps = n_times - 1;
    std::vector<double> times(n_times);
    for (std::size_t i = 0; i <= n_steps; ++i)
      times[i] = t_start * (static_cast<double>(n_steps - i) / static_cast<double>(n_steps));
    return TimeGrid(std::move(times));
  }

  static TimeGrid from_times(std::vector<double> times) {
    validate(times);
    return TimeGrid(std::move(times));
  }

  /// Inserts `factor - 1` evenly spaced points inside every interval; original nodes are kept exactly.
  TimeGrid refined(std::size_t factor) const {
    if (factor < 1) throw ParameterError("refinement factor must be positive");
    std::vector<double> out;
    out.reserve((times_.size() - 1) * factor + 1);
    for (std::size_t i = 0; i + 1 < times_.size(); ++i) {
      const double a = times_[i];
      const double b = times_[i + 1];
      for (std::size_t k = 0; k < factor; ++k)
        out.push_back(a + (b - a) * (static_cast<double>(k) / static_cast<double>(factor)));
    }
    out.push_back(times_.back());
    return TimeGrid(std::move(out));
  }

  /// Grid from node `first` onward (the start time becomes times[first]).
  TimeGrid tail(std::size_t first) const {
    if (first + 1 >= times_.size()) throw ParameterError("tail grid needs at least one step");
    return TimeGrid(std::vector<double>(times_.begin() + static_cast<std::ptrdiff_t>(first), times_.end()));
  }

  const std::vector<double>& times() const noexcept { return times_; }
  std::size_t size() const noexcept { return times_.size(); }
  std::size_t n_steps() const noexcept { return times_.size() - 1; }
  double operator[](std::size_t i) const { return times_[i]; }
  double front() const { return times_.front(); }
  double back() const { return times_.back(); }

  static void validate(const std::vector<double>& times) {
    if (times.size() < 2) throw ValidationError("a time grid needs at least two points");
    if (!(times.front() <= 1.0)) throw ValidationError("grid must start at or below t = 1");
    if (times.back() != 0.0) throw ValidationError("grid must end at t = 0");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (!(times[i] < times[i - 1]))
        throw ValidationError("grid times must be strictly decreasing (index " + std::to_string(i) + ")");
  }

 private:
  explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {}
  std::vector<double> times_;
};

// ---------------------------------------------------------------------------
// Notation conversion

enum class Convention { ddpm, ddim, stable_diffusion, vp_sde, ours };

inline constexpr std::array<Convention, 5> kAllConventions = {
    Convention::ddpm, Convention::ddim, Convention::stable_diffusion, Convention::vp_sde, Convention::ours};

inline std::string_view to_string(Convention c) {
  switch (c) {
    case Convention::ddpm: return "DDPM";
    case Convention::ddim: return "DDIM";
    case Convention::stable_diffusion: return "StableDiff";
    case Convention::vp_sde: return "VP-SDE";
    case Convention::ours: return "Ours";
  }
  return "?";
}

inline Convention parse_convention(std::string_view name) {
  for (Convention c : kAllConventions)
    if (name == to_string(c)) return c;
  throw ParameterError("unknown notation convention '" + std::string(name) + "'");
}

/// Forward-process parameters in one convention's notation, one entry per schedule
/// knot i = 1..n_train with unit time step:
/// p(x_i | x_0) = N(A_i x_0, B_i I) and dx = -C x dt + D dW.
struct ParameterTable {
  Convention convention = Convention::ours;
  std::vector<double> A, B, C, D;
};

inline ParameterTable convert_notation(const NoiseSchedule& schedule, Convention convention) {
  const auto& abar = schedule.alpha_sq();
  const std::size_t n = abar.size();
  ParameterTable table;
  table.convention = convention;
  table.A.resize(n);
  table.B.resize(n);
  table.C.resize(n);
  table.D.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = abar[i];
    const double a_prev = i == 0 ? 1.0 : abar[i - 1];
    const double ratio = a / a_prev;  // 1 - beta_i in DDPM terms
    const double t = static_cast<double>(i + 1) / static_cast<double>(n);
    const double beta_index = schedule.beta(t) / static_cast<double>(n);  // per unit index step
    table.A[i] = std::sqrt(a);
    table.B[i] = 1.0 - a;
    switch (convention) {
      case Convention::ddpm:
        table.C[i] = 1.0 - std::sqrt(ratio);
        table.D[i] = std::sqrt(1.0 - ratio);
        break;
      case Convention::ddim:
        table.C[i] = 1.0 - std::sqrt(ratio);
        table.D[i] = std::sqrt(1.0 - ratio);
        break;
      case Convention::stable_diffusion: {
        const double alpha_ratio = std::sqrt(ratio);
        table.C[i] = 1.0 - alpha_ratio;
        table.D[i] = std::sqrt(std::max(0.0, (1.0 - a) - ratio * (1.0 - a_prev)));
        break;
      }
      case Convention::vp_sde:
      case Convention::ours:
        table.C[i] = beta_index;
        table.D[i] = std::sqrt(2.0 * beta_index);
        break;
    }
  }
  return table;
}

namespace detail {
// The double c with sqrt(c) == A and 1 - c == B closest to A*A.
inline double recover_alpha_sq(double A, double B) {
  const double guess = A * A;
  double best = guess;
  int best_score = -1;
  double c = guess;
  for (int k = 0; k < 4; ++k) c = std::nextafter(c, 0.0);
  for (int k = 0; k < 9; ++k) {
    const int score = (std::sqrt(c) == A ? 1 : 0) + (1.0 - c == B ? 2 : 0);
    if (score > best_score || (score == best_score && std::abs(c - guess) < std::abs(best - guess))) {
      best = c;
      best_score = score;
    }
    c = std::nextafter(c, 2.0);
  }
  return best;
}
}  // namespace detail

/// Recovers the discrete alpha_t^2 sequence from a table in any convention.
inline std::vector<double> alpha_sq_from_table(const ParameterTable& table) {
  if (table.A.size() != table.B.size()) throw ParameterError("table columns differ in length");
  std::vector<double> out(table.A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::recover_alpha_sq(table.A[i], table.B[i]);
  return out;
}

/// Re-expresses a table in the "Ours" convention.
inline ParameterTable to_ours(const ParameterTable& table) {
  return convert_notation(NoiseSchedule::from_alpha_sq(alpha_sq_from_table(table)), Convention::ours);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json schedule_to_json(const NoiseSchedule& s) {
  if (s.kind() == NoiseSchedule::Kind::linear_beta)
    return {{"n_train", s.n_train()}, {"beta_min", s.beta_min()}, {"beta_max", s.beta_max()}};
  return {{"alpha_sq", s.alpha_sq()}};
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParameterError("schedule must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (key != "n_train" && key != "beta_min" && key != "beta_max" && key != "alpha_sq")
      throw ParameterError("unknown schedule key '" + key + "'");
  if (j.contains("alpha_sq")) {
    if (j.size() != 1) throw ParameterError("alpha_sq schedules take no other keys");
    return NoiseSchedule::from_alpha_sq(j.at("alpha_sq").get<std::vector<double>>());
  }
  return NoiseSchedule::linear(j.value("n_train", std::size_t{1000}), j.value("beta_min", 1e-4),
                               j.value("beta_max", 0.02));
}

}  // namespace difftraj
