#pragma once

// Gaussian-mixture score fields, responsibilities, shell statistics,
// hierarchical mixtures and mode-commitment detection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/score_field.hpp"
#include "difftraj/trajectory.hpp"

namespace difftraj {

/// Tree over mixture components. Node 0 is the root; leaves map to components.
struct Hierarchy {
  struct Node {
    int parent = -1;
    int level = 0;
    Vector center;
    std::vector<int> children;
    int component = -1;  ///< component index for leaves
  };
  std::vector<Node> nodes;
  int depth = 0;

  /// Ancestor of `node` at `level` (level <= node's level).
  int ancestor(int node, int level) const {
    while (nodes[node].level > level) node = nodes[node].parent;
    return node;
  }
  std::vector<int> nodes_at(int level) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].level == level) out.push_back(static_cast<int>(i));
    return out;
  }
  int leaf_of(int component) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].component == component) return static_cast<int>(i);
    throw ParameterError("component has no leaf in the hierarchy");
  }
};

class GaussianMixture {
 public:
  /// Weights must be positive; they are normalised to sum to one.
  GaussianMixture(std::vector<double> weights, std::vector<GaussianMode> modes,
                  std::optional<Hierarchy> hierarchy = std::nullopt)
      : weights_(std::move(weights)), modes_(std::move(modes)), hierarchy_(std::move(hierarchy)) {
    if (modes_.empty()) throw ParameterError("a mixture needs at least one component");
    if (weights_.size() != modes_.size()) throw ParameterError("one weight per component is required");
    double total = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0) || !std::isfinite(w)) throw ParameterError("mixture weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      for (double& w : weights_) w /= total;
    for (const auto& m : modes_)
      if (m.dim() != modes_.front().dim()) throw ParameterError("all components must share one dimension");
    if (hierarchy_) {
      std::size_t leaves = 0;
      for (const auto& n : hierarchy_->nodes)
        if (n.component >= 0) {
          if (static_cast<std::size_t>(n.component) >= modes_.size())
            throw ParameterError("hierarchy leaf refers to a missing component");
          ++leaves;
        }
      if (leaves != modes_.size()) throw ParameterError("hierarchy must have one leaf per component");
    }
  }

  static GaussianMixture single(GaussianMode mode) { return GaussianMixture({1.0}, {std::move(mode)}); }

  Index dim() const noexcept { return modes_.front().dim(); }
  std::size_t size() const noexcept { return modes_.size(); }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::vector<GaussianMode>& modes() const noexcept { return modes_; }
  const GaussianMode& mode(std::size_t k) const { return modes_.at(k); }
  const std::optional<Hierarchy>& hierarchy() const noexcept { return hierarchy_; }

 private:
  std::vector<double> weights_;
  std::vector<GaussianMode> modes_;
  std::optional<Hierarchy> hierarchy_;
};

namespace detail {

// log N(x; alpha mu, sigma^2 I + alpha^2 U Lambda U^T), optionally also the score.
inline double mode_log_density(const GaussianMode& mode, const Vector& x, const NoiseLevel& l, Vector* score_out) {
  const double s2 = l.sigma * l.sigma;
  const Vector y = x - l.alpha * mode.mean();
  const Index D = mode.dim();
  const Index r = mode.rank();
  double quad = y.squaredNorm();
  double logdet = static_cast<double>(D - r) * std::log(s2);
  Vector filtered;
  if (r > 0) {
    const Vector c = mode.axes().transpose() * y;
    filtered.resize(r);
    for (Index k = 0; k < r; ++k) {
      const double lam = mode.eigenvalues()[k];
      const double f = phi(l, lam);
      filtered[k] = f * c[k];
      quad -= f * c[k] * c[k];
      logdet += std::log(total_variance(l, lam));
    }
  }
  quad /= s2;
  if (score_out != nullptr) {
    Vector s = -y;
    if (r > 0) s.noalias() += mode.axes() * filtered;
    *score_out = s / s2;
  }
  return -0.5 * (static_cast<double>(D) * std::log(2.0 * std::numbers::pi) + logdet + quad);
}

inline void check_level(const NoiseLevel& l) {
  if (!(l.sigma > 0.0)) throw DomainError("mixture quantities are evaluated at t > 0 only");
}

}  // namespace detail

/// log pi_k + log N_k(x) for every component.
inline std::vector<double> log_joint(const GaussianMixture& mix, const Vector& x, const NoiseLevel& level) {
  detail::check_level(level);
  if (x.size() != mix.dim()) throw ParameterError("state dimension mismatch");
  std::vector<double> out(mix.size());
  for (std::size_t k = 0; k < mix.size(); ++k)
    out[k] = std::log(mix.weights()[k]) + detail::mode_log_density(mix.mode(k), x, level, nullptr);
  return out;
}

namespace detail {
inline std::vector<double> softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(m)) throw NumericalError("responsibilities underflowed in log space");
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - m);
    total += out[k];
  }
  for (double& v : out) v /= total;
  return out;
}
}  // namespace detail

inline std::vector<double> responsibilities(const GaussianMixture& mix, const Vector& x, const NoiseLevel& level) {
  return detail::softmax(log_joint(mix, x, level));
}

inline std::vector<double> responsibilities(const GaussianMixture& mix, const Vector& x, double t,
                                            const NoiseSchedule& schedule) {
  return responsibilities(mix, x, schedule.level(t));
}

inline Vector mixture_score(const GaussianMixture& mix, const Vector& x, const NoiseLevel& level) {
  detail::check_level(level);
  if (x.size() != mix.dim()) throw ParameterError("state dimension mismatch");
  std::vector<double> logits(mix.size());
  std::vector<Vector> scores(mix.size());
  for (std::size_t k = 0; k < mix.size(); ++k)
    logits[k] = std::log(mix.weights()[k]) + detail::mode_log_density(mix.mode(k), x, level, &scores[k]);
  const std::vector<double> resp = detail::softmax(logits);
  Vector s = Vector::Zero(x.size());
  for (std::size_t k = 0; k < mix.size(); ++k)
    if (resp[k] > 0.0) s += resp[k] * scores[k];
  return s;
}

inline Vector mixture_score(const GaussianMixture& mix, const Vector& x, double t, const NoiseSchedule& schedule) {
  if (!(t > 0.0)) throw DomainError("mixture score is singular at t = 0");
  return mixture_score(mix, x, schedule.level(t));
}

/// argmax responsibility; ties go to the lowest index.
inline std::size_t nearest_mode(const GaussianMixture& mix, const Vector& x, const NoiseLevel& level) {
  const std::vector<double> lj = log_joint(mix, x, level);
  std::size_t best = 0;
  for (std::size_t k = 1; k < lj.size(); ++k)
    if (lj[k] > lj[best]) best = k;
  return best;
}

inline std::size_t nearest_mode(const GaussianMixture& mix, const Vector& x, double t, const NoiseSchedule& schedule) {
  return nearest_mode(mix, x, schedule.level(t));
}

/// Score of the nearest component alone.
inline Vector nearest_mode_score(const GaussianMixture& mix, const Vector& x, const NoiseLevel& level) {
  return score(mix.mode(nearest_mode(mix, x, level)), x, level);
}

inline ScoreField make_mixture_field(std::shared_ptr<const GaussianMixture> mix) {
  if (!mix) throw ParameterError("null mixture");
  const Index d = mix->dim();
  if (mix->size() == 1)
    return ScoreField(d, FieldKind::mixture, [mix](const Vector& x, const NoiseLevel& l) {
      return mixture_score(*mix, x, l);
    }, std::make_shared<const GaussianMode>(mix->mode(0)));
  return ScoreField(d, FieldKind::mixture,
                    [mix](const Vector& x, const NoiseLevel& l) { return mixture_score(*mix, x, l); });
}

inline ScoreField make_mixture_field(const GaussianMixture& mix) {
  return make_mixture_field(std::make_shared<const GaussianMixture>(mix));
}

// ---------------------------------------------------------------------------
// Shell statistics

struct ShellStats {
  double peak_radius = 0.0;
  double mean_radius = 0.0;
  double radial_variance = 0.0;
};

/// Radius statistics of an isotropic Gaussian N(0, sigma^2 I_D) as quoted for high D:
/// r* = sqrt(D-1) sigma, <r> = sqrt(D) sigma, var(r) = 2 sigma^2.
inline ShellStats shell_stats(int D, double sigma) {
  if (D < 1) throw ParameterError("dimension must be at least 1");
  if (!(sigma > 0.0)) throw ParameterError("sigma must be positive");
  return {std::sqrt(static_cast<double>(D - 1)) * sigma, std::sqrt(static_cast<double>(D)) * sigma,
          2.0 * sigma * sigma};
}

/// Exact chi-distribution moments: <r> = sqrt(2) Gamma((D+1)/2) / Gamma(D/2) sigma, var = D sigma^2 - <r>^2.
inline ShellStats shell_stats_exact(int D, double sigma) {
  ShellStats s = shell_stats(D, sigma);
  const double d = static_cast<double>(D);
  s.mean_radius = std::sqrt(2.0) * std::exp(std::lgamma(0.5 * (d + 1.0)) - std::lgamma(0.5 * d)) * sigma;
  s.radial_variance = d * sigma * sigma - s.mean_radius * s.mean_radius;
  return s;
}

struct ShellSample {
  double mean_radius = 0.0;
  double radial_variance = 0.0;   ///< unbiased sample variance
  double shell_fraction = 0.0;    ///< fraction inside [sqrt(D) - sqrt(2), sqrt(D) + sqrt(2)] sigma
};

inline ShellSample shell_monte_carlo(int D, double sigma, std::size_t n_samples, std::mt19937_64& rng) {
  if (D < 1 || n_samples < 2) throw ParameterError("need D >= 1 and at least two samples");
  std::normal_distribution<double> normal(0.0, sigma);
  const double lo = (std::sqrt(static_cast<double>(D)) - std::sqrt(2.0)) * sigma;
  const double hi = (std::sqrt(static_cast<double>(D)) + std::sqrt(2.0)) * sigma;
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t inside = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    double sq = 0.0;
    for (int j = 0; j < D; ++j) {
      const double z = normal(rng);
      sq += z * z;
    }
    const double r = std::sqrt(sq);
    if (r >= lo && r <= hi) ++inside;
    const double delta = r - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (r - mean);
  }
  return {mean, m2 / static_cast<double>(n_samples - 1), static_cast<double>(inside) / static_cast<double>(n_samples)};
}

// ---------------------------------------------------------------------------
// Hierarchical mixtures

struct HierarchyParams {
  int dim = 16;
  int depth = 3;
  int branching = 2;
  double root_scale = 4.0;
  double scale_ratio = 0.5;
  std::uint64_t seed = 0;
};

/// Children sit at uniformly random directions, at distance root_scale * scale_ratio^(level-1)
/// from their parent. Leaves are isotropic with standard deviation root_scale * scale_ratio^depth
/// and equal weights.
inline GaussianMixture build_hierarchy(const HierarchyParams& p) {
  if (p.dim < 1) throw ParameterError("dimension must be positive");
  if (p.depth < 0) throw ParameterError("depth must be non-negative");
  if (p.branching < 2) throw ParameterError("branching must be at least 2");
  if (!(p.scale_ratio > 0.0 && p.scale_ratio < 1.0)) throw ParameterError("scale_ratio must lie in (0, 1)");
  if (!(p.root_scale > 0.0)) throw ParameterError("root_scale must be positive");
  if (std::pow(static_cast<double>(p.branching), p.depth) > 1e6) throw ParameterError("hierarchy too large");

  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Hierarchy h;
  h.depth = p.depth;
  h.nodes.push_back({-1, 0, Vector::Zero(p.dim), {}, -1});
  std::vector<int> frontier = {0};
  for (int level = 1; level <= p.depth; ++level) {
    const double radius = p.root_scale * std::pow(p.scale_ratio, level - 1);
    std::vector<int> next;
    for (int parent : frontier) {
      for (int b = 0; b < p.branching; ++b) {
        Vector dir(p.dim);
        for (Index j = 0; j < dir.size(); ++j) dir[j] = normal(rng);
        Hierarchy::Node node;
        node.parent = parent;
        node.level = level;
        node.center = h.nodes[parent].center + radius * dir / dir.norm();
        const int id = static_cast<int>(h.nodes.size());
        h.nodes.push_back(std::move(node));
        h.nodes[parent].children.push_back(id);
        next.push_back(id);
      }
    }
    frontier = std::move(next);
  }
  const double leaf_sd = p.root_scale * std::pow(p.scale_ratio, p.depth);
  std::vector<double> weights;
  std::vector<GaussianMode> modes;
  for (int id : frontier) {
    h.nodes[id].component = static_cast<int>(modes.size());
    modes.push_back(GaussianMode::isotropic(h.nodes[id].center, leaf_sd * leaf_sd));
    weights.push_back(1.0);
  }
  return GaussianMixture(std::move(weights), std::move(modes), std::move(h));
}

/// Mean distance between sibling node centres at each level 1..depth.
inline std::vector<double> level_distance_scales(const Hierarchy& h) {
  std::vector<double> out;
  for (int level = 1; level <= h.depth; ++level) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& node : h.nodes) {
      if (node.level != level - 1) continue;
      for (std::size_t a = 0; a < node.children.size(); ++a)
        for (std::size_t b = a + 1; b < node.children.size(); ++b) {
          total += (h.nodes[node.children[a]].center - h.nodes[node.children[b]].center).norm();
          ++count;
        }
    }
    out.push_back(count > 0 ? total / static_cast<double>(count) : 0.0);
  }
  return out;
}

/// Per-direction variance of the data mass under a level-l node, averaged over the level:
/// mean leaf variance plus the spread of its leaf centres, for l = 1..depth.
inline std::vector<double> level_branch_variances(const GaussianMixture& mix) {
  if (!mix.hierarchy()) throw ParameterError("branch variances need a hierarchical mixture");
  const Hierarchy& h = *mix.hierarchy();
  const double d = static_cast<double>(mix.dim());
  double leaf_var = 0.0;
  for (const auto& m : mix.modes()) leaf_var += m.eigenvalues().sum() / d;
  leaf_var /= static_cast<double>(mix.size());
  std::vector<double> out;
  for (int level = 1; level <= h.depth; ++level) {
    double spread = 0.0;
    std::size_t count = 0;
    for (const auto& leaf : h.nodes) {
      if (leaf.component < 0) continue;
      const int node = h.ancestor(static_cast<int>(&leaf - h.nodes.data()), level);
      spread += (leaf.center - h.nodes[node].center).squaredNorm() / d;
      ++count;
    }
    out.push_back(leaf_var + spread / static_cast<double>(count));
  }
  return out;
}

/// Predicted split time per level: the t at which a child branch, broadened by the noise,
/// has per-direction standard deviation sqrt(sigma_t^2 / alpha_t^2 + v) equal to half the
/// sibling distance d. Levels that are never resolved get t = 0; levels already resolved at
/// t = 1 get t = 1.
inline std::vector<double> estimate_splitting_schedule(const GaussianMixture& mix, const NoiseSchedule& schedule) {
  if (!mix.hierarchy()) throw ParameterError("splitting schedule needs a hierarchical mixture");
  const std::vector<double> dist = level_distance_scales(*mix.hierarchy());
  const std::vector<double> var = level_branch_variances(mix);
  const double top = schedule.sigma(1.0) / schedule.alpha(1.0);
  std::vector<double> out;
  for (std::size_t l = 0; l < dist.size(); ++l) {
    const double excess = 0.25 * dist[l] * dist[l] - var[l];
    if (!(excess > 0.0)) {
      out.push_back(0.0);
      continue;
    }
    const double ratio = std::sqrt(excess);  // sigma / alpha at the split
    if (ratio >= top) {
      out.push_back(1.0);
      continue;
    }
    out.push_back(schedule.time_at_sigma(ratio / std::sqrt(1.0 + ratio * ratio)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commitment detection

struct SwitchEvent {
  double t = 0.0;  ///< grid time at which the new nearest component is first observed
  std::size_t from = 0;
  std::size_t to = 0;
};

/// A hierarchy level resolving: the particle's branch moves from `parent` to `child`.
struct SplitEvent {
  double t = 0.0;
  int level = 0;
  int parent = 0;
  int child = 0;
};

inline constexpr double kCommitThreshold = 0.9;

struct CommitmentTrace {
  std::vector<double> times;
  std::vector<std::size_t> nearest_index;
  std::vector<SwitchEvent> switch_events;
  /// One per hierarchy level, in level order: the time after which the committed branch holds
  /// at least kCommitThreshold of its parent's responsibility (midpoint of the bracketing grid
  /// interval; grid.front() if it always did).
  std::vector<SplitEvent> split_events;

  std::size_t committed() const { return nearest_index.back(); }
  /// Index of the first step of the constant suffix.
  std::size_t commit_step() const {
    std::size_t i = nearest_index.size() - 1;
    while (i > 0 && nearest_index[i - 1] == nearest_index.back()) --i;
    return i;
  }
};

namespace detail {
// log pi_k + log N_k at t = 0, where the components are the data densities themselves.
inline std::vector<double> clean_log_joint(const GaussianMixture& mix, const Vector& x) {
  std::vector<double> lj(mix.size());
  for (std::size_t k = 0; k < mix.size(); ++k) {
    const GaussianMode& m = mix.mode(k);
    if (m.rank() < m.dim()) throw DomainError("commitment at t = 0 needs full-rank components");
    const Vector c = m.axes().transpose() * (x - m.mean());
    double quad = 0.0;
    double logdet = 0.0;
    for (Index j = 0; j < m.rank(); ++j) {
      quad += c[j] * c[j] / m.eigenvalues()[j];
      logdet += std::log(m.eigenvalues()[j]);
    }
    lj[k] = std::log(mix.weights()[k]) - 0.5 * (logdet + quad);
  }
  return lj;
}
}  // namespace detail

/// Nearest component at each grid time, its switches, and for hierarchical mixtures the
/// time each level of the committed branch resolves.
inline CommitmentTrace detect_commitments(const GaussianMixture& mix, const Trajectory& traj,
                                          const NoiseSchedule& schedule) {
  if (traj.size() < 1) throw ParameterError("empty trajectory");
  if (traj.dim() != mix.dim()) throw ParameterError("trajectory dimension mismatch");
  CommitmentTrace out;
  std::vector<std::vector<double>> resp;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const double t = traj.grid[i];
    const NoiseLevel l = schedule.level(t);
    const std::vector<double> lj =
        l.sigma > 0.0 ? log_joint(mix, traj.states[i], l) : detail::clean_log_joint(mix, traj.states[i]);
    std::size_t best = 0;
    for (std::size_t k = 1; k < lj.size(); ++k)
      if (lj[k] > lj[best]) best = k;
    out.times.push_back(t);
    out.nearest_index.push_back(best);
    if (i > 0 && out.nearest_index[i - 1] != best) out.switch_events.push_back({t, out.nearest_index[i - 1], best});
    if (mix.hierarchy()) resp.push_back(detail::softmax(lj));
  }
  if (!mix.hierarchy()) return out;

  const Hierarchy& h = *mix.hierarchy();
  const int leaf = h.leaf_of(static_cast<int>(out.committed()));
  for (int level = 1; level <= h.depth; ++level) {
    const int child = h.ancestor(leaf, level);
    const int parent = h.nodes[child].parent;
    std::vector<char> in_child(mix.size());
    std::vector<char> in_parent(mix.size());
    for (std::size_t k = 0; k < mix.size(); ++k) {
      const int lf = h.leaf_of(static_cast<int>(k));
      in_child[k] = h.ancestor(lf, level) == child;
      in_parent[k] = h.ancestor(lf, level - 1) == parent;
    }
    std::size_t first = 0;  // first step of the committed suffix
    for (std::size_t i = 0; i < traj.size(); ++i) {
      double mc = 0.0;
      double mp = 0.0;
      for (std::size_t k = 0; k < mix.size(); ++k) {
        if (in_child[k]) mc += resp[i][k];
        if (in_parent[k]) mp += resp[i][k];
      }
      if (!(mc >= kCommitThreshold * mp)) first = i + 1;
    }
    double t;
    if (first == 0) t = traj.grid.front();
    else if (first >= traj.size()) t = traj.grid.back();
    else t = 0.5 * (traj.grid[first - 1] + traj.grid[first]);
    out.split_events.push_back({t, level, parent, child});
  }
  return out;
}

}  // namespace difftraj
