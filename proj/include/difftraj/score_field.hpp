#pragma once

#include <functional>
#include <memory>
#include <string_view>
#include <utility>

#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/trajectory.hpp"

namespace difftraj {

enum class FieldKind { single_mode, mixture, external };

inline std::string_view to_string(FieldKind k) {
  switch (k) {
    case FieldKind::single_mode: return "single_mode";
    case FieldKind::mixture: return "mixture";
    case FieldKind::external: return "external";
  }
  return "?";
}

/// A deterministic score evaluator s(x, t) over R^D. Copies share the underlying model.
class ScoreField {
 public:
  using Evaluator = std::function<Vector(const Vector&, const NoiseLevel&)>;

  ScoreField(Index dim, FieldKind kind, Evaluator eval, std::shared_ptr<const GaussianMode> mode = nullptr)
      : dim_(dim), kind_(kind), eval_(std::move(eval)), mode_(std::move(mode)) {
    if (dim_ <= 0) throw ParameterError("score field dimension must be positive");
    if (!eval_) throw ParameterError("score field needs an evaluator");
  }

  Index dim() const noexcept { return dim_; }
  FieldKind kind() const noexcept { return kind_; }
  /// The underlying mode for single-mode fields, null otherwise.
  const GaussianMode* mode() const noexcept { return mode_.get(); }

  Vector operator()(const Vector& x, const NoiseLevel& level) const {
    if (!(level.sigma > 0.0)) throw DomainError("score fields are evaluated at t > 0 only");
    return eval_(x, level);
  }

  /// (x + sigma^2 s) / alpha; x itself at t = 0.
  Vector endpoint_estimate(const Vector& x, const NoiseLevel& level) const {
    if (level.sigma == 0.0) return x;
    return (x + (level.sigma * level.sigma) * (*this)(x, level)) / level.alpha;
  }

 private:
  Index dim_;
  FieldKind kind_;
  Evaluator eval_;
  std::shared_ptr<const GaussianMode> mode_;
};

inline ScoreField make_mode_field(std::shared_ptr<const GaussianMode> mode) {
  if (!mode) throw ParameterError("null mode");
  const GaussianMode* m = mode.get();
  return ScoreField(
      m->dim(), FieldKind::single_mode, [m](const Vector& x, const NoiseLevel& l) { return score(*m, x, l); },
      std::move(mode));
}

inline ScoreField make_mode_field(const GaussianMode& mode) {
  return make_mode_field(std::make_shared<const GaussianMode>(mode));
}

/// s = 0: the flow reduces to dx/dt = -beta x.
inline ScoreField make_zero_field(Index dim) {
  return ScoreField(dim, FieldKind::external, [dim](const Vector&, const NoiseLevel&) { return Vector::Zero(dim); });
}

}  // namespace difftraj
