#pragma once

// Experiment configuration: strict JSON with unknown-key rejection.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "difftraj/error.hpp"
#include "difftraj/mixture.hpp"
#include "difftraj/perturblab.hpp"
#include "difftraj/samplers.hpp"
#include "difftraj/schedule.hpp"

namespace difftraj {

/// Reads one JSON object, remembering which keys were consumed.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return require<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(at(key), "missing required key");
    try {
      return convert<T>(j_.at(key));
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(at(key), "has the wrong type");
    }
  }

  ConfigReader child(const std::string& key) {
    seen_.insert(key);
    return ConfigReader(j_.at(key), at(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& path() const { return path_; }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(at(key), "unknown key");
  }

 private:
  template <class T>
  static T convert(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw nlohmann::json::type_error::create(302, "number expected", &v);
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer()) throw nlohmann::json::type_error::create(302, "integer expected", &v);
      if constexpr (std::is_unsigned_v<T>)
        if (v.get<std::int64_t>() < 0) throw nlohmann::json::type_error::create(302, "non-negative expected", &v);
    }
    return v.get<T>();
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

struct ModelConfig {
  enum class Type { mode, mixture, hierarchy, file };
  Type type = Type::mode;
  // mode and flat mixture
  int dim = 64;
  int rank = 8;
  double lambda_min = 0.5;
  double lambda_max = 10.0;
  double mean_scale = 1.0;
  int components = 2;   ///< flat mixture
  double separation = 5.0;  ///< flat mixture: scale of the random component means
  std::uint64_t seed = 0;
  HierarchyParams hierarchy;
  std::string path;     ///< DTMX container for type = file
};

struct SamplerConfig {
  std::vector<Method> methods = {Method::ddim};
  std::size_t n_times = 51;
  std::size_t rk4_substeps = 200;  ///< rk4 runs on the grid refined this many times
};

struct DirectionConfig {
  DirectionSource source = DirectionSource::eigvec;
  int index = 1;
  std::uint64_t seed = 0;
};

struct PerturbConfig {
  std::vector<DirectionConfig> directions;
  std::vector<std::size_t> inject_steps = {5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
  std::vector<double> K = {-20, -15, -10, -5, 0, 5, 10, 15, 20};
  ScaleUnits units = ScaleUnits::trajectory_std;
};

struct SplittingConfig {
  double commit_fraction = 0.2;  ///< final fraction of steps over which the nearest mode must be constant
};

struct CurvesConfig {
  std::vector<double> lambdas = {0.0, 0.01, 0.1, 1.0, 10.0, 100.0};
  std::size_t n_times = 1001;
};

struct AnalyzeConfig {
  std::vector<std::string> inputs;
  bool center_spectrum = true;
};

struct ExperimentConfig {
  NoiseSchedule schedule = NoiseSchedule::linear();
  ModelConfig model;
  SamplerConfig sampler;
  std::vector<std::uint64_t> seeds = {0};
  std::optional<PerturbConfig> perturb;
  std::optional<SplittingConfig> splitting;
  std::optional<CurvesConfig> curves;
  std::optional<AnalyzeConfig> analyze;
  std::string out;
};

namespace detail {

inline NoiseSchedule parse_schedule(ConfigReader r) {
  NoiseSchedule s = NoiseSchedule::linear();
  try {
    if (r.has("alpha_sq")) {
      s = NoiseSchedule::from_alpha_sq(r.require<std::vector<double>>("alpha_sq"));
    } else {
      s = NoiseSchedule::linear(r.get<std::size_t>("n_train", 1000), r.get<double>("beta_min", 1e-4),
                                r.get<double>("beta_max", 0.02));
    }
  } catch (const ParameterError& e) {
    throw ConfigError(r.path(), e.what());
  }
  r.finish();
  return s;
}

inline ModelConfig parse_model(ConfigReader r) {
  ModelConfig m;
  const auto type = r.require<std::string>("type");
  if (type == "mode") {
    m.type = ModelConfig::Type::mode;
  } else if (type == "mixture") {
    m.type = ModelConfig::Type::mixture;
  } else if (type == "hierarchy") {
    m.type = ModelConfig::Type::hierarchy;
  } else if (type == "file") {
    m.type = ModelConfig::Type::file;
  } else {
    throw ConfigError(r.at("type"), "must be one of mode, mixture, hierarchy, file");
  }
  switch (m.type) {
    case ModelConfig::Type::mode:
    case ModelConfig::Type::mixture:
      m.dim = r.get<int>("dim", m.dim);
      m.rank = r.get<int>("rank", m.rank);
      m.lambda_min = r.get<double>("lambda_min", m.lambda_min);
      m.lambda_max = r.get<double>("lambda_max", m.lambda_max);
      m.mean_scale = r.get<double>("mean_scale", m.mean_scale);
      m.seed = r.get<std::uint64_t>("seed", m.seed);
      if (m.dim < 1) throw ConfigError(r.at("dim"), "must be positive");
      if (m.rank < 0 || m.rank > m.dim) throw ConfigError(r.at("rank"), "must lie in [0, dim]");
      if (!(m.lambda_min > 0.0 && m.lambda_min <= m.lambda_max))
        throw ConfigError(r.at("lambda_min"), "need 0 < lambda_min <= lambda_max");
      if (m.type == ModelConfig::Type::mixture) {
        m.components = r.get<int>("components", m.components);
        m.separation = r.get<double>("separation", m.separation);
        if (m.components < 1) throw ConfigError(r.at("components"), "must be positive");
        if (!(m.separation >= 0.0)) throw ConfigError(r.at("separation"), "must be non-negative");
      }
      break;
    case ModelConfig::Type::hierarchy: {
      HierarchyParams& h = m.hierarchy;
      h.dim = r.get<int>("dim", h.dim);
      h.depth = r.get<int>("depth", h.depth);
      h.branching = r.get<int>("branching", h.branching);
      h.root_scale = r.get<double>("root_scale", h.root_scale);
      h.scale_ratio = r.get<double>("scale_ratio", h.scale_ratio);
      h.seed = r.get<std::uint64_t>("seed", h.seed);
      m.dim = h.dim;
      try {
        HierarchyParams probe = h;
        probe.dim = 1;
        build_hierarchy(probe);
        if (h.dim < 1) throw ParameterError("dimension must be positive");
      } catch (const ParameterError& e) {
        throw ConfigError(r.path(), e.what());
      }
      break;
    }
    case ModelConfig::Type::file:
      m.path = r.require<std::string>("path");
      break;
  }
  r.finish();
  return m;
}

inline SamplerConfig parse_sampler(ConfigReader r) {
  SamplerConfig s;
  if (r.has("methods")) {
    s.methods.clear();
    for (const auto& name : r.require<std::vector<std::string>>("methods")) {
      try {
        s.methods.push_back(parse_method(name));
      } catch (const ParameterError& e) {
        throw ConfigError(r.at("methods"), e.what());
      }
    }
    if (s.methods.empty()) throw ConfigError(r.at("methods"), "must not be empty");
  }
  s.n_times = r.get<std::size_t>("n_times", s.n_times);
  s.rk4_substeps = r.get<std::size_t>("rk4_substeps", s.rk4_substeps);
  if (s.n_times < 2) throw ConfigError(r.at("n_times"), "must be at least 2");
  if (s.rk4_substeps < 1) throw ConfigError(r.at("rk4_substeps"), "must be at least 1");
  r.finish();
  return s;
}

inline PerturbConfig parse_perturb(ConfigReader r) {
  PerturbConfig p;
  if (!r.has("directions")) throw ConfigError(r.at("directions"), "missing required key");
  const nlohmann::json& dirs = r.raw("directions");
  if (!dirs.is_array() || dirs.empty()) throw ConfigError(r.at("directions"), "must be a non-empty array");
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    ConfigReader d(dirs[i], r.at("directions") + "[" + std::to_string(i) + "]");
    DirectionConfig dc;
    try {
      dc.source = parse_direction_source(d.require<std::string>("source"));
    } catch (const ParameterError& e) {
      throw ConfigError(d.at("source"), e.what());
    }
    if (dc.source == DirectionSource::random_gaussian) {
      dc.seed = d.require<std::uint64_t>("seed");
    } else {
      dc.index = d.require<int>("index");
      if (dc.index < 1) throw ConfigError(d.at("index"), "indices are 1-based");
    }
    d.finish();
    p.directions.push_back(dc);
  }
  p.inject_steps = r.get<std::vector<std::size_t>>("inject_steps", p.inject_steps);
  p.K = r.get<std::vector<double>>("K", p.K);
  const auto units = r.get<std::string>("units", "trajectory_std");
  if (units == "trajectory_std") p.units = ScaleUnits::trajectory_std;
  else if (units == "absolute") p.units = ScaleUnits::absolute;
  else throw ConfigError(r.at("units"), "must be trajectory_std or absolute");
  if (p.inject_steps.empty()) throw ConfigError(r.at("inject_steps"), "must not be empty");
  r.finish();
  return p;
}

inline SplittingConfig parse_splitting(ConfigReader r) {
  SplittingConfig s;
  s.commit_fraction = r.get<double>("commit_fraction", s.commit_fraction);
  if (!(s.commit_fraction > 0.0 && s.commit_fraction < 1.0)) throw ConfigError(r.at("commit_fraction"), "must lie in (0, 1)");
  r.finish();
  return s;
}

inline CurvesConfig parse_curves(ConfigReader r) {
  CurvesConfig c;
  c.lambdas = r.get<std::vector<double>>("lambdas", c.lambdas);
  c.n_times = r.get<std::size_t>("n_times", c.n_times);
  if (c.lambdas.empty()) throw ConfigError(r.at("lambdas"), "must not be empty");
  for (double l : c.lambdas)
    if (!(l >= 0.0)) throw ConfigError(r.at("lambdas"), "lambda must be non-negative");
  if (c.n_times < 2) throw ConfigError(r.at("n_times"), "must be at least 2");
  r.finish();
  return c;
}

inline AnalyzeConfig parse_analyze(ConfigReader r) {
  AnalyzeConfig a;
  a.inputs = r.get<std::vector<std::string>>("inputs", a.inputs);
  a.center_spectrum = r.get<bool>("center_spectrum", a.center_spectrum);
  r.finish();
  return a;
}

inline std::pair<int, int> line_column(const std::string& text, std::size_t byte) {
  int line = 1;
  int col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ConfigReader r(j, "");
  ExperimentConfig c;
  if (r.has("schedule")) c.schedule = detail::parse_schedule(r.child("schedule"));
  if (r.has("model")) c.model = detail::parse_model(r.child("model"));
  if (r.has("sampler")) c.sampler = detail::parse_sampler(r.child("sampler"));
  c.seeds = r.get<std::vector<std::uint64_t>>("seeds", c.seeds);
  if (c.seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
  if (r.has("perturb")) c.perturb = detail::parse_perturb(r.child("perturb"));
  if (r.has("splitting")) c.splitting = detail::parse_splitting(r.child("splitting"));
  if (r.has("curves")) c.curves = detail::parse_curves(r.child("curves"));
  if (r.has("analyze")) c.analyze = detail::parse_analyze(r.child("analyze"));
  c.out = r.get<std::string>("out", "");
  r.finish();
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& name = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_column(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ConfigError("", name + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON");
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text, path.string());
}

}  // namespace difftraj
