#pragma once

// Binary trajectory dumps (DTRJ), the mode/mixture container (DTMX), and report writers.
//
// DTRJ layout:
//   "DTRJ" | u8 version = 1 | u32 LE header_len | header_len bytes UTF-8 JSON | payload
// header: {dim, n_steps, dtype: "f64", order: "time-major", times: [...], alpha_sq: [...]?,
//          series: {states: true, eps: bool, xhat: bool}}
// n_steps counts time points. The payload holds f64 LE blocks in the order states, eps, xhat;
// each block is time-major (n_steps rows of dim values).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "difftraj/error.hpp"
#include "difftraj/gaussian_mode.hpp"
#include "difftraj/mixture.hpp"
#include "difftraj/perturblab.hpp"
#include "difftraj/schedule.hpp"
#include "difftraj/trajectory.hpp"
#include "difftraj/trajgeom.hpp"

namespace difftraj {

namespace detail {

static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559, "IEEE-754 doubles required");

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline double get_f64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.close();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string container(std::string_view magic, const nlohmann::json& header, const std::string& payload) {
  const std::string text = header.dump();
  std::string out(magic);
  out.push_back(static_cast<char>(1));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += payload;
  return out;
}

struct Container {
  nlohmann::json header;
  const unsigned char* payload = nullptr;
  std::size_t payload_size = 0;
};

inline Container open_container(const std::string& data, std::string_view magic, const std::string& name) {
  if (data.size() < 9 || std::string_view(data.data(), 4) != magic)
    throw FormatError("'" + name + "': bad magic (expected " + std::string(magic) + ")");
  const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
  if (bytes[4] != 1) throw FormatError("'" + name + "': unsupported version " + std::to_string(bytes[4]));
  const std::uint32_t header_len = get_u32(bytes + 5);
  if (9 + static_cast<std::size_t>(header_len) > data.size())
    throw CorruptionError("'" + name + "': header needs " + std::to_string(header_len) + " bytes but only " +
                          std::to_string(data.size() - 9) + " are present");
  Container c;
  try {
    c.header = nlohmann::json::parse(data.begin() + 9, data.begin() + 9 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + name + "': header is not valid JSON (" + e.what() + ")");
  }
  if (!c.header.is_object()) throw FormatError("'" + name + "': header must be a JSON object");
  c.payload = bytes + 9 + header_len;
  c.payload_size = data.size() - 9 - header_len;
  return c;
}

template <class T>
T header_get(const nlohmann::json& h, const char* key, const std::string& name) {
  if (!h.contains(key)) throw FormatError("'" + name + "': header is missing '" + key + "'");
  try {
    return h.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("'" + name + "': header field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trajectory dumps

inline std::string encode_trajectory(const Trajectory& traj) {
  traj.validate();
  const Index dim = traj.dim();
  nlohmann::json header = {{"dim", dim},
                           {"n_steps", traj.size()},
                           {"dtype", "f64"},
                           {"order", "time-major"},
                           {"times", traj.grid.times()},
                           {"series", {{"states", true}, {"eps", traj.eps_outputs.has_value()},
                                       {"xhat", traj.xhat_outputs.has_value()}}}};
  if (traj.alpha_sq) header["alpha_sq"] = *traj.alpha_sq;
  std::string payload;
  std::size_t blocks = 1 + (traj.eps_outputs ? 1 : 0) + (traj.xhat_outputs ? 1 : 0);
  payload.reserve(8 * static_cast<std::size_t>(dim) * traj.size() * blocks);
  auto put = [&](const std::vector<Vector>& series) {
    for (const auto& v : series)
      for (Index j = 0; j < dim; ++j) detail::put_f64(payload, v[j]);
  };
  put(traj.states);
  if (traj.eps_outputs) put(*traj.eps_outputs);
  if (traj.xhat_outputs) put(*traj.xhat_outputs);
  return detail::container("DTRJ", header, payload);
}

inline void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
  detail::write_file(path, encode_trajectory(traj));
}

/// Parses a dump. Unknown header keys are tolerated and reported through `warnings`.
inline Trajectory decode_trajectory(const std::string& data, const std::string& name = "<memory>",
                                    std::vector<std::string>* warnings = nullptr) {
  const detail::Container c = detail::open_container(data, "DTRJ", name);
  const nlohmann::json& h = c.header;
  static const std::set<std::string> known = {"dim", "n_steps", "dtype", "order", "times", "alpha_sq", "series"};
  for (const auto& [key, value] : h.items())
    if (!known.count(key) && warnings != nullptr) warnings->push_back("'" + name + "': ignoring unknown header key '" + key + "'");

  const auto dtype = detail::header_get<std::string>(h, "dtype", name);
  if (dtype != "f64") throw UnsupportedDtypeError("'" + name + "': dtype '" + dtype + "' is not supported (f64 only)");
  const auto order = detail::header_get<std::string>(h, "order", name);
  if (order != "time-major") throw FormatError("'" + name + "': order '" + order + "' is not supported");
  const auto dim = detail::header_get<std::int64_t>(h, "dim", name);
  const auto n = detail::header_get<std::int64_t>(h, "n_steps", name);
  if (dim <= 0 || n < 2) throw FormatError("'" + name + "': dim must be positive and n_steps at least 2");
  auto times = detail::header_get<std::vector<double>>(h, "times", name);
  if (static_cast<std::int64_t>(times.size()) != n)
    throw FormatError("'" + name + "': times has " + std::to_string(times.size()) + " entries, n_steps is " +
                      std::to_string(n));
  bool has_eps = false;
  bool has_xhat = false;
  if (h.contains("series")) {
    const auto& s = h.at("series");
    if (!s.is_object()) throw FormatError("'" + name + "': series must be an object");
    for (const auto& [key, value] : s.items()) {
      if (!value.is_boolean()) throw FormatError("'" + name + "': series flags must be booleans");
      if (key == "states") {
        if (!value.get<bool>()) throw FormatError("'" + name + "': the states series is mandatory");
      } else if (key == "eps") {
        has_eps = value.get<bool>();
      } else if (key == "xhat") {
        has_xhat = value.get<bool>();
      } else if (warnings != nullptr) {
        warnings->push_back("'" + name + "': ignoring unknown series '" + key + "'");
      }
    }
  }
  const std::size_t blocks = 1 + (has_eps ? 1 : 0) + (has_xhat ? 1 : 0);
  const std::size_t expected = 8 * static_cast<std::size_t>(dim) * static_cast<std::size_t>(n) * blocks;
  if (c.payload_size != expected)
    throw CorruptionError("'" + name + "': payload has " + std::to_string(c.payload_size) + " bytes, expected " +
                          std::to_string(expected));

  Trajectory traj;
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] < times[i - 1]))
      throw ValidationError("'" + name + "': times are not strictly decreasing at index " + std::to_string(i));
  try {
    traj.grid = TimeGrid::from_times(times);
  } catch (const ValidationError& e) {
    throw ValidationError("'" + name + "': " + e.what());
  }
  if (h.contains("alpha_sq")) {
    auto a = detail::header_get<std::vector<double>>(h, "alpha_sq", name);
    if (static_cast<std::int64_t>(a.size()) != n) throw FormatError("'" + name + "': alpha_sq length mismatch");
    traj.alpha_sq = std::move(a);
  }
  const unsigned char* p = c.payload;
  auto take = [&] {
    std::vector<Vector> series(static_cast<std::size_t>(n), Vector(dim));
    for (auto& v : series)
      for (Index j = 0; j < dim; ++j, p += 8) v[j] = detail::get_f64(p);
    return series;
  };
  traj.states = take();
  if (has_eps) traj.eps_outputs = take();
  if (has_xhat) traj.xhat_outputs = take();
  return traj;
}

inline Trajectory load_trajectory(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr) {
  return decode_trajectory(detail::read_file(path), path.string(), warnings);
}

// ---------------------------------------------------------------------------
// Model container: modes and mixtures
//
// "DTMX" | u8 1 | u32 LE header_len | JSON {kind, dim, components: [{weight, rank, lambda}],
// hierarchy?} | payload: per component mu (dim values) then U column-major (dim * rank values).

inline nlohmann::json hierarchy_to_json(const Hierarchy& h) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : h.nodes) {
    std::vector<double> center(n.center.data(), n.center.data() + n.center.size());
    nodes.push_back({{"parent", n.parent}, {"level", n.level}, {"component", n.component},
                     {"children", n.children}, {"center", center}});
  }
  return {{"depth", h.depth}, {"nodes", nodes}};
}

inline Hierarchy hierarchy_from_json(const nlohmann::json& j) {
  Hierarchy h;
  h.depth = j.at("depth").get<int>();
  for (const auto& n : j.at("nodes")) {
    Hierarchy::Node node;
    node.parent = n.at("parent").get<int>();
    node.level = n.at("level").get<int>();
    node.component = n.at("component").get<int>();
    node.children = n.at("children").get<std::vector<int>>();
    const auto c = n.at("center").get<std::vector<double>>();
    node.center = Eigen::Map<const Vector>(c.data(), static_cast<Index>(c.size()));
    h.nodes.push_back(std::move(node));
  }
  return h;
}

inline std::string encode_mixture(const GaussianMixture& mix, bool single_mode = false) {
  nlohmann::json comps = nlohmann::json::array();
  std::string payload;
  for (std::size_t k = 0; k < mix.size(); ++k) {
    const GaussianMode& m = mix.mode(k);
    const Vector& lam = m.eigenvalues();
    comps.push_back({{"weight", mix.weights()[k]}, {"rank", m.rank()},
                     {"lambda", std::vector<double>(lam.data(), lam.data() + lam.size())}});
    for (Index j = 0; j < m.dim(); ++j) detail::put_f64(payload, m.mean()[j]);
    for (Index c = 0; c < m.rank(); ++c)
      for (Index j = 0; j < m.dim(); ++j) detail::put_f64(payload, m.axes()(j, c));
  }
  nlohmann::json header = {{"kind", single_mode ? "mode" : "mixture"}, {"dim", mix.dim()}, {"components", comps}};
  if (mix.hierarchy()) header["hierarchy"] = hierarchy_to_json(*mix.hierarchy());
  return detail::container("DTMX", header, payload);
}

inline GaussianMixture decode_mixture(const std::string& data, const std::string& name = "<memory>") {
  const detail::Container c = detail::open_container(data, "DTMX", name);
  const nlohmann::json& h = c.header;
  const auto dim = detail::header_get<std::int64_t>(h, "dim", name);
  if (dim <= 0) throw FormatError("'" + name + "': dim must be positive");
  if (!h.contains("components") || !h.at("components").is_array() || h.at("components").empty())
    throw FormatError("'" + name + "': components must be a non-empty array");
  std::size_t expected = 0;
  for (const auto& comp : h.at("components")) {
    const auto rank = detail::header_get<std::int64_t>(comp, "rank", name);
    if (rank < 0 || rank > dim) throw FormatError("'" + name + "': component rank out of range");
    expected += 8 * static_cast<std::size_t>(dim) * (1 + static_cast<std::size_t>(rank));
  }
  if (c.payload_size != expected)
    throw CorruptionError("'" + name + "': payload has " + std::to_string(c.payload_size) + " bytes, expected " +
                          std::to_string(expected));
  const unsigned char* p = c.payload;
  std::vector<double> weights;
  std::vector<GaussianMode> modes;
  for (const auto& comp : h.at("components")) {
    const auto rank = comp.at("rank").get<Index>();
    const auto lam = detail::header_get<std::vector<double>>(comp, "lambda", name);
    if (static_cast<Index>(lam.size()) != rank) throw FormatError("'" + name + "': lambda length must equal rank");
    Vector mu(dim);
    for (Index j = 0; j < dim; ++j, p += 8) mu[j] = detail::get_f64(p);
    Matrix U(dim, rank);
    for (Index col = 0; col < rank; ++col)
      for (Index j = 0; j < dim; ++j, p += 8) U(j, col) = detail::get_f64(p);
    weights.push_back(detail::header_get<double>(comp, "weight", name));
    modes.emplace_back(std::move(mu), std::move(U), Eigen::Map<const Vector>(lam.data(), rank));
  }
  std::optional<Hierarchy> hier;
  if (h.contains("hierarchy")) {
    try {
      hier = hierarchy_from_json(h.at("hierarchy"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("'" + name + "': malformed hierarchy (" + e.what() + ")");
    }
  }
  return GaussianMixture(std::move(weights), std::move(modes), std::move(hier));
}

inline void save_mixture(const GaussianMixture& mix, const std::filesystem::path& path) {
  detail::write_file(path, encode_mixture(mix));
}
inline void save_mode(const GaussianMode& mode, const std::filesystem::path& path) {
  detail::write_file(path, encode_mixture(GaussianMixture::single(mode), true));
}
inline GaussianMixture load_mixture(const std::filesystem::path& path) {
  return decode_mixture(detail::read_file(path), path.string());
}
inline GaussianMode load_mode(const std::filesystem::path& path) {
  GaussianMixture mix = load_mixture(path);
  if (mix.size() != 1) throw FormatError("'" + path.string() + "' holds a mixture, not a single mode");
  return mix.mode(0);
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { csv, json };

inline ReportFormat format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return ReportFormat::csv;
  if (ext == ".json") return ReportFormat::json;
  throw ParameterError("cannot infer report format from '" + path.string() + "' (use .csv or .json)");
}

/// %.17g, with nan / inf / -inf spelled out.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {
inline nlohmann::json number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}
inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }
}  // namespace detail

inline std::string geometry_csv(const std::vector<GeometryReport>& reports) {
  std::string out = "series,top2_resid,plane_resid,rot_resid,eff_dim_999\n";
  for (const auto& r : reports) {
    const std::string tag(to_string(r.series));
    out += (r.trajectory.empty() ? tag : r.trajectory + ":" + tag) + "," + format_double(r.residual_top2) + "," +
           format_double(r.residual_plane) + "," + format_double(r.residual_rotation) + "," +
           std::to_string(r.effective_dim_999) + "\n";
  }
  return out;
}

inline nlohmann::json geometry_json(const std::vector<GeometryReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    std::vector<double> ratios(r.explained_variance_ratios.data(),
                               r.explained_variance_ratios.data() + r.explained_variance_ratios.size());
    arr.push_back({{"trajectory", r.trajectory}, {"series", to_string(r.series)},
                   {"explained_variance_ratios", ratios}, {"eff_dim_999", r.effective_dim_999},
                   {"top2_resid", detail::number(r.residual_top2)}, {"plane_resid", detail::number(r.residual_plane)},
                   {"rot_resid", detail::number(r.residual_rotation)}});
  }
  return arr;
}

inline std::vector<GeometryReport> geometry_from_json(const nlohmann::json& arr) {
  std::vector<GeometryReport> out;
  for (const auto& j : arr) {
    GeometryReport r;
    r.trajectory = j.at("trajectory").get<std::string>();
    r.series = parse_series_tag(j.at("series").get<std::string>());
    const auto ratios = j.at("explained_variance_ratios").get<std::vector<double>>();
    r.explained_variance_ratios = Eigen::Map<const Vector>(ratios.data(), static_cast<Index>(ratios.size()));
    r.effective_dim_999 = j.at("eff_dim_999").get<int>();
    r.residual_top2 = detail::number_from(j.at("top2_resid"));
    r.residual_plane = detail::number_from(j.at("plane_resid"));
    r.residual_rotation = detail::number_from(j.at("rot_resid"));
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string perturbation_csv(const PerturbationGrid& grid) {
  std::string out = "t_inject,K,step,dev_x,dev_xhat,projection\n";
  for (const auto& cell : grid.cells)
    for (const auto& row : cell.rows)
      out += format_double(cell.t_inject) + "," + format_double(cell.K) + "," + std::to_string(row.step) + "," +
             format_double(row.dev_x) + "," + format_double(row.dev_xhat) + "," + format_double(row.projection) + "\n";
  return out;
}

inline nlohmann::json perturbation_json(const PerturbationGrid& grid) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : grid.cells) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : cell.rows)
      rows.push_back({{"step", r.step}, {"t", r.t}, {"dev_x", r.dev_x}, {"dev_xhat", r.dev_xhat},
                      {"projection", r.projection}, {"cosine", r.cosine}});
    cells.push_back({{"direction", cell.direction}, {"t_inject", cell.t_inject}, {"inject_step", cell.inject_step},
                     {"K", cell.K}, {"amplitude", cell.amplitude}, {"rows", rows}});
  }
  return {{"cells", cells}};
}

inline PerturbationGrid perturbation_from_json(const nlohmann::json& j) {
  PerturbationGrid grid;
  for (const auto& c : j.at("cells")) {
    PerturbationCell cell;
    cell.direction = c.at("direction").get<std::string>();
    cell.t_inject = c.at("t_inject").get<double>();
    cell.inject_step = c.at("inject_step").get<std::size_t>();
    cell.K = c.at("K").get<double>();
    cell.amplitude = c.at("amplitude").get<double>();
    for (const auto& r : c.at("rows"))
      cell.rows.push_back({r.at("step").get<std::size_t>(), r.at("t").get<double>(), r.at("dev_x").get<double>(),
                           r.at("dev_xhat").get<double>(), r.at("projection").get<double>(),
                           r.at("cosine").get<double>()});
    grid.cells.push_back(std::move(cell));
  }
  return grid;
}

inline std::string commitment_csv(const CommitmentTrace& trace) {
  std::string out = "t,nearest_index\n";
  for (std::size_t i = 0; i < trace.times.size(); ++i)
    out += format_double(trace.times[i]) + "," + std::to_string(trace.nearest_index[i]) + "\n";
  return out;
}

inline nlohmann::json commitment_json(const CommitmentTrace& trace) {
  nlohmann::json switches = nlohmann::json::array();
  for (const auto& e : trace.switch_events) switches.push_back({{"t", e.t}, {"from", e.from}, {"to", e.to}});
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& e : trace.split_events)
    splits.push_back({{"t", e.t}, {"level", e.level}, {"parent", e.parent}, {"child", e.child}});
  return {{"times", trace.times}, {"nearest_index", trace.nearest_index}, {"switch_events", switches},
          {"split_events", splits}};
}

inline CommitmentTrace commitment_from_json(const nlohmann::json& j) {
  CommitmentTrace t;
  t.times = j.at("times").get<std::vector<double>>();
  t.nearest_index = j.at("nearest_index").get<std::vector<std::size_t>>();
  for (const auto& e : j.at("switch_events"))
    t.switch_events.push_back({e.at("t").get<double>(), e.at("from").get<std::size_t>(), e.at("to").get<std::size_t>()});
  for (const auto& e : j.at("split_events"))
    t.split_events.push_back({e.at("t").get<double>(), e.at("level").get<int>(), e.at("parent").get<int>(),
                              e.at("child").get<int>()});
  return t;
}

inline void write_report(const std::vector<GeometryReport>& reports, const std::filesystem::path& path,
                         ReportFormat format) {
  detail::write_file(path, format == ReportFormat::csv ? geometry_csv(reports) : detail::dump_json(geometry_json(reports)));
}

inline void write_report(const PerturbationGrid& grid, const std::filesystem::path& path, ReportFormat format) {
  detail::write_file(path, format == ReportFormat::csv ? perturbation_csv(grid) : detail::dump_json(perturbation_json(grid)));
}

inline void write_report(const CommitmentTrace& trace, const std::filesystem::path& path, ReportFormat format) {
  detail::write_file(path, format == ReportFormat::csv ? commitment_csv(trace) : detail::dump_json(commitment_json(trace)));
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON (" + e.what() + ")");
  }
}

}  // namespace difftraj
