#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "difftraj/io.hpp"
#include "support.hpp"

using namespace difftraj;
namespace fs = std::filesystem;

namespace {
Trajectory sample_traj(bool extras) {
  const GaussianMode mode = test_mode(12, 3, 2);
  Trajectory t = integrate(make_mode_field(mode), gaussian_vector(12, 4), TimeGrid::uniform(9),
                           NoiseSchedule::linear(), Method::ddim);
  if (extras) {
    t.eps_outputs = t.states;
    t.xhat_outputs = t.states;
    for (auto& v : *t.xhat_outputs) v *= -0.25;
    t.alpha_sq = std::vector<double>(9, 0.5);
  } else {
    t.eps_outputs.reset();
    t.xhat_outputs.reset();
  }
  return t;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "difftraj_io_test";
  fs::create_directories(dir);
  return dir / name;
}

// re-wraps a DTRJ blob with a modified header
std::string with_header(const std::string& blob, const std::function<void(nlohmann::json&)>& edit) {
  const auto* b = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t len = detail::get_u32(b + 5);
  nlohmann::json h = nlohmann::json::parse(blob.substr(9, len));
  edit(h);
  return detail::container("DTRJ", h, blob.substr(9 + len));
}
}  // namespace

TEST(Dump, RoundTripIsBitExact) {
  for (bool extras : {false, true}) {
    const Trajectory t = sample_traj(extras);
    const std::string blob = encode_trajectory(t);
    const Trajectory back = decode_trajectory(blob);
    EXPECT_EQ(back.grid.times(), t.grid.times());
    EXPECT_EQ(back.states, t.states);
    EXPECT_EQ(back.eps_outputs.has_value(), extras);
    if (extras) {
      EXPECT_EQ(*back.xhat_outputs, *t.xhat_outputs);
      EXPECT_EQ(*back.alpha_sq, *t.alpha_sq);
    }
    EXPECT_EQ(encode_trajectory(back), blob);
  }
}

TEST(Dump, FileRoundTripAndMissingFile) {
  const Trajectory t = sample_traj(true);
  const fs::path p = temp_path("rt.dtrj");
  save_trajectory(t, p);
  EXPECT_EQ(load_trajectory(p).states, t.states);
  EXPECT_THROW(load_trajectory(temp_path("nope.dtrj")), IoError);
  EXPECT_THROW(save_trajectory(t, temp_path("missing_dir/x/y.dtrj") / "z"), IoError);
}

TEST(Dump, TruncatedPayloadReportsCounts) {
  std::string blob = encode_trajectory(sample_traj(false));
  blob.resize(blob.size() - 8);
  try {
    decode_trajectory(blob, "cut");
    FAIL();
  } catch (const CorruptionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(12 * 9 * 8 - 8)), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(12 * 9 * 8)), std::string::npos) << msg;
  }
  EXPECT_THROW(decode_trajectory(blob.substr(0, 12)), CorruptionError);
}

TEST(Dump, RejectsDtypeMagicVersion) {
  const std::string blob = encode_trajectory(sample_traj(false));
  EXPECT_THROW(decode_trajectory(with_header(blob, [](auto& h) { h["dtype"] = "f32"; })), UnsupportedDtypeError);
  std::string bad = blob;
  bad[0] = 'X';
  EXPECT_THROW(decode_trajectory(bad), FormatError);
  bad = blob;
  bad[4] = 2;
  EXPECT_THROW(decode_trajectory(bad), FormatError);
  EXPECT_THROW(decode_trajectory(with_header(blob, [](auto& h) { h.erase("dim"); })), FormatError);
  EXPECT_THROW(decode_trajectory(with_header(blob, [](auto& h) { h["order"] = "dim-major"; })), FormatError);
}

TEST(Dump, NonMonotoneTimesAreInvalid) {
  const std::string blob = encode_trajectory(sample_traj(false));
  const std::string bad = with_header(blob, [](auto& h) {
    auto t = h["times"].template get<std::vector<double>>();
    std::swap(t[3], t[4]);
    h["times"] = t;
  });
  EXPECT_THROW(decode_trajectory(bad), ValidationError);
}

TEST(Dump, UnknownKeysWarn) {
  const std::string blob = encode_trajectory(sample_traj(false));
  const std::string extra = with_header(blob, [](auto& h) {
    h["producer"] = "elsewhere";
    h["series"]["logits"] = false;
  });
  std::vector<std::string> warnings;
  const Trajectory t = decode_trajectory(extra, "x", &warnings);
  EXPECT_EQ(t.size(), 9u);
  ASSERT_EQ(warnings.size(), 2u);
  EXPECT_NE(warnings[0].find("producer"), std::string::npos);
}

TEST(Dump, NonFiniteStatesCannotBeWritten) {
  Trajectory t = sample_traj(false);
  t.states[2][0] = std::nan("");
  EXPECT_THROW(encode_trajectory(t), ValidationError);
}

TEST(ModelFile, ModeAndHierarchyRoundTrip) {
  const GaussianMode mode = test_mode(10, 4, 8);
  const fs::path p = temp_path("mode.dtmx");
  save_mode(mode, p);
  const GaussianMode back = load_mode(p);
  EXPECT_EQ(back.mean(), mode.mean());
  EXPECT_EQ(back.axes(), mode.axes());
  EXPECT_EQ(back.eigenvalues(), mode.eigenvalues());

  HierarchyParams hp;
  hp.dim = 6;
  hp.depth = 2;
  hp.seed = 3;
  const GaussianMixture mix = build_hierarchy(hp);
  const std::string blob = encode_mixture(mix);
  const GaussianMixture m2 = decode_mixture(blob);
  ASSERT_TRUE(m2.hierarchy());
  EXPECT_EQ(m2.hierarchy()->nodes.size(), mix.hierarchy()->nodes.size());
  EXPECT_EQ(m2.hierarchy()->nodes.back().center, mix.hierarchy()->nodes.back().center);
  EXPECT_EQ(encode_mixture(m2), blob);
  const fs::path mp = temp_path("mix.dtmx");
  save_mixture(mix, mp);
  EXPECT_THROW(load_mode(mp), FormatError);
  EXPECT_THROW(decode_mixture(blob.substr(0, blob.size() - 1)), CorruptionError);
}

TEST(Reports, GeometryCsvAndJson) {
  const auto reports = analyze_trajectory(sample_traj(true), nullptr, "a.dtrj");
  const std::string csv = geometry_csv(reports);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "series,top2_resid,plane_resid,rot_resid,eff_dim_999");
  EXPECT_NE(csv.find("a.dtrj:states,"), std::string::npos);
  EXPECT_NE(csv.find("nan"), std::string::npos);
  const auto back = geometry_from_json(nlohmann::json::parse(geometry_json(reports).dump()));
  ASSERT_EQ(back.size(), reports.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].series, reports[i].series);
    EXPECT_EQ(back[i].explained_variance_ratios, reports[i].explained_variance_ratios);
    EXPECT_EQ(std::isnan(back[i].residual_top2), std::isnan(reports[i].residual_top2));
  }
  EXPECT_EQ(geometry_csv({}), "series,top2_resid,plane_resid,rot_resid,eff_dim_999\n");
}

TEST(Reports, PerturbationRoundTripAndEmptyGrid) {
  const GaussianMode mode = test_mode(12, 3, 2);
  const auto field = make_mode_field(mode);
  const Trajectory base = sample_traj(false);
  const auto g = sweep(field, base, {{"u1", mode.axes().col(0), 1.0}}, {2, 6}, {0.0, 1.0},
                       NoiseSchedule::linear(), Method::ddim);
  const auto back = perturbation_from_json(nlohmann::json::parse(perturbation_json(g).dump()));
  ASSERT_EQ(back.cells.size(), 4u);
  EXPECT_EQ(back.cells[3].rows.back().dev_x, g.cells[3].rows.back().dev_x);
  EXPECT_EQ(perturbation_csv(back), perturbation_csv(g));
  EXPECT_EQ(perturbation_csv(PerturbationGrid{}), "t_inject,K,step,dev_x,dev_xhat,projection\n");
  const fs::path p = temp_path("grid.json");
  write_report(g, p, format_for(p));
  EXPECT_EQ(perturbation_from_json(load_json(p)).cells.size(), 4u);
  EXPECT_THROW(format_for("grid.txt"), ParameterError);
}

TEST(Reports, CommitmentRoundTrip) {
  HierarchyParams hp;
  hp.dim = 6;
  hp.depth = 2;
  const GaussianMixture mix = build_hierarchy(hp);
  const Trajectory t = integrate(make_mixture_field(mix), gaussian_vector(6, 1), TimeGrid::uniform(41),
                                 NoiseSchedule::linear(), Method::ddim);
  const CommitmentTrace tr = detect_commitments(mix, t, NoiseSchedule::linear());
  const CommitmentTrace back = commitment_from_json(nlohmann::json::parse(commitment_json(tr).dump()));
  EXPECT_EQ(back.nearest_index, tr.nearest_index);
  EXPECT_EQ(back.split_events.size(), tr.split_events.size());
  EXPECT_EQ(commitment_csv(back), commitment_csv(tr));
}

TEST(Reports, FormatDouble) {
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(format_double(std::nan("")), "nan");
  EXPECT_EQ(format_double(-INFINITY), "-inf");
}

TEST(Json, InvalidFileIsFormatError) {
  const fs::path p = temp_path("bad.json");
  std::ofstream(p) << "{oops";
  EXPECT_THROW(load_json(p), FormatError);
  EXPECT_THROW(load_json(temp_path("absent.json")), IoError);
}
