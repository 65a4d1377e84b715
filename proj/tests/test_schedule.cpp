#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "difftraj/schedule.hpp"
#include "support.hpp"

using namespace difftraj;

TEST(Schedule, IdentityScheduleWithZeroBeta) {
  const auto s = NoiseSchedule::linear(1, 0.0, 0.0);
  ASSERT_EQ(s.alpha_sq().size(), 1u);
  EXPECT_EQ(s.alpha_sq()[0], 1.0);
  EXPECT_EQ(s.alpha(1.0), 1.0);
}

TEST(Schedule, DefaultTerminalAlphaMatchesDirectProduct) {
  const auto s = NoiseSchedule::linear();
  double prod = 1.0;
  for (int j = 0; j < 1000; ++j) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * j / 999.0);
  EXPECT_NEAR(s.alpha_sq().back(), prod, 1e-15);
  EXPECT_NEAR(s.alpha(1.0), std::sqrt(prod), 1e-14);
  EXPECT_NEAR(s.alpha(1.0), 6.4e-3, 0.05e-3);
}

TEST(Schedule, ContinuousTimeHitsEveryKnot) {
  const auto s = NoiseSchedule::linear();
  for (std::size_t i = 1; i <= 1000; i += 37) {
    const double t = static_cast<double>(i) / 1000.0;
    EXPECT_NEAR(std::exp(s.log_alpha_sq(t)) / s.alpha_sq()[i - 1], 1.0, 1e-12) << i;
  }
}

TEST(Schedule, VariancePreservingAndEndpoint) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& s : {NoiseSchedule::linear(), NoiseSchedule::from_alpha_sq({0.9, 0.5, 0.1, 0.01})}) {
    EXPECT_EQ(s.alpha(0.0), 1.0);
    EXPECT_EQ(s.sigma(0.0), 0.0);
    for (int i = 0; i < 1000; ++i) {
      const double t = u(rng);
      const auto l = s.level(t);
      EXPECT_NEAR(l.alpha * l.alpha + l.sigma * l.sigma, 1.0, 1e-12);
    }
  }
}

TEST(Schedule, Monotone) {
  const auto s = NoiseSchedule::linear();
  double prev_a = 2.0;
  double prev_s = -1.0;
  for (int i = 0; i <= 2000; ++i) {
    const double t = i / 2000.0;
    EXPECT_LT(s.alpha(t), prev_a);
    EXPECT_GT(s.sigma(t), prev_s);
    prev_a = s.alpha(t);
    prev_s = s.sigma(t);
  }
}

TEST(Schedule, BetaMatchesFiniteDifference) {
  const auto s = NoiseSchedule::linear();
  const double h = 1e-5;
  for (int i = 1; i < 100; ++i) {
    const double t = i / 100.0 + 0.0031;
    const double fd = -(std::log(s.alpha(t + h)) - std::log(s.alpha(t - h))) / (2 * h);
    EXPECT_NEAR(s.beta(t) / fd, 1.0, 1e-4) << t;
  }
  // tabulated: exact inside each segment
  const auto tab = NoiseSchedule::from_alpha_sq({0.9, 0.5, 0.1, 0.01});
  const double t = 0.6;
  const double fd = -(std::log(tab.alpha(t + h)) - std::log(tab.alpha(t - h))) / (2 * h);
  EXPECT_NEAR(tab.beta(t) / fd, 1.0, 1e-8);
}

TEST(Schedule, TimeAtSigmaInverts) {
  const auto s = NoiseSchedule::linear();
  for (double t : {1e-4, 0.01, 0.2, 0.5, 0.77, 0.999}) EXPECT_NEAR(s.time_at_sigma(s.sigma(t)), t, 1e-10);
  EXPECT_EQ(s.time_at_sigma(0.0), 0.0);
  EXPECT_THROW(s.time_at_sigma(-1.0), DomainError);
}

TEST(Schedule, Errors) {
  EXPECT_THROW(NoiseSchedule::linear(0), ParameterError);
  EXPECT_THROW(NoiseSchedule::linear(10, 0.1, 0.01), ParameterError);
  EXPECT_THROW(NoiseSchedule::linear(10, -0.1, 0.01), ParameterError);
  EXPECT_THROW(NoiseSchedule::linear(10, 0.1, 1.0), ParameterError);
  EXPECT_THROW(NoiseSchedule::from_alpha_sq({0.5, 0.6}), ParameterError);
  EXPECT_THROW(NoiseSchedule::from_alpha_sq({}), ParameterError);
  const auto s = NoiseSchedule::linear();
  EXPECT_THROW(s.alpha(1.5), DomainError);
  EXPECT_THROW(s.alpha(-0.1), DomainError);
}

TEST(Notation, OursRow) {
  const auto s = NoiseSchedule::linear();
  const auto t = convert_notation(s, Convention::ours);
  for (std::size_t i = 0; i < 1000; i += 111) {
    const double time = static_cast<double>(i + 1) / 1000.0;
    EXPECT_NEAR(t.A[i], s.alpha(time), 1e-14);
    EXPECT_NEAR(t.B[i], s.sigma(time) * s.sigma(time), 1e-14);
  }
}

TEST(Notation, DdpmMatchesCumulativeProductOfSameBetas) {
  const auto s = NoiseSchedule::linear(200, 1e-3, 0.05);
  const auto t = convert_notation(s, Convention::ddpm);
  double abar = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double beta = 1e-3 + (0.05 - 1e-3) * i / 199.0;
    abar *= 1.0 - beta;
    EXPECT_NEAR(t.A[i], std::sqrt(abar), 1e-14);
    EXPECT_NEAR(t.C[i], 1.0 - std::sqrt(1.0 - beta), 1e-14);
  }
}

// below alpha^2 = 0.5 several doubles share (sqrt(c), 1 - c), so recovery is exact to an ulp, not bitwise
TEST(Notation, RoundTripToAnUlp) {
  for (const auto& s : {NoiseSchedule::linear(), NoiseSchedule::from_alpha_sq({0.99, 0.7, 0.3, 0.05})}) {
    const auto direct = convert_notation(s, Convention::ours);
    for (Convention c : kAllConventions) {
      const auto table = convert_notation(s, c);
      const auto back = alpha_sq_from_table(table);
      const auto ours = to_ours(table);
      for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_LE(std::abs(back[i] - s.alpha_sq()[i]), 2e-16) << to_string(c) << " " << i;
        EXPECT_EQ(ours.A[i], direct.A[i]);
        EXPECT_LE(std::abs(ours.B[i] - direct.B[i]), 2e-16);
      }
      if (s.alpha_sq().front() > 0.5) {
        EXPECT_EQ(back.front(), s.alpha_sq().front());
      }
    }
  }
}

TEST(Notation, Tags) {
  for (Convention c : kAllConventions) EXPECT_EQ(parse_convention(to_string(c)), c);
  EXPECT_THROW(parse_convention("EDM"), ParameterError);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = NoiseSchedule::linear(500, 2e-4, 0.03);
  const auto back = schedule_from_json(schedule_to_json(s));
  EXPECT_EQ(back.alpha_sq(), s.alpha_sq());
  const auto tab = NoiseSchedule::from_alpha_sq({0.9, 0.4});
  EXPECT_EQ(schedule_from_json(schedule_to_json(tab)).alpha_sq(), tab.alpha_sq());
  EXPECT_THROW(schedule_from_json({{"n_train", 10}, {"bogus", 1}}), ParameterError);
}

TEST(TimeGrid, UniformCountsPoints) {
  const auto g = TimeGrid::uniform();
  EXPECT_EQ(g.size(), 51u);
  EXPECT_EQ(g.n_steps(), 50u);
  EXPECT_EQ(g.front(), 1.0);
  EXPECT_EQ(g.back(), 0.0);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
}

TEST(TimeGrid, RefinedKeepsNodesAndTail) {
  const auto g = TimeGrid::uniform(11);
  const auto f = g.refined(7);
  ASSERT_EQ(f.size(), 71u);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(f[i * 7], g[i]);
  const auto t = g.tail(4);
  EXPECT_EQ(t.size(), 7u);
  EXPECT_EQ(t.front(), g[4]);
  EXPECT_THROW(g.tail(10), ParameterError);
}

TEST(TimeGrid, Validation) {
  EXPECT_THROW(TimeGrid::from_times({1.0, 0.5, 0.6, 0.0}), ValidationError);
  EXPECT_THROW(TimeGrid::from_times({1.0, 0.5}), ValidationError);
  EXPECT_THROW(TimeGrid::from_times({0.0}), ValidationError);
  EXPECT_THROW(TimeGrid::uniform(1), ParameterError);
}
