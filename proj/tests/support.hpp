#pragma once

#include <cstdint>
#include <random>

#include "difftraj/gaussian_mode.hpp"
#include "difftraj/samplers.hpp"
#include "difftraj/schedule.hpp"

namespace dt = difftraj;

inline dt::GaussianMode test_mode(dt::Index dim, dt::Index rank, std::uint64_t seed, double lmin = 0.5,
                                  double lmax = 10.0) {
  std::mt19937_64 rng(seed);
  return dt::random_mode(dim, rank, rng, lmin, lmax);
}

inline dt::Vector gaussian_vector(dt::Index dim, std::uint64_t seed) { return dt::initial_noise(dim, seed); }

inline double rel_err(const dt::Vector& a, const dt::Vector& b) { return (a - b).norm() / b.norm(); }
