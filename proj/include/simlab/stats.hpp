#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace simlab {

struct ResampleSummary {
  double estimate = 0.0;
  double low = 0.0;
  double high = 0.0;
  double level = 0.95;
  int resamples = 0;
  std::uint64_t seed = 0;
  std::string method = "percentile";
};

/// Seed for the i-th resample of stream `seed`. Each iteration owns its own
/// generator, so results do not depend on evaluation order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Derives a named sub-stream seed (e.g. one per analysis step).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

/// Percentile bootstrap CI of the mean.
ResampleSummary bootstrap_ci(std::span<const double> values, int resamples = 1000,
                             double level = 0.95, std::uint64_t seed = 42);

/// Two-sided label-shuffling test on the difference of means, p = (b+1)/(N+1).
double permutation_test(std::span<const double> group_a, std::span<const double> group_b,
                        int iterations = 10000, std::uint64_t seed = 42);

/// Benjamini-Hochberg step-up; true where the hypothesis is rejected.
std::vector<bool> bh_correct(std::span<const double> p_values, double q = 0.05);

double pearson(std::span<const double> x, std::span<const double> y);

double mean(std::span<const double> values);

/// Linear-interpolation quantile of an unsorted sample (q in [0, 1]).
double quantile(std::vector<double> values, double q);

}  // namespace simlab
