#include "simlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "simlab/error.hpp"

namespace simlab {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  // FNV-1a over the label, then mixed with the parent seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(seed, h);
}

double mean(std::span<const double> values) {
  if (values.empty()) throw PreconditionError("mean of an empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw PreconditionError("quantile of an empty sample");
  std::ranges::sort(values);
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

ResampleSummary bootstrap_ci(std::span<const double> values, int resamples, double level,
                             std::uint64_t seed) {
  if (values.empty()) throw PreconditionError("bootstrap of an empty sample");
  if (values.size() < 2) throw PreconditionError("bootstrap needs at least 2 values");
  if (resamples < 1) throw PreconditionError("bootstrap needs at least 1 resample");
  if (!(level > 0.0 && level < 1.0)) throw PreconditionError("confidence level must be in (0,1)");

  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += values[pick(rng)];
    means[static_cast<std::size_t>(b)] = acc / static_cast<double>(n);
  }
  const double alpha = 1.0 - level;
  ResampleSummary out;
  out.estimate = mean(values);
  out.low = quantile(means, alpha / 2.0);
  out.high = quantile(std::move(means), 1.0 - alpha / 2.0);
  out.level = level;
  out.resamples = resamples;
  out.seed = seed;
  return out;
}

double permutation_test(std::span<const double> a, std::span<const double> b, int iterations,
                        std::uint64_t seed) {
  if (a.empty() || b.empty()) throw PreconditionError("permutation test needs non-empty groups");
  if (iterations < 1) throw PreconditionError("permutation test needs at least 1 iteration");

  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const double total = std::accumulate(pooled.begin(), pooled.end(), 0.0);
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());

  auto abs_diff = [&](std::span<const double> first) {
    const double sa = std::accumulate(first.begin(), first.end(), 0.0);
    return std::abs(sa / na - (total - sa) / nb);
  };
  const double observed = abs_diff(a);
  // Statistics equal to the observed one up to rounding count as ties.
  double scale = 0.0;
  for (double v : pooled) scale = std::max(scale, std::abs(v));
  const double tol = 1e-9 * std::max(observed, 1e-300) + 1e-12 * scale;

  std::vector<double> work(pooled.size());
  std::uint64_t at_least = 0;
  for (int it = 0; it < iterations; ++it) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(it)));
    work = pooled;
    std::shuffle(work.begin(), work.end(), rng);
    if (abs_diff(std::span<const double>(work).first(a.size())) >= observed - tol) ++at_least;
  }
  return (static_cast<double>(at_least) + 1.0) / (static_cast<double>(iterations) + 1.0);
}

std::vector<bool> bh_correct(std::span<const double> p, double q) {
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw PreconditionError("p-values must lie in [0, 1]");
  }
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::ranges::stable_sort(order, [&](std::size_t i, std::size_t j) { return p[i] < p[j]; });
  std::size_t k_star = 0;
  for (std::size_t k = 1; k <= m; ++k) {
    if (p[order[k - 1]] <= static_cast<double>(k) * q / static_cast<double>(m)) k_star = k;
  }
  std::vector<bool> reject(m, false);
  for (std::size_t k = 0; k < k_star; ++k) reject[order[k]] = true;
  return reject;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw PreconditionError("pearson: length mismatch");
  if (x.size() < 3) throw PreconditionError("pearson: need at least 3 points");
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateInputError("pearson: zero-variance input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace simlab
