#include "simlab/report/analyses.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <set>
#include <thread>
#include <tuple>

#include <json.hpp>

#include "simlab/error.hpp"
#include "simlab/report/csv.hpp"
#include "simlab/report/svg.hpp"
#include "simlab/stratify.hpp"

namespace simlab::report {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kLevel = 0.95;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

struct StratumDef {
  std::string family, name;
  std::vector<Eigen::Index> rows;
};

struct Outcome {
  std::optional<double> value;
  std::string status;
  std::optional<ResampleSummary> ci;
};

// Runs body(i) for every i in [0, count) across hardware threads. Each index
// writes only its own slot, so results do not depend on scheduling.
template <class F>
void parallel_for(std::size_t count, F&& body) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), count);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex guard;
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        const std::lock_guard lock(guard);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Linear CKA of row subsets from precomputed Gram matrices K = X X^T:
// CKA = <HKH, HLH> / (|HKH| |HLH|) on the selected rows and columns.
// Centering is applied through row sums r = K1 and total s:
// <HKH, HLH> = <K, L> - 2 r_K.r_L / n + s_K s_L / n^2.
struct GramSubsets {
  std::vector<Eigen::MatrixXd> grams;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  bool all_pairs = false;  // pairs holds every unordered pair of distinct grams once

  void finish() {
    std::set<std::pair<std::size_t, std::size_t>> distinct;
    for (auto [a, b] : pairs) {
      if (a != b) distinct.emplace(std::min(a, b), std::max(a, b));
    }
    all_pairs = distinct.size() == pairs.size() && pairs.size() == grams.size() * (grams.size() - 1) / 2;
  }

  double mean_cka(const std::vector<Eigen::Index>& rows) const {
    return all_pairs ? mean_cka_summed(rows) : mean_cka_pairwise(rows);
  }

  // With every pair present, the pair sum of <G_a, G_b> for unit-norm centred
  // G_m equals (|sum_m G_m|^2 - M) / 2, which needs one pass per matrix.
  // Works on lower triangles only; every Gram submatrix is symmetric.
  double mean_cka_summed(std::vector<Eigen::Index> rows) const {
    std::ranges::sort(rows);  // CKA ignores row order; sorted gathers are cache friendly
    const auto n = static_cast<Eigen::Index>(rows.size());
    const double dn = static_cast<double>(n);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd k(n, n);
    Eigen::VectorXd rw = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd r(n);
    // Squared Frobenius norm and row sums of the symmetric matrix stored in m's lower triangle.
    auto moments = [n](const Eigen::MatrixXd& m, Eigen::VectorXd* sums) {
      double sq = 0.0;
      if (sums) sums->setZero();
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto below = m.col(j).tail(n - j - 1);
        sq += 2.0 * below.squaredNorm() + m(j, j) * m(j, j);
        if (sums) {
          sums->tail(n - j - 1) += below;
          (*sums)(j) += m(j, j) + below.sum();
        }
      }
      return sq;
    };
    for (const auto& g : grams) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const double* col = g.col(rows[static_cast<std::size_t>(j)]).data();
        double* out = k.col(j).data();
        for (Eigen::Index i = j; i < n; ++i) out[i] = col[rows[static_cast<std::size_t>(i)]];
      }
      const double sq = moments(k, &r);
      const double s = r.sum();
      const double norm2 = sq - 2.0 * r.squaredNorm() / dn + s * s / (dn * dn);
      if (!(norm2 > 0.0)) throw DegenerateInputError("zero-variance subset");
      const double inv = 1.0 / std::sqrt(norm2);
      for (Eigen::Index j = 0; j < n; ++j) w.col(j).tail(n - j).noalias() += inv * k.col(j).tail(n - j);
      rw.noalias() += inv * r;
    }
    const double sw = rw.sum();
    const double total = moments(w, nullptr) - 2.0 * rw.squaredNorm() / dn + sw * sw / (dn * dn);
    return (total - static_cast<double>(grams.size())) / 2.0 / static_cast<double>(pairs.size());
  }

  double mean_cka_pairwise(const std::vector<Eigen::Index>& rows) const {
    std::vector<Eigen::MatrixXd> centered(grams.size());
    std::vector<double> norms(grams.size());
    for (std::size_t m = 0; m < grams.size(); ++m) {
      Eigen::MatrixXd k = grams[m](rows, rows);
      const Eigen::VectorXd mu = k.rowwise().mean();
      const double grand = mu.mean();
      k.colwise() -= mu;
      k.rowwise() -= mu.transpose();
      k.array() += grand;
      norms[m] = k.norm();
      if (norms[m] == 0.0) throw DegenerateInputError("zero-variance subset");
      centered[m] = std::move(k);
    }
    double sum = 0.0;
    for (const auto& [a, b] : pairs) sum += centered[a].cwiseProduct(centered[b]).sum() / (norms[a] * norms[b]);
    return sum / static_cast<double>(pairs.size());
  }
};

std::vector<Eigen::Index> iota_rows(std::size_t n) {
  std::vector<Eigen::Index> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<Eigen::Index>(i);
  return out;
}

ProbeOptions probe_options(const AnalysisConfig& cfg) {
  ProbeOptions o;
  o.lambda = cfg.lambda;
  o.folds = cfg.folds;
  o.seeds = cfg.probe_seeds;
  return o;
}

// Shared state of one analysis run: the layer grid, the difficulty profile
// and memoised dense matrices, metric values and probe accuracies.
struct Context {
  const AnalysisConfig& cfg;
  const Cohort& cohort;
  LayerGrid grid;
  std::vector<int> points;
  DifficultyProfile profile;
  MetricOptions mopts;
  std::vector<std::string> notices;
  std::map<std::pair<std::string, int>, Eigen::MatrixXd> dense;
  std::map<std::tuple<std::string, int, std::string, int, std::string, std::string, Metric>, Outcome>
      values;
  std::map<std::pair<std::string, int>, double> cv_accuracy;

  Context(const AnalysisConfig& c, const Cohort& h) : cfg(c), cohort(h) {
    check_config(cfg);
    grid = layer_grid(cohort.index().num_layers, cfg.grid_size);
    points = selected_grid_points(cfg);
    profile = difficulty(cohort);
    mopts = {cfg.mnn_k, cfg.svcca_threshold};
    fs::create_directories(cfg.output);
  }

  std::size_t n() const { return cohort.problem_ids().size(); }

  const Eigen::MatrixXd& matrix(const std::string& model, int layer) {
    const auto key = std::make_pair(model, layer);
    auto it = dense.find(key);
    if (it == dense.end()) {
      it = dense.emplace(key, cohort.activations(model, static_cast<std::uint32_t>(layer)).to_double()).first;
    }
    return it->second;
  }

  bool has(const std::string& model, int layer) const {
    return cohort.has_layer(model, static_cast<std::uint32_t>(layer));
  }

  Outcome value(const std::string& a, int la, const std::string& b, int lb, const StratumDef& s,
                Metric metric) {
    const auto key = std::make_tuple(a, la, b, lb, s.family, s.name, metric);
    if (auto it = values.find(key); it != values.end()) return it->second;
    Outcome out;
    if (!has(a, la) || !has(b, lb)) {
      out.status = "missing_layer";
    } else if (s.rows.size() < static_cast<std::size_t>(cfg.n_min)) {
      out.status = "insufficient";
    } else {
      const Eigen::MatrixXd x = matrix(a, la)(s.rows, Eigen::all);
      const Eigen::MatrixXd y = matrix(b, lb)(s.rows, Eigen::all);
      try {
        out.value = evaluate(metric, x, y, mopts);
        out.status = "ok";
      } catch (const DegenerateInputError&) {
        out.status = "degenerate";
      } catch (const PreconditionError&) {
        out.status = "degenerate";
      }
      if (out.value && cfg.problem_bootstrap) out.ci = problem_bootstrap(x, y, metric, a, b, la, lb, s);
    }
    values.emplace(key, out);
    return out;
  }

  // Percentile CI over problem resamples (rows drawn with replacement).
  ResampleSummary problem_bootstrap(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, Metric metric,
                                    const std::string& a, const std::string& b, int la, int lb,
                                    const StratumDef& s) {
    const auto seed = derive_seed(cfg.seed, "problems:" + a + ":" + std::to_string(la) + ":" + b + ":" +
                                                std::to_string(lb) + ":" + s.family + ":" + s.name);
    std::vector<double> stats;
    const auto n = static_cast<Eigen::Index>(x.rows());
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (int r = 0; r < cfg.resamples; ++r) {
      std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
      std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
      for (auto& i : idx) i = pick(rng);
      try {
        stats.push_back(evaluate(metric, x(idx, Eigen::all), y(idx, Eigen::all), mopts));
      } catch (const Error&) {
        // Degenerate resamples (e.g. all rows identical) carry no information.
      }
    }
    ResampleSummary ci;
    ci.estimate = evaluate(metric, x, y, mopts);
    ci.resamples = cfg.resamples;
    ci.seed = seed;
    ci.level = kLevel;
    if (stats.empty()) {
      ci.low = ci.high = ci.estimate;
    } else {
      ci.low = quantile(stats, (1 - kLevel) / 2);
      ci.high = quantile(stats, 1 - (1 - kLevel) / 2);
    }
    return ci;
  }

  // Two-sided test of the pair-averaged similarity difference between two
  // disjoint problem sets. Problems are reassigned between the sets, so pairs
  // that share problems are not treated as independent samples. With several
  // grid points the statistic is the largest |difference| over them, which
  // accounts for having picked the peak among those points.
  double problem_permutation(const std::vector<int>& at, const StratumDef& a, const StratumDef& b, Metric metric,
                             std::uint64_t seed) {
    std::vector<Eigen::Index> pool = a.rows;
    pool.insert(pool.end(), b.rows.begin(), b.rows.end());
    const auto split = static_cast<std::ptrdiff_t>(a.rows.size());
    const auto iterations = static_cast<std::size_t>(cfg.iterations);
    double observed = 0.0;
    std::vector<double> largest(iterations, 0.0);
    std::set<std::vector<int>> seen;  // grid points mapping to the same layers give the same statistic
    for (int g : at) {
      std::vector<int> layers;
      for (const auto& m : cohort.model_ids()) layers.push_back(grid.layer(m, g));
      if (!seen.insert(layers).second) continue;
      std::vector<std::pair<const Eigen::MatrixXd*, const Eigen::MatrixXd*>> mats;
      for (const auto& [ma, mb] : pairs()) {
        const int la = grid.layer(ma, g), lb = grid.layer(mb, g);
        if (has(ma, la) && has(mb, lb)) mats.emplace_back(&matrix(ma, la), &matrix(mb, lb));
      }
      if (mats.empty()) continue;
      std::function<double(const std::vector<Eigen::Index>&)> mean_similarity;
      GramSubsets grams;
      if (metric == Metric::linear_cka) {
        std::map<const Eigen::MatrixXd*, std::size_t> slot;
        auto index_of = [&](const Eigen::MatrixXd* x) {
          auto [it, fresh] = slot.try_emplace(x, grams.grams.size());
          if (fresh) grams.grams.push_back(*x * x->transpose());
          return it->second;
        };
        for (const auto& [x, y] : mats) grams.pairs.emplace_back(index_of(x), index_of(y));
        grams.finish();
        mean_similarity = [&](const std::vector<Eigen::Index>& rows) { return grams.mean_cka(rows); };
      } else {
        mean_similarity = [&](const std::vector<Eigen::Index>& rows) {
          double sum = 0.0;
          for (const auto& [x, y] : mats) sum += evaluate(metric, (*x)(rows, Eigen::all), (*y)(rows, Eigen::all), mopts);
          return sum / static_cast<double>(mats.size());
        };
      }
      observed = std::max(observed, std::fabs(mean_similarity(a.rows) - mean_similarity(b.rows)));
      parallel_for(iterations, [&](std::size_t it) {
        auto rows = pool;
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(it)));
        std::shuffle(rows.begin(), rows.end(), rng);
        const std::vector<Eigen::Index> ra(rows.begin(), rows.begin() + split), rb(rows.begin() + split, rows.end());
        double v = std::numeric_limits<double>::infinity();  // a degenerate reassignment counts as extreme
        try {
          v = std::fabs(mean_similarity(ra) - mean_similarity(rb));
        } catch (const Error&) {
        }
        largest[it] = std::max(largest[it], v);
      });
    }
    if (observed == 0.0 && std::ranges::all_of(largest, [](double v) { return v == 0.0; })) {
      throw PreconditionError("no model pair has the requested layers");
    }
    const auto extreme = std::ranges::count_if(largest, [&](double v) { return v >= observed - 1e-12; });
    return (static_cast<double>(extreme) + 1) / (static_cast<double>(iterations) + 1);
  }

  double probe_accuracy(const std::string& model, int layer) {
    const auto key = std::make_pair(model, layer);
    if (auto it = cv_accuracy.find(key); it != cv_accuracy.end()) return it->second;
    const double acc = train_probe(matrix(model, layer), cohort.correctness(model), probe_options(cfg)).cv_accuracy;
    cv_accuracy.emplace(key, acc);
    return acc;
  }

  StratumDef rows_for(std::string family, std::string name, const std::vector<std::string>& ids) const {
    return {std::move(family), std::move(name), cohort.rows_of(ids)};
  }

  std::vector<StratumDef> difficulty_bins() const {
    std::vector<StratumDef> out;
    const auto edges = default_difficulty_edges(profile.cohort_size);
    for (auto& s : bin_by_difficulty(profile, edges)) out.push_back(rows_for("difficulty", s.name, s.problem_ids));
    return out;
  }

  // Cohort-level strata in config order.
  std::vector<StratumDef> cohort_strata() {
    std::vector<StratumDef> out;
    for (const auto& fam : cfg.strata) {
      if (fam == "all") {
        out.push_back({"all", "all", iota_rows(n())});
      } else if (fam == "difficulty") {
        for (auto& s : difficulty_bins()) out.push_back(std::move(s));
      } else if (fam == "singleton") {
        const auto edges = singleton_edges(profile.cohort_size);
        for (auto& s : bin_by_difficulty(profile, edges)) out.push_back(rows_for("singleton", s.name, s.problem_ids));
      } else if (fam == "domain") {
        const auto& first = cohort.manifest(cohort.model_ids().front());
        const auto domains = domain_strata(first, cohort.problem_ids());
        if (domains.empty()) {
          notices.push_back("domain tags missing; domain breakdown skipped");
        }
        for (const auto& [name, s] : domains) out.push_back(rows_for("domain", name, s.problem_ids));
      }
    }
    return out;
  }

  std::vector<StratumDef> pair_strata(const std::string& a, const std::string& b) const {
    std::vector<StratumDef> out;
    const bool agreement = std::ranges::find(cfg.strata, "agreement") != cfg.strata.end();
    const bool correctness = std::ranges::find(cfg.strata, "correctness") != cfg.strata.end();
    if (!agreement && !correctness) return out;
    const auto s = agreement_strata(cohort.manifest(a), cohort.manifest(b), cohort.problem_ids());
    if (agreement) {
      out.push_back(rows_for("agreement", "same_answer", s.same_answer.problem_ids));
      out.push_back(rows_for("agreement", "different_answer", s.different_answer.problem_ids));
    }
    if (correctness) {
      out.push_back(rows_for("correctness", "both_correct", s.both_correct.problem_ids));
      out.push_back(rows_for("correctness", "both_wrong", s.both_wrong.problem_ids));
      out.push_back(rows_for("correctness", "split", s.split.problem_ids));
    }
    return out;
  }

  std::vector<std::pair<std::string, std::string>> pairs() const {
    std::vector<std::pair<std::string, std::string>> out;
    const auto& ids = cohort.model_ids();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = i + 1; j < ids.size(); ++j) out.emplace_back(ids[i], ids[j]);
    }
    return out;
  }
};

ResampleSummary summarize(const std::vector<double>& values, const AnalysisConfig& cfg,
                          const std::string& purpose, std::string* method = nullptr) {
  ResampleSummary s;
  s.seed = derive_seed(cfg.seed, purpose);
  s.level = kLevel;
  s.resamples = cfg.resamples;
  if (values.size() >= 2) {
    s = bootstrap_ci(values, cfg.resamples, kLevel, s.seed);
    if (method) *method = "bootstrap_pairs";
  } else if (values.size() == 1) {
    s.estimate = s.low = s.high = values[0];
    s.resamples = 0;
    if (method) *method = "single_value";
  } else {
    s.estimate = s.low = s.high = kNaN;
    s.resamples = 0;
    if (method) *method = "none";
  }
  return s;
}

std::vector<std::string> ci_fields(const ResampleSummary& s) {
  return {fmt(s.low), fmt(s.high), fmt(s.level), std::to_string(s.resamples), std::to_string(s.seed)};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::string> ci_header(const std::string& prefix) {
  return {prefix + "_ci_low", prefix + "_ci_high", prefix + "_ci_level", prefix + "_resamples",
          prefix + "_seed"};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

double mean_or_nan(const std::vector<double>& v) { return v.empty() ? kNaN : mean(v); }

}  // namespace

// ---------------------------------------------------------------- similarity

SimilarityResult run_similarity(const AnalysisConfig& cfg, const Cohort& cohort) {
  Context ctx(cfg, cohort);
  SimilarityResult result;
  const auto shared = ctx.cohort_strata();

  for (const auto& [a, b] : ctx.pairs()) {
    auto strata = shared;
    for (auto& s : ctx.pair_strata(a, b)) strata.push_back(std::move(s));
    for (int g : ctx.points) {
      const int la = ctx.grid.layer(a, g), lb = ctx.grid.layer(b, g);
      for (const auto& s : strata) {
        for (Metric m : cfg.metrics) {
          const auto out = ctx.value(a, la, b, lb, s, m);
          result.rows.push_back({a, b, g, la, lb, s.family, s.name, m, out.value, s.rows.size(), out.status, out.ci});
        }
      }
    }
  }

  // Per-cell means over model pairs.
  std::map<std::tuple<int, std::string, std::string, Metric>, std::pair<std::vector<double>, std::size_t>> cells;
  std::vector<std::tuple<int, std::string, std::string, Metric>> order;
  for (const auto& r : result.rows) {
    const auto key = std::make_tuple(r.grid_point, r.family, r.stratum, r.metric);
    auto [it, fresh] = cells.try_emplace(key);
    if (fresh) order.push_back(key);
    if (r.value) {
      it->second.first.push_back(*r.value);
    } else {
      ++it->second.second;
    }
  }
  std::ranges::sort(order);
  for (const auto& key : order) {
    const auto& [g, family, stratum, metric] = key;
    const auto& [vals, excluded] = cells.at(key);
    SummaryRow row{g, family, stratum, metric, mean_or_nan(vals), {}, {}, vals.size(), excluded};
    row.ci = summarize(vals, cfg,
                       "similarity:" + std::to_string(g) + ":" + family + ":" + stratum + ":" +
                           std::string(to_string(metric)),
                       &row.ci_method);
    result.summary.push_back(std::move(row));
  }

  CsvTable rows({"model_a", "model_b", "grid_point", "layer_a", "layer_b", "family", "stratum", "metric",
                 "value", "n", "status", "ci_low", "ci_high", "ci_method"});
  for (const auto& r : result.rows) {
    rows.add({r.model_a, r.model_b, std::to_string(r.grid_point), std::to_string(r.layer_a),
              std::to_string(r.layer_b), r.family, r.stratum, std::string(to_string(r.metric)),
              opt_fmt(r.value), std::to_string(r.n), r.status, r.ci ? fmt(r.ci->low) : "",
              r.ci ? fmt(r.ci->high) : "", r.ci ? "bootstrap_problems" : "none"});
  }
  rows.write(cfg.output / "similarity.csv");

  CsvTable summary(concat({"grid_point", "family", "stratum", "metric", "mean"},
                          concat(ci_header("mean"), {"ci_method", "n_pairs", "n_excluded"})));
  for (const auto& s : result.summary) {
    summary.add(concat({std::to_string(s.grid_point), s.family, s.stratum, std::string(to_string(s.metric)),
                        fmt(s.mean)},
                       concat(ci_fields(s.ci), {s.ci_method, std::to_string(s.n_pairs), std::to_string(s.n_excluded)})));
  }
  summary.write(cfg.output / "similarity_summary.csv");

  std::vector<Series> series;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& s : result.summary) {
    if (s.metric != cfg.metrics.front() || !std::isfinite(s.mean)) continue;
    const auto key = std::make_pair(s.family, s.stratum);
    auto [it, fresh] = index.try_emplace(key, series.size());
    if (fresh) series.push_back({s.family == s.stratum ? s.family : s.family + ":" + s.stratum, {}, {}});
    series[it->second].x.push_back(s.grid_point);
    series[it->second].y.push_back(s.mean);
  }
  if (!series.empty()) {
    write_text(cfg.output / "similarity.svg",
               emit_svg(series, {"Mean pairwise " + std::string(to_string(cfg.metrics.front())),
                                 "grid point", std::string(to_string(cfg.metrics.front()))}));
  }
  result.notices = ctx.notices;
  return result;
}

SimilarityResult run_similarity(const AnalysisConfig& cfg) {
  return run_similarity(cfg, load_cohort(cfg.cohort));
}

// ----------------------------------------------------------------- inversion

InversionResult run_inversion(const AnalysisConfig& cfg, const Cohort& cohort) {
  Context ctx(cfg, cohort);
  InversionResult result;
  result.metric = cfg.metrics.front();
  const auto bins = ctx.difficulty_bins();  // hard, medium, easy
  const auto& hard = bins.front();
  const auto& easy = bins.back();
  result.n_hard = hard.rows.size();
  result.n_easy = easy.rows.size();
  const auto min_n = static_cast<std::size_t>(cfg.n_min);
  if (result.n_hard < min_n || result.n_easy < min_n) {
    throw PreconditionError("inversion needs hard and easy bins of at least n_min = " +
                            std::to_string(cfg.n_min) + " problems (hard " + std::to_string(result.n_hard) +
                            ", easy " + std::to_string(result.n_easy) + ")");
  }
  const auto pairs = ctx.pairs();

  auto bin_values = [&](const StratumDef& s, int g) {
    std::vector<double> out;
    for (const auto& [a, b] : pairs) {
      const auto v = ctx.value(a, ctx.grid.layer(a, g), b, ctx.grid.layer(b, g), s, result.metric);
      if (v.value) out.push_back(*v.value);
    }
    return out;
  };
  auto paired_diffs = [&](const StratumDef& x, const StratumDef& y, int g) {
    std::vector<double> out;
    for (const auto& [a, b] : pairs) {
      const int la = ctx.grid.layer(a, g), lb = ctx.grid.layer(b, g);
      const auto vx = ctx.value(a, la, b, lb, x, result.metric);
      const auto vy = ctx.value(a, la, b, lb, y, result.metric);
      if (vx.value && vy.value) out.push_back(*vx.value - *vy.value);
    }
    return out;
  };

  double best = -1.0;
  for (int g : ctx.points) {
    const auto h = bin_values(hard, g);
    const auto e = bin_values(easy, g);
    InversionLayer layer{g, mean_or_nan(h), mean_or_nan(e), 0.0, {}, std::min(h.size(), e.size())};
    layer.gap = layer.hard_mean - layer.easy_mean;
    layer.gap_ci = summarize(paired_diffs(hard, easy, g), cfg, "inversion:gap:" + std::to_string(g));
    if (std::isfinite(layer.gap) && std::fabs(layer.gap) > best) {
      best = std::fabs(layer.gap);
      result.peak_grid_point = g;
    }
    result.layers.push_back(layer);
  }
  if (best < 0) throw DegenerateInputError("no grid point produced a finite inversion gap");

  const int peak = result.peak_grid_point;
  const auto h = bin_values(hard, peak);
  const auto e = bin_values(easy, peak);
  result.hard_mean = mean(h);
  result.easy_mean = mean(e);
  result.gap = result.hard_mean - result.easy_mean;
  result.n_pairs = std::min(h.size(), e.size());
  result.hard_ci = summarize(h, cfg, "inversion:hard");
  result.easy_ci = summarize(e, cfg, "inversion:easy");
  result.gap_ci = summarize(paired_diffs(hard, easy, peak), cfg, "inversion:gap");
  result.p_value = ctx.problem_permutation(ctx.points, hard, easy, result.metric, derive_seed(cfg.seed, "inversion:peak"));

  // Pairwise bin comparisons at the peak, BH-corrected together.
  std::vector<double> ps;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    for (std::size_t j = i + 1; j < bins.size(); ++j) {
      const auto vi = bin_values(bins[i], peak);
      const auto vj = bin_values(bins[j], peak);
      if (vi.empty() || vj.empty()) {
        result.notices.push_back("bin comparison " + bins[i].name + " vs " + bins[j].name +
                                 " skipped: insufficient problems");
        continue;
      }
      const double p = ctx.problem_permutation({peak}, bins[i], bins[j], result.metric,
                                               derive_seed(cfg.seed, "inversion:bins:" + bins[i].name + ":" + bins[j].name));
      result.comparisons.push_back({bins[i].name, bins[j].name, mean(vi) - mean(vj), p, false});
      ps.push_back(p);
    }
  }
  const auto reject = bh_correct(ps, cfg.q);
  for (std::size_t i = 0; i < reject.size(); ++i) result.comparisons[i].rejected = reject[i];

  // Per-domain gaps at the peak.
  const auto& first = cohort.manifest(cohort.model_ids().front());
  const auto domains = domain_strata(first, cohort.problem_ids());
  if (domains.empty()) {
    result.notices.push_back("domain tags missing; per-domain breakdown skipped");
  } else {
    const std::set<Eigen::Index> hard_rows(hard.rows.begin(), hard.rows.end());
    const std::set<Eigen::Index> easy_rows(easy.rows.begin(), easy.rows.end());
    for (const auto& [name, s] : domains) {
      StratumDef dh{"domain_hard", name, {}}, de{"domain_easy", name, {}};
      for (auto r : cohort.rows_of(s.problem_ids)) {
        if (hard_rows.contains(r)) dh.rows.push_back(r);
        if (easy_rows.contains(r)) de.rows.push_back(r);
      }
      std::ranges::sort(dh.rows);
      std::ranges::sort(de.rows);
      DomainGap d{name, kNaN, kNaN, kNaN, kNaN, dh.rows.size(), de.rows.size(), "insufficient"};
      if (dh.rows.size() >= min_n && de.rows.size() >= min_n) {
        const auto vh = bin_values(dh, peak);
        const auto ve = bin_values(de, peak);
        if (!vh.empty() && !ve.empty()) {
          d.hard_mean = mean(vh);
          d.easy_mean = mean(ve);
          d.gap = d.hard_mean - d.easy_mean;
          d.p_value = ctx.problem_permutation({peak}, dh, de, result.metric, derive_seed(cfg.seed, "inversion:domain:" + name));
          d.status = "ok";
        } else {
          d.status = "degenerate";
        }
      }
      result.domains.push_back(d);
    }
  }

  const std::string metric(to_string(result.metric));
  CsvTable layers(concat({"grid_point", "metric", "hard_mean", "easy_mean", "gap"},
                         concat(ci_header("gap"), {"n_pairs", "n_hard", "n_easy"})));
  for (const auto& l : result.layers) {
    layers.add(concat({std::to_string(l.grid_point), metric, fmt(l.hard_mean), fmt(l.easy_mean), fmt(l.gap)},
                      concat(ci_fields(l.gap_ci),
                             {std::to_string(l.n_pairs), std::to_string(result.n_hard), std::to_string(result.n_easy)})));
  }
  layers.write(cfg.output / "inversion_layers.csv");

  CsvTable summary({"metric", "peak_grid_point", "hard_mean", "hard_ci_low", "hard_ci_high", "easy_mean",
                    "easy_ci_low", "easy_ci_high", "gap", "gap_ci_low", "gap_ci_high", "ci_level", "resamples",
                    "p_value", "iterations", "n_pairs", "n_hard", "n_easy", "seed"});
  summary.add({metric, std::to_string(peak), fmt(result.hard_mean), fmt(result.hard_ci.low),
               fmt(result.hard_ci.high), fmt(result.easy_mean), fmt(result.easy_ci.low), fmt(result.easy_ci.high),
               fmt(result.gap), fmt(result.gap_ci.low), fmt(result.gap_ci.high), fmt(kLevel),
               std::to_string(cfg.resamples), fmt(result.p_value), std::to_string(cfg.iterations),
               std::to_string(result.n_pairs), std::to_string(result.n_hard), std::to_string(result.n_easy),
               std::to_string(cfg.seed)});
  summary.write(cfg.output / "inversion_summary.csv");

  CsvTable comps({"bin_a", "bin_b", "difference", "p_value", "q", "bh_rejected"});
  for (const auto& c : result.comparisons) {
    comps.add({c.bin_a, c.bin_b, fmt(c.difference), fmt(c.p_value), fmt(cfg.q), c.rejected ? "true" : "false"});
  }
  comps.write(cfg.output / "inversion_comparisons.csv");

  CsvTable doms({"domain", "hard_mean", "easy_mean", "gap", "p_value", "n_hard", "n_easy", "status"});
  for (const auto& d : result.domains) {
    doms.add({d.domain, fmt(d.hard_mean), fmt(d.easy_mean), fmt(d.gap), fmt(d.p_value), std::to_string(d.n_hard),
              std::to_string(d.n_easy), d.status});
  }
  doms.write(cfg.output / "inversion_domains.csv");

  Series sh{"hard", {}, {}}, se{"easy", {}, {}}, sg{"gap", {}, {}};
  for (const auto& l : result.layers) {
    sh.x.push_back(l.grid_point);
    sh.y.push_back(l.hard_mean);
    se.x.push_back(l.grid_point);
    se.y.push_back(l.easy_mean);
    sg.x.push_back(l.grid_point);
    sg.y.push_back(l.gap);
  }
  write_text(cfg.output / "inversion.svg",
             emit_svg({sh, se, sg}, {"Difficulty inversion by depth", "grid point", metric}));
  return result;
}

InversionResult run_inversion(const AnalysisConfig& cfg) { return run_inversion(cfg, load_cohort(cfg.cohort)); }

// ----------------------------------------------------------------- stage gap

StageGapResult run_stage_gap(const AnalysisConfig& cfg, const Cohort& cohort) {
  Context ctx(cfg, cohort);
  StageGapResult result;
  result.grid_points = ctx.points;
  const Metric metric = cfg.metrics.front();

  std::map<std::string, std::optional<std::size_t>> decision_index;
  for (const auto& m : cohort.model_ids()) {
    StageModel sm;
    sm.model_id = m;
    sm.chance = majority_rate(cohort.correctness(m));
    for (int g : ctx.points) sm.accuracy.push_back(ctx.probe_accuracy(m, ctx.grid.layer(m, g)));
    const auto split = stage_split(sm.accuracy, sm.chance, cfg.stage_margin, cfg.stage_run);
    if (split) {
      const auto idx = static_cast<std::size_t>(split->decision_layer);
      decision_index[m] = idx;
      sm.decision_grid_point = ctx.points[idx];
      sm.decision_layer = ctx.grid.layer(m, ctx.points[idx]);
    } else {
      decision_index[m] = std::nullopt;
    }
    result.models.push_back(std::move(sm));
  }

  const StratumDef all{"all", "all", iota_rows(ctx.n())};
  std::vector<std::vector<double>> by_point(ctx.points.size());
  std::vector<double> pre_vals, post_vals, gaps;
  for (const auto& [a, b] : ctx.pairs()) {
    std::vector<std::optional<double>> series;
    for (std::size_t i = 0; i < ctx.points.size(); ++i) {
      const int g = ctx.points[i];
      const auto v = ctx.value(a, ctx.grid.layer(a, g), b, ctx.grid.layer(b, g), all, metric);
      series.push_back(v.value);
      if (v.value) by_point[i].push_back(*v.value);
    }
    StagePair p{a, b, 0, 0, kNaN, kNaN, kNaN, "ok"};
    const auto da = decision_index[a], db = decision_index[b];
    if (!da || !db) {
      p.status = "no_decision";
    } else {
      std::vector<double> pre, post;
      for (std::size_t i = 0; i < series.size(); ++i) {
        if (!series[i]) continue;
        if (i < std::min(*da, *db)) pre.push_back(*series[i]);
        if (i >= std::max(*da, *db)) post.push_back(*series[i]);
      }
      p.pre_points = pre.size();
      p.post_points = post.size();
      if (pre.empty() || post.empty()) {
        p.status = "no_stage";
      } else {
        p.pre_mean = mean(pre);
        p.post_mean = mean(post);
        p.gap = p.pre_mean - p.post_mean;
        pre_vals.push_back(p.pre_mean);
        post_vals.push_back(p.post_mean);
        gaps.push_back(p.gap);
      }
    }
    result.pairs.push_back(p);
  }
  for (const auto& v : by_point) result.mean_similarity.push_back(mean_or_nan(v));
  result.n_pairs = gaps.size();
  result.pre_mean = mean_or_nan(pre_vals);
  result.post_mean = mean_or_nan(post_vals);
  result.gap = mean_or_nan(gaps);
  result.pre_ci = summarize(pre_vals, cfg, "stage:pre");
  result.post_ci = summarize(post_vals, cfg, "stage:post");
  result.gap_ci = summarize(gaps, cfg, "stage:gap");

  CsvTable acc({"model_id", "grid_point", "layer", "cv_accuracy", "chance", "folds", "seeds"});
  CsvTable decisions({"model_id", "chance", "margin", "run_length", "decision_grid_point", "decision_layer", "status"});
  for (const auto& m : result.models) {
    for (std::size_t i = 0; i < ctx.points.size(); ++i) {
      acc.add({m.model_id, std::to_string(ctx.points[i]), std::to_string(ctx.grid.layer(m.model_id, ctx.points[i])),
               fmt(m.accuracy[i]), fmt(m.chance), std::to_string(cfg.folds), std::to_string(cfg.probe_seeds.size())});
    }
    decisions.add({m.model_id, fmt(m.chance), fmt(cfg.stage_margin), std::to_string(cfg.stage_run),
                   m.decision_grid_point ? std::to_string(*m.decision_grid_point) : "",
                   m.decision_layer ? std::to_string(*m.decision_layer) : "",
                   m.decision_grid_point ? "ok" : "no_decision"});
  }
  acc.write(cfg.output / "stage_accuracy.csv");
  decisions.write(cfg.output / "stage_decisions.csv");

  CsvTable pairs({"model_a", "model_b", "metric", "pre_points", "post_points", "pre_mean", "post_mean", "gap", "status"});
  for (const auto& p : result.pairs) {
    pairs.add({p.model_a, p.model_b, std::string(to_string(metric)), std::to_string(p.pre_points),
               std::to_string(p.post_points), fmt(p.pre_mean), fmt(p.post_mean), fmt(p.gap), p.status});
  }
  pairs.write(cfg.output / "stage_gap.csv");

  CsvTable summary(concat(concat(concat({"metric", "pre_mean"}, ci_header("pre")), concat({"post_mean"}, ci_header("post"))),
                          concat(concat({"gap"}, ci_header("gap")), {"n_pairs"})));
  summary.add(concat(concat(concat({std::string(to_string(metric)), fmt(result.pre_mean)}, ci_fields(result.pre_ci)),
                            concat({fmt(result.post_mean)}, ci_fields(result.post_ci))),
                     concat(concat({fmt(result.gap)}, ci_fields(result.gap_ci)), {std::to_string(result.n_pairs)})));
  summary.write(cfg.output / "stage_gap_summary.csv");

  Series sim{"mean " + std::string(to_string(metric)), {}, {}}, probe{"mean probe accuracy", {}, {}};
  for (std::size_t i = 0; i < ctx.points.size(); ++i) {
    sim.x.push_back(ctx.points[i]);
    sim.y.push_back(result.mean_similarity[i]);
    std::vector<double> a;
    for (const auto& m : result.models) a.push_back(m.accuracy[i]);
    probe.x.push_back(ctx.points[i]);
    probe.y.push_back(mean(a));
  }
  write_text(cfg.output / "stage_gap.svg", emit_svg({sim, probe}, {"Pre/post decision similarity", "grid point", "value"}));
  return result;
}

StageGapResult run_stage_gap(const AnalysisConfig& cfg) { return run_stage_gap(cfg, load_cohort(cfg.cohort)); }

// ------------------------------------------------------------------ transfer

TransferAnalysis run_transfer(const AnalysisConfig& cfg, const Cohort& cohort) {
  Context ctx(cfg, cohort);
  TransferAnalysis result;
  fs::create_directories(cfg.output / "probes");
  std::map<std::string, ProbeModel> probes;

  for (const auto& m : cohort.model_ids()) {
    int g = 0;
    if (cfg.probe_grid_point == "peak") {
      double best = -1.0;
      for (int p : ctx.points) {
        const double acc = ctx.probe_accuracy(m, ctx.grid.layer(m, p));
        if (acc > best) {
          best = acc;
          g = p;
        }
      }
    } else {
      g = std::stoi(cfg.probe_grid_point);
    }
    const int layer = ctx.grid.layer(m, g);
    auto probe = train_probe(ctx.matrix(m, layer), cohort.correctness(m), probe_options(cfg), m,
                             static_cast<std::uint32_t>(layer));
    const std::string file = m + ".probe.json";
    write_probe(probe, cfg.output / "probes" / file);
    result.probes.push_back({m, g, layer, probe.cv_accuracy, file});
    probes.emplace(m, std::move(probe));
  }

  json index = json::array();
  for (const auto& p : result.probes) {
    index.push_back({{"model_id", p.model_id},
                     {"grid_point", p.grid_point},
                     {"layer", p.layer},
                     {"cv_accuracy", p.cv_accuracy},
                     {"file", p.file}});
  }
  write_text(cfg.output / kProbeIndex, json{{"probes", index}}.dump(2) + "\n");

  for (const auto& src : result.probes) {
    const auto& probe = probes.at(src.model_id);
    for (const auto& t : cohort.model_ids()) {
      if (t == src.model_id) continue;
      TransferRow row;
      row.source = src.model_id;
      row.target = t;
      row.grid_point = src.grid_point;
      row.source_layer = src.layer;
      row.target_layer = ctx.grid.layer(t, src.grid_point);
      const auto& x = ctx.matrix(t, row.target_layer);
      const auto labels = cohort.correctness(t);
      const auto seed = derive_seed(cfg.seed, "transfer:" + src.model_id + ":" + t);
      if (x.cols() == probe.dim()) {
        const auto r = transfer_eval(probe, x, labels, nullptr, t);
        row.accuracy = r.accuracy;
        row.majority = r.majority_baseline;
        row.n = r.n;
        row.permutation = permutation_baseline(probe, x, labels, cfg.baseline_iterations, seed);
        row.status = "ok";
      } else if (cfg.bridge) {
        // Calibrate on a seeded half of the problems, evaluate on the rest.
        std::vector<Eigen::Index> order = iota_rows(ctx.n());
        std::mt19937_64 rng(derive_seed(seed, "bridge"));
        std::shuffle(order.begin(), order.end(), rng);
        const auto half = static_cast<std::ptrdiff_t>(order.size() / 2);
        std::vector<Eigen::Index> cal(order.begin(), order.begin() + half), eval(order.begin() + half, order.end());
        std::ranges::sort(cal);
        std::ranges::sort(eval);
        const auto bridge = fit_bridge(x(cal, Eigen::all), ctx.matrix(src.model_id, src.layer)(cal, Eigen::all),
                                       cfg.bridge_alpha);
        const Eigen::MatrixXd xe = x(eval, Eigen::all);
        std::vector<bool> le;
        for (auto i : eval) le.push_back(labels[static_cast<std::size_t>(i)]);
        const auto r = transfer_eval(probe, xe, le, &bridge, t);
        row.accuracy = r.accuracy;
        row.majority = r.majority_baseline;
        row.n = r.n;
        row.bridged = true;
        row.permutation = permutation_baseline(probe, xe, le, cfg.baseline_iterations, seed, &bridge);
        row.status = "ok";
      } else {
        row.accuracy = row.majority = kNaN;
        row.permutation = {kNaN, kNaN, kNaN, 0, seed};
        row.n = labels.size();
        row.status = "incompatible_dims";
      }
      result.rows.push_back(row);
    }
  }

  std::vector<double> acc, maj, perm;
  std::map<std::pair<std::string, std::string>, std::vector<const TransferRow*>> unordered;
  for (const auto& r : result.rows) {
    if (r.status != "ok") continue;
    acc.push_back(r.accuracy);
    maj.push_back(r.majority);
    perm.push_back(r.permutation.mean);
    ++result.ordered_total;
    if (r.accuracy > r.majority) ++result.ordered_above;
    unordered[std::minmax(r.source, r.target)].push_back(&r);
  }
  for (const auto& [pair, rows] : unordered) {
    if (rows.size() != 2) continue;
    ++result.unordered_total;
    const double a = (rows[0]->accuracy + rows[1]->accuracy) / 2;
    const double m = (rows[0]->majority + rows[1]->majority) / 2;
    if (a > m) ++result.unordered_above;
  }
  result.mean_accuracy = mean_or_nan(acc);
  result.mean_majority = mean_or_nan(maj);
  result.mean_permutation = mean_or_nan(perm);
  result.accuracy_ci = summarize(acc, cfg, "transfer:accuracy");

  CsvTable probes_csv({"model_id", "grid_point", "layer", "cv_accuracy", "folds", "seeds", "lambda", "file"});
  for (const auto& p : result.probes) {
    probes_csv.add({p.model_id, std::to_string(p.grid_point), std::to_string(p.layer), fmt(p.cv_accuracy),
                    std::to_string(cfg.folds), std::to_string(cfg.probe_seeds.size()), fmt(cfg.lambda), p.file});
  }
  probes_csv.write(cfg.output / "transfer_probes.csv");

  CsvTable rows({"source", "target", "grid_point", "source_layer", "target_layer", "accuracy", "majority",
                 "permutation_mean", "permutation_p95", "permutation_sd", "permutation_iterations", "n", "bridged",
                 "status"});
  for (const auto& r : result.rows) {
    rows.add({r.source, r.target, std::to_string(r.grid_point), std::to_string(r.source_layer),
              std::to_string(r.target_layer), fmt(r.accuracy), fmt(r.majority), fmt(r.permutation.mean),
              fmt(r.permutation.p95), fmt(r.permutation.sd), std::to_string(r.permutation.iterations),
              std::to_string(r.n), r.bridged ? "true" : "false", r.status});
  }
  rows.write(cfg.output / "transfer.csv");

  CsvTable summary(concat(concat({"mean_accuracy"}, ci_header("accuracy")),
                          {"mean_majority", "mean_permutation", "ordered_pairs_above_majority", "ordered_pairs",
                           "unordered_pairs_above_majority", "unordered_pairs", "bridge"}));
  summary.add(concat(concat({fmt(result.mean_accuracy)}, ci_fields(result.accuracy_ci)),
                     {fmt(result.mean_majority), fmt(result.mean_permutation), std::to_string(result.ordered_above),
                      std::to_string(result.ordered_total), std::to_string(result.unordered_above),
                      std::to_string(result.unordered_total), cfg.bridge ? "ridge" : "disabled"}));
  summary.write(cfg.output / "transfer_summary.csv");

  Series sa{"transfer accuracy", {}, {}}, sm{"majority", {}, {}}, sp{"permutation mean", {}, {}};
  for (std::size_t i = 0; i < result.probes.size(); ++i) {
    std::vector<double> a, m, p;
    for (const auto& r : result.rows) {
      if (r.source == result.probes[i].model_id && r.status == "ok") {
        a.push_back(r.accuracy);
        m.push_back(r.majority);
        p.push_back(r.permutation.mean);
      }
    }
    if (a.empty()) continue;
    const auto x = static_cast<double>(i);
    sa.x.push_back(x);
    sa.y.push_back(mean(a));
    sm.x.push_back(x);
    sm.y.push_back(mean(m));
    sp.x.push_back(x);
    sp.y.push_back(mean(p));
  }
  if (!sa.x.empty()) {
    write_text(cfg.output / "transfer.svg",
               emit_svg({sa, sm, sp}, {"Transfer accuracy by source model", "source model index", "accuracy"}));
  }
  return result;
}

TransferAnalysis run_transfer(const AnalysisConfig& cfg) { return run_transfer(cfg, load_cohort(cfg.cohort)); }

std::vector<ProbeEntry> read_probe_index(const fs::path& output) {
  const auto path = output / kProbeIndex;
  std::ifstream in(path);
  if (!in) {
    throw DependencyError("no probes found at " + path.string() + "; run the `transfer` subcommand first");
  }
  try {
    const auto j = json::parse(in);
    std::vector<ProbeEntry> out;
    for (const auto& p : j.at("probes")) {
      out.push_back({p.at("model_id").get<std::string>(), p.at("grid_point").get<int>(), p.at("layer").get<int>(),
                     p.at("cv_accuracy").get<double>(), p.at("file").get<std::string>()});
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed probe index: " + e.what());
  }
}

// ------------------------------------------------------------------ ablation

AblationAnalysis run_ablation(const AnalysisConfig& cfg, const Cohort& cohort) {
  const auto entries = read_probe_index(cfg.output);
  Context ctx(cfg, cohort);
  AblationAnalysis result;
  fs::create_directories(cfg.output / "interventions");

  std::vector<AblationProtocol> protocols;
  for (const auto& p : cfg.protocols) protocols.push_back(protocol_from_string(p));

  for (const auto& entry : entries) {
    const auto& m = entry.model_id;
    if (std::ranges::find(cohort.model_ids(), m) == cohort.model_ids().end()) {
      throw ValidationError("probe index names model " + m + ", which is not in the cohort");
    }
    const auto probe = read_probe(cfg.output / "probes" / entry.file);
    SubspaceRule rule;
    if (cfg.subspace_k > 0) rule.k = cfg.subspace_k;
    rule.variance = cfg.subspace_variance;
    const auto s = correctness_subspace(probe, rule);
    const auto control = random_orthogonal_subspace(s.dim(), s.k(), s.basis, derive_seed(cfg.seed, "control:" + m));
    const auto& x = ctx.matrix(m, entry.layer);
    const auto labels = cohort.correctness(m);
    const auto drop = probe_accuracy_drop(x, labels, s, probe);
    const auto control_drop = probe_accuracy_drop(x, labels, control, probe);

    const std::string basis_file = m + ".basis.json";
    write_subspace(s, cfg.output / "interventions" / basis_file);

    for (auto protocol : protocols) {
      AblationRow row;
      row.model_id = m;
      row.protocol = protocol;
      row.grid_point = entry.grid_point;
      row.layer = entry.layer;
      row.k = s.k();
      row.variance_captured = s.variance_captured;
      row.accuracy_before = drop.before;
      row.accuracy_after = drop.after;
      row.accuracy_after_control = control_drop.after;
      row.majority = majority_rate(labels);
      row.predictor = "probe";
      const auto ids = protocol_problems(ctx.profile, cohort.manifest(m), protocol);
      if (ids.empty()) {
        row.status = "empty";
        row.flip_rate = row.control_flip_rate = kNaN;
        result.rows.push_back(row);
        continue;
      }
      const InterventionRequest request{m, static_cast<std::uint32_t>(entry.layer), "subspace_projection",
                                        basis_file, std::nullopt, ids};
      const std::string stem = m + "__" + to_string(protocol);
      write_text(cfg.output / "interventions" / (stem + ".request.json"), request_to_json(request));

      const Eigen::MatrixXd xp = x(cohort.rows_of(ids), Eigen::all);
      const auto before = probe.predict(xp);
      auto report = flip_rate(ids, before, probe.predict(ablate(xp, s)), protocol);
      const auto control_report = flip_rate(ids, before, probe.predict(ablate(xp, control)), protocol);
      if (!cfg.intervention_responses.empty()) {
        const auto response_path = cfg.intervention_responses / (stem + ".response.json");
        if (fs::exists(response_path)) {
          std::ifstream in(response_path);
          const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
          const auto response = response_from_json(text);
          check_response(request, response);
          report = flip_rate(response, protocol);
          row.predictor = "external";
        }
      }
      row.n = report.n;
      row.changed = report.changed;
      row.flip_rate = report.flip_rate;
      row.control_changed = control_report.changed;
      row.control_flip_rate = control_report.flip_rate;
      row.status = "ok";
      result.rows.push_back(row);
    }
  }

  for (auto protocol : protocols) {
    std::vector<double> flips, controls;
    for (const auto& r : result.rows) {
      if (r.protocol == protocol && r.status == "ok") {
        flips.push_back(r.flip_rate);
        controls.push_back(r.control_flip_rate);
      }
    }
    ProtocolSummary ps{protocol, mean_or_nan(flips), mean_or_nan(controls), {}, flips.size()};
    ps.flip_ci = summarize(flips, cfg, "ablation:" + to_string(protocol));
    result.summary.push_back(ps);
  }

  CsvTable rows({"model_id", "protocol", "grid_point", "layer", "k", "variance_captured", "n", "changed",
                 "flip_rate", "control_changed", "control_flip_rate", "accuracy_before", "accuracy_after",
                 "accuracy_after_control", "majority", "predictor", "status"});
  for (const auto& r : result.rows) {
    rows.add({r.model_id, to_string(r.protocol), std::to_string(r.grid_point), std::to_string(r.layer),
              std::to_string(r.k), fmt(r.variance_captured), std::to_string(r.n), std::to_string(r.changed),
              fmt(r.flip_rate), std::to_string(r.control_changed), fmt(r.control_flip_rate), fmt(r.accuracy_before),
              fmt(r.accuracy_after), fmt(r.accuracy_after_control), fmt(r.majority), r.predictor, r.status});
  }
  rows.write(cfg.output / "ablation.csv");

  CsvTable summary(concat(concat({"protocol", "mean_flip_rate"}, ci_header("flip")),
                          {"mean_control_flip_rate", "n_models"}));
  for (const auto& s : result.summary) {
    summary.add(concat(concat({to_string(s.protocol), fmt(s.mean_flip)}, ci_fields(s.flip_ci)),
                       {fmt(s.mean_control_flip), std::to_string(s.n_models)}));
  }
  summary.write(cfg.output / "ablation_summary.csv");

  if (!cfg.head_records.empty()) {
    std::ifstream in(cfg.head_records);
    if (!in) throw Error("cannot open head records " + cfg.head_records.string());
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    result.heads = head_ablation_report(head_records_from_json(text));
    CsvTable heads({"model_id", "attention_type", "layer", "head", "n", "flips", "flip_rate"});
    for (const auto& h : result.heads->heads) {
      heads.add({h.model_id, h.attention_type, std::to_string(h.layer), std::to_string(h.head), std::to_string(h.n),
                 std::to_string(h.flips), fmt(h.rate)});
    }
    heads.write(cfg.output / "head_ablation.csv");
    CsvTable maxes({"model_id", "attention_type", "layer", "head", "n", "max_flip_rate"});
    for (const auto& [model, mx] : result.heads->per_model) {
      maxes.add({model, mx.attention_type, std::to_string(mx.max.layer), std::to_string(mx.max.head),
                 std::to_string(mx.max.n), fmt(mx.max.rate)});
    }
    maxes.write(cfg.output / "head_ablation_models.csv");
    CsvTable types({"attention_type", "min_of_max", "max_of_max", "n_models"});
    for (const auto& [type, r] : result.heads->per_type) {
      types.add({type, fmt(r.min_of_max), fmt(r.max_of_max), std::to_string(r.models)});
    }
    types.write(cfg.output / "head_ablation_types.csv");
  }

  std::vector<Series> series;
  for (auto protocol : protocols) {
    Series f{"flip " + to_string(protocol), {}, {}}, c{"control " + to_string(protocol), {}, {}};
    std::size_t i = 0;
    for (const auto& r : result.rows) {
      if (r.protocol != protocol) continue;
      if (r.status == "ok") {
        f.x.push_back(static_cast<double>(i));
        f.y.push_back(r.flip_rate);
        c.x.push_back(static_cast<double>(i));
        c.y.push_back(r.control_flip_rate);
      }
      ++i;
    }
    if (!f.x.empty()) {
      series.push_back(f);
      series.push_back(c);
    }
  }
  if (!series.empty()) {
    write_text(cfg.output / "ablation.svg", emit_svg(series, {"Subspace ablation flip rate", "model index", "flip rate"}));
  }
  return result;
}

AblationAnalysis run_ablation(const AnalysisConfig& cfg) {
  read_probe_index(cfg.output);  // fail on the missing dependency before loading the cohort
  return run_ablation(cfg, load_cohort(cfg.cohort));
}

// ------------------------------------------------------------------- entropy

EntropyAnalysis run_entropy(const AnalysisConfig& cfg, const Cohort& cohort) {
  Context ctx(cfg, cohort);
  EntropyAnalysis result;
  std::vector<double> counts;
  for (int c : ctx.profile.counts) counts.push_back(c);

  std::vector<double> ps;
  std::vector<Series> series;
  for (const auto& m : cohort.model_ids()) {
    const auto& man = cohort.manifest(m);
    std::vector<double> entropy;
    for (const auto& id : cohort.problem_ids()) {
      const auto* r = man.find(id);
      if (!r || !r->mean_attention_entropy) {
        throw DependencyError("entropy scalars missing for model " + m + " (problem " + id +
                              "); they are written into manifests by the extractor");
      }
      entropy.push_back(*r->mean_attention_entropy);
    }
    EntropyRow row{m, entropy.size(), pearson(entropy, counts), 1.0, false};

    // Permutation p-value for |r|, (b + 1) / (N + 1).
    const auto seed = derive_seed(cfg.seed, "entropy:" + m);
    std::size_t extreme = 0;
    std::vector<double> shuffled;
    for (int it = 0; it < cfg.iterations; ++it) {
      shuffled = entropy;
      std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(it)));
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      if (std::fabs(pearson(shuffled, counts)) >= std::fabs(row.r) - 1e-12) ++extreme;
    }
    row.p_value = static_cast<double>(extreme + 1) / (cfg.iterations + 1.0);
    ps.push_back(row.p_value);
    result.rows.push_back(row);

    Series s{m, {}, {}};
    for (int c = 0; c <= ctx.profile.cohort_size; ++c) {
      std::vector<double> at;
      for (std::size_t i = 0; i < counts.size(); ++i) {
        if (ctx.profile.counts[i] == c) at.push_back(entropy[i]);
      }
      if (!at.empty()) {
        s.x.push_back(c);
        s.y.push_back(mean(at));
      }
    }
    series.push_back(std::move(s));
  }
  const auto reject = bh_correct(ps, cfg.q);
  std::vector<double> rs;
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    result.rows[i].rejected = reject[i];
    rs.push_back(result.rows[i].r);
  }
  result.n_models = rs.size();
  result.mean_r = mean(rs);
  result.r_ci = summarize(rs, cfg, "entropy:r");

  CsvTable rows({"model_id", "n", "pearson_r", "p_value", "iterations", "q", "bh_rejected"});
  for (const auto& r : result.rows) {
    rows.add({r.model_id, std::to_string(r.n), fmt(r.r), fmt(r.p_value), std::to_string(cfg.iterations), fmt(cfg.q),
              r.rejected ? "true" : "false"});
  }
  rows.write(cfg.output / "entropy.csv");
  CsvTable summary(concat(concat({"mean_r"}, ci_header("r")), {"n_models", "difficulty_axis"}));
  summary.add(concat(concat({fmt(result.mean_r)}, ci_fields(result.r_ci)),
                     {std::to_string(result.n_models), "models_correct"}));
  summary.write(cfg.output / "entropy_summary.csv");
  write_text(cfg.output / "entropy.svg",
             emit_svg(series, {"Mean attention entropy by difficulty", "models correct", "entropy (nats)"}));
  return result;
}

EntropyAnalysis run_entropy(const AnalysisConfig& cfg) { return run_entropy(cfg, load_cohort(cfg.cohort)); }

// -------------------------------------------------------------------- report

std::string write_report(const AnalysisConfig& cfg) {
  static const std::vector<std::pair<std::string, std::string>> sections = {
      {"Similarity", "similarity_summary.csv"},     {"Difficulty inversion", "inversion_summary.csv"},
      {"Inversion bin comparisons", "inversion_comparisons.csv"},
      {"Inversion by domain", "inversion_domains.csv"}, {"Stage gap", "stage_gap_summary.csv"},
      {"Stage decisions", "stage_decisions.csv"},   {"Transfer", "transfer_summary.csv"},
      {"Ablation", "ablation_summary.csv"},          {"Head ablation", "head_ablation_types.csv"},
      {"Entropy", "entropy_summary.csv"}};
  static const std::vector<std::string> figures = {"similarity.svg", "inversion.svg", "stage_gap.svg",
                                                   "transfer.svg",   "ablation.svg",  "entropy.svg"};
  if (!fs::is_directory(cfg.output)) {
    throw DependencyError("output directory " + cfg.output.string() + " does not exist; run an analysis first");
  }
  std::string md = "# simlab report\n\nseed: " + std::to_string(cfg.seed) + "\n";
  std::size_t found = 0;
  for (const auto& [title, file] : sections) {
    const auto path = cfg.output / file;
    if (!fs::exists(path)) continue;
    ++found;
    const auto table = read_csv(path);
    md += "\n## " + title + "\n\nSource: `" + file + "`\n\n|";
    for (const auto& h : table.header()) md += " " + h + " |";
    md += "\n|";
    for (std::size_t i = 0; i < table.header().size(); ++i) md += " --- |";
    md += "\n";
    for (const auto& r : table.rows()) {
      md += "|";
      for (const auto& f : r) md += " " + f + " |";
      md += "\n";
    }
  }
  std::string figs;
  for (const auto& f : figures) {
    if (fs::exists(cfg.output / f)) figs += "- ![" + f + "](" + f + ")\n";
  }
  if (!figs.empty()) md += "\n## Figures\n\n" + figs;
  if (found == 0) throw DependencyError("no analysis tables in " + cfg.output.string() + "; run an analysis first");
  write_text(cfg.output / "report.md", md);
  return md;
}

}  // namespace simlab::report
