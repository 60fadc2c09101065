#include "simlab/report/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "simlab/error.hpp"

namespace simlab::report {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

// Shortest text that parses back to the same double.
std::string exact(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ValidationError("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ValidationError("config key '" + key + "': expected true or false, got '" + value + "'");
}

}  // namespace

std::string config_to_text(const AnalysisConfig& c) {
  std::vector<std::string> metrics, seeds;
  for (auto m : c.metrics) metrics.emplace_back(to_string(m));
  for (auto s : c.probe_seeds) seeds.push_back(std::to_string(s));
  std::ostringstream out;
  out << "# simlab analysis config\n"
      << "cohort = " << c.cohort.string() << "\n"
      << "output = " << c.output.string() << "\n"
      << "metrics = " << join(metrics) << "\n"
      << "grid_points = " << c.grid_points << "\n"
      << "grid_size = " << c.grid_size << "\n"
      << "strata = " << join(c.strata) << "\n"
      << "n_min = " << c.n_min << "\n"
      << "resamples = " << c.resamples << "\n"
      << "iterations = " << c.iterations << "\n"
      << "q = " << exact(c.q) << "\n"
      << "seed = " << c.seed << "\n"
      << "mnn_k = " << c.mnn_k << "\n"
      << "svcca_threshold = " << exact(c.svcca_threshold) << "\n"
      << "problem_bootstrap = " << (c.problem_bootstrap ? "true" : "false") << "\n"
      << "lambda = " << exact(c.lambda) << "\n"
      << "folds = " << c.folds << "\n"
      << "probe_seeds = " << join(seeds) << "\n"
      << "stage_margin = " << exact(c.stage_margin) << "\n"
      << "stage_run = " << c.stage_run << "\n"
      << "probe_grid_point = " << c.probe_grid_point << "\n"
      << "bridge = " << (c.bridge ? "true" : "false") << "\n"
      << "bridge_alpha = " << exact(c.bridge_alpha) << "\n"
      << "baseline_iterations = " << c.baseline_iterations << "\n"
      << "protocols = " << join(c.protocols) << "\n"
      << "subspace_k = " << c.subspace_k << "\n"
      << "subspace_variance = " << exact(c.subspace_variance) << "\n"
      << "intervention_responses = " << c.intervention_responses.string() << "\n"
      << "head_records = " << c.head_records.string() << "\n";
  return out.str();
}

AnalysisConfig config_from_text(std::string_view text) {
  AnalysisConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"cohort", [&](auto&, auto& v) { c.cohort = v; }},
      {"output", [&](auto&, auto& v) { c.output = v; }},
      {"metrics",
       [&](auto&, auto& v) {
         c.metrics.clear();
         for (const auto& m : split_list(v)) c.metrics.push_back(metric_from_string(m));
       }},
      {"grid_points", [&](auto&, auto& v) { c.grid_points = v; }},
      {"grid_size", [&](auto& k, auto& v) { c.grid_size = parse_number<int>(k, v); }},
      {"strata", [&](auto&, auto& v) { c.strata = split_list(v); }},
      {"n_min", [&](auto& k, auto& v) { c.n_min = parse_number<int>(k, v); }},
      {"resamples", [&](auto& k, auto& v) { c.resamples = parse_number<int>(k, v); }},
      {"iterations", [&](auto& k, auto& v) { c.iterations = parse_number<int>(k, v); }},
      {"q", [&](auto& k, auto& v) { c.q = parse_number<double>(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"mnn_k", [&](auto& k, auto& v) { c.mnn_k = parse_number<int>(k, v); }},
      {"svcca_threshold", [&](auto& k, auto& v) { c.svcca_threshold = parse_number<double>(k, v); }},
      {"problem_bootstrap", [&](auto& k, auto& v) { c.problem_bootstrap = parse_bool(k, v); }},
      {"lambda", [&](auto& k, auto& v) { c.lambda = parse_number<double>(k, v); }},
      {"folds", [&](auto& k, auto& v) { c.folds = parse_number<int>(k, v); }},
      {"probe_seeds",
       [&](auto& k, auto& v) {
         c.probe_seeds.clear();
         for (const auto& s : split_list(v)) c.probe_seeds.push_back(parse_number<std::uint64_t>(k, s));
       }},
      {"stage_margin", [&](auto& k, auto& v) { c.stage_margin = parse_number<double>(k, v); }},
      {"stage_run", [&](auto& k, auto& v) { c.stage_run = parse_number<int>(k, v); }},
      {"probe_grid_point", [&](auto&, auto& v) { c.probe_grid_point = v; }},
      {"bridge", [&](auto& k, auto& v) { c.bridge = parse_bool(k, v); }},
      {"bridge_alpha", [&](auto& k, auto& v) { c.bridge_alpha = parse_number<double>(k, v); }},
      {"baseline_iterations",
       [&](auto& k, auto& v) { c.baseline_iterations = parse_number<int>(k, v); }},
      {"protocols", [&](auto&, auto& v) { c.protocols = split_list(v); }},
      {"subspace_k", [&](auto& k, auto& v) { c.subspace_k = parse_number<int>(k, v); }},
      {"subspace_variance",
       [&](auto& k, auto& v) { c.subspace_variance = parse_number<double>(k, v); }},
      {"intervention_responses", [&](auto&, auto& v) { c.intervention_responses = v; }},
      {"head_records", [&](auto&, auto& v) { c.head_records = v; }},
  };

  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(std::string_view(body).substr(0, eq));
    const auto value = trim(std::string_view(body).substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError("unknown config key '" + key + "'");
    if (!seen.insert(key).second) throw ValidationError("duplicate config key '" + key + "'");
    it->second(key, value);
  }
  check_config(c);
  return c;
}

AnalysisConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return config_from_text(text);
}

void save_config(const AnalysisConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write config " + path.string());
  out << config_to_text(config);
}

void check_config(const AnalysisConfig& c) {
  if (c.grid_size < 2) throw ValidationError("grid_size must be >= 2");
  if (c.n_min < 2) throw ValidationError("n_min must be >= 2");
  if (c.resamples < 1) throw ValidationError("resamples must be >= 1");
  if (c.iterations < 1) throw ValidationError("iterations must be >= 1");
  if (!(c.q > 0 && c.q <= 1)) throw ValidationError("q must lie in (0, 1]");
  if (c.metrics.empty()) throw ValidationError("at least one metric is required");
  if (c.strata.empty()) throw ValidationError("at least one stratum family is required");
  static const std::set<std::string> families{"all", "difficulty", "singleton", "agreement",
                                              "correctness", "domain"};
  for (const auto& s : c.strata) {
    if (!families.contains(s)) throw ValidationError("unknown stratum family '" + s + "'");
  }
  if (c.mnn_k < 1) throw ValidationError("mnn_k must be >= 1");
  if (!(c.svcca_threshold > 0 && c.svcca_threshold <= 1)) {
    throw ValidationError("svcca_threshold must lie in (0, 1]");
  }
  if (c.lambda < 0) throw ValidationError("lambda must be >= 0");
  if (c.folds < 2) throw ValidationError("folds must be >= 2");
  if (c.probe_seeds.empty()) throw ValidationError("probe_seeds must not be empty");
  if (c.stage_run < 1) throw ValidationError("stage_run must be >= 1");
  if (c.baseline_iterations < 100) throw ValidationError("baseline_iterations must be >= 100");
  if (c.bridge_alpha <= 0) throw ValidationError("bridge_alpha must be > 0");
  if (c.subspace_k < 0) throw ValidationError("subspace_k must be >= 0");
  if (!(c.subspace_variance > 0 && c.subspace_variance <= 1)) {
    throw ValidationError("subspace_variance must lie in (0, 1]");
  }
  for (const auto& p : c.protocols) {
    if (p != "strict_all_correct" && p != "relaxed_10_of_14") {
      throw ValidationError("unknown protocol '" + p + "'");
    }
  }
  if (c.probe_grid_point != "peak") {
    const int g = parse_number<int>("probe_grid_point", c.probe_grid_point);
    if (g < 0 || g >= c.grid_size) throw ValidationError("probe_grid_point outside the grid");
  }
  selected_grid_points(c);
}

std::vector<int> selected_grid_points(const AnalysisConfig& c) {
  std::vector<int> out;
  if (c.grid_points == "all") {
    for (int g = 0; g < c.grid_size; ++g) out.push_back(g);
    return out;
  }
  for (const auto& item : split_list(c.grid_points)) {
    const int g = parse_number<int>("grid_points", item);
    if (g < 0 || g >= c.grid_size) {
      throw ValidationError("grid point " + item + " outside 0.." + std::to_string(c.grid_size - 1));
    }
    out.push_back(g);
  }
  std::ranges::sort(out);
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw ValidationError("no grid points selected");
  return out;
}

}  // namespace simlab::report
