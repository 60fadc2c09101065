#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "simlab/metrics.hpp"

namespace simlab::report {

/// Settings shared by every analysis subcommand. The file form is one
/// `key = value` per line; lines starting with `#` are comments; lists are comma-separated.
struct AnalysisConfig {
  std::filesystem::path cohort;
  std::filesystem::path output = "simlab_out";
  std::vector<Metric> metrics{Metric::linear_cka};
  std::string grid_points = "all";  // "all" or a comma list of grid points
  int grid_size = 21;
  std::vector<std::string> strata{"all", "difficulty"};
  int n_min = 10;
  int resamples = 1000;
  int iterations = 10000;
  double q = 0.05;
  std::uint64_t seed = 42;
  int mnn_k = 5;
  double svcca_threshold = 0.99;
  bool problem_bootstrap = false;

  double lambda = 0.01;
  int folds = 5;
  std::vector<std::uint64_t> probe_seeds{42, 123, 456, 789, 1024};
  double stage_margin = 0.05;
  int stage_run = 2;
  std::string probe_grid_point = "peak";  // "peak" or a grid point
  bool bridge = false;
  double bridge_alpha = 1.0;
  int baseline_iterations = 1000;

  std::vector<std::string> protocols{"strict_all_correct", "relaxed_10_of_14"};
  int subspace_k = 0;  // 0 selects the variance rule
  double subspace_variance = 0.90;
  std::filesystem::path intervention_responses;  // optional
  std::filesystem::path head_records;            // optional

  bool operator==(const AnalysisConfig&) const = default;
};

std::string config_to_text(const AnalysisConfig& config);
AnalysisConfig config_from_text(std::string_view text);
AnalysisConfig load_config(const std::filesystem::path& path);
void save_config(const AnalysisConfig& config, const std::filesystem::path& path);

/// Range checks that do not touch the filesystem.
void check_config(const AnalysisConfig& config);

/// Selected grid points, in increasing order.
std::vector<int> selected_grid_points(const AnalysisConfig& config);

}  // namespace simlab::report
