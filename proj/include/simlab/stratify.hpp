#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "simlab/activation_store.hpp"

namespace simlab {

/// Per-problem count of models answering correctly.
struct DifficultyProfile {
  int cohort_size = 0;
  std::vector<std::string> problem_ids;
  std::vector<int> counts;  // parallel to problem_ids

  int count(const std::string& problem_id) const;
  /// Histogram over counts 0..cohort_size.
  std::vector<int> histogram() const;
};

DifficultyProfile difficulty(const CohortIndex& cohort, std::span<const RunManifest> manifests);
DifficultyProfile difficulty(const Cohort& cohort);

/// Builds a profile directly from counts (for fixtures and replays).
DifficultyProfile difficulty_from_counts(int cohort_size, std::vector<std::string> problem_ids,
                                         std::vector<int> counts);

enum class StratumKind { difficulty_bin, agreement, correctness_pair, domain, custom };

struct Stratum {
  std::string name;
  StratumKind kind = StratumKind::custom;
  std::string definition;  // e.g. "count 0-4", "same_answer", "domain=math"
  std::vector<std::string> problem_ids;
};

std::string stratum_to_json(const Stratum& stratum);
Stratum stratum_from_json(std::string_view text);

/// Inclusive range of correct-model counts.
struct CountRange {
  std::string name;
  int lo = 0;
  int hi = 0;
};

/// Thirds of the count range 0..M: for M = 14 this is hard 0-4, medium 5-9,
/// easy 10-14.
std::vector<CountRange> default_difficulty_edges(int cohort_size);

/// One range per count value (0..M), named by the count.
std::vector<CountRange> singleton_edges(int cohort_size);

/// Partitions the profile; edges must be disjoint and cover 0..M.
std::vector<Stratum> bin_by_difficulty(const DifficultyProfile& profile,
                                       std::span<const CountRange> edges);

struct AgreementStrata {
  Stratum same_answer;
  Stratum different_answer;
  Stratum both_correct;
  Stratum both_wrong;
  Stratum split;  // exactly one model correct
};

/// Partitions `problem_ids` for a model pair by answer agreement and by
/// joint correctness.
AgreementStrata agreement_strata(const RunManifest& a, const RunManifest& b,
                                 std::span<const std::string> problem_ids);

/// Problems grouped by domain tag; empty map if any shared problem lacks one.
std::map<std::string, Stratum> domain_strata(const RunManifest& manifest,
                                             std::span<const std::string> problem_ids);

inline constexpr int kDefaultGridSize = 21;

/// Native layer for grid point g: round(g (L-1) / (G-1)), halves rounded up.
std::vector<int> grid_mapping(int num_layers, int grid_size = kDefaultGridSize);

struct LayerGrid {
  int grid_size = kDefaultGridSize;
  std::map<std::string, std::vector<int>> native;  // model -> layer per grid point

  int layer(const std::string& model_id, int grid_point) const;
};

LayerGrid layer_grid(const std::map<std::string, int>& num_layers,
                     int grid_size = kDefaultGridSize);

inline constexpr double kDefaultStageMargin = 0.05;
inline constexpr int kDefaultStageRunLength = 2;

struct StageSplit {
  int decision_layer = 0;  // first post-decision index
  int num_layers = 0;      // length of the accuracy series

  std::vector<int> pre_layers() const;
  std::vector<int> post_layers() const;
};

/// First index whose accuracy exceeds chance + margin for `run_length`
/// consecutive entries, or nullopt if none does.
std::optional<int> first_decodable_layer(std::span<const double> accuracy_by_layer, double chance,
                                         double margin = kDefaultStageMargin,
                                         int run_length = kDefaultStageRunLength);

/// Stage split at first_decodable_layer. Returns nullopt when no index
/// qualifies, or when it is index 0 (no pre-decision stage exists).
std::optional<StageSplit> stage_split(std::span<const double> accuracy_by_layer, double chance,
                                      double margin = kDefaultStageMargin,
                                      int run_length = kDefaultStageRunLength);

}  // namespace simlab
