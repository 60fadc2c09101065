#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "simlab/ablation.hpp"
#include "simlab/activation_store.hpp"
#include "simlab/metrics.hpp"
#include "simlab/probes.hpp"
#include "simlab/report/config.hpp"
#include "simlab/stats.hpp"

namespace simlab::report {

// Every run_* overload taking a Cohort writes its tables and figure into
// config.output; the config-only overloads load config.cohort first.

struct SimilarityRow {
  std::string model_a, model_b;
  int grid_point = 0;
  int layer_a = 0, layer_b = 0;
  std::string family;   // all, difficulty, singleton, agreement, correctness, domain
  std::string stratum;
  Metric metric = Metric::linear_cka;
  std::optional<double> value;
  std::size_t n = 0;
  std::string status;  // ok, insufficient, degenerate, missing_layer
  std::optional<ResampleSummary> ci;  // problem bootstrap, when enabled
};

struct SummaryRow {
  int grid_point = 0;
  std::string family, stratum;
  Metric metric = Metric::linear_cka;
  double mean = 0.0;
  ResampleSummary ci;
  std::string ci_method;
  std::size_t n_pairs = 0;
  std::size_t n_excluded = 0;
};

struct SimilarityResult {
  std::vector<SimilarityRow> rows;
  std::vector<SummaryRow> summary;
  std::vector<std::string> notices;
};

SimilarityResult run_similarity(const AnalysisConfig& config, const Cohort& cohort);
SimilarityResult run_similarity(const AnalysisConfig& config);

struct InversionLayer {
  int grid_point = 0;
  double hard_mean = 0.0, easy_mean = 0.0;
  double gap = 0.0;  // hard - easy
  ResampleSummary gap_ci;
  std::size_t n_pairs = 0;
};

struct BinComparison {
  std::string bin_a, bin_b;
  double difference = 0.0;  // mean(a) - mean(b)
  double p_value = 1.0;
  bool rejected = false;  // Benjamini-Hochberg at config.q
};

struct DomainGap {
  std::string domain;
  double hard_mean = 0.0, easy_mean = 0.0, gap = 0.0, p_value = 1.0;
  std::size_t n_hard = 0, n_easy = 0;
  std::string status;
};

struct InversionResult {
  Metric metric = Metric::linear_cka;
  std::vector<InversionLayer> layers;
  int peak_grid_point = 0;  // largest |gap|
  double hard_mean = 0.0, easy_mean = 0.0, gap = 0.0, p_value = 1.0;
  ResampleSummary hard_ci, easy_ci, gap_ci;
  std::size_t n_hard = 0, n_easy = 0, n_pairs = 0;
  std::vector<BinComparison> comparisons;
  std::vector<DomainGap> domains;
  std::vector<std::string> notices;
};

InversionResult run_inversion(const AnalysisConfig& config, const Cohort& cohort);
InversionResult run_inversion(const AnalysisConfig& config);

struct StageModel {
  std::string model_id;
  std::vector<double> accuracy;  // cross-validated, per selected grid point
  double chance = 0.5;
  std::optional<int> decision_grid_point;
  std::optional<int> decision_layer;
};

struct StagePair {
  std::string model_a, model_b;
  std::size_t pre_points = 0, post_points = 0;
  double pre_mean = 0.0, post_mean = 0.0, gap = 0.0;
  std::string status;
};

struct StageGapResult {
  std::vector<int> grid_points;
  std::vector<StageModel> models;
  std::vector<StagePair> pairs;
  std::vector<double> mean_similarity;  // per grid point, over all pairs
  double pre_mean = 0.0, post_mean = 0.0, gap = 0.0;
  ResampleSummary pre_ci, post_ci, gap_ci;
  std::size_t n_pairs = 0;
};

StageGapResult run_stage_gap(const AnalysisConfig& config, const Cohort& cohort);
StageGapResult run_stage_gap(const AnalysisConfig& config);

struct TransferRow {
  std::string source, target;
  int grid_point = 0;
  int source_layer = 0, target_layer = 0;
  double accuracy = 0.0, majority = 0.0;
  PermutationSummary permutation;
  std::size_t n = 0;
  bool bridged = false;
  std::string status;  // ok, incompatible_dims
};

struct ProbeEntry {
  std::string model_id;
  int grid_point = 0;
  int layer = 0;
  double cv_accuracy = 0.0;
  std::string file;
};

struct TransferAnalysis {
  std::vector<ProbeEntry> probes;
  std::vector<TransferRow> rows;
  double mean_accuracy = 0.0, mean_majority = 0.0, mean_permutation = 0.0;
  ResampleSummary accuracy_ci;
  std::size_t ordered_above = 0, ordered_total = 0;
  std::size_t unordered_above = 0, unordered_total = 0;
};

TransferAnalysis run_transfer(const AnalysisConfig& config, const Cohort& cohort);
TransferAnalysis run_transfer(const AnalysisConfig& config);

inline constexpr const char* kProbeIndex = "probes/index.json";
std::vector<ProbeEntry> read_probe_index(const std::filesystem::path& output);

struct AblationRow {
  std::string model_id;
  AblationProtocol protocol = AblationProtocol::strict_all_correct;
  int grid_point = 0, layer = 0;
  Eigen::Index k = 0;
  double variance_captured = 0.0;
  std::size_t n = 0, changed = 0, control_changed = 0;
  double flip_rate = 0.0, control_flip_rate = 0.0;
  double accuracy_before = 0.0, accuracy_after = 0.0, accuracy_after_control = 0.0;
  double majority = 0.0;
  std::string predictor;  // probe (in-core stand-in) or external
  std::string status;     // ok, empty
};

struct ProtocolSummary {
  AblationProtocol protocol = AblationProtocol::strict_all_correct;
  double mean_flip = 0.0, mean_control_flip = 0.0;
  ResampleSummary flip_ci;
  std::size_t n_models = 0;
};

struct AblationAnalysis {
  std::vector<AblationRow> rows;
  std::vector<ProtocolSummary> summary;
  std::optional<HeadAblationSummary> heads;
};

/// Needs probes written by run_transfer into config.output.
AblationAnalysis run_ablation(const AnalysisConfig& config, const Cohort& cohort);
AblationAnalysis run_ablation(const AnalysisConfig& config);

struct EntropyRow {
  std::string model_id;
  std::size_t n = 0;
  double r = 0.0, p_value = 1.0;
  bool rejected = false;
};

struct EntropyAnalysis {
  std::vector<EntropyRow> rows;
  double mean_r = 0.0;
  ResampleSummary r_ci;
  std::size_t n_models = 0;
};

/// Correlates per-problem mean attention entropy with the number of models
/// answering correctly (higher count = easier problem).
EntropyAnalysis run_entropy(const AnalysisConfig& config, const Cohort& cohort);
EntropyAnalysis run_entropy(const AnalysisConfig& config);

/// Writes report.md indexing every table and figure present in config.output.
std::string write_report(const AnalysisConfig& config);

}  // namespace simlab::report
