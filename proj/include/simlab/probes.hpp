#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "simlab/activation_store.hpp"

namespace simlab {

struct ProbeOptions {
  double lambda = 0.01;
  int folds = 5;
  std::vector<std::uint64_t> seeds{42, 123, 456, 789, 1024};
  double tolerance = 1e-8;  // on the max-norm of the gradient
  int max_iterations = 1000;
};

struct LogisticFit {
  Eigen::VectorXd weights;
  double bias = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
};

/// Minimises mean log-loss + (lambda/2)||w||^2 (bias unpenalised) with
/// damped Newton steps. Throws ConvergenceError if the gradient does not
/// reach `tolerance` within `max_iterations`.
LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<bool>& labels, double lambda,
                         double tolerance = 1e-8, int max_iterations = 1000);

/// Fold id per sample; each class is shuffled with `seed` and dealt
/// round-robin so class proportions are preserved across folds.
std::vector<int> stratified_folds(const std::vector<bool>& labels, int folds, std::uint64_t seed);

double accuracy(const std::vector<bool>& predictions, const std::vector<bool>& labels);
double majority_rate(const std::vector<bool>& labels);

struct ProbeModel {
  std::string source_model_id;
  std::uint32_t layer_index = 0;
  Eigen::MatrixXd weights;  // one row per (seed, fold) fit
  Eigen::VectorXd biases;
  double lambda = 0.01;
  double class_balance = 0.5;  // fraction of positive (correct) training labels
  int folds = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> fold_accuracies;  // held-out, (seed, fold) order
  double cv_accuracy = 0.0;

  Eigen::Index dim() const { return weights.cols(); }
  double training_majority_rate() const { return std::max(class_balance, 1.0 - class_balance); }
  /// Mean over fits of the logit w.x + b.
  Eigen::VectorXd decision_scores(const Eigen::MatrixXd& x) const;
  std::vector<bool> predict(const Eigen::MatrixXd& x) const;
};

ProbeModel train_probe(const Eigen::MatrixXd& x, const std::vector<bool>& labels,
                       const ProbeOptions& options, std::string source_model_id = {},
                       std::uint32_t layer_index = 0);
ProbeModel train_probe(const ActivationSet& x, const std::vector<bool>& labels,
                       const ProbeOptions& options = {});

/// Ridge map from a target model's activations into the probe's source space,
/// fitted on paired calibration problems: x_source ~ (y - mean_y) W + mean_x.
struct DimensionBridge {
  Eigen::MatrixXd map;  // q x p
  Eigen::RowVectorXd target_mean;
  Eigen::RowVectorXd source_mean;
  double alpha = 1.0;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& target) const;
};

DimensionBridge fit_bridge(const Eigen::MatrixXd& target_calibration,
                           const Eigen::MatrixXd& source_calibration, double alpha = 1.0);

struct PermutationSummary {
  double mean = 0.0;
  double p95 = 0.0;
  double sd = 0.0;
  int iterations = 0;
  std::uint64_t seed = 0;
};

struct TransferResult {
  std::string source_model_id;
  std::string target_model_id;
  double accuracy = 0.0;
  double majority_baseline = 0.0;
  std::optional<PermutationSummary> permutation;
  std::size_t n = 0;
  bool bridged = false;
};

/// Accuracy of the averaged probe decision on another model's labels.
/// Without a bridge, the hidden widths must match.
TransferResult transfer_eval(const ProbeModel& probe, const Eigen::MatrixXd& target,
                             const std::vector<bool>& target_labels,
                             const DimensionBridge* bridge = nullptr,
                             std::string target_model_id = {});

/// Transfer accuracy under seeded label permutations (iterations >= 100).
PermutationSummary permutation_baseline(const ProbeModel& probe, const Eigen::MatrixXd& target,
                                        const std::vector<bool>& target_labels, int iterations,
                                        std::uint64_t seed, const DimensionBridge* bridge = nullptr);

/// Writes `<path>` (JSON metadata) and `<path>.f64` (fits as little-endian
/// binary64: d weights then the bias, one fit after another).
void write_probe(const ProbeModel& probe, const std::filesystem::path& path);
ProbeModel read_probe(const std::filesystem::path& path);

}  // namespace simlab
