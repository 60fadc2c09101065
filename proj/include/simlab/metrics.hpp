#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "simlab/activation_store.hpp"

namespace simlab {

enum class Metric { linear_cka, rbf_cka, mnn, svcca };

std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view name);

enum class BandwidthRule { median_heuristic };

struct MetricValue {
  Metric metric = Metric::linear_cka;
  double value = 0.0;
  std::size_t n_samples = 0;
  std::map<std::string, std::string> params;
};

/// Smallest stratum on which any metric is evaluated; smaller strata are
/// reported as insufficient by the pipeline.
inline constexpr std::size_t kDefaultMinStratumSize = 10;
inline constexpr double kDefaultSvccaThreshold = 0.99;
inline constexpr int kDefaultMnnK = 5;

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x);
ActivationSet center_columns(const ActivationSet& set);

// Matrix-level kernels. Rows are samples; both arguments must have the same
// row count and row ordering.

/// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered inputs.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Gaussian-kernel CKA, bandwidth = median pairwise distance of each matrix.
double rbf_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
               BandwidthRule rule = BandwidthRule::median_heuristic);

/// Median of all pairwise Euclidean row distances (i < j).
double median_pairwise_distance(const Eigen::MatrixXd& x);

/// Mean fraction of shared k-nearest neighbours (Euclidean, self excluded,
/// ties broken by lower row index).
double mnn_overlap(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k);

/// Mean canonical correlation after truncating each input to the leading
/// singular directions holding `variance_threshold` of its variance.
double svcca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
             double variance_threshold = kDefaultSvccaThreshold);

/// Number of leading singular directions needed to reach the variance threshold.
Eigen::Index svcca_rank(const Eigen::VectorXd& singular_values, double variance_threshold);

// ActivationSet wrappers: check row alignment and fill MetricValue.

MetricValue linear_cka(const ActivationSet& x, const ActivationSet& y);
MetricValue rbf_cka(const ActivationSet& x, const ActivationSet& y,
                    BandwidthRule rule = BandwidthRule::median_heuristic);
MetricValue mnn_overlap(const ActivationSet& x, const ActivationSet& y, int k = kDefaultMnnK);
MetricValue svcca(const ActivationSet& x, const ActivationSet& y,
                  double variance_threshold = kDefaultSvccaThreshold);

struct MetricOptions {
  int mnn_k = kDefaultMnnK;
  double svcca_threshold = kDefaultSvccaThreshold;
};

double evaluate(Metric metric, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                const MetricOptions& options = {});

}  // namespace simlab
