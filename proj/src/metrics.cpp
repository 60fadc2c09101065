#include "simlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "simlab/error.hpp"

namespace simlab {

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::linear_cka: return "linear_cka";
    case Metric::rbf_cka: return "rbf_cka";
    case Metric::mnn: return "mnn";
    case Metric::svcca: return "svcca";
  }
  return "unknown";
}

Metric metric_from_string(std::string_view name) {
  if (name == "linear_cka") return Metric::linear_cka;
  if (name == "rbf_cka") return Metric::rbf_cka;
  if (name == "mnn") return Metric::mnn;
  if (name == "svcca") return Metric::svcca;
  throw PreconditionError("unknown metric: " + std::string(name));
}

namespace {

void require_aligned(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, Eigen::Index min_rows) {
  if (x.rows() != y.rows()) {
    throw PreconditionError("row-count mismatch: " + std::to_string(x.rows()) + " vs " +
                            std::to_string(y.rows()));
  }
  if (x.rows() < min_rows) {
    throw PreconditionError("need at least " + std::to_string(min_rows) + " rows, got " +
                            std::to_string(x.rows()));
  }
}

void require_aligned(const ActivationSet& x, const ActivationSet& y) {
  if (x.rows() != y.rows()) {
    throw PreconditionError("row-count mismatch: " + std::to_string(x.rows()) + " vs " +
                            std::to_string(y.rows()));
  }
  if (!std::ranges::equal(x.problem_ids(), y.problem_ids())) {
    throw PreconditionError("activation sets are not aligned on the same problem ordering");
  }
}

double clamp_unit(double v) { return std::clamp(v, 0.0, 1.0); }

// Squared Euclidean distances between rows, accumulated coordinate by
// coordinate so the result does not depend on any matrix-product blocking.
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double diff = x(i, c) - x(j, c);
        acc += diff * diff;
      }
      d(i, j) = acc;
      d(j, i) = acc;
    }
  }
  return d;
}

double median_of(std::vector<double> v) {
  const auto mid = v.size() / 2;
  std::ranges::nth_element(v, v.begin() + static_cast<std::ptrdiff_t>(mid));
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

Eigen::MatrixXd double_center(const Eigen::MatrixXd& k) {
  const Eigen::VectorXd row_mean = k.rowwise().mean();
  const Eigen::RowVectorXd col_mean = k.colwise().mean();
  const double grand = k.mean();
  Eigen::MatrixXd out = k;
  out.colwise() -= row_mean;
  out.rowwise() -= col_mean;
  out.array() += grand;
  return out;
}

Eigen::MatrixXd rbf_kernel(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd d2 = squared_distances(x);
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(x.rows() * (x.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < x.rows(); ++j) dist.push_back(std::sqrt(d2(i, j)));
  }
  const double sigma = median_of(std::move(dist));
  if (!(sigma > 0.0)) {
    throw DegenerateInputError("degenerate bandwidth: median pairwise distance is zero");
  }
  return (-d2.array() / (2.0 * sigma * sigma)).exp().matrix();
}

std::vector<std::vector<Eigen::Index>> knn_sets(const Eigen::MatrixXd& x, int k) {
  const Eigen::MatrixXd d2 = squared_distances(x);
  const Eigen::Index n = x.rows();
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(n));
  std::vector<Eigen::Index> order;
  for (Eigen::Index i = 0; i < n; ++i) {
    order.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    auto closer = [&](Eigen::Index a, Eigen::Index b) {
      if (d2(i, a) != d2(i, b)) return d2(i, a) < d2(i, b);
      return a < b;
    };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), closer);
    std::vector<Eigen::Index> nn(order.begin(), order.begin() + k);
    std::ranges::sort(nn);
    out[static_cast<std::size_t>(i)] = std::move(nn);
  }
  return out;
}

Eigen::MatrixXd leading_left_vectors(const Eigen::MatrixXd& centered, double threshold) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU);
  const Eigen::Index r = svcca_rank(svd.singularValues(), threshold);
  if (r == 0) throw DegenerateInputError("svcca: rank-0 input");
  return svd.matrixU().leftCols(r);
}

}  // namespace

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw PreconditionError("centering needs at least 2 rows");
  return x.rowwise() - x.colwise().mean();
}

ActivationSet center_columns(const ActivationSet& set) {
  if (set.rows() < 2) throw PreconditionError("centering needs at least 2 rows");
  return set.with_matrix(center_columns(set.to_double()).cast<float>());
}

double linear_cka(const Eigen::MatrixXd& x_raw, const Eigen::MatrixXd& y_raw) {
  require_aligned(x_raw, y_raw, 2);
  const Eigen::MatrixXd x = center_columns(x_raw);
  const Eigen::MatrixXd y = center_columns(y_raw);
  const Eigen::Index n = x.rows();

  double cross = 0.0;
  double xx = 0.0;
  double yy = 0.0;
  if (x.cols() <= n && y.cols() <= n) {
    cross = (y.transpose() * x).squaredNorm();
    xx = (x.transpose() * x).norm();
    yy = (y.transpose() * y).norm();
  } else {
    // Wide inputs: the same quantities through n x n Gram matrices,
    // using ||Y^T X||_F^2 = <XX^T, YY^T>_F and ||X^T X||_F = ||XX^T||_F.
    const Eigen::MatrixXd kx = x * x.transpose();
    const Eigen::MatrixXd ky = y * y.transpose();
    cross = (kx.array() * ky.array()).sum();
    xx = kx.norm();
    yy = ky.norm();
  }
  if (xx == 0.0 || yy == 0.0) {
    throw DegenerateInputError("linear CKA of a zero (or constant) matrix is undefined");
  }
  return clamp_unit(cross / (xx * yy));
}

double median_pairwise_distance(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw PreconditionError("need at least 2 rows for pairwise distances");
  const Eigen::MatrixXd d2 = squared_distances(x);
  std::vector<double> dist;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < x.rows(); ++j) dist.push_back(std::sqrt(d2(i, j)));
  }
  return median_of(std::move(dist));
}

double rbf_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, BandwidthRule) {
  require_aligned(x, y, 2);
  const Eigen::MatrixXd kx = double_center(rbf_kernel(x));
  const Eigen::MatrixXd ky = double_center(rbf_kernel(y));
  const double cross = (kx.array() * ky.array()).sum();
  const double denom = kx.norm() * ky.norm();
  if (denom == 0.0) throw DegenerateInputError("rbf CKA: centered kernel is zero");
  return clamp_unit(cross / denom);
}

double mnn_overlap(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k) {
  if (k < 1) throw PreconditionError("mnn: k must be >= 1");
  require_aligned(x, y, 1);
  if (x.rows() <= k) {
    throw PreconditionError("mnn: need n > k (n=" + std::to_string(x.rows()) +
                            ", k=" + std::to_string(k) + ")");
  }
  const auto nx = knn_sets(x, k);
  const auto ny = knn_sets(y, k);
  std::size_t shared = 0;
  std::vector<Eigen::Index> common;
  for (std::size_t i = 0; i < nx.size(); ++i) {
    common.clear();
    std::ranges::set_intersection(nx[i], ny[i], std::back_inserter(common));
    shared += common.size();
  }
  // Exact count divided once, so the value is a fixed rational.
  return static_cast<double>(shared) /
         (static_cast<double>(nx.size()) * static_cast<double>(k));
}

Eigen::Index svcca_rank(const Eigen::VectorXd& s, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw PreconditionError("svcca variance threshold must be in (0, 1]");
  }
  if (s.size() == 0 || s(0) <= 0.0) return 0;
  const double tol = static_cast<double>(s.size()) * 1e-12 * s(0);
  Eigen::Index rank = 0;
  while (rank < s.size() && s(rank) > tol) ++rank;
  const double total = s.head(rank).squaredNorm();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < rank; ++i) {
    acc += s(i) * s(i);
    if (acc >= threshold * total * (1.0 - 1e-12)) return i + 1;
  }
  return rank;
}

double svcca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double threshold) {
  require_aligned(x, y, 2);
  const Eigen::MatrixXd ux = leading_left_vectors(center_columns(x), threshold);
  const Eigen::MatrixXd uy = leading_left_vectors(center_columns(y), threshold);
  // Canonical correlations are the singular values of Qx^T Qy for orthonormal
  // bases of the two reduced column spaces.
  const Eigen::MatrixXd m = ux.transpose() * uy;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const Eigen::VectorXd rho = svd.singularValues().cwiseMin(1.0).cwiseMax(0.0);
  return clamp_unit(rho.mean());
}

MetricValue linear_cka(const ActivationSet& x, const ActivationSet& y) {
  require_aligned(x, y);
  return {Metric::linear_cka, linear_cka(x.to_double(), y.to_double()), x.rows(), {}};
}

MetricValue rbf_cka(const ActivationSet& x, const ActivationSet& y, BandwidthRule rule) {
  require_aligned(x, y);
  return {Metric::rbf_cka, rbf_cka(x.to_double(), y.to_double(), rule), x.rows(),
          {{"bandwidth", "median_heuristic"}}};
}

MetricValue mnn_overlap(const ActivationSet& x, const ActivationSet& y, int k) {
  require_aligned(x, y);
  return {Metric::mnn, mnn_overlap(x.to_double(), y.to_double(), k), x.rows(),
          {{"k", std::to_string(k)}}};
}

MetricValue svcca(const ActivationSet& x, const ActivationSet& y, double threshold) {
  require_aligned(x, y);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", threshold);
  return {Metric::svcca, svcca(x.to_double(), y.to_double(), threshold), x.rows(),
          {{"variance_threshold", buf}}};
}

double evaluate(Metric metric, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                const MetricOptions& options) {
  switch (metric) {
    case Metric::linear_cka: return linear_cka(x, y);
    case Metric::rbf_cka: return rbf_cka(x, y);
    case Metric::mnn: return mnn_overlap(x, y, options.mnn_k);
    case Metric::svcca: return svcca(x, y, options.svcca_threshold);
  }
  throw PreconditionError("unknown metric");
}

}  // namespace simlab
