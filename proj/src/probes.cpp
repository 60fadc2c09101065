#include "simlab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "f64_block.hpp"
#include "simlab/error.hpp"
#include "simlab/stats.hpp"

namespace simlab {

using json = nlohmann::json;

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Eigen::VectorXd as_targets(const std::vector<bool>& labels) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i)) = labels[i];
  return y;
}

void require_both_classes(const std::vector<bool>& labels, std::size_t min_per_class) {
  const auto pos = static_cast<std::size_t>(std::ranges::count(labels, true));
  const auto neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw PreconditionError("probe labels contain a single class");
  if (pos < min_per_class || neg < min_per_class) {
    throw PreconditionError("each class needs at least " + std::to_string(min_per_class) +
                            " samples");
  }
}

}  // namespace

LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<bool>& labels, double lambda,
                         double tolerance, int max_iterations) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw PreconditionError("logistic fit: label count does not match rows");
  }
  if (lambda < 0.0) throw PreconditionError("lambda must be >= 0");
  require_both_classes(labels, 1);

  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::VectorXd y = as_targets(labels);
  const double inv_n = 1.0 / static_cast<double>(n);

  // theta = [w; b]
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  auto objective = [&](const Eigen::VectorXd& t) {
    const Eigen::VectorXd z = (x * t.head(d)).array() + t(d);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) loss += softplus(z(i)) - y(i) * z(i);
    return loss * inv_n + 0.5 * lambda * t.head(d).squaredNorm();
  };

  double f = objective(theta);
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd z = (x * theta.head(d)).array() + theta(d);
    Eigen::VectorXd p(n), s(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = sigmoid(z(i));
      s(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd r = p - y;
    Eigen::VectorXd grad(d + 1);
    grad.head(d) = x.transpose() * r * inv_n + lambda * theta.head(d);
    grad(d) = r.sum() * inv_n;
    const double gnorm = grad.cwiseAbs().maxCoeff();
    if (gnorm <= tolerance) return {theta.head(d), theta(d), it, gnorm};

    Eigen::MatrixXd h(d + 1, d + 1);
    const Eigen::MatrixXd xs = x.array().colwise() * s.array();
    h.topLeftCorner(d, d) = x.transpose() * xs * inv_n;
    h.topLeftCorner(d, d).diagonal().array() += lambda;
    const Eigen::VectorXd hb = xs.colwise().sum().transpose() * inv_n;
    h.topRightCorner(d, 1) = hb;
    h.bottomLeftCorner(1, d) = hb.transpose();
    h(d, d) = s.sum() * inv_n + 1e-12;
    const Eigen::VectorXd step = h.ldlt().solve(-grad);

    // Backtracking (Armijo) line search keeps every step a descent step.
    double t = 1.0;
    const double slope = grad.dot(step);
    Eigen::VectorXd next = theta + step;
    double f_next = objective(next);
    while (f_next > f + 1e-4 * t * slope && t > 1e-10) {
      t *= 0.5;
      next = theta + t * step;
      f_next = objective(next);
    }
    if (f_next > f) break;  // no further progress is numerically possible
    theta = std::move(next);
    f = f_next;
  }
  // Re-evaluate the gradient at the final point before declaring failure.
  const Eigen::VectorXd z = (x * theta.head(d)).array() + theta(d);
  Eigen::VectorXd r(n);
  for (Eigen::Index i = 0; i < n; ++i) r(i) = sigmoid(z(i)) - y(i);
  Eigen::VectorXd grad(d + 1);
  grad.head(d) = x.transpose() * r * inv_n + lambda * theta.head(d);
  grad(d) = r.sum() * inv_n;
  const double gnorm = grad.cwiseAbs().maxCoeff();
  if (gnorm <= tolerance) return {theta.head(d), theta(d), max_iterations, gnorm};
  throw ConvergenceError("logistic regression did not converge: gradient norm " +
                         std::to_string(gnorm) + " > tolerance " + std::to_string(tolerance));
}

std::vector<int> stratified_folds(const std::vector<bool>& labels, int folds, std::uint64_t seed) {
  if (folds < 2) throw PreconditionError("need at least 2 folds");
  std::vector<int> out(labels.size(), 0);
  int next = 0;
  for (bool cls : {false, true}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) idx.push_back(i);
    }
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (auto i : idx) {
      out[i] = next;
      next = (next + 1) % folds;
    }
  }
  return out;
}

double accuracy(const std::vector<bool>& predictions, const std::vector<bool>& labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw PreconditionError("accuracy: prediction and label counts differ or are empty");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double majority_rate(const std::vector<bool>& labels) {
  if (labels.empty()) throw PreconditionError("majority rate of an empty label set");
  const double pos = static_cast<double>(std::ranges::count(labels, true)) /
                     static_cast<double>(labels.size());
  return std::max(pos, 1.0 - pos);
}

Eigen::VectorXd ProbeModel::decision_scores(const Eigen::MatrixXd& x) const {
  if (x.cols() != dim()) {
    throw PreconditionError("probe expects width " + std::to_string(dim()) + ", got " +
                            std::to_string(x.cols()));
  }
  const Eigen::VectorXd w = weights.colwise().mean().transpose();
  return (x * w).array() + biases.mean();
}

std::vector<bool> ProbeModel::predict(const Eigen::MatrixXd& x) const {
  const Eigen::VectorXd s = decision_scores(x);
  std::vector<bool> out(static_cast<std::size_t>(s.size()));
  for (Eigen::Index i = 0; i < s.size(); ++i) out[static_cast<std::size_t>(i)] = s(i) > 0.0;
  return out;
}

ProbeModel train_probe(const Eigen::MatrixXd& x, const std::vector<bool>& labels,
                       const ProbeOptions& options, std::string source_model_id,
                       std::uint32_t layer_index) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw PreconditionError("probe: label count does not match rows");
  }
  if (options.folds < 2) throw PreconditionError("probe: need at least 2 folds");
  if (options.seeds.empty()) throw PreconditionError("probe: need at least one seed");
  if (x.rows() < 2 * options.folds) throw PreconditionError("probe: need n >= 2 * folds");
  require_both_classes(labels, 2);

  ProbeModel probe;
  probe.source_model_id = std::move(source_model_id);
  probe.layer_index = layer_index;
  probe.lambda = options.lambda;
  probe.folds = options.folds;
  probe.seeds = options.seeds;
  probe.class_balance = static_cast<double>(std::ranges::count(labels, true)) /
                        static_cast<double>(labels.size());

  const auto fits = static_cast<Eigen::Index>(options.folds * options.seeds.size());
  probe.weights.resize(fits, x.cols());
  probe.biases.resize(fits);
  Eigen::Index row = 0;
  for (auto seed : options.seeds) {
    const auto fold_of = stratified_folds(labels, options.folds, seed);
    for (int fold = 0; fold < options.folds; ++fold) {
      std::vector<Eigen::Index> train_idx, test_idx;
      std::vector<bool> train_y, test_y;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (fold_of[i] == fold) {
          test_idx.push_back(static_cast<Eigen::Index>(i));
          test_y.push_back(labels[i]);
        } else {
          train_idx.push_back(static_cast<Eigen::Index>(i));
          train_y.push_back(labels[i]);
        }
      }
      const Eigen::MatrixXd xtrain = x(train_idx, Eigen::all);
      const auto fit =
          fit_logistic(xtrain, train_y, options.lambda, options.tolerance, options.max_iterations);
      probe.weights.row(row) = fit.weights.transpose();
      probe.biases(row) = fit.bias;

      const Eigen::VectorXd scores = (x(test_idx, Eigen::all) * fit.weights).array() + fit.bias;
      std::vector<bool> pred(test_idx.size());
      for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = scores(static_cast<Eigen::Index>(i)) > 0.0;
      probe.fold_accuracies.push_back(accuracy(pred, test_y));
      ++row;
    }
  }
  probe.cv_accuracy = mean(probe.fold_accuracies);
  return probe;
}

ProbeModel train_probe(const ActivationSet& x, const std::vector<bool>& labels,
                       const ProbeOptions& options) {
  return train_probe(x.to_double(), labels, options, x.model_id(), x.layer_index());
}

Eigen::MatrixXd DimensionBridge::apply(const Eigen::MatrixXd& target) const {
  if (target.cols() != map.rows()) throw PreconditionError("bridge: target width mismatch");
  return ((target.rowwise() - target_mean) * map).rowwise() + source_mean;
}

DimensionBridge fit_bridge(const Eigen::MatrixXd& target, const Eigen::MatrixXd& source,
                           double alpha) {
  if (target.rows() != source.rows() || target.rows() < 2) {
    throw PreconditionError("bridge: calibration sets must be paired with >= 2 rows");
  }
  if (alpha <= 0.0) throw PreconditionError("bridge: ridge alpha must be > 0");
  DimensionBridge b;
  b.alpha = alpha;
  b.target_mean = target.colwise().mean();
  b.source_mean = source.colwise().mean();
  const Eigen::MatrixXd yc = target.rowwise() - b.target_mean;
  const Eigen::MatrixXd xc = source.rowwise() - b.source_mean;
  Eigen::MatrixXd gram = yc.transpose() * yc;
  gram.diagonal().array() += alpha;
  b.map = gram.ldlt().solve(yc.transpose() * xc);
  return b;
}

TransferResult transfer_eval(const ProbeModel& probe, const Eigen::MatrixXd& target,
                             const std::vector<bool>& labels, const DimensionBridge* bridge,
                             std::string target_model_id) {
  if (target.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw PreconditionError("transfer: label count does not match rows");
  }
  if (!bridge && target.cols() != probe.dim()) {
    throw PreconditionError("incompatible dimensions: probe width " + std::to_string(probe.dim()) +
                            ", target width " + std::to_string(target.cols()) +
                            " (dimension bridging disabled)");
  }
  const auto pred = bridge ? probe.predict(bridge->apply(target)) : probe.predict(target);
  TransferResult r;
  r.source_model_id = probe.source_model_id;
  r.target_model_id = std::move(target_model_id);
  r.accuracy = accuracy(pred, labels);
  r.majority_baseline = majority_rate(labels);
  r.n = labels.size();
  r.bridged = bridge != nullptr;
  return r;
}

PermutationSummary permutation_baseline(const ProbeModel& probe, const Eigen::MatrixXd& target,
                                        const std::vector<bool>& labels, int iterations,
                                        std::uint64_t seed, const DimensionBridge* bridge) {
  if (iterations < 100) throw PreconditionError("permutation baseline needs >= 100 iterations");
  if (!bridge && target.cols() != probe.dim()) {
    throw PreconditionError("incompatible dimensions (dimension bridging disabled)");
  }
  const auto pred = bridge ? probe.predict(bridge->apply(target)) : probe.predict(target);
  std::vector<double> acc(static_cast<std::size_t>(iterations));
  std::vector<bool> shuffled;
  for (int it = 0; it < iterations; ++it) {
    shuffled = labels;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(it)));
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    acc[static_cast<std::size_t>(it)] = accuracy(pred, shuffled);
  }
  PermutationSummary s;
  s.mean = mean(acc);
  double ss = 0.0;
  for (double a : acc) ss += (a - s.mean) * (a - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(acc.size() - 1));
  s.p95 = quantile(std::move(acc), 0.95);
  s.iterations = iterations;
  s.seed = seed;
  return s;
}

void write_probe(const ProbeModel& probe, const std::filesystem::path& path) {
  auto block = path;
  block += ".f64";
  json j = {{"source_model_id", probe.source_model_id},
            {"layer_index", probe.layer_index},
            {"dim", probe.dim()},
            {"fits", probe.weights.rows()},
            {"lambda", probe.lambda},
            {"class_balance", probe.class_balance},
            {"folds", probe.folds},
            {"seeds", probe.seeds},
            {"fold_accuracies", probe.fold_accuracies},
            {"cv_accuracy", probe.cv_accuracy},
            {"weights_file", block.filename().string()}};
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
  }
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(probe.weights.rows() * (probe.weights.cols() + 1)));
  for (Eigen::Index r = 0; r < probe.weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < probe.weights.cols(); ++c) values.push_back(probe.weights(r, c));
    values.push_back(probe.biases(r));
  }
  detail::write_f64_block(block, values);
}

ProbeModel read_probe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open probe " + path.string());
  ProbeModel p;
  Eigen::Index dim = 0, fits = 0;
  std::filesystem::path block;
  try {
    const auto j = json::parse(in);
    p.source_model_id = j.at("source_model_id").get<std::string>();
    p.layer_index = j.at("layer_index").get<std::uint32_t>();
    dim = j.at("dim").get<Eigen::Index>();
    fits = j.at("fits").get<Eigen::Index>();
    p.lambda = j.at("lambda").get<double>();
    p.class_balance = j.at("class_balance").get<double>();
    p.folds = j.at("folds").get<int>();
    p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    p.fold_accuracies = j.at("fold_accuracies").get<std::vector<double>>();
    p.cv_accuracy = j.at("cv_accuracy").get<double>();
    block = path.parent_path() / j.at("weights_file").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed probe metadata: " + e.what());
  }
  if (dim < 1 || fits < 1) throw FormatError(path.string() + ": empty probe");
  const auto values = detail::read_f64_block(block, static_cast<std::size_t>(fits * (dim + 1)));
  p.weights.resize(fits, dim);
  p.biases.resize(fits);
  std::size_t pos = 0;
  for (Eigen::Index r = 0; r < fits; ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) p.weights(r, c) = values[pos++];
    p.biases(r) = values[pos++];
  }
  return p;
}

}  // namespace simlab
