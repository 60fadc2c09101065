#pragma once

// Activation interchange format and in-memory cohort.
//
// File layout (all integers little-endian):
//
//   "RSA1"                      4 bytes magic
//   version         u32         currently 1
//   n               u64         rows (problems)
//   d               u64         columns (hidden width)
//   layer_index     u32
//   model_id        u32 length prefix + UTF-8 bytes
//   payload         n*d IEEE-754 binary32, row-major
//   problem ids     n lines of UTF-8, each terminated by '\n'

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace simlab {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::string_view kMagic = "RSA1";

/// Hidden states of one model at one layer over a problem set. Immutable;
/// copies share the underlying buffer.
class ActivationSet {
 public:
  /// Validates shape, finiteness and id uniqueness; throws ValidationError.
  ActivationSet(std::string model_id, std::uint32_t layer_index,
                std::vector<std::string> problem_ids, RowMatrixF matrix);

  const std::string& model_id() const { return data_->model_id; }
  std::uint32_t layer_index() const { return data_->layer_index; }
  std::span<const std::string> problem_ids() const { return data_->problem_ids; }
  std::size_t rows() const { return static_cast<std::size_t>(data_->matrix.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(data_->matrix.cols()); }
  const RowMatrixF& matrix() const { return data_->matrix; }
  std::span<const float> row(std::size_t i) const;

  Eigen::MatrixXd to_double() const { return data_->matrix.cast<double>(); }

  /// Returns a copy whose rows follow `ids`; throws if an id is absent.
  ActivationSet select(std::span<const std::string> ids) const;

  /// Same rows, new matrix (used by centering and ablation). Validates.
  ActivationSet with_matrix(RowMatrixF matrix) const;

  bool operator==(const ActivationSet& other) const;

 private:
  struct Payload {
    std::string model_id;
    std::uint32_t layer_index = 0;
    std::vector<std::string> problem_ids;
    RowMatrixF matrix;
  };
  std::shared_ptr<const Payload> data_;
};

void write_activation_file(const ActivationSet& set, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_activation_set(const ActivationSet& set);

ActivationSet read_activation_file(const std::filesystem::path& path);
ActivationSet decode_activation_set(std::span<const std::uint8_t> bytes);

struct ProblemRecord {
  std::string problem_id;
  std::string answer;
  bool correct = false;
  std::string domain;
  std::optional<double> mean_attention_entropy;  // nats

  bool operator==(const ProblemRecord&) const = default;
};

struct RunManifest {
  std::string model_id;
  std::string family;
  int num_layers = 0;
  std::vector<ProblemRecord> records;

  const ProblemRecord* find(std::string_view problem_id) const;
  bool operator==(const RunManifest&) const = default;
};

/// Throws ValidationError on empty ids, duplicates, bad layer count or
/// negative/non-finite entropies.
void validate_manifest(const RunManifest& manifest);

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(std::string_view text);
RunManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const RunManifest& manifest, const std::filesystem::path& path);

struct CohortIndex {
  std::vector<std::string> model_ids;           // sorted
  std::vector<std::string> shared_problem_ids;  // sorted lexicographically
  std::map<std::string, int> num_layers;
};

/// Manifests plus activation sets restricted and reordered to the shared
/// problem ordering.
class Cohort {
 public:
  const CohortIndex& index() const { return index_; }
  const std::vector<std::string>& model_ids() const { return index_.model_ids; }
  const std::vector<std::string>& problem_ids() const { return index_.shared_problem_ids; }
  std::size_t size() const { return index_.model_ids.size(); }

  const RunManifest& manifest(const std::string& model_id) const;
  bool has_layer(const std::string& model_id, std::uint32_t layer) const;
  const ActivationSet& activations(const std::string& model_id, std::uint32_t layer) const;
  std::vector<std::uint32_t> layers(const std::string& model_id) const;

  /// Correctness flags of one model over the shared problems.
  std::vector<bool> correctness(const std::string& model_id) const;
  /// Row positions of `ids` within the shared ordering.
  std::vector<Eigen::Index> rows_of(std::span<const std::string> ids) const;

 private:
  friend Cohort build_cohort(std::vector<RunManifest>, std::vector<ActivationSet>);
  CohortIndex index_;
  std::map<std::string, RunManifest> manifests_;
  std::map<std::pair<std::string, std::uint32_t>, ActivationSet> sets_;
  std::unordered_map<std::string, Eigen::Index> row_of_;
};

Cohort build_cohort(std::vector<RunManifest> manifests, std::vector<ActivationSet> sets);

std::string layer_file_name(std::uint32_t layer);

/// Writes `<dir>/manifest.json` and one layer file per set.
void write_run(const std::filesystem::path& dir, const RunManifest& manifest,
               std::span<const ActivationSet> sets);

/// Loads every run directory (a directory holding manifest.json) under `dir`.
/// If `layers` is given, only those native layer indices are loaded.
Cohort load_cohort(const std::filesystem::path& dir,
                   const std::optional<std::vector<std::uint32_t>>& layers = std::nullopt);

/// Checks a single file, a run directory or a cohort directory. Returns one
/// message per violation; empty means valid.
std::vector<std::string> validate_path(const std::filesystem::path& path);

}  // namespace simlab
