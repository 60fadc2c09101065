#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "simlab/activation_store.hpp"
#include "simlab/probes.hpp"
#include "simlab/stratify.hpp"

namespace simlab {

/// k orthonormal directions in R^d, stored as the columns of `basis`.
struct Subspace {
  Eigen::MatrixXd basis;  // d x k
  std::string source_probe;
  double variance_captured = 1.0;

  Eigen::Index dim() const { return basis.rows(); }
  Eigen::Index k() const { return basis.cols(); }
};

inline constexpr double kDefaultSubspaceVariance = 0.90;
inline constexpr int kDefaultSubspaceCap = 10;

/// Either a fixed k or the smallest k reaching `variance` of the stack's
/// energy, capped at `cap`.
struct SubspaceRule {
  std::optional<int> k;
  double variance = kDefaultSubspaceVariance;
  int cap = kDefaultSubspaceCap;
};

/// Top right-singular directions of the (uncentered) fold x seed weight
/// stack. Centering would erase the shared probe direction, which is the
/// signal of interest when all fits agree.
Subspace correctness_subspace(const ProbeModel& probe, const SubspaceRule& rule = {});
Subspace correctness_subspace(const Eigen::MatrixXd& weight_stack, const SubspaceRule& rule = {},
                              std::string source = {});

/// Wraps a basis after checking orthonormality within 1e-8.
Subspace make_subspace(Eigen::MatrixXd basis, std::string source = {});

/// Random k-dim subspace orthogonal to `avoid` (which may be empty).
Subspace random_orthogonal_subspace(Eigen::Index d, Eigen::Index k, const Eigen::MatrixXd& avoid,
                                    std::uint64_t seed);

/// I - B B^T.
Eigen::MatrixXd complement_projector(const Subspace& s);

/// x (I - B B^T). Rejects k = d, where every activation would be zeroed.
Eigen::MatrixXd ablate(const Eigen::MatrixXd& x, const Subspace& s);
ActivationSet ablate(const ActivationSet& x, const Subspace& s);

enum class AblationProtocol { strict_all_correct, relaxed_10_of_14 };
std::string to_string(AblationProtocol p);
AblationProtocol protocol_from_string(const std::string& s);

/// Minimum correct-model count for the protocol: M (strict) or
/// ceil(10 M / 14) (relaxed; 10 for M = 14).
int protocol_min_count(AblationProtocol p, int cohort_size);

/// Problems in the protocol's agreement set that `model` itself answers
/// correctly, in profile order.
std::vector<std::string> protocol_problems(const DifficultyProfile& profile,
                                           const RunManifest& model, AblationProtocol p);

struct AblationReport {
  double flip_rate = 0.0;
  std::size_t n = 0;
  std::size_t changed = 0;
  AblationProtocol protocol = AblationProtocol::strict_all_correct;
  std::vector<std::string> problem_ids;
  std::vector<std::string> before;
  std::vector<std::string> after;
};

/// Fraction of changed predictions, computed from integer counts.
AblationReport flip_rate(const std::vector<std::string>& problem_ids,
                         const std::vector<std::string>& before,
                         const std::vector<std::string>& after, AblationProtocol protocol);
AblationReport flip_rate(const std::vector<std::string>& problem_ids, const std::vector<bool>& before,
                         const std::vector<bool>& after, AblationProtocol protocol);

struct AccuracyDrop {
  double before = 0.0;
  double after = 0.0;
};

AccuracyDrop probe_accuracy_drop(const Eigen::MatrixXd& x, const std::vector<bool>& labels,
                                 const Subspace& s, const ProbeModel& probe);

/// Basis file: JSON metadata at `path`, columns as little-endian binary64
/// in `<path>.f64` (column after column).
void write_subspace(const Subspace& s, const std::filesystem::path& path);
Subspace read_subspace(const std::filesystem::path& path);

// Exchange with the external intervention runner.

struct InterventionRequest {
  std::string model_id;
  std::uint32_t layer_index = 0;
  std::string kind = "subspace_projection";  // or "head_zeroing"
  std::string basis_file;                    // subspace_projection only
  std::optional<int> head;                   // head_zeroing only
  std::vector<std::string> problem_ids;
};

struct InterventionResult {
  std::string problem_id;
  std::string before_answer;
  std::string after_answer;
};

struct InterventionResponse {
  std::string model_id;
  std::uint32_t layer_index = 0;
  std::vector<InterventionResult> results;
};

std::string request_to_json(const InterventionRequest& r);
InterventionRequest request_from_json(std::string_view text);
std::string response_to_json(const InterventionResponse& r);
InterventionResponse response_from_json(std::string_view text);

/// Checks that a response answers exactly the requested problems, in order,
/// for the requested model and layer.
void check_response(const InterventionRequest& request, const InterventionResponse& response);

AblationReport flip_rate(const InterventionResponse& response, AblationProtocol protocol);

struct HeadAblationRecord {
  std::string model_id;
  std::string attention_type;  // "MHA" or "GQA"
  int layer = 0;
  int head = 0;
  int declared_problems = 30;
  std::vector<InterventionResult> results;
};

struct HeadFlip {
  std::string model_id;
  std::string attention_type;
  int layer = 0;
  int head = 0;
  std::size_t n = 0;
  std::size_t flips = 0;
  double rate = 0.0;
};

struct ModelHeadMax {
  std::string attention_type;
  HeadFlip max;  // first head in (layer, head) order attaining the maximum
};

struct AttentionTypeRange {
  double min_of_max = 0.0;
  double max_of_max = 0.0;
  std::size_t models = 0;
};

/// Per-head flip rates are general head-importance scores; they are not
/// attributed to the correctness subspace.
struct HeadAblationSummary {
  std::vector<HeadFlip> heads;  // sorted by (model, layer, head)
  std::map<std::string, ModelHeadMax> per_model;
  std::map<std::string, AttentionTypeRange> per_type;
};

HeadAblationSummary head_ablation_report(const std::vector<HeadAblationRecord>& records);
std::vector<HeadAblationRecord> head_records_from_json(std::string_view text);
std::string head_records_to_json(const std::vector<HeadAblationRecord>& records);

}  // namespace simlab
