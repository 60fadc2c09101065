#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "simlab/activation_store.hpp"

namespace simlab {

struct SharedDirection {
  double strength = 2.0;
};

/// Noise scale grows from `hard_noise_scale` (count 0) to
/// `easy_idiosyncrasy_scale` (count M), modulated by a Gaussian bump over
/// normalized depth centred at `peak_depth`. Domains listed in
/// `reversed_domains` swap the two scales.
struct Homogenization {
  double hard_noise_scale = 0.1;
  double easy_idiosyncrasy_scale = 0.8;
  double peak_depth = 0.5;
  double width = 0.15;
  std::set<std::string> reversed_domains;
};

/// entropy = base - slope * (count / M) + noise * N(0, 1), per model.
struct EntropyCoupling {
  double slope = 0.5;
  double base = 2.0;
  double noise = 0.3;
};

/// For determined problems every coordinate of a k-dim block is set to
/// offset + margin * (2y - 1); a readout "correct iff block mean > offset"
/// then reproduces the label exactly.
struct CausalSubspace {
  int k = 1;
  double determinism = 1.0;  // fraction of problems whose block is set
  double offset = 1.0;
  double margin = 1.0;
  double jitter = 0.1;
};

struct SynthSpec {
  int n_models = 4;
  int n_problems = 200;
  std::vector<int> hidden_dims{32};  // one entry (shared) or one per model
  int num_layers = 8;
  int latent_rank = 6;
  double noise = 0.3;  // isotropic model-specific noise
  std::vector<std::string> domains{"general"};
  double skill_mean = 0.45;
  double skill_spread = 0.2;
  double label_noise = 0.1;
  bool rotated_copies = false;
  std::optional<SharedDirection> shared_correctness_direction;
  std::optional<Homogenization> difficulty_homogenization;
  std::optional<EntropyCoupling> entropy_coupling;
  std::optional<CausalSubspace> causal_subspace;
  std::uint64_t seed = 42;
};

struct GenerationGapSpec {
  int n_models = 4;
  int n_problems = 300;
  int hidden_dim = 32;
  int num_layers = 12;
  int decision_layer = 6;
  int latent_rank = 6;
  double pre_noise = 0.3;
  double post_signal = 0.5;  // scale of the shared source after the decision layer
  double post_noise = 1.0;   // model-specific late-layer noise
  double correctness_strength = 0.0;  // 0 selects 2 * sqrt(pre_noise^2 + post_noise^2)
  double skill_mean = 0.45;
  double skill_spread = 0.2;
  double label_noise = 0.1;
  std::uint64_t seed = 42;
};

/// Planted facts. Kept apart from the cohort so analyses cannot read them.
struct GroundTruth {
  std::string generator;
  std::uint64_t seed = 0;
  std::vector<std::string> model_ids;
  std::vector<std::string> problem_ids;
  std::vector<double> latent_difficulty;
  std::vector<int> correct_counts;
  std::optional<std::vector<double>> shared_correctness_direction;
  std::map<std::string, std::vector<std::vector<double>>> causal_bases;  // model -> columns
  std::vector<std::string> determined_problems;
  std::optional<double> entropy_planted_r;
  std::optional<double> inversion_peak_depth;
  std::vector<std::string> reversed_domains;
  std::optional<int> decision_layer;
  std::optional<double> expected_pre_cka;
  std::optional<double> expected_post_cka;
  std::optional<double> expected_gap;
};

std::string ground_truth_to_json(const GroundTruth& truth);
GroundTruth ground_truth_from_json(std::string_view text);

struct SynthCohort {
  std::vector<RunManifest> manifests;
  std::vector<ActivationSet> sets;
  GroundTruth truth;

  Cohort cohort() const;
};

SynthCohort generate(const SynthSpec& spec);
SynthCohort plant_generation_gap(const GenerationGapSpec& spec);

inline constexpr const char* kGroundTruthFile = "ground_truth.json";

/// One run directory per model under `dir`, plus the sidecar file.
void write_synth(const std::filesystem::path& dir, const SynthCohort& cohort);
GroundTruth read_ground_truth(const std::filesystem::path& dir);

/// Finite-sample expectation of linear CKA for n Gaussian rows with the
/// given covariance blocks (ratio of expectations of the Wishart moments).
double expected_linear_cka(const Eigen::MatrixXd& sigma_x, const Eigen::MatrixXd& sigma_y,
                           const Eigen::MatrixXd& sigma_xy, int n);

/// Uniformly distributed orthogonal matrix.
Eigen::MatrixXd random_orthogonal(int d, std::uint64_t seed);

}  // namespace simlab
