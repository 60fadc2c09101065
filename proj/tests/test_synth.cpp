#include <doctest.h>

#include <fstream>

#include "oracles.hpp"
#include "simlab/error.hpp"
#include "simlab/metrics.hpp"
#include "simlab/probes.hpp"
#include "simlab/stats.hpp"
#include "simlab/stratify.hpp"
#include "simlab/synth.hpp"

using namespace simlab;
using Eigen::MatrixXd;

namespace {

// Mean pairwise linear CKA over the cohort at one layer, restricted to rows.
double mean_pair_cka(const Cohort& cohort, std::uint32_t layer, const std::vector<Eigen::Index>& rows) {
  const auto& ids = cohort.model_ids();
  double total = 0.0;
  int pairs = 0;
  for (std::size_t a = 0; a < ids.size(); ++a) {
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      const MatrixXd x = cohort.activations(ids[a], layer).to_double()(rows, Eigen::all);
      const MatrixXd y = cohort.activations(ids[b], layer).to_double()(rows, Eigen::all);
      total += linear_cka(x, y);
      ++pairs;
    }
  }
  return total / pairs;
}

struct BinGap {
  double hard = 0.0, easy = 0.0;
};

BinGap bin_gap(const SynthCohort& synth, std::uint32_t layer) {
  const auto cohort = synth.cohort();
  const auto profile = difficulty(cohort);
  const auto bins = bin_by_difficulty(profile, default_difficulty_edges(profile.cohort_size));
  return {mean_pair_cka(cohort, layer, cohort.rows_of(bins.front().problem_ids)),
          mean_pair_cka(cohort, layer, cohort.rows_of(bins.back().problem_ids))};
}

SynthSpec inversion_spec(bool planted) {
  SynthSpec s;
  s.n_models = 6;
  s.n_problems = 300;
  s.num_layers = 11;
  if (planted) s.difficulty_homogenization = Homogenization{};
  return s;
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Mean pairwise CKA over the layers before and from the decision layer.
std::pair<double, double> stage_means(const SynthCohort& synth, int layers, int decision) {
  const auto cohort = synth.cohort();
  std::vector<Eigen::Index> all(cohort.problem_ids().size());
  std::iota(all.begin(), all.end(), 0);
  double pre = 0.0, post = 0.0;
  for (int l = 0; l < layers; ++l) {
    const double v = mean_pair_cka(cohort, static_cast<std::uint32_t>(l), all);
    (l < decision ? pre : post) += v;
  }
  return {pre / decision, post / (layers - decision)};
}

}  // namespace

TEST_CASE("generation is bit-reproducible for a fixed seed") {
  SynthSpec s;
  s.causal_subspace = CausalSubspace{};
  s.entropy_coupling = EntropyCoupling{};
  const auto a = generate(s), b = generate(s);
  REQUIRE(a.sets.size() == b.sets.size());
  for (std::size_t i = 0; i < a.sets.size(); ++i) {
    CHECK(encode_activation_set(a.sets[i]) == encode_activation_set(b.sets[i]));
  }
  CHECK(a.manifests == b.manifests);
  CHECK(ground_truth_to_json(a.truth) == ground_truth_to_json(b.truth));

  s.seed = 43;
  CHECK(encode_activation_set(generate(s).sets[0]) != encode_activation_set(a.sets[0]));

  fixture::TempDir d1("synth"), d2("synth");
  write_synth(d1.path(), a);
  write_synth(d2.path(), b);
  for (const auto& entry : std::filesystem::recursive_directory_iterator(d1.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), d1.path());
    CHECK(file_bytes(entry.path()) == file_bytes(d2.path() / rel));
  }
  CHECK(validate_path(d1.path()).empty());
  CHECK(ground_truth_to_json(read_ground_truth(d1.path())) == ground_truth_to_json(a.truth));
}

TEST_CASE("the sidecar is not part of the cohort") {
  fixture::TempDir dir("synth");
  write_synth(dir.path(), generate(SynthSpec{}));
  CHECK(std::filesystem::exists(dir / kGroundTruthFile));
  const auto cohort = load_cohort(dir.path());
  CHECK(cohort.size() == 4);
}

TEST_CASE("rotated copies have unit CKA at every layer") {
  SynthSpec s;
  s.rotated_copies = true;
  s.n_models = 3;
  const auto cohort = generate(s).cohort();
  for (std::uint32_t l = 0; l < 8; ++l) {
    const auto& a = cohort.activations("m00", l);
    for (const std::string other : {"m01", "m02"}) {
      CHECK(std::abs(linear_cka(a, cohort.activations(other, l)).value - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("difficulty homogenization plants a hard-over-easy gap at the peak depth") {
  const auto planted = generate(inversion_spec(true));
  CHECK(planted.truth.inversion_peak_depth == 0.5);
  const auto peak = bin_gap(planted, 5);
  CHECK(peak.hard - peak.easy >= 0.05);
  // Far from the bump the two bins look alike.
  const auto edge = bin_gap(planted, 0);
  CHECK(std::abs(edge.hard - edge.easy) < peak.hard - peak.easy);

  const auto null = bin_gap(generate(inversion_spec(false)), 5);
  CHECK(std::abs(null.hard - null.easy) < 0.05);
}

TEST_CASE("reversed domains flip the sign of the gap") {
  auto s = inversion_spec(true);
  s.domains = {"arithmetic"};
  s.difficulty_homogenization->reversed_domains = {"arithmetic"};
  const auto reversed = generate(s);
  CHECK(reversed.truth.reversed_domains == std::vector<std::string>{"arithmetic"});
  const auto g = bin_gap(reversed, 5);
  CHECK(g.easy - g.hard >= 0.05);
}

TEST_CASE("entropy coupling is recovered by Pearson correlation") {
  SynthSpec s;
  s.n_problems = 600;
  s.entropy_coupling = EntropyCoupling{};
  const auto synth = generate(s);
  REQUIRE(synth.truth.entropy_planted_r.has_value());
  CHECK(*synth.truth.entropy_planted_r < 0.0);
  for (const auto& m : synth.manifests) {
    std::vector<double> ent, frac;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      ent.push_back(*m.records[i].mean_attention_entropy);
      frac.push_back(static_cast<double>(synth.truth.correct_counts[i]) / s.n_models);
    }
    const double r = pearson(frac, ent);
    CHECK(r < 0.0);
    CHECK(std::abs(r - *synth.truth.entropy_planted_r) <= 0.1);
  }
  // Without coupling no entropy is recorded.
  for (const auto& m : generate(SynthSpec{}).manifests) {
    CHECK_FALSE(m.records[0].mean_attention_entropy.has_value());
  }
}

TEST_CASE("causal block determines the readout for determined problems") {
  SynthSpec s;
  s.causal_subspace = CausalSubspace{};
  const auto synth = generate(s);
  const auto cohort = synth.cohort();
  CHECK(synth.truth.determined_problems.size() == cohort.problem_ids().size());
  for (const auto& id : cohort.model_ids()) {
    const auto& basis = synth.truth.causal_bases.at(id);
    REQUIRE(basis.size() == 1);
    const auto col = static_cast<Eigen::Index>(std::ranges::find(basis[0], 1.0) - basis[0].begin());
    const auto flags = cohort.correctness(id);
    for (std::uint32_t l : cohort.layers(id)) {
      const MatrixXd x = cohort.activations(id, l).to_double();
      for (Eigen::Index i = 0; i < x.rows(); ++i) CHECK((x(i, col) > 1.0) == flags[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("shared correctness direction lives on the first coordinate") {
  SynthSpec s;
  s.shared_correctness_direction = SharedDirection{};
  const auto synth = generate(s);
  REQUIRE(synth.truth.shared_correctness_direction.has_value());
  CHECK((*synth.truth.shared_correctness_direction)[0] == 1.0);
  const auto cohort = synth.cohort();
  const auto flags = cohort.correctness("m01");
  const MatrixXd x = cohort.activations("m01", 3).to_double();
  double pos = 0.0, neg = 0.0;
  int np = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (flags[static_cast<std::size_t>(i)]) {
      pos += x(i, 0);
      ++np;
    } else {
      neg += x(i, 0);
    }
  }
  CHECK(pos / np - neg / (x.rows() - np) > 3.0);
}

TEST_CASE("generation gap matches the planted covariances") {
  const GenerationGapSpec g;
  const auto synth = plant_generation_gap(g);
  REQUIRE(synth.truth.expected_gap.has_value());
  CHECK(synth.truth.decision_layer == g.decision_layer);
  const auto [pre, post] = stage_means(synth, g.num_layers, g.decision_layer);
  CHECK(pre - post >= 0.3);
  CHECK(std::abs(pre - *synth.truth.expected_pre_cka) <= 0.05);
  CHECK(std::abs(post - *synth.truth.expected_post_cka) <= 0.05);
  CHECK(std::abs((pre - post) - *synth.truth.expected_gap) <= 0.05);
}

TEST_CASE("no late-layer change means no generation gap") {
  GenerationGapSpec g;
  g.post_noise = 0.0;
  g.post_signal = 1.0;
  g.correctness_strength = 1e-9;
  const auto synth = plant_generation_gap(g);
  const auto [pre, post] = stage_means(synth, g.num_layers, g.decision_layer);
  CHECK(std::abs(pre - post) <= 0.02);
  CHECK(std::abs(*synth.truth.expected_gap) <= 0.02);
}

TEST_CASE("probe accuracy onset recovers the planted decision layer") {
  const GenerationGapSpec g;
  const auto cohort = plant_generation_gap(g).cohort();
  for (const auto& id : cohort.model_ids()) {
    const auto labels = cohort.correctness(id);
    std::vector<double> acc;
    for (int l = 0; l < g.num_layers; ++l) {
      acc.push_back(train_probe(cohort.activations(id, static_cast<std::uint32_t>(l)), labels).cv_accuracy);
    }
    const auto split = stage_split(acc, majority_rate(labels));
    REQUIRE(split.has_value());
    CHECK(std::abs(split->decision_layer - g.decision_layer) <= 1);
  }
}

TEST_CASE("expected CKA of identical covariances with a full cross term is one") {
  const MatrixXd a = fixture::gaussian(6, 3, 1);
  const MatrixXd sigma = a * a.transpose() + 0.1 * MatrixXd::Identity(6, 6);
  CHECK(expected_linear_cka(sigma, sigma, sigma, 1000) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(expected_linear_cka(sigma, sigma, MatrixXd::Zero(6, 6), 1000) < 0.1);
}

TEST_CASE("random orthogonal matrices are orthogonal and seeded") {
  const MatrixXd q = random_orthogonal(9, 3);
  CHECK((q.transpose() * q - MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(random_orthogonal(9, 3) == q);
}

TEST_CASE("invalid specs are rejected") {
  SynthSpec s;
  s.n_models = 1;
  CHECK_THROWS_AS(generate(s), ValidationError);
  s = SynthSpec{};
  s.hidden_dims = {4};
  CHECK_THROWS_AS(generate(s), ValidationError);
  s = SynthSpec{};
  s.noise = -1.0;
  CHECK_THROWS_AS(generate(s), ValidationError);
  GenerationGapSpec g;
  g.num_layers = 5;
  CHECK_THROWS_AS(plant_generation_gap(g), ValidationError);
  g = GenerationGapSpec{};
  g.decision_layer = 0;
  CHECK_THROWS_AS(plant_generation_gap(g), ValidationError);
}
