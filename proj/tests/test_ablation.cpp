#include <doctest.h>

#include <numbers>
#include <random>

#include "oracles.hpp"
#include "simlab/ablation.hpp"
#include "simlab/error.hpp"

using namespace simlab;
using Eigen::MatrixXd;

namespace {

MatrixXd orthonormal_columns(Eigen::Index d, Eigen::Index k, std::uint64_t seed) {
  return fixture::orthogonal(d, seed).leftCols(k);
}

// Largest principal angle, in degrees, between the column spans of two
// orthonormal bases of equal dimension.
double max_principal_angle(const MatrixXd& a, const MatrixXd& b) {
  Eigen::JacobiSVD<MatrixXd> svd(a.transpose() * b);
  const double c = std::clamp(svd.singularValues().minCoeff(), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

std::vector<InterventionResult> results(const std::string& prefix, int n, int flips) {
  std::vector<InterventionResult> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({prefix + std::to_string(i), "42", i < flips ? "17" : "42"});
  }
  return out;
}

// One model's heads at three depths; only `head` at the middle depth reaches
// the maximum flip count.
void add_model(std::vector<HeadAblationRecord>& out, const std::string& model, const std::string& type,
               int max_flips) {
  for (int layer : {4, 12, 20}) {
    for (int head = 0; head < 4; ++head) {
      const int flips = layer == 12 && head == 2 ? max_flips : (head + layer) % 3;
      out.push_back({model, type, layer, head, 30, results("p", 30, flips)});
    }
  }
}

struct Planted {
  MatrixXd x;
  std::vector<bool> labels;
  Eigen::VectorXd w;
};

Planted planted(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Planted p{fixture::gaussian(n, d, seed), {}, fixture::gaussian(d, 1, seed + 7).col(0).normalized()};
  const MatrixXd e = fixture::gaussian(n, 1, seed + 1);
  for (Eigen::Index i = 0; i < n; ++i) p.labels.push_back(p.x.row(i).dot(p.w) + 0.05 * e(i, 0) > 0);
  return p;
}

}  // namespace

TEST_CASE("complement projector is symmetric, idempotent and annihilates the basis") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = static_cast<Eigen::Index>(2 + rng() % 30);
    const auto k = static_cast<Eigen::Index>(1 + rng() % static_cast<unsigned>(d - 1));
    const auto s = make_subspace(orthonormal_columns(d, k, rng()));
    const MatrixXd p = complement_projector(s);
    CHECK((p - p.transpose()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((p * p - p).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((p * s.basis).cwiseAbs().maxCoeff() < 1e-6);

    const MatrixXd x = fixture::gaussian(20, d, rng());
    const MatrixXd once = ablate(x, s);
    CHECK((once * s.basis).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((ablate(once, s) - once).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("ablation examples") {
  const auto e1 = make_subspace(MatrixXd::Identity(4, 1));
  const MatrixXd eye = MatrixXd::Identity(4, 4);
  MatrixXd expected = eye;
  expected(0, 0) = 0.0;
  CHECK((ablate(eye, e1) - expected).cwiseAbs().maxCoeff() < 1e-12);

  MatrixXd orth = fixture::gaussian(5, 4, 2);
  orth.col(0).setZero();
  CHECK((ablate(orth, e1) - orth).cwiseAbs().maxCoeff() < 1e-9);

  std::vector<std::string> ids{"a", "b", "c", "d", "e"};
  const ActivationSet set("m", 2, ids, fixture::gaussian(5, 4, 3).cast<float>());
  const auto ablated = ablate(set, e1);
  CHECK(ablated.model_id() == "m");
  CHECK(ablated.matrix().col(0).cwiseAbs().maxCoeff() == 0.0F);
}

TEST_CASE("ablation errors") {
  const MatrixXd x = fixture::gaussian(5, 4, 1);
  CHECK_THROWS_AS(ablate(x, make_subspace(MatrixXd::Identity(3, 1))), PreconditionError);
  CHECK_THROWS_AS(make_subspace(MatrixXd(4, 0)), PreconditionError);
  Subspace empty{MatrixXd(4, 0), "", 1.0};
  CHECK_THROWS_AS(ablate(x, empty), PreconditionError);
  CHECK_THROWS_AS(probe_accuracy_drop(x, {true, false, true, false, true}, empty, ProbeModel{}),
                  PreconditionError);
  // k = d zeroes every activation.
  CHECK_THROWS_AS(ablate(x, make_subspace(MatrixXd::Identity(4, 4))), DegenerateInputError);
  CHECK(complement_projector(make_subspace(MatrixXd::Identity(4, 4))).isZero());
  CHECK_THROWS_AS(make_subspace(2.0 * MatrixXd::Identity(4, 1)), ValidationError);
}

TEST_CASE("identical weight vectors give a rank-one subspace") {
  const Eigen::RowVectorXd w = fixture::gaussian(1, 8, 4).row(0);
  const MatrixXd stack = w.replicate(25, 1);
  const auto s = correctness_subspace(stack);
  REQUIRE(s.k() == 1);
  CHECK(std::abs(std::abs(s.basis.col(0).dot(w.normalized().transpose())) - 1.0) < 1e-9);
  CHECK(s.variance_captured == doctest::Approx(1.0));
  CHECK_THROWS_AS(correctness_subspace(stack, SubspaceRule{2}), PreconditionError);
  CHECK_THROWS_AS(correctness_subspace(stack.topRows(1)), PreconditionError);
  CHECK_THROWS_AS(correctness_subspace(MatrixXd::Zero(5, 8)), DegenerateInputError);
}

TEST_CASE("a planted plane is recovered within five degrees") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index d = 16;
    const MatrixXd plane = orthonormal_columns(d, 2, rng());
    const MatrixXd coef = fixture::gaussian(25, 2, rng());
    const MatrixXd stack = coef * plane.transpose() + 0.02 * fixture::gaussian(25, d, rng());
    const auto s = correctness_subspace(stack, SubspaceRule{2});
    CHECK(max_principal_angle(s.basis, plane) <= 5.0);
    const auto by_variance = correctness_subspace(stack, SubspaceRule{std::nullopt, 0.9});
    CHECK(by_variance.k() == 2);
    CHECK(by_variance.variance_captured >= 0.9);
  }
}

TEST_CASE("random orthogonal subspace avoids the given basis") {
  const MatrixXd avoid = orthonormal_columns(10, 3, 6);
  const auto s = random_orthogonal_subspace(10, 3, avoid, 7);
  CHECK(s.k() == 3);
  CHECK((s.basis.transpose() * s.basis - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((s.basis.transpose() * avoid).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(random_orthogonal_subspace(10, 3, avoid, 7).basis == s.basis);
  CHECK_THROWS_AS(random_orthogonal_subspace(10, 8, avoid, 7), PreconditionError);
}

TEST_CASE("flip rate counts changed predictions") {
  const std::vector<std::string> ids{"a", "b", "c", "d"};
  const auto r = flip_rate(ids, std::vector<bool>{true, true, false, true}, std::vector<bool>{true, false, false, true},
                           AblationProtocol::strict_all_correct);
  CHECK(r.flip_rate == 0.25);
  CHECK(r.changed == 1);
  CHECK(r.n == 4);
  CHECK(r.protocol == AblationProtocol::strict_all_correct);
  const std::vector<std::string> same{"1", "2", "3", "4"};
  CHECK(flip_rate(ids, same, same, AblationProtocol::relaxed_10_of_14).flip_rate == 0.0);
  CHECK_THROWS_AS(flip_rate(ids, same, std::vector<std::string>{"1"}, AblationProtocol::strict_all_correct),
                  PreconditionError);
  CHECK_THROWS_AS(flip_rate({}, std::vector<std::string>{}, std::vector<std::string>{},
                            AblationProtocol::strict_all_correct),
                  PreconditionError);
}

TEST_CASE("protocol agreement sets") {
  CHECK(protocol_min_count(AblationProtocol::strict_all_correct, 14) == 14);
  CHECK(protocol_min_count(AblationProtocol::relaxed_10_of_14, 14) == 10);
  CHECK(protocol_min_count(AblationProtocol::relaxed_10_of_14, 7) == 5);
  CHECK(protocol_from_string(to_string(AblationProtocol::relaxed_10_of_14)) == AblationProtocol::relaxed_10_of_14);
  CHECK_THROWS_AS(protocol_from_string("loose"), PreconditionError);

  const auto profile = difficulty_from_counts(14, {"a", "b", "c", "d"}, {14, 12, 10, 9});
  RunManifest m{"m", "f", 4, {}};
  for (const auto& [id, ok] : std::vector<std::pair<std::string, bool>>{{"a", true}, {"b", true}, {"c", false}, {"d", true}}) {
    m.records.push_back({id, "x", ok, "", std::nullopt});
  }
  CHECK(protocol_problems(profile, m, AblationProtocol::strict_all_correct) == std::vector<std::string>{"a"});
  CHECK(protocol_problems(profile, m, AblationProtocol::relaxed_10_of_14) == std::vector<std::string>{"a", "b"});
}

TEST_CASE("ablating the probe subspace removes decodability") {
  const auto data = planted(600, 12, 8);
  const auto probe = train_probe(data.x, data.labels, ProbeOptions{});
  const double majority = majority_rate(data.labels);

  const auto s = correctness_subspace(probe);
  const auto drop = probe_accuracy_drop(data.x, data.labels, s, probe);
  CHECK(drop.before >= 0.95);
  CHECK(std::abs(drop.after - majority) <= 0.05);

  const auto planted_dir = make_subspace(data.w);
  CHECK(std::abs(probe_accuracy_drop(data.x, data.labels, planted_dir, probe).after - majority) <= 0.05);

  const auto control = random_orthogonal_subspace(12, 1, data.w, 9);
  const auto kept = probe_accuracy_drop(data.x, data.labels, control, probe);
  CHECK(std::abs(kept.before - kept.after) <= 0.03);
}

TEST_CASE("subspace files round-trip exactly") {
  fixture::TempDir dir("basis");
  const auto s = make_subspace(orthonormal_columns(7, 3, 10), "probes/m.probe.json");
  write_subspace(s, dir / "m.basis.json");
  const auto back = read_subspace(dir / "m.basis.json");
  CHECK(back.basis == s.basis);
  CHECK(back.source_probe == s.source_probe);
  CHECK_THROWS_AS(read_subspace(dir / "none.json"), Error);
}

TEST_CASE("intervention request and response round-trip") {
  InterventionRequest req{"m1", 5, "subspace_projection", "m1.basis.json", std::nullopt, {"a", "b"}};
  const auto back = request_from_json(request_to_json(req));
  CHECK(back.model_id == "m1");
  CHECK(back.layer_index == 5);
  CHECK(back.kind == "subspace_projection");
  CHECK(back.basis_file == "m1.basis.json");
  CHECK(back.problem_ids == req.problem_ids);

  InterventionRequest head{"m1", 3, "head_zeroing", "", 7, {"a"}};
  CHECK(request_from_json(request_to_json(head)).head == 7);

  const InterventionResponse resp{"m1", 5, {{"a", "12", "12"}, {"b", "3", "4"}}};
  const auto rb = response_from_json(response_to_json(resp));
  REQUIRE(rb.results.size() == 2);
  CHECK(rb.results[1].after_answer == "4");
  CHECK_NOTHROW(check_response(req, rb));
  CHECK(flip_rate(rb, AblationProtocol::strict_all_correct).flip_rate == 0.5);
}

TEST_CASE("intervention files are validated") {
  CHECK_THROWS_AS(request_from_json("not json"), FormatError);
  CHECK_THROWS_AS(request_from_json(R"({"model_id":"m","layer_index":1,"kind":"subspace_projection","problem_ids":["a"]})"),
                  ValidationError);
  CHECK_THROWS_AS(request_from_json(R"({"model_id":"m","layer_index":1,"kind":"head_zeroing","problem_ids":["a"]})"),
                  ValidationError);
  CHECK_THROWS_AS(request_from_json(R"({"model_id":"m","layer_index":1,"kind":"dropout","problem_ids":["a"]})"),
                  ValidationError);
  CHECK_THROWS_AS(
      request_from_json(R"({"model_id":"m","layer_index":1,"kind":"head_zeroing","head":1,"problem_ids":[]})"),
      ValidationError);
  CHECK_THROWS_AS(response_from_json(R"({"model_id":"m","layer_index":1})"), FormatError);

  const InterventionRequest req{"m1", 5, "subspace_projection", "b.json", std::nullopt, {"a", "b"}};
  CHECK_THROWS_AS(check_response(req, {"m2", 5, {{"a", "1", "1"}, {"b", "1", "1"}}}), ValidationError);
  CHECK_THROWS_AS(check_response(req, {"m1", 4, {{"a", "1", "1"}, {"b", "1", "1"}}}), ValidationError);
  CHECK_THROWS_AS(check_response(req, {"m1", 5, {{"a", "1", "1"}}}), ValidationError);
  CHECK_THROWS_AS(check_response(req, {"m1", 5, {{"b", "1", "1"}, {"a", "1", "1"}}}), ValidationError);
}

TEST_CASE("head ablation reproduces the published maximum flip rates") {
  std::vector<HeadAblationRecord> records;
  add_model(records, "qwen-1.5b", "MHA", 19);
  add_model(records, "smollm-1.7b", "MHA", 14);
  add_model(records, "gemma-1-2b", "MHA", 13);
  add_model(records, "qwen-3b", "MHA", 13);
  add_model(records, "gemma-2-2b", "GQA", 6);
  add_model(records, "llama-3b", "GQA", 6);

  const auto report = head_ablation_report(head_records_from_json(head_records_to_json(records)));
  CHECK(report.heads.size() == records.size());
  const auto& qwen = report.per_model.at("qwen-1.5b").max;
  CHECK(qwen.flips == 19);
  CHECK(qwen.rate * 100 == doctest::Approx(63.3).epsilon(0.001));
  CHECK(qwen.layer == 12);
  CHECK(qwen.head == 2);
  CHECK(report.per_model.at("smollm-1.7b").max.rate * 100 == doctest::Approx(46.7).epsilon(0.001));
  CHECK(report.per_type.at("MHA").min_of_max * 100 == doctest::Approx(43.3).epsilon(0.001));
  CHECK(report.per_type.at("MHA").max_of_max * 100 == doctest::Approx(63.3).epsilon(0.001));
  CHECK(report.per_type.at("MHA").models == 4);
  CHECK(report.per_type.at("GQA").min_of_max == doctest::Approx(0.2));
  CHECK(report.per_type.at("GQA").max_of_max == doctest::Approx(0.2));
}

TEST_CASE("head ablation edge cases") {
  std::vector<HeadAblationRecord> quiet;
  add_model(quiet, "m", "MHA", 0);
  for (auto& r : quiet) r.results = results("p", 30, 0);
  for (const auto& h : head_ablation_report(quiet).heads) CHECK(h.rate == 0.0);

  std::vector<HeadAblationRecord> known{{"m", "MHA", 1, 0, 30, results("p", 30, 7)},
                                        {"m", "MHA", 1, 1, 30, results("p", 30, 7)}};
  const auto r = head_ablation_report(known);
  CHECK(r.heads[0].rate == 7.0 / 30.0);
  CHECK(r.per_model.at("m").max.head == 0);  // first head attaining the maximum

  std::vector<HeadAblationRecord> short_rec{{"m", "MHA", 1, 0, 30, results("p", 29, 1)}};
  CHECK_THROWS_AS(head_ablation_report(short_rec), ValidationError);
  std::vector<HeadAblationRecord> dup{known[0], known[0]};
  CHECK_THROWS_AS(head_ablation_report(dup), ValidationError);
  std::vector<HeadAblationRecord> mixed{known[0], {"m", "GQA", 2, 0, 30, results("p", 30, 1)}};
  CHECK_THROWS_AS(head_ablation_report(mixed), ValidationError);
  CHECK_THROWS_AS(head_records_from_json("{\"records\": [{}]}"), FormatError);
}
