#include "simlab/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "f64_block.hpp"
#include "simlab/error.hpp"
#include "simlab/stats.hpp"

namespace simlab {

using json = nlohmann::json;

namespace {

// Flip column signs so each column's largest-magnitude entry is positive.
void canonical_signs(Eigen::MatrixXd& basis) {
  for (Eigen::Index c = 0; c < basis.cols(); ++c) {
    Eigen::Index arg = 0;
    basis.col(c).cwiseAbs().maxCoeff(&arg);
    if (basis(arg, c) < 0) basis.col(c) *= -1.0;
  }
}

}  // namespace

Subspace correctness_subspace(const Eigen::MatrixXd& w, const SubspaceRule& rule,
                              std::string source) {
  if (w.rows() < 2) throw PreconditionError("correctness subspace needs >= 2 weight vectors");
  if (!w.allFinite()) throw PreconditionError("weight stack contains non-finite values");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  const double total = s.squaredNorm();
  if (total == 0.0) throw DegenerateInputError("weight stack is all zeros");
  const double tol = s(0) * static_cast<double>(std::max(w.rows(), w.cols())) *
                     std::numeric_limits<double>::epsilon();
  Eigen::Index rank = 0;
  while (rank < s.size() && s(rank) > tol) ++rank;

  Eigen::Index k = 0;
  if (rule.k) {
    if (*rule.k < 1) throw PreconditionError("subspace dimension k must be >= 1");
    if (*rule.k > rank) {
      throw PreconditionError("k = " + std::to_string(*rule.k) + " exceeds the weight stack rank " +
                              std::to_string(rank));
    }
    k = *rule.k;
  } else {
    if (!(rule.variance > 0.0 && rule.variance <= 1.0)) {
      throw PreconditionError("variance rule must lie in (0, 1]");
    }
    if (rule.cap < 1) throw PreconditionError("subspace cap must be >= 1");
    double acc = 0.0;
    while (k < rank) {
      acc += s(k) * s(k);
      ++k;
      if (acc >= rule.variance * total) break;
    }
    k = std::min<Eigen::Index>(k, rule.cap);
  }
  Subspace out;
  out.basis = svd.matrixV().leftCols(k);
  canonical_signs(out.basis);
  out.variance_captured = s.head(k).squaredNorm() / total;
  out.source_probe = std::move(source);
  return out;
}

Subspace correctness_subspace(const ProbeModel& probe, const SubspaceRule& rule) {
  return correctness_subspace(probe.weights, rule,
                              probe.source_model_id + "@" + std::to_string(probe.layer_index));
}

Subspace make_subspace(Eigen::MatrixXd basis, std::string source) {
  if (basis.cols() < 1) throw PreconditionError("subspace needs k >= 1");
  if (basis.cols() > basis.rows()) throw PreconditionError("subspace has k > d");
  const Eigen::MatrixXd gram = basis.transpose() * basis;
  const double err =
      (gram - Eigen::MatrixXd::Identity(basis.cols(), basis.cols())).cwiseAbs().maxCoeff();
  if (!(err <= 1e-8)) {
    throw ValidationError("basis is not orthonormal (max Gram deviation " + std::to_string(err) + ")");
  }
  return {std::move(basis), std::move(source), 1.0};
}

Subspace random_orthogonal_subspace(Eigen::Index d, Eigen::Index k, const Eigen::MatrixXd& avoid,
                                    std::uint64_t seed) {
  if (k < 1) throw PreconditionError("subspace needs k >= 1");
  if (avoid.size() > 0 && avoid.rows() != d) throw PreconditionError("avoid basis has wrong width");
  const Eigen::Index taken = avoid.size() > 0 ? avoid.cols() : 0;
  if (k + taken > d) throw PreconditionError("not enough room for an orthogonal subspace");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(d, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index r = 0; r < d; ++r) g(r, c) = normal(rng);
  }
  if (taken > 0) {
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(avoid).householderQ() *
                              Eigen::MatrixXd::Identity(d, taken);
    g -= q * (q.transpose() * g);
    g -= q * (q.transpose() * g);  // second pass for numerical orthogonality
  }
  Eigen::MatrixXd basis =
      Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() * Eigen::MatrixXd::Identity(d, k);
  return {std::move(basis), "random", 0.0};
}

Eigen::MatrixXd complement_projector(const Subspace& s) {
  return Eigen::MatrixXd::Identity(s.dim(), s.dim()) - s.basis * s.basis.transpose();
}

Eigen::MatrixXd ablate(const Eigen::MatrixXd& x, const Subspace& s) {
  if (s.k() < 1) throw PreconditionError("cannot ablate a k = 0 subspace");
  if (x.cols() != s.dim()) {
    throw PreconditionError("dimension mismatch: activations have width " + std::to_string(x.cols()) +
                            ", subspace lives in R^" + std::to_string(s.dim()));
  }
  if (s.k() == s.dim()) {
    throw DegenerateInputError("subspace spans the full space; ablation would zero every activation");
  }
  return x - (x * s.basis) * s.basis.transpose();
}

ActivationSet ablate(const ActivationSet& x, const Subspace& s) {
  const Eigen::MatrixXd out = ablate(x.to_double(), s);
  return x.with_matrix(out.cast<float>());
}

std::string to_string(AblationProtocol p) {
  return p == AblationProtocol::strict_all_correct ? "strict_all_correct" : "relaxed_10_of_14";
}

AblationProtocol protocol_from_string(const std::string& s) {
  if (s == "strict_all_correct" || s == "strict") return AblationProtocol::strict_all_correct;
  if (s == "relaxed_10_of_14" || s == "relaxed") return AblationProtocol::relaxed_10_of_14;
  throw PreconditionError("unknown ablation protocol: " + s);
}

int protocol_min_count(AblationProtocol p, int m) {
  if (m < 2) throw PreconditionError("protocol needs a cohort of at least 2 models");
  if (p == AblationProtocol::strict_all_correct) return m;
  return (10 * m + 13) / 14;
}

std::vector<std::string> protocol_problems(const DifficultyProfile& profile,
                                           const RunManifest& model, AblationProtocol p) {
  const int min_count = protocol_min_count(p, profile.cohort_size);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < profile.problem_ids.size(); ++i) {
    if (profile.counts[i] < min_count) continue;
    const auto* r = model.find(profile.problem_ids[i]);
    if (!r) throw ValidationError(model.model_id + " has no record for " + profile.problem_ids[i]);
    if (r->correct) out.push_back(profile.problem_ids[i]);
  }
  return out;
}

AblationReport flip_rate(const std::vector<std::string>& ids, const std::vector<std::string>& before,
                         const std::vector<std::string>& after, AblationProtocol protocol) {
  if (ids.size() != before.size() || ids.size() != after.size()) {
    throw PreconditionError("flip rate: misaligned problem, before and after lists");
  }
  if (ids.empty()) throw PreconditionError("flip rate of an empty problem set");
  AblationReport r;
  r.n = ids.size();
  for (std::size_t i = 0; i < r.n; ++i) r.changed += before[i] != after[i];
  r.flip_rate = static_cast<double>(r.changed) / static_cast<double>(r.n);
  r.protocol = protocol;
  r.problem_ids = ids;
  r.before = before;
  r.after = after;
  return r;
}

AblationReport flip_rate(const std::vector<std::string>& ids, const std::vector<bool>& before,
                         const std::vector<bool>& after, AblationProtocol protocol) {
  auto text = [](const std::vector<bool>& v) {
    std::vector<std::string> out;
    for (bool b : v) out.emplace_back(b ? "1" : "0");
    return out;
  };
  return flip_rate(ids, text(before), text(after), protocol);
}

AccuracyDrop probe_accuracy_drop(const Eigen::MatrixXd& x, const std::vector<bool>& labels,
                                 const Subspace& s, const ProbeModel& probe) {
  if (s.k() < 1) throw PreconditionError("probe accuracy drop needs k >= 1");
  const Eigen::MatrixXd ablated = ablate(x, s);
  return {accuracy(probe.predict(x), labels), accuracy(probe.predict(ablated), labels)};
}

void write_subspace(const Subspace& s, const std::filesystem::path& path) {
  auto block = path;
  block += ".f64";
  const json j = {{"dim", s.dim()},
                  {"k", s.k()},
                  {"source_probe", s.source_probe},
                  {"variance_captured", s.variance_captured},
                  {"basis_file", block.filename().string()}};
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
  }
  std::vector<double> values(s.basis.data(), s.basis.data() + s.basis.size());  // column-major
  detail::write_f64_block(block, values);
}

Subspace read_subspace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open basis " + path.string());
  Eigen::Index d = 0, k = 0;
  Subspace s;
  std::filesystem::path block;
  try {
    const auto j = json::parse(in);
    d = j.at("dim").get<Eigen::Index>();
    k = j.at("k").get<Eigen::Index>();
    s.source_probe = j.at("source_probe").get<std::string>();
    s.variance_captured = j.at("variance_captured").get<double>();
    block = path.parent_path() / j.at("basis_file").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed basis metadata: " + e.what());
  }
  if (d < 1 || k < 1 || k > d) throw FormatError(path.string() + ": invalid basis shape");
  const auto values = detail::read_f64_block(block, static_cast<std::size_t>(d * k));
  const Eigen::MatrixXd basis = Eigen::Map<const Eigen::MatrixXd>(values.data(), d, k);
  auto checked = make_subspace(basis, s.source_probe);
  checked.variance_captured = s.variance_captured;
  return checked;
}

namespace {

json results_json(const std::vector<InterventionResult>& results) {
  json arr = json::array();
  for (const auto& r : results) {
    arr.push_back({{"problem_id", r.problem_id},
                   {"before_answer", r.before_answer},
                   {"after_answer", r.after_answer}});
  }
  return arr;
}

std::vector<InterventionResult> results_from(const json& arr) {
  std::vector<InterventionResult> out;
  for (const auto& r : arr) {
    out.push_back({r.at("problem_id").get<std::string>(), r.at("before_answer").get<std::string>(),
                   r.at("after_answer").get<std::string>()});
  }
  return out;
}

template <class F>
auto parse_or_throw(std::string_view text, const char* what, F&& f) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ") + what + ": " + e.what());
  }
}

}  // namespace

std::string request_to_json(const InterventionRequest& r) {
  json j = {{"model_id", r.model_id},
            {"layer_index", r.layer_index},
            {"kind", r.kind},
            {"problem_ids", r.problem_ids}};
  if (r.kind == "subspace_projection") j["basis_file"] = r.basis_file;
  if (r.head) j["head"] = *r.head;
  return j.dump(2) + "\n";
}

InterventionRequest request_from_json(std::string_view text) {
  auto r = parse_or_throw(text, "intervention request", [](const json& j) {
    InterventionRequest r;
    r.model_id = j.at("model_id").get<std::string>();
    r.layer_index = j.at("layer_index").get<std::uint32_t>();
    r.kind = j.at("kind").get<std::string>();
    if (j.contains("basis_file")) r.basis_file = j.at("basis_file").get<std::string>();
    if (j.contains("head")) r.head = j.at("head").get<int>();
    r.problem_ids = j.at("problem_ids").get<std::vector<std::string>>();
    return r;
  });
  if (r.kind == "subspace_projection") {
    if (r.basis_file.empty()) throw ValidationError("subspace_projection request needs basis_file");
  } else if (r.kind == "head_zeroing") {
    if (!r.head || *r.head < 0) throw ValidationError("head_zeroing request needs a head index");
  } else {
    throw ValidationError("unknown intervention kind: " + r.kind);
  }
  if (r.problem_ids.empty()) throw ValidationError("intervention request lists no problems");
  return r;
}

std::string response_to_json(const InterventionResponse& r) {
  const json j = {{"model_id", r.model_id},
                  {"layer_index", r.layer_index},
                  {"results", results_json(r.results)}};
  return j.dump(2) + "\n";
}

InterventionResponse response_from_json(std::string_view text) {
  return parse_or_throw(text, "intervention response", [](const json& j) {
    InterventionResponse r;
    r.model_id = j.at("model_id").get<std::string>();
    r.layer_index = j.at("layer_index").get<std::uint32_t>();
    r.results = results_from(j.at("results"));
    return r;
  });
}

void check_response(const InterventionRequest& request, const InterventionResponse& response) {
  if (request.model_id != response.model_id) {
    throw ValidationError("response is for model " + response.model_id + ", request was for " +
                          request.model_id);
  }
  if (request.layer_index != response.layer_index) {
    throw ValidationError("response layer does not match request layer");
  }
  if (request.problem_ids.size() != response.results.size()) {
    throw ValidationError("response answers " + std::to_string(response.results.size()) +
                          " problems, request listed " + std::to_string(request.problem_ids.size()));
  }
  for (std::size_t i = 0; i < request.problem_ids.size(); ++i) {
    if (request.problem_ids[i] != response.results[i].problem_id) {
      throw ValidationError("response problem " + std::to_string(i) + " is " +
                            response.results[i].problem_id + ", expected " + request.problem_ids[i]);
    }
  }
}

AblationReport flip_rate(const InterventionResponse& response, AblationProtocol protocol) {
  std::vector<std::string> ids, before, after;
  for (const auto& r : response.results) {
    ids.push_back(r.problem_id);
    before.push_back(r.before_answer);
    after.push_back(r.after_answer);
  }
  return flip_rate(ids, before, after, protocol);
}

HeadAblationSummary head_ablation_report(const std::vector<HeadAblationRecord>& records) {
  HeadAblationSummary out;
  for (const auto& rec : records) {
    if (rec.declared_problems < 1) throw ValidationError("declared problem count must be >= 1");
    if (rec.results.size() < static_cast<std::size_t>(rec.declared_problems)) {
      throw ValidationError(rec.model_id + " layer " + std::to_string(rec.layer) + " head " +
                            std::to_string(rec.head) + ": " + std::to_string(rec.results.size()) +
                            " results, " + std::to_string(rec.declared_problems) + " declared");
    }
    HeadFlip h{rec.model_id, rec.attention_type, rec.layer, rec.head, rec.results.size(), 0, 0.0};
    for (const auto& r : rec.results) h.flips += r.before_answer != r.after_answer;
    h.rate = static_cast<double>(h.flips) / static_cast<double>(h.n);
    out.heads.push_back(h);
  }
  std::ranges::sort(out.heads, [](const HeadFlip& a, const HeadFlip& b) {
    return std::tie(a.model_id, a.layer, a.head) < std::tie(b.model_id, b.layer, b.head);
  });
  for (std::size_t i = 1; i < out.heads.size(); ++i) {
    const auto& a = out.heads[i - 1];
    const auto& b = out.heads[i];
    if (a.model_id == b.model_id && a.layer == b.layer && a.head == b.head) {
      throw ValidationError("duplicate head record: " + b.model_id + " layer " +
                            std::to_string(b.layer) + " head " + std::to_string(b.head));
    }
  }
  for (const auto& h : out.heads) {
    auto [it, fresh] = out.per_model.try_emplace(h.model_id, ModelHeadMax{h.attention_type, h});
    if (fresh) continue;
    if (it->second.attention_type != h.attention_type) {
      throw ValidationError(h.model_id + " has inconsistent attention type tags");
    }
    if (h.rate > it->second.max.rate) it->second.max = h;
  }
  for (const auto& [model, m] : out.per_model) {
    auto [it, fresh] = out.per_type.try_emplace(m.attention_type,
                                                AttentionTypeRange{m.max.rate, m.max.rate, 0});
    auto& range = it->second;
    range.min_of_max = std::min(range.min_of_max, m.max.rate);
    range.max_of_max = std::max(range.max_of_max, m.max.rate);
    ++range.models;
  }
  return out;
}

std::vector<HeadAblationRecord> head_records_from_json(std::string_view text) {
  return parse_or_throw(text, "head ablation records", [](const json& j) {
    std::vector<HeadAblationRecord> out;
    for (const auto& r : j.at("records")) {
      out.push_back({r.at("model_id").get<std::string>(), r.at("attention_type").get<std::string>(),
                     r.at("layer").get<int>(), r.at("head").get<int>(),
                     r.at("declared_problems").get<int>(), results_from(r.at("results"))});
    }
    return out;
  });
}

std::string head_records_to_json(const std::vector<HeadAblationRecord>& records) {
  json arr = json::array();
  for (const auto& r : records) {
    arr.push_back({{"model_id", r.model_id},
                   {"attention_type", r.attention_type},
                   {"layer", r.layer},
                   {"head", r.head},
                   {"declared_problems", r.declared_problems},
                   {"results", results_json(r.results)}});
  }
  return json{{"records", arr}}.dump(2) + "\n";
}

}  // namespace simlab
