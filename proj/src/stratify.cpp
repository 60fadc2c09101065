#include "simlab/stratify.hpp"

#include <algorithm>
#include <unordered_map>

#include <json.hpp>

#include "simlab/error.hpp"

namespace simlab {

using json = nlohmann::json;

int DifficultyProfile::count(const std::string& problem_id) const {
  auto it = std::ranges::find(problem_ids, problem_id);
  if (it == problem_ids.end()) throw PreconditionError("problem not in profile: " + problem_id);
  return counts[static_cast<std::size_t>(it - problem_ids.begin())];
}

std::vector<int> DifficultyProfile::histogram() const {
  std::vector<int> h(static_cast<std::size_t>(cohort_size) + 1, 0);
  for (int c : counts) ++h[static_cast<std::size_t>(c)];
  return h;
}

DifficultyProfile difficulty_from_counts(int cohort_size, std::vector<std::string> problem_ids,
                                         std::vector<int> counts) {
  if (problem_ids.size() != counts.size()) {
    throw PreconditionError("difficulty: ids and counts differ in length");
  }
  for (int c : counts) {
    if (c < 0 || c > cohort_size) throw ValidationError("difficulty count out of range");
  }
  return {cohort_size, std::move(problem_ids), std::move(counts)};
}

DifficultyProfile difficulty(const CohortIndex& cohort, std::span<const RunManifest> manifests) {
  if (manifests.size() < 2) throw PreconditionError("difficulty needs at least 2 models");
  DifficultyProfile p;
  p.cohort_size = static_cast<int>(manifests.size());
  p.problem_ids = cohort.shared_problem_ids;
  p.counts.assign(p.problem_ids.size(), 0);
  for (const auto& m : manifests) {
    std::unordered_map<std::string_view, bool> flag;
    for (const auto& r : m.records) flag.emplace(r.problem_id, r.correct);
    for (std::size_t i = 0; i < p.problem_ids.size(); ++i) {
      auto it = flag.find(p.problem_ids[i]);
      if (it == flag.end()) {
        throw ValidationError("missing correctness flag for " + m.model_id + " on " +
                              p.problem_ids[i]);
      }
      if (it->second) ++p.counts[i];
    }
  }
  return p;
}

DifficultyProfile difficulty(const Cohort& cohort) {
  std::vector<RunManifest> manifests;
  for (const auto& id : cohort.model_ids()) manifests.push_back(cohort.manifest(id));
  return difficulty(cohort.index(), manifests);
}

namespace {

const char* kind_name(StratumKind k) {
  switch (k) {
    case StratumKind::difficulty_bin: return "difficulty_bin";
    case StratumKind::agreement: return "agreement";
    case StratumKind::correctness_pair: return "correctness_pair";
    case StratumKind::domain: return "domain";
    case StratumKind::custom: return "custom";
  }
  return "custom";
}

StratumKind kind_from(const std::string& s) {
  for (auto k : {StratumKind::difficulty_bin, StratumKind::agreement,
                 StratumKind::correctness_pair, StratumKind::domain, StratumKind::custom}) {
    if (s == kind_name(k)) return k;
  }
  throw FormatError("unknown stratum kind: " + s);
}

}  // namespace

std::string stratum_to_json(const Stratum& s) {
  json j = {{"name", s.name},
            {"kind", kind_name(s.kind)},
            {"definition", s.definition},
            {"problem_ids", s.problem_ids}};
  return j.dump(2) + "\n";
}

Stratum stratum_from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    return {j.at("name").get<std::string>(), kind_from(j.at("kind").get<std::string>()),
            j.at("definition").get<std::string>(),
            j.at("problem_ids").get<std::vector<std::string>>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed stratum: ") + e.what());
  }
}

std::vector<CountRange> default_difficulty_edges(int m) {
  if (m < 2) throw PreconditionError("difficulty bins need a cohort of at least 2 models");
  // Split the M+1 count values into thirds; M = 14 gives 0-4 / 5-9 / 10-14.
  const int values = m + 1;
  const int hard_hi = values / 3 - 1;
  const int medium_hi = (2 * values) / 3 - 1;
  return {{"hard", 0, hard_hi}, {"medium", hard_hi + 1, medium_hi}, {"easy", medium_hi + 1, m}};
}

std::vector<CountRange> singleton_edges(int m) {
  std::vector<CountRange> out;
  for (int c = 0; c <= m; ++c) out.push_back({std::to_string(c), c, c});
  return out;
}

std::vector<Stratum> bin_by_difficulty(const DifficultyProfile& profile,
                                       std::span<const CountRange> edges) {
  const int m = profile.cohort_size;
  std::vector<int> owner(static_cast<std::size_t>(m) + 1, -1);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& r = edges[e];
    if (r.lo > r.hi || r.lo < 0 || r.hi > m) {
      throw PreconditionError("difficulty edge '" + r.name + "' is outside 0.." +
                              std::to_string(m));
    }
    for (int c = r.lo; c <= r.hi; ++c) {
      if (owner[static_cast<std::size_t>(c)] != -1) {
        throw PreconditionError("difficulty edges overlap at count " + std::to_string(c));
      }
      owner[static_cast<std::size_t>(c)] = static_cast<int>(e);
    }
  }
  for (int c = 0; c <= m; ++c) {
    if (owner[static_cast<std::size_t>(c)] == -1) {
      throw PreconditionError("difficulty edges do not cover count " + std::to_string(c));
    }
  }
  std::vector<Stratum> out;
  for (const auto& r : edges) {
    out.push_back({r.name, StratumKind::difficulty_bin,
                   "count " + std::to_string(r.lo) + "-" + std::to_string(r.hi), {}});
  }
  for (std::size_t i = 0; i < profile.problem_ids.size(); ++i) {
    const int e = owner[static_cast<std::size_t>(profile.counts[i])];
    out[static_cast<std::size_t>(e)].problem_ids.push_back(profile.problem_ids[i]);
  }
  return out;
}

AgreementStrata agreement_strata(const RunManifest& a, const RunManifest& b,
                                 std::span<const std::string> problem_ids) {
  AgreementStrata s{
      {"same_answer", StratumKind::agreement, "same_answer", {}},
      {"different_answer", StratumKind::agreement, "different_answer", {}},
      {"both_correct", StratumKind::correctness_pair, "both_correct", {}},
      {"both_wrong", StratumKind::correctness_pair, "both_wrong", {}},
      {"split", StratumKind::correctness_pair, "split", {}},
  };
  for (const auto& id : problem_ids) {
    const auto* ra = a.find(id);
    const auto* rb = b.find(id);
    if (!ra || !rb) {
      throw ValidationError("missing answer for problem " + id + " (" + (ra ? b : a).model_id +
                            ")");
    }
    (ra->answer == rb->answer ? s.same_answer : s.different_answer).problem_ids.push_back(id);
    if (ra->correct && rb->correct) {
      s.both_correct.problem_ids.push_back(id);
    } else if (!ra->correct && !rb->correct) {
      s.both_wrong.problem_ids.push_back(id);
    } else {
      s.split.problem_ids.push_back(id);
    }
  }
  return s;
}

std::map<std::string, Stratum> domain_strata(const RunManifest& manifest,
                                             std::span<const std::string> problem_ids) {
  std::map<std::string, Stratum> out;
  for (const auto& id : problem_ids) {
    const auto* r = manifest.find(id);
    if (!r || r->domain.empty()) return {};
    auto& s = out[r->domain];
    if (s.name.empty()) s = {"domain=" + r->domain, StratumKind::domain, "domain=" + r->domain, {}};
    s.problem_ids.push_back(id);
  }
  return out;
}

std::vector<int> grid_mapping(int num_layers, int grid_size) {
  if (grid_size < 2) throw PreconditionError("grid size must be >= 2");
  if (num_layers < 2) throw PreconditionError("layer grid needs at least 2 layers");
  std::vector<int> out(static_cast<std::size_t>(grid_size));
  const long span = num_layers - 1;
  const long denom = grid_size - 1;
  for (int g = 0; g < grid_size; ++g) {
    out[static_cast<std::size_t>(g)] = static_cast<int>((2L * g * span + denom) / (2L * denom));
  }
  return out;
}

int LayerGrid::layer(const std::string& model_id, int grid_point) const {
  auto it = native.find(model_id);
  if (it == native.end()) throw PreconditionError("model not in layer grid: " + model_id);
  if (grid_point < 0 || grid_point >= grid_size) {
    throw PreconditionError("grid point " + std::to_string(grid_point) + " outside 0.." +
                            std::to_string(grid_size - 1));
  }
  return it->second[static_cast<std::size_t>(grid_point)];
}

LayerGrid layer_grid(const std::map<std::string, int>& num_layers, int grid_size) {
  LayerGrid g;
  g.grid_size = grid_size;
  for (const auto& [model, layers] : num_layers) g.native[model] = grid_mapping(layers, grid_size);
  return g;
}

std::vector<int> StageSplit::pre_layers() const {
  std::vector<int> out;
  for (int l = 0; l < decision_layer; ++l) out.push_back(l);
  return out;
}

std::vector<int> StageSplit::post_layers() const {
  std::vector<int> out;
  for (int l = decision_layer; l < num_layers; ++l) out.push_back(l);
  return out;
}

std::optional<int> first_decodable_layer(std::span<const double> acc, double chance,
                                         double margin, int run_length) {
  if (!(chance > 0.0 && chance < 1.0)) throw PreconditionError("chance must be in (0, 1)");
  if (run_length < 1) throw PreconditionError("run length must be >= 1");
  for (double a : acc) {
    if (!(a >= 0.0 && a <= 1.0)) throw PreconditionError("accuracies must lie in [0, 1]");
  }
  const auto n = static_cast<int>(acc.size());
  const double threshold = chance + margin;
  for (int start = 0; start + run_length <= n; ++start) {
    bool run = true;
    for (int k = 0; k < run_length && run; ++k) {
      run = acc[static_cast<std::size_t>(start + k)] > threshold;
    }
    if (run) return start;
  }
  return std::nullopt;
}

std::optional<StageSplit> stage_split(std::span<const double> acc, double chance, double margin,
                                      int run_length) {
  const auto first = first_decodable_layer(acc, chance, margin, run_length);
  if (!first || *first == 0) return std::nullopt;
  return StageSplit{*first, static_cast<int>(acc.size())};
}

}  // namespace simlab
