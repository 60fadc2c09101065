#include "simlab/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "simlab/error.hpp"
#include "simlab/stats.hpp"

namespace simlab {

using json = nlohmann::json;

namespace {

std::string model_name(int m) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "m%02d", m);
  return buf;
}

std::string problem_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%04d", i);
  return buf;
}

struct Labels {
  std::vector<double> difficulty;           // latent, in [0, 1)
  std::vector<std::vector<bool>> correct;   // [model][problem]
  std::vector<int> counts;
};

// Model m is correct when the problem's latent difficulty (plus a little
// per-model noise) falls below its skill; shared difficulty makes the
// correctness flags strongly correlated across models.
Labels make_labels(int models, int problems, double skill_mean, double skill_spread,
                   double label_noise, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "labels"));
  std::uniform_real_distribution<double> unit;
  std::normal_distribution<double> normal;
  Labels out;
  out.difficulty.resize(static_cast<std::size_t>(problems));
  for (auto& t : out.difficulty) t = unit(rng);
  out.correct.assign(static_cast<std::size_t>(models), std::vector<bool>(problems));
  out.counts.assign(static_cast<std::size_t>(problems), 0);
  for (int m = 0; m < models; ++m) {
    const double pos = models > 1 ? static_cast<double>(m) / (models - 1) - 0.5 : 0.0;
    const double skill = skill_mean + skill_spread * pos;
    for (int i = 0; i < problems; ++i) {
      const bool ok = out.difficulty[static_cast<std::size_t>(i)] + label_noise * normal(rng) < skill;
      out.correct[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)] = ok;
      out.counts[static_cast<std::size_t>(i)] += ok;
    }
  }
  return out;
}

std::vector<std::string> make_answers(const std::vector<bool>& correct, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> wrong(0, 2);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    out.push_back(correct[i] ? "g" + std::to_string(i)
                             : "w" + std::to_string(i) + "_" + std::to_string(wrong(rng)));
  }
  return out;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) g(r, c) = normal(rng);
  }
  return g;
}

// d x r embedding with orthonormal columns supported on rows [reserved, d).
Eigen::MatrixXd embedding(int d, int r, int reserved, std::mt19937_64& rng) {
  const Eigen::MatrixXd g = gaussian(d - reserved, r, rng);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, r);
  a.bottomRows(d - reserved) =
      Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() * Eigen::MatrixXd::Identity(d - reserved, r);
  return a;
}

RunManifest make_manifest(const std::string& model_id, int m, int num_layers,
                          const std::vector<std::string>& problem_ids,
                          const std::vector<bool>& correct, const std::vector<std::string>& answers,
                          const std::vector<std::string>& domains,
                          const std::vector<std::optional<double>>& entropy) {
  RunManifest man;
  man.model_id = model_id;
  man.family = "fam" + std::to_string(m % 3);
  man.num_layers = num_layers;
  for (std::size_t i = 0; i < problem_ids.size(); ++i) {
    man.records.push_back({problem_ids[i], answers[i], correct[i], domains[i], entropy[i]});
  }
  return man;
}

ActivationSet make_set(const std::string& model_id, int layer,
                       const std::vector<std::string>& problem_ids, const Eigen::MatrixXd& x) {
  return ActivationSet(model_id, static_cast<std::uint32_t>(layer), problem_ids, x.cast<float>());
}

void check_skill(double skill_spread, double label_noise) {
  if (skill_spread < 0 || label_noise < 0) throw ValidationError("synth scales must be >= 0");
}

}  // namespace

Eigen::MatrixXd random_orthogonal(int d, std::uint64_t seed) {
  if (d < 1) throw PreconditionError("random_orthogonal needs d >= 1");
  std::mt19937_64 rng(seed);
  const Eigen::MatrixXd g = gaussian(d, d, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR();
  for (int i = 0; i < d; ++i) {
    if (r(i, i) < 0) q.col(i) *= -1.0;
  }
  return q;
}

double expected_linear_cka(const Eigen::MatrixXd& sx, const Eigen::MatrixXd& sy,
                           const Eigen::MatrixXd& sxy, int n) {
  if (n < 2) throw PreconditionError("expected CKA needs n >= 2");
  const double df = n - 1.0;
  const double num = df * (df + 1) * sxy.squaredNorm() + df * sx.trace() * sy.trace();
  const double dx = df * (df + 1) * sx.squaredNorm() + df * sx.trace() * sx.trace();
  const double dy = df * (df + 1) * sy.squaredNorm() + df * sy.trace() * sy.trace();
  return num / std::sqrt(dx * dy);
}

SynthCohort generate(const SynthSpec& spec) {
  const int models = spec.n_models;
  const int n = spec.n_problems;
  const int layers = spec.num_layers;
  if (models < 2) throw ValidationError("synth needs at least 2 models");
  if (n < 2) throw ValidationError("synth needs at least 2 problems");
  if (layers < 1) throw ValidationError("synth needs at least 1 layer");
  if (spec.latent_rank < 1) throw ValidationError("latent rank must be >= 1");
  if (spec.noise < 0) throw ValidationError("synth scales must be >= 0");
  if (spec.domains.empty()) throw ValidationError("synth needs at least one domain tag");
  check_skill(spec.skill_spread, spec.label_noise);

  std::vector<int> dims;
  if (spec.hidden_dims.size() == 1) {
    dims.assign(static_cast<std::size_t>(models), spec.hidden_dims[0]);
  } else if (spec.hidden_dims.size() == static_cast<std::size_t>(models)) {
    dims = spec.hidden_dims;
  } else {
    throw ValidationError("inconsistent dims: give one hidden width or one per model");
  }
  const bool equal_dims = std::ranges::all_of(dims, [&](int d) { return d == dims[0]; });
  if ((spec.rotated_copies || spec.shared_correctness_direction) && !equal_dims) {
    throw ValidationError("inconsistent dims: rotated copies and shared directions need equal widths");
  }
  const int shared = spec.shared_correctness_direction ? 1 : 0;
  const int causal_k = spec.causal_subspace ? spec.causal_subspace->k : 0;
  if (spec.causal_subspace) {
    const auto& c = *spec.causal_subspace;
    if (c.k < 1) throw ValidationError("causal subspace needs k >= 1");
    if (!(c.determinism >= 0 && c.determinism <= 1)) {
      throw ValidationError("causal determinism must lie in [0, 1]");
    }
    if (c.margin < 0 || c.jitter < 0) throw ValidationError("synth scales must be >= 0");
  }
  if (spec.shared_correctness_direction && spec.shared_correctness_direction->strength < 0) {
    throw ValidationError("synth scales must be >= 0");
  }
  if (spec.difficulty_homogenization) {
    const auto& h = *spec.difficulty_homogenization;
    if (h.hard_noise_scale < 0 || h.easy_idiosyncrasy_scale < 0 || h.width <= 0) {
      throw ValidationError("synth scales must be >= 0 (width > 0)");
    }
  }
  if (spec.entropy_coupling && spec.entropy_coupling->noise < 0) {
    throw ValidationError("synth scales must be >= 0");
  }
  const int reserved = shared + causal_k;
  for (int d : dims) {
    if (d < spec.latent_rank + reserved) {
      throw ValidationError("inconsistent dims: width " + std::to_string(d) +
                            " cannot hold the latent rank plus planted directions");
    }
  }

  const auto labels =
      make_labels(models, n, spec.skill_mean, spec.skill_spread, spec.label_noise, spec.seed);
  std::vector<std::string> problem_ids, domains;
  for (int i = 0; i < n; ++i) {
    problem_ids.push_back(problem_name(i));
    domains.push_back(spec.domains[static_cast<std::size_t>(i) % spec.domains.size()]);
  }

  std::mt19937_64 latent_rng(derive_seed(spec.seed, "latent"));
  const Eigen::MatrixXd latent = gaussian(n, spec.latent_rank, latent_rng);

  std::vector<bool> determined(static_cast<std::size_t>(n), false);
  if (spec.causal_subspace) {
    std::mt19937_64 rng(derive_seed(spec.seed, "determined"));
    std::uniform_real_distribution<double> unit;
    for (auto&& d : determined) d = unit(rng) < spec.causal_subspace->determinism;
  }

  // Per-problem, per-layer noise scale.
  auto noise_scale = [&](int i, int layer) {
    if (!spec.difficulty_homogenization) return spec.noise;
    const auto& h = *spec.difficulty_homogenization;
    const double depth = layers > 1 ? static_cast<double>(layer) / (layers - 1) : 0.0;
    const double bump = std::exp(-(depth - h.peak_depth) * (depth - h.peak_depth) / (2 * h.width * h.width));
    double frac = static_cast<double>(labels.counts[static_cast<std::size_t>(i)]) / models;
    if (h.reversed_domains.contains(domains[static_cast<std::size_t>(i)])) frac = 1.0 - frac;
    return spec.noise + (h.hard_noise_scale + (h.easy_idiosyncrasy_scale - h.hard_noise_scale) * frac) * bump;
  };

  SynthCohort out;
  auto& truth = out.truth;
  truth.generator = "difficulty";
  truth.seed = spec.seed;
  truth.problem_ids = problem_ids;
  truth.latent_difficulty = labels.difficulty;
  truth.correct_counts = labels.counts;

  std::mt19937_64 answer_rng(derive_seed(spec.seed, "answers"));
  std::vector<Eigen::MatrixXd> base_layers;  // model 0, for rotated copies
  for (int m = 0; m < models; ++m) {
    const std::string id = model_name(m);
    const int d = dims[static_cast<std::size_t>(m)];
    const auto& y = labels.correct[static_cast<std::size_t>(m)];
    std::mt19937_64 rng(derive_seed(derive_seed(spec.seed, "model"), static_cast<std::uint64_t>(m)));
    truth.model_ids.push_back(id);

    if (spec.rotated_copies && m > 0) {
      const Eigen::MatrixXd q = random_orthogonal(d, rng());
      for (int l = 0; l < layers; ++l) {
        out.sets.push_back(make_set(id, l, problem_ids, base_layers[static_cast<std::size_t>(l)] * q));
      }
    } else {
      const Eigen::MatrixXd a = embedding(d, spec.latent_rank, reserved, rng);
      const Eigen::MatrixXd signal = latent * a.transpose();
      for (int l = 0; l < layers; ++l) {
        std::mt19937_64 layer_rng(derive_seed(rng(), static_cast<std::uint64_t>(l)));
        const Eigen::MatrixXd noise = gaussian(n, d, layer_rng);
        Eigen::MatrixXd x = signal;
        for (int i = 0; i < n; ++i) {
          x.row(i) += noise_scale(i, l) * noise.row(i);
          const double sign = y[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
          if (shared) x(i, 0) += spec.shared_correctness_direction->strength * sign;
          if (spec.causal_subspace) {
            const auto& c = *spec.causal_subspace;
            std::normal_distribution<double> normal;
            for (int j = shared; j < shared + c.k; ++j) {
              const double centre = determined[static_cast<std::size_t>(i)]
                                        ? c.offset + c.margin * sign
                                        : c.offset + c.margin * normal(layer_rng);
              x(i, j) = centre + c.jitter * normal(layer_rng);
            }
          }
        }
        if (spec.rotated_copies) base_layers.push_back(x);
        out.sets.push_back(make_set(id, l, problem_ids, x));
      }
    }

    std::vector<std::optional<double>> entropy(static_cast<std::size_t>(n));
    if (spec.entropy_coupling) {
      const auto& e = *spec.entropy_coupling;
      std::mt19937_64 erng(derive_seed(derive_seed(spec.seed, "entropy"), static_cast<std::uint64_t>(m)));
      std::normal_distribution<double> normal;
      for (int i = 0; i < n; ++i) {
        const double frac = static_cast<double>(labels.counts[static_cast<std::size_t>(i)]) / models;
        // Entropies are non-negative by definition; the floor is never hit
        // at default settings.
        entropy[static_cast<std::size_t>(i)] = std::max(0.0, e.base - e.slope * frac + e.noise * normal(erng));
      }
    }
    const auto answers = make_answers(y, answer_rng);
    out.manifests.push_back(make_manifest(id, m, layers, problem_ids, y, answers, domains, entropy));

    if (spec.causal_subspace) {
      std::vector<std::vector<double>> cols;
      for (int j = shared; j < shared + causal_k; ++j) {
        std::vector<double> col(static_cast<std::size_t>(d), 0.0);
        col[static_cast<std::size_t>(j)] = 1.0;
        cols.push_back(std::move(col));
      }
      truth.causal_bases[id] = std::move(cols);
    }
  }

  if (spec.shared_correctness_direction) {
    std::vector<double> u(static_cast<std::size_t>(dims[0]), 0.0);
    u[0] = 1.0;
    truth.shared_correctness_direction = u;
  }
  for (int i = 0; i < n; ++i) {
    if (determined[static_cast<std::size_t>(i)]) truth.determined_problems.push_back(problem_ids[static_cast<std::size_t>(i)]);
  }
  if (spec.entropy_coupling) {
    const auto& e = *spec.entropy_coupling;
    std::vector<double> frac;
    for (int c : labels.counts) frac.push_back(static_cast<double>(c) / models);
    const double mu = mean(frac);
    double var = 0.0;
    for (double f : frac) var += (f - mu) * (f - mu);
    var /= static_cast<double>(frac.size());
    const double denom = std::sqrt(e.slope * e.slope * var + e.noise * e.noise);
    truth.entropy_planted_r = denom > 0 ? -e.slope * std::sqrt(var) / denom : 0.0;
  }
  if (spec.difficulty_homogenization) {
    truth.inversion_peak_depth = spec.difficulty_homogenization->peak_depth;
    truth.reversed_domains.assign(spec.difficulty_homogenization->reversed_domains.begin(),
                                  spec.difficulty_homogenization->reversed_domains.end());
  }
  return out;
}

SynthCohort plant_generation_gap(const GenerationGapSpec& spec) {
  const int models = spec.n_models;
  const int n = spec.n_problems;
  const int layers = spec.num_layers;
  const int d = spec.hidden_dim;
  if (models < 2) throw ValidationError("synth needs at least 2 models");
  if (n < 2) throw ValidationError("synth needs at least 2 problems");
  if (layers < 6) throw ValidationError("generation gap needs at least 6 layers per model");
  if (spec.decision_layer < 1 || spec.decision_layer >= layers) {
    throw ValidationError("decision layer must lie in 1.." + std::to_string(layers - 1));
  }
  if (d < spec.latent_rank + 1) throw ValidationError("inconsistent dims: width too small");
  if (spec.pre_noise < 0 || spec.post_noise < 0 || spec.post_signal < 0 ||
      spec.correctness_strength < 0) {
    throw ValidationError("synth scales must be >= 0");
  }
  check_skill(spec.skill_spread, spec.label_noise);

  const double late_noise = std::hypot(spec.pre_noise, spec.post_noise);
  const double strength =
      spec.correctness_strength > 0 ? spec.correctness_strength : 2.0 * late_noise;
  const auto labels =
      make_labels(models, n, spec.skill_mean, spec.skill_spread, spec.label_noise, spec.seed);
  std::vector<std::string> problem_ids;
  for (int i = 0; i < n; ++i) problem_ids.push_back(problem_name(i));
  const std::vector<std::string> domains(static_cast<std::size_t>(n), "general");
  const std::vector<std::optional<double>> no_entropy(static_cast<std::size_t>(n));

  std::mt19937_64 latent_rng(derive_seed(spec.seed, "latent"));
  const Eigen::MatrixXd latent = gaussian(n, spec.latent_rank, latent_rng);
  std::mt19937_64 answer_rng(derive_seed(spec.seed, "answers"));

  SynthCohort out;
  auto& truth = out.truth;
  truth.generator = "generation_gap";
  truth.seed = spec.seed;
  truth.problem_ids = problem_ids;
  truth.latent_difficulty = labels.difficulty;
  truth.correct_counts = labels.counts;
  truth.decision_layer = spec.decision_layer;

  std::vector<Eigen::MatrixXd> embeddings;
  for (int m = 0; m < models; ++m) {
    const std::string id = model_name(m);
    const auto& y = labels.correct[static_cast<std::size_t>(m)];
    std::mt19937_64 rng(derive_seed(derive_seed(spec.seed, "model"), static_cast<std::uint64_t>(m)));
    truth.model_ids.push_back(id);
    const Eigen::MatrixXd a = embedding(d, spec.latent_rank, 1, rng);
    embeddings.push_back(a);
    const Eigen::MatrixXd signal = latent * a.transpose();
    for (int l = 0; l < layers; ++l) {
      std::mt19937_64 layer_rng(derive_seed(rng(), static_cast<std::uint64_t>(l)));
      Eigen::MatrixXd x;
      if (l < spec.decision_layer) {
        x = signal + spec.pre_noise * gaussian(n, d, layer_rng);
      } else {
        x = spec.post_signal * signal + late_noise * gaussian(n, d, layer_rng);
        for (int i = 0; i < n; ++i) x(i, 0) += strength * (y[static_cast<std::size_t>(i)] ? 1.0 : -1.0);
      }
      out.sets.push_back(make_set(id, l, problem_ids, x));
    }
    out.manifests.push_back(make_manifest(id, m, layers, problem_ids, y, make_answers(y, answer_rng),
                                          domains, no_entropy));
  }

  // Expected CKA per pair from the planted covariances; the label term uses
  // the realized correctness flags.
  std::vector<Eigen::VectorXd> signs;
  for (const auto& y : labels.correct) {
    Eigen::VectorXd s(n);
    for (int i = 0; i < n; ++i) s(i) = y[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
    signs.push_back(s.array() - s.mean());
  }
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd e0 = Eigen::MatrixXd::Zero(d, d);
  e0(0, 0) = 1.0;
  const double alpha2 = spec.post_signal * spec.post_signal;
  const double c2 = strength * strength;
  std::vector<double> pre, post;
  for (int a = 0; a < models; ++a) {
    for (int b = a + 1; b < models; ++b) {
      const auto& ea = embeddings[static_cast<std::size_t>(a)];
      const auto& eb = embeddings[static_cast<std::size_t>(b)];
      const double va = signs[static_cast<std::size_t>(a)].squaredNorm() / (n - 1);
      const double vb = signs[static_cast<std::size_t>(b)].squaredNorm() / (n - 1);
      const double cab = signs[static_cast<std::size_t>(a)].dot(signs[static_cast<std::size_t>(b)]) / (n - 1);
      pre.push_back(expected_linear_cka(ea * ea.transpose() + spec.pre_noise * spec.pre_noise * id,
                                        eb * eb.transpose() + spec.pre_noise * spec.pre_noise * id,
                                        ea * eb.transpose(), n));
      post.push_back(expected_linear_cka(
          alpha2 * ea * ea.transpose() + late_noise * late_noise * id + c2 * va * e0,
          alpha2 * eb * eb.transpose() + late_noise * late_noise * id + c2 * vb * e0,
          alpha2 * ea * eb.transpose() + c2 * cab * e0, n));
    }
  }
  truth.expected_pre_cka = mean(pre);
  truth.expected_post_cka = mean(post);
  truth.expected_gap = *truth.expected_pre_cka - *truth.expected_post_cka;
  return out;
}

Cohort SynthCohort::cohort() const { return build_cohort(manifests, sets); }

std::string ground_truth_to_json(const GroundTruth& t) {
  auto opt = [](const auto& v) -> json { return v ? json(*v) : json(nullptr); };
  const json j = {{"generator", t.generator},
                  {"seed", t.seed},
                  {"model_ids", t.model_ids},
                  {"problem_ids", t.problem_ids},
                  {"latent_difficulty", t.latent_difficulty},
                  {"correct_counts", t.correct_counts},
                  {"shared_correctness_direction", opt(t.shared_correctness_direction)},
                  {"causal_bases", t.causal_bases},
                  {"determined_problems", t.determined_problems},
                  {"entropy_planted_r", opt(t.entropy_planted_r)},
                  {"inversion_peak_depth", opt(t.inversion_peak_depth)},
                  {"reversed_domains", t.reversed_domains},
                  {"decision_layer", opt(t.decision_layer)},
                  {"expected_pre_cka", opt(t.expected_pre_cka)},
                  {"expected_post_cka", opt(t.expected_post_cka)},
                  {"expected_gap", opt(t.expected_gap)}};
  return j.dump(2) + "\n";
}

GroundTruth ground_truth_from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    GroundTruth t;
    auto opt = [&](const char* key, auto& field) {
      using T = typename std::remove_reference_t<decltype(field)>::value_type;
      if (!j.at(key).is_null()) field = j.at(key).get<T>();
    };
    t.generator = j.at("generator").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.model_ids = j.at("model_ids").get<std::vector<std::string>>();
    t.problem_ids = j.at("problem_ids").get<std::vector<std::string>>();
    t.latent_difficulty = j.at("latent_difficulty").get<std::vector<double>>();
    t.correct_counts = j.at("correct_counts").get<std::vector<int>>();
    opt("shared_correctness_direction", t.shared_correctness_direction);
    t.causal_bases = j.at("causal_bases").get<std::map<std::string, std::vector<std::vector<double>>>>();
    t.determined_problems = j.at("determined_problems").get<std::vector<std::string>>();
    opt("entropy_planted_r", t.entropy_planted_r);
    opt("inversion_peak_depth", t.inversion_peak_depth);
    t.reversed_domains = j.at("reversed_domains").get<std::vector<std::string>>();
    opt("decision_layer", t.decision_layer);
    opt("expected_pre_cka", t.expected_pre_cka);
    opt("expected_post_cka", t.expected_post_cka);
    opt("expected_gap", t.expected_gap);
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ground truth: ") + e.what());
  }
}

void write_synth(const std::filesystem::path& dir, const SynthCohort& cohort) {
  std::filesystem::create_directories(dir);
  for (const auto& man : cohort.manifests) {
    std::vector<ActivationSet> mine;
    for (const auto& s : cohort.sets) {
      if (s.model_id() == man.model_id) mine.push_back(s);
    }
    write_run(dir / man.model_id, man, mine);
  }
  std::ofstream out(dir / kGroundTruthFile, std::ios::trunc);
  if (!out) throw Error("cannot write ground truth under " + dir.string());
  out << ground_truth_to_json(cohort.truth);
}

GroundTruth read_ground_truth(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / kGroundTruthFile : dir;
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return ground_truth_from_json(text);
}

}  // namespace simlab
