#include "simlab/report/cli.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "simlab/activation_store.hpp"
#include "simlab/error.hpp"
#include "simlab/report/analyses.hpp"
#include "simlab/report/config.hpp"
#include "simlab/report/csv.hpp"
#include "simlab/synth.hpp"

namespace simlab::cli {

namespace {

namespace fs = std::filesystem;
using report::AnalysisConfig;

// Command-line overrides applied on top of the optional config file.
struct Overrides {
  std::string config, cohort, out, metrics, strata, grid_points;
  std::optional<std::uint64_t> seed;
  std::optional<int> grid_size, n_min, resamples, iterations;
  std::optional<double> q;
  bool bridge = false;
  bool problem_bootstrap = false;
  std::string responses, heads;
};

void add_analysis_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Config file (key = value lines)");
  cmd->add_option("--cohort", o.cohort, "Cohort directory");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--metrics", o.metrics, "Comma-separated metrics");
  cmd->add_option("--strata", o.strata, "Comma-separated stratum families");
  cmd->add_option("--grid-points", o.grid_points, "'all' or comma-separated grid points");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--grid-size", o.grid_size, "Number of normalized depth points");
  cmd->add_option("--n-min", o.n_min, "Minimum problems per stratum");
  cmd->add_option("--resamples", o.resamples, "Bootstrap resamples");
  cmd->add_option("--iterations", o.iterations, "Permutation iterations");
  cmd->add_option("--q", o.q, "Benjamini-Hochberg false discovery rate");
}

AnalysisConfig build_config(const Overrides& o) {
  AnalysisConfig c = o.config.empty() ? AnalysisConfig{} : report::load_config(o.config);
  std::string text = report::config_to_text(c);
  auto set = [&](const std::string& key, const std::string& value) { text += key + " = " + value + "\n"; };
  // Re-parse through the file form so flags get the same validation as the file.
  std::istringstream lines(text);
  std::string merged, line;
  std::vector<std::pair<std::string, std::string>> changes;
  if (!o.cohort.empty()) changes.emplace_back("cohort", o.cohort);
  if (!o.out.empty()) changes.emplace_back("output", o.out);
  if (!o.metrics.empty()) changes.emplace_back("metrics", o.metrics);
  if (!o.strata.empty()) changes.emplace_back("strata", o.strata);
  if (!o.grid_points.empty()) changes.emplace_back("grid_points", o.grid_points);
  if (o.seed) changes.emplace_back("seed", std::to_string(*o.seed));
  if (o.grid_size) changes.emplace_back("grid_size", std::to_string(*o.grid_size));
  if (o.n_min) changes.emplace_back("n_min", std::to_string(*o.n_min));
  if (o.resamples) changes.emplace_back("resamples", std::to_string(*o.resamples));
  if (o.iterations) changes.emplace_back("iterations", std::to_string(*o.iterations));
  if (o.q) {
    std::ostringstream s;
    s.precision(17);
    s << *o.q;
    changes.emplace_back("q", s.str());
  }
  if (o.bridge) changes.emplace_back("bridge", "true");
  if (o.problem_bootstrap) changes.emplace_back("problem_bootstrap", "true");
  if (!o.responses.empty()) changes.emplace_back("intervention_responses", o.responses);
  if (!o.heads.empty()) changes.emplace_back("head_records", o.heads);
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    bool replaced = false;
    if (eq != std::string::npos && !line.starts_with('#')) {
      std::string key = line.substr(0, eq);
      key.erase(key.find_last_not_of(' ') + 1);
      for (const auto& [k, v] : changes) replaced = replaced || k == key;
    }
    if (!replaced) merged += line + "\n";
  }
  text = merged;
  for (const auto& [k, v] : changes) set(k, v);
  auto config = report::config_from_text(text);
  if (config.cohort.empty()) throw PreconditionError("no cohort given (use --cohort or a config file)");
  if (!fs::is_directory(config.cohort)) {
    throw PreconditionError("cohort directory " + config.cohort.string() + " does not exist");
  }
  for (const auto& p : {config.intervention_responses, config.head_records}) {
    if (!p.empty() && !fs::exists(p)) throw PreconditionError(p.string() + " does not exist");
  }
  return config;
}

std::string ci_text(const ResampleSummary& s) {
  return "[" + report::fmt(s.low) + ", " + report::fmt(s.high) + "]";
}

int run_synth(const std::string& preset, const fs::path& out, int models, int problems, int dim, int layers,
              std::uint64_t seed) {
  SynthCohort c;
  if (preset == "gap") {
    GenerationGapSpec g;
    g.seed = seed;
    if (models > 0) g.n_models = models;
    if (problems > 0) g.n_problems = problems;
    if (dim > 0) g.hidden_dim = dim;
    if (layers > 0) {
      g.num_layers = layers;
      g.decision_layer = layers / 2;
    }
    c = plant_generation_gap(g);
  } else {
    SynthSpec s;
    s.seed = seed;
    if (preset == "difficulty") {
      s.difficulty_homogenization = Homogenization{};
      s.n_models = 6;
      s.n_problems = 300;
      s.num_layers = 11;
    } else if (preset == "reversal") {
      Homogenization h;
      h.reversed_domains = {"arithmetic"};
      s.difficulty_homogenization = h;
      s.domains = {"arithmetic"};
      s.n_models = 6;
      s.n_problems = 300;
      s.num_layers = 11;
    } else if (preset == "null") {
      s.n_models = 6;
      s.n_problems = 300;
      s.num_layers = 11;
    } else if (preset == "shared") {
      s.shared_correctness_direction = SharedDirection{};
    } else if (preset == "causal") {
      s.causal_subspace = CausalSubspace{};
    } else if (preset == "rotated") {
      s.rotated_copies = true;
      s.n_models = 2;
    } else if (preset == "entropy") {
      s.entropy_coupling = EntropyCoupling{};
    } else {
      throw PreconditionError("unknown synth preset '" + preset + "'");
    }
    if (models > 0) s.n_models = models;
    if (problems > 0) s.n_problems = problems;
    if (dim > 0) s.hidden_dims = {dim};
    if (layers > 0) s.num_layers = layers;
    c = generate(s);
  }
  write_synth(out, c);
  std::cout << "wrote " << c.manifests.size() << " runs to " << out.string() << "\n";
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Stratified cross-model representational similarity analysis"};
  app.require_subcommand(1);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check activation files, run or cohort directories");
  validate->add_option("path", validate_path, "File or directory")->required();

  std::string preset = "difficulty", synth_out;
  int models = 0, problems = 0, dim = 0, layers = 0;
  std::uint64_t synth_seed = 42;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with planted effects");
  synth->add_option("preset", preset, "difficulty, reversal, null, gap, shared, causal, rotated or entropy");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--models", models, "Number of models");
  synth->add_option("--problems", problems, "Number of problems");
  synth->add_option("--dim", dim, "Hidden dimension");
  synth->add_option("--layers", layers, "Number of layers");
  synth->add_option("--seed", synth_seed, "Seed");

  Overrides o;
  auto* similarity = app.add_subcommand("similarity", "Pairwise similarity per grid point and stratum");
  auto* inversion = app.add_subcommand("inversion", "Hard versus easy similarity gap");
  auto* stage = app.add_subcommand("stage-gap", "Similarity before and after the decision layer");
  auto* transfer = app.add_subcommand("transfer", "Train correctness probes and test cross-model transfer");
  auto* ablate = app.add_subcommand("ablate", "Ablate each probe's correctness subspace (needs transfer)");
  auto* entropy = app.add_subcommand("entropy", "Correlate attention entropy with difficulty");
  auto* report_cmd = app.add_subcommand("report", "Collect the summary tables into report.md");
  for (auto* cmd : {similarity, inversion, stage, transfer, ablate, entropy, report_cmd}) add_analysis_flags(cmd, o);
  similarity->add_flag("--problem-bootstrap", o.problem_bootstrap, "Per-pair CIs over resampled problems");
  transfer->add_flag("--bridge", o.bridge, "Fit a ridge map between different hidden sizes");
  ablate->add_option("--responses", o.responses, "Directory of intervention response files");
  ablate->add_option("--heads", o.heads, "Head-ablation records JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (validate->parsed()) {
      const auto problems_found = simlab::validate_path(validate_path);
      for (const auto& p : problems_found) std::cerr << p << "\n";
      if (!problems_found.empty()) return 1;
      std::cout << "ok\n";
      return 0;
    }
    if (synth->parsed()) return run_synth(preset, synth_out, models, problems, dim, layers, synth_seed);
    if (report_cmd->parsed()) {
      AnalysisConfig c = o.config.empty() ? AnalysisConfig{} : report::load_config(o.config);
      if (!o.out.empty()) c.output = o.out;
      report::write_report(c);
      std::cout << "wrote " << (c.output / "report.md").string() << "\n";
      return 0;
    }
    const auto config = build_config(o);
    if (similarity->parsed()) {
      const auto r = report::run_similarity(config);
      for (const auto& n : r.notices) std::cerr << "notice: " << n << "\n";
      std::cout << r.rows.size() << " similarity rows, " << r.summary.size() << " summary cells\n";
    } else if (inversion->parsed()) {
      const auto r = report::run_inversion(config);
      for (const auto& n : r.notices) std::cerr << "notice: " << n << "\n";
      std::cout << "peak grid point " << r.peak_grid_point << ": gap " << report::fmt(r.gap) << " "
                << ci_text(r.gap_ci) << ", p = " << report::fmt(r.p_value) << "\n";
    } else if (stage->parsed()) {
      const auto r = report::run_stage_gap(config);
      std::cout << "pre " << report::fmt(r.pre_mean) << ", post " << report::fmt(r.post_mean) << ", gap "
                << report::fmt(r.gap) << " " << ci_text(r.gap_ci) << " over " << r.n_pairs << " pairs\n";
    } else if (transfer->parsed()) {
      const auto r = report::run_transfer(config);
      std::cout << "transfer accuracy " << report::fmt(r.mean_accuracy) << " " << ci_text(r.accuracy_ci)
                << ", majority " << report::fmt(r.mean_majority) << ", permutation "
                << report::fmt(r.mean_permutation) << "\n";
    } else if (ablate->parsed()) {
      const auto r = report::run_ablation(config);
      for (const auto& s : r.summary) {
        std::cout << to_string(s.protocol) << ": flip rate " << report::fmt(s.mean_flip) << " "
                  << ci_text(s.flip_ci) << ", control " << report::fmt(s.mean_control_flip) << "\n";
      }
    } else if (entropy->parsed()) {
      const auto r = report::run_entropy(config);
      std::cout << "mean r " << report::fmt(r.mean_r) << " " << ci_text(r.r_ci) << " over " << r.n_models
                << " models\n";
    }
    return 0;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace simlab::cli
