#include <doctest.h>

#include <fstream>
#include <map>
#include <regex>

#include "oracles.hpp"
#include "simlab/error.hpp"
#include "simlab/report/analyses.hpp"
#include "simlab/report/config.hpp"
#include "simlab/report/csv.hpp"
#include "simlab/report/svg.hpp"
#include "simlab/synth.hpp"

using namespace simlab;
using namespace simlab::report;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

AnalysisConfig quick_config(const std::filesystem::path& cohort, const std::filesystem::path& out) {
  AnalysisConfig c;
  c.cohort = cohort;
  c.output = out;
  c.grid_size = 5;
  c.resamples = 200;
  c.iterations = 200;
  c.baseline_iterations = 100;
  return c;
}

SynthSpec pipeline_spec() {
  SynthSpec s;
  s.n_models = 4;
  s.n_problems = 120;
  s.num_layers = 6;
  s.hidden_dims = {16};
  s.difficulty_homogenization = Homogenization{};
  s.entropy_coupling = EntropyCoupling{};
  s.causal_subspace = CausalSubspace{};
  s.domains = {"algebra", "geometry"};
  return s;
}

void run_everything(const AnalysisConfig& c) {
  run_similarity(c);
  run_inversion(c);
  run_stage_gap(c);
  run_transfer(c);
  run_ablation(c);
  run_entropy(c);
  write_report(c);
}

}  // namespace

TEST_CASE("config survives its file form") {
  AnalysisConfig c;
  c.cohort = "/data/cohort";
  c.output = "out dir";
  c.metrics = {Metric::rbf_cka, Metric::svcca};
  c.grid_points = "0,3,7";
  c.strata = {"all", "agreement", "domain"};
  c.q = 0.1;
  c.seed = 7;
  c.problem_bootstrap = true;
  c.probe_seeds = {1, 2};
  c.probe_grid_point = "4";
  c.bridge = true;
  c.protocols = {"relaxed_10_of_14"};
  c.subspace_k = 2;
  c.head_records = "heads.json";
  CHECK(config_from_text(config_to_text(c)) == c);
  CHECK(config_from_text(config_to_text(AnalysisConfig{})) == AnalysisConfig{});

  fixture::TempDir dir("config");
  save_config(c, dir / "a.cfg");
  CHECK(load_config(dir / "a.cfg") == c);
  CHECK(config_from_text("# comment\n\nseed = 9\n").seed == 9);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_text("colour = red\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("seed = 1\nseed = 2\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("seed\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("n_min = many\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("bridge = maybe\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("q = 0\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("strata = all,colour\n"), ValidationError);
  CHECK_THROWS_AS(config_from_text("metrics = cosine\n"), Error);
  CHECK_THROWS_AS(config_from_text("grid_points = 30\n"), ValidationError);
  CHECK_THROWS_AS(load_config("/nonexistent/simlab.cfg"), Error);

  AnalysisConfig c;
  c.grid_points = "5,0,3,3";
  CHECK(selected_grid_points(c) == std::vector<int>{0, 3, 5});
  c.grid_points = "all";
  CHECK(selected_grid_points(c).size() == 21);
}

TEST_CASE("CSV tables") {
  CHECK(fmt(0.5) == "0.500000");
  CHECK(fmt(-1.0 / 3.0) == "-0.333333");
  CsvTable t({"key", "text"});
  t.add({"b", "plain"});
  t.add({"a", "has, comma and \"quotes\"\nand a newline"});
  t.sort_by(1);
  CHECK(t.rows()[0][0] == "a");
  const auto back = parse_csv(t.text());
  CHECK(back.header() == t.header());
  CHECK(back.rows() == t.rows());
  CHECK_THROWS_AS(t.add({"only one"}), Error);
  CHECK_THROWS_AS(CsvTable({}), PreconditionError);
}

TEST_CASE("SVG output") {
  const auto one = emit_svg({{"s", {1.0}, {0.5}}});
  CHECK(one.starts_with("<?xml") == (one.find("<svg") > 0));
  CHECK(one.find("<svg") != std::string::npos);
  CHECK(one.find("</svg>") != std::string::npos);
  CHECK(count(one, "<circle") == 1);
  CHECK(emit_svg({{"s", {1.0}, {0.5}}}) == one);

  Series bins{"difficulty", {}, {}};
  for (int c = 0; c <= 14; ++c) {
    bins.x.push_back(c);
    bins.y.push_back(0.8 - 0.01 * c);
  }
  const auto chart = emit_svg({bins}, {"title", "models correct", "cka"});
  CHECK(count(chart, "class=\"xtick\"") == 15);
  for (int c = 0; c <= 14; ++c) CHECK(chart.find(">" + std::to_string(c) + "</text>") != std::string::npos);
  CHECK(count(chart, "<circle") == 15);
  CHECK(chart == emit_svg({bins}, {"title", "models correct", "cka"}));
  CHECK_THROWS_AS(emit_svg({}), PreconditionError);
  CHECK_THROWS_AS(emit_svg({{"bad", {1.0, 2.0}, {1.0}}}), PreconditionError);
}

TEST_CASE("a 14-model cohort yields 91 pair rows per cell") {
  fixture::TempDir dir("pairs");
  SynthSpec s;
  s.n_models = 14;
  s.n_problems = 60;
  s.num_layers = 3;
  s.hidden_dims = {8};
  s.latent_rank = 4;
  const auto synth = generate(s);
  auto c = quick_config(dir / "cohort", dir / "out");
  c.grid_size = 3;
  c.strata = {"all", "difficulty"};
  c.n_min = 2;
  const auto result = run_similarity(c, synth.cohort());
  std::map<std::tuple<int, std::string, std::string>, int> cells;
  for (const auto& r : result.rows) ++cells[{r.grid_point, r.family, r.stratum}];
  CHECK(cells.size() == 3 * 4);
  for (const auto& [key, n] : cells) CHECK(n == 91);
  for (const auto& row : result.summary) CHECK(row.n_pairs + row.n_excluded == 91);
  const auto table = read_csv(dir / "out" / "similarity.csv");
  CHECK(table.rows().size() == 91 * 12);
}

TEST_CASE("rotated copies give unit similarity in every cell") {
  fixture::TempDir dir("rotated");
  SynthSpec s;
  s.rotated_copies = true;
  s.n_models = 2;
  auto c = quick_config(dir / "cohort", dir / "out");
  c.strata = {"all", "difficulty", "correctness"};
  c.n_min = 5;
  const auto result = run_similarity(c, generate(s).cohort());
  std::size_t ok = 0;
  for (const auto& r : result.rows) {
    if (r.status != "ok") continue;
    ++ok;
    CHECK(std::abs(*r.value - 1.0) < 1e-6);
  }
  CHECK(ok > 0);
}

TEST_CASE("small strata are flagged, not dropped") {
  fixture::TempDir dir("small");
  auto c = quick_config(dir / "cohort", dir / "out");
  c.n_min = 500;
  const auto result = run_similarity(c, generate(SynthSpec{}).cohort());
  REQUIRE_FALSE(result.rows.empty());
  for (const auto& r : result.rows) {
    CHECK(r.status == "insufficient");
    CHECK_FALSE(r.value.has_value());
  }
  const auto table = read_csv(dir / "out" / "similarity.csv");
  CHECK(table.rows().size() == result.rows.size());
}

TEST_CASE("missing domain tags skip the domain breakdown with a notice") {
  fixture::TempDir dir("domains");
  auto synth = generate(SynthSpec{});
  synth.manifests[0].records[0].domain.clear();
  auto c = quick_config(dir / "cohort", dir / "out");
  c.strata = {"all", "domain"};
  const auto result = run_similarity(c, synth.cohort());
  CHECK(std::ranges::find(result.notices, "domain tags missing; domain breakdown skipped") != result.notices.end());
  for (const auto& r : result.rows) CHECK(r.family != "domain");

  const auto inv = run_inversion(c, synth.cohort());
  CHECK(inv.domains.empty());
  CHECK_FALSE(inv.notices.empty());
}

TEST_CASE("optional problem bootstrap attaches per-pair intervals") {
  fixture::TempDir dir("boot");
  auto c = quick_config(dir / "cohort", dir / "out");
  c.problem_bootstrap = true;
  c.strata = {"all"};
  c.grid_points = "2";
  c.resamples = 100;
  const auto result = run_similarity(c, generate(SynthSpec{}).cohort());
  for (const auto& r : result.rows) {
    REQUIRE(r.ci.has_value());
    CHECK(r.ci->low <= *r.value + 1e-12);
    CHECK(*r.value <= r.ci->high + 1e-12);
  }
}

TEST_CASE("inversion needs populated difficulty bins") {
  fixture::TempDir dir("inv");
  auto c = quick_config(dir / "cohort", dir / "out");
  c.n_min = 1000;
  CHECK_THROWS_AS(run_inversion(c, generate(SynthSpec{}).cohort()), PreconditionError);
}

TEST_CASE("steps that need earlier outputs name the producing step") {
  fixture::TempDir dir("deps");
  write_synth(dir / "cohort", generate(SynthSpec{}));
  const auto c = quick_config(dir / "cohort", dir / "out");
  CHECK_THROWS_WITH_AS(run_ablation(c), doctest::Contains("transfer"), DependencyError);
  CHECK_THROWS_WITH_AS(run_entropy(c), doctest::Contains("entropy"), DependencyError);
  CHECK_THROWS_AS(write_report(c), DependencyError);
  std::filesystem::create_directories(dir / "out");
  CHECK_THROWS_AS(write_report(c), DependencyError);
  CHECK_THROWS_AS(read_probe_index(dir / "out"), DependencyError);
}

TEST_CASE("full pipeline is byte-identical across runs") {
  fixture::TempDir dir("pipeline");
  write_synth(dir / "cohort", generate(pipeline_spec()));
  auto a = quick_config(dir / "cohort", dir / "a");
  a.strata = {"all", "difficulty", "agreement", "correctness", "domain"};
  a.metrics = {Metric::linear_cka, Metric::mnn};
  auto b = a;
  b.output = dir / "b";
  run_everything(a);
  run_everything(b);
  const auto ta = tree(dir / "a"), tb = tree(dir / "b");
  CHECK(ta.size() >= 20);
  REQUIRE(ta.size() == tb.size());
  for (const auto& [name, bytes] : ta) {
    CAPTURE(name);
    REQUIRE(tb.contains(name));
    CHECK(bytes == tb.at(name));
  }
  for (const char* f : {"similarity.csv", "inversion_summary.csv", "stage_gap_summary.csv", "transfer.csv",
                        "ablation.csv", "entropy.csv", "report.md", "probes/index.json"}) {
    CHECK(ta.contains(f));
  }
  const auto md = ta.at("report.md");
  CHECK(md.find("## Transfer") != std::string::npos);
  CHECK(md.find("inversion.svg") != std::string::npos);
}

TEST_CASE("transfer writes an index that ablation reads back") {
  fixture::TempDir dir("transfer");
  SynthSpec s;
  s.shared_correctness_direction = SharedDirection{};
  s.n_models = 3;
  const auto cohort = generate(s).cohort();
  const auto c = quick_config(dir / "cohort", dir / "out");
  const auto t = run_transfer(c, cohort);
  CHECK(t.rows.size() == 6);
  CHECK(t.ordered_total == 6);
  CHECK(t.unordered_total == 3);
  CHECK(t.mean_accuracy >= 0.9);
  const auto index = read_probe_index(dir / "out");
  REQUIRE(index.size() == 3);
  CHECK(index[0].file == "m00.probe.json");
  const auto a = run_ablation(c, cohort);
  CHECK(a.rows.size() == 3 * 2);
  for (const auto& r : a.rows) CHECK(r.predictor == "probe");
}

TEST_CASE("transfer across different widths needs the bridge") {
  fixture::TempDir dir("widths");
  SynthSpec s;
  s.n_models = 2;
  s.hidden_dims = {16, 24};
  auto c = quick_config(dir / "cohort", dir / "out");
  const auto plain = run_transfer(c, generate(s).cohort());
  for (const auto& r : plain.rows) CHECK(r.status == "incompatible_dims");
  c.bridge = true;
  const auto bridged = run_transfer(c, generate(s).cohort());
  for (const auto& r : bridged.rows) {
    CHECK(r.status == "ok");
    CHECK(r.bridged);
  }
}

TEST_CASE("external intervention responses replace the probe stand-in") {
  fixture::TempDir dir("responses");
  SynthSpec s;
  s.causal_subspace = CausalSubspace{};
  s.n_models = 2;
  const auto cohort = generate(s).cohort();
  auto c = quick_config(dir / "cohort", dir / "out");
  c.protocols = {"relaxed_10_of_14"};
  run_transfer(c, cohort);
  run_ablation(c, cohort);
  const auto request_path = dir / "out" / "interventions" / "m00__relaxed_10_of_14.request.json";
  REQUIRE(std::filesystem::exists(request_path));
  const auto request = request_from_json(slurp(request_path));

  // Answer every request with a flip on the first problem only.
  std::filesystem::create_directories(dir / "responses");
  InterventionResponse response{request.model_id, request.layer_index, {}};
  for (std::size_t i = 0; i < request.problem_ids.size(); ++i) {
    response.results.push_back({request.problem_ids[i], "1", i == 0 ? "2" : "1"});
  }
  std::ofstream(dir / "responses" / "m00__relaxed_10_of_14.response.json") << response_to_json(response);

  c.intervention_responses = dir / "responses";
  const auto a = run_ablation(c, cohort);
  const auto& row = *std::ranges::find_if(a.rows, [](const AblationRow& r) { return r.model_id == "m00"; });
  CHECK(row.predictor == "external");
  CHECK(row.changed == 1);
  CHECK(row.flip_rate == doctest::Approx(1.0 / static_cast<double>(request.problem_ids.size())));

  // A response for the wrong problems is rejected.
  response.results.pop_back();
  std::ofstream(dir / "responses" / "m00__relaxed_10_of_14.response.json") << response_to_json(response);
  CHECK_THROWS_AS(run_ablation(c, cohort), ValidationError);
}

TEST_CASE("head ablation records flow into the ablation tables") {
  fixture::TempDir dir("heads");
  SynthSpec s;
  s.n_models = 2;
  const auto cohort = generate(s).cohort();
  auto c = quick_config(dir / "cohort", dir / "out");
  run_transfer(c, cohort);
  std::vector<HeadAblationRecord> records;
  for (int h = 0; h < 3; ++h) {
    HeadAblationRecord r{"qwen", "MHA", 8, h, 30, {}};
    for (int i = 0; i < 30; ++i) r.results.push_back({"p" + std::to_string(i), "1", i < 19 && h == 1 ? "0" : "1"});
    records.push_back(r);
  }
  std::ofstream(dir / "heads.json") << head_records_to_json(records);
  c.head_records = dir / "heads.json";
  const auto a = run_ablation(c, cohort);
  REQUIRE(a.heads.has_value());
  CHECK(a.heads->per_model.at("qwen").max.flips == 19);
  const auto types = slurp(dir / "out" / "head_ablation_types.csv");
  CHECK(types.find("MHA") != std::string::npos);
  CHECK(types.find("0.633333") != std::string::npos);
}

TEST_CASE("entropy analysis recovers the planted sign") {
  fixture::TempDir dir("entropy");
  SynthSpec s;
  s.n_problems = 400;
  s.entropy_coupling = EntropyCoupling{};
  const auto synth = generate(s);
  const auto c = quick_config(dir / "cohort", dir / "out");
  const auto e = run_entropy(c, synth.cohort());
  CHECK(e.n_models == 4);
  CHECK(e.mean_r < 0.0);
  CHECK(std::abs(e.mean_r - *synth.truth.entropy_planted_r) <= 0.1);
  for (const auto& r : e.rows) CHECK(r.rejected);
  const auto svg = slurp(dir / "out" / "entropy.svg");
  CHECK(count(svg, "class=\"xtick\"") == 5);  // counts 0..4
}
