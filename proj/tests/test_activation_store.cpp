#include <doctest.h>

#include <fstream>
#include <random>

#include "oracles.hpp"
#include "simlab/activation_store.hpp"
#include "simlab/error.hpp"

using namespace simlab;

namespace {

std::vector<std::string> ids(int n, const std::string& prefix = "p") {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

RowMatrixF random_matrix(int n, int d, std::uint64_t seed) {
  return fixture::gaussian(n, d, seed).cast<float>();
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RunManifest manifest_for(const std::string& model, const std::vector<std::string>& problems, int layers = 2) {
  RunManifest m;
  m.model_id = model;
  m.family = "fam";
  m.num_layers = layers;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    m.records.push_back({problems[i], "a" + std::to_string(i % 3), i % 2 == 0, "general", std::nullopt});
  }
  return m;
}

}  // namespace

TEST_CASE("zero 2x3 matrix has the exact file size") {
  fixture::TempDir dir("store");
  const ActivationSet set("m", 0, {"a", "b"}, RowMatrixF::Zero(2, 3));
  write_activation_file(set, dir / "x.rsa");
  // magic + version + n + d + layer + id length + "m" + 6 floats + "a\nb\n"
  const std::size_t header = 4 + 4 + 8 + 8 + 4 + 4 + 1;
  CHECK(std::filesystem::file_size(dir / "x.rsa") == header + 24 + 4);
  const auto bytes = read_bytes(dir / "x.rsa");
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RSA1");
  CHECK(bytes[4] == 1);  // little-endian version
  CHECK(bytes[8] == 2);  // n
  CHECK(bytes[16] == 3);  // d
}

TEST_CASE("write then read is the identity over random shapes") {
  fixture::TempDir dir("store");
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 17), d = 1 + static_cast<int>(rng() % 9);
    const auto layer = static_cast<std::uint32_t>(rng() % 50);
    const ActivationSet set("model-" + std::to_string(trial), layer, ids(n), random_matrix(n, d, rng()));
    const auto path = dir / ("t" + std::to_string(trial) + ".rsa");
    write_activation_file(set, path);
    const auto back = read_activation_file(path);
    CHECK(back == set);
    CHECK(back.matrix().cwiseEqual(set.matrix()).all());
    CHECK(encode_activation_set(back) == encode_activation_set(set));
  }
}

TEST_CASE("identical sets encode to identical bytes") {
  const ActivationSet a("m", 3, ids(5), random_matrix(5, 4, 1));
  const ActivationSet b("m", 3, ids(5), random_matrix(5, 4, 1));
  CHECK(encode_activation_set(a) == encode_activation_set(b));
}

TEST_CASE("non-finite entries are rejected with their position") {
  RowMatrixF m = RowMatrixF::Zero(3, 2);
  m(1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(ActivationSet("m", 0, ids(3), m), doctest::Contains("non-finite entry at (1,1)"),
                       ValidationError);
  m(1, 1) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(ActivationSet("m", 0, ids(3), m), ValidationError);
}

TEST_CASE("constructor rejects malformed sets") {
  CHECK_THROWS_AS(ActivationSet("m", 0, {"a", "a"}, RowMatrixF::Zero(2, 1)), ValidationError);
  CHECK_THROWS_AS(ActivationSet("m", 0, {"a"}, RowMatrixF::Zero(2, 1)), ValidationError);
  CHECK_THROWS_AS(ActivationSet("", 0, {"a"}, RowMatrixF::Zero(1, 1)), ValidationError);
  CHECK_THROWS_AS(ActivationSet("m", 0, {}, RowMatrixF::Zero(0, 1)), ValidationError);
  CHECK_THROWS_AS(ActivationSet("m", 0, {"a\nb"}, RowMatrixF::Zero(1, 1)), ValidationError);
}

TEST_CASE("reader rejects bad magic, version and truncation") {
  fixture::TempDir dir("store");
  const ActivationSet set("m", 0, ids(10), random_matrix(10, 3, 2));
  const auto good = encode_activation_set(set);

  auto bad = good;
  std::copy_n("XXXX", 4, bad.begin());
  CHECK_THROWS_WITH_AS(decode_activation_set(bad), doctest::Contains("magic"), FormatError);

  bad = good;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(decode_activation_set(bad), doctest::Contains("version"), FormatError);

  // Declared n = 10 but only 9 rows of payload.
  const std::size_t header = 4 + 4 + 8 + 8 + 4 + 4 + 1;
  bad.assign(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(header + 9 * 3 * 4));
  CHECK_THROWS_WITH_AS(decode_activation_set(bad), doctest::Contains("truncated"), FormatError);

  bad.assign(good.begin(), good.begin() + 10);
  CHECK_THROWS_AS(decode_activation_set(bad), FormatError);

  bad = good;
  for (int i = 16; i < 24; ++i) bad[static_cast<std::size_t>(i)] = 0xFF;  // d = 2^64 - 1
  CHECK_THROWS_AS(decode_activation_set(bad), FormatError);

  CHECK_THROWS_AS(read_activation_file(dir / "missing.rsa"), Error);
}

TEST_CASE("every corrupted header byte is detected by validate") {
  fixture::TempDir dir("fuzz");
  // A long model id keeps the first 64 bytes inside the header.
  const std::string model(40, 'q');
  const auto problems = ids(6);
  const auto run = dir / "run";
  const ActivationSet set(model, 1, problems, random_matrix(6, 3, 3));
  write_run(run, manifest_for(model, problems), std::vector<ActivationSet>{set});
  REQUIRE(validate_path(run).empty());
  const auto file = run / layer_file_name(1);
  const auto good = read_bytes(file);
  REQUIRE(good.size() > 64);
  for (std::size_t pos = 0; pos < 64; ++pos) {
    for (std::uint8_t mask : {0x01, 0x20, 0x80, 0xFF}) {
      auto bad = good;
      bad[pos] ^= mask;
      write_bytes(file, bad);
      CAPTURE(pos);
      CAPTURE(static_cast<int>(mask));
      CHECK_FALSE(validate_path(run).empty());
    }
  }
  write_bytes(file, good);
  CHECK(validate_path(run).empty());
}

TEST_CASE("manifest JSON round-trips and validates") {
  auto m = manifest_for("m1", ids(4));
  m.records[2].mean_attention_entropy = 1.25;
  CHECK(manifest_from_json(manifest_to_json(m)) == m);
  const auto j = manifest_to_json(m);
  for (const char* key : {"model_id", "family", "num_layers", "problem_id", "answer", "correct", "domain",
                          "mean_attention_entropy"}) {
    CHECK(j.find(key) != std::string::npos);
  }
  auto bad = m;
  bad.records[1].problem_id = bad.records[0].problem_id;
  CHECK_THROWS_AS(validate_manifest(bad), ValidationError);
  bad = m;
  bad.records[0].mean_attention_entropy = -1.0;
  CHECK_THROWS_AS(validate_manifest(bad), ValidationError);
  bad = m;
  bad.num_layers = 0;
  CHECK_THROWS_AS(validate_manifest(bad), ValidationError);
  CHECK_THROWS_AS(manifest_from_json("{\"model_id\": 3}"), FormatError);
}

TEST_CASE("cohort keeps only shared problems") {
  const auto a = manifest_for("a", {"a", "b", "c"}, 1);
  const auto b = manifest_for("b", {"b", "c", "d"}, 1);
  const ActivationSet sa("a", 0, {"a", "b", "c"}, random_matrix(3, 2, 1));
  const ActivationSet sb("b", 0, {"b", "c", "d"}, random_matrix(3, 2, 2));
  const auto cohort = build_cohort({a, b}, {sa, sb});
  CHECK(cohort.problem_ids() == std::vector<std::string>{"b", "c"});
  CHECK(cohort.activations("a", 0).rows() == 2);
}

TEST_CASE("identical problem lists give the full shared set") {
  const auto problems = ids(800);
  const auto cohort = build_cohort({manifest_for("a", problems, 1), manifest_for("b", problems, 1)}, {});
  CHECK(cohort.problem_ids().size() == 800);
}

TEST_CASE("cohort errors") {
  const auto a = manifest_for("a", {"a"}, 1);
  const auto b = manifest_for("b", {"b"}, 1);
  CHECK_THROWS_WITH_AS(build_cohort({a, b}, {}), doctest::Contains("empty intersection"), ValidationError);
  CHECK_THROWS_AS(build_cohort({a}, {}), PreconditionError);
  const auto c = manifest_for("c", {"a"}, 1);
  const ActivationSet s("a", 0, {"a"}, random_matrix(1, 2, 1));
  CHECK_THROWS_WITH_AS(build_cohort({a, c}, {s, s}), doctest::Contains("duplicate"), ValidationError);
  const ActivationSet high("a", 5, {"a"}, random_matrix(1, 2, 1));
  CHECK_THROWS_AS(build_cohort({a, c}, {high}), ValidationError);
}

TEST_CASE("cohort reordering preserves the problem to row association") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto problems = ids(12, "q");
    std::vector<RunManifest> manifests;
    std::vector<ActivationSet> sets;
    std::map<std::pair<std::string, std::string>, std::vector<float>> rows;
    for (int m = 0; m < 3; ++m) {
      std::shuffle(problems.begin(), problems.end(), rng);
      const std::string id = "m" + std::to_string(m);
      // Each model drops a different problem, so the shared set is a strict subset.
      std::vector<std::string> mine(problems.begin(), problems.end() - 1);
      manifests.push_back(manifest_for(id, mine, 1));
      const auto mat = random_matrix(static_cast<int>(mine.size()), 3, rng());
      for (std::size_t i = 0; i < mine.size(); ++i) {
        rows[{id, mine[i]}] = {mat(static_cast<Eigen::Index>(i), 0), mat(static_cast<Eigen::Index>(i), 1),
                               mat(static_cast<Eigen::Index>(i), 2)};
      }
      sets.emplace_back(id, 0, mine, mat);
    }
    const auto cohort = build_cohort(manifests, sets);
    CHECK(std::ranges::is_sorted(cohort.problem_ids()));
    for (const auto& id : cohort.model_ids()) {
      const auto& set = cohort.activations(id, 0);
      for (std::size_t i = 0; i < set.rows(); ++i) {
        const auto r = set.row(i);
        CHECK(std::vector<float>(r.begin(), r.end()) == rows.at({id, cohort.problem_ids()[i]}));
      }
    }
  }
}

TEST_CASE("run directories load back as a cohort and validate") {
  fixture::TempDir dir("runs");
  const auto problems = ids(5);
  for (int m = 0; m < 2; ++m) {
    const std::string id = "m" + std::to_string(m);
    std::vector<ActivationSet> sets;
    for (std::uint32_t l = 0; l < 2; ++l) sets.emplace_back(id, l, problems, random_matrix(5, 3, 10 * m + l));
    write_run(dir / id, manifest_for(id, problems), sets);
  }
  CHECK(validate_path(dir.path()).empty());
  const auto cohort = load_cohort(dir.path());
  CHECK(cohort.size() == 2);
  CHECK(cohort.layers("m1") == std::vector<std::uint32_t>{0, 1});
  const auto partial = load_cohort(dir.path(), std::vector<std::uint32_t>{1});
  CHECK_FALSE(partial.has_layer("m0", 0));
  CHECK(partial.has_layer("m0", 1));
  CHECK_FALSE(validate_path(dir / "nope").empty());
}

TEST_CASE("select reorders rows and rejects unknown ids") {
  const ActivationSet set("m", 0, {"a", "b", "c"}, random_matrix(3, 2, 4));
  const std::vector<std::string> order{"c", "a"};
  const auto sub = set.select(order);
  CHECK(sub.rows() == 2);
  CHECK(sub.matrix().row(0) == set.matrix().row(2));
  const std::vector<std::string> missing{"z"};
  CHECK_THROWS_AS(set.select(missing), PreconditionError);
}
