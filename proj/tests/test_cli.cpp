#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Runs the simlab binary with `args`, capturing both streams.
Outcome simlab(const std::string& args, const fixture::TempDir& scratch) {
  const char* bin = std::getenv("SIMLAB_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "SIMLAB_BIN is not set");
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd =
      std::string("\"") + bin + "\" " + args + " > \"" + out.string() + "\" 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = slurp(out);
  o.err = slurp(err);
  return o;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

const std::string kQuick = " --grid-size 3 --resamples 100 --iterations 100";

}  // namespace

TEST_CASE("usage errors exit nonzero") {
  fixture::TempDir dir("cli");
  CHECK(simlab("", dir).code != 0);
  CHECK(simlab("frobnicate", dir).code != 0);
  CHECK(simlab("validate", dir).code != 0);
  CHECK(simlab("synth difficulty", dir).code != 0);
  CHECK(simlab("similarity --grid-size notanumber", dir).code != 0);
  CHECK(simlab("--help", dir).code == 0);
}

TEST_CASE("synth output validates and corruption is reported") {
  fixture::TempDir dir("cli");
  const auto cohort = dir / "cohort";
  const auto made = simlab("synth rotated --problems 40 --out " + q(cohort), dir);
  REQUIRE(made.code == 0);
  CHECK(made.out.find("wrote 2 runs") != std::string::npos);

  const auto ok = simlab("validate " + q(cohort), dir);
  CHECK(ok.code == 0);
  CHECK(ok.out == "ok\n");
  CHECK(simlab("validate " + q(cohort / "m00" / "layer_0000.rsa"), dir).code == 0);

  // Flip the magic of one layer file.
  const auto victim = cohort / "m01" / "layer_0003.rsa";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  const auto bad = simlab("validate " + q(cohort), dir);
  CHECK(bad.code == 1);
  CHECK(bad.err.find("layer_0003.rsa") != std::string::npos);
  CHECK(simlab("validate " + q(dir / "nothing-here"), dir).code != 0);
  CHECK(simlab("synth wobbly --out " + q(dir / "w"), dir).code == 1);
}

TEST_CASE("analysis errors exit with a message") {
  fixture::TempDir dir("cli");
  const auto missing = simlab("similarity --cohort " + q(dir / "absent") + " --out " + q(dir / "out"), dir);
  CHECK(missing.code == 1);
  CHECK(missing.err.find("does not exist") != std::string::npos);
  CHECK(simlab("similarity --out " + q(dir / "out"), dir).code == 1);

  const auto cohort = dir / "cohort";
  REQUIRE(simlab("synth causal --problems 60 --out " + q(cohort), dir).code == 0);
  const auto bad_q = simlab("similarity --q 0 --cohort " + q(cohort) + " --out " + q(dir / "out"), dir);
  CHECK(bad_q.code == 1);
  CHECK(simlab("similarity --metrics cosine --cohort " + q(cohort) + " --out " + q(dir / "out"), dir).code == 1);
  CHECK(simlab("similarity --config " + q(dir / "none.cfg") + " --cohort " + q(cohort), dir).code == 1);
}

TEST_CASE("ablation before transfer is a dependency error naming the producer") {
  fixture::TempDir dir("cli");
  const auto cohort = dir / "cohort";
  REQUIRE(simlab("synth causal --problems 60 --out " + q(cohort), dir).code == 0);
  const auto r = simlab("ablate --cohort " + q(cohort) + " --out " + q(dir / "out") + kQuick, dir);
  CHECK(r.code == 3);
  CHECK(r.err.find("transfer") != std::string::npos);
}

TEST_CASE("analyses chain through the command line") {
  fixture::TempDir dir("cli");
  const auto cohort = dir / "cohort", out = dir / "out";
  REQUIRE(simlab("synth causal --problems 60 --out " + q(cohort), dir).code == 0);
  const std::string common = " --cohort " + q(cohort) + " --out " + q(out) + kQuick;

  const auto sim = simlab("similarity" + common + " --strata all,difficulty --n-min 5", dir);
  CHECK(sim.code == 0);
  CHECK(fs::exists(out / "similarity.csv"));
  CHECK(simlab("transfer" + common, dir).code == 0);
  CHECK(fs::exists(out / "transfer.csv"));
  const auto abl = simlab("ablate" + common, dir);
  CHECK(abl.code == 0);
  CHECK(abl.out.find("strict_all_correct") != std::string::npos);
  CHECK(fs::exists(out / "ablation.csv"));
  CHECK(simlab("report --out " + q(out), dir).code == 0);
  CHECK(fs::exists(out / "report.md"));
}

TEST_CASE("config files and flags agree") {
  fixture::TempDir dir("cli");
  const auto cohort = dir / "cohort";
  REQUIRE(simlab("synth null --models 3 --problems 60 --layers 4 --dim 12 --out " + q(cohort), dir).code == 0);
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "cohort = " << cohort.string() << "\noutput = " << (dir / "a").string()
        << "\ngrid_size = 3\nresamples = 100\nstrata = all\nseed = 5\n";
  }
  REQUIRE(simlab("similarity --config " + q(dir / "run.cfg"), dir).code == 0);
  REQUIRE(simlab("similarity --cohort " + q(cohort) + " --out " + q(dir / "b") +
                     " --grid-size 3 --resamples 100 --strata all --seed 5",
                 dir)
              .code == 0);
  CHECK(slurp(dir / "a" / "similarity.csv") == slurp(dir / "b" / "similarity.csv"));
  CHECK_FALSE(slurp(dir / "a" / "similarity.csv").empty());

  // A flag overrides the same key from the file.
  REQUIRE(simlab("similarity --config " + q(dir / "run.cfg") + " --out " + q(dir / "c") + " --seed 6", dir).code ==
          0);
  CHECK(fs::exists(dir / "c" / "similarity.csv"));
}
