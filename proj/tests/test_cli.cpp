#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "experiments.hpp"
#include "json.hpp"
#include "param_merge.hpp"
#include "test_support.hpp"

using namespace basinmerge;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "basinmerge_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args, const std::string& env = "") {
  const fs::path err = workdir() / "stderr.txt";
  const std::string cmd = env + " \"" BASINMERGE_CLI "\" " + args + " 2>\"" + err.string() + "\"";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

struct Models {
  fs::path a, b, c;
  Checkpoint ca, cb, cc;
};

const Models& models() {
  static const Models m = [] {
    Models m;
    std::mt19937_64 rng(10);
    auto fam = random_family(rng, 3);
    m.ca = fam.members[0];
    m.cb = fam.members[1];
    m.cc = fam.members[2];
    fs::create_directories(workdir() / "x");
    fs::create_directories(workdir() / "y");
    fs::create_directories(workdir() / "z");
    m.a = workdir() / "x" / "model.tmc";
    m.b = workdir() / "y" / "model_b.tmc";
    m.c = workdir() / "z" / "model_c.tmc";
    save_checkpoint(m.ca, m.a);
    save_checkpoint(m.cb, m.b);
    save_checkpoint(m.cc, m.c);
    return m;
  }();
  return m;
}

// A tiny scenario written to disk: a.tmc, b.tmc, arch.json, domains.json.
const fs::path& scenario_dir() {
  static const fs::path dir = [] {
    ScenarioConfig cfg;
    cfg.name = Scenario::shared_pretrain;
    cfg.seeds = {7};
    const std::int64_t hidden[] = {16, 16};
    cfg.domain.dims = 6;
    cfg.domain.classes = 3;
    cfg.domain.train_size = 256;
    cfg.domain.eval_size = 128;
    cfg.arch = ArchSpec::mlp(6, hidden, 3);
    cfg.pretrain.epochs = 3;
    cfg.finetune.epochs = 2;
    const fs::path d = workdir() / "scenario";
    write_scenario(run_scenario(cfg, true), d);
    return d / "seed_7";
  }();
  return dir;
}

}  // namespace

TEST_CASE("help and usage errors") {
  auto r = cli("--help");
  CHECK(r.code == 0);
  CHECK(r.out.find("merge") != std::string::npos);
  r = cli("frobnicate");
  CHECK(r.code == 1);
  CHECK(r.err.find("error: usage:") == 0);
  r = cli("merge --bogus-flag a b");
  CHECK(r.code == 1);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  r = cli("");
  CHECK(r.code == 1);
}

TEST_CASE("inspect is stable and matches the library") {
  const auto& m = models();
  const auto r1 = cli("inspect " + q(m.a));
  const auto r2 = cli("inspect " + q(m.a));
  CHECK(r1.code == 0);
  CHECK(r1.out == r2.out);
  CHECK(r1.out == summary_to_json(inspect(m.ca)) + "\n");
}

TEST_CASE("validate reports mismatches with exit code 1") {
  const auto& m = models();
  auto r = cli("validate " + q(m.a) + " " + q(m.b));
  CHECK(r.code == 0);
  CHECK(nlohmann::json::parse(r.out)["compatible"] == true);

  Checkpoint odd = m.ca;
  odd.tensors["head.extra"] = TensorEntry::zeros(DType::f32, {2}, Role::param);
  const fs::path p = workdir() / "odd.tmc";
  save_checkpoint(odd, p);
  r = cli("validate " + q(m.a) + " " + q(p));
  CHECK(r.code == 1);
  CHECK(nlohmann::json::parse(r.out)["compatible"] == false);
  CHECK(r.err.find("error: compatibility:") == 0);
}

TEST_CASE("merge output is byte-identical to the library") {
  const auto& m = models();
  const fs::path out = workdir() / "mid.tmc";
  auto r = cli("merge --lambda 0.5 --buffers gaussian " + q(m.a) + " " + q(m.b) + " -o " + q(out));
  REQUIRE(r.code == 0);
  CHECK(slurp(out) == [&] {
    const auto bytes = serialize_checkpoint(midpoint(m.ca, m.cb, BufferPolicy::gaussian));
    return std::string(bytes.begin(), bytes.end());
  }());

  r = cli("merge --lambda 0.3 --buffers keep_first " + q(m.a) + " " + q(m.b) + " -o " + q(out));
  REQUIRE(r.code == 0);
  CHECK(load_checkpoint(out).bit_equal(interpolate(m.ca, m.cb, 0.3, BufferPolicy::keep_first)));

  r = cli("merge --weights 0.2,0.3,0.5 " + q(m.a) + " " + q(m.b) + " " + q(m.c) + " -o " + q(out));
  REQUIRE(r.code == 0);
  const WeightedInput in[] = {{&m.ca, 0.2}, {&m.cb, 0.3}, {&m.cc, 0.5}};
  CHECK(load_checkpoint(out).bit_equal(weighted_merge(in)));

  r = cli("merge " + q(m.a) + " " + q(m.b) + " " + q(m.c) + " -o " + q(out));
  REQUIRE(r.code == 0);
  const double third = 1.0 / 3.0;
  const WeightedInput eq[] = {{&m.ca, third}, {&m.cb, third}, {&m.cc, third}};
  CHECK(load_checkpoint(out).bit_equal(weighted_merge(eq)));
}

TEST_CASE("prefix merge with -o-dir writes one output per input") {
  const auto& m = models();
  const fs::path dir = workdir() / "prefix_out";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto r = cli("merge --prefix backbone. " + q(m.a) + " " + q(m.b) + " -o-dir " + q(dir));
  REQUIRE(r.code == 0);
  const Checkpoint oa = load_checkpoint(dir / "model.tmc");
  const Checkpoint ob = load_checkpoint(dir / "model_b.tmc");
  const Checkpoint* in[] = {&m.ca, &m.cb};
  const std::string prefixes[] = {"backbone."};
  const auto want = prefix_merge(in, prefixes);
  CHECK(oa.bit_equal(want[0]));
  CHECK(ob.bit_equal(want[1]));
  for (const auto& [name, e] : oa.tensors) {
    if (name.starts_with("backbone.")) {
      CHECK(e.bit_equal(ob.at(name)));
    } else {
      CHECK(e.bit_equal(m.ca.at(name)));
      CHECK(ob.at(name).bit_equal(m.cb.at(name)));
    }
  }
}

TEST_CASE("merge errors") {
  const auto& m = models();
  auto r = cli("merge --lambda 1.5 " + q(m.a) + " " + q(m.b) + " -o " + q(workdir() / "e.tmc"));
  CHECK(r.code == 1);
  CHECK(r.err.find("error: domain:") == 0);
  r = cli("merge --lambda 0.5 " + q(m.a) + " " + q(workdir() / "missing.tmc") + " -o " +
          q(workdir() / "e.tmc"));
  CHECK(r.code == 1);
  CHECK(r.err.find("error: io:") == 0);
  r = cli("merge --weights 0.5,0.6 " + q(m.a) + " " + q(m.b) + " -o " + q(workdir() / "e.tmc"));
  CHECK(r.code == 1);
  r = cli("merge --lambda 0.5 --buffers nope " + q(m.a) + " " + q(m.b) + " -o " +
          q(workdir() / "e.tmc"));
  CHECK(r.code == 1);

  const fs::path garbage = workdir() / "garbage.tmc";
  std::ofstream(garbage) << "not a checkpoint at all";
  r = cli("inspect " + q(garbage));
  CHECK(r.code == 1);
  CHECK(r.err.find("error: format:") == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("sweep writes an 11-row CSV over the default grid") {
  const fs::path sd = scenario_dir();
  const fs::path out = workdir() / "sweep_out";
  const auto r = cli("sweep --steps 11 --arch " + q(sd / "arch.json") + " --domains " +
                     q(sd / "domains.json") + " " + q(sd / "a.tmc") + " " + q(sd / "b.tmc") +
                     " -o " + q(out));
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("barrier ", 0) == 0);
  const std::string csv = slurp(out / "sweep.csv");
  CHECK(csv == slurp(sd / "sweep.csv"));
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "lambda,A,B,harmonic");
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  REQUIRE(rows.size() == 11);
  CHECK(rows.front().rfind("0.0000,", 0) == 0);
  CHECK(rows.back().rfind("1.0000,", 0) == 0);
  CHECK(nlohmann::json::parse(slurp(out / "sweep.json"))["lambdas"].size() == 11);

  const auto threaded = cli("--threads 3 sweep --arch " + q(sd / "arch.json") + " --domains " +
                            q(sd / "domains.json") + " " + q(sd / "a.tmc") + " " +
                            q(sd / "b.tmc") + " -o " + q(workdir() / "sweep_t"));
  REQUIRE(threaded.code == 0);
  CHECK(slurp(workdir() / "sweep_t" / "sweep.csv") == csv);

  const auto env = cli("sweep --arch " + q(sd / "arch.json") + " --domains " +
                           q(sd / "domains.json") + " " + q(sd / "a.tmc") + " " +
                           q(sd / "b.tmc") + " -o " + q(workdir() / "sweep_e"),
                       "BASINMERGE_THREADS=2");
  REQUIRE(env.code == 0);
  CHECK(slurp(workdir() / "sweep_e" / "sweep.csv") == csv);
  CHECK(cli("--threads 0 hmean 1,2").code == 1);
}

TEST_CASE("eval and align") {
  const fs::path sd = scenario_dir();
  const ArchSpec arch = ArchSpec::load(sd / "arch.json");
  const Checkpoint a = load_checkpoint(sd / "a.tmc");
  const Checkpoint b = load_checkpoint(sd / "b.tmc");
  const Dataset da = Dataset::from_checkpoint(load_checkpoint(sd / "eval_A.tmc"));

  auto r = cli("eval --arch " + q(sd / "arch.json") + " --data " + q(sd / "eval_A.tmc") + " " +
               q(sd / "a.tmc"));
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(std::abs(j["accuracy"].get<double>() - evaluate(arch, a, da).accuracy) <= 5e-5);

  const fs::path perms = workdir() / "perms.json";
  const fs::path aligned = workdir() / "aligned.tmc";
  r = cli("align --ref " + q(sd / "a.tmc") + " --target " + q(sd / "b.tmc") + " --arch " +
          q(sd / "arch.json") + " --lambda 0.5 -o " + q(aligned) + " --perms-out " + q(perms));
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report.contains("identity"));
  CHECK(load_checkpoint(aligned).bit_equal(align_and_merge(a, b, arch, 0.5).merged));
  CHECK(PermutationSet::from_json(slurp(perms)).per_layer ==
        weight_matching(a, b, arch).perms.per_layer);

  r = cli("align --ref " + q(sd / "a.tmc") + " --target " + q(sd / "b.tmc") + " --arch " +
          q(sd / "arch.json") + " --apply -o " + q(aligned));
  REQUIRE(r.code == 0);
  CHECK(load_checkpoint(aligned).bit_equal(
      apply_permutations(b, weight_matching(a, b, arch).perms, arch)));
}

TEST_CASE("experiment and hmean") {
  auto r = cli("hmean 58.8,54.0");
  CHECK(r.code == 0);
  CHECK(r.out == "56.2979\n");
  r = cli("hmean 100,0");
  CHECK(r.out == "0.0000\n");
  r = cli("hmean 1,-2");
  CHECK(r.code == 1);

  r = cli("experiment --scenario nope --seeds 1 -o " + q(workdir() / "exp"));
  CHECK(r.code == 1);
  CHECK(r.err.find("error: validation:") == 0);
  r = cli("experiment --scenario random_init -o " + q(workdir() / "exp"));
  CHECK(r.code == 1);
}
