#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "connectivity_probe.hpp"
#include "json.hpp"
#include "param_merge.hpp"
#include "test_support.hpp"

using namespace basinmerge;
using namespace testsupport;

namespace {

struct Fixture {
  ArchSpec arch;
  Checkpoint a, b;
  DomainSet domains;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture f;
    const std::int64_t hidden[] = {12};
    f.arch = ArchSpec::mlp(4, hidden, 3);
    SyntheticDomain d;
    d.task_seed = 5;
    d.dims = 4;
    d.classes = 3;
    d.clusters_per_class = 2;
    d.center_scale = 1.5;
    d.size = 300;
    d.seed = 1;
    const Dataset train_a = generate_domain(d);
    d.seed = 2;
    d.rotation = random_rotation(4, 9, 0.5);
    d.shift = {0.5, -0.5, 0.25, 0.0};
    const Dataset train_b = generate_domain(d);
    d.seed = 3;
    const Dataset eval_b = generate_domain(d);
    d.seed = 4;
    d.rotation.clear();
    d.shift.clear();
    const Dataset eval_a = generate_domain(d);

    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.lr = 0.05;
    cfg.seed = 11;
    f.a = train(f.arch, train_a, cfg);
    cfg.seed = 12;
    f.b = train(f.arch, train_b, cfg);
    f.domains = {{"A", eval_a}, {"B", eval_b}};
    return f;
  }();
  return f;
}

}  // namespace

TEST_CASE("lambda grid") {
  const auto g = lambda_grid(11);
  REQUIRE(g.size() == 11);
  CHECK(g.front() == 0.0);
  CHECK(g.back() == 1.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g[i] == static_cast<double>(i) / 10.0);
    if (i) CHECK(g[i] > g[i - 1]);
  }
  CHECK(lambda_grid(2) == std::vector<double>{0.0, 1.0});
  for (int steps : {3, 7, 101}) {
    const auto h = lambda_grid(steps);
    for (std::size_t i = 0; i < h.size(); ++i) {
      CHECK(h[i] == doctest::Approx(static_cast<double>(i) / (steps - 1)).epsilon(1e-15));
    }
  }
  CHECK(error_code_of([] { lambda_grid(1); }) == ErrorCode::domain);
}

TEST_CASE("barrier examples") {
  CHECK(barrier({0.0, 0.5, 1.0}, {60.0, 40.0, 60.0}) == 20.0);
  CHECK(barrier({0.0, 0.5, 1.0}, {50.0, 50.0, 50.0}) == 0.0);
  CHECK(barrier({0.0, 0.5, 1.0}, {40.0, 70.0, 60.0}) == 0.0);
  CHECK(barrier({0.0, 0.5, 1.0}, {40.0, 45.0, 60.0}) == doctest::Approx(5.0));
  CHECK(error_code_of([] { barrier({0.0}, {1.0}); }) == ErrorCode::shape);
}

TEST_CASE("sweeping a model against itself is flat with zero barrier") {
  const auto& f = fixture();
  const auto r = sweep(f.a, f.a, f.domains, f.arch, 11);
  CHECK(r.barrier == 0.0);
  CHECK(barrier(r) == 0.0);
  for (const auto& col : r.per_domain) {
    for (double v : col) CHECK(v == col.front());
  }
}

TEST_CASE("sweep structure and endpoints") {
  const auto& f = fixture();
  const auto r = sweep(f.a, f.b, f.domains, f.arch, 11);
  REQUIRE(r.lambdas == lambda_grid(11));
  REQUIRE(r.domains == std::vector<std::string>{"A", "B"});
  REQUIRE(r.per_domain.size() == 2);
  for (const auto& col : r.per_domain) CHECK(col.size() == 11);
  REQUIRE(r.harmonic.size() == 11);

  for (std::size_t i = 0; i < 11; ++i) {
    const std::vector<double> row{r.per_domain[0][i], r.per_domain[1][i]};
    CHECK(r.harmonic[i] == harmonic_mean(row));
  }
  CHECK(r.barrier == barrier(r));
  CHECK(r.barrier >= 0.0);

  // lambda weighs a: index 0 is b alone, the last index a alone.
  for (std::size_t d = 0; d < 2; ++d) {
    CHECK(r.per_domain[d].front() == evaluate(f.arch, f.b, f.domains[d].second).accuracy);
    CHECK(r.per_domain[d].back() == evaluate(f.arch, f.a, f.domains[d].second).accuracy);
  }
  // Interior points are the interpolated models.
  const Checkpoint mid = interpolate(f.a, f.b, r.lambdas[5]);
  CHECK(r.per_domain[0][5] == evaluate(f.arch, mid, f.domains[0].second).accuracy);

  CHECK(r.meta.at("buffer_policy") == "gaussian");
  CHECK(r.meta.at("steps") == "11");
}

TEST_CASE("two steps evaluate only the endpoints") {
  const auto& f = fixture();
  const auto r = sweep(f.a, f.b, f.domains, f.arch, 2);
  CHECK(r.lambdas == std::vector<double>{0.0, 1.0});
  CHECK(r.per_domain[0][0] == evaluate(f.arch, f.b, f.domains[0].second).accuracy);
  CHECK(r.per_domain[0][1] == evaluate(f.arch, f.a, f.domains[0].second).accuracy);
  CHECK(r.barrier == 0.0);
}

TEST_CASE("results do not depend on the thread count") {
  const auto& f = fixture();
  const auto one = sweep(f.a, f.b, f.domains, f.arch, 11, BufferPolicy::gaussian, 1);
  const auto four = sweep(f.a, f.b, f.domains, f.arch, 11, BufferPolicy::gaussian, 4);
  CHECK(one.to_json() == four.to_json());
  CHECK(one.to_csv() == four.to_csv());
}

TEST_CASE("buffer policy changes only interior points") {
  const auto& f = fixture();
  const auto g = sweep(f.a, f.b, f.domains, f.arch, 5, BufferPolicy::gaussian);
  const auto k = sweep(f.a, f.b, f.domains, f.arch, 5, BufferPolicy::keep_first);
  for (std::size_t d = 0; d < 2; ++d) {
    CHECK(g.per_domain[d].front() == k.per_domain[d].front());
    CHECK(g.per_domain[d].back() == k.per_domain[d].back());
  }
  CHECK(k.meta.at("buffer_policy") == "keep_first");
}

TEST_CASE("CSV and JSON emission") {
  const auto& f = fixture();
  const auto r = sweep(f.a, f.b, f.domains, f.arch, 11);
  std::istringstream csv(r.to_csv());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "lambda,A,B,harmonic");
  int rows = 0;
  while (std::getline(csv, line)) {
    char expect[16];
    std::snprintf(expect, sizeof expect, "%.4f,", rows / 10.0);
    CHECK(line.rfind(expect, 0) == 0);
    CHECK(std::count(line.begin(), line.end(), ',') == 3);
    const auto dot = line.find('.');
    CHECK(line.find(',') - dot == 5);
    ++rows;
  }
  CHECK(rows == 11);

  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["lambdas"].size() == 11);
  CHECK(j["per_domain"]["A"].size() == 11);
  CHECK(j["harmonic"].size() == 11);
  CHECK(j["barrier"].get<double>() == r.barrier);
}

TEST_CASE("sweep errors carry lambda context") {
  const auto& f = fixture();
  CHECK(error_code_of([&] { sweep(f.a, f.b, f.domains, f.arch, 1); }) == ErrorCode::domain);
  Checkpoint other = f.b;
  other.tensors.erase("l2.bias");
  CHECK(error_code_of([&] { sweep(f.a, other, f.domains, f.arch, 3); }).has_value());

  DomainSet wrong = f.domains;
  wrong[0].second.classes = 7;
  try {
    sweep(f.a, f.b, wrong, f.arch, 3);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("lambda=") != std::string::npos);
  }
}
