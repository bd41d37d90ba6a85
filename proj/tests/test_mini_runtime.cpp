#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "test_support.hpp"

using namespace basinmerge;
using namespace testsupport;

namespace {

SyntheticDomain separable(std::uint64_t seed, std::int64_t size) {
  SyntheticDomain d;
  d.seed = seed;
  d.task_seed = 1000 + seed;
  d.dims = 2;
  d.classes = 3;
  d.clusters_per_class = 1;
  d.center_scale = 8.0;
  d.cluster_std = 0.5;
  d.size = size;
  return d;
}

ArchSpec small_arch() {
  const std::int64_t hidden[] = {5, 6};
  return ArchSpec::mlp(4, hidden, 3);
}

// Batch statistics of every BN layer for one train-mode pass, computed by a
// separate straight-line forward pass.
std::vector<std::pair<std::vector<double>, std::vector<double>>> oracle_bn_stats(
    const ArchSpec& arch, const Checkpoint& c, const std::vector<double>& x, std::size_t n) {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> out;
  std::vector<double> h = x;
  std::size_t width = static_cast<std::size_t>(arch.input_dim());
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::dense) {
      const auto& w = c.at(l.name + ".weight");
      const auto& b = c.at(l.name + ".bias");
      const auto o = static_cast<std::size_t>(l.out);
      std::vector<double> y(n * o);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i < o; ++i) {
          double acc = b.get(i);
          for (std::size_t j = 0; j < width; ++j) acc += w.get(i * width + j) * h[s * width + j];
          y[s * o + i] = acc;
        }
      }
      h = std::move(y);
      width = o;
    } else if (l.kind == LayerKind::batchnorm) {
      std::vector<double> mean(width), var(width);
      for (std::size_t i = 0; i < width; ++i) {
        std::vector<double> col(n);
        for (std::size_t s = 0; s < n; ++s) col[s] = h[s * width + i];
        std::tie(mean[i], var[i]) = population_stats(col);
        const double g = c.at(l.name + ".weight").get(i), be = c.at(l.name + ".bias").get(i);
        for (std::size_t s = 0; s < n; ++s) {
          h[s * width + i] = g * (col[s] - mean[i]) / std::sqrt(var[i] + kBatchNormEps) + be;
        }
      }
      out.emplace_back(std::move(mean), std::move(var));
    } else {
      for (auto& v : h) v = std::max(v, 0.0);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("arch naming, groups and JSON round trip") {
  const ArchSpec arch = small_arch();
  CHECK(arch.input_dim() == 4);
  CHECK(arch.num_classes() == 3);
  CHECK(arch.head_prefix == "l3.");
  const auto groups = arch.hidden_groups();
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].producer == "l1");
  CHECK(groups[0].consumer == "l2");
  CHECK(groups[0].batchnorms == std::vector<std::string>{"bn1"});
  CHECK(groups[1].width == 6);

  const ArchSpec back = ArchSpec::from_json(arch.to_json());
  CHECK(back.to_json() == arch.to_json());

  CHECK(error_code_of([] {
          ArchSpec::from_json(R"({"layers":[{"type":"dense","in":2,"out":3},{"type":"relu"}]})");
        }) == ErrorCode::validation);
  CHECK(error_code_of([] {
          ArchSpec::from_json(
              R"({"layers":[{"type":"dense","in":2,"out":3},{"type":"dense","in":4,"out":2}]})");
        }) == ErrorCode::validation);
  CHECK(error_code_of([] { ArchSpec::from_json("{"); }) == ErrorCode::validation);
}

TEST_CASE("init checkpoint satisfies the arch and container rules") {
  const ArchSpec arch = small_arch();
  const Checkpoint c = init_checkpoint(arch, 3);
  CHECK_NOTHROW(check_checkpoint_against_arch(arch, c));
  CHECK_NOTHROW(validate_checkpoint(c));
  CHECK(init_checkpoint(arch, 3).bit_equal(c));
  CHECK_FALSE(init_checkpoint(arch, 4).bit_equal(c));

  Checkpoint broken = c;
  broken.tensors.erase("l2.bias");
  CHECK(error_code_of([&] { check_checkpoint_against_arch(arch, broken); }) ==
        ErrorCode::validation);
  Checkpoint extra = c;
  extra.tensors["stray"] = TensorEntry::zeros(DType::f64, {1}, Role::param);
  CHECK(error_code_of([&] { check_checkpoint_against_arch(arch, extra); }) ==
        ErrorCode::validation);
}

TEST_CASE("synthetic domains") {
  const SyntheticDomain d = separable(1, 300);
  const Dataset a = generate_domain(d);
  const Dataset b = generate_domain(d);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 300);

  SyntheticDomain shifted = d;
  shifted.shift = {1.5, -2.0};
  const Dataset s = generate_domain(shifted);
  CHECK(s.labels == a.labels);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    CHECK(s.row(i)[0] - a.row(i)[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(s.row(i)[1] - a.row(i)[1] == doctest::Approx(-2.0).epsilon(1e-12));
  }

  std::vector<std::int64_t> per_class(3, 0);
  for (auto y : a.labels) ++per_class[static_cast<std::size_t>(y)];
  for (auto n : per_class) {
    CHECK(n >= 70);
    CHECK(n <= 130);
  }

  SyntheticDomain noisy = d;
  noisy.label_noise = 1.5;
  CHECK(error_code_of([&] { generate_domain(noisy); }) == ErrorCode::domain);
}

TEST_CASE("dataset container round trip") {
  const Dataset a = generate_domain(separable(2, 50));
  const Checkpoint c = a.to_checkpoint();
  const Dataset back = Dataset::from_checkpoint(parse_checkpoint(serialize_checkpoint(c)));
  CHECK(back.features == a.features);
  CHECK(back.labels == a.labels);
  CHECK(back.dims == a.dims);
  CHECK(back.classes == a.classes);
}

TEST_CASE("training is deterministic") {
  const Dataset data = generate_domain(separable(3, 240));
  const std::int64_t hidden[] = {8};
  const ArchSpec arch = ArchSpec::mlp(2, hidden, 3);
  TrainConfig cfg;
  cfg.seed = 9;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  const Checkpoint x = train(arch, data, cfg);
  const Checkpoint y = train(arch, data, cfg);
  CHECK(x.bit_equal(y));
  CHECK(serialize_checkpoint(x) == serialize_checkpoint(y));
  cfg.seed = 10;
  CHECK_FALSE(train(arch, data, cfg).tensors_bit_equal(x));
}

TEST_CASE("zero learning rate keeps params and still tracks buffers") {
  const Dataset data = generate_domain(separable(4, 128));
  const std::int64_t hidden[] = {8};
  const ArchSpec arch = ArchSpec::mlp(2, hidden, 3);
  TrainConfig cfg;
  cfg.seed = 1;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.lr = 0.0;
  const Checkpoint init = init_checkpoint(arch, cfg.seed);
  const Checkpoint out = train(arch, data, cfg);
  for (const auto& [name, e] : init.tensors) {
    if (e.role == Role::param) CHECK(out.at(name).bit_equal(e));
  }
  CHECK(out.at("bn1.num_batches_tracked").view<std::int64_t>()[0] == 4);
  CHECK_FALSE(out.at("bn1.running_mean").bit_equal(init.at("bn1.running_mean")));
}

TEST_CASE("depth-2 net reaches high train accuracy on separable data") {
  const Dataset data = generate_domain(separable(5, 600));
  const std::int64_t hidden[] = {16};
  const ArchSpec arch = ArchSpec::mlp(2, hidden, 3);
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  const Checkpoint c = train(arch, data, cfg);
  const double acc = evaluate(arch, c, data).accuracy;
  CHECK(acc >= 99.0);
  CHECK(acc >= 95.0);

  Dataset permuted = data;
  for (auto& y : permuted.labels) y = (y + 1) % 3;
  CHECK(evaluate(arch, c, permuted).accuracy <= 5.0);
}

TEST_CASE("BN running stats are the average of the sequential batch statistics") {
  std::mt19937_64 rng(6);
  const ArchSpec arch = small_arch();
  Dataset data;
  data.dims = 4;
  data.classes = 3;
  data.features = random_batch(rng, 100, 4);
  for (int i = 0; i < 100; ++i) data.labels.push_back(pick(rng, 0, 2));
  TrainConfig cfg;
  cfg.seed = 2;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr = 0.01;
  const Checkpoint c = train(arch, data, cfg);

  // 100 = 6 * 16 + 4: seven batches, the last of four samples.
  std::vector<std::vector<double>> mean_sum(2), var_sum(2);
  int batches = 0;
  for (std::int64_t start = 0; start < data.size(); start += 16) {
    const std::int64_t m = std::min<std::int64_t>(16, data.size() - start);
    std::vector<double> x(data.features.begin() + start * 4, data.features.begin() + (start + m) * 4);
    const auto stats = oracle_bn_stats(arch, c, x, static_cast<std::size_t>(m));
    for (std::size_t l = 0; l < 2; ++l) {
      mean_sum[l].resize(stats[l].first.size());
      var_sum[l].resize(stats[l].first.size());
      for (std::size_t i = 0; i < stats[l].first.size(); ++i) {
        mean_sum[l][i] += stats[l].first[i];
        var_sum[l][i] += stats[l].second[i];
      }
    }
    ++batches;
  }
  CHECK(batches == 7);
  const char* names[] = {"bn1", "bn2"};
  for (std::size_t l = 0; l < 2; ++l) {
    const auto got = read_bn_stats(c, names[l]);
    CHECK(got.count == batches);
    for (std::size_t i = 0; i < got.mean.size(); ++i) {
      CHECK(std::abs(got.mean[i] - mean_sum[l][i] / batches) <= 1e-9);
      CHECK(std::abs(got.var[i] - var_sum[l][i] / batches) <= 1e-9);
    }
  }
}

TEST_CASE("eval-mode forward") {
  SUBCASE("zero head gives zero logits") {
    std::mt19937_64 rng(1);
    const ArchSpec arch = small_arch();
    Checkpoint c = random_network(rng, arch, DType::f64);
    for (auto* n : {"l3.weight", "l3.bias"}) {
      auto& e = c.at(n);
      for (std::size_t i = 0; i < e.numel(); ++i) e.set(i, 0.0);
    }
    for (double v : forward(arch, c, random_batch(rng, 10, 4), ForwardMode::eval)) CHECK(v == 0.0);
  }
  SUBCASE("unit BN is the identity up to epsilon") {
    const ArchSpec arch = ArchSpec::from_json(
        R"({"layers":[{"type":"batchnorm","width":2,"name":"bn0"},{"type":"dense","in":2,"out":2}]})");
    Checkpoint c = init_checkpoint(arch, 1);
    c.at("bn0.running_var").set(0, 1.0);
    c.at("bn0.running_var").set(1, 1.0);
    c.at("l1.weight").set(0, 1.0);
    c.at("l1.weight").set(1, 0.0);
    c.at("l1.weight").set(2, 0.0);
    c.at("l1.weight").set(3, 1.0);
    const std::vector<double> x{0.5, -3.0, 2.0, 7.0};
    const auto y = forward(arch, c, x, ForwardMode::eval);
    const double scale = 1.0 / std::sqrt(1.0 + kBatchNormEps);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(x[i] * scale).epsilon(1e-15));
  }
  SUBCASE("shape errors") {
    const ArchSpec arch = small_arch();
    const Checkpoint c = init_checkpoint(arch, 1);
    CHECK(error_code_of([&] { forward(arch, c, std::vector<double>(7), ForwardMode::eval); }) ==
          ErrorCode::validation);
  }
}

TEST_CASE("f32 and f64 forward agree closely") {
  std::mt19937_64 rng(3);
  const ArchSpec arch = small_arch();
  const Checkpoint c64 = random_network(rng, arch, DType::f64);
  Checkpoint c32 = c64;
  for (auto& [name, e] : c32.tensors) {
    if (e.dtype == DType::f64) e = TensorEntry::from_f64(DType::f32, e.shape, e.role, e.to_f64());
  }
  const auto x = random_batch(rng, 32, 4);
  CHECK(max_abs_diff(forward(arch, c64, x, ForwardMode::eval), forward(arch, c32, x, ForwardMode::eval)) < 1e-4);
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 5; ++t) {
    const ArchSpec arch = small_arch();
    const Checkpoint c = random_network(rng, arch, DType::f64);
    const auto x = random_batch(rng, 8, 4);
    std::vector<std::int64_t> y;
    for (int i = 0; i < 8; ++i) y.push_back(pick(rng, 0, 2));
    const auto r = gradient_check(arch, c, x, y);
    INFO("worst " << r.worst_name << " rel " << r.worst_rel);
    CHECK(r.worst_rel <= 1e-4);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("train config validation") {
  const Dataset data = generate_domain(separable(1, 32));
  const std::int64_t hidden[] = {4};
  const ArchSpec arch = ArchSpec::mlp(2, hidden, 3);
  TrainConfig cfg;
  cfg.batch_size = 1;
  CHECK(error_code_of([&] { train(arch, data, cfg); }) == ErrorCode::domain);
  cfg.batch_size = 8;
  cfg.lr = -1;
  CHECK(error_code_of([&] { train(arch, data, cfg); }) == ErrorCode::domain);
  cfg.lr = 1e300;
  cfg.epochs = 3;
  CHECK(error_code_of([&] { train(arch, data, cfg); }) == ErrorCode::divergence);
  const std::int64_t wrong[] = {4};
  CHECK(error_code_of([&] { train(ArchSpec::mlp(3, wrong, 3), data, TrainConfig{}); }) ==
        ErrorCode::validation);
}
