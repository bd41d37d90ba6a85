#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "param_merge.hpp"
#include "test_support.hpp"

using namespace basinmerge;
using namespace testsupport;

namespace {

Checkpoint scalar(double v, DType dtype = DType::f64) {
  Checkpoint c;
  c.tensors["w"] = TensorEntry::from_f64(dtype, {}, Role::param, std::vector<double>{v});
  return c;
}

Checkpoint random_f64(std::mt19937_64& rng) {
  Checkpoint c;
  c.tensors["backbone.l1.weight"] = random_tensor(rng, DType::f64, {7, 5}, Role::param);
  c.tensors["backbone.l1.bias"] = random_tensor(rng, DType::f64, {7}, Role::param);
  c.tensors["head.weight"] = random_tensor(rng, DType::f64, {3, 7}, Role::param);
  return c;
}

bool same_bits(double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; }

// Structural equality (names, dtypes, shapes, roles).
bool same_structure(const Checkpoint& a, const Checkpoint& b) {
  return validate_compatibility(a, b).compatible;
}

}  // namespace

TEST_CASE("scalar midpoint") {
  CHECK(midpoint(scalar(2.0), scalar(4.0)).at("w").get(0) == 3.0);
  CHECK(interpolate(scalar(2.0), scalar(4.0), 0.5).at("w").get(0) == 3.0);
  CHECK(midpoint(scalar(2.0, DType::f32), scalar(4.0, DType::f32)).at("w").get(0) == 3.0);
}

TEST_CASE("interpolation equals an elementwise reference loop to the bit") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Checkpoint a = random_f64(rng);
    const Checkpoint b = random_f64(rng);
    const double lambda = trial == 0 ? 0.3 : uniform(rng, 0.0, 1.0);
    const Checkpoint out = interpolate(a, b, lambda);
    for (const auto& [name, e] : out.tensors) {
      const auto x = a.at(name).view<double>();
      const auto y = b.at(name).view<double>();
      const auto z = e.view<double>();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double ref = lambda * x[i] + (1.0 - lambda) * y[i];
        CHECK(same_bits(z[i], ref));
      }
    }
  }
}

TEST_CASE("f32 tensors are accumulated in f64 and rounded once") {
  std::mt19937_64 rng(8);
  Checkpoint a, b;
  a.tensors["w"] = random_tensor(rng, DType::f32, {64}, Role::param);
  b.tensors["w"] = random_tensor(rng, DType::f32, {64}, Role::param);
  const Checkpoint out = interpolate(a, b, 0.3);
  for (std::size_t i = 0; i < 64; ++i) {
    const double ref = 0.3 * a.at("w").get(i) + 0.7 * b.at("w").get(i);
    CHECK(out.at("w").view<float>()[i] == static_cast<float>(ref));
  }
}

TEST_CASE("endpoints are bit-exact copies") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto fam = random_family(rng, 2);
    const Checkpoint& a = fam.members[0];
    const Checkpoint& b = fam.members[1];
    for (auto policy : {BufferPolicy::keep_first, BufferPolicy::gaussian}) {
      const Checkpoint at1 = interpolate(a, b, 1.0, policy);
      const Checkpoint at0 = interpolate(a, b, 0.0, policy);
      for (const auto& [name, e] : a.tensors) {
        if (e.role != Role::param) continue;
        CHECK(at1.at(name).bit_equal(e));
        CHECK(at0.at(name).bit_equal(b.at(name)));
      }
    }
    const Checkpoint self = midpoint(a, a, BufferPolicy::keep_first);
    CHECK(self.tensors_bit_equal(a));
  }
}

TEST_CASE("symmetry for dyadic lambda") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const Checkpoint a = random_f64(rng);
    const Checkpoint b = random_f64(rng);
    const double lambda = static_cast<double>(pick(rng, 0, (std::int64_t{1} << 53))) /
                          static_cast<double>(std::int64_t{1} << 53);
    const Checkpoint p = interpolate(a, b, lambda);
    const Checkpoint q = interpolate(b, a, 1.0 - lambda);
    CHECK(p.tensors_bit_equal(q));
  }
}

TEST_CASE("convexity bound and structure preservation") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto fam = random_family(rng, 2);
    const Checkpoint& a = fam.members[0];
    const Checkpoint& b = fam.members[1];
    const double lambda = uniform(rng, 0.0, 1.0);
    for (auto policy : {BufferPolicy::gaussian, BufferPolicy::keep_first, BufferPolicy::average}) {
      const Checkpoint out = interpolate(a, b, lambda, policy);
      CHECK(same_structure(out, a));
      for (const auto& [name, e] : out.tensors) {
        if (e.role != Role::param) continue;
        for (std::size_t i = 0; i < e.numel(); ++i) {
          const double x = a.at(name).get(i), y = b.at(name).get(i);
          CHECK(e.get(i) >= std::min(x, y));
          CHECK(e.get(i) <= std::max(x, y));
        }
      }
    }
  }
}

TEST_CASE("meta records the merge") {
  std::mt19937_64 rng(2);
  auto fam = random_family(rng, 2);
  const Checkpoint out = interpolate(fam.members[0], fam.members[1], 0.25);
  CHECK(out.meta.at("merge.method") == "interpolate");
  CHECK(std::stod(out.meta.at("merge.lambda")) == 0.25);
  CHECK(out.meta.at("merge.sources") == "D0,D1");
  CHECK(out.meta.at("merge.buffer_policy") == "gaussian");
  CHECK(out.meta.count("domain") == 0);
}

TEST_CASE("interpolation preconditions") {
  CHECK(error_code_of([] { interpolate(scalar(1), scalar(2), 1.5); }) == ErrorCode::domain);
  CHECK(error_code_of([] { interpolate(scalar(1), scalar(2), -0.1); }) == ErrorCode::domain);
  CHECK(error_code_of([] { interpolate(scalar(1), scalar(2), std::nan("")); }) ==
        ErrorCode::domain);
  Checkpoint other = scalar(1);
  other.tensors["extra"] = TensorEntry::zeros(DType::f64, {1}, Role::param);
  try {
    interpolate(scalar(1), other, 0.5);
    FAIL("expected a compatibility error");
  } catch (const CompatibilityError& e) {
    CHECK(e.code() == ErrorCode::compatibility);
    CHECK(e.report().mismatches.at(0).name == "extra");
  }
  Checkpoint ints;
  ints.tensors["w"] = TensorEntry::zeros(DType::i64, {2}, Role::param);
  CHECK(error_code_of([&] { interpolate(ints, ints, 0.5); }) == ErrorCode::domain);
}

TEST_CASE("weighted merge") {
  std::mt19937_64 rng(5);
  SUBCASE("equal weights over two inputs equal midpoint") {
    for (int t = 0; t < 20; ++t) {
      const auto fam = random_family(rng, 2);
      const WeightedInput in[] = {{&fam.members[0], 0.5}, {&fam.members[1], 0.5}};
      CHECK(weighted_merge(in).tensors_bit_equal(midpoint(fam.members[0], fam.members[1])));
    }
  }
  SUBCASE("two inputs reduce to interpolate") {
    for (int t = 0; t < 20; ++t) {
      const auto fam = random_family(rng, 2);
      const double lambda = static_cast<double>(pick(rng, 1, 1023)) / 1024.0;
      const WeightedInput in[] = {{&fam.members[0], lambda}, {&fam.members[1], 1.0 - lambda}};
      CHECK(weighted_merge(in).tensors_bit_equal(
          interpolate(fam.members[0], fam.members[1], lambda)));
    }
  }
  SUBCASE("one-hot weights select that input's params") {
    const auto fam = random_family(rng, 3);
    const WeightedInput in[] = {
        {&fam.members[0], 1.0}, {&fam.members[1], 0.0}, {&fam.members[2], 0.0}};
    const Checkpoint out = weighted_merge(in);
    for (const auto& [name, e] : fam.members[0].tensors) {
      if (e.role == Role::param) CHECK(out.at(name).bit_equal(e));
    }
  }
  SUBCASE("three scalars against a reference sum") {
    for (int t = 0; t < 100; ++t) {
      const Checkpoint x = scalar(uniform(rng, -10, 10));
      const Checkpoint y = scalar(uniform(rng, -10, 10));
      const Checkpoint z = scalar(uniform(rng, -10, 10));
      const WeightedInput in[] = {{&x, 0.2}, {&y, 0.3}, {&z, 0.5}};
      const double ref = 0.2 * x.at("w").get(0) + 0.3 * y.at("w").get(0) + 0.5 * z.at("w").get(0);
      CHECK(std::abs(weighted_merge(in).at("w").get(0) - ref) <= 1e-15 * std::max(1.0, std::abs(ref)));
    }
  }
  SUBCASE("weights are validated") {
    const Checkpoint x = scalar(1), y = scalar(2);
    const WeightedInput bad_sum[] = {{&x, 0.5}, {&y, 0.6}};
    CHECK(error_code_of([&] { weighted_merge(bad_sum); }) == ErrorCode::domain);
    const WeightedInput negative[] = {{&x, 1.5}, {&y, -0.5}};
    CHECK(error_code_of([&] { weighted_merge(negative); }) == ErrorCode::domain);
    const WeightedInput single[] = {{&x, 1.0}};
    CHECK(error_code_of([&] { weighted_merge(single); }) == ErrorCode::domain);
    const WeightedInput near[] = {{&x, 0.5}, {&y, 0.5 + 1e-13}};
    CHECK_NOTHROW(weighted_merge(near));
  }
  SUBCASE("gaussian buffers pool all inputs") {
    const auto fam = random_family(rng, 3);
    const WeightedInput in[] = {
        {&fam.members[0], 0.2}, {&fam.members[1], 0.3}, {&fam.members[2], 0.5}};
    const Checkpoint out = weighted_merge(in);
    for (const auto& prefix : out.bn_prefixes()) {
      std::vector<BnStats> st;
      for (const auto& m : fam.members) st.push_back(read_bn_stats(m, prefix));
      CHECK(read_bn_stats(out, prefix).count == st[0].count + st[1].count + st[2].count);
    }
  }
}

TEST_CASE("prefix merge shares merged tensors and keeps the rest") {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 30; ++t) {
    const auto fam = random_family(rng, 2);
    const Checkpoint* in[] = {&fam.members[0], &fam.members[1]};
    const std::string prefixes[] = {"backbone."};
    const auto outs = prefix_merge(in, prefixes);
    REQUIRE(outs.size() == 2);
    const Checkpoint mid = midpoint(fam.members[0], fam.members[1]);
    for (std::size_t k = 0; k < 2; ++k) {
      for (const auto& [name, e] : outs[k].tensors) {
        if (name.starts_with("backbone.")) {
          CHECK(e.bit_equal(outs[1 - k].at(name)));
          CHECK(e.bit_equal(mid.at(name)));
        } else {
          CHECK(e.bit_equal(in[k]->at(name)));
        }
      }
      CHECK(outs[k].meta.at("domain") == in[k]->meta.at("domain"));
      CHECK(outs[k].meta.at("merge.method") == "prefix");
    }
  }
}

TEST_CASE("prefix merge degenerate prefixes") {
  std::mt19937_64 rng(78);
  const auto fam = random_family(rng, 2);
  const Checkpoint* in[] = {&fam.members[0], &fam.members[1]};

  const std::string everything[] = {"backbone.", "head.", "neck."};
  const Checkpoint mid = midpoint(fam.members[0], fam.members[1]);
  for (const auto& out : prefix_merge(in, everything)) CHECK(out.tensors_bit_equal(mid));

  const std::string nomatch[] = {"nomatch."};
  const auto outs = prefix_merge(in, nomatch);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(outs[k].tensors_bit_equal(*in[k]));
    CHECK(outs[k].meta.at("merge.warning").find("nomatch.") != std::string::npos);
  }
  CHECK(error_code_of([&] { prefix_merge(in, std::span<const std::string>{}); }) ==
        ErrorCode::domain);
}
