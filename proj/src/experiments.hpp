#pragma once

// Seeded end-to-end toy scenarios: train phase-1 models, merge, sweep.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "connectivity_probe.hpp"
#include "mini_runtime.hpp"
#include "perm_align.hpp"

namespace basinmerge {

enum class Scenario {
  shared_pretrain,
  random_init,
  shared_init_no_pretrain,
  split_source,
  disjoint_subsets,
  buffer_ablation,
};

const char* scenario_name(Scenario s);
Scenario parse_scenario(std::string_view name);
std::vector<Scenario> all_scenarios();

struct DomainParams {
  std::int64_t dims = 16;
  std::int64_t classes = 5;
  std::int64_t clusters_per_class = 8;
  double center_scale = 1.0;
  double cluster_std = 0.7;
  double rotation_strength = 0.15;  // domain B rotation
  double shift_norm = 1.0;          // domain B shift length
  double label_noise = 0.0;
  std::int64_t train_size = 4096;
  std::int64_t eval_size = 1024;
};

struct Recipe {
  int epochs = 1;
  int batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct ScenarioConfig {
  Scenario name = Scenario::shared_pretrain;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  ArchSpec arch;  // empty -> mlp(dims, {64, 64}, classes) with batchnorm
  DomainParams domain;
  Recipe pretrain{30, 64, 0.05, 0.9, 0.0};
  Recipe finetune{20, 64, 0.005, 0.9, 0.0};
  Recipe scratch{30, 16, 0.2, 0.9, 0.0};
  int steps = kDefaultSweepSteps;
  BufferPolicy buffers = BufferPolicy::gaussian;
  int threads = 1;  // across seeds

  void validate() const;
  ArchSpec resolved_arch() const;
};

struct NamedSweep {
  std::string curve;  // "main", or the arm name
  SweepReport report;
};

struct SeedArtifacts {
  Checkpoint a, b;
  std::vector<std::pair<std::string, Checkpoint>> extra;  // other arms' models
  DomainSet eval;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<NamedSweep> sweeps;
  std::map<std::string, double> values;  // scalar outcomes, e.g. "barrier"
  std::optional<PermutationSet> matching;  // shared_pretrain only
  std::optional<SeedArtifacts> artifacts;
};

struct SummaryStat {
  double median = 0.0, min = 0.0, max = 0.0;
};

struct ScenarioReport {
  ScenarioConfig config;
  std::vector<SeedResult> seeds;
  std::map<std::string, SummaryStat> summary;  // over seeds, per value key

  std::string to_json() const;
  // lambda vs metric per (seed, curve, column).
  std::string plot_csv() const;
};

SummaryStat summarize(std::vector<double> values);

// keep_artifacts retains trained models and eval sets for writing to disk.
ScenarioReport run_scenario(const ScenarioConfig& cfg, bool keep_artifacts = false);

// report.json, plot.csv, and per seed: sweep CSV(s), a.tmc/b.tmc, eval data,
// arch.json and domains.json, so the CLI can re-run any step.
void write_scenario(const ScenarioReport& report, const std::filesystem::path& dir);

// {"domains":[{"tag":..,"data":path}, ...]}, paths relative to the file.
DomainSet load_domain_set(const std::filesystem::path& path);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace basinmerge
