// Runs scenarios over a seed range and prints per-seed outcomes and summaries.
// Used once to pick the thresholds frozen in the acceptance suite.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "experiments.hpp"

using namespace basinmerge;

int main(int argc, char** argv) {
  CLI::App app{"scenario calibration runner"};
  std::vector<std::string> scenarios{"shared_pretrain", "random_init", "shared_init_no_pretrain",
                                     "buffer_ablation", "split_source", "disjoint_subsets"};
  std::uint64_t first = 101, count = 20;
  int threads = 8;
  ScenarioConfig base;
  app.add_option("--scenario", scenarios);
  app.add_option("--first-seed", first);
  app.add_option("--count", count);
  app.add_option("--threads", threads);
  app.add_option("--clusters", base.domain.clusters_per_class);
  app.add_option("--center-scale", base.domain.center_scale);
  app.add_option("--cluster-std", base.domain.cluster_std);
  app.add_option("--rotation", base.domain.rotation_strength);
  app.add_option("--shift", base.domain.shift_norm);
  app.add_option("--label-noise", base.domain.label_noise);
  app.add_option("--train-size", base.domain.train_size);
  app.add_option("--pre-epochs", base.pretrain.epochs);
  app.add_option("--pre-lr", base.pretrain.lr);
  app.add_option("--ft-epochs", base.finetune.epochs);
  app.add_option("--ft-lr", base.finetune.lr);
  app.add_option("--scratch-epochs", base.scratch.epochs);
  app.add_option("--scratch-lr", base.scratch.lr);
  int scratch_batch = 0;
  app.add_option("--scratch-batch", scratch_batch);
  app.add_option("--scratch-wd", base.scratch.weight_decay);
  app.add_option("--pre-wd", base.pretrain.weight_decay);
  app.add_option("--ft-wd", base.finetune.weight_decay);
  int pre_batch = 0, ft_batch = 0;
  app.add_option("--pre-batch", pre_batch);
  app.add_option("--ft-batch", ft_batch);
  CLI11_PARSE(app, argc, argv);
  if (scratch_batch > 0) base.scratch.batch_size = scratch_batch;
  if (pre_batch > 0) base.pretrain.batch_size = pre_batch;
  if (ft_batch > 0) base.finetune.batch_size = ft_batch;

  base.seeds.clear();
  for (std::uint64_t s = first; s < first + count; ++s) base.seeds.push_back(s);
  base.threads = threads;

  for (const auto& name : scenarios) {
    auto cfg = base;
    cfg.name = parse_scenario(name);
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = run_scenario(cfg);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("== %s (%.1f s)\n", name.c_str(), secs);
    for (const auto& s : rep.seeds) {
      std::printf("  seed %3llu:", static_cast<unsigned long long>(s.seed));
      for (const auto& [k, v] : s.values) std::printf(" %s=%.2f", k.c_str(), v);
      if (!s.sweeps.empty()) {
        std::printf("  H:");
        for (double h : s.sweeps.front().report.harmonic) std::printf(" %.1f", h);
      }
      std::printf("\n");
    }
    for (const auto& [k, v] : rep.summary) {
      std::printf("  %-28s median %.3f  min %.3f  max %.3f\n", k.c_str(), v.median, v.min, v.max);
    }
    std::fflush(stdout);
  }
}
