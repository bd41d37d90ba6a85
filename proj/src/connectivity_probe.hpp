#pragma once

// Linear-path sweeps between two checkpoints, evaluated per domain.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "buffer_merge.hpp"
#include "mini_runtime.hpp"
#include "tensor_container.hpp"

namespace basinmerge {

using DomainSet = std::vector<std::pair<std::string, Dataset>>;

struct SweepReport {
  std::vector<double> lambdas;  // weight of model a; 0 -> b, 1 -> a
  std::vector<std::string> domains;
  std::vector<std::vector<double>> per_domain;  // [domain][lambda index], accuracy %
  std::vector<double> harmonic;
  double barrier = 0.0;
  std::map<std::string, std::string> meta;

  std::string to_json() const;
  std::string to_csv() const;
};

inline constexpr int kDefaultSweepSteps = 11;

std::vector<double> lambda_grid(int steps);

// threads <= 1 evaluates sequentially; output does not depend on it.
SweepReport sweep(const Checkpoint& a, const Checkpoint& b, const DomainSet& domains,
                  const ArchSpec& arch, int steps = kDefaultSweepSteps,
                  BufferPolicy buffers = BufferPolicy::gaussian, int threads = 1);

// Largest shortfall of the harmonic curve below the chord joining its
// endpoints, clamped at 0.
double barrier(const SweepReport& report);
double barrier(const std::vector<double>& lambdas, const std::vector<double>& curve);

}  // namespace basinmerge
