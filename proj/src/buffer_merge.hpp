#pragma once

// Pooling of batch-normalization running statistics.
//
// Each source model's (mean, var, count) triple is read as the population
// statistics of count equally sized batches drawn from its domain. The merged
// triple is the population statistics of the union of those samples.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "tensor_container.hpp"

namespace basinmerge {

struct BnStats {
  std::vector<double> mean;
  std::vector<double> var;  // population (biased) variance
  std::int64_t count = 1;   // tracked batches

  // Throws Error(domain/shape) on violated invariants.
  void validate() const;
};

BnStats merge_bn_pair(const BnStats& a, const BnStats& b);
BnStats merge_bn_many(std::span<const BnStats> stats);

enum class BufferPolicy { gaussian, keep_first, average };

const char* buffer_policy_name(BufferPolicy policy) noexcept;
BufferPolicy parse_buffer_policy(std::string_view name);

BnStats read_bn_stats(const Checkpoint& ckpt, const std::string& prefix);
void write_bn_stats(Checkpoint& ckpt, const std::string& prefix, const BnStats& stats);

// Writes merged BN triples for every batchnorm prefix into `merged`. Inputs
// must be pairwise compatible; `merged` must share their structure.
void merge_checkpoint_buffers(std::span<const Checkpoint* const> inputs, BufferPolicy policy,
                              Checkpoint& merged);

}  // namespace basinmerge
