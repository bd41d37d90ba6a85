#pragma once

// Permutation alignment of hidden units (weight matching).
//
// Convention: map[i] is the source unit placed in output slot i, so applying
// a permutation to a weight matrix gathers rows: W'[i, :] = W[map[i], :].

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "buffer_merge.hpp"
#include "mini_runtime.hpp"
#include "tensor_container.hpp"

namespace basinmerge {

struct Permutation {
  std::vector<std::int64_t> map;

  static Permutation identity(std::size_t k);
  bool is_identity() const;
  bool is_bijection() const;
  Permutation inverse() const;
  std::size_t size() const { return map.size(); }
  bool operator==(const Permutation&) const = default;
};

// apply(c, compose(p, q)) == apply(apply(c, q), p).
Permutation compose(const Permutation& p, const Permutation& q);

struct PermutationSet {
  std::vector<Permutation> per_layer;  // one per hidden group, in layer order

  static PermutationSet identity(const ArchSpec& arch);
  bool all_identity() const;
  PermutationSet inverse() const;

  std::string to_json() const;
  static PermutationSet from_json(std::string_view text);
};

PermutationSet compose(const PermutationSet& p, const PermutationSet& q);

// Maximizes sum_i profit[i * k + map[i]]. Among co-optimal assignments the
// lexicographically smallest map is returned, so ties resolve to identity.
Permutation solve_lap(std::span<const double> profit, std::size_t k);

// sum_i profit[i * k + map[i]], summed in row order.
double assignment_objective(std::span<const double> profit, const Permutation& p);

struct WeightMatchingResult {
  PermutationSet perms;
  std::vector<double> objective;  // after each completed sweep
  int sweeps = 0;
  bool converged = false;  // a full sweep changed nothing
};

inline constexpr int kDefaultMaxSweeps = 100;

WeightMatchingResult weight_matching(const Checkpoint& ref, const Checkpoint& target,
                                     const ArchSpec& arch, int max_sweeps = kDefaultMaxSweeps);

// Inner product between ref and permuted target over every tensor the
// permutations touch (dense weights and biases, batchnorm vectors).
double alignment_objective(const Checkpoint& ref, const Checkpoint& target,
                           const PermutationSet& perms, const ArchSpec& arch);

Checkpoint apply_permutations(const Checkpoint& ckpt, const PermutationSet& perms,
                              const ArchSpec& arch);

struct AlignedMerge {
  Checkpoint merged;
  WeightMatchingResult matching;
};

AlignedMerge align_and_merge(const Checkpoint& ref, const Checkpoint& target, const ArchSpec& arch,
                             double lambda, BufferPolicy buffers = BufferPolicy::gaussian,
                             int max_sweeps = kDefaultMaxSweeps);

}  // namespace basinmerge
