#pragma once

#include <span>
#include <string>
#include <vector>

#include "buffer_merge.hpp"
#include "tensor_container.hpp"

namespace basinmerge {

// lambda weighs the first checkpoint: out = lambda * a + (1 - lambda) * b for
// every parameter tensor. Accumulation is done in f64 and rounded once into
// the tensor dtype. lambda == 1 and lambda == 0 copy a's / b's parameters.
Checkpoint interpolate(const Checkpoint& a, const Checkpoint& b, double lambda,
                       BufferPolicy buffers = BufferPolicy::gaussian);

Checkpoint midpoint(const Checkpoint& a, const Checkpoint& b,
                    BufferPolicy buffers = BufferPolicy::gaussian);

struct WeightedInput {
  const Checkpoint* ckpt;
  double weight;
};

// Convex combination over M >= 2 checkpoints. Weights must be non-negative
// and sum to 1 within 1e-12.
Checkpoint weighted_merge(std::span<const WeightedInput> inputs,
                          BufferPolicy buffers = BufferPolicy::gaussian);

// Merges the tensors whose names start with any of `prefixes` and splices the
// merged values into a copy of every input. Empty `weights` means equal
// weights. A prefix matching nothing is recorded under meta "merge.warning".
std::vector<Checkpoint> prefix_merge(std::span<const Checkpoint* const> inputs,
                                     std::span<const std::string> prefixes,
                                     std::span<const double> weights = {},
                                     BufferPolicy buffers = BufferPolicy::gaussian);

// Throws Error(domain) unless weights are a valid convex combination.
void validate_merge_weights(std::span<const double> weights);

}  // namespace basinmerge
