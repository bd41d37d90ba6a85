#include "param_merge.hpp"

#include <cmath>
#include <cstdio>
#include <set>

namespace basinmerge {

namespace {

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_weights(std::span<const double> weights) {
  std::string s;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (i) s += ",";
    s += format_real(weights[i]);
  }
  return s;
}

std::string source_tags(std::span<const Checkpoint* const> inputs) {
  std::string s;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i) s += ",";
    auto it = inputs[i]->meta.find("domain");
    s += it != inputs[i]->meta.end() ? it->second : "#" + std::to_string(i);
  }
  return s;
}

bool in_bn_triple(const std::string& name, const std::set<std::string>& bn_prefixes) {
  for (auto suffix : {kRunningMeanSuffix, kRunningVarSuffix, kNumBatchesSuffix}) {
    if (name.size() > suffix.size() &&
        std::string_view(name).substr(name.size() - suffix.size()) == suffix &&
        bn_prefixes.count(name.substr(0, name.size() - suffix.size()))) {
      return true;
    }
  }
  return false;
}

// out = sum_j weights[j] * inputs[j][name], accumulated left to right in f64.
// A weight of exactly 1 selects that input verbatim.
TensorEntry combine(std::span<const Checkpoint* const> inputs, std::span<const double> weights,
                    const std::string& name) {
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    if (weights[j] == 1.0) return inputs[j]->at(name);
  }
  const auto& first = inputs.front()->at(name);
  if (first.dtype == DType::i64) {
    throw Error(ErrorCode::domain,
                "tensor '" + name + "': integer tensors cannot be linearly merged");
  }
  TensorEntry out = TensorEntry::zeros(first.dtype, first.shape, first.role);
  std::vector<const TensorEntry*> sources;
  for (const auto* ckpt : inputs) sources.push_back(&ckpt->at(name));
  const std::size_t n = first.numel();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = weights[0] * sources[0]->get(i);
    for (std::size_t j = 1; j < sources.size(); ++j) acc += weights[j] * sources[j]->get(i);
    out.set(i, acc);
  }
  return out;
}

Checkpoint merge_all(std::span<const Checkpoint* const> inputs, std::span<const double> weights,
                     BufferPolicy buffers) {
  require_compatible(inputs);
  for (const auto* ckpt : inputs) validate_checkpoint(*ckpt);

  const auto prefixes = inputs.front()->bn_prefixes();
  const std::set<std::string> bn_set(prefixes.begin(), prefixes.end());
  const std::vector<double> equal(inputs.size(), 1.0 / static_cast<double>(inputs.size()));

  Checkpoint out;
  for (const auto& [name, entry] : inputs.front()->tensors) {
    if (entry.role == Role::param) {
      out.tensors.emplace(name, combine(inputs, weights, name));
    } else if (in_bn_triple(name, bn_set) || buffers == BufferPolicy::keep_first) {
      out.tensors.emplace(name, entry);
    } else if (entry.role == Role::count) {
      std::int64_t total = 0;
      for (const auto* ckpt : inputs) total += ckpt->at(name).view<std::int64_t>()[0];
      out.tensors.emplace(name, TensorEntry::count_scalar(total));
    } else {
      const auto& w = buffers == BufferPolicy::average ? std::span<const double>(equal) : weights;
      out.tensors.emplace(name, combine(inputs, w, name));
    }
  }
  merge_checkpoint_buffers(inputs, buffers, out);

  out.meta["merge.buffer_policy"] = buffer_policy_name(buffers);
  out.meta["merge.sources"] = source_tags(inputs);
  return out;
}

bool has_prefix(const std::string& name, std::span<const std::string> prefixes) {
  for (const auto& p : prefixes) {
    if (name.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

}  // namespace

void validate_merge_weights(std::span<const double> weights) {
  double sum = 0.0;
  bool any_positive = false;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) {
      throw Error(ErrorCode::domain, "merge weights must be finite and non-negative, got " +
                                         format_real(w));
    }
    any_positive = any_positive || w > 0.0;
    sum += w;
  }
  if (!any_positive || std::abs(sum - 1.0) > 1e-12) {
    throw Error(ErrorCode::domain,
                "merge weights must sum to 1 (got " + format_real(sum) + ")");
  }
}

Checkpoint interpolate(const Checkpoint& a, const Checkpoint& b, double lambda,
                       BufferPolicy buffers) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error(ErrorCode::domain, "lambda must lie in [0, 1], got " + format_real(lambda));
  }
  const Checkpoint* inputs[] = {&a, &b};
  const double weights[] = {lambda, 1.0 - lambda};
  Checkpoint out = merge_all(inputs, weights, buffers);
  out.meta["merge.method"] = "interpolate";
  out.meta["merge.lambda"] = format_real(lambda);
  return out;
}

Checkpoint midpoint(const Checkpoint& a, const Checkpoint& b, BufferPolicy buffers) {
  return interpolate(a, b, 0.5, buffers);
}

Checkpoint weighted_merge(std::span<const WeightedInput> inputs, BufferPolicy buffers) {
  if (inputs.size() < 2) {
    throw Error(ErrorCode::domain, "weighted_merge needs at least 2 inputs");
  }
  std::vector<const Checkpoint*> ckpts;
  std::vector<double> weights;
  for (const auto& in : inputs) {
    ckpts.push_back(in.ckpt);
    weights.push_back(in.weight);
  }
  validate_merge_weights(weights);
  Checkpoint out = merge_all(ckpts, weights, buffers);
  out.meta["merge.method"] = "weighted";
  out.meta["merge.weights"] = join_weights(weights);
  return out;
}

std::vector<Checkpoint> prefix_merge(std::span<const Checkpoint* const> inputs,
                                     std::span<const std::string> prefixes,
                                     std::span<const double> weights, BufferPolicy buffers) {
  if (inputs.size() < 2) throw Error(ErrorCode::domain, "prefix_merge needs at least 2 inputs");
  if (prefixes.empty()) throw Error(ErrorCode::domain, "prefix_merge needs at least one prefix");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(inputs.size(), 1.0 / static_cast<double>(inputs.size()));
  if (w.size() != inputs.size()) {
    throw Error(ErrorCode::domain, "prefix_merge: " + std::to_string(w.size()) +
                                       " weights for " + std::to_string(inputs.size()) +
                                       " inputs");
  }
  validate_merge_weights(w);
  const Checkpoint merged = merge_all(inputs, w, buffers);

  std::string warning;
  for (const auto& p : prefixes) {
    bool matched = false;
    for (const auto& [name, e] : merged.tensors) matched = matched || name.compare(0, p.size(), p) == 0;
    if (!matched) {
      if (!warning.empty()) warning += "; ";
      warning += "prefix '" + p + "' matched no tensors";
    }
  }

  std::string prefix_list;
  for (const auto& p : prefixes) prefix_list += (prefix_list.empty() ? "" : ",") + p;

  std::vector<Checkpoint> outputs;
  for (const auto* input : inputs) {
    Checkpoint out = *input;
    for (auto& [name, entry] : out.tensors) {
      if (has_prefix(name, prefixes)) entry = merged.at(name);
    }
    out.meta["merge.method"] = "prefix";
    out.meta["merge.prefixes"] = prefix_list;
    out.meta["merge.weights"] = join_weights(w);
    out.meta["merge.buffer_policy"] = buffer_policy_name(buffers);
    out.meta["merge.sources"] = merged.meta.at("merge.sources");
    if (!warning.empty()) out.meta["merge.warning"] = warning;
    outputs.push_back(std::move(out));
  }
  return outputs;
}

}  // namespace basinmerge
