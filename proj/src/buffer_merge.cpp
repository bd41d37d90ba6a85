#include "buffer_merge.hpp"

#include <cmath>
#include <limits>

namespace basinmerge {

void BnStats::validate() const {
  if (mean.size() != var.size()) {
    throw Error(ErrorCode::shape, "batchnorm stats: mean has " + std::to_string(mean.size()) +
                                      " channels, var has " + std::to_string(var.size()));
  }
  if (count < 1) {
    throw Error(ErrorCode::domain,
                "batchnorm stats: tracked count must be >= 1, got " + std::to_string(count));
  }
  for (std::size_t c = 0; c < var.size(); ++c) {
    if (!(var[c] >= 0.0)) {
      throw Error(ErrorCode::domain,
                  "batchnorm stats: negative or NaN variance at channel " + std::to_string(c));
    }
  }
}

namespace {

std::int64_t total_count(std::span<const BnStats> stats) {
  std::int64_t n = 0;
  for (const auto& s : stats) {
    if (s.count > std::numeric_limits<std::int64_t>::max() - n) {
      throw Error(ErrorCode::domain, "batchnorm stats: tracked count overflows i64");
    }
    n += s.count;
  }
  return n;
}

// Weighted form of the pooled-moment identities, w_j = n_j / n. Summation runs
// left to right over the sources, so the two-source case evaluates exactly
// the same expression as merge_bn_pair.
BnStats pool(std::span<const BnStats> stats) {
  const std::size_t channels = stats.front().mean.size();
  for (const auto& s : stats) {
    s.validate();
    if (s.mean.size() != channels) {
      throw Error(ErrorCode::shape, "batchnorm stats: channel counts differ (" +
                                        std::to_string(channels) + " vs " +
                                        std::to_string(s.mean.size()) + ")");
    }
  }
  if (stats.size() == 1) return stats.front();

  BnStats out;
  out.count = total_count(stats);
  const double n = static_cast<double>(out.count);
  std::vector<double> w(stats.size());
  for (std::size_t j = 0; j < stats.size(); ++j) w[j] = static_cast<double>(stats[j].count) / n;

  out.mean.resize(channels);
  out.var.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mu = w[0] * stats[0].mean[c];
    for (std::size_t j = 1; j < stats.size(); ++j) mu += w[j] * stats[j].mean[c];

    double v = w[0] * stats[0].var[c];
    for (std::size_t j = 1; j < stats.size(); ++j) v += w[j] * stats[j].var[c];
    for (std::size_t j = 0; j < stats.size(); ++j) {
      const double d = mu - stats[j].mean[c];
      v += w[j] * (d * d);
    }
    out.mean[c] = mu;
    out.var[c] = v;
  }
  return out;
}

}  // namespace

BnStats merge_bn_pair(const BnStats& a, const BnStats& b) {
  const BnStats pair[2] = {a, b};
  return pool(pair);
}

BnStats merge_bn_many(std::span<const BnStats> stats) {
  if (stats.empty()) throw Error(ErrorCode::domain, "merge_bn_many: empty input list");
  return pool(stats);
}

const char* buffer_policy_name(BufferPolicy policy) noexcept {
  switch (policy) {
    case BufferPolicy::gaussian: return "gaussian";
    case BufferPolicy::keep_first: return "keep_first";
    case BufferPolicy::average: return "average";
  }
  return "?";
}

BufferPolicy parse_buffer_policy(std::string_view name) {
  if (name == "gaussian") return BufferPolicy::gaussian;
  if (name == "keep_first") return BufferPolicy::keep_first;
  if (name == "average") return BufferPolicy::average;
  throw Error(ErrorCode::domain, "unknown buffer policy '" + std::string(name) +
                                     "' (expected gaussian, keep_first or average)");
}

BnStats read_bn_stats(const Checkpoint& ckpt, const std::string& prefix) {
  const auto mean_name = prefix + std::string(kRunningMeanSuffix);
  const auto var_name = prefix + std::string(kRunningVarSuffix);
  const auto count_name = prefix + std::string(kNumBatchesSuffix);
  for (const auto& member : {mean_name, var_name, count_name}) {
    if (!ckpt.contains(member)) {
      throw Error(ErrorCode::validation,
                  "batchnorm '" + prefix + "': missing triple member '" + member + "'");
    }
  }
  BnStats s;
  s.mean = ckpt.at(mean_name).to_f64();
  s.var = ckpt.at(var_name).to_f64();
  s.count = ckpt.at(count_name).view<std::int64_t>()[0];
  return s;
}

void write_bn_stats(Checkpoint& ckpt, const std::string& prefix, const BnStats& stats) {
  auto& mean = ckpt.at(prefix + std::string(kRunningMeanSuffix));
  auto& var = ckpt.at(prefix + std::string(kRunningVarSuffix));
  auto& count = ckpt.at(prefix + std::string(kNumBatchesSuffix));
  if (mean.numel() != stats.mean.size() || var.numel() != stats.var.size()) {
    throw Error(ErrorCode::shape, "batchnorm '" + prefix + "': channel count mismatch on write");
  }
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    mean.set(c, stats.mean[c]);
    var.set(c, stats.var[c]);
  }
  count.view_mut<std::int64_t>()[0] = stats.count;
}

void merge_checkpoint_buffers(std::span<const Checkpoint* const> inputs, BufferPolicy policy,
                              Checkpoint& merged) {
  if (inputs.empty()) throw Error(ErrorCode::domain, "no inputs to merge");
  require_compatible(inputs);

  for (const auto& prefix : inputs.front()->bn_prefixes()) {
    std::vector<BnStats> stats;
    stats.reserve(inputs.size());
    for (const auto* ckpt : inputs) stats.push_back(read_bn_stats(*ckpt, prefix));

    switch (policy) {
      case BufferPolicy::gaussian:
        try {
          write_bn_stats(merged, prefix, merge_bn_many(stats));
        } catch (const Error& e) {
          throw Error(e.code(), "batchnorm '" + prefix + "': " + e.what());
        }
        break;
      case BufferPolicy::keep_first:
        for (auto suffix : {kRunningMeanSuffix, kRunningVarSuffix, kNumBatchesSuffix}) {
          const auto name = prefix + std::string(suffix);
          merged.at(name) = inputs.front()->at(name);
        }
        break;
      case BufferPolicy::average: {
        BnStats out;
        out.mean.assign(stats.front().mean.size(), 0.0);
        out.var.assign(stats.front().var.size(), 0.0);
        const double m = static_cast<double>(stats.size());
        for (const auto& s : stats) {
          if (s.mean.size() != out.mean.size()) {
            throw Error(ErrorCode::shape, "batchnorm '" + prefix + "': channel counts differ");
          }
          for (std::size_t c = 0; c < s.mean.size(); ++c) {
            out.mean[c] += s.mean[c] / m;
            out.var[c] += s.var[c] / m;
          }
        }
        out.count = total_count(stats);
        write_bn_stats(merged, prefix, out);
        break;
      }
    }
  }
}

}  // namespace basinmerge
