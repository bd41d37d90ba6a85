#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace basinmerge {

struct ConfusionMatrix {
  std::int64_t classes = 0;
  // counts[g * classes + p]: ground truth g predicted as p.
  std::vector<std::int64_t> counts;

  explicit ConfusionMatrix(std::int64_t k = 1);
  std::int64_t at(std::int64_t g, std::int64_t p) const { return counts[g * classes + p]; }
  std::int64_t total() const;

  // Shard reduction: elementwise addition.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

ConfusionMatrix confusion(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt,
                          std::int64_t k, std::int64_t ignore_label = -1);

struct MiouResult {
  double miou = 0.0;
  // Per-class IoU in percent; NaN for classes absent from both pred and gt.
  std::vector<double> per_class;
};

MiouResult miou(const ConfusionMatrix& cm);

using DomainScores = std::vector<std::pair<std::string, double>>;

// M / sum(1 / m_j); 0 if any score is 0.
double harmonic_mean(std::span<const double> values);
double harmonic_mean(const DomainScores& scores);

double accuracy(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt);

}  // namespace basinmerge
