#include "metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "error.hpp"

namespace basinmerge {

ConfusionMatrix::ConfusionMatrix(std::int64_t k) : classes(k) {
  if (k < 1) throw Error(ErrorCode::domain, "class count must be >= 1");
  counts.assign(static_cast<std::size_t>(k * k), 0);
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes != classes) {
    throw Error(ErrorCode::shape, "cannot add confusion matrices of different class counts");
  }
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt,
                          std::int64_t k, std::int64_t ignore_label) {
  if (pred.size() != gt.size()) {
    throw Error(ErrorCode::shape, "prediction and ground-truth lengths differ (" +
                                      std::to_string(pred.size()) + " vs " +
                                      std::to_string(gt.size()) + ")");
  }
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool gt_ok = gt[i] == ignore_label || (gt[i] >= 0 && gt[i] < k);
    const bool pred_ok = pred[i] == ignore_label || (pred[i] >= 0 && pred[i] < k);
    if (!gt_ok || !pred_ok) {
      throw Error(ErrorCode::domain, "label out of range at index " + std::to_string(i));
    }
    if (gt[i] == ignore_label) continue;
    if (pred[i] == ignore_label) {
      throw Error(ErrorCode::domain,
                  "prediction is the ignore label at index " + std::to_string(i));
    }
    ++cm.counts[static_cast<std::size_t>(gt[i] * k + pred[i])];
  }
  return cm;
}

MiouResult miou(const ConfusionMatrix& cm) {
  const auto k = cm.classes;
  MiouResult r;
  r.per_class.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int included = 0;
  for (std::int64_t c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t denom = row + col - tp;  // TP + FN + FP
    if (denom == 0) continue;
    const double iou = 100.0 * static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class[static_cast<std::size_t>(c)] = iou;
    sum += iou;
    ++included;
  }
  if (included == 0) {
    throw Error(ErrorCode::undefined_metric, "mIoU undefined: no class present in pred or gt");
  }
  r.miou = sum / included;
  return r;
}

double harmonic_mean(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::domain, "harmonic mean of an empty list");
  double inv_sum = 0.0;
  bool has_zero = false;
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) {
      throw Error(ErrorCode::domain, "harmonic mean needs finite non-negative values");
    }
    if (v == 0.0) has_zero = true;
    else inv_sum += 1.0 / v;
  }
  if (has_zero) return 0.0;
  return static_cast<double>(values.size()) / inv_sum;
}

double harmonic_mean(const DomainScores& scores) {
  std::vector<double> values;
  values.reserve(scores.size());
  for (const auto& [tag, v] : scores) values.push_back(v);
  return harmonic_mean(values);
}

double accuracy(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt) {
  if (pred.size() != gt.size()) throw Error(ErrorCode::shape, "accuracy: length mismatch");
  if (gt.empty()) throw Error(ErrorCode::domain, "accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) hits += pred[i] == gt[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(gt.size());
}

}  // namespace basinmerge
