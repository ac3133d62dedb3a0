#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modeseg/autodiff.hpp"

namespace modeseg {

enum class LossKind { dice, focal, combined };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& s);

struct LossConfig {
  LossKind kind = LossKind::dice;
  double alpha = 0.25;       // focal weight of the positive (water) class
  double focal_gamma = 2.0;  // focusing exponent
  double smooth_eps = 1e-6;  // Dice smoothing
  double dice_weight = 0.5;  // combined = dice_weight * dice + focal_weight * focal
  double focal_weight = 0.5;

  void validate() const;
};

/// 1 - (2 sum(t p) + eps) / (sum(t) + sum(p) + eps), summed over the whole batch.
template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg);

/// Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t), with p_t clamped at 1e-7.
template <typename T>
Var<T> focal_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg);

template <typename T>
Var<T> combined_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg);

/// Dispatches on cfg.kind.
template <typename T>
Var<T> segmentation_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg);

struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) noexcept {
    return a += b;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Pixels with pred >= threshold count as predicted water; target >= 0.5 as true water.
template <typename T>
ConfusionMatrix confusion(std::span<const T> pred, std::span<const T> target,
                          double threshold = 0.5);

template <typename T>
ConfusionMatrix confusion(const Tensor<T>& pred, const Tensor<T>& target, double threshold = 0.5) {
  require_same_shape(pred.shape(), target.shape(), "confusion");
  return confusion<T>(pred.data(), target.data(), threshold);
}

struct MetricReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, iou = 0, dsc = 0;
  /// Set when any ratio had a zero denominator and was reported as 0.
  bool degenerate = false;
};

/// Throws ContractError on an empty matrix. A ratio whose denominator is
/// zero is reported as 0 and flags the report as degenerate.
MetricReport metrics(const ConfusionMatrix& cm);

/// Column order: Accuracy, Precision, Recall, F1-Score, IoU, Dsc.
const std::vector<std::string>& metric_names();
std::vector<double> metric_values(const MetricReport& r);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricReport& r);

}  // namespace modeseg
