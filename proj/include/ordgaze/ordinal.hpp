#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ordgaze/log.hpp"
#include "ordgaze/ops.hpp"
#include "ordgaze/tensor.hpp"

namespace ordgaze {

/// Quantization of one gaze coordinate into B ordered thresholds.
/// Threshold b (0-based) sits at range_min + (b+1) * bin_size.
struct OrdinalConfig {
  std::size_t bins = 2;
  double bin_size = 1.0;
  double range_min = 0.0;

  /// Bin size that splits [range_min, range_max] into bins+1 intervals.
  static OrdinalConfig for_range(std::size_t bins, double range_min,
                                 double range_max) {
    OrdinalConfig cfg{bins, (range_max - range_min) / static_cast<double>(bins + 1),
                      range_min};
    cfg.validate();
    return cfg;
  }

  double range_max() const {
    return range_min + static_cast<double>(bins + 1) * bin_size;
  }

  void validate() const {
    if (bins < 2) throw std::invalid_argument("ordinal: bins must be >= 2");
    if (!(bin_size > 0.0) || !std::isfinite(bin_size))
      throw std::invalid_argument("ordinal: bin_size must be positive");
  }

  bool operator==(const OrdinalConfig&) const = default;
};

/// Hard label of one coordinate: bits[b] = 1 iff (b+1)*bin_size <= gt - range_min.
/// Out-of-range values are clamped into [range_min, range_max) with a warning.
template <class T = double>
std::vector<T> encode(double gt, const OrdinalConfig& cfg) {
  if (!std::isfinite(gt)) throw std::invalid_argument("ordinal encode: non-finite gt");
  double offset = gt - cfg.range_min;
  const double span = cfg.range_max() - cfg.range_min;
  if (offset < 0.0 || offset >= span) {
    logger()->warn("ordinal encode: gt {} outside [{}, {}), clamped", gt,
                   cfg.range_min, cfg.range_max());
    offset = std::clamp(offset, 0.0, span);
  }
  std::vector<T> bits(cfg.bins, T(0));
  for (std::size_t b = 0; b < cfg.bins; ++b) {
    bits[b] = static_cast<double>(b + 1) * cfg.bin_size <= offset ? T(1) : T(0);
  }
  return bits;
}

/// Number of bins at or above 0.5.
template <class T>
std::size_t active_count(std::span<const T> probs) {
  std::size_t count = 0;
  for (T p : probs) count += p >= T(0.5) ? 1 : 0;
  return count;
}

/// range_min + bin_size * (#{p_b >= 0.5} + 0.5). The +0.5 offset is applied
/// unconditionally, including when no bin is active.
template <class T>
double decode(std::span<const T> probs, const OrdinalConfig& cfg) {
  return cfg.range_min +
         cfg.bin_size * (static_cast<double>(active_count(probs)) + 0.5);
}

/// Window of min(2k, B) bins around the decoded bin count: k below and k at
/// or above the count, shifted inward at the array edges.
template <class T>
std::vector<std::uint8_t> center_bin_mask(std::span<const T> probs,
                                          std::size_t half_width) {
  if (half_width == 0) throw std::invalid_argument("center_bin_mask: k must be >= 1");
  const std::size_t bins = probs.size();
  std::vector<std::uint8_t> mask(bins, 0);
  const std::size_t width = std::min(2 * half_width, bins);
  const auto count = static_cast<std::ptrdiff_t>(active_count(probs));
  std::ptrdiff_t start = count - static_cast<std::ptrdiff_t>(half_width);
  start = std::clamp<std::ptrdiff_t>(start, 0,
                                     static_cast<std::ptrdiff_t>(bins - width));
  for (std::size_t b = 0; b < width; ++b) mask[static_cast<std::size_t>(start) + b] = 1;
  return mask;
}

template <class T>
std::vector<std::uint8_t> center_bin_mask(std::span<const T> probs,
                                          const OrdinalConfig& cfg,
                                          std::size_t half_width) {
  if (probs.size() != cfg.bins)
    throw ShapeError("center_bin_mask", "probs length " + std::to_string(probs.size()) +
                                            " vs " + std::to_string(cfg.bins) + " bins");
  return center_bin_mask(probs, half_width);
}

/// Ordinal BCE summed over bins and averaged over the batch.
/// probs [N,B]; target holds N*B values in [0,1] (hard or soft).
template <class T>
Tensor<T> ordinal_loss(const Tensor<T>& probs, std::span<const T> target,
                       std::span<const std::uint8_t> mask = {}) {
  return ops::binary_cross_entropy(probs, target, mask, ops::kLogClip);
}

/// Per-vector form for plain values (no graph), used by tests and reports.
template <class T>
double ordinal_loss_value(std::span<const T> probs, std::span<const T> target) {
  if (probs.size() != target.size())
    throw ShapeError("ordinal_loss", "probs length " + std::to_string(probs.size()) +
                                         " vs target " + std::to_string(target.size()));
  NoGradGuard guard;
  auto p = Tensor<T>::from({1, probs.size()}, std::vector<T>(probs.begin(), probs.end()));
  return static_cast<double>(ordinal_loss(p, target).item());
}

}  // namespace ordgaze
