#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "wavedepth/losses.hpp"
#include "wavedepth/tensor.hpp"

namespace wavedepth {

// Per-pixel sums from which every metric is recomputed; pooling these is
// what makes dataset-level aggregation pixel-weighted.
struct MetricSums {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double sq_err = 0.0;
  double sq_log = 0.0;
  double abs_log10 = 0.0;
  double delta = 0.0;     // sum of log d - log pred
  double delta_sq = 0.0;  // sum of its square
  std::size_t within1 = 0;
  std::size_t within2 = 0;
  std::size_t within3 = 0;
  std::size_t count = 0;

  MetricSums& operator+=(const MetricSums& o);
};

struct MetricsReport {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double log10 = 0.0;
  double silog = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t n_valid = 0;
  MetricSums sums;

  static MetricsReport from_sums(const MetricSums& s);
};

struct MetricsOptions {
  // Rescale pred by median(gt)/median(pred) over valid pixels first.
  bool median_scaling = false;
};

MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt,
                              const ValidMask& mask,
                              MetricsOptions options = {});

// Pixel-weighted pooling of per-frame reports.
MetricsReport aggregate(std::span<const MetricsReport> reports);

// CSV columns after the row label, in report field order.
std::vector<std::string> metrics_header();
std::vector<std::string> metrics_row(const MetricsReport& r);

}  // namespace wavedepth
