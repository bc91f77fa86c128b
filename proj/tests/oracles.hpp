#pragma once

// Naive scalar-loop references for the losses and metrics. They share no
// code with the library.

#include <algorithm>
#include <cmath>
#include <vector>

#include "wavedepth/tensor.hpp"

namespace wdtest {

using wavedepth::Shape;
using wavedepth::Tensor;

inline bool in_range(const Tensor& gt, std::size_t i, double d_min, double d_max) {
  return gt[i] > 0.0 && gt[i] >= d_min && gt[i] <= d_max;
}

inline double oracle_scale(const Tensor& p, const Tensor& g, double d_min,
                           double d_max, double lambda, bool literal) {
  double s1 = 0.0, s2 = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < g.numel(); ++i) {
    if (!in_range(g, i, d_min, d_max)) continue;
    const double d = std::log(p[i]) - std::log(g[i]);
    s1 += d;
    s2 += d * d;
    ++n;
  }
  const double m1 = s1 / n, m2 = s2 / n;
  return literal ? std::sqrt(m2) - lambda * m1 * m1
                 : std::sqrt(m2 - lambda * m1 * m1);
}

// Visits every horizontal (axis 0) or vertical (axis 1) pair of valid
// neighbours as f(sample, first, second).
template <typename F>
void for_valid_pairs(const Tensor& g, double d_min, double d_max, int axis, F f) {
  const Shape s = g.shape();
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t y = 0; y < s.h(); ++y) {
      for (std::size_t x = 0; x < s.w(); ++x) {
        const std::size_t yy = axis == 1 ? y + 1 : y;
        const std::size_t xx = axis == 0 ? x + 1 : x;
        if (yy >= s.h() || xx >= s.w()) continue;
        const std::size_t a = g.offset(n, 0, y, x), b = g.offset(n, 0, yy, xx);
        if (in_range(g, a, d_min, d_max) && in_range(g, b, d_min, d_max)) {
          f(n, a, b);
        }
      }
    }
  }
}

inline double oracle_grad(const Tensor& p, const Tensor& g, double d_min,
                          double d_max) {
  double total = 0.0;
  for (int axis = 0; axis < 2; ++axis) {
    double sum = 0.0;
    int count = 0;
    for_valid_pairs(g, d_min, d_max, axis,
                    [&](std::size_t, std::size_t a, std::size_t b) {
                      sum += std::abs((p[b] - p[a]) - (g[b] - g[a]));
                      ++count;
                    });
    if (count > 0) total += sum / count;
  }
  return total;
}

inline double oracle_smooth(const Tensor& p, const Tensor& g, const Tensor& image,
                            double d_min, double d_max, bool image_weights) {
  const Shape s = g.shape();
  Tensor gray(s);
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t y = 0; y < s.h(); ++y) {
      for (std::size_t x = 0; x < s.w(); ++x) {
        gray.at(n, 0, y, x) = 0.299 * image.at(n, 0, y, x) +
                              0.587 * image.at(n, 1, y, x) +
                              0.114 * image.at(n, 2, y, x);
      }
    }
  }
  const Tensor& src = image_weights ? gray : p;
  double total = 0.0;
  for (int axis = 0; axis < 2; ++axis) {
    std::vector<double> wsum(s.n(), 0.0);
    std::vector<int> wcount(s.n(), 0);
    for_valid_pairs(g, d_min, d_max, axis,
                    [&](std::size_t n, std::size_t a, std::size_t b) {
                      wsum[n] += std::abs(src[b] - src[a]);
                      ++wcount[n];
                    });
    double sum = 0.0;
    int count = 0;
    for_valid_pairs(g, d_min, d_max, axis,
                    [&](std::size_t n, std::size_t a, std::size_t b) {
                      sum += std::exp(-wsum[n] / wcount[n]) * std::abs(p[b] - p[a]);
                      ++count;
                    });
    if (count > 0) total += sum / count;
  }
  return total;
}

struct MetricOracle {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0, log10 = 0, silog = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
};

inline MetricOracle oracle_metrics(const Tensor& pred, const Tensor& gt,
                                   double d_min, double d_max) {
  MetricOracle o;
  double n = 0, sum_dl = 0, sum_dl2 = 0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    if (!in_range(gt, i, d_min, d_max)) continue;
    const double d = gt[i], p = pred[i];
    n += 1;
    o.abs_rel += std::abs(d - p) / d;
    o.sq_rel += (d - p) * (d - p) / d;
    o.rmse += (d - p) * (d - p);
    const double dl = std::log(d) - std::log(p);
    o.rmse_log += dl * dl;
    o.log10 += std::abs(std::log10(d) - std::log10(p));
    sum_dl += dl;
    sum_dl2 += dl * dl;
    const double r = std::max(d / p, p / d);
    o.delta1 += r < 1.25;
    o.delta2 += r < 1.25 * 1.25;
    o.delta3 += r < 1.25 * 1.25 * 1.25;
  }
  o.abs_rel /= n;
  o.sq_rel /= n;
  o.rmse = std::sqrt(o.rmse / n);
  o.rmse_log = std::sqrt(o.rmse_log / n);
  o.log10 /= n;
  o.silog = sum_dl2 / n - (sum_dl / n) * (sum_dl / n);
  o.delta1 /= n;
  o.delta2 /= n;
  o.delta3 /= n;
  return o;
}

// |a - b| <= tol * max(1, |b|).
inline bool close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

}  // namespace wdtest
