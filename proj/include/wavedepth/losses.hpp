#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wavedepth/autodiff.hpp"
#include "wavedepth/tensor.hpp"

namespace wavedepth {

// Per-pixel validity of a (N, 1, H, W) ground-truth raster.
struct ValidMask {
  Shape shape;
  std::vector<std::uint8_t> valid;
  double d_min = 0.0;
  double d_max = 0.0;

  bool operator[](std::size_t i) const { return valid[i] != 0; }
  std::size_t count() const;
  std::vector<std::size_t> indices() const;
};

// Valid iff gt > 0 and d_min <= gt <= d_max. Out-of-range pixels are
// excluded, never clamped. Throws UnusableFrameError if nothing is valid.
ValidMask valid_mask(const Tensor& gt, double d_min, double d_max);

struct LossWeights {
  double scale = 0.5;   // lambda_s inside the scale-invariant term
  double grad = 0.1;    // weight of gradient matching
  double smooth = 0.1;  // weight of edge-aware smoothness
};

enum class ScaleLossForm {
  // sqrt(mean(D^2)) - lambda * mean(D)^2
  kLiteral,
  // sqrt(mean(D^2) - lambda * mean(D)^2)
  kSqrtVariance,
};

enum class SmoothnessMode {
  // Weights from mean grayscale gradients of the input image.
  kImageWeights,
  // Weights from mean gradients of the predicted depth.
  kDepthWeights,
};

const char* smoothness_mode_name(SmoothnessMode mode);
SmoothnessMode parse_smoothness_mode(const std::string& name);
const char* scale_loss_form_name(ScaleLossForm form);
ScaleLossForm parse_scale_loss_form(const std::string& name);

// Index pairs (first, second) whose endpoints are both valid, for forward
// differences along x and y. Indices address the difference rasters.
struct ValidPairs {
  std::vector<std::size_t> x;  // into (N, 1, H, W-1)
  std::vector<std::size_t> y;  // into (N, 1, H-1, W)
  std::vector<std::size_t> x_sample;  // batch entry of each x pair
  std::vector<std::size_t> y_sample;
};
ValidPairs valid_pairs(const ValidMask& mask);

// Differentiable losses over a predicted depth Var of shape (N, 1, H, W).
// Only masked-in pixels (or pairs) are read.
Var scale_invariant_loss(Var pred, const Tensor& gt, const ValidMask& mask,
                         double lambda_s,
                         ScaleLossForm form = ScaleLossForm::kLiteral);
Var gradient_matching_loss(Var pred, const Tensor& gt, const ValidMask& mask);
// `image` is RGB (N, 3, H, W). The per-sample weights are detached.
Var smoothness_loss(Var pred, const Tensor& image, const ValidMask& mask,
                    SmoothnessMode mode = SmoothnessMode::kImageWeights);

struct LossBreakdown {
  Var total;
  double scale = 0.0;
  double grad = 0.0;
  double smooth = 0.0;
  double total_value = 0.0;
};

// L_scale + w.grad L_grad + w.smooth L_smooth. With `multi_constraint`
// false only the scale-invariant term is used (grad/smooth reported as 0).
LossBreakdown total_loss(Var pred, const Tensor& gt, const Tensor& image,
                         const ValidMask& mask, const LossWeights& w,
                         SmoothnessMode mode = SmoothnessMode::kImageWeights,
                         bool multi_constraint = true,
                         ScaleLossForm form = ScaleLossForm::kLiteral);

// Value-only conveniences.
double scale_invariant_loss(const Tensor& pred, const Tensor& gt,
                            const ValidMask& mask, double lambda_s,
                            ScaleLossForm form = ScaleLossForm::kLiteral);
double gradient_matching_loss(const Tensor& pred, const Tensor& gt,
                              const ValidMask& mask);
double smoothness_loss(const Tensor& pred, const Tensor& image,
                       const ValidMask& mask,
                       SmoothnessMode mode = SmoothnessMode::kImageWeights);

}  // namespace wavedepth
