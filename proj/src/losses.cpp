#include "wavedepth/losses.hpp"

#include <cmath>

#include "wavedepth/error.hpp"
#include "wavedepth/ops.hpp"

namespace wavedepth {
namespace {

void check_depth(const Tensor& t, const ValidMask& mask, const char* op,
                 const char* what) {
  if (t.shape() != mask.shape) {
    throw ShapeError(std::string(op) + ": " + what + " shape " +
                     t.shape().str() + " does not match mask " +
                     mask.shape.str());
  }
}

void check_pairs(const ValidPairs& pairs, const char* op) {
  if (pairs.x.empty() && pairs.y.empty()) {
    throw UnusableFrameError(std::string(op) +
                             ": no horizontally or vertically adjacent valid "
                             "pixel pairs");
  }
}

// Sum over the valid pairs of one axis of |diff(pred) (- diff(gt))|, scaled
// by per-pair weights, divided by the pair count. Zero when no pairs.
Var pair_term(Tape& tape, Var diff, const std::vector<std::size_t>& pairs,
              const Tensor* weights) {
  if (pairs.empty()) return tape.constant(Tensor::scalar(0.0));
  Var picked = ops::abs(ops::gather(diff, pairs));
  if (weights != nullptr) picked = ops::mul(picked, tape.constant(*weights));
  return ops::scale(ops::sum(picked), 1.0 / static_cast<double>(pairs.size()));
}

// Mean |first difference| of `field` per batch entry over its valid pairs.
std::vector<double> mean_abs_per_sample(const Tensor& diff,
                                        const std::vector<std::size_t>& pairs,
                                        const std::vector<std::size_t>& sample,
                                        std::size_t batch) {
  std::vector<double> sum(batch, 0.0);
  std::vector<std::size_t> count(batch, 0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    sum[sample[i]] += std::abs(diff[pairs[i]]);
    ++count[sample[i]];
  }
  for (std::size_t b = 0; b < batch; ++b) {
    sum[b] = count[b] > 0 ? sum[b] / static_cast<double>(count[b]) : 0.0;
  }
  return sum;
}

Tensor pair_weights(const std::vector<double>& per_sample_mean,
                    const std::vector<std::size_t>& sample) {
  Tensor w(Shape(1, 1, 1, sample.size()));
  for (std::size_t i = 0; i < sample.size(); ++i) {
    w[i] = std::exp(-per_sample_mean[sample[i]]);
  }
  return w;
}

template <typename F>
double evaluate(const Tensor& pred, F f) {
  Tape tape(false);
  return f(tape.constant(pred)).value().item();
}

}  // namespace

std::size_t ValidMask::count() const {
  std::size_t n = 0;
  for (std::uint8_t v : valid) n += v;
  return n;
}

std::vector<std::size_t> ValidMask::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) out.push_back(i);
  }
  return out;
}

ValidMask valid_mask(const Tensor& gt, double d_min, double d_max) {
  if (!(d_min > 0.0) || !(d_max > d_min)) {
    throw ContractError("valid_mask: require 0 < d_min < d_max, got [" +
                        std::to_string(d_min) + ", " + std::to_string(d_max) +
                        "]");
  }
  ValidMask m;
  m.shape = gt.shape();
  m.d_min = d_min;
  m.d_max = d_max;
  m.valid.resize(gt.numel());
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const double d = gt[i];
    m.valid[i] = d > 0.0 && d >= d_min && d <= d_max;
  }
  if (m.count() == 0) {
    throw UnusableFrameError("valid_mask: no ground-truth pixel lies in [" +
                             std::to_string(d_min) + ", " +
                             std::to_string(d_max) + "]");
  }
  return m;
}

const char* smoothness_mode_name(SmoothnessMode mode) {
  return mode == SmoothnessMode::kImageWeights ? "image-weights"
                                               : "depth-weights";
}

SmoothnessMode parse_smoothness_mode(const std::string& name) {
  if (name == "image-weights") return SmoothnessMode::kImageWeights;
  if (name == "depth-weights") return SmoothnessMode::kDepthWeights;
  throw ContractError("unknown smoothness mode '" + name +
                      "' (expected image-weights or depth-weights)");
}

const char* scale_loss_form_name(ScaleLossForm form) {
  return form == ScaleLossForm::kLiteral ? "literal" : "sqrt-variance";
}

ScaleLossForm parse_scale_loss_form(const std::string& name) {
  if (name == "literal") return ScaleLossForm::kLiteral;
  if (name == "sqrt-variance") return ScaleLossForm::kSqrtVariance;
  throw ContractError("unknown scale loss form '" + name +
                      "' (expected literal or sqrt-variance)");
}

ValidPairs valid_pairs(const ValidMask& mask) {
  const Shape& s = mask.shape;
  ValidPairs p;
  const std::size_t H = s.h(), W = s.w();
  for (std::size_t n = 0; n < s.n() * s.c(); ++n) {
    const std::size_t base = n * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x + 1 < W; ++x) {
        if (mask[base + y * W + x] && mask[base + y * W + x + 1]) {
          p.x.push_back((n * H + y) * (W - 1) + x);
          p.x_sample.push_back(n / s.c());
        }
      }
    }
    for (std::size_t y = 0; y + 1 < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        if (mask[base + y * W + x] && mask[base + (y + 1) * W + x]) {
          p.y.push_back((n * (H - 1) + y) * W + x);
          p.y_sample.push_back(n / s.c());
        }
      }
    }
  }
  return p;
}

Var scale_invariant_loss(Var pred, const Tensor& gt, const ValidMask& mask,
                         double lambda_s, ScaleLossForm form) {
  check_depth(pred.value(), mask, "scale_invariant_loss", "prediction");
  check_depth(gt, mask, "scale_invariant_loss", "ground truth");
  Tape& tape = *pred.tape();
  const std::vector<std::size_t> idx = mask.indices();
  Tensor log_gt(Shape(1, 1, 1, idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (!(gt[idx[i]] > 0.0)) {
      throw DomainError("scale_invariant_loss: non-positive ground truth");
    }
    log_gt[i] = std::log(gt[idx[i]]);
  }
  Var picked = ops::gather(pred, idx);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (!(picked.value()[i] > 0.0)) {
      throw DomainError(
          "scale_invariant_loss: non-positive prediction at valid pixel " +
          std::to_string(idx[i]));
    }
  }
  Var delta = ops::sub(ops::log(picked), tape.constant(std::move(log_gt)));
  Var mean_sq = ops::mean(ops::mul(delta, delta));
  Var m = ops::mean(delta);
  Var penalty = ops::scale(ops::mul(m, m), lambda_s);
  if (form == ScaleLossForm::kLiteral) {
    return ops::sub(ops::sqrt(mean_sq), penalty);
  }
  return ops::sqrt(ops::sub(mean_sq, penalty));
}

Var gradient_matching_loss(Var pred, const Tensor& gt, const ValidMask& mask) {
  check_depth(pred.value(), mask, "gradient_matching_loss", "prediction");
  check_depth(gt, mask, "gradient_matching_loss", "ground truth");
  Tape& tape = *pred.tape();
  const ValidPairs pairs = valid_pairs(mask);
  check_pairs(pairs, "gradient_matching_loss");
  Var g = tape.constant(gt);
  Var dx = ops::sub(ops::diff_x(pred), ops::diff_x(g));
  Var dy = ops::sub(ops::diff_y(pred), ops::diff_y(g));
  return ops::add(pair_term(tape, dx, pairs.x, nullptr),
                  pair_term(tape, dy, pairs.y, nullptr));
}

Var smoothness_loss(Var pred, const Tensor& image, const ValidMask& mask,
                    SmoothnessMode mode) {
  check_depth(pred.value(), mask, "smoothness_loss", "prediction");
  const Shape& s = mask.shape;
  if (image.shape() != Shape(s.n(), 3, s.h(), s.w())) {
    throw ShapeError("smoothness_loss: image " + image.shape().str() +
                     " is not RGB aligned with " + s.str());
  }
  Tape& tape = *pred.tape();
  const ValidPairs pairs = valid_pairs(mask);
  check_pairs(pairs, "smoothness_loss");

  Var dpx = ops::diff_x(pred);
  Var dpy = ops::diff_y(pred);

  // Weight source, evaluated off-tape so it carries no gradient.
  Tensor src_x, src_y;
  if (mode == SmoothnessMode::kImageWeights) {
    Tape side(false);
    Var gray = ops::grayscale(side.constant(image));
    src_x = ops::diff_x(gray).value();
    src_y = ops::diff_y(gray).value();
  } else {
    src_x = dpx.value();
    src_y = dpy.value();
  }
  const Tensor wx = pair_weights(
      mean_abs_per_sample(src_x, pairs.x, pairs.x_sample, s.n()),
      pairs.x_sample);
  const Tensor wy = pair_weights(
      mean_abs_per_sample(src_y, pairs.y, pairs.y_sample, s.n()),
      pairs.y_sample);
  return ops::add(pair_term(tape, dpx, pairs.x, &wx),
                  pair_term(tape, dpy, pairs.y, &wy));
}

LossBreakdown total_loss(Var pred, const Tensor& gt, const Tensor& image,
                         const ValidMask& mask, const LossWeights& w,
                         SmoothnessMode mode, bool multi_constraint,
                         ScaleLossForm form) {
  LossBreakdown out;
  Var ls = scale_invariant_loss(pred, gt, mask, w.scale, form);
  out.scale = ls.value().item();
  out.total = ls;
  if (multi_constraint) {
    Var lg = gradient_matching_loss(pred, gt, mask);
    Var lsm = smoothness_loss(pred, image, mask, mode);
    out.grad = lg.value().item();
    out.smooth = lsm.value().item();
    out.total = ops::add(ops::add(ls, ops::scale(lg, w.grad)),
                         ops::scale(lsm, w.smooth));
  }
  out.total_value = out.total.value().item();
  return out;
}

double scale_invariant_loss(const Tensor& pred, const Tensor& gt,
                            const ValidMask& mask, double lambda_s,
                            ScaleLossForm form) {
  return evaluate(pred, [&](Var p) {
    return scale_invariant_loss(p, gt, mask, lambda_s, form);
  });
}

double gradient_matching_loss(const Tensor& pred, const Tensor& gt,
                              const ValidMask& mask) {
  return evaluate(pred,
                  [&](Var p) { return gradient_matching_loss(p, gt, mask); });
}

double smoothness_loss(const Tensor& pred, const Tensor& image,
                       const ValidMask& mask, SmoothnessMode mode) {
  return evaluate(pred,
                  [&](Var p) { return smoothness_loss(p, image, mask, mode); });
}

}  // namespace wavedepth
