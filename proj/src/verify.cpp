#include "wavedepth/verify.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>

#include "wavedepth/error.hpp"
#include "wavedepth/format.hpp"
#include "wavedepth/gwt.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/losses.hpp"
#include "wavedepth/metrics.hpp"
#include "wavedepth/model.hpp"
#include "wavedepth/ops.hpp"
#include "wavedepth/random.hpp"
#include "wavedepth/reconstruct.hpp"
#include "wavedepth/spectral.hpp"
#include "wavedepth/synthdata.hpp"
#include "wavedepth/wavelet.hpp"

namespace wavedepth {

CheckReport check_parameters(const std::function<Var(Tape&)>& build,
                             std::span<Parameter* const> params, double tol,
                             GradCheckOptions options) {
  CheckReport report;
  GradientMap grads;
  {
    Tape tape;
    Var root = build(tape);
    if (!std::isfinite(root.value().item())) {
      report.failure = "non-finite forward value at the unperturbed point";
      return report;
    }
    tape.backward(root);
    grads = tape.parameter_gradients();
  }
  auto value_at = [&]() {
    Tape tape(false);
    return build(tape).value().item();
  };
  bool seen = false;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.trainable) continue;
    auto it = grads.find(p.name);
    const Tensor analytic =
        it != grads.end() ? it->second : Tensor(p.value.shape());
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + options.step;
      const double up = value_at();
      p.value[i] = orig - options.step;
      const double down = value_at();
      p.value[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.failure = "non-finite forward value perturbing " + p.name +
                         "[" + std::to_string(i) + "]";
        report.worst_input = k;
        report.worst_index = i;
        return report;
      }
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[i];
      const double rel =
          std::abs(a - numeric) /
          std::max({std::abs(a), std::abs(numeric), options.floor});
      if (!seen || rel > report.max_rel_error) {
        seen = true;
        report.max_rel_error = rel;
        report.worst_input = k;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

namespace {

// Magnitudes in [0.1, 1] with random sign: no element near relu/abs kinks.
Tensor signed_away_from_zero(Rng& rng, Shape s) {
  Tensor t(s);
  for (double& v : t.values()) {
    const double m = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

Tensor normal_tensor(Rng& rng, Shape s, double sd = 1.0) {
  Tensor t(s);
  for (double& v : t.values()) v = sd * rng.normal();
  return t;
}

// Contracts a tensor-valued output with a fixed random weight so every
// output element contributes to the checked scalar.
Var contract(Var out, const Tensor& weight) {
  if (out.value().is_scalar()) return ops::scale(out, weight[0]);
  return ops::sum(ops::mul(out, out.tape()->constant(weight)));
}

struct Instance {
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, std::span<const Var>)> output;
};

using InstanceMaker = std::function<Instance(Rng&, std::size_t)>;

struct OpCase {
  OpKind kind;
  InstanceMaker make;
};

std::vector<OpCase> op_cases() {
  using Vs = std::span<const Var>;
  std::vector<OpCase> cases;
  auto binary = [](OpKind kind, Shape a, Shape b) {
    return OpCase{kind, [kind, a, b](Rng& rng, std::size_t) {
                    Instance in;
                    in.inputs = {normal_tensor(rng, a), normal_tensor(rng, b)};
                    in.output = [kind](Tape&, Vs v) {
                      return ops::forward_op(kind, v, {});
                    };
                    return in;
                  }};
  };
  auto unary = [](OpKind kind, std::function<Tensor(Rng&)> draw) {
    return OpCase{kind, [kind, draw](Rng& rng, std::size_t) {
                    Instance in;
                    in.inputs = {draw(rng)};
                    in.output = [kind](Tape&, Vs v) {
                      return ops::forward_op(kind, v, {});
                    };
                    return in;
                  }};
  };
  const Shape s4(2, 3, 4, 5);
  auto normal = [s4](Rng& r) { return normal_tensor(r, s4); };
  auto away = [s4](Rng& r) { return signed_away_from_zero(r, s4); };
  auto positive = [s4](Rng& r) { return r.uniform_tensor(s4, 0.2, 2.0); };

  cases.push_back(binary(OpKind::kAdd, s4, Shape(1, 3, 1, 5)));
  cases.push_back(binary(OpKind::kSub, s4, Shape(2, 1, 4, 1)));
  cases.push_back(binary(OpKind::kMul, s4, Shape(1, 1, 4, 5)));
  cases.push_back({OpKind::kScale, [s4](Rng& rng, std::size_t) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, s4)};
                     const double s = rng.uniform(-2.0, 2.0);
                     in.output = [s](Tape&, Vs v) { return ops::scale(v[0], s); };
                     return in;
                   }});
  cases.push_back(binary(OpKind::kMatMul, Shape(2, 2, 3, 4), Shape(1, 2, 4, 5)));
  cases.push_back({OpKind::kConv3x3, [](Rng& rng, std::size_t) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, Shape(2, 3, 5, 6)),
                                  normal_tensor(rng, Shape(4, 3, 3, 3), 0.3),
                                  normal_tensor(rng, Shape(1, 4, 1, 1))};
                     in.output = [](Tape&, Vs v) {
                       return ops::conv3x3(v[0], v[1], v[2]);
                     };
                     return in;
                   }});
  cases.push_back(unary(OpKind::kRelu, away));
  cases.push_back(unary(OpKind::kSoftplus, [s4](Rng& r) {
    return normal_tensor(r, s4, 2.0);
  }));
  cases.push_back(unary(OpKind::kLog, positive));
  cases.push_back(unary(OpKind::kAbs, away));
  cases.push_back(unary(OpKind::kMean, normal));
  cases.push_back(unary(OpKind::kSum, normal));
  cases.push_back(unary(OpKind::kSqrt, positive));
  cases.push_back({OpKind::kLayerNorm, [](Rng& rng, std::size_t) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, Shape(2, 1, 3, 6)),
                                  rng.uniform_tensor(Shape(1, 1, 1, 6), 0.5, 1.5),
                                  normal_tensor(rng, Shape(1, 1, 1, 6))};
                     in.output = [](Tape&, Vs v) {
                       return ops::layer_norm(v[0], v[1], v[2]);
                     };
                     return in;
                   }});
  // Even instances use batch statistics, odd ones the running statistics.
  cases.push_back({OpKind::kBatchNorm, [](Rng& rng, std::size_t i) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, Shape(3, 2, 3, 4)),
                                  rng.uniform_tensor(Shape(1, 2, 1, 1), 0.5, 1.5),
                                  normal_tensor(rng, Shape(1, 2, 1, 1))};
                     auto state = std::make_shared<ops::BatchNormState>();
                     state->running_mean = normal_tensor(rng, Shape(1, 2, 1, 1));
                     state->running_var =
                         rng.uniform_tensor(Shape(1, 2, 1, 1), 0.5, 2.0);
                     const bool train = i % 2 == 0;
                     in.output = [state, train](Tape&, Vs v) {
                       return ops::batch_norm(v[0], v[1], v[2], *state, train);
                     };
                     return in;
                   }});
  cases.push_back(unary(OpKind::kSoftmax, [](Rng& r) {
    return normal_tensor(r, Shape(2, 1, 3, 5));
  }));
  cases.push_back(unary(OpKind::kDiffX, normal));
  cases.push_back(unary(OpKind::kDiffY, normal));
  cases.push_back(unary(OpKind::kGrayscale, [](Rng& r) {
    return normal_tensor(r, Shape(2, 3, 4, 5));
  }));
  // Bands cycle per instance; odd extents exercise the trailing pad.
  cases.push_back({OpKind::kDwt2Band, [](Rng& rng, std::size_t i) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, Shape(2, 2, 5, 6))};
                     const Band band = kAllBands[i % 4];
                     in.output = [band](Tape&, Vs v) {
                       return ops::dwt2_band(v[0], band);
                     };
                     return in;
                   }});
  cases.push_back({OpKind::kIdwt2, [](Rng& rng, std::size_t i) {
                     Instance in;
                     const Shape b(2, 2, 3, 3);
                     for (int k = 0; k < 4; ++k) {
                       in.inputs.push_back(normal_tensor(rng, b));
                     }
                     const std::size_t h = i % 2 == 0 ? 6 : 5;
                     in.output = [h](Tape&, Vs v) {
                       return ops::idwt2(v[0], v[1], v[2], v[3], h, 5);
                     };
                     return in;
                   }});
  cases.push_back(binary(OpKind::kGateScale, s4, Shape(1, 1, 1, 1)));
  cases.push_back({OpKind::kReshape, [s4](Rng& rng, std::size_t) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, s4)};
                     in.output = [](Tape&, Vs v) {
                       return ops::reshape(v[0], Shape(2, 1, 12, 5));
                     };
                     return in;
                   }});
  cases.push_back({OpKind::kPermute, [s4](Rng& rng, std::size_t i) {
                     static const std::array<std::array<std::size_t, 4>, 4>
                         perms{{{0, 2, 1, 3}, {0, 1, 3, 2}, {3, 2, 1, 0},
                                {1, 3, 0, 2}}};
                     Instance in;
                     in.inputs = {normal_tensor(rng, s4)};
                     const auto perm = perms[i % perms.size()];
                     in.output = [perm](Tape&, Vs v) {
                       return ops::permute(v[0], perm);
                     };
                     return in;
                   }});
  cases.push_back({OpKind::kPatchify, [](Rng& rng, std::size_t) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, Shape(2, 3, 8, 8))};
                     in.output = [](Tape&, Vs v) {
                       return ops::patchify(v[0], 4);
                     };
                     return in;
                   }});
  cases.push_back(unary(OpKind::kUpsample2x, [](Rng& r) {
    return normal_tensor(r, Shape(2, 2, 3, 4));
  }));
  cases.push_back({OpKind::kGather, [](Rng& rng, std::size_t) {
                     Instance in;
                     in.inputs = {normal_tensor(rng, Shape(1, 2, 2, 3))};
                     std::vector<std::size_t> idx;
                     for (int k = 0; k < 8; ++k) idx.push_back(rng.index(12));
                     in.output = [idx](Tape&, Vs v) {
                       return ops::gather(v[0], idx);
                     };
                     return in;
                   }});
  return cases;
}

struct Outcome {
  bool passed = false;
  double rel = 0.0;
  std::string detail;
};

Outcome describe(const CheckReport& r, const std::string& where) {
  Outcome o;
  o.passed = r.passed;
  o.rel = r.max_rel_error;
  if (!r.failure.empty()) {
    o.detail = where + ": " + r.failure;
  } else if (!r.passed) {
    o.detail = format("%s: rel %.3g at input %zu[%zu] (tape %.9g, numeric %.9g)",
                      where.c_str(), r.max_rel_error, r.worst_input,
                      r.worst_index, r.analytic, r.numeric);
  }
  return o;
}

Outcome run_op_instance(const OpCase& c, Rng& rng, std::size_t i, double tol) {
  Instance in = c.make(rng, i);
  Tensor weight;
  {
    Tape probe(false);
    std::vector<Var> vars;
    for (const Tensor& t : in.inputs) vars.push_back(probe.constant(t));
    weight = normal_tensor(rng, in.output(probe, vars).shape());
  }
  auto build = [&](Tape& tape, std::span<const Var> v) {
    return contract(in.output(tape, v), weight);
  };
  return describe(grad_check(build, in.inputs, tol),
                  format("instance %zu", i));
}

// The composed module: analysis, subband operators with batch statistics,
// gates, synthesis and residual. Checked against the input feature and
// against every trainable weight of the module.
Outcome run_gwt_instance(Rng& rng, std::size_t i, double tol) {
  const std::size_t channels = 2;
  GwtParams p = gwt_init(channels, rng.next(), "gwt");
  for (Parameter& g : p.gates) g.value[0] = rng.uniform(0.5, 1.5);
  for (Parameter* q : p.parameters()) {
    if (q->name.find("bias") != std::string::npos ||
        q->name.find("bn_shift") != std::string::npos) {
      for (double& v : q->value.values()) v = 0.1 * rng.normal();
    }
  }
  const Tensor x = normal_tensor(rng, Shape(2, channels, 6, 6));
  const Tensor weight = normal_tensor(rng, x.shape());

  auto wrt_input = [&](Tape& tape, std::span<const Var> v) {
    return contract(gwt_forward(tape, v[0], p, Mode::kTrain), weight);
  };
  Outcome o = describe(grad_check(wrt_input, {x}, tol),
                       format("instance %zu input", i));
  if (!o.passed) return o;

  auto wrt_params = [&](Tape& tape) {
    return contract(gwt_forward(tape, tape.constant(x), p, Mode::kTrain),
                    weight);
  };
  const std::vector<Parameter*> params = p.parameters();
  Outcome q = describe(check_parameters(wrt_params, params, tol),
                       format("instance %zu parameters", i));
  q.rel = std::max(q.rel, o.rel);
  return q;
}

// Smallest |argument| of any absolute value evaluated by the loss.
double kink_margin(const Tensor& pred, const Tensor& gt, const ValidMask& m) {
  const Shape& s = pred.shape();
  double margin = INFINITY;
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t y = 0; y < s.h(); ++y) {
      for (std::size_t x = 0; x < s.w(); ++x) {
        const std::size_t i = pred.offset(n, 0, y, x);
        if (!m[i]) continue;
        if (x + 1 < s.w() && m[i + 1]) {
          const double dp = pred[i + 1] - pred[i];
          margin = std::min({margin, std::abs(dp),
                             std::abs(dp - (gt[i + 1] - gt[i]))});
        }
        if (y + 1 < s.h() && m[i + s.w()]) {
          const double dp = pred[i + s.w()] - pred[i];
          margin = std::min({margin, std::abs(dp),
                             std::abs(dp - (gt[i + s.w()] - gt[i]))});
        }
      }
    }
  }
  return margin;
}

// Total loss with hole-punched ground truth. The numeric derivative only
// reflects the tape gradient when the smoothness weights do not depend on
// the prediction, so the image-weight mode is checked.
Outcome run_loss_instance(Rng& rng, std::size_t i, double tol,
                          ScaleLossForm form) {
  const Shape s(2, 1, 6, 7);
  const double d_min = 0.5, d_max = 10.0;
  const GradCheckOptions opt;
  Tensor gt, pred, image;
  std::optional<ValidMask> mask;
  // Redraw until every |.| argument is clear of its kink by ten steps.
  for (int attempt = 0;; ++attempt) {
    gt = rng.uniform_tensor(s, 1.0, 5.0);
    for (double& v : gt.values()) {
      const double u = rng.uniform();
      if (u < 0.1) v = 0.0;
      else if (u < 0.15) v = 20.0;
    }
    pred = gt;
    for (std::size_t k = 0; k < pred.numel(); ++k) {
      const double base = gt[k] > 0.0 && gt[k] <= d_max ? gt[k] : 2.0;
      pred[k] = base * std::exp(0.3 * rng.normal());
    }
    image = rng.uniform_tensor(Shape(2, 3, 6, 7), 0.0, 1.0);
    mask = valid_mask(gt, d_min, d_max);
    if (kink_margin(pred, gt, *mask) > 10.0 * opt.step) break;
    if (attempt > 100) {
      return {false, 0.0, "could not draw a kink-free instance"};
    }
  }
  LossWeights w;
  w.scale = rng.uniform(0.2, 0.8);
  w.grad = rng.uniform(0.05, 0.5);
  w.smooth = rng.uniform(0.05, 0.5);
  auto build = [&](Tape&, std::span<const Var> v) {
    return total_loss(v[0], gt, image, *mask, w, SmoothnessMode::kImageWeights,
                      true, form)
        .total;
  };
  return describe(grad_check(build, {pred}, tol, opt),
                  format("instance %zu", i));
}

void tally(SuiteEntry& e, const Outcome& o) {
  ++e.instances;
  if (o.passed) ++e.passed;
  e.worst_rel_error = std::max(e.worst_rel_error, o.rel);
  if (!o.passed && e.detail.empty()) e.detail = o.detail;
}

}  // namespace

std::vector<std::string> gradient_suite_names() {
  std::vector<std::string> names;
  for (const OpCase& c : op_cases()) names.emplace_back(op_name(c.kind));
  names.emplace_back("gwt_module");
  names.emplace_back("total_loss");
  names.emplace_back("total_loss_sqrt_variance");
  return names;
}

std::vector<SuiteEntry> gradient_suite(std::size_t instances, double tol,
                                       std::uint64_t seed) {
  std::vector<SuiteEntry> out;
  std::uint64_t stream = 0;
  for (const OpCase& c : op_cases()) {
    SuiteEntry e;
    e.name = op_name(c.kind);
    Rng rng(mix_seed(seed ^ mix_seed(++stream)));
    for (std::size_t i = 0; i < instances; ++i) {
      tally(e, run_op_instance(c, rng, i, tol));
    }
    out.push_back(std::move(e));
  }
  {
    SuiteEntry e;
    e.name = "gwt_module";
    Rng rng(mix_seed(seed ^ mix_seed(++stream)));
    for (std::size_t i = 0; i < instances; ++i) {
      tally(e, run_gwt_instance(rng, i, tol));
    }
    out.push_back(std::move(e));
  }
  for (ScaleLossForm form : {ScaleLossForm::kLiteral,
                             ScaleLossForm::kSqrtVariance}) {
    SuiteEntry e;
    e.name = form == ScaleLossForm::kLiteral ? "total_loss"
                                             : "total_loss_sqrt_variance";
    Rng rng(mix_seed(seed ^ mix_seed(++stream)));
    for (std::size_t i = 0; i < instances; ++i) {
      tally(e, run_loss_instance(rng, i, tol, form));
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<SuiteEntry> model_gradient_checks(double tol, std::uint64_t seed) {
  EncoderConfig enc;
  enc.blocks = 2;
  enc.frozen = 0;
  enc.dim = 8;
  enc.heads = 2;
  enc.side = 16;
  SceneParams scene;
  scene.side = enc.side;
  scene.seed = seed;
  const Dataset data = make_dataset(scene, 2, 1, seed);
  const std::vector<std::size_t> idx{0, 1};
  const Batch batch = make_batch(data.train, idx);
  TrainConfig cfg;

  struct Probe {
    Strategy strategy;
    std::string name;
  };
  const std::vector<Probe> probes{
      {Strategy::kFull, "encoder.patch_embed.weight"},
      {Strategy::kFull, "encoder.pos"},
      {Strategy::kFull, "encoder.block1.attn.q.weight"},
      {Strategy::kFull, "encoder.block2.attn.out.bias"},
      {Strategy::kFull, "encoder.block1.mlp.fc1.weight"},
      {Strategy::kFull, "encoder.block2.ln2.gamma"},
      {Strategy::kLora, "encoder.block2.attn.v.lora_a"},
      {Strategy::kLora, "encoder.block1.mlp.fc2.lora_b"},
      {Strategy::kFull, "decoder.conv1.weight"},
      {Strategy::kFull, "decoder.head.bias"},
      {Strategy::kFull, "decoder.gwt.hh.conv.weight"},
      {Strategy::kFull, "decoder.gwt.gate.lh"},
  };
  std::vector<SuiteEntry> out;
  for (const Probe& probe : probes) {
    AdapterConfig adapter;
    adapter.strategy = probe.strategy;
    Model model = init_model(enc, adapter, true, seed);
    // Non-zero B so that the A factor receives a gradient.
    for (auto& [name, p] : model.weights) {
      if (name.ends_with(".lora_b")) {
        Rng rng(mix_seed(seed ^ std::hash<std::string>{}(name)));
        for (double& v : p.value.values()) v = 0.1 * rng.normal();
      }
    }
    SuiteEntry e;
    e.name = probe.name;
    tally(e, describe(parameter_grad_check(model, batch, cfg,
                                           data.scene.d_min, data.scene.d_max,
                                           probe.name, tol),
                      probe.name));
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

SelfTestResult check(const std::string& name, bool ok, std::string detail) {
  return {name, ok, std::move(detail)};
}

SelfTestResult test_wavelet(Rng& rng) {
  double pr = 0.0, parseval = 0.0;
  for (int k = 0; k < 10; ++k) {
    const Shape s(1 + rng.index(3), 1 + rng.index(3), 2 + 2 * rng.index(8),
                  2 + 2 * rng.index(8));
    const Tensor x = normal_tensor(rng, s);
    const SubbandSet b = dwt2(x);
    pr = std::max(pr, max_abs_diff(idwt2(b), x));
    parseval = std::max(parseval, std::abs(b.energy() - x.sum_squares()) /
                                      x.sum_squares());
  }
  return check("wavelet", pr <= 1e-12 && parseval <= 1e-9,
               format("reconstruction %.2e, parseval %.2e", pr, parseval));
}

SelfTestResult test_gradients(std::uint64_t seed) {
  std::size_t failed = 0;
  std::string first;
  for (const SuiteEntry& e : gradient_suite(2, 1e-4, seed)) {
    if (!e.ok()) {
      ++failed;
      if (first.empty()) first = e.name + " " + e.detail;
    }
  }
  return check("gradients", failed == 0,
               failed == 0 ? "all entries within 1e-4"
                           : format("%zu failing, first: %s", failed,
                                    first.c_str()));
}

SelfTestResult test_losses(Rng& rng) {
  const Tensor gt = rng.uniform_tensor(Shape(2, 1, 8, 8), 1.0, 4.0);
  const ValidMask m = valid_mask(gt, 0.5, 5.0);
  Tensor pred = gt;
  const double s = 1.5;
  pred *= s;
  const double lambda = 0.5;
  const double ls = scale_invariant_loss(pred, gt, m, lambda);
  const double expect =
      std::abs(std::log(s)) - lambda * std::log(s) * std::log(s);
  const double lg = gradient_matching_loss(gt, gt, m);
  const bool ok = std::abs(ls - expect) <= 1e-12 && lg == 0.0;
  return check("losses", ok,
               format("scaled prediction %.3g (expected %.3g), identity "
                      "gradient loss %.3g",
                      ls, expect, lg));
}

SelfTestResult test_metrics(Rng& rng) {
  const Tensor gt = rng.uniform_tensor(Shape(1, 1, 8, 8), 1.0, 4.0);
  const ValidMask m = valid_mask(gt, 0.5, 5.0);
  const MetricsReport same = compute_metrics(gt, gt, m);
  Tensor scaled = gt;
  scaled *= 1.2;
  const MetricsReport r = compute_metrics(scaled, gt, m);
  const bool ok = same.abs_rel == 0.0 && same.delta1 == 1.0 &&
                  std::abs(r.abs_rel - 0.2) <= 1e-12 && std::abs(r.silog) <= 1e-6;
  return check("metrics", ok,
               format("scaled abs_rel %.6g, silog %.3g", r.abs_rel, r.silog));
}

SelfTestResult test_gwt(Rng& rng) {
  const Tensor x = normal_tensor(rng, Shape(2, 3, 6, 6));
  GwtParams p = gwt_init(3, rng.next());
  for (Parameter& g : p.gates) g.value[0] = 0.0;
  const double zero = max_abs_diff(gwt_forward(x, p, Mode::kTrain), x);
  GwtParams q = gwt_init(3, rng.next());
  q.bypass = true;
  Tensor twice = x;
  twice *= 2.0;
  const double doubling = max_abs_diff(gwt_forward(x, q, Mode::kTrain), twice);
  return check("gwt", zero <= 1e-12 && doubling <= 1e-12,
               format("zero gates %.2e, bypass %.2e", zero, doubling));
}

SelfTestResult test_io(Rng& rng) {
  Tensor depth = rng.uniform_tensor(Shape(1, 1, 5, 7), 0.1, 9.0);
  for (double& v : depth.values()) v = static_cast<float>(v);
  Tensor rgb = rng.uniform_tensor(Shape(1, 3, 4, 6), 0.0, 1.0);
  for (double& v : rgb.values()) v = io::quantize_u8(v);
  const bool pfm = io::parse_pfm(io::encode_pfm(depth)).identical(depth);
  const bool ppm = io::parse_ppm(io::encode_ppm(rgb)).identical(rgb);
  bool truncated = false;
  try {
    const std::string bytes = io::encode_pfm(depth);
    io::parse_pfm(std::string_view(bytes).substr(0, bytes.size() - 3));
  } catch (const ParseError&) {
    truncated = true;
  }
  return check("io", pfm && ppm && truncated,
               format("pfm %s, ppm %s, truncation %s", pfm ? "ok" : "differs",
                      ppm ? "ok" : "differs",
                      truncated ? "rejected" : "accepted"));
}

SelfTestResult test_spectral(std::uint64_t seed) {
  const SpectrumFit fit = analyse_image(power_law_field(512, 2.0, seed));
  return check("spectral", std::abs(fit.alpha - 2.0) <= 0.1 && fit.r2 >= 0.99,
               format("beta 2 field: alpha %.3f, r2 %.4f", fit.alpha, fit.r2));
}

SelfTestResult test_reconstruct(Rng& rng) {
  const CameraIntrinsics k{40.0, 42.0, 7.5, 6.0, 16, 12};
  const Tensor depth = rng.uniform_tensor(Shape(1, 1, 12, 16), 0.5, 5.0);
  const ValidMask m = valid_mask(depth, 0.2, 8.0);
  const PointCloud pc = backproject(depth, m, k);
  double err = 0.0;
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    const auto uv = reproject(pc.points[i], k);
    err = std::max({err, std::abs(uv[0] - static_cast<double>(pc.pixels[i][0])),
                    std::abs(uv[1] - static_cast<double>(pc.pixels[i][1]))});
  }
  const PointCloud back = parse_ply(encode_ply(pc));
  const bool ply = back.points.size() == pc.points.size();
  return check("reconstruct", err <= 1e-9 && ply,
               format("pixel round trip %.2e over %zu points", err,
                      pc.points.size()));
}

SelfTestResult test_adaptation() {
  EncoderConfig enc;
  enc.blocks = 2;
  enc.frozen = 1;
  enc.dim = 8;
  enc.heads = 2;
  enc.side = 16;
  AdapterConfig hybrid;
  Model m = init_model(enc, hybrid, true, 1);
  const bool hybrid_ok = !m.param("encoder.block1.attn.q.weight").trainable &&
                         m.param("encoder.block2.attn.q.weight").trainable;
  AdapterConfig lora;
  lora.strategy = Strategy::kLora;
  apply_strategy(m, lora, enc.frozen);
  bool lora_ok = m.has_param("encoder.block1.attn.q.lora_a");
  for (const auto& [name, p] : m.weights) {
    const bool factor = name.ends_with(".lora_a") || name.ends_with(".lora_b");
    if (name.starts_with("encoder.") && p.trainable != factor) lora_ok = false;
  }
  return check("adaptation", hybrid_ok && lora_ok,
               format("hybrid freeze %s, lora freeze %s",
                      hybrid_ok ? "ok" : "wrong", lora_ok ? "ok" : "wrong"));
}

}  // namespace

std::vector<SelfTestResult> self_test(std::uint64_t seed) {
  std::vector<SelfTestResult> out;
  Rng rng(mix_seed(seed));
  auto guarded = [&](const std::string& name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("threw: ") + e.what()});
    }
  };
  guarded("wavelet", [&] { return test_wavelet(rng); });
  guarded("gradients", [&] { return test_gradients(seed); });
  guarded("losses", [&] { return test_losses(rng); });
  guarded("metrics", [&] { return test_metrics(rng); });
  guarded("gwt", [&] { return test_gwt(rng); });
  guarded("io", [&] { return test_io(rng); });
  guarded("spectral", [&] { return test_spectral(seed); });
  guarded("reconstruct", [&] { return test_reconstruct(rng); });
  guarded("adaptation", [&] { return test_adaptation(); });
  return out;
}

}  // namespace wavedepth
