#include "wavedepth/gwt.hpp"

#include <cmath>

#include "wavedepth/error.hpp"
#include "wavedepth/random.hpp"

namespace wavedepth {

std::vector<Parameter*> GwtParams::parameters() {
  std::vector<Parameter*> out;
  for (SubbandOperator& o : operators) {
    out.insert(out.end(), {&o.weight, &o.bias, &o.bn_scale, &o.bn_shift});
  }
  for (Parameter& g : gates) out.push_back(&g);
  return out;
}

std::vector<std::pair<std::string, ops::BatchNormState*>>
GwtParams::bn_states() {
  std::vector<std::pair<std::string, ops::BatchNormState*>> out;
  for (Band b : kAllBands) {
    // Named after the operator's batchnorm scale, minus the leaf.
    std::string base = op(b).bn_scale.name;
    base = base.substr(0, base.rfind('.'));
    out.emplace_back(base, &op(b).bn);
  }
  return out;
}

GwtParams gwt_init(std::size_t channels, std::uint64_t seed,
                   const std::string& prefix) {
  if (channels == 0) throw ContractError("gwt_init: channels must be >= 1");
  GwtParams p;
  p.channels = channels;
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(9.0 * static_cast<double>(channels));
  const Shape vec(1, channels, 1, 1);
  for (Band b : kAllBands) {
    const std::string base = prefix + "." + band_name(b);
    SubbandOperator& o = p.op(b);
    o.weight = {base + ".conv.weight",
                rng.uniform_tensor(Shape(channels, channels, 3, 3), -bound, bound),
                true};
    o.bias = {base + ".conv.bias", Tensor(vec), true};
    o.bn_scale = {base + ".bn.scale", Tensor(vec, 1.0), true};
    o.bn_shift = {base + ".bn.shift", Tensor(vec), true};
    o.bn.running_mean = Tensor(vec);
    o.bn.running_var = Tensor(vec, 1.0);
    p.gate(b) = {prefix + ".gate." + band_name(b), Tensor::scalar(1.0), true};
  }
  return p;
}

Var gwt_rectify(Tape& tape, Var x, GwtParams& p, Mode mode) {
  const Shape& s = x.shape();
  if (s.c() != p.channels) {
    throw ContractError("gwt_forward: input has " + std::to_string(s.c()) +
                        " channels, module expects " +
                        std::to_string(p.channels));
  }
  std::array<Var, 4> gated;
  for (Band b : kAllBands) {
    Var band = ops::dwt2_band(x, b);
    if (!p.bypass) {
      SubbandOperator& o = p.op(b);
      band = ops::conv3x3(band, tape.parameter(o.weight),
                          tape.parameter(o.bias));
      band = ops::batch_norm(band, tape.parameter(o.bn_scale),
                             tape.parameter(o.bn_shift), o.bn,
                             mode == Mode::kTrain);
      band = ops::relu(band);
    }
    gated[static_cast<int>(b)] =
        ops::gate_scale(band, tape.parameter(p.gate(b)));
  }
  return ops::idwt2(gated[0], gated[1], gated[2], gated[3], s.h(), s.w());
}

Var gwt_forward(Tape& tape, Var x, GwtParams& p, Mode mode) {
  return ops::add(x, gwt_rectify(tape, x, p, mode));
}

Tensor gwt_forward(const Tensor& x, GwtParams& p, Mode mode) {
  Tape tape(false);
  return gwt_forward(tape, tape.constant(x), p, mode).value();
}

GateEffect gate_effect(const Tensor& x, const GwtParams& p, Band band,
                       double factor, Mode mode) {
  if (!(factor > 0.0)) {
    throw ContractError("gate_effect: factor must be positive");
  }
  auto band_energy = [&](const GwtParams& params) {
    GwtParams copy = params;
    Tape tape(false);
    Tensor rectified = gwt_rectify(tape, tape.constant(x), copy, mode).value();
    return dwt2(rectified).band(band).sum_squares();
  };
  GateEffect out;
  out.before = band_energy(p);
  GwtParams scaled = p;
  scaled.gate(band).value *= factor;
  out.after = band_energy(scaled);
  return out;
}

}  // namespace wavedepth
