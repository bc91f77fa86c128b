#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wavedepth/autodiff.hpp"
#include "wavedepth/ops.hpp"
#include "wavedepth/wavelet.hpp"

namespace wavedepth {

enum class Mode { kTrain, kEval };

// conv3x3 (C -> C) -> batchnorm -> relu, applied to one subband.
struct SubbandOperator {
  Parameter weight;    // (C, C, 3, 3)
  Parameter bias;      // (1, C, 1, 1)
  Parameter bn_scale;  // (1, C, 1, 1)
  Parameter bn_shift;  // (1, C, 1, 1)
  ops::BatchNormState bn;
};

// Gated wavelet rectification: analysis, per-subband enhancement, a global
// scalar gate per subband, synthesis and residual addition.
struct GwtParams {
  std::size_t channels = 0;
  std::array<SubbandOperator, 4> operators;  // indexed by Band
  std::array<Parameter, 4> gates;            // shape (1, 1, 1, 1)
  // Replaces every subband operator with the identity. Verification only.
  bool bypass = false;

  SubbandOperator& op(Band b) { return operators[static_cast<int>(b)]; }
  Parameter& gate(Band b) { return gates[static_cast<int>(b)]; }
  double gate_value(Band b) const {
    return gates[static_cast<int>(b)].value[0];
  }

  std::vector<Parameter*> parameters();
  std::vector<std::pair<std::string, ops::BatchNormState*>> bn_states();
};

// Gates start at 1. Kernels ~ U(-b, b) with b = 1/sqrt(9 C); biases 0;
// batchnorm scale 1, shift 0.
GwtParams gwt_init(std::size_t channels, std::uint64_t seed,
                   const std::string& prefix = "gwt");

// The rectified feature: idwt2 of the gated, enhanced subbands.
Var gwt_rectify(Tape& tape, Var x, GwtParams& p, Mode mode);

// x + gwt_rectify(x).
Var gwt_forward(Tape& tape, Var x, GwtParams& p, Mode mode);
Tensor gwt_forward(const Tensor& x, GwtParams& p, Mode mode);

struct GateEffect {
  double before = 0.0;
  double after = 0.0;
};

// Energy of band `band` in dwt2 of the rectified feature, before and after
// multiplying that band's gate by `factor`. Operates on a copy of `p`.
GateEffect gate_effect(const Tensor& x, const GwtParams& p, Band band,
                       double factor, Mode mode = Mode::kEval);

}  // namespace wavedepth
