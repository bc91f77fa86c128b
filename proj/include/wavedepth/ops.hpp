#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "wavedepth/autodiff.hpp"
#include "wavedepth/tensor.hpp"
#include "wavedepth/wavelet.hpp"

namespace wavedepth::ops {

// Binary arithmetic. Each extent of either operand must equal the output
// extent or be 1 (broadcast); gradients are summed over broadcast extents.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);

// (.., M, K) x (.., K, N) -> (.., M, N); leading extents broadcast.
Var matmul(Var a, Var b);

// Stride 1, zero padding 1. weight (Cout, Cin, 3, 3), bias (1, Cout, 1, 1).
Var conv3x3(Var x, Var weight, Var bias);

Var relu(Var x);
Var softplus(Var x);
Var log(Var x);   // DomainError on non-positive input
Var abs(Var x);   // subgradient 0 at 0
Var sqrt(Var x);  // DomainError on negative input; derivative at 0 taken as 0
Var mean(Var x);  // -> scalar
Var sum(Var x);   // -> scalar

// Normalizes over the last extent; gamma/beta are (1, 1, 1, D).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

struct BatchNormState {
  Tensor running_mean;  // (1, C, 1, 1)
  Tensor running_var;   // (1, C, 1, 1)
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization over (batch, height, width). Training mode uses
// batch statistics, requires batch >= 2, and updates `state` (running
// variance uses the unbiased estimate). Eval mode uses the running stats.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool train);

Var softmax(Var x);  // over the last extent

Var diff_x(Var x);  // forward difference, width shrinks by 1
Var diff_y(Var x);  // forward difference, height shrinks by 1

Var grayscale(Var rgb);  // 0.299 R + 0.587 G + 0.114 B

Var dwt2_band(Var x, Band band);
// `height`/`width` are the extents of the signal being reconstructed; odd
// values strip the trailing pad row/column.
Var idwt2(Var ll, Var lh, Var hl, Var hh, std::size_t height,
          std::size_t width);

// Multiplies every element of x by the scalar gate (shape (1,1,1,1)).
Var gate_scale(Var x, Var gate);

Var reshape(Var x, Shape shape);
// out.dims[i] = in.dims[perm[i]].
Var permute(Var x, std::array<std::size_t, 4> perm);
// (N, C, H, W) -> (N, 1, (H/p)(W/p), C p p); tokens row-major over the
// patch grid, features ordered (channel, row, column).
Var patchify(Var x, std::size_t patch);
// Bilinear, half-pixel centers, edge clamped.
Var upsample2x(Var x);
// Picks flat indices into a (1, 1, 1, n) vector.
Var gather(Var x, std::vector<std::size_t> indices);

// Everything forward_op needs beyond its tensor operands.
struct OpAttrs {
  double scalar = 0.0;
  Band band = Band::kLL;
  Shape shape;
  std::array<std::size_t, 4> perm{0, 1, 2, 3};
  std::size_t patch = 1;
  std::vector<std::size_t> indices;
  BatchNormState* bn_state = nullptr;
  bool train = true;
};

// Tag-dispatched entry into the operator set.
Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs);

// Arity of each dispatchable operator.
std::size_t op_arity(OpKind kind);

}  // namespace wavedepth::ops
