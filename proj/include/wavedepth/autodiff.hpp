#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "wavedepth/tensor.hpp"

namespace wavedepth {

// A named, optionally frozen model weight. `name` is a dotted path such as
// "encoder.block1.attn.q.weight" and is what freeze masks address.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

using GradientMap = std::map<std::string, Tensor>;

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid for the
// lifetime of the tape that produced it.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Operator tags, one per recorded operation kind.
enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kConv3x3,
  kRelu,
  kSoftplus,
  kLog,
  kAbs,
  kMean,
  kSum,
  kSqrt,
  kLayerNorm,
  kBatchNorm,
  kSoftmax,
  kDiffX,
  kDiffY,
  kGrayscale,
  kDwt2Band,
  kIdwt2,
  kGateScale,
  kReshape,
  kPermute,
  kPatchify,
  kUpsample2x,
  kGather,
};

const char* op_name(OpKind kind);

// Reverse-mode recording. Nodes live in a deque so references handed out by
// value() stay valid as the tape grows. When `recording` is false the tape
// only stores forward values; no backward closures are kept.
class Tape {
 public:
  // Accumulates into the adjoints of the node's inputs. Entries of
  // `input_grads` are null for inputs that do not require a gradient.
  using BackwardFn = std::function<void(
      const Tensor& out_grad, const Tensor& out_value,
      std::span<Tensor*> input_grads)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf that never receives an adjoint.
  Var constant(Tensor value);
  // Leaf that receives an adjoint (used for gradient checks on inputs).
  Var input(Tensor value);
  // Leaf bound to a named parameter; receives an adjoint iff trainable.
  Var parameter(const Parameter& p);

  Var record(OpKind kind, Tensor value, std::vector<Var> inputs,
             BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  OpKind kind(Var v) const;

  // Adjoint of `v` after backward(); a zero tensor when none flowed.
  Tensor adjoint(Var v) const;

  // Propagates d(root)/d(node) to every node. Root must be a scalar
  // recorded on this tape.
  void backward(Var root);

  // Adjoint of every trainable parameter leaf, summed when a parameter was
  // bound more than once. Frozen parameters get no entry.
  GradientMap parameter_gradients() const;

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::string param_name;
  };

  const Node& node(Var v) const;
  Var push(Node node);

  std::deque<Node> nodes_;
  bool recording_;
  bool backward_done_ = false;
};

// Builds a scalar graph from leaf inputs for gradient checking.
using GraphBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct CheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::string failure;  // non-empty when a forward value was non-finite
};

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
};

// Compares tape gradients of build(inputs) against central differences.
CheckReport grad_check(const GraphBuilder& build,
                       const std::vector<Tensor>& inputs, double tol,
                       GradCheckOptions options = {});

}  // namespace wavedepth
