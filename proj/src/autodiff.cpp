#include "wavedepth/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "wavedepth/error.hpp"

namespace wavedepth {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("var: not bound to a tape");
  return tape_->value(*this);
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "subtract";
    case OpKind::kMul: return "multiply";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv3x3: return "conv3x3";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kLog: return "log";
    case OpKind::kAbs: return "abs";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kBatchNorm: return "batch_norm";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kDiffX: return "diff_x";
    case OpKind::kDiffY: return "diff_y";
    case OpKind::kGrayscale: return "grayscale";
    case OpKind::kDwt2Band: return "dwt2";
    case OpKind::kIdwt2: return "idwt2";
    case OpKind::kGateScale: return "gate_scale";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPermute: return "permute";
    case OpKind::kPatchify: return "patchify";
    case OpKind::kUpsample2x: return "upsample2x";
    case OpKind::kGather: return "gather";
  }
  return "?";
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  return push(std::move(n));
}

Var Tape::parameter(const Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = recording_ && p.trainable;
  n.param_name = p.name;
  return push(std::move(n));
}

Var Tape::record(OpKind kind, Tensor value, std::vector<Var> inputs,
                 BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  if (recording_) {
    for (const Var& v : inputs) {
      if (v.tape() != this) {
        throw ContractError(std::string(op_name(kind)) +
                            ": operand recorded on a different tape");
      }
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("tape: variable is not recorded on this tape");
  }
  return nodes_[v.id()];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
OpKind Tape::kind(Var v) const { return node(v).kind; }

Tensor Tape::adjoint(Var v) const {
  const Node& n = node(v);
  return n.has_grad ? n.grad : Tensor::zeros_like(n.value);
}

void Tape::backward(Var root) {
  if (root.tape() != this || root.id() >= nodes_.size()) {
    throw ContractError("backward: root is not recorded on this tape");
  }
  const Node& r = nodes_[root.id()];
  if (!r.value.is_scalar()) {
    throw ContractError("backward: root must be a scalar, got shape " +
                        r.value.shape().str());
  }
  if (backward_done_) {
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
  }
  backward_done_ = true;
  if (!r.requires_grad) return;

  nodes_[root.id()].grad = Tensor::scalar(1.0);
  nodes_[root.id()].has_grad = true;
  std::vector<Tensor*> input_grads;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    input_grads.clear();
    for (std::size_t in : n.inputs) {
      Node& src = nodes_[in];
      if (!src.requires_grad) {
        input_grads.push_back(nullptr);
        continue;
      }
      if (!src.has_grad) {
        src.grad = Tensor::zeros_like(src.value);
        src.has_grad = true;
      }
      input_grads.push_back(&src.grad);
    }
    n.backward(n.grad, n.value, input_grads);
    // Intermediate adjoints are no longer needed once propagated.
    if (n.kind != OpKind::kLeaf) n.grad = Tensor();
    n.has_grad = n.kind == OpKind::kLeaf;
  }
}

GradientMap Tape::parameter_gradients() const {
  GradientMap out;
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::kLeaf || n.param_name.empty() || !n.requires_grad) {
      continue;
    }
    Tensor g = n.has_grad ? n.grad : Tensor::zeros_like(n.value);
    auto [it, inserted] = out.try_emplace(n.param_name, g);
    if (!inserted) it->second += g;
  }
  return out;
}

CheckReport grad_check(const GraphBuilder& build,
                       const std::vector<Tensor>& inputs, double tol,
                       GradCheckOptions options) {
  CheckReport report;

  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.constant(x));
    return build(tape, vars).value().item();
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : inputs) vars.push_back(tape.input(x));
    Var root = build(tape, vars);
    if (!std::isfinite(root.value().item())) {
      report.failure = "non-finite forward value at the unperturbed point";
      return report;
    }
    tape.backward(root);
    for (const Var& v : vars) analytic.push_back(tape.adjoint(v));
  }

  std::vector<Tensor> probe = inputs;
  bool seen = false;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].numel(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + options.step;
      const double up = evaluate(probe);
      probe[k][i] = orig - options.step;
      const double down = evaluate(probe);
      probe[k][i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.failure = "non-finite forward value perturbing input " +
                         std::to_string(k) + " element " + std::to_string(i);
        report.worst_input = k;
        report.worst_index = i;
        return report;
      }
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[k][i];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
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

}  // namespace wavedepth
