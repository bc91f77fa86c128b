#include <cmath>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "wavedepth/autodiff.hpp"
#include "wavedepth/error.hpp"
#include "wavedepth/ops.hpp"
#include "wavedepth/verify.hpp"

using namespace wavedepth;
using wdtest::randn;
using wdtest::row;

TEST_CASE("tensor basics") {
  Tensor t(Shape(2, 3, 4, 5), 1.5);
  CHECK(t.numel() == 120);
  CHECK(t.sum() == doctest::Approx(180.0));
  t.at(1, 2, 3, 4) = -7.0;
  CHECK(t[t.numel() - 1] == -7.0);
  CHECK(t.max_abs() == 7.0);
  CHECK(t.reshaped(Shape(1, 1, 10, 12)).identical(
      Tensor(Shape(1, 1, 10, 12), t.vec())));
  CHECK_THROWS_AS(t.reshaped(Shape(1, 1, 1, 7)), ContractError);
  CHECK_THROWS_AS(Tensor(Shape(1, 1, 1, 3), std::vector<double>{1, 2}),
                  ContractError);
}

TEST_CASE("relu on [-1, 0, 2]") {
  Tape tape;
  Var y = ops::relu(tape.constant(row({-1, 0, 2})));
  CHECK(y.value().vec() == std::vector<double>{0, 0, 2});
}

TEST_CASE("forward x difference of [1, 3, 6] is [2, 3]") {
  Tape tape;
  Var y = ops::diff_x(tape.constant(row({1, 3, 6})));
  CHECK(y.shape() == Shape(1, 1, 1, 2));
  CHECK(y.value().vec() == std::vector<double>{2, 3});
}

TEST_CASE("conv3x3 with a zero kernel returns the bias everywhere") {
  Rng rng(1);
  Tape tape;
  Var x = tape.constant(randn(rng, Shape(2, 3, 5, 7)));
  Var w = tape.constant(Tensor(Shape(4, 3, 3, 3)));
  Var b = tape.constant(Tensor(Shape(1, 4, 1, 1), 0.5));
  Var y = ops::conv3x3(x, w, b);
  CHECK(y.shape() == Shape(2, 4, 5, 7));
  for (double v : y.value().values()) CHECK(v == 0.5);
}

TEST_CASE("conv3x3 matches a direct zero-padded loop") {
  Rng rng(2);
  const Tensor x = randn(rng, Shape(1, 2, 4, 5));
  const Tensor w = randn(rng, Shape(3, 2, 3, 3));
  const Tensor b = randn(rng, Shape(1, 3, 1, 1));
  Tape tape;
  const Tensor y =
      ops::conv3x3(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  for (std::size_t co = 0; co < 3; ++co) {
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 5; ++c) {
        double acc = b[co];
        for (std::size_t ci = 0; ci < 2; ++ci) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = r + dy, xx = c + dx;
              if (yy < 0 || yy >= 4 || xx < 0 || xx >= 5) continue;
              acc += w.at(co, ci, dy + 1, dx + 1) * x.at(0, ci, yy, xx);
            }
          }
        }
        CHECK(y.at(0, co, r, c) == doctest::Approx(acc).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("gradient of mean(x^2) at [1, 2, 3]") {
  Tape tape;
  Var x = tape.input(row({1, 2, 3}));
  Var root = ops::mean(ops::mul(x, x));
  tape.backward(root);
  const Tensor g = tape.adjoint(x);
  CHECK(g[0] == doctest::Approx(2.0 / 3.0));
  CHECK(g[1] == doctest::Approx(4.0 / 3.0));
  CHECK(g[2] == doctest::Approx(2.0));
}

TEST_CASE("gradient of sum(relu(x)) at [-1, 2]") {
  Tape tape;
  Var x = tape.input(row({-1, 2}));
  tape.backward(ops::sum(ops::relu(x)));
  CHECK(tape.adjoint(x).vec() == std::vector<double>{0, 1});
}

TEST_CASE("grad_check on a linear graph") {
  Rng rng(3);
  const Tensor w = randn(rng, Shape(1, 1, 1, 6));
  auto build = [&](Tape& t, std::span<const Var> v) {
    return ops::sum(ops::mul(v[0], t.constant(w)));
  };
  const CheckReport r = grad_check(build, {randn(rng, Shape(1, 1, 1, 6))}, 1e-4);
  CHECK(r.passed);
  CHECK(r.max_rel_error <= 1e-9);
}

TEST_CASE("grad_check reports a wrong derivative") {
  // One factor is detached, so the tape sees half the true derivative.
  auto build = [](Tape& t, std::span<const Var> v) {
    Var detached = t.constant(v[0].value());
    return ops::sum(ops::mul(v[0], detached));
  };
  const CheckReport r = grad_check(build, {row({1.0, 2.0})}, 1e-4);
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_error == doctest::Approx(0.5));
}

TEST_CASE("recording and non-recording tapes give identical forward values") {
  Rng rng(4);
  const Tensor a = randn(rng, Shape(2, 2, 4, 4));
  const Tensor w = randn(rng, Shape(2, 2, 3, 3));
  auto run = [&](Tape& t) {
    Var x = t.constant(a);
    Var y = ops::conv3x3(x, t.constant(w), t.constant(Tensor(Shape(1, 2, 1, 1))));
    y = ops::softplus(ops::add(y, ops::upsample2x(ops::dwt2_band(x, Band::kHL))));
    return ops::mean(ops::mul(y, y)).value();
  };
  Tape rec(true), plain(false);
  CHECK(run(rec).identical(run(plain)));
  CHECK(plain.recording() == false);
}

TEST_CASE("gradients are deterministic") {
  Rng rng(5);
  const Tensor a = randn(rng, Shape(2, 3, 4, 4));
  auto grads = [&]() {
    Tape t;
    Var x = t.input(a);
    Var y = ops::softmax(ops::layer_norm(
        x, t.constant(Tensor(Shape(1, 1, 1, 4), 1.0)),
        t.constant(Tensor(Shape(1, 1, 1, 4)))));
    t.backward(ops::sum(ops::mul(y, x)));
    return t.adjoint(x);
  };
  CHECK(grads().identical(grads()));
}

TEST_CASE("parameters: frozen get no gradient, repeated use accumulates") {
  Parameter w{"w", row({2.0, 3.0}), true};
  Parameter f{"f", row({5.0, 7.0}), false};
  Tape tape;
  Var a = tape.parameter(w);
  Var b = tape.parameter(w);
  Var c = tape.parameter(f);
  tape.backward(ops::sum(ops::add(ops::mul(a, c), b)));
  const GradientMap g = tape.parameter_gradients();
  CHECK(g.count("f") == 0);
  REQUIRE(g.count("w") == 1);
  CHECK(g.at("w").vec() == std::vector<double>{6.0, 8.0});
}

TEST_CASE("operator errors") {
  Tape tape;
  Var a = tape.constant(Tensor(Shape(1, 1, 2, 3)));
  Var b = tape.constant(Tensor(Shape(1, 1, 3, 2)));
  CHECK_THROWS_AS(ops::add(a, b), ShapeError);
  CHECK_THROWS_AS(ops::log(tape.constant(row({1.0, 0.0}))), DomainError);
  CHECK_THROWS_AS(ops::sqrt(tape.constant(row({-1.0}))), DomainError);
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ContractError);
}

TEST_CASE("forward_op dispatches to the named operators") {
  Rng rng(6);
  Tape tape;
  Var x = tape.constant(randn(rng, Shape(1, 2, 4, 4)));
  Var y = tape.constant(randn(rng, Shape(1, 2, 4, 4)));
  const std::vector<Var> two{x, y};
  CHECK(ops::forward_op(OpKind::kMul, two, {}).value().identical(
      ops::mul(x, y).value()));
  ops::OpAttrs attrs;
  attrs.band = Band::kHH;
  const std::vector<Var> one{x};
  CHECK(ops::forward_op(OpKind::kDwt2Band, one, attrs).value().identical(
      ops::dwt2_band(x, Band::kHH).value()));
  CHECK(ops::op_arity(OpKind::kIdwt2) == 4);
  CHECK(ops::op_arity(OpKind::kRelu) == 1);
}

TEST_CASE("gradient suite covers every operator and passes") {
  std::set<std::string> names;
  for (const std::string& n : gradient_suite_names()) names.insert(n);
  for (int k = static_cast<int>(OpKind::kAdd);
       k <= static_cast<int>(OpKind::kGather); ++k) {
    CHECK_MESSAGE(names.count(op_name(static_cast<OpKind>(k))) == 1,
                  op_name(static_cast<OpKind>(k)));
  }
  for (const SuiteEntry& e : gradient_suite(3, 1e-4, 11)) {
    CHECK_MESSAGE(e.ok(), e.name << ": " << e.detail);
  }
}

TEST_CASE("check_parameters on a quadratic") {
  Parameter p{"p", row({0.3, -1.2, 2.0}), true};
  Parameter* ps[] = {&p};
  auto build = [&](Tape& t) {
    Var v = t.parameter(p);
    return ops::sum(ops::mul(v, ops::mul(v, v)));
  };
  const CheckReport r = check_parameters(build, ps, 1e-6);
  CHECK(r.passed);
}
