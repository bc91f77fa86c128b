#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "wavedepth/error.hpp"
#include "wavedepth/gwt.hpp"
#include "wavedepth/verify.hpp"

using namespace wavedepth;
using wdtest::randn;

namespace {

// Plain-loop reference: Haar analysis, conv3x3 (zero padding), batch
// normalization with batch statistics, relu, gate, Haar synthesis, residual.
Tensor reference_forward(const Tensor& x, const GwtParams& p) {
  const Shape s = x.shape();
  const std::size_t N = s.n(), C = s.c(), h = s.h() / 2, w = s.w() / 2;
  std::array<Tensor, 4> bands;
  for (Tensor& b : bands) b = Tensor(Shape(N, C, h, w));
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const double a = x.at(n, c, 2 * i, 2 * j);
          const double b = x.at(n, c, 2 * i, 2 * j + 1);
          const double cc = x.at(n, c, 2 * i + 1, 2 * j);
          const double d = x.at(n, c, 2 * i + 1, 2 * j + 1);
          bands[0].at(n, c, i, j) = (a + b + cc + d) / 2;
          bands[1].at(n, c, i, j) = (a - b + cc - d) / 2;
          bands[2].at(n, c, i, j) = (a + b - cc - d) / 2;
          bands[3].at(n, c, i, j) = (a - b - cc + d) / 2;
        }
      }
    }
  }
  for (int k = 0; k < 4; ++k) {
    const SubbandOperator& o = p.operators[k];
    Tensor conv(bands[k].shape());
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t co = 0; co < C; ++co) {
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            double acc = o.bias.value[co];
            for (std::size_t ci = 0; ci < C; ++ci) {
              for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                  const long yy = static_cast<long>(i) + dy;
                  const long xx = static_cast<long>(j) + dx;
                  if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) ||
                      xx >= static_cast<long>(w)) {
                    continue;
                  }
                  acc += o.weight.value.at(co, ci, dy + 1, dx + 1) *
                         bands[k].at(n, ci, yy, xx);
                }
              }
            }
            conv.at(n, co, i, j) = acc;
          }
        }
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0.0, var = 0.0;
      const double count = static_cast<double>(N * h * w);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < h * w; ++i) mean += conv.at(n, c, i / w, i % w);
      }
      mean /= count;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < h * w; ++i) {
          const double d = conv.at(n, c, i / w, i % w) - mean;
          var += d * d;
        }
      }
      var /= count;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < h * w; ++i) {
          double& v = conv.at(n, c, i / w, i % w);
          v = (v - mean) / std::sqrt(var + 1e-5) * o.bn_scale.value[c] +
              o.bn_shift.value[c];
          v = std::max(v, 0.0) * p.gates[k].value[0];
        }
      }
    }
    bands[k] = conv;
  }
  Tensor out = x;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const double ll = bands[0].at(n, c, i, j), lh = bands[1].at(n, c, i, j);
          const double hl = bands[2].at(n, c, i, j), hh = bands[3].at(n, c, i, j);
          out.at(n, c, 2 * i, 2 * j) += (ll + lh + hl + hh) / 2;
          out.at(n, c, 2 * i, 2 * j + 1) += (ll - lh + hl - hh) / 2;
          out.at(n, c, 2 * i + 1, 2 * j) += (ll + lh - hl - hh) / 2;
          out.at(n, c, 2 * i + 1, 2 * j + 1) += (ll - lh - hl + hh) / 2;
        }
      }
    }
  }
  return out;
}

void randomize(GwtParams& p, Rng& rng) {
  for (Parameter* q : p.parameters()) {
    const double centre = q->name.ends_with(".bn.scale") ? 1.0 : 0.0;
    for (double& v : q->value.values()) v = centre + 0.5 * rng.normal();
  }
}

}  // namespace

TEST_CASE("initialization") {
  const GwtParams a = gwt_init(8, 42), b = gwt_init(8, 42);
  const double bound = 1.0 / std::sqrt(72.0);
  for (Band band : kAllBands) {
    CHECK(a.gate_value(band) == 1.0);
    const int k = static_cast<int>(band);
    CHECK(a.operators[k].weight.value.identical(b.operators[k].weight.value));
    CHECK(a.operators[k].weight.value.shape() == Shape(8, 8, 3, 3));
    for (double v : a.operators[k].weight.value.values()) {
      CHECK(v >= -bound);
      CHECK(v <= bound);
    }
  }
  CHECK_FALSE(gwt_init(8, 43).operators[0].weight.value.identical(
      a.operators[0].weight.value));
  CHECK_THROWS_AS(gwt_init(0, 1), ContractError);
}

TEST_CASE("zero gates give the identity exactly") {
  Rng rng(1);
  GwtParams p = gwt_init(3, 7);
  randomize(p, rng);
  for (Parameter& g : p.gates) g.value[0] = 0.0;
  const Tensor x = randn(rng, Shape(2, 3, 8, 6));
  for (Mode m : {Mode::kTrain, Mode::kEval}) {
    CHECK(gwt_forward(x, p, m).identical(x));
  }
}

TEST_CASE("bypass with unit gates doubles the input") {
  Rng rng(2);
  GwtParams p = gwt_init(2, 3);
  p.bypass = true;
  const Tensor x = randn(rng, Shape(2, 2, 10, 8));
  Tensor twice = x;
  twice *= 2.0;
  CHECK(max_abs_diff(gwt_forward(x, p, Mode::kTrain), twice) <= 1e-12);
}

TEST_CASE("train-mode forward matches the compositional reference") {
  Rng rng(3);
  for (int k = 0; k < 5; ++k) {
    GwtParams p = gwt_init(3, rng.next());
    randomize(p, rng);
    const Tensor x = randn(rng, Shape(2, 3, 8, 10));
    const Tensor got = gwt_forward(x, p, Mode::kTrain);
    CHECK(max_abs_diff(got, reference_forward(x, p)) <= 1e-12);
    CHECK(got.shape() == x.shape());
  }
}

TEST_CASE("gate effect on subband energy") {
  Rng rng(4);
  GwtParams p = gwt_init(2, 9);
  randomize(p, rng);
  const Tensor x = randn(rng, Shape(2, 2, 8, 8));
  const GateEffect same = gate_effect(x, p, Band::kLH, 1.0, Mode::kTrain);
  CHECK(same.after == same.before);
  const GateEffect hh = gate_effect(x, p, Band::kHH, 2.0, Mode::kTrain);
  CHECK(hh.before > 0.0);
  CHECK(std::abs(hh.after - 4.0 * hh.before) <= 1e-9 * hh.after);
  const GateEffect ll = gate_effect(x, p, Band::kLL, 0.5, Mode::kTrain);
  CHECK(std::abs(ll.after - 0.25 * ll.before) <= 1e-9 * ll.before);
  CHECK_THROWS_AS(gate_effect(x, p, Band::kLL, 0.0), ContractError);
}

TEST_CASE("gate scales only its own band of the rectified feature") {
  Rng rng(5);
  GwtParams p = gwt_init(2, 11);
  randomize(p, rng);
  const Tensor x = randn(rng, Shape(2, 2, 6, 8));
  auto bands = [&](const GwtParams& q) {
    GwtParams copy = q;
    Tape t(false);
    return dwt2(gwt_rectify(t, t.constant(x), copy, Mode::kTrain).value());
  };
  const SubbandSet base = bands(p);
  GwtParams scaled = p;
  scaled.gate(Band::kHL).value[0] *= 3.0;
  const SubbandSet s = bands(scaled);
  for (Band b : kAllBands) {
    const double f = b == Band::kHL ? 3.0 : 1.0;
    for (std::size_t i = 0; i < s.band(b).numel(); ++i) {
      CHECK(s.band(b)[i] ==
            doctest::Approx(f * base.band(b)[i]).epsilon(1e-12).scale(1.0));
    }
  }
}

TEST_CASE("eval mode uses running statistics updated by training") {
  Rng rng(6);
  GwtParams p = gwt_init(2, 13);
  const Tensor x = randn(rng, Shape(3, 2, 8, 8), 2.0);
  const Tensor before = gwt_forward(x, p, Mode::kEval);
  const Tensor mean_before = p.op(Band::kLL).bn.running_mean;
  gwt_forward(x, p, Mode::kTrain);
  CHECK_FALSE(p.op(Band::kLL).bn.running_mean.identical(mean_before));
  const Tensor mean_after = p.op(Band::kLL).bn.running_mean;
  gwt_forward(x, p, Mode::kEval);
  CHECK(p.op(Band::kLL).bn.running_mean.identical(mean_after));
  CHECK_FALSE(gwt_forward(x, p, Mode::kEval).identical(before));
}

TEST_CASE("gradients of mean(gwt(x)) with respect to input, kernels and gates") {
  Rng rng(7);
  GwtParams p = gwt_init(2, 17);
  randomize(p, rng);
  const Tensor x = randn(rng, Shape(2, 2, 6, 6));
  auto wrt_x = [&](Tape& t, std::span<const Var> v) {
    return ops::mean(gwt_forward(t, v[0], p, Mode::kTrain));
  };
  CHECK(grad_check(wrt_x, {x}, 1e-4).passed);
  std::vector<Parameter*> params = p.parameters();
  auto wrt_p = [&](Tape& t) {
    return ops::mean(gwt_forward(t, t.constant(x), p, Mode::kTrain));
  };
  const CheckReport r = check_parameters(wrt_p, params, 1e-4);
  CHECK_MESSAGE(r.passed, r.max_rel_error);
}

TEST_CASE("channel mismatch is a contract error") {
  GwtParams p = gwt_init(2, 1);
  CHECK_THROWS_AS(gwt_forward(Tensor(Shape(1, 3, 4, 4)), p, Mode::kEval),
                  ContractError);
}

TEST_CASE("parameter names") {
  GwtParams p = gwt_init(2, 1, "decoder.gwt");
  CHECK(p.op(Band::kLL).weight.name == "decoder.gwt.ll.conv.weight");
  CHECK(p.gate(Band::kHH).name == "decoder.gwt.gate.hh");
  CHECK(p.parameters().size() == 20);
}
