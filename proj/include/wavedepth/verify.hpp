#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wavedepth/autodiff.hpp"

namespace wavedepth {

// Central-difference check of d(build())/d(p) for every entry of every
// trainable parameter in `params`. `build` records a scalar on the tape.
CheckReport check_parameters(const std::function<Var(Tape&)>& build,
                             std::span<Parameter* const> params, double tol,
                             GradCheckOptions options = {});

struct SuiteEntry {
  std::string name;
  std::size_t instances = 0;
  std::size_t passed = 0;
  double worst_rel_error = 0.0;
  std::string detail;  // first failure, if any

  bool ok() const { return instances > 0 && passed == instances; }
};

// Names of the entries run by gradient_suite, in order: one per operator
// kind, then the composed wavelet module and the total loss.
std::vector<std::string> gradient_suite_names();

// Runs `instances` random instances of every entry. Inputs are drawn away
// from the kinks of relu and abs so central differences are well defined.
std::vector<SuiteEntry> gradient_suite(std::size_t instances, double tol,
                                       std::uint64_t seed);

// Total loss of a small model on a 2-sample synthetic batch, checked against
// central differences for one parameter of each layer type (patch
// embedding, positions, attention, MLP, layer norm, LoRA factor, decoder
// convolution, wavelet operator, gate).
std::vector<SuiteEntry> model_gradient_checks(double tol, std::uint64_t seed);

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Quick invariant checks across all modules; used by the `selftest` command.
std::vector<SelfTestResult> self_test(std::uint64_t seed = 0);

}  // namespace wavedepth
