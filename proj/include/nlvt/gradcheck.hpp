#pragma once

// Central finite-difference verification of reverse-mode gradients.
//
// Error metric per tensor: ||g_auto - g_num||_2 / max(||g_auto||_2, ||g_num||_2, floor),
// floor = 1e-3 x the largest per-tensor gradient norm of the check, reported as
// the maximum over all checked tensors.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nlvt/layers.hpp"

namespace nlvt {

struct TensorCheck {
  std::string name;
  double rel_error = 0.0;
  std::size_t elements = 0;
};

struct GradcheckReport {
  std::string suite;
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  // Elements whose difference quotient was refined because the one-sided
  // slopes disagreed (a kink of relu lay inside the step).
  std::size_t refined = 0;
};

// `loss` must rebuild the scalar loss from the current values of `wrt`. The
// step shrinks tenfold, at most three times, for an element whose forward and
// backward one-sided slopes disagree, so that a relu kink inside the step does
// not masquerade as a gradient error.
template <typename T>
GradcheckReport gradcheck(const std::function<Tensor<T>()>& loss, const ParamList<T>& wrt, double step);

// Checks a single-precision backward pass against central differences of a
// double-precision twin. The twin's tensors are overwritten with the float
// values first, so both evaluate the same point. Tensor lists must align.
GradcheckReport gradcheck_against_reference(const std::function<Tensor<float>()>& loss, const ParamList<float>& wrt,
                                            const std::function<Tensor<double>()>& reference,
                                            const ParamList<double>& reference_wrt, double step);

// Default step for a precision: 1e-5 at 64-bit, 1e-2 at 32-bit.
double default_step(int bits);
// Pass threshold for a precision: 1e-6 at 64-bit, 1e-3 at 32-bit.
double default_tolerance(int bits);

// Named suites, each building random inputs in [-1, 1] from `seed`. At 32 bits
// the float gradients are compared with a double twin built from the same seed.
const std::vector<std::string>& gradcheck_suites();
// Throws ConfigError for an unknown suite or a precision other than 32 or 64.
GradcheckReport run_gradcheck(const std::string& suite, int bits, std::uint64_t seed);

}  // namespace nlvt
