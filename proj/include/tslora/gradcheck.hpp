#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "tslora/autodiff.hpp"

namespace tslora {

// Scalar loss of the current parameter values. When accumulate_grads is
// true the implementation must also run a backward pass so that each
// parameter's grad holds the analytic gradient afterwards.
using LossFn = std::function<double(bool accumulate_grads)>;

// Central-difference gradient oracle.
//
// Evaluates the analytic gradient once, then for n_coords coordinates
// sampled uniformly across all parameter entries (seeded, without
// replacement when possible) perturbs the coordinate by +/-step and
// compares:
//
//   rel_err = |analytic - central| / (|analytic| + |central| + 1e-12)
//
// Returns the maximum relative error over the sampled coordinates.
// Parameters are restored to their original values. step must lie in
// (0, 1e-3]; a non-finite loss raises NumericError.
double finite_diff_check(const LossFn& loss,
                         std::span<Parameter* const> params, double step,
                         int n_coords, uint64_t seed);

}  // namespace tslora
