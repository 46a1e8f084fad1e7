#pragma once

#include <map>
#include <string>

#include "tslora/autodiff.hpp"

namespace tslora {

// Low-rank update attached to one frozen base matrix W (d x k):
// effective weight is W + (alpha / rank) * B * A, with B (d x rank)
// zero-initialized and A (rank x k) Gaussian. Only A and B train.
struct LoraAdapter {
  std::string target;  // name of the base matrix this adapts
  int rank = 0;
  double alpha = 16.0;
  Parameter a;  // rank x k
  Parameter b;  // d x rank

  double scaling() const { return alpha / rank; }
  long param_count() const {
    return static_cast<long>(a.value.size() + b.value.size());
  }
};

// Adapters keyed by target parameter name; ordered so iteration, training
// and serialization are deterministic.
using AdapterMap = std::map<std::string, LoraAdapter, std::less<>>;

// Projection of x under the effective weight W + (alpha/r) B A, computed as
// x W^T + (alpha/r) (x A^T) B^T without materializing the update. Gradients
// reach A and B; W stays frozen through its requires-grad flag.
Tape::Id adapter_forward(Tape& tape, Tape::Id x, const Parameter& w,
                         const LoraAdapter& adapter);

// Dense W' = W + (alpha/r) B A. W itself is left untouched.
Matrix merge_adapter(const Matrix& w, const LoraAdapter& adapter);

// Raises InjectionError unless A is r x k and B is d x r for W d x k.
void check_adapter_shapes(const Matrix& w, const LoraAdapter& adapter);

}  // namespace tslora
