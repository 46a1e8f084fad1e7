#include "tslora/adapter.hpp"

namespace tslora {

void check_adapter_shapes(const Matrix& w, const LoraAdapter& adapter) {
  const Matrix& a = adapter.a.value;
  const Matrix& b = adapter.b.value;
  if (adapter.rank < 1 || a.rows != adapter.rank || b.cols != adapter.rank ||
      a.cols != w.cols || b.rows != w.rows) {
    throw InjectionError("adapter for '" + adapter.target + "' (A " +
                         a.shape_str() + ", B " + b.shape_str() + ", rank " +
                         std::to_string(adapter.rank) +
                         ") does not fit base matrix " + w.shape_str());
  }
}

Tape::Id adapter_forward(Tape& tape, Tape::Id x, const Parameter& w,
                         const LoraAdapter& adapter) {
  check_adapter_shapes(w.value, adapter);
  if (tape.value(x).cols != w.value.cols) {
    throw InjectionError("adapter_forward: input width " +
                         std::to_string(tape.value(x).cols) +
                         " does not match base matrix " + w.value.shape_str());
  }
  auto base = tape.matmul(x, tape.transpose(tape.param(w)));
  auto down = tape.matmul(x, tape.transpose(tape.param(adapter.a)));
  auto up = tape.matmul(down, tape.transpose(tape.param(adapter.b)));
  return tape.add(base, tape.scale(up, adapter.scaling()));
}

Matrix merge_adapter(const Matrix& w, const LoraAdapter& adapter) {
  check_adapter_shapes(w, adapter);
  Matrix merged = w;
  const Matrix delta = matmul(adapter.b.value, adapter.a.value);
  axpy(merged, adapter.scaling(), delta);
  return merged;
}

}  // namespace tslora
