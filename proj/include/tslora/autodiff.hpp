#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tslora/matrix.hpp"

namespace tslora {

// Named tensor with persistent gradient storage. Models own Parameters;
// graphs bind to them through Tape::param. grad is mutable accumulation
// state so that a logically-const model can run backward passes.
struct Parameter {
  std::string name;
  Matrix value;
  mutable Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool t = true)
      : name(std::move(n)), value(std::move(v)), trainable(t) {
    grad = Matrix(value.rows, value.cols);
  }

  void zero_grad() const { grad.fill(0.0); }
};

// Lower/upper clamp applied to exp(log_std) wherever a standard deviation
// is materialized (NLL and sampling). Keeps the likelihood and the sampler
// away from degenerate scales.
inline constexpr double kStdFloor = 1e-6;
inline constexpr double kStdCeil = 1e3;

inline double clamp_std(double log_std);

// Reverse-mode automatic differentiation over matrices.
//
// Nodes are appended in topological order, so one reverse sweep of the
// creation order is a valid adjoint traversal. backward(loss) runs an
// independent sweep into scratch buffers and then adds the result into each
// requires-grad node's persistent grad (for parameter leaves, into
// Parameter::grad). Calling backward twice without zeroing grads therefore
// accumulates two full gradients.
//
// One thread per tape. Node values are immutable once produced.
class Tape {
 public:
  using Id = int;

  // Constant or plain differentiable leaf.
  Id leaf(Matrix value, bool requires_grad = false);
  // Leaf bound to an external parameter; requires_grad follows p.trainable
  // and gradients accumulate into p.grad.
  Id param(const Parameter& p);

  Id add(Id a, Id b);
  // a [n x d] plus a [1 x d] row vector broadcast over rows.
  Id add_row_vector(Id a, Id row);
  Id scale(Id a, double c);
  Id matmul(Id a, Id b);
  Id transpose(Id a);
  Id slice_rows(Id a, int r0, int n);
  Id slice_cols(Id a, int c0, int n);
  Id concat_cols(std::span<const Id> parts);
  // Row-wise softmax, stabilized by row-max subtraction.
  Id softmax_rows(Id a);
  // Per-row normalization to zero mean / unit variance (biased variance),
  // then the affine map y = norm * gamma + beta. gamma, beta are 1 x d.
  Id layer_norm(Id x, Id gamma, Id beta, double eps);
  Id gelu(Id a);
  // Sum of all entries, as a 1x1 node.
  Id sum(Id a);
  // Mean Gaussian negative log-likelihood of targets under per-step
  // (mean, log_std) columns, both n x 1. std is clamp(exp(log_std)).
  Id gaussian_nll(Id mean_col, Id log_std_col, std::span<const double> targets);

  // Populates gradients of every requires-grad node reachable from loss.
  // loss must be 1x1 (ContractError otherwise).
  void backward(Id loss);

  const Matrix& value(Id id) const;
  // Gradient accumulated so far (zeros if no backward pass touched it).
  // For parameter-bound leaves this is the parameter's grad.
  const Matrix& grad(Id id) const;
  bool requires_grad(Id id) const;
  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node;

  // Adds g into the scratch adjoint of node id if it requires grad.
  void accumulate(std::vector<Matrix>& adjoint, Id id, const Matrix& g);
  Id push(Node node);

  struct Node {
    Matrix value;
    // Lazily sized on first backward contribution.
    mutable Matrix grad;
    const Parameter* bound = nullptr;
    bool requires_grad = false;
    std::vector<Id> inputs;
    // Propagates the node's scratch adjoint to its inputs.
    std::function<void(Tape&, Id self, const Matrix& gout,
                       std::vector<Matrix>& adjoint)>
        backprop;
  };

  std::vector<Node> nodes_;
};

inline double clamp_std(double log_std) {
  const double s = std::exp(log_std);
  if (s < kStdFloor) return kStdFloor;
  if (s > kStdCeil) return kStdCeil;
  return s;
}

}  // namespace tslora
