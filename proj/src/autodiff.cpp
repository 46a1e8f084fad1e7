#include "tslora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace tslora {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

double gelu_derivative(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace

Tape::Id Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Id Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Tape::Id Tape::param(const Parameter& p) {
  Node n;
  n.value = p.value;
  n.bound = &p;
  n.requires_grad = p.trainable;
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (!va.same_shape(vb)) {
    throw DimensionError("add: shape mismatch: " + va.shape_str() + " vs " +
                         vb.shape_str());
  }
  Node n;
  n.value = tslora::add(va, vb);
  n.inputs = {a, b};
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    const auto& in = t.nodes_[self].inputs;
    t.accumulate(adj, in[0], gout);
    t.accumulate(adj, in[1], gout);
  };
  return push(std::move(n));
}

Tape::Id Tape::add_row_vector(Id a, Id row) {
  const Matrix& va = value(a);
  const Matrix& vr = value(row);
  if (vr.rows != 1 || vr.cols != va.cols) {
    throw DimensionError("add_row_vector: row must be 1x" +
                         std::to_string(va.cols) + ", got " + vr.shape_str());
  }
  Node n;
  n.value = va;
  for (int i = 0; i < va.rows; ++i) {
    for (int j = 0; j < va.cols; ++j) {
      n.value(i, j) += vr(0, j);
    }
  }
  n.inputs = {a, row};
  n.requires_grad = requires_grad(a) || requires_grad(row);
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    const auto& in = t.nodes_[self].inputs;
    t.accumulate(adj, in[0], gout);
    if (t.requires_grad(in[1])) {
      Matrix gr(1, gout.cols);
      for (int i = 0; i < gout.rows; ++i) {
        for (int j = 0; j < gout.cols; ++j) {
          gr(0, j) += gout(i, j);
        }
      }
      t.accumulate(adj, in[1], gr);
    }
  };
  return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double c) {
  Node n;
  n.value = tslora::scale(value(a), c);
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  n.backprop = [c](Tape& t, Id self, const Matrix& gout,
                   std::vector<Matrix>& adj) {
    t.accumulate(adj, t.nodes_[self].inputs[0], tslora::scale(gout, c));
  };
  return push(std::move(n));
}

Tape::Id Tape::matmul(Id a, Id b) {
  Node n;
  n.value = tslora::matmul(value(a), value(b));
  n.inputs = {a, b};
  n.requires_grad = requires_grad(a) || requires_grad(b);
  // dL/da = gout * b^T, dL/db = a^T * gout
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    const auto& in = t.nodes_[self].inputs;
    if (t.requires_grad(in[0])) {
      t.accumulate(adj, in[0], matmul_nt(gout, t.value(in[1])));
    }
    if (t.requires_grad(in[1])) {
      t.accumulate(adj, in[1], matmul_tn(t.value(in[0]), gout));
    }
  };
  return push(std::move(n));
}

Tape::Id Tape::transpose(Id a) {
  Node n;
  n.value = tslora::transpose(value(a));
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    t.accumulate(adj, t.nodes_[self].inputs[0], tslora::transpose(gout));
  };
  return push(std::move(n));
}

Tape::Id Tape::slice_rows(Id a, int r0, int count) {
  const Matrix& va = value(a);
  if (r0 < 0 || count < 1 || r0 + count > va.rows) {
    throw DimensionError("slice_rows: range [" + std::to_string(r0) + ", " +
                         std::to_string(r0 + count) + ") outside " +
                         va.shape_str());
  }
  Node n;
  n.value = Matrix(count, va.cols);
  for (int i = 0; i < count; ++i) {
    for (int j = 0; j < va.cols; ++j) {
      n.value(i, j) = va(r0 + i, j);
    }
  }
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  n.backprop = [r0](Tape& t, Id self, const Matrix& gout,
                    std::vector<Matrix>& adj) {
    const Id src = t.nodes_[self].inputs[0];
    if (!t.requires_grad(src)) {
      return;
    }
    const Matrix& vs = t.value(src);
    Matrix g(vs.rows, vs.cols);
    for (int i = 0; i < gout.rows; ++i) {
      for (int j = 0; j < gout.cols; ++j) {
        g(r0 + i, j) = gout(i, j);
      }
    }
    t.accumulate(adj, src, g);
  };
  return push(std::move(n));
}

Tape::Id Tape::slice_cols(Id a, int c0, int count) {
  const Matrix& va = value(a);
  if (c0 < 0 || count < 1 || c0 + count > va.cols) {
    throw DimensionError("slice_cols: range [" + std::to_string(c0) + ", " +
                         std::to_string(c0 + count) + ") outside " +
                         va.shape_str());
  }
  Node n;
  n.value = Matrix(va.rows, count);
  for (int i = 0; i < va.rows; ++i) {
    for (int j = 0; j < count; ++j) {
      n.value(i, j) = va(i, c0 + j);
    }
  }
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  n.backprop = [c0](Tape& t, Id self, const Matrix& gout,
                    std::vector<Matrix>& adj) {
    const Id src = t.nodes_[self].inputs[0];
    if (!t.requires_grad(src)) {
      return;
    }
    const Matrix& vs = t.value(src);
    Matrix g(vs.rows, vs.cols);
    for (int i = 0; i < gout.rows; ++i) {
      for (int j = 0; j < gout.cols; ++j) {
        g(i, c0 + j) = gout(i, j);
      }
    }
    t.accumulate(adj, src, g);
  };
  return push(std::move(n));
}

Tape::Id Tape::concat_cols(std::span<const Id> parts) {
  if (parts.empty()) {
    throw ContractError("concat_cols: no inputs");
  }
  const int rows = value(parts[0]).rows;
  int total = 0;
  for (Id p : parts) {
    if (value(p).rows != rows) {
      throw DimensionError("concat_cols: row count mismatch: " +
                           value(parts[0]).shape_str() + " vs " +
                           value(p).shape_str());
    }
    total += value(p).cols;
  }
  Node n;
  n.value = Matrix(rows, total);
  n.inputs.assign(parts.begin(), parts.end());
  int offset = 0;
  for (Id p : parts) {
    const Matrix& vp = value(p);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < vp.cols; ++j) {
        n.value(i, offset + j) = vp(i, j);
      }
    }
    offset += vp.cols;
    n.requires_grad = n.requires_grad || requires_grad(p);
  }
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    int offset = 0;
    for (Id p : t.nodes_[self].inputs) {
      const Matrix& vp = t.value(p);
      if (t.requires_grad(p)) {
        Matrix g(vp.rows, vp.cols);
        for (int i = 0; i < vp.rows; ++i) {
          for (int j = 0; j < vp.cols; ++j) {
            g(i, j) = gout(i, offset + j);
          }
        }
        t.accumulate(adj, p, g);
      }
      offset += vp.cols;
    }
  };
  return push(std::move(n));
}

Tape::Id Tape::softmax_rows(Id a) {
  const Matrix& va = value(a);
  Node n;
  n.value = Matrix(va.rows, va.cols);
  for (int i = 0; i < va.rows; ++i) {
    double row_max = va(i, 0);
    for (int j = 1; j < va.cols; ++j) {
      row_max = std::max(row_max, va(i, j));
    }
    double denom = 0.0;
    for (int j = 0; j < va.cols; ++j) {
      const double e = std::exp(va(i, j) - row_max);
      n.value(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < va.cols; ++j) {
      n.value(i, j) /= denom;
    }
  }
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  // dL/dx_j = y_j * (g_j - sum_k g_k y_k), per row
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    const Id src = t.nodes_[self].inputs[0];
    if (!t.requires_grad(src)) {
      return;
    }
    const Matrix& y = t.nodes_[self].value;
    Matrix g(y.rows, y.cols);
    for (int i = 0; i < y.rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < y.cols; ++j) {
        dot += gout(i, j) * y(i, j);
      }
      for (int j = 0; j < y.cols; ++j) {
        g(i, j) = y(i, j) * (gout(i, j) - dot);
      }
    }
    t.accumulate(adj, src, g);
  };
  return push(std::move(n));
}

Tape::Id Tape::layer_norm(Id x, Id gamma, Id beta, double eps) {
  const Matrix& vx = value(x);
  const Matrix& vg = value(gamma);
  const Matrix& vb = value(beta);
  if (vg.rows != 1 || vg.cols != vx.cols || vb.rows != 1 ||
      vb.cols != vx.cols) {
    throw DimensionError("layer_norm: gamma/beta must be 1x" +
                         std::to_string(vx.cols) + ", got " + vg.shape_str() +
                         " and " + vb.shape_str());
  }
  Node n;
  n.value = Matrix(vx.rows, vx.cols);
  // Normalized rows are stashed for the backward pass.
  Matrix normalized(vx.rows, vx.cols);
  std::vector<double> inv_std(vx.rows);
  const double width = static_cast<double>(vx.cols);
  for (int i = 0; i < vx.rows; ++i) {
    double mean = 0.0;
    for (int j = 0; j < vx.cols; ++j) {
      mean += vx(i, j);
    }
    mean /= width;
    double var = 0.0;
    for (int j = 0; j < vx.cols; ++j) {
      const double d = vx(i, j) - mean;
      var += d * d;
    }
    var /= width;
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[i] = s;
    for (int j = 0; j < vx.cols; ++j) {
      const double xn = (vx(i, j) - mean) * s;
      normalized(i, j) = xn;
      n.value(i, j) = xn * vg(0, j) + vb(0, j);
    }
  }
  n.inputs = {x, gamma, beta};
  n.requires_grad =
      requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  n.backprop = [normalized = std::move(normalized),
                inv_std = std::move(inv_std)](Tape& t, Id self,
                                              const Matrix& gout,
                                              std::vector<Matrix>& adj) {
    const auto& in = t.nodes_[self].inputs;
    const Matrix& vg = t.value(in[1]);
    const int rows = gout.rows;
    const int cols = gout.cols;
    if (t.requires_grad(in[1])) {
      Matrix gg(1, cols);
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          gg(0, j) += gout(i, j) * normalized(i, j);
        }
      }
      t.accumulate(adj, in[1], gg);
    }
    if (t.requires_grad(in[2])) {
      Matrix gb(1, cols);
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          gb(0, j) += gout(i, j);
        }
      }
      t.accumulate(adj, in[2], gb);
    }
    if (t.requires_grad(in[0])) {
      Matrix gx(rows, cols);
      const double width = static_cast<double>(cols);
      for (int i = 0; i < rows; ++i) {
        double mean_gn = 0.0;
        double mean_gn_xn = 0.0;
        for (int j = 0; j < cols; ++j) {
          const double gn = gout(i, j) * vg(0, j);
          mean_gn += gn;
          mean_gn_xn += gn * normalized(i, j);
        }
        mean_gn /= width;
        mean_gn_xn /= width;
        for (int j = 0; j < cols; ++j) {
          const double gn = gout(i, j) * vg(0, j);
          gx(i, j) =
              inv_std[i] * (gn - mean_gn - normalized(i, j) * mean_gn_xn);
        }
      }
      t.accumulate(adj, in[0], gx);
    }
  };
  return push(std::move(n));
}

Tape::Id Tape::gelu(Id a) {
  const Matrix& va = value(a);
  Node n;
  n.value = Matrix(va.rows, va.cols);
  for (size_t i = 0; i < va.data.size(); ++i) {
    n.value.data[i] = gelu_value(va.data[i]);
  }
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    const Id src = t.nodes_[self].inputs[0];
    if (!t.requires_grad(src)) {
      return;
    }
    const Matrix& vx = t.value(src);
    Matrix g(vx.rows, vx.cols);
    for (size_t i = 0; i < vx.data.size(); ++i) {
      g.data[i] = gout.data[i] * gelu_derivative(vx.data[i]);
    }
    t.accumulate(adj, src, g);
  };
  return push(std::move(n));
}

Tape::Id Tape::sum(Id a) {
  const Matrix& va = value(a);
  Node n;
  n.value = Matrix(1, 1);
  for (double v : va.data) {
    n.value(0, 0) += v;
  }
  n.inputs = {a};
  n.requires_grad = requires_grad(a);
  n.backprop = [](Tape& t, Id self, const Matrix& gout,
                  std::vector<Matrix>& adj) {
    const Id src = t.nodes_[self].inputs[0];
    if (!t.requires_grad(src)) {
      return;
    }
    const Matrix& vs = t.value(src);
    Matrix g(vs.rows, vs.cols, gout(0, 0));
    t.accumulate(adj, src, g);
  };
  return push(std::move(n));
}

Tape::Id Tape::gaussian_nll(Id mean_col, Id log_std_col,
                            std::span<const double> targets) {
  const Matrix& mu = value(mean_col);
  const Matrix& ls = value(log_std_col);
  const int steps = static_cast<int>(targets.size());
  if (mu.cols != 1 || ls.cols != 1 || mu.rows != steps || ls.rows != steps) {
    throw ContractError("gaussian_nll: expected " + std::to_string(steps) +
                        "x1 mean and log_std columns, got " + mu.shape_str() +
                        " and " + ls.shape_str());
  }
  if (steps == 0) {
    throw ContractError("gaussian_nll: empty targets");
  }
  if (!mu.all_finite() || !ls.all_finite()) {
    throw NumericError("gaussian_nll: non-finite distribution parameters");
  }
  for (double t : targets) {
    if (!std::isfinite(t)) {
      throw NumericError("gaussian_nll: non-finite target");
    }
  }

  Node n;
  n.value = Matrix(1, 1);
  std::vector<double> target_copy(targets.begin(), targets.end());
  constexpr double half_log_2pi = 0.91893853320467274178;
  double acc = 0.0;
  for (int i = 0; i < steps; ++i) {
    const double sd = clamp_std(ls(i, 0));
    const double r = targets[i] - mu(i, 0);
    acc += half_log_2pi + std::log(sd) + 0.5 * r * r / (sd * sd);
  }
  n.value(0, 0) = acc / steps;
  n.inputs = {mean_col, log_std_col};
  n.requires_grad = requires_grad(mean_col) || requires_grad(log_std_col);
  n.backprop = [target_copy = std::move(target_copy)](
                   Tape& t, Id self, const Matrix& gout,
                   std::vector<Matrix>& adj) {
    const auto& in = t.nodes_[self].inputs;
    const Matrix& mu = t.value(in[0]);
    const Matrix& ls = t.value(in[1]);
    const int steps = static_cast<int>(target_copy.size());
    const double g = gout(0, 0) / steps;
    if (t.requires_grad(in[0])) {
      Matrix gm(steps, 1);
      for (int i = 0; i < steps; ++i) {
        const double sd = clamp_std(ls(i, 0));
        gm(i, 0) = g * (mu(i, 0) - target_copy[i]) / (sd * sd);
      }
      t.accumulate(adj, in[0], gm);
    }
    if (t.requires_grad(in[1])) {
      Matrix gs(steps, 1);
      for (int i = 0; i < steps; ++i) {
        const double raw = std::exp(ls(i, 0));
        // d std / d log_std vanishes where the clamp is active.
        if (raw <= kStdFloor || raw >= kStdCeil) {
          gs(i, 0) = 0.0;
          continue;
        }
        const double r = target_copy[i] - mu(i, 0);
        gs(i, 0) = g * (1.0 - r * r / (raw * raw));
      }
      t.accumulate(adj, in[1], gs);
    }
  };
  return push(std::move(n));
}

void Tape::backward(Id loss) {
  const Matrix& lv = value(loss);
  if (lv.rows != 1 || lv.cols != 1) {
    throw ContractError("backward: loss must be 1x1, got " + lv.shape_str());
  }

  // Reachability from the loss through input edges.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<Id> stack = {loss};
  reachable[loss] = 1;
  while (!stack.empty()) {
    const Id u = stack.back();
    stack.pop_back();
    for (Id v : nodes_[u].inputs) {
      if (!reachable[v]) {
        reachable[v] = 1;
        stack.push_back(v);
      }
    }
  }

  // Independent adjoint sweep. Creation order is topological, so a single
  // descending pass visits parents before children.
  std::vector<Matrix> adjoint(nodes_.size());
  adjoint[loss] = Matrix(1, 1, 1.0);
  for (Id id = loss; id >= 0; --id) {
    Node& node = nodes_[id];
    if (!reachable[id] || !node.requires_grad) {
      continue;
    }
    if (adjoint[id].data.empty()) {
      continue;  // reachable but received no gradient
    }
    if (node.backprop) {
      node.backprop(*this, id, adjoint[id], adjoint);
    }
  }

  // Fold the sweep's result into persistent gradients.
  for (Id id = loss; id >= 0; --id) {
    Node& node = nodes_[id];
    if (!reachable[id] || !node.requires_grad || adjoint[id].data.empty()) {
      continue;
    }
    if (node.bound != nullptr) {
      add_inplace(node.bound->grad, adjoint[id]);
    } else {
      if (node.grad.data.empty()) {
        node.grad = Matrix(node.value.rows, node.value.cols);
      }
      add_inplace(node.grad, adjoint[id]);
    }
  }
}

void Tape::accumulate(std::vector<Matrix>& adjoint, Id id, const Matrix& g) {
  if (!nodes_[id].requires_grad) {
    return;
  }
  Matrix& slot = adjoint[id];
  if (slot.data.empty()) {
    slot = g;
  } else {
    add_inplace(slot, g);
  }
}

const Matrix& Tape::value(Id id) const {
  return nodes_[id].value;
}

const Matrix& Tape::grad(Id id) const {
  const Node& node = nodes_[id];
  if (node.bound != nullptr) {
    return node.bound->grad;
  }
  if (node.grad.data.empty()) {
    node.grad = Matrix(node.value.rows, node.value.cols);
  }
  return node.grad;
}

bool Tape::requires_grad(Id id) const {
  return nodes_[id].requires_grad;
}

}  // namespace tslora
