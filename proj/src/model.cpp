#include "tslora/model.hpp"

#include <array>
#include <cmath>

#include "tslora/rng.hpp"

namespace tslora {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-12;
constexpr double kMaskValue = -1e30;

std::string layer_prefix(int layer) {
  return "layers." + std::to_string(layer) + ".";
}

// Additive causal mask: position i may attend to positions <= i.
Matrix causal_mask(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      m(i, j) = kMaskValue;
    }
  }
  return m;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 ||
      context_length < 1 || horizon < 1) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

std::string attention_param_name(int layer, char which) {
  return layer_prefix(layer) + "attn.w_" + which;
}

Forecaster::Forecaster(const ModelConfig& config, uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.d_model;

  auto gaussian = [&](int r, int c) {
    return Matrix::gaussian(r, c, kInitStd, rng);
  };

  add_param("embed.weight", gaussian(d, 1));
  add_param("embed.bias", gaussian(1, d));
  add_param("pos.embed", gaussian(config_.max_positions(), d));
  for (int layer = 0; layer < config_.n_layers; ++layer) {
    const std::string prefix = layer_prefix(layer);
    for (char which : {'q', 'k', 'v', 'o'}) {
      add_param(attention_param_name(layer, which), gaussian(d, d));
    }
    add_param(prefix + "ln1.gamma", Matrix(1, d, 1.0));
    add_param(prefix + "ln1.beta", Matrix(1, d, 0.0));
    add_param(prefix + "ffn.w1", gaussian(config_.d_ff, d));
    add_param(prefix + "ffn.b1", gaussian(1, config_.d_ff));
    add_param(prefix + "ffn.w2", gaussian(d, config_.d_ff));
    add_param(prefix + "ffn.b2", gaussian(1, d));
    add_param(prefix + "ln2.gamma", Matrix(1, d, 1.0));
    add_param(prefix + "ln2.beta", Matrix(1, d, 0.0));
  }
  add_param("head.weight", gaussian(2, d));
  add_param("head.bias", gaussian(1, 2));
}

void Forecaster::add_param(std::string name, Matrix value) {
  index_.emplace(name, static_cast<int>(params_.size()));
  params_.emplace_back(std::move(name), std::move(value));
}

Parameter& Forecaster::param(std::string_view name) {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw ContractError("unknown parameter: " + std::string(name));
  }
  return params_[it->second];
}

const Parameter& Forecaster::param(std::string_view name) const {
  return const_cast<Forecaster*>(this)->param(name);
}

bool Forecaster::has_param(std::string_view name) const {
  return index_.contains(name);
}

AttentionWeights Forecaster::attention_weights(int layer) const {
  AttentionWeights w;
  w.w_q = &param(attention_param_name(layer, 'q'));
  w.w_k = &param(attention_param_name(layer, 'k'));
  w.w_v = &param(attention_param_name(layer, 'v'));
  w.w_o = &param(attention_param_name(layer, 'o'));
  return w;
}

long Forecaster::total_param_count() const {
  long total = 0;
  for (const Parameter& p : params_) {
    total += static_cast<long>(p.value.size());
  }
  return total;
}

void Forecaster::set_all_trainable(bool trainable) {
  for (Parameter& p : params_) {
    p.trainable = trainable;
  }
}

Tape::Id attention_forward(Tape& tape, Tape::Id hidden,
                           const AttentionWeights& weights,
                           const ModelConfig& config,
                           const AdapterMap* adapters, int layer) {
  const int n = tape.value(hidden).rows;
  const int head_dim = config.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  auto project = [&](const Parameter* w, char which) {
    if (adapters != nullptr) {
      const auto it = adapters->find(attention_param_name(layer, which));
      if (it != adapters->end()) {
        return adapter_forward(tape, hidden, *w, it->second);
      }
    }
    return tape.matmul(hidden, tape.transpose(tape.param(*w)));
  };

  const auto q = project(weights.w_q, 'q');
  const auto k = project(weights.w_k, 'k');
  const auto v = project(weights.w_v, 'v');

  const auto mask = tape.leaf(causal_mask(n));
  std::vector<Tape::Id> heads;
  heads.reserve(config.n_heads);
  for (int h = 0; h < config.n_heads; ++h) {
    const int c0 = h * head_dim;
    const auto qh = tape.slice_cols(q, c0, head_dim);
    const auto kh = tape.slice_cols(k, c0, head_dim);
    const auto vh = tape.slice_cols(v, c0, head_dim);
    auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), attn_scale);
    scores = tape.add(scores, mask);
    const auto probs = tape.softmax_rows(scores);
    heads.push_back(tape.matmul(probs, vh));
  }
  const auto concat = tape.concat_cols(heads);

  if (adapters != nullptr) {
    const auto it = adapters->find(attention_param_name(layer, 'o'));
    if (it != adapters->end()) {
      return adapter_forward(tape, concat, *weights.w_o, it->second);
    }
  }
  return tape.matmul(concat, tape.transpose(tape.param(*weights.w_o)));
}

Tape::Id Forecaster::forward_positions(Tape& tape,
                                       std::span<const double> inputs,
                                       const AdapterMap* adapters) const {
  const int n = static_cast<int>(inputs.size());
  if (n < 1) {
    throw ContractError("forward: empty input sequence");
  }
  if (n > config_.max_positions()) {
    throw ContractError("forward: sequence length " + std::to_string(n) +
                        " exceeds maximum " +
                        std::to_string(config_.max_positions()));
  }

  Matrix values(n, 1);
  for (int i = 0; i < n; ++i) {
    values(i, 0) = inputs[i];
  }

  // Scalar embedding plus positions.
  auto h = tape.matmul(tape.leaf(std::move(values)),
                       tape.transpose(tape.param(param("embed.weight"))));
  h = tape.add_row_vector(h, tape.param(param("embed.bias")));
  h = tape.add(h, tape.slice_rows(tape.param(param("pos.embed")), 0, n));

  for (int layer = 0; layer < config_.n_layers; ++layer) {
    const std::string prefix = layer_prefix(layer);
    const auto attn = attention_forward(tape, h, attention_weights(layer),
                                        config_, adapters, layer);
    h = tape.layer_norm(tape.add(h, attn),
                        tape.param(param(prefix + "ln1.gamma")),
                        tape.param(param(prefix + "ln1.beta")), kLayerNormEps);

    auto ff = tape.matmul(h, tape.transpose(tape.param(param(prefix + "ffn.w1"))));
    ff = tape.gelu(tape.add_row_vector(ff, tape.param(param(prefix + "ffn.b1"))));
    ff = tape.matmul(ff, tape.transpose(tape.param(param(prefix + "ffn.w2"))));
    ff = tape.add_row_vector(ff, tape.param(param(prefix + "ffn.b2")));
    h = tape.layer_norm(tape.add(h, ff),
                        tape.param(param(prefix + "ln2.gamma")),
                        tape.param(param(prefix + "ln2.beta")), kLayerNormEps);
  }

  auto out = tape.matmul(h, tape.transpose(tape.param(param("head.weight"))));
  return tape.add_row_vector(out, tape.param(param("head.bias")));
}

StepDistribution Forecaster::forward_dist(std::span<const double> context,
                                          const AdapterMap* adapters) const {
  if (context.empty()) {
    throw ContractError("forward_dist: empty context");
  }
  if (static_cast<int>(context.size()) > config_.context_length) {
    throw ContractError("forward_dist: context length " +
                        std::to_string(context.size()) + " exceeds " +
                        std::to_string(config_.context_length));
  }
  Tape tape;
  const auto out = forward_positions(tape, context, adapters);
  const Matrix& y = tape.value(out);
  return StepDistribution{y(y.rows - 1, 0), y(y.rows - 1, 1)};
}

namespace {

// Row-wise softmax of the first `limit` entries of each score row, the
// rest already masked out. Mirrors the tape op's stabilized form.
void softmax_prefix_row(double* row, int limit) {
  double row_max = row[0];
  for (int j = 1; j < limit; ++j) {
    row_max = std::max(row_max, row[j]);
  }
  double denom = 0.0;
  for (int j = 0; j < limit; ++j) {
    row[j] = std::exp(row[j] - row_max);
    denom += row[j];
  }
  for (int j = 0; j < limit; ++j) {
    row[j] /= denom;
  }
}

void layer_norm_rows(Matrix& x, const Matrix& gamma, const Matrix& beta,
                     double eps) {
  const double width = static_cast<double>(x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double* row = &x.data[static_cast<size_t>(i) * x.cols];
    double mean = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      mean += row[j];
    }
    mean /= width;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= width;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < x.cols; ++j) {
      row[j] = (row[j] - mean) * inv_std * gamma(0, j) + beta(0, j);
    }
  }
}

constexpr double kInvSqrt2Batched = 0.7071067811865475244;

double gelu_value_fast(double x) {
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2Batched));
}

}  // namespace

Matrix Forecaster::batched_last_outputs(const Matrix& sequences,
                                        const AdapterMap* adapters) const {
  const int batch = sequences.rows;
  const int n = sequences.cols;
  const int d = config_.d_model;
  const int head_dim = config_.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const int rows = batch * n;

  // Transposed weights keep the hot matmuls on the vectorizable row-major
  // kernel. Shared across calls through a per-model cache would hold stale
  // values during training, so the cache lives per call.
  std::map<const Parameter*, Matrix> transposed;
  auto t_of = [&](const Parameter& w) -> const Matrix& {
    auto it = transposed.find(&w);
    if (it == transposed.end()) {
      it = transposed.emplace(&w, tslora::transpose(w.value)).first;
    }
    return it->second;
  };
  std::map<const LoraAdapter*, std::pair<Matrix, Matrix>> adapter_t;
  auto adapter_t_of = [&](const LoraAdapter& a) -> const std::pair<Matrix, Matrix>& {
    auto it = adapter_t.find(&a);
    if (it == adapter_t.end()) {
      it = adapter_t
               .emplace(&a, std::make_pair(tslora::transpose(a.a.value),
                                           tslora::transpose(a.b.value)))
               .first;
    }
    return it->second;
  };

  // Projection under the (possibly adapted) weight, whole batch at once.
  auto project = [&](const Matrix& h, const Parameter& w,
                     int layer, char which) {
    Matrix out = matmul(h, t_of(w));
    if (adapters != nullptr) {
      const auto it = adapters->find(attention_param_name(layer, which));
      if (it != adapters->end()) {
        const LoraAdapter& a = it->second;
        const auto& [a_t, b_t] = adapter_t_of(a);
        const Matrix up = matmul(matmul(h, a_t), b_t);
        axpy(out, a.scaling(), up);
      }
    }
    return out;
  };

  // Embedding: scalar affine plus positions, per row.
  Matrix h(rows, d);
  const Matrix& embed_w = param("embed.weight").value;  // d x 1
  const Matrix& embed_b = param("embed.bias").value;    // 1 x d
  const Matrix& pos = param("pos.embed").value;
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < n; ++i) {
      const double v = sequences(b, i);
      double* row = &h.data[static_cast<size_t>(b * n + i) * d];
      const double* pos_row = &pos.data[static_cast<size_t>(i) * d];
      for (int j = 0; j < d; ++j) {
        row[j] = v * embed_w(j, 0) + embed_b(0, j) + pos_row[j];
      }
    }
  }

  Matrix scores(n, n);
  for (int layer = 0; layer < config_.n_layers; ++layer) {
    const std::string prefix =
        "layers." + std::to_string(layer) + ".";
    const AttentionWeights w = attention_weights(layer);
    const Matrix q = project(h, *w.w_q, layer, 'q');
    const Matrix k = project(h, *w.w_k, layer, 'k');
    const Matrix v = project(h, *w.w_v, layer, 'v');

    Matrix concat(rows, d);
    for (int b = 0; b < batch; ++b) {
      const int base_row = b * n;
      for (int head = 0; head < config_.n_heads; ++head) {
        const int c0 = head * head_dim;
        // scores(i, j) = q_i . k_j / sqrt(head_dim) for j <= i
        for (int i = 0; i < n; ++i) {
          const double* qi =
              &q.data[static_cast<size_t>(base_row + i) * d + c0];
          double* srow = &scores.data[static_cast<size_t>(i) * n];
          for (int j = 0; j <= i; ++j) {
            const double* kj =
                &k.data[static_cast<size_t>(base_row + j) * d + c0];
            double acc = 0.0;
            for (int t = 0; t < head_dim; ++t) {
              acc += qi[t] * kj[t];
            }
            srow[j] = acc * attn_scale;
          }
          softmax_prefix_row(srow, i + 1);
        }
        for (int i = 0; i < n; ++i) {
          const double* srow = &scores.data[static_cast<size_t>(i) * n];
          double* out =
              &concat.data[static_cast<size_t>(base_row + i) * d + c0];
          for (int t = 0; t < head_dim; ++t) {
            out[t] = 0.0;
          }
          for (int j = 0; j <= i; ++j) {
            const double* vj =
                &v.data[static_cast<size_t>(base_row + j) * d + c0];
            const double p = srow[j];
            for (int t = 0; t < head_dim; ++t) {
              out[t] += p * vj[t];
            }
          }
        }
      }
    }

    Matrix attn = project(concat, *w.w_o, layer, 'o');
    add_inplace(attn, h);
    layer_norm_rows(attn, param(prefix + "ln1.gamma").value,
                    param(prefix + "ln1.beta").value, kLayerNormEps);
    h = std::move(attn);

    Matrix ff = matmul(h, t_of(param(prefix + "ffn.w1")));
    const Matrix& b1 = param(prefix + "ffn.b1").value;
    for (int i = 0; i < ff.rows; ++i) {
      for (int j = 0; j < ff.cols; ++j) {
        ff(i, j) = gelu_value_fast(ff(i, j) + b1(0, j));
      }
    }
    Matrix ff2 = matmul(ff, t_of(param(prefix + "ffn.w2")));
    const Matrix& b2 = param(prefix + "ffn.b2").value;
    for (int i = 0; i < ff2.rows; ++i) {
      for (int j = 0; j < ff2.cols; ++j) {
        ff2(i, j) += b2(0, j);
      }
    }
    add_inplace(ff2, h);
    layer_norm_rows(ff2, param(prefix + "ln2.gamma").value,
                    param(prefix + "ln2.beta").value, kLayerNormEps);
    h = std::move(ff2);
  }

  const Matrix& head_w = param("head.weight").value;  // 2 x d
  const Matrix& head_b = param("head.bias").value;
  Matrix out(batch, 2);
  for (int b = 0; b < batch; ++b) {
    const double* last = &h.data[static_cast<size_t>(b * n + n - 1) * d];
    for (int o = 0; o < 2; ++o) {
      double acc = 0.0;
      const double* wrow = &head_w.data[static_cast<size_t>(o) * d];
      for (int j = 0; j < d; ++j) {
        acc += last[j] * wrow[j];
      }
      out(b, o) = acc + head_b(0, o);
    }
  }
  return out;
}

Matrix Forecaster::sample_forecast(std::span<const double> context, int h,
                                   int n_samples, uint64_t seed,
                                   const AdapterMap* adapters) const {
  if (h < 1) {
    throw ContractError("sample_forecast: horizon must be positive");
  }
  if (n_samples < 1) {
    throw ContractError("sample_forecast: n_samples must be positive");
  }
  if (context.empty()) {
    throw ContractError("sample_forecast: empty context");
  }

  // Shared initial context, truncated to the rolling capacity.
  std::vector<double> start(context.begin(), context.end());
  if (static_cast<int>(start.size()) > config_.context_length) {
    start.erase(start.begin(), start.end() - config_.context_length);
  }

  std::vector<Rng> streams;
  streams.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    streams.emplace_back(mix_seed(seed, static_cast<uint64_t>(s)));
  }

  // One block of rows per sample path; all paths advance in lockstep, so
  // each step is a single batched forward.
  int n = static_cast<int>(start.size());
  Matrix rolling(n_samples, n);
  for (int s = 0; s < n_samples; ++s) {
    for (int i = 0; i < n; ++i) {
      rolling(s, i) = start[i];
    }
  }

  Matrix paths(n_samples, h);
  for (int step = 0; step < h; ++step) {
    const Matrix outs = batched_last_outputs(rolling, adapters);
    const bool grow = n < config_.context_length;
    Matrix next(n_samples, grow ? n + 1 : n);
    for (int s = 0; s < n_samples; ++s) {
      const StepDistribution dist{outs(s, 0), outs(s, 1)};
      const double draw = streams[s].gaussian(dist.mean, dist.std());
      paths(s, step) = draw;
      const int shift = grow ? 0 : 1;
      for (int i = 0; i + shift < n; ++i) {
        next(s, i) = rolling(s, i + shift);
      }
      next(s, next.cols - 1) = draw;
    }
    rolling = std::move(next);
    n = rolling.cols;
  }
  return paths;
}

}  // namespace tslora
