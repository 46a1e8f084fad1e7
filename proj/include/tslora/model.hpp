#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tslora/adapter.hpp"
#include "tslora/autodiff.hpp"

namespace tslora {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int context_length = 72;
  int horizon = 36;

  // The positional table covers a full context+horizon training sequence.
  int max_positions() const { return context_length + horizon; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One autoregressive step's forecast distribution.
struct StepDistribution {
  double mean = 0.0;
  double log_std = 0.0;
  double std() const { return clamp_std(log_std); }
};

// The four attention projection matrices of one layer, each
// d_model x d_model.
struct AttentionWeights {
  const Parameter* w_q = nullptr;
  const Parameter* w_k = nullptr;
  const Parameter* w_v = nullptr;
  const Parameter* w_o = nullptr;
};

std::string attention_param_name(int layer, char which);  // 'q','k','v','o'

// Decoder-only transformer forecaster. A scalar value embedding plus a
// learned positional embedding feed n_layers of post-norm blocks
// (attention -> add&norm -> feed-forward -> add&norm); a two-output head
// reads (mean, log_std) per position.
class Forecaster {
 public:
  Forecaster() = default;
  // Parameters are drawn Gaussian with std 0.02 from the seed, except
  // layer-norm gains (1) and shifts (0). Same (config, seed) gives
  // bit-identical parameters.
  Forecaster(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  AttentionWeights attention_weights(int layer) const;

  long total_param_count() const;
  void set_all_trainable(bool trainable);

  // Head outputs [n x 2] (mean, log_std) for every input position, causal
  // over the whole sequence. Training consumes all rows; inference reads
  // the last.
  Tape::Id forward_positions(Tape& tape, std::span<const double> inputs,
                             const AdapterMap* adapters = nullptr) const;

  // Next-step distribution for a context of length 1..context_length.
  StepDistribution forward_dist(std::span<const double> context,
                                const AdapterMap* adapters = nullptr) const;

  // n_samples autoregressive rollouts of h steps, one row per path. Each
  // step draws from Normal(mean, std) and feeds the draw back into the
  // rolling context (oldest value dropped beyond context_length).
  // Deterministic given seed.
  Matrix sample_forecast(std::span<const double> context, int h,
                         int n_samples, uint64_t seed,
                         const AdapterMap* adapters = nullptr) const;

 private:
  void add_param(std::string name, Matrix value);

  // Value-only forward over a batch of equal-length sequences, one block
  // of rows per sequence. Returns (mean, log_std) of each sequence's last
  // position. Arithmetic matches the tape path bit for bit; sampling uses
  // this to run all paths in one pass per step.
  Matrix batched_last_outputs(const Matrix& sequences,
                              const AdapterMap* adapters) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, int, std::less<>> index_;
};

// Multi-head causal self-attention over hidden states H [n x d_model].
// When adapters are present, each adapted projection runs through its
// parallel low-rank pathway.
Tape::Id attention_forward(Tape& tape, Tape::Id hidden,
                           const AttentionWeights& weights,
                           const ModelConfig& config,
                           const AdapterMap* adapters, int layer);

}  // namespace tslora
