#pragma once

#include <filesystem>
#include <vector>

#include "tslora/data.hpp"
#include "tslora/lora.hpp"
#include "tslora/model.hpp"

namespace tslora {

enum class TrainMode { pretrain, full_ft, lora_ft };

std::string to_string(TrainMode mode);

// Larger rate for adapter-only tuning, conservative for full fine-tuning.
double default_learning_rate(TrainMode mode);

struct TrainConfig {
  TrainMode mode = TrainMode::pretrain;
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size = 16;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Early stopping on validation loss; 0 disables.
  int patience = 5;
  // Global-norm gradient clipping; 0 disables.
  double clip_norm = 1.0;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> seconds;
  int best_epoch = 0;  // index into the vectors
  long trainable_params = 0;

  int epochs_run() const { return static_cast<int>(train_loss.size()); }
};

// Standard Adam with bias correction over a fixed parameter list. State is
// zero-initialized; step() consumes the parameters' current grads.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Parameter*> params, double learning_rate,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  // Scales all gradients so their global norm is at most max_norm.
  void clip_global_norm(double max_norm);
  long step_count() const { return step_count_; }

 private:
  std::vector<Parameter*> params_;
  double learning_rate_, beta1_, beta2_, eps_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_count_ = 0;
};

// Mean Gaussian NLL of targets under per-step distributions (value level;
// the differentiable form lives on the tape).
double gaussian_nll(const std::vector<StepDistribution>& dist,
                    std::span<const double> targets);

// Teacher-forced window loss: one-step-ahead NLL across the whole
// context+horizon window. Returns the loss node; callers run backward.
Tape::Id window_nll(Tape& tape, const Forecaster& model,
                    const AdapterMap* adapters, const WindowedSample& window);

double evaluate_split_loss(const Forecaster& model, const AdapterMap* adapters,
                           const std::vector<WindowedSample>& split);

// Minibatch Adam over teacher-forced windows. pretrain/full_ft train all
// base parameters; the lora_ft overload trains only the adapters and
// leaves the frozen base untouched. The parameters that scored the best
// validation loss are restored into the model before returning.
TrainHistory train_loop(Forecaster& model, const Dataset& data,
                        const TrainConfig& config);
TrainHistory train_loop(AdaptedModel& model, const Dataset& data,
                        const TrainConfig& config);

void write_history_csv(const TrainHistory& history,
                       const std::filesystem::path& path);

}  // namespace tslora
