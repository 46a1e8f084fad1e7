#include "tslora/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tslora/rng.hpp"

namespace tslora {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::pretrain: return "pretrain";
    case TrainMode::full_ft: return "full_ft";
    case TrainMode::lora_ft: return "lora_ft";
  }
  return "?";
}

double default_learning_rate(TrainMode mode) {
  return mode == TrainMode::full_ft ? 5e-5 : 1e-3;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) {
    throw ConfigError("train config: learning_rate must be positive");
  }
  if (epochs < 1) {
    throw ConfigError("train config: epochs must be >= 1");
  }
  if (batch_size < 1) {
    throw ConfigError("train config: batch_size must be >= 1");
  }
  if (patience < 0 || clip_norm < 0.0) {
    throw ConfigError("train config: patience and clip_norm must be >= 0");
  }
}

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params,
                             double learning_rate, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)),
      learning_rate_(learning_rate),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.rows, p->value.cols);
    v_.emplace_back(p->value.rows, p->value.cols);
  }
}

void AdamOptimizer::step() {
  ++step_count_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    for (size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad.data[j];
      m_[i].data[j] = beta1_ * m_[i].data[j] + (1.0 - beta1_) * g;
      v_[i].data[j] = beta2_ * v_[i].data[j] + (1.0 - beta2_) * g * g;
      const double m_hat = m_[i].data[j] / bias1;
      const double v_hat = v_[i].data[j] / bias2;
      p.value.data[j] -= learning_rate_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (Parameter* p : params_) {
    p->zero_grad();
  }
}

void AdamOptimizer::clip_global_norm(double max_norm) {
  if (max_norm <= 0.0) {
    return;
  }
  double norm_sq = 0.0;
  for (const Parameter* p : params_) {
    for (double g : p->grad.data) {
      norm_sq += g * g;
    }
  }
  const double norm = std::sqrt(norm_sq);
  if (norm <= max_norm) {
    return;
  }
  const double factor = max_norm / norm;
  for (Parameter* p : params_) {
    for (double& g : p->grad.data) {
      g *= factor;
    }
  }
}

double gaussian_nll(const std::vector<StepDistribution>& dist,
                    std::span<const double> targets) {
  if (dist.size() != targets.size() || dist.empty()) {
    throw ContractError("gaussian_nll: length mismatch (" +
                        std::to_string(dist.size()) + " vs " +
                        std::to_string(targets.size()) + ")");
  }
  constexpr double half_log_2pi = 0.91893853320467274178;
  double acc = 0.0;
  for (size_t i = 0; i < dist.size(); ++i) {
    if (!std::isfinite(dist[i].mean) || !std::isfinite(targets[i])) {
      throw NumericError("gaussian_nll: non-finite input");
    }
    const double sd = dist[i].std();
    const double r = targets[i] - dist[i].mean;
    acc += half_log_2pi + std::log(sd) + 0.5 * r * r / (sd * sd);
  }
  return acc / static_cast<double>(dist.size());
}

Tape::Id window_nll(Tape& tape, const Forecaster& model,
                    const AdapterMap* adapters, const WindowedSample& window) {
  const std::vector<double> full = window.full_window();
  if (static_cast<int>(full.size()) != model.config().max_positions()) {
    throw ContractError("window_nll: window length " +
                        std::to_string(full.size()) + " does not match model " +
                        std::to_string(model.config().max_positions()));
  }
  // One causal pass predicts every next value in the window.
  const std::span<const double> fed(full.data(), full.size() - 1);
  const std::vector<double> targets(full.begin() + 1, full.end());
  const auto out = model.forward_positions(tape, fed, adapters);
  return tape.gaussian_nll(tape.slice_cols(out, 0, 1),
                           tape.slice_cols(out, 1, 1), targets);
}

double evaluate_split_loss(const Forecaster& model, const AdapterMap* adapters,
                           const std::vector<WindowedSample>& split) {
  if (split.empty()) {
    throw DataError("evaluate_split_loss: empty split");
  }
  double acc = 0.0;
  for (const WindowedSample& w : split) {
    Tape tape;
    acc += tape.value(window_nll(tape, model, adapters, w))(0, 0);
  }
  return acc / static_cast<double>(split.size());
}

namespace {

struct TrainableSet {
  std::vector<Parameter*> params;
};

TrainHistory run_training(Forecaster& model, const AdapterMap* adapters,
                          const TrainableSet& trainable, const Dataset& data,
                          const TrainConfig& config) {
  config.validate();
  if (data.train.empty()) {
    throw DataError("train_loop: empty train split");
  }
  if (data.val.empty()) {
    throw DataError("train_loop: empty validation split");
  }

  TrainHistory history;
  history.trainable_params = 0;
  for (const Parameter* p : trainable.params) {
    history.trainable_params += static_cast<long>(p->value.size());
  }

  AdamOptimizer optimizer(trainable.params, config.learning_rate, config.beta1,
                          config.beta2, config.eps);
  Rng shuffle_rng(mix_seed(config.seed, 0x5u));

  std::vector<int> order(data.train.size());
  for (size_t i = 0; i < order.size(); ++i) {
    order[i] = static_cast<int>(i);
  }

  std::vector<Matrix> best_values;
  double best_val = 0.0;
  int since_best = 0;

  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
    }

    double train_acc = 0.0;
    size_t cursor = 0;
    while (cursor < order.size()) {
      const size_t batch_end =
          std::min(cursor + static_cast<size_t>(config.batch_size), order.size());
      const double batch_n = static_cast<double>(batch_end - cursor);
      optimizer.zero_grad();
      for (; cursor < batch_end; ++cursor) {
        Tape tape;
        const auto loss = window_nll(tape, model, adapters, data.train[order[cursor]]);
        train_acc += tape.value(loss)(0, 0);
        tape.backward(tape.scale(loss, 1.0 / batch_n));
      }
      optimizer.clip_global_norm(config.clip_norm);
      optimizer.step();
    }

    const double train_loss = train_acc / static_cast<double>(order.size());
    const double val_loss = evaluate_split_loss(model, adapters, data.val);
    const auto now = std::chrono::steady_clock::now();
    history.train_loss.push_back(train_loss);
    history.val_loss.push_back(val_loss);
    history.seconds.push_back(
        std::chrono::duration<double>(now - t0).count());

    if (best_values.empty() || val_loss < best_val) {
      best_val = val_loss;
      history.best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      best_values.reserve(trainable.params.size());
      for (const Parameter* p : trainable.params) {
        best_values.push_back(p->value);
      }
    } else {
      ++since_best;
      if (config.patience > 0 && since_best >= config.patience) {
        break;
      }
    }
  }

  // Restore the best-validation parameters.
  for (size_t i = 0; i < trainable.params.size(); ++i) {
    trainable.params[i]->value = best_values[i];
  }
  return history;
}

}  // namespace

TrainHistory train_loop(Forecaster& model, const Dataset& data,
                        const TrainConfig& config) {
  if (config.mode == TrainMode::lora_ft) {
    throw ConfigError("train_loop: lora_ft needs an adapted model");
  }
  TrainableSet trainable;
  for (Parameter& p : model.params()) {
    p.trainable = true;
    trainable.params.push_back(&p);
  }
  return run_training(model, nullptr, trainable, data, config);
}

TrainHistory train_loop(AdaptedModel& model, const Dataset& data,
                        const TrainConfig& config) {
  if (config.mode != TrainMode::lora_ft) {
    throw ConfigError("train_loop: adapted models train with mode lora_ft, got " +
                      to_string(config.mode));
  }
  TrainableSet trainable;
  for (auto& [name, adapter] : model.adapters) {
    trainable.params.push_back(&adapter.a);
    trainable.params.push_back(&adapter.b);
  }
  if (trainable.params.empty()) {
    throw ConfigError("train_loop: adapted model has no adapters");
  }
  return run_training(model.base, &model.adapters, trainable, data, config);
}

void write_history_csv(const TrainHistory& history,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << "epoch,train_loss,val_loss,seconds\n";
  char buf[128];
  for (int e = 0; e < history.epochs_run(); ++e) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.3f\n", e,
                  history.train_loss[e], history.val_loss[e],
                  history.seconds[e]);
    out << buf;
  }
}

}  // namespace tslora
