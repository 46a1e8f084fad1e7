#include "tslora/lora.hpp"

#include "tslora/rng.hpp"

namespace tslora {

namespace {
constexpr double kAdapterInitStd = 0.02;
}

AdaptedModel inject_lora(const Forecaster& model, const std::set<char>& targets,
                         int rank, double alpha, uint64_t seed) {
  if (targets.empty()) {
    throw ConfigError("inject_lora: no adapter targets given");
  }
  for (char c : targets) {
    if (c != 'q' && c != 'k' && c != 'v' && c != 'o') {
      throw ConfigError(std::string("inject_lora: unknown target '") + c +
                        "', expected q, k, v or o");
    }
  }
  const int d = model.config().d_model;
  if (rank < 1 || rank > d) {
    throw RankError("inject_lora: rank " + std::to_string(rank) +
                    " outside [1, " + std::to_string(d) + "]");
  }
  if (!(alpha > 0.0)) {
    throw ConfigError("inject_lora: alpha must be positive");
  }

  AdaptedModel adapted;
  adapted.base = model;
  adapted.base.set_all_trainable(false);

  Rng rng(seed);
  for (int layer = 0; layer < model.config().n_layers; ++layer) {
    for (char which : {'q', 'k', 'v', 'o'}) {
      if (!targets.contains(which)) {
        continue;
      }
      const std::string name = attention_param_name(layer, which);
      const Matrix& w = adapted.base.param(name).value;
      LoraAdapter adapter;
      adapter.target = name;
      adapter.rank = rank;
      adapter.alpha = alpha;
      adapter.a = Parameter(name + ".lora_a",
                            Matrix::gaussian(rank, w.cols, kAdapterInitStd, rng));
      adapter.b = Parameter(name + ".lora_b", Matrix(w.rows, rank));
      adapted.adapters.emplace(name, std::move(adapter));
    }
  }
  return adapted;
}

long trainable_param_count(const AdaptedModel& model) {
  long count = 0;
  for (const auto& [name, adapter] : model.adapters) {
    count += adapter.param_count();
  }
  return count;
}

long trainable_param_count(const Forecaster& model) {
  return model.total_param_count();
}

}  // namespace tslora
