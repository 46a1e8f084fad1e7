#pragma once

#include <set>
#include <string>

#include "tslora/model.hpp"

namespace tslora {

// Frozen base model plus trainable adapters phi. The base parameters keep
// their pre-injection values for the lifetime of the adapted model; only
// the adapters train.
struct AdaptedModel {
  Forecaster base;
  AdapterMap adapters;

  StepDistribution forward_dist(std::span<const double> context) const {
    return base.forward_dist(context, &adapters);
  }
  Matrix sample_forecast(std::span<const double> context, int h,
                         int n_samples, uint64_t seed) const {
    return base.sample_forecast(context, h, n_samples, seed, &adapters);
  }
};

// Attaches one adapter per (layer, target) to the attention matrices named
// by targets (subset of {'q','k','v','o'}). B starts at zero and A is
// Gaussian(0, 0.02^2) from the seed, so the adapted model is exactly the
// base model until the first optimizer step. The base is copied with all
// parameters frozen.
AdaptedModel inject_lora(const Forecaster& model, const std::set<char>& targets,
                         int rank, double alpha, uint64_t seed);

// Number of trainable parameters: sum of r*(d+k) over adapters for an
// adapted model, |theta| for a plain forecaster.
long trainable_param_count(const AdaptedModel& model);
long trainable_param_count(const Forecaster& model);

}  // namespace tslora
