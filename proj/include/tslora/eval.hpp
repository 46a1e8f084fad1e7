#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tslora/data.hpp"
#include "tslora/lora.hpp"
#include "tslora/model.hpp"
#include "tslora/training.hpp"

namespace tslora {

enum class Setting { zero_shot, full_ft, lora_ft };

std::string to_string(Setting s);
Setting setting_from_string(const std::string& s);

// Mean squared error on equal-length vectors (normalized scale).
double mse(std::span<const double> pred, std::span<const double> truth);

// Mean absolute percentage error, in percent, with an epsilon guard for
// zero truth values. Computed on original-scale values.
double mape(std::span<const double> pred, std::span<const double> truth);

// Classic dynamic time warping distance: local cost |a_i - b_j|, steps
// (up, right, diagonal), full window, O(nm).
double dtw_distance(std::span<const double> a, std::span<const double> b);

// Per-step median of sample paths (n_samples x h). Even counts take the
// mean of the two central order statistics.
std::vector<double> aggregate_median(const Matrix& paths);

struct MetricsReport {
  std::string model_label;
  Setting setting = Setting::zero_shot;
  Vital vital = Vital::MeanBP;
  double mse = 0.0;
  double dtw = 0.0;
  double mape = 0.0;
  std::vector<double> mse_runs;
  std::vector<double> dtw_runs;
  std::vector<double> mape_runs;
  long trainable_params = 0;
  long total_params = 0;
};

// Produces sample paths (n_samples x h) for a context. The model-backed
// sampler wraps Forecaster::sample_forecast; tests may inject oracles.
using PathSampler = std::function<Matrix(
    std::span<const double> context, int h, int n_samples, uint64_t seed)>;

PathSampler model_sampler(const Forecaster& model,
                          const AdapterMap* adapters = nullptr);

struct EvalProtocol {
  int n_samples = 20;
  int n_runs = 10;
  uint64_t seed = 0;
};

// The multi-run protocol: for each run r, with seed base+r, sample paths
// per test window, reduce per step by the median, and score MSE and DTW on
// the normalized scale and MAPE on inverse-scaled values; per-run metrics
// are window means, headline numbers are run means.
MetricsReport evaluate_model(const PathSampler& sampler,
                             const std::vector<WindowedSample>& test,
                             const ScalingParams& scaling,
                             const EvalProtocol& protocol,
                             std::string model_label, Setting setting,
                             Vital vital);

struct RankSweepRow {
  int rank = 0;
  long trainable_params = 0;
  double mse = 0.0;
  double dtw = 0.0;
  double mape = 0.0;
};

// For each rank: inject, fine-tune on the dataset, evaluate on its test
// split. Ranks are validated up front, deduplicated with a warning and
// processed ascending.
std::vector<RankSweepRow> rank_sweep(const Forecaster& base,
                                     const Dataset& data,
                                     std::vector<int> ranks, double alpha,
                                     const TrainConfig& train_config,
                                     const EvalProtocol& protocol);

struct TradeoffRow {
  std::string label;
  long total_params = 0;
  long finetuned_params = 0;
  double mape = 0.0;
};

std::vector<TradeoffRow> param_tradeoff(
    const std::vector<MetricsReport>& reports);

// Long format: model,setting,vital,metric,run,value.
void write_report_long_csv(const std::vector<MetricsReport>& reports,
                           const std::filesystem::path& path);
std::vector<MetricsReport> read_report_long_csv(
    const std::filesystem::path& path);

// Wide format: one row per (model, setting), MSE/DTW/MAPE columns per vital.
void write_report_wide_csv(const std::vector<MetricsReport>& reports,
                           const std::filesystem::path& path);

void write_tradeoff_csv(const std::vector<TradeoffRow>& rows,
                        const std::filesystem::path& path);

void write_rank_sweep_csv(const std::vector<RankSweepRow>& rows,
                          const std::filesystem::path& path);

}  // namespace tslora
