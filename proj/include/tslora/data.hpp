#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tslora/errors.hpp"

namespace tslora {

enum class Vital { MeanBP, HeartRate };

std::string to_string(Vital v);
Vital vital_from_string(const std::string& s);

// One univariate vital-sign series on a regular grid. Values may be missing
// on ingest; after forward_fill the series is dense.
struct TimeSeries {
  std::string patient_id;
  std::string series_id;
  Vital vital = Vital::MeanBP;
  int step_minutes = 5;
  std::vector<std::optional<double>> values;

  bool has_missing() const;
  std::vector<double> dense() const;  // DataError if missing values remain
};

// A (context, horizon) pair cut from one series.
struct WindowedSample {
  std::vector<double> context;
  std::vector<double> horizon;
  std::string patient_id;
  std::string series_id;

  std::vector<double> full_window() const;
};

struct ScalingParams {
  double min = 0.0;
  double max = 1.0;

  double apply(double x) const { return (x - min) / (max - min); }
  double invert(double y) const { return y * (max - min) + min; }
};

// Split windowed samples with per-vital scaling. One dataset per vital.
struct Dataset {
  Vital vital = Vital::MeanBP;
  int context_length = 72;
  int horizon = 36;
  ScalingParams scaling;
  std::vector<WindowedSample> train;
  std::vector<WindowedSample> val;
  std::vector<WindowedSample> test;

  size_t total_samples() const {
    return train.size() + val.size() + test.size();
  }
};

// --- preprocessing ----------------------------------------------------------

// Replaces each missing value with the most recent observed one; leading
// missing values take the first observed value. DataError when every value
// is missing.
TimeSeries forward_fill(const TimeSeries& series);

// Centered moving average. Near the edges the window is clipped to the
// series bounds and the average taken over the points that remain.
// window must be odd (ConfigError); the input must be dense.
TimeSeries low_pass_filter(const TimeSeries& series, int window = 5);

// Global min-max over a pool of dense series. DataError when the pool is
// constant (max == min).
ScalingParams fit_min_max(const std::vector<TimeSeries>& pool);
TimeSeries apply_min_max(const TimeSeries& series, const ScalingParams& params);

// Windows of total length context_length + horizon at offsets
// 0, stride, 2*stride, ... entirely inside the series. Short series yield
// an empty list.
std::vector<WindowedSample> make_windows(const TimeSeries& series,
                                         int context_length = 72,
                                         int horizon = 36, int stride = 36);

// Deterministic 8:1:1 split, grouped by patient so no patient appears in
// two splits. DataError when there are fewer than 10 samples or fewer than
// 3 patient groups.
Dataset split_dataset(const std::vector<WindowedSample>& samples,
                      uint64_t seed);

// --- synthetic corpora ------------------------------------------------------

enum class Regime { source, target };

// Synthetic vital-sign-like series: baseline + slow sinusoidal drift +
// AR(1) noise, with occasional missing entries. The source regime is a
// faster, noisier generic mix for pretraining; the target regime mimics
// vitals. Exact equations and constants are documented in the README.
// When vital is unset, series alternate MeanBP / HeartRate.
std::vector<TimeSeries> generate_synthetic(
    int n_patients, int series_len, Regime regime, uint64_t seed,
    std::optional<Vital> vital = std::nullopt, double missing_prob = 0.03);

// --- CSV interchange --------------------------------------------------------

// Header: patient_id,series_id,vital,timestamp,value. Missing values are
// empty fields; timestamps are ISO-8601 on a 5-minute grid.
void write_series_csv(const std::vector<TimeSeries>& series,
                      const std::filesystem::path& path);
std::vector<TimeSeries> read_series_csv(const std::filesystem::path& path);

// Runs fill -> filter -> scale -> window -> split for one vital's series.
Dataset prepare_dataset(const std::vector<TimeSeries>& raw, Vital vital,
                        int filter_window, int stride, uint64_t seed);

}  // namespace tslora
