#include "tslora/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "tslora/rng.hpp"

namespace tslora {

std::string to_string(Vital v) {
  return v == Vital::MeanBP ? "MeanBP" : "HeartRate";
}

Vital vital_from_string(const std::string& s) {
  if (s == "MeanBP") {
    return Vital::MeanBP;
  }
  if (s == "HeartRate") {
    return Vital::HeartRate;
  }
  throw DataError("unknown vital: '" + s + "'");
}

bool TimeSeries::has_missing() const {
  for (const auto& v : values) {
    if (!v.has_value()) {
      return true;
    }
  }
  return false;
}

std::vector<double> TimeSeries::dense() const {
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& v : values) {
    if (!v.has_value()) {
      throw DataError("series " + series_id + " still has missing values");
    }
    out.push_back(*v);
  }
  return out;
}

std::vector<double> WindowedSample::full_window() const {
  std::vector<double> w = context;
  w.insert(w.end(), horizon.begin(), horizon.end());
  return w;
}

TimeSeries forward_fill(const TimeSeries& series) {
  TimeSeries out = series;
  std::optional<double> last;
  for (auto& v : out.values) {
    if (v.has_value()) {
      last = v;
    } else if (last.has_value()) {
      v = last;
    }
  }
  if (!last.has_value()) {
    throw DataError("forward_fill: series " + series.series_id +
                    " has no observed values");
  }
  // Back-fill the head with the first observed value.
  std::optional<double> first;
  for (const auto& v : series.values) {
    if (v.has_value()) {
      first = v;
      break;
    }
  }
  for (auto& v : out.values) {
    if (!v.has_value()) {
      v = first;
    } else {
      break;
    }
  }
  return out;
}

TimeSeries low_pass_filter(const TimeSeries& series, int window) {
  if (window < 1 || window % 2 == 0) {
    throw ConfigError("low_pass_filter: window must be odd and positive, got " +
                      std::to_string(window));
  }
  const std::vector<double> x = series.dense();
  const int n = static_cast<int>(x.size());
  const int half = window / 2;
  TimeSeries out = series;
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    double acc = 0.0;
    for (int j = lo; j <= hi; ++j) {
      acc += x[j];
    }
    out.values[i] = acc / (hi - lo + 1);
  }
  return out;
}

ScalingParams fit_min_max(const std::vector<TimeSeries>& pool) {
  bool seen = false;
  double mn = 0.0;
  double mx = 0.0;
  for (const TimeSeries& s : pool) {
    for (double v : s.dense()) {
      if (!seen) {
        mn = mx = v;
        seen = true;
      } else {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
    }
  }
  if (!seen) {
    throw DataError("fit_min_max: empty pool");
  }
  if (!(mx > mn)) {
    throw DataError("fit_min_max: constant pool, min == max == " +
                    std::to_string(mn));
  }
  return ScalingParams{mn, mx};
}

TimeSeries apply_min_max(const TimeSeries& series,
                         const ScalingParams& params) {
  TimeSeries out = series;
  for (auto& v : out.values) {
    if (!v.has_value()) {
      throw DataError("apply_min_max: missing value in series " +
                      series.series_id);
    }
    v = params.apply(*v);
  }
  return out;
}

std::vector<WindowedSample> make_windows(const TimeSeries& series,
                                         int context_length, int horizon,
                                         int stride) {
  if (context_length < 1 || horizon < 1 || stride < 1) {
    throw ConfigError("make_windows: context, horizon and stride must be positive");
  }
  const std::vector<double> x = series.dense();
  const int total = context_length + horizon;
  std::vector<WindowedSample> windows;
  for (int start = 0; start + total <= static_cast<int>(x.size());
       start += stride) {
    WindowedSample w;
    w.patient_id = series.patient_id;
    w.series_id = series.series_id;
    w.context.assign(x.begin() + start, x.begin() + start + context_length);
    w.horizon.assign(x.begin() + start + context_length,
                     x.begin() + start + total);
    windows.push_back(std::move(w));
  }
  return windows;
}

Dataset split_dataset(const std::vector<WindowedSample>& samples,
                      uint64_t seed) {
  if (samples.size() < 10) {
    throw DataError("split_dataset: need at least 10 samples, got " +
                    std::to_string(samples.size()));
  }

  // Group windows by patient; groups move between splits as a unit.
  std::map<std::string, std::vector<int>> by_patient;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
    by_patient[samples[i].patient_id].push_back(i);
  }
  if (by_patient.size() < 3) {
    throw DataError("split_dataset: need at least 3 patient groups, got " +
                    std::to_string(by_patient.size()));
  }

  std::vector<std::string> patients;
  patients.reserve(by_patient.size());
  for (const auto& [id, idx] : by_patient) {
    patients.push_back(id);
  }
  Rng rng(seed);
  for (int i = static_cast<int>(patients.size()) - 1; i > 0; --i) {
    std::swap(patients[i], patients[rng.uniform_int(0, i)]);
  }

  const double total = static_cast<double>(samples.size());
  const double train_target = 0.8 * total;
  const double val_target = 0.1 * total;

  Dataset ds;
  if (!samples.empty()) {
    ds.context_length = static_cast<int>(samples.front().context.size());
    ds.horizon = static_cast<int>(samples.front().horizon.size());
  }
  size_t cursor = 0;
  // Groups are taken while they bring the split closer to its target, so
  // each split size lands within one group of the exact ratio. Later
  // splits keep a reserve so none of them comes out empty.
  auto take_into = [&](std::vector<WindowedSample>& split, double target,
                       size_t reserve) {
    double count = 0.0;
    while (cursor + reserve < patients.size()) {
      const double group = static_cast<double>(by_patient[patients[cursor]].size());
      if (count > 0.0 &&
          std::abs(count + group - target) >= std::abs(count - target)) {
        break;
      }
      for (int idx : by_patient[patients[cursor]]) {
        split.push_back(samples[idx]);
      }
      count += group;
      ++cursor;
    }
  };
  take_into(ds.train, train_target, 2);
  take_into(ds.val, val_target, 1);
  while (cursor < patients.size()) {
    for (int idx : by_patient[patients[cursor]]) {
      ds.test.push_back(samples[idx]);
    }
    ++cursor;
  }
  if (ds.train.empty() || ds.val.empty() || ds.test.empty()) {
    throw DataError("split_dataset: a split came out empty; too few groups");
  }
  return ds;
}

namespace {

struct RegimeConstants {
  double baseline_lo, baseline_hi;
  double amplitude_lo, amplitude_hi;
  double period_lo, period_hi;  // in samples
  double ar_coeff;
  double noise_lo, noise_hi;
};

// Constants documented in the README (synthetic data section). The source
// regime is fast and noisy, the target regime drifts slowly with milder
// noise, so adapting from one to the other changes both the temporal
// mixing and the predictive spread.
RegimeConstants regime_constants(Regime regime, Vital vital) {
  if (regime == Regime::source) {
    return {20.0, 80.0, 2.0, 8.0, 6.0, 20.0, 0.5, 2.5, 6.0};
  }
  if (vital == Vital::MeanBP) {
    return {65.0, 95.0, 10.0, 18.0, 36.0, 60.0, 0.5, 1.0, 2.0};
  }
  return {60.0, 100.0, 8.0, 14.0, 36.0, 60.0, 0.5, 1.0, 2.0};
}

}  // namespace

std::vector<TimeSeries> generate_synthetic(int n_patients, int series_len,
                                           Regime regime, uint64_t seed,
                                           std::optional<Vital> vital,
                                           double missing_prob) {
  if (series_len < 108) {
    throw ConfigError("generate_synthetic: series_len must be >= 108, got " +
                      std::to_string(series_len));
  }
  if (n_patients < 1) {
    throw ConfigError("generate_synthetic: n_patients must be positive");
  }

  const std::string prefix = regime == Regime::source ? "src" : "tgt";
  Rng rng(seed);
  std::vector<TimeSeries> corpus;
  corpus.reserve(n_patients);
  for (int p = 0; p < n_patients; ++p) {
    TimeSeries s;
    s.patient_id = prefix + "-p" + std::to_string(p);
    s.series_id = s.patient_id + "-s0";
    s.vital = vital.value_or(p % 2 == 0 ? Vital::MeanBP : Vital::HeartRate);

    const RegimeConstants c = regime_constants(regime, s.vital);
    const double baseline = rng.uniform(c.baseline_lo, c.baseline_hi);
    const double amplitude = rng.uniform(c.amplitude_lo, c.amplitude_hi);
    const double period = rng.uniform(c.period_lo, c.period_hi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double noise_std = rng.uniform(c.noise_lo, c.noise_hi);

    s.values.resize(series_len);
    double ar = 0.0;
    for (int i = 0; i < series_len; ++i) {
      ar = c.ar_coeff * ar + noise_std * rng.gaussian();
      const double v = baseline +
                       amplitude * std::sin(2.0 * std::numbers::pi * i / period +
                                            phase) +
                       ar;
      // The missing draw happens for every sample so corpora with and
      // without missingness share the underlying values.
      const bool missing = rng.uniform() < missing_prob;
      s.values[i] = missing ? std::optional<double>{} : std::optional<double>{v};
    }
    // Keep the series usable even in pathological draws.
    if (!std::any_of(s.values.begin(), s.values.end(),
                     [](const auto& v) { return v.has_value(); })) {
      s.values[0] = baseline;
    }
    corpus.push_back(std::move(s));
  }
  return corpus;
}

namespace {

// Timestamps count forward from 2024-01-01T00:00:00Z. Proper civil-date
// rollover so long series stay valid ISO-8601.
std::string timestamp_at(int step_index, int step_minutes) {
  const long total_minutes = static_cast<long>(step_index) * step_minutes;
  long days = total_minutes / (24 * 60);
  const long rem = total_minutes % (24 * 60);

  // Days-to-civil (Gregorian), anchored at 2024-01-01.
  long z = days + 739191;  // 2024-01-01 in days since 0000-03-01
  const long era = z / 146097;
  const long doe = z - era * 146097;
  const long yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const long y = yoe + era * 400;
  const long doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const long mp = (5 * doy + 2) / 153;
  const long d = doy - (153 * mp + 2) / 5 + 1;
  const long m = mp < 10 ? mp + 3 : mp - 9;
  const long year = m <= 2 ? y + 1 : y;

  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04ld-%02ld-%02ldT%02ld:%02ld:00Z", year, m,
                d, rem / 60, rem % 60);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    fields.push_back(field);
  }
  if (!line.empty() && line.back() == ',') {
    fields.push_back("");
  }
  return fields;
}

}  // namespace

void write_series_csv(const std::vector<TimeSeries>& series,
                      const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << "patient_id,series_id,vital,timestamp,value\n";
  char buf[32];
  for (const TimeSeries& s : series) {
    for (size_t i = 0; i < s.values.size(); ++i) {
      out << s.patient_id << ',' << s.series_id << ',' << to_string(s.vital)
          << ',' << timestamp_at(static_cast<int>(i), s.step_minutes) << ',';
      if (s.values[i].has_value()) {
        std::snprintf(buf, sizeof(buf), "%.17g", *s.values[i]);
        out << buf;
      }
      out << '\n';
    }
  }
}

std::vector<TimeSeries> read_series_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open: " + path.string());
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("empty CSV: " + path.string());
  }
  if (line != "patient_id,series_id,vital,timestamp,value") {
    throw DataError("unexpected CSV header in " + path.string() + ": " + line);
  }

  struct Row {
    std::string timestamp;
    std::optional<double> value;
  };
  // Keyed by (series_id, vital) with the patient recorded alongside.
  std::map<std::pair<std::string, std::string>,
           std::pair<std::string, std::vector<Row>>>
      groups;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    const auto fields = split_csv_line(line);
    if (fields.size() != 5) {
      throw DataError("CSV line " + std::to_string(line_no) + ": expected 5 fields, got " +
                      std::to_string(fields.size()));
    }
    Row row;
    row.timestamp = fields[3];
    if (!fields[4].empty()) {
      try {
        row.value = std::stod(fields[4]);
      } catch (const std::exception&) {
        throw DataError("CSV line " + std::to_string(line_no) +
                        ": bad value '" + fields[4] + "'");
      }
      if (!std::isfinite(*row.value)) {
        throw DataError("CSV line " + std::to_string(line_no) +
                        ": non-finite value");
      }
    }
    auto& slot = groups[{fields[1], fields[2]}];
    slot.first = fields[0];
    slot.second.push_back(std::move(row));
  }

  std::vector<TimeSeries> series;
  series.reserve(groups.size());
  for (auto& [key, slot] : groups) {
    TimeSeries s;
    s.series_id = key.first;
    s.vital = vital_from_string(key.second);
    s.patient_id = slot.first;
    // ISO-8601 with a fixed layout sorts lexicographically.
    std::stable_sort(slot.second.begin(), slot.second.end(),
                     [](const Row& a, const Row& b) {
                       return a.timestamp < b.timestamp;
                     });
    s.values.reserve(slot.second.size());
    for (const Row& r : slot.second) {
      s.values.push_back(r.value);
    }
    series.push_back(std::move(s));
  }
  return series;
}

Dataset prepare_dataset(const std::vector<TimeSeries>& raw, Vital vital,
                        int filter_window, int stride, uint64_t seed) {
  std::vector<TimeSeries> processed;
  for (const TimeSeries& s : raw) {
    if (s.vital != vital) {
      continue;
    }
    processed.push_back(low_pass_filter(forward_fill(s), filter_window));
  }
  if (processed.empty()) {
    throw DataError("prepare_dataset: no series for vital " + to_string(vital));
  }
  const ScalingParams scaling = fit_min_max(processed);

  std::vector<WindowedSample> samples;
  for (const TimeSeries& s : processed) {
    const TimeSeries scaled = apply_min_max(s, scaling);
    auto windows = make_windows(scaled, 72, 36, stride);
    samples.insert(samples.end(), windows.begin(), windows.end());
  }

  Dataset ds = split_dataset(samples, seed);
  ds.vital = vital;
  ds.scaling = scaling;
  return ds;
}

}  // namespace tslora
