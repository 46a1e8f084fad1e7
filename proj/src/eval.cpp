#include "tslora/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "tslora/rng.hpp"

namespace tslora {

std::string to_string(Setting s) {
  switch (s) {
    case Setting::zero_shot: return "zero_shot";
    case Setting::full_ft: return "full_ft";
    case Setting::lora_ft: return "lora_ft";
  }
  return "?";
}

Setting setting_from_string(const std::string& s) {
  if (s == "zero_shot") return Setting::zero_shot;
  if (s == "full_ft") return Setting::full_ft;
  if (s == "lora_ft") return Setting::lora_ft;
  throw ConfigError("unknown setting: '" + s + "'");
}

double mse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw ContractError("mse: length mismatch (" + std::to_string(pred.size()) +
                        " vs " + std::to_string(truth.size()) + ")");
  }
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

double mape(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw ContractError("mape: length mismatch (" + std::to_string(pred.size()) +
                        " vs " + std::to_string(truth.size()) + ")");
  }
  constexpr double eps = 1e-8;
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    acc += std::abs(pred[i] - truth[i]) / std::max(std::abs(truth[i]), eps);
  }
  return 100.0 * acc / static_cast<double>(pred.size());
}

double dtw_distance(std::span<const double> a, std::span<const double> b) {
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());
  if (n < 1 || m < 1) {
    throw ContractError("dtw_distance: empty input");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Rolling rows of the cumulative-cost table.
  std::vector<double> prev(m + 1, inf);
  std::vector<double> curr(m + 1, inf);
  prev[0] = 0.0;
  for (int i = 1; i <= n; ++i) {
    curr[0] = inf;
    for (int j = 1; j <= m; ++j) {
      const double cost = std::abs(a[i - 1] - b[j - 1]);
      curr[j] = cost + std::min({prev[j], curr[j - 1], prev[j - 1]});
    }
    std::swap(prev, curr);
  }
  return prev[m];
}

std::vector<double> aggregate_median(const Matrix& paths) {
  if (paths.rows < 1 || paths.cols < 1) {
    throw ContractError("aggregate_median: empty path matrix");
  }
  std::vector<double> column(paths.rows);
  std::vector<double> medians(paths.cols);
  for (int j = 0; j < paths.cols; ++j) {
    for (int i = 0; i < paths.rows; ++i) {
      column[i] = paths(i, j);
    }
    std::sort(column.begin(), column.end());
    const int n = paths.rows;
    medians[j] = n % 2 == 1
                     ? column[n / 2]
                     : 0.5 * (column[n / 2 - 1] + column[n / 2]);
  }
  return medians;
}

PathSampler model_sampler(const Forecaster& model, const AdapterMap* adapters) {
  return [&model, adapters](std::span<const double> context, int h,
                            int n_samples, uint64_t seed) {
    return model.sample_forecast(context, h, n_samples, seed, adapters);
  };
}

MetricsReport evaluate_model(const PathSampler& sampler,
                             const std::vector<WindowedSample>& test,
                             const ScalingParams& scaling,
                             const EvalProtocol& protocol,
                             std::string model_label, Setting setting,
                             Vital vital) {
  if (test.empty()) {
    throw DataError("evaluate_model: empty test set");
  }
  if (protocol.n_samples < 1 || protocol.n_runs < 1) {
    throw ConfigError("evaluate_model: n_samples and n_runs must be positive");
  }

  MetricsReport report;
  report.model_label = std::move(model_label);
  report.setting = setting;
  report.vital = vital;

  for (int run = 0; run < protocol.n_runs; ++run) {
    // Run seeds are seed + run index; windows get sub-streams.
    const uint64_t run_seed = protocol.seed + static_cast<uint64_t>(run);
    double mse_acc = 0.0;
    double dtw_acc = 0.0;
    double mape_acc = 0.0;
    for (size_t w = 0; w < test.size(); ++w) {
      const WindowedSample& window = test[w];
      const int h = static_cast<int>(window.horizon.size());
      const Matrix paths = sampler(window.context, h, protocol.n_samples,
                                   mix_seed(run_seed, w));
      const std::vector<double> median = aggregate_median(paths);

      mse_acc += mse(median, window.horizon);
      dtw_acc += dtw_distance(median, window.horizon);

      std::vector<double> pred_raw(median.size());
      std::vector<double> truth_raw(window.horizon.size());
      for (size_t i = 0; i < median.size(); ++i) {
        pred_raw[i] = scaling.invert(median[i]);
        truth_raw[i] = scaling.invert(window.horizon[i]);
      }
      mape_acc += mape(pred_raw, truth_raw);
    }
    const double n = static_cast<double>(test.size());
    report.mse_runs.push_back(mse_acc / n);
    report.dtw_runs.push_back(dtw_acc / n);
    report.mape_runs.push_back(mape_acc / n);
  }

  auto mean = [](const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) {
      acc += x;
    }
    return acc / static_cast<double>(v.size());
  };
  report.mse = mean(report.mse_runs);
  report.dtw = mean(report.dtw_runs);
  report.mape = mean(report.mape_runs);
  return report;
}

std::vector<RankSweepRow> rank_sweep(const Forecaster& base,
                                     const Dataset& data,
                                     std::vector<int> ranks, double alpha,
                                     const TrainConfig& train_config,
                                     const EvalProtocol& protocol) {
  if (ranks.empty()) {
    throw ConfigError("rank_sweep: no ranks given");
  }
  // Validate everything before any training starts.
  for (int r : ranks) {
    if (r < 1 || r > base.config().d_model) {
      throw RankError("rank_sweep: rank " + std::to_string(r) +
                      " outside [1, " + std::to_string(base.config().d_model) +
                      "]");
    }
  }
  std::sort(ranks.begin(), ranks.end());
  const auto dup = std::unique(ranks.begin(), ranks.end());
  if (dup != ranks.end()) {
    std::cerr << "rank_sweep: duplicate ranks dropped\n";
    ranks.erase(dup, ranks.end());
  }

  std::vector<RankSweepRow> rows;
  rows.reserve(ranks.size());
  for (int r : ranks) {
    AdaptedModel adapted =
        inject_lora(base, {'q', 'k', 'v', 'o'}, r, alpha, train_config.seed);
    TrainConfig cfg = train_config;
    cfg.mode = TrainMode::lora_ft;
    train_loop(adapted, data, cfg);

    const MetricsReport report = evaluate_model(
        model_sampler(adapted.base, &adapted.adapters), data.test,
        data.scaling, protocol, "toy", Setting::lora_ft, data.vital);

    RankSweepRow row;
    row.rank = r;
    row.trainable_params = trainable_param_count(adapted);
    row.mse = report.mse;
    row.dtw = report.dtw;
    row.mape = report.mape;
    rows.push_back(row);
  }
  return rows;
}

std::vector<TradeoffRow> param_tradeoff(
    const std::vector<MetricsReport>& reports) {
  if (reports.empty()) {
    throw ContractError("param_tradeoff: no reports");
  }
  std::vector<TradeoffRow> rows;
  rows.reserve(reports.size());
  for (const MetricsReport& r : reports) {
    TradeoffRow row;
    row.label = r.model_label + "/" + to_string(r.setting) + "/" +
                to_string(r.vital);
    row.total_params = r.total_params;
    row.finetuned_params = r.trainable_params;
    row.mape = r.mape;
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_report_long_csv(const std::vector<MetricsReport>& reports,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << "model,setting,vital,metric,run,value\n";
  for (const MetricsReport& r : reports) {
    auto emit = [&](const char* metric, const std::vector<double>& runs) {
      for (size_t i = 0; i < runs.size(); ++i) {
        out << r.model_label << ',' << to_string(r.setting) << ','
            << to_string(r.vital) << ',' << metric << ',' << i << ','
            << format_double(runs[i]) << '\n';
      }
    };
    emit("mse", r.mse_runs);
    emit("dtw", r.dtw_runs);
    emit("mape", r.mape_runs);
  }
}

std::vector<MetricsReport> read_report_long_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open: " + path.string());
  }
  std::string line;
  if (!std::getline(in, line) || line != "model,setting,vital,metric,run,value") {
    throw DataError(path.string() + ": unexpected report header");
  }
  // Keyed by (model, setting, vital) in file order.
  std::vector<MetricsReport> reports;
  std::map<std::string, size_t> index;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::stringstream ss(line);
    std::string model, setting, vital, metric, run, value;
    if (!std::getline(ss, model, ',') || !std::getline(ss, setting, ',') ||
        !std::getline(ss, vital, ',') || !std::getline(ss, metric, ',') ||
        !std::getline(ss, run, ',') || !std::getline(ss, value)) {
      throw DataError(path.string() + ": bad report line '" + line + "'");
    }
    const std::string key = model + '\n' + setting + '\n' + vital;
    if (!index.contains(key)) {
      index[key] = reports.size();
      MetricsReport r;
      r.model_label = model;
      r.setting = setting_from_string(setting);
      r.vital = vital_from_string(vital);
      reports.push_back(std::move(r));
    }
    MetricsReport& r = reports[index[key]];
    const double v = std::stod(value);
    if (metric == "mse") r.mse_runs.push_back(v);
    else if (metric == "dtw") r.dtw_runs.push_back(v);
    else if (metric == "mape") r.mape_runs.push_back(v);
    else throw DataError(path.string() + ": unknown metric '" + metric + "'");
  }
  for (MetricsReport& r : reports) {
    auto mean = [](const std::vector<double>& v) {
      double acc = 0.0;
      for (double x : v) acc += x;
      return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
    };
    r.mse = mean(r.mse_runs);
    r.dtw = mean(r.dtw_runs);
    r.mape = mean(r.mape_runs);
  }
  return reports;
}

void write_report_wide_csv(const std::vector<MetricsReport>& reports,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  // Row per (model, setting), vitals side by side.
  std::set<std::string> vitals;
  for (const MetricsReport& r : reports) {
    vitals.insert(to_string(r.vital));
  }
  out << "model,setting";
  for (const std::string& v : vitals) {
    out << ',' << v << "_mse," << v << "_dtw," << v << "_mape";
  }
  out << '\n';

  std::vector<std::pair<std::string, std::string>> row_keys;
  std::map<std::pair<std::string, std::string>,
           std::map<std::string, const MetricsReport*>>
      cells;
  for (const MetricsReport& r : reports) {
    const auto key = std::make_pair(r.model_label, to_string(r.setting));
    if (!cells.contains(key)) {
      row_keys.push_back(key);
    }
    cells[key][to_string(r.vital)] = &r;
  }
  for (const auto& key : row_keys) {
    out << key.first << ',' << key.second;
    for (const std::string& v : vitals) {
      const auto it = cells[key].find(v);
      if (it == cells[key].end()) {
        out << ",,,";
      } else {
        out << ',' << format_double(it->second->mse) << ','
            << format_double(it->second->dtw) << ','
            << format_double(it->second->mape);
      }
    }
    out << '\n';
  }
}

void write_tradeoff_csv(const std::vector<TradeoffRow>& rows,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << "label,total_params,finetuned_params,mape\n";
  for (const TradeoffRow& r : rows) {
    out << r.label << ',' << r.total_params << ',' << r.finetuned_params << ','
        << format_double(r.mape) << '\n';
  }
}

void write_rank_sweep_csv(const std::vector<RankSweepRow>& rows,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << "rank,trainable_params,mse,dtw,mape\n";
  for (const RankSweepRow& r : rows) {
    out << r.rank << ',' << r.trainable_params << ',' << format_double(r.mse)
        << ',' << format_double(r.dtw) << ',' << format_double(r.mape) << '\n';
  }
}

}  // namespace tslora
