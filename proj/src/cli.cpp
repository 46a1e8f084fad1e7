#include "tslora/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tslora/checkpoint.hpp"
#include "tslora/data.hpp"
#include "tslora/eval.hpp"
#include "tslora/lora.hpp"
#include "tslora/model.hpp"
#include "tslora/training.hpp"

namespace fs = std::filesystem;

namespace tslora {

namespace {

// Run record written next to every command's artifacts, also on failure.
class Manifest {
 public:
  Manifest(std::string command, fs::path out_dir)
      : command_(std::move(command)),
        out_dir_(std::move(out_dir)),
        start_(std::chrono::steady_clock::now()) {}

  void arg(const std::string& key, const std::string& value) {
    args_.emplace_back(key, value);
  }
  void arg(const std::string& key, long value) {
    arg(key, std::to_string(value));
  }
  void arg(const std::string& key, double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g", value);
    arg(key, std::string(buf));
  }
  void artifact(const fs::path& path) { artifacts_.push_back(path.string()); }

  void write(const std::string& status, const std::string& error) const {
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    std::ofstream out(out_dir_ / "manifest.txt");
    if (!out) {
      return;  // best effort; the failure is already on stderr
    }
    const double wall = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - start_)
                            .count();
    out << "tslora-manifest v1\n";
    out << "command " << command_ << '\n';
    out << "version " << kToolVersion << '\n';
    out << "status " << status << '\n';
    if (!error.empty()) {
      out << "error " << error << '\n';
    }
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.3f", wall);
    out << "wall_seconds " << buf << '\n';
    for (const auto& [k, v] : args_) {
      out << "arg " << k << ' ' << v << '\n';
    }
    for (const std::string& a : artifacts_) {
      out << "artifact " << a << '\n';
    }
  }

 private:
  std::string command_;
  fs::path out_dir_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> args_;
  std::vector<std::string> artifacts_;
};

std::optional<Vital> parse_vital_choice(const std::string& s) {
  if (s == "both") {
    return std::nullopt;
  }
  return vital_from_string(s);
}

std::vector<Vital> vitals_in(const std::vector<TimeSeries>& corpus) {
  std::vector<Vital> vitals;
  for (Vital v : {Vital::MeanBP, Vital::HeartRate}) {
    for (const TimeSeries& s : corpus) {
      if (s.vital == v) {
        vitals.push_back(v);
        break;
      }
    }
  }
  return vitals;
}

fs::path dataset_path(const fs::path& dir, Vital vital) {
  return dir / (to_string(vital) + ".tsds");
}

Dataset load_vital_dataset(const fs::path& data_dir, Vital vital) {
  const fs::path p = dataset_path(data_dir, vital);
  if (!fs::exists(p)) {
    throw DataError("no dataset for " + to_string(vital) + " under " +
                    data_dir.string() + " (expected " + p.string() + ")");
  }
  return load_dataset(p);
}

// Union of every per-vital dataset in the directory; windows are already
// normalized per vital, so pretraining pools them directly.
Dataset load_merged_datasets(const fs::path& data_dir) {
  Dataset merged;
  bool any = false;
  for (Vital v : {Vital::MeanBP, Vital::HeartRate}) {
    const fs::path p = dataset_path(data_dir, v);
    if (!fs::exists(p)) {
      continue;
    }
    Dataset ds = load_dataset(p);
    merged.train.insert(merged.train.end(), ds.train.begin(), ds.train.end());
    merged.val.insert(merged.val.end(), ds.val.begin(), ds.val.end());
    merged.test.insert(merged.test.end(), ds.test.begin(), ds.test.end());
    if (!any) {
      merged.vital = ds.vital;
      merged.scaling = ds.scaling;
      merged.context_length = ds.context_length;
      merged.horizon = ds.horizon;
    }
    any = true;
  }
  if (!any) {
    throw DataError("no .tsds datasets under " + data_dir.string());
  }
  return merged;
}

long total_with_adapters(const Forecaster& model, const AdapterMap& adapters) {
  long total = model.total_param_count();
  for (const auto& [name, a] : adapters) {
    total += a.param_count();
  }
  return total;
}

// Sub-seeds for compare's stages, fixed offsets from the root seed.
enum SeedOffset : uint64_t {
  kSynthSource = 11,
  kSynthTarget = 12,
  kPrepareSource = 13,
  kPrepareTarget = 14,
  kBuildModel = 15,
  kPretrain = 16,
  kFinetuneFull = 20,
  kFinetuneLora = 30,
  kInject = 40,
  kEvaluate = 50,
};

struct CompareScale {
  int source_patients = 32;
  int source_length = 216;
  int target_patients = 40;  // per vital
  int target_length = 108;
  int epochs_pretrain = 30;
  int epochs_finetune = 30;
  int batch_size = 16;
  int rank = 2;
  double alpha = 16.0;
  int n_samples = 20;
  int n_runs = 10;
};

struct CompareResult {
  std::vector<MetricsReport> reports;
};

// Shared by `compare` and reused (with a smaller scale) in tests: the full
// zero-shot / full-ft / lora-ft matrix on synthetic corpora.
CompareResult run_compare(const CompareScale& scale, uint64_t seed,
                          const fs::path& out, Manifest& manifest) {
  // Source corpus mixes both vitals; the target corpus is generated per
  // vital so each vital sees the same number of patients.
  const auto source = generate_synthetic(scale.source_patients,
                                         scale.source_length, Regime::source,
                                         seed + kSynthSource);
  std::vector<TimeSeries> target;
  {
    int offset = 0;
    for (Vital v : {Vital::MeanBP, Vital::HeartRate}) {
      auto part = generate_synthetic(scale.target_patients,
                                     scale.target_length, Regime::target,
                                     seed + kSynthTarget + offset, v);
      // Patient ids must stay distinct across the two generations.
      for (TimeSeries& s : part) {
        s.patient_id = to_string(v) + "-" + s.patient_id;
        s.series_id = s.patient_id + "-s0";
      }
      target.insert(target.end(), part.begin(), part.end());
      ++offset;
    }
  }
  write_series_csv(source, out / "source.csv");
  manifest.artifact(out / "source.csv");
  write_series_csv(target, out / "target.csv");
  manifest.artifact(out / "target.csv");

  // Pretraining pool across both vitals of the source regime.
  Dataset source_merged;
  {
    bool first = true;
    for (Vital v : vitals_in(source)) {
      Dataset ds = prepare_dataset(source, v, 5, 36, seed + kPrepareSource);
      save_dataset(ds, dataset_path(out, v));
      if (first) {
        source_merged = ds;
        first = false;
      } else {
        source_merged.train.insert(source_merged.train.end(),
                                   ds.train.begin(), ds.train.end());
        source_merged.val.insert(source_merged.val.end(), ds.val.begin(),
                                 ds.val.end());
        source_merged.test.insert(source_merged.test.end(), ds.test.begin(),
                                  ds.test.end());
      }
    }
  }

  Forecaster base(ModelConfig{}, seed + kBuildModel);
  {
    TrainConfig cfg;
    cfg.mode = TrainMode::pretrain;
    cfg.learning_rate = default_learning_rate(TrainMode::pretrain);
    cfg.epochs = scale.epochs_pretrain;
    cfg.batch_size = scale.batch_size;
    cfg.seed = seed + kPretrain;
    const TrainHistory history = train_loop(base, source_merged, cfg);
    write_history_csv(history, out / "pretrain_history.csv");
    manifest.artifact(out / "pretrain_history.csv");
  }
  save_model(base, out / "base.ckpt");
  manifest.artifact(out / "base.ckpt");

  CompareResult result;
  int vital_index = 0;
  for (Vital vital : {Vital::MeanBP, Vital::HeartRate}) {
    const std::string vital_name = to_string(vital);
    Dataset ds = prepare_dataset(target, vital, 5, 36,
                                 seed + kPrepareTarget + vital_index);
    save_dataset(ds, dataset_path(out, vital));
    manifest.artifact(dataset_path(out, vital));

    const EvalProtocol protocol{scale.n_samples, scale.n_runs,
                                seed + kEvaluate + 10u * vital_index};

    // Zero-shot: the pretrained base as is.
    MetricsReport zero =
        evaluate_model(model_sampler(base), ds.test, ds.scaling, protocol,
                       "toy", Setting::zero_shot, vital);
    zero.trainable_params = 0;
    zero.total_params = base.total_param_count();
    result.reports.push_back(zero);

    // Full fine-tuning on a copy of the base.
    {
      Forecaster full = base;
      TrainConfig cfg;
      cfg.mode = TrainMode::full_ft;
      cfg.learning_rate = default_learning_rate(TrainMode::full_ft);
      cfg.epochs = scale.epochs_finetune;
      cfg.batch_size = scale.batch_size;
      cfg.seed = seed + kFinetuneFull + vital_index;
      const TrainHistory history = train_loop(full, ds, cfg);
      write_history_csv(history, out / ("full_ft_" + vital_name + "_history.csv"));
      manifest.artifact(out / ("full_ft_" + vital_name + "_history.csv"));
      save_model(full, out / ("full_" + vital_name + ".ckpt"));
      manifest.artifact(out / ("full_" + vital_name + ".ckpt"));

      MetricsReport report =
          evaluate_model(model_sampler(full), ds.test, ds.scaling, protocol,
                         "toy", Setting::full_ft, vital);
      report.trainable_params = full.total_param_count();
      report.total_params = full.total_param_count();
      result.reports.push_back(report);
    }

    // LoRA fine-tuning on the frozen base.
    {
      AdaptedModel adapted =
          inject_lora(base, {'q', 'k', 'v', 'o'}, scale.rank, scale.alpha,
                      seed + kInject + vital_index);
      TrainConfig cfg;
      cfg.mode = TrainMode::lora_ft;
      cfg.learning_rate = default_learning_rate(TrainMode::lora_ft);
      cfg.epochs = scale.epochs_finetune;
      cfg.batch_size = scale.batch_size;
      cfg.seed = seed + kFinetuneLora + vital_index;
      const TrainHistory history = train_loop(adapted, ds, cfg);
      write_history_csv(history, out / ("lora_ft_" + vital_name + "_history.csv"));
      manifest.artifact(out / ("lora_ft_" + vital_name + "_history.csv"));
      save_adapters(adapted.adapters,
                    out / ("adapters_" + vital_name + ".bin"));
      manifest.artifact(out / ("adapters_" + vital_name + ".bin"));

      MetricsReport report = evaluate_model(
          model_sampler(adapted.base, &adapted.adapters), ds.test, ds.scaling,
          protocol, "toy", Setting::lora_ft, vital);
      report.trainable_params = trainable_param_count(adapted);
      report.total_params = total_with_adapters(adapted.base, adapted.adapters);
      result.reports.push_back(report);
    }
    ++vital_index;
  }

  write_report_long_csv(result.reports, out / "report_long.csv");
  manifest.artifact(out / "report_long.csv");
  write_report_wide_csv(result.reports, out / "report_wide.csv");
  manifest.artifact(out / "report_wide.csv");
  write_tradeoff_csv(param_tradeoff(result.reports), out / "param_tradeoff.csv");
  manifest.artifact(out / "param_tradeoff.csv");
  return result;
}

// Expands `--config FILE` into --key=value tokens for every file entry
// whose flag is absent from the command line.
std::vector<std::string> expand_config_file(int argc,
                                            const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);

  std::string config_path;
  size_t config_at = 0;
  for (size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      config_at = i;
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      config_at = i;
      break;
    }
  }
  if (config_path.empty()) {
    return args;
  }

  std::ifstream in(config_path);
  if (!in) {
    throw ConfigError("--config: cannot open '" + config_path + "'");
  }
  auto flag_given = [&](const std::string& key) {
    const std::string plain = "--" + key;
    const std::string assigned = plain + "=";
    for (size_t i = 1; i < args.size(); ++i) {
      if (i == config_at) {
        continue;
      }
      if (args[i] == plain || args[i].rfind(assigned, 0) == 0) {
        return true;
      }
    }
    return false;
  };

  std::vector<std::string> injected;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--config: line " + std::to_string(line_no) +
                        " is not key=value: '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (!flag_given(key)) {
      injected.push_back("--" + key + "=" + value);
    }
  }

  // Inject right after the subcommand name (argv[1]).
  std::vector<std::string> out;
  out.reserve(args.size() + injected.size());
  out.push_back(args[0]);
  if (args.size() > 1) {
    out.push_back(args[1]);
  }
  out.insert(out.end(), injected.begin(), injected.end());
  for (size_t i = 2; i < args.size(); ++i) {
    out.push_back(args[i]);
  }
  return out;
}

std::vector<int> parse_rank_list(const std::string& text) {
  std::vector<int> ranks;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (token.empty()) {
      continue;
    }
    try {
      size_t used = 0;
      const int r = std::stoi(token, &used);
      if (used != token.size()) {
        throw std::invalid_argument(token);
      }
      ranks.push_back(r);
    } catch (const std::exception&) {
      throw ConfigError("ranks: '" + token + "' is not an integer");
    }
  }
  if (ranks.empty()) {
    throw ConfigError("ranks: empty list");
  }
  return ranks;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Toy transformer forecaster with low-rank adaptation"};
  app.require_subcommand(1);

  // Every subcommand takes an optional key=value config file; flags win
  // over file values, file values win over defaults. The file is applied
  // by injecting --key=value tokens for keys no flag already sets, before
  // CLI11 parses.
  auto with_config = [](CLI::App* sub) {
    sub->add_option("--config",
                    "Optional key=value config file; flags take precedence");
    return sub;
  };

  // ---- synth ----
  auto* synth = with_config(app.add_subcommand(
      "synth", "Generate a synthetic vital-sign corpus as CSV"));
  struct {
    std::string regime = "target";
    int patients = 40;
    int length = 108;
    std::string vital = "both";
    double missing_prob = 0.03;
    uint64_t seed = 0;
    std::string out = "synth_out";
  } synth_opt;
  synth->add_option("--regime", synth_opt.regime, "source or target regime")
      ->check(CLI::IsMember({"source", "target"}))
      ->capture_default_str();
  synth->add_option("--patients", synth_opt.patients, "number of patients")
      ->capture_default_str();
  synth->add_option("--length", synth_opt.length,
                    "series length in 5-minute steps (>= 108)")
      ->capture_default_str();
  synth->add_option("--vital", synth_opt.vital,
                    "MeanBP, HeartRate, or both (alternating)")
      ->check(CLI::IsMember({"MeanBP", "HeartRate", "both"}))
      ->capture_default_str();
  synth->add_option("--missing-prob", synth_opt.missing_prob,
                    "per-sample missingness probability")
      ->capture_default_str();
  synth->add_option("--seed", synth_opt.seed, "root seed")
      ->capture_default_str();
  synth->add_option("--out", synth_opt.out, "output directory")
      ->capture_default_str();

  // ---- prepare ----
  auto* prepare = with_config(app.add_subcommand(
      "prepare", "Run the preprocessing pipeline: fill, filter, scale, "
                 "window, split"));
  struct {
    std::string input;
    int filter_window = 5;
    int stride = 36;
    uint64_t seed = 0;
    std::string out = "prepare_out";
  } prep_opt;
  prepare->add_option("--input", prep_opt.input, "input series CSV")
      ->required();
  prepare->add_option("--filter-window", prep_opt.filter_window,
                      "moving-average window (odd)")
      ->capture_default_str();
  prepare->add_option("--stride", prep_opt.stride, "window stride in steps")
      ->capture_default_str();
  prepare->add_option("--seed", prep_opt.seed, "split shuffle seed")
      ->capture_default_str();
  prepare->add_option("--out", prep_opt.out, "output directory")
      ->capture_default_str();

  // ---- pretrain ----
  auto* pretrain = with_config(app.add_subcommand(
      "pretrain", "Train a fresh model on every dataset in a directory"));
  struct {
    std::string data;
    int epochs = 30;
    double lr = 1e-3;
    int batch = 16;
    int patience = 5;
    uint64_t seed = 0;
    std::string out = "pretrain_out";
  } pre_opt;
  pretrain->add_option("--data", pre_opt.data, "directory with .tsds files")
      ->required();
  pretrain->add_option("--epochs", pre_opt.epochs, "training epochs")
      ->capture_default_str();
  pretrain->add_option("--lr", pre_opt.lr, "learning rate")
      ->capture_default_str();
  pretrain->add_option("--batch", pre_opt.batch, "minibatch size")
      ->capture_default_str();
  pretrain->add_option("--patience", pre_opt.patience,
                       "early-stopping patience (0 disables)")
      ->capture_default_str();
  pretrain->add_option("--seed", pre_opt.seed, "root seed")
      ->capture_default_str();
  pretrain->add_option("--out", pre_opt.out, "output directory")
      ->capture_default_str();

  // ---- finetune ----
  auto* finetune = with_config(app.add_subcommand(
      "finetune", "Fine-tune a checkpoint on one vital's dataset"));
  struct {
    std::string model;
    std::string data;
    std::string vital = "MeanBP";
    std::string mode = "lora";
    int rank = 2;
    double alpha = 16.0;
    double lr = 0.0;  // 0: default for the mode
    int epochs = 30;
    int batch = 16;
    int patience = 5;
    uint64_t seed = 0;
    std::string out = "finetune_out";
  } ft_opt;
  finetune->add_option("--model", ft_opt.model, "base checkpoint")->required();
  finetune->add_option("--data", ft_opt.data, "directory with .tsds files")
      ->required();
  finetune->add_option("--vital", ft_opt.vital, "vital to fine-tune on")
      ->check(CLI::IsMember({"MeanBP", "HeartRate"}))
      ->capture_default_str();
  finetune->add_option("--mode", ft_opt.mode, "full or lora")
      ->check(CLI::IsMember({"full", "lora"}))
      ->capture_default_str();
  finetune->add_option("--rank", ft_opt.rank, "adapter rank (lora mode)")
      ->capture_default_str();
  finetune->add_option("--alpha", ft_opt.alpha, "adapter scale (lora mode)")
      ->capture_default_str();
  finetune->add_option("--lr", ft_opt.lr,
                       "learning rate (default 5e-5 full, 1e-3 lora)");
  finetune->add_option("--epochs", ft_opt.epochs, "training epochs")
      ->capture_default_str();
  finetune->add_option("--batch", ft_opt.batch, "minibatch size")
      ->capture_default_str();
  finetune->add_option("--patience", ft_opt.patience,
                       "early-stopping patience (0 disables)")
      ->capture_default_str();
  finetune->add_option("--seed", ft_opt.seed, "root seed")
      ->capture_default_str();
  finetune->add_option("--out", ft_opt.out, "output directory")
      ->capture_default_str();

  // ---- evaluate ----
  auto* evaluate = with_config(app.add_subcommand(
      "evaluate", "Multi-run probabilistic evaluation on a test split"));
  struct {
    std::string model;
    std::string adapters;
    std::string setting = "zero_shot";
    std::string data;
    std::string vital = "MeanBP";
    int samples = 20;
    int runs = 10;
    uint64_t seed = 0;
    std::string label = "toy";
    std::string out = "evaluate_out";
  } ev_opt;
  evaluate->add_option("--model", ev_opt.model, "model checkpoint")->required();
  evaluate->add_option("--adapters", ev_opt.adapters,
                       "adapter file (lora_ft setting)");
  evaluate->add_option("--setting", ev_opt.setting,
                       "zero_shot, full_ft or lora_ft")
      ->check(CLI::IsMember({"zero_shot", "full_ft", "lora_ft"}))
      ->capture_default_str();
  evaluate->add_option("--data", ev_opt.data, "directory with .tsds files")
      ->required();
  evaluate->add_option("--vital", ev_opt.vital, "vital to evaluate")
      ->check(CLI::IsMember({"MeanBP", "HeartRate"}))
      ->capture_default_str();
  evaluate->add_option("--samples", ev_opt.samples,
                       "sample paths per forecast (median-reduced)")
      ->capture_default_str();
  evaluate->add_option("--runs", ev_opt.runs, "forecasting runs to average")
      ->capture_default_str();
  evaluate->add_option("--seed", ev_opt.seed, "root seed; run r uses seed+r")
      ->capture_default_str();
  evaluate->add_option("--label", ev_opt.label, "model label in reports")
      ->capture_default_str();
  evaluate->add_option("--out", ev_opt.out, "output directory")
      ->capture_default_str();

  // ---- ablate ----
  auto* ablate = with_config(app.add_subcommand(
      "ablate", "Rank sweep: inject, fine-tune and evaluate per rank"));
  struct {
    std::vector<std::string> positional;
    std::string ranks_flag;
    std::string model;
    std::string data;
    std::string vital = "MeanBP";
    double alpha = 16.0;
    double lr = 1e-3;
    int epochs = 30;
    int batch = 16;
    int patience = 5;
    int samples = 20;
    int runs = 10;
    uint64_t seed = 0;
    std::string out = "ablate_out";
  } ab_opt;
  ablate->add_option("rank-list", ab_opt.positional,
                     "rank list, e.g.: ranks 1,2,4,8,16");
  ablate->add_option("--ranks", ab_opt.ranks_flag, "rank list, e.g. 1,2,4");
  ablate->add_option("--model", ab_opt.model, "base checkpoint")->required();
  ablate->add_option("--data", ab_opt.data, "directory with .tsds files")
      ->required();
  ablate->add_option("--vital", ab_opt.vital, "vital to sweep on")
      ->check(CLI::IsMember({"MeanBP", "HeartRate"}))
      ->capture_default_str();
  ablate->add_option("--alpha", ab_opt.alpha, "adapter scale")
      ->capture_default_str();
  ablate->add_option("--lr", ab_opt.lr, "learning rate")
      ->capture_default_str();
  ablate->add_option("--epochs", ab_opt.epochs, "training epochs per rank")
      ->capture_default_str();
  ablate->add_option("--batch", ab_opt.batch, "minibatch size")
      ->capture_default_str();
  ablate->add_option("--patience", ab_opt.patience,
                     "early-stopping patience (0 disables)")
      ->capture_default_str();
  ablate->add_option("--samples", ab_opt.samples, "sample paths per forecast")
      ->capture_default_str();
  ablate->add_option("--runs", ab_opt.runs, "forecasting runs to average")
      ->capture_default_str();
  ablate->add_option("--seed", ab_opt.seed, "root seed")
      ->capture_default_str();
  ablate->add_option("--out", ab_opt.out, "output directory")
      ->capture_default_str();

  // ---- compare ----
  auto* compare = with_config(app.add_subcommand(
      "compare", "End-to-end matrix: synthesize, pretrain, fine-tune and "
                 "evaluate all three settings per vital"));
  struct {
    CompareScale scale;
    uint64_t seed = 0;
    std::string out = "compare_out";
  } cmp_opt;
  compare->add_option("--source-patients", cmp_opt.scale.source_patients,
                      "patients in the pretraining corpus")
      ->capture_default_str();
  compare->add_option("--source-length", cmp_opt.scale.source_length,
                      "series length of the pretraining corpus")
      ->capture_default_str();
  compare->add_option("--target-patients", cmp_opt.scale.target_patients,
                      "patients per vital in the target corpus")
      ->capture_default_str();
  compare->add_option("--target-length", cmp_opt.scale.target_length,
                      "series length of the target corpus")
      ->capture_default_str();
  compare->add_option("--epochs-pretrain", cmp_opt.scale.epochs_pretrain,
                      "pretraining epochs")
      ->capture_default_str();
  compare->add_option("--epochs-finetune", cmp_opt.scale.epochs_finetune,
                      "fine-tuning epochs")
      ->capture_default_str();
  compare->add_option("--batch", cmp_opt.scale.batch_size, "minibatch size")
      ->capture_default_str();
  compare->add_option("--rank", cmp_opt.scale.rank, "adapter rank")
      ->capture_default_str();
  compare->add_option("--alpha", cmp_opt.scale.alpha, "adapter scale")
      ->capture_default_str();
  compare->add_option("--samples", cmp_opt.scale.n_samples,
                      "sample paths per forecast")
      ->capture_default_str();
  compare->add_option("--runs", cmp_opt.scale.n_runs,
                      "forecasting runs to average")
      ->capture_default_str();
  compare->add_option("--seed", cmp_opt.seed, "root seed for every stage")
      ->capture_default_str();
  compare->add_option("--out", cmp_opt.out, "output directory")
      ->capture_default_str();

  // ---- report ----
  auto* report = with_config(app.add_subcommand(
      "report", "Merge long-format report CSVs into the wide table"));
  struct {
    std::vector<std::string> inputs;
    std::string out = "report_out";
  } rep_opt;
  report->add_option("--inputs", rep_opt.inputs, "long-format report CSVs")
      ->required();
  report->add_option("--out", rep_opt.out, "output directory")
      ->capture_default_str();

  try {
    const std::vector<std::string> expanded = expand_config_file(argc, argv);
    std::vector<const char*> raw;
    raw.reserve(expanded.size());
    for (const std::string& s : expanded) {
      raw.push_back(s.c_str());
    }
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }

  // One subcommand per invocation; dispatch with a manifest either way.
  std::string command;
  fs::path out_dir;
  std::function<void(Manifest&)> body;

  if (synth->parsed()) {
    command = "synth";
    out_dir = synth_opt.out;
    body = [&](Manifest& m) {
      if (synth_opt.length < 108) {
        throw ConfigError("--length must be at least 108");
      }
      if (synth_opt.patients < 1) {
        throw ConfigError("--patients must be positive");
      }
      if (synth_opt.missing_prob < 0.0 || synth_opt.missing_prob >= 1.0) {
        throw ConfigError("--missing-prob must lie in [0, 1)");
      }
      m.arg("regime", synth_opt.regime);
      m.arg("patients", static_cast<long>(synth_opt.patients));
      m.arg("length", static_cast<long>(synth_opt.length));
      m.arg("vital", synth_opt.vital);
      m.arg("missing_prob", synth_opt.missing_prob);
      m.arg("seed", static_cast<long>(synth_opt.seed));
      const auto corpus = generate_synthetic(
          synth_opt.patients, synth_opt.length,
          synth_opt.regime == "source" ? Regime::source : Regime::target,
          synth_opt.seed, parse_vital_choice(synth_opt.vital),
          synth_opt.missing_prob);
      const fs::path csv = out_dir / "series.csv";
      write_series_csv(corpus, csv);
      m.artifact(csv);
    };
  } else if (prepare->parsed()) {
    command = "prepare";
    out_dir = prep_opt.out;
    body = [&](Manifest& m) {
      m.arg("input", prep_opt.input);
      m.arg("filter_window", static_cast<long>(prep_opt.filter_window));
      m.arg("stride", static_cast<long>(prep_opt.stride));
      m.arg("seed", static_cast<long>(prep_opt.seed));
      const auto corpus = read_series_csv(prep_opt.input);
      for (Vital v : vitals_in(corpus)) {
        const Dataset ds =
            prepare_dataset(corpus, v, prep_opt.filter_window, prep_opt.stride,
                            prep_opt.seed);
        const fs::path p = dataset_path(out_dir, v);
        save_dataset(ds, p);
        m.artifact(p);
      }
    };
  } else if (pretrain->parsed()) {
    command = "pretrain";
    out_dir = pre_opt.out;
    body = [&](Manifest& m) {
      m.arg("data", pre_opt.data);
      m.arg("epochs", static_cast<long>(pre_opt.epochs));
      m.arg("lr", pre_opt.lr);
      m.arg("batch", static_cast<long>(pre_opt.batch));
      m.arg("patience", static_cast<long>(pre_opt.patience));
      m.arg("seed", static_cast<long>(pre_opt.seed));
      const Dataset merged = load_merged_datasets(pre_opt.data);
      Forecaster model(ModelConfig{}, pre_opt.seed);
      TrainConfig cfg;
      cfg.mode = TrainMode::pretrain;
      cfg.learning_rate = pre_opt.lr;
      cfg.epochs = pre_opt.epochs;
      cfg.batch_size = pre_opt.batch;
      cfg.patience = pre_opt.patience;
      cfg.seed = pre_opt.seed + 1;
      const TrainHistory history = train_loop(model, merged, cfg);
      write_history_csv(history, out_dir / "history.csv");
      m.artifact(out_dir / "history.csv");
      save_model(model, out_dir / "base.ckpt");
      m.artifact(out_dir / "base.ckpt");
    };
  } else if (finetune->parsed()) {
    command = "finetune";
    out_dir = ft_opt.out;
    body = [&](Manifest& m) {
      if (ft_opt.mode == "lora" && ft_opt.rank < 1) {
        throw ConfigError("--rank must be at least 1");
      }
      if (ft_opt.mode == "lora" && !(ft_opt.alpha > 0.0)) {
        throw ConfigError("--alpha must be positive");
      }
      const double lr = ft_opt.lr > 0.0
                            ? ft_opt.lr
                            : default_learning_rate(ft_opt.mode == "full"
                                                        ? TrainMode::full_ft
                                                        : TrainMode::lora_ft);
      m.arg("model", ft_opt.model);
      m.arg("data", ft_opt.data);
      m.arg("vital", ft_opt.vital);
      m.arg("mode", ft_opt.mode);
      if (ft_opt.mode == "lora") {
        m.arg("rank", static_cast<long>(ft_opt.rank));
        m.arg("alpha", ft_opt.alpha);
      }
      m.arg("lr", lr);
      m.arg("epochs", static_cast<long>(ft_opt.epochs));
      m.arg("batch", static_cast<long>(ft_opt.batch));
      m.arg("patience", static_cast<long>(ft_opt.patience));
      m.arg("seed", static_cast<long>(ft_opt.seed));

      const Vital vital = vital_from_string(ft_opt.vital);
      const Dataset ds = load_vital_dataset(ft_opt.data, vital);
      Forecaster model = load_model(ft_opt.model);

      TrainConfig cfg;
      cfg.learning_rate = lr;
      cfg.epochs = ft_opt.epochs;
      cfg.batch_size = ft_opt.batch;
      cfg.patience = ft_opt.patience;
      cfg.seed = ft_opt.seed + 1;
      if (ft_opt.mode == "full") {
        cfg.mode = TrainMode::full_ft;
        const TrainHistory history = train_loop(model, ds, cfg);
        write_history_csv(history, out_dir / "history.csv");
        m.artifact(out_dir / "history.csv");
        save_model(model, out_dir / "model_full.ckpt");
        m.artifact(out_dir / "model_full.ckpt");
      } else {
        cfg.mode = TrainMode::lora_ft;
        AdaptedModel adapted = inject_lora(model, {'q', 'k', 'v', 'o'},
                                           ft_opt.rank, ft_opt.alpha,
                                           ft_opt.seed + 2);
        const TrainHistory history = train_loop(adapted, ds, cfg);
        write_history_csv(history, out_dir / "history.csv");
        m.artifact(out_dir / "history.csv");
        save_adapters(adapted.adapters, out_dir / "adapters.bin");
        m.artifact(out_dir / "adapters.bin");
      }
    };
  } else if (evaluate->parsed()) {
    command = "evaluate";
    out_dir = ev_opt.out;
    body = [&](Manifest& m) {
      const Setting setting = setting_from_string(ev_opt.setting);
      if (setting == Setting::lora_ft && ev_opt.adapters.empty()) {
        throw ConfigError("--adapters is required for the lora_ft setting");
      }
      if (setting != Setting::lora_ft && !ev_opt.adapters.empty()) {
        throw ConfigError("--adapters only applies to the lora_ft setting");
      }
      m.arg("model", ev_opt.model);
      if (!ev_opt.adapters.empty()) {
        m.arg("adapters", ev_opt.adapters);
      }
      m.arg("setting", ev_opt.setting);
      m.arg("data", ev_opt.data);
      m.arg("vital", ev_opt.vital);
      m.arg("samples", static_cast<long>(ev_opt.samples));
      m.arg("runs", static_cast<long>(ev_opt.runs));
      m.arg("seed", static_cast<long>(ev_opt.seed));

      const Vital vital = vital_from_string(ev_opt.vital);
      const Dataset ds = load_vital_dataset(ev_opt.data, vital);
      const Forecaster model = load_model(ev_opt.model);
      AdapterMap adapters;
      if (!ev_opt.adapters.empty()) {
        adapters = load_adapters(ev_opt.adapters, model);
      }

      const EvalProtocol protocol{ev_opt.samples, ev_opt.runs, ev_opt.seed};
      MetricsReport report = evaluate_model(
          model_sampler(model, adapters.empty() ? nullptr : &adapters),
          ds.test, ds.scaling, protocol, ev_opt.label, setting, vital);
      switch (setting) {
        case Setting::zero_shot:
          report.trainable_params = 0;
          report.total_params = model.total_param_count();
          break;
        case Setting::full_ft:
          report.trainable_params = model.total_param_count();
          report.total_params = model.total_param_count();
          break;
        case Setting::lora_ft: {
          long adapter_params = 0;
          for (const auto& [name, a] : adapters) {
            adapter_params += a.param_count();
          }
          report.trainable_params = adapter_params;
          report.total_params = model.total_param_count() + adapter_params;
          break;
        }
      }
      write_report_long_csv({report}, out_dir / "report_long.csv");
      m.artifact(out_dir / "report_long.csv");
      write_report_wide_csv({report}, out_dir / "report_wide.csv");
      m.artifact(out_dir / "report_wide.csv");
    };
  } else if (ablate->parsed()) {
    command = "ablate";
    out_dir = ab_opt.out;
    body = [&](Manifest& m) {
      // Accept both `ablate ranks 1,2,4` and `--ranks 1,2,4`.
      std::string rank_text = ab_opt.ranks_flag;
      for (const std::string& token : ab_opt.positional) {
        if (token == "ranks") {
          continue;
        }
        if (!rank_text.empty()) {
          rank_text += ",";
        }
        rank_text += token;
      }
      if (rank_text.empty()) {
        throw ConfigError("ranks: none given (positional 'ranks R1,R2,...' "
                          "or --ranks)");
      }
      const std::vector<int> ranks = parse_rank_list(rank_text);
      m.arg("ranks", rank_text);
      m.arg("model", ab_opt.model);
      m.arg("data", ab_opt.data);
      m.arg("vital", ab_opt.vital);
      m.arg("alpha", ab_opt.alpha);
      m.arg("lr", ab_opt.lr);
      m.arg("epochs", static_cast<long>(ab_opt.epochs));
      m.arg("batch", static_cast<long>(ab_opt.batch));
      m.arg("samples", static_cast<long>(ab_opt.samples));
      m.arg("runs", static_cast<long>(ab_opt.runs));
      m.arg("seed", static_cast<long>(ab_opt.seed));

      const Vital vital = vital_from_string(ab_opt.vital);
      const Dataset ds = load_vital_dataset(ab_opt.data, vital);
      const Forecaster base = load_model(ab_opt.model);

      TrainConfig cfg;
      cfg.mode = TrainMode::lora_ft;
      cfg.learning_rate = ab_opt.lr;
      cfg.epochs = ab_opt.epochs;
      cfg.batch_size = ab_opt.batch;
      cfg.patience = ab_opt.patience;
      cfg.seed = ab_opt.seed + 1;
      const EvalProtocol protocol{ab_opt.samples, ab_opt.runs, ab_opt.seed + 2};
      const auto rows = rank_sweep(base, ds, ranks, ab_opt.alpha, cfg, protocol);
      write_rank_sweep_csv(rows, out_dir / "rank_sweep.csv");
      m.artifact(out_dir / "rank_sweep.csv");

      double best = rows.front().mse;
      double worst = rows.front().mse;
      for (const auto& row : rows) {
        best = std::min(best, row.mse);
        worst = std::max(worst, row.mse);
      }
      m.arg("mse_best_minus_worst_spread", worst - best);
    };
  } else if (compare->parsed()) {
    command = "compare";
    out_dir = cmp_opt.out;
    body = [&](Manifest& m) {
      m.arg("seed", static_cast<long>(cmp_opt.seed));
      m.arg("source_patients", static_cast<long>(cmp_opt.scale.source_patients));
      m.arg("source_length", static_cast<long>(cmp_opt.scale.source_length));
      m.arg("target_patients", static_cast<long>(cmp_opt.scale.target_patients));
      m.arg("target_length", static_cast<long>(cmp_opt.scale.target_length));
      m.arg("epochs_pretrain", static_cast<long>(cmp_opt.scale.epochs_pretrain));
      m.arg("epochs_finetune", static_cast<long>(cmp_opt.scale.epochs_finetune));
      m.arg("batch", static_cast<long>(cmp_opt.scale.batch_size));
      m.arg("rank", static_cast<long>(cmp_opt.scale.rank));
      m.arg("alpha", cmp_opt.scale.alpha);
      m.arg("samples", static_cast<long>(cmp_opt.scale.n_samples));
      m.arg("runs", static_cast<long>(cmp_opt.scale.n_runs));
      run_compare(cmp_opt.scale, cmp_opt.seed, out_dir, m);
    };
  } else if (report->parsed()) {
    command = "report";
    out_dir = rep_opt.out;
    body = [&](Manifest& m) {
      std::vector<MetricsReport> merged;
      for (const std::string& input : rep_opt.inputs) {
        m.arg("input", input);
        const auto reports = read_report_long_csv(input);
        merged.insert(merged.end(), reports.begin(), reports.end());
      }
      if (merged.empty()) {
        throw DataError("report: no rows in the given inputs");
      }
      write_report_wide_csv(merged, out_dir / "report_wide.csv");
      m.artifact(out_dir / "report_wide.csv");
    };
  }

  Manifest manifest(command, out_dir);
  try {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
      throw DataError("cannot create output directory " + out_dir.string() +
                      ": " + ec.message());
    }
    body(manifest);
    manifest.write("ok", "");
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << command << ": " << e.what() << '\n';
    manifest.write("error", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::cerr << command << ": " << e.what() << '\n';
    manifest.write("error", e.what());
    return 1;
  }
}

}  // namespace tslora
