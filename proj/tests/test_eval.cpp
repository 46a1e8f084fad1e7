#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "tslora/eval.hpp"
#include "tslora/rng.hpp"

using namespace tslora;

namespace {

std::vector<WindowedSample> toy_test_set(int n_windows, uint64_t seed) {
  Rng rng(seed);
  std::vector<WindowedSample> test;
  for (int w = 0; w < n_windows; ++w) {
    WindowedSample s;
    s.patient_id = "p" + std::to_string(w);
    s.series_id = s.patient_id + "-s0";
    for (int i = 0; i < 72; ++i) {
      s.context.push_back(rng.uniform(0.2, 0.8));
    }
    for (int i = 0; i < 36; ++i) {
      s.horizon.push_back(rng.uniform(0.2, 0.8));
    }
    test.push_back(std::move(s));
  }
  return test;
}

// Sampler that replays the true horizon of whichever window is being
// evaluated (looked up by context identity).
PathSampler perfect_oracle(const std::vector<WindowedSample>& test) {
  return [&test](std::span<const double> context, int h, int n_samples,
                 uint64_t) {
    for (const WindowedSample& w : test) {
      if (w.context.size() == context.size() &&
          std::equal(context.begin(), context.end(), w.context.begin())) {
        Matrix paths(n_samples, h);
        for (int s = 0; s < n_samples; ++s) {
          for (int j = 0; j < h; ++j) {
            paths(s, j) = w.horizon[j];
          }
        }
        return paths;
      }
    }
    throw ContractError("oracle: unknown context");
  };
}

}  // namespace

TEST_CASE("mse cases") {
  const std::vector<double> a = {1, 3};
  const std::vector<double> b = {1, 1};
  CHECK(mse(a, a) == 0.0);
  CHECK(mse(a, b) == doctest::Approx(2.0).epsilon(1e-15));
  std::vector<double> long_pred(36, 0.0);
  std::vector<double> short_truth(35, 0.0);
  CHECK_THROWS_AS(mse(long_pred, short_truth), ContractError);
}

TEST_CASE("mape cases") {
  const std::vector<double> pred = {110};
  const std::vector<double> truth = {100};
  CHECK(mape(pred, pred) == 0.0);
  CHECK(mape(pred, truth) == doctest::Approx(10.0).epsilon(1e-12));

  const std::vector<double> zero_truth = {0.0};
  const std::vector<double> p2 = {1.0};
  CHECK(std::isfinite(mape(p2, zero_truth)));
  CHECK_THROWS_AS(mape(pred, std::vector<double>{1, 2}), ContractError);
}

TEST_CASE("dtw hand cases") {
  const std::vector<double> a = {0, 0, 1};
  const std::vector<double> b = {0, 1, 1};
  CHECK(dtw_distance(a, a) == 0.0);
  CHECK(dtw_distance(a, b) == 0.0);

  const std::vector<double> c = {0, 1};
  const std::vector<double> d = {1, 1};
  CHECK(dtw_distance(c, d) == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS_AS(dtw_distance(std::vector<double>{}, d), ContractError);
}

TEST_CASE("dtw is symmetric and bounded by the diagonal cost") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 24);
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.uniform(-2.0, 2.0);
      b[i] = rng.uniform(-2.0, 2.0);
    }
    const double d = dtw_distance(a, b);
    CHECK(d >= 0.0);
    CHECK(d == dtw_distance(b, a));
    double diagonal = 0.0;
    for (int i = 0; i < n; ++i) {
      diagonal += std::abs(a[i] - b[i]);
    }
    CHECK(d <= diagonal + 1e-12);
  }
}

TEST_CASE("dtw equals the brute-force alignment minimum on tiny inputs") {
  Rng rng(29);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 6);
    const int m = rng.uniform_int(1, 6);
    std::vector<double> a(n), b(m);
    for (double& v : a) {
      v = rng.uniform_int(0, 2);
    }
    for (double& v : b) {
      v = rng.uniform_int(0, 2);
    }
    CHECK(dtw_distance(a, b) == oracle::dtw_brute_force(a, b));
  }
}

TEST_CASE("aggregate median") {
  Matrix same(5, 3);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) {
      same(i, j) = 0.25 * j;
    }
  }
  CHECK(aggregate_median(same) == std::vector<double>{0.0, 0.25, 0.5});

  Matrix odd(3, 1);
  odd(0, 0) = 1;
  odd(1, 0) = 2;
  odd(2, 0) = 9;
  CHECK(aggregate_median(odd) == std::vector<double>{2.0});

  Matrix twenty(20, 1);
  for (int i = 0; i < 20; ++i) {
    twenty(i, 0) = i + 1;
  }
  CHECK(aggregate_median(twenty) == std::vector<double>{10.5});
}

TEST_CASE("a perfect oracle scores zero on every metric in every run") {
  const auto test = toy_test_set(4, 5);
  const ScalingParams scaling{50.0, 150.0};
  const MetricsReport report =
      evaluate_model(perfect_oracle(test), test, scaling, EvalProtocol{20, 10, 3},
                     "oracle", Setting::zero_shot, Vital::MeanBP);
  REQUIRE(report.mse_runs.size() == 10);
  REQUIRE(report.dtw_runs.size() == 10);
  REQUIRE(report.mape_runs.size() == 10);
  for (int r = 0; r < 10; ++r) {
    CHECK(report.mse_runs[r] == 0.0);
    CHECK(report.dtw_runs[r] == 0.0);
    CHECK(report.mape_runs[r] == 0.0);
  }
}

TEST_CASE("evaluation is deterministic in the seed") {
  const auto test = toy_test_set(3, 8);
  const ScalingParams scaling{0.0, 1.0};
  // A noisy but seeded sampler.
  const PathSampler sampler = [](std::span<const double>, int h, int n_samples,
                                 uint64_t seed) {
    Rng rng(seed);
    Matrix paths(n_samples, h);
    for (double& v : paths.data) {
      v = rng.uniform(0.0, 1.0);
    }
    return paths;
  };
  const EvalProtocol protocol{20, 10, 44};
  const MetricsReport a = evaluate_model(sampler, test, scaling, protocol,
                                         "toy", Setting::zero_shot, Vital::MeanBP);
  const MetricsReport b = evaluate_model(sampler, test, scaling, protocol,
                                         "toy", Setting::zero_shot, Vital::MeanBP);
  CHECK(a.mse_runs == b.mse_runs);
  CHECK(a.dtw_runs == b.dtw_runs);
  CHECK(a.mape_runs == b.mape_runs);

  // A seed-blind sampler makes all runs identical.
  const PathSampler blind = [](std::span<const double> context, int h,
                               int n_samples, uint64_t) {
    Matrix paths(n_samples, h);
    for (int s = 0; s < n_samples; ++s) {
      for (int j = 0; j < h; ++j) {
        paths(s, j) = context[0];
      }
    }
    return paths;
  };
  const MetricsReport c = evaluate_model(blind, test, scaling, EvalProtocol{1, 10, 7},
                                         "toy", Setting::zero_shot, Vital::MeanBP);
  for (int r = 1; r < 10; ++r) {
    CHECK(c.mse_runs[r] == c.mse_runs[0]);
    CHECK(c.dtw_runs[r] == c.dtw_runs[0]);
    CHECK(c.mape_runs[r] == c.mape_runs[0]);
  }

  CHECK_THROWS_AS(evaluate_model(blind, {}, scaling, protocol, "toy",
                                 Setting::zero_shot, Vital::MeanBP),
                  DataError);
}

TEST_CASE("rank sweep validates ranks up front and deduplicates") {
  const Forecaster base(ModelConfig{}, 1);
  const auto corpus = generate_synthetic(15, 108, Regime::target, 2, Vital::MeanBP);
  const Dataset ds = prepare_dataset(corpus, Vital::MeanBP, 5, 36, 3);

  TrainConfig cfg;
  cfg.mode = TrainMode::lora_ft;
  cfg.epochs = 1;
  cfg.seed = 4;
  const EvalProtocol protocol{2, 1, 5};

  CHECK_THROWS_AS(rank_sweep(base, ds, {2, 0}, 16.0, cfg, protocol), RankError);
  CHECK_THROWS_AS(rank_sweep(base, ds, {}, 16.0, cfg, protocol), ConfigError);

  const auto rows = rank_sweep(base, ds, {2, 1, 2}, 16.0, cfg, protocol);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].rank == 1);
  CHECK(rows[1].rank == 2);
  CHECK(rows[0].trainable_params == 1024);
  CHECK(rows[1].trainable_params == 2048);
  CHECK(rows[1].trainable_params > rows[0].trainable_params);
}

TEST_CASE("parameter trade-off rows echo the reports") {
  MetricsReport zero;
  zero.model_label = "toy";
  zero.setting = Setting::zero_shot;
  zero.vital = Vital::MeanBP;
  zero.mape = 12.5;
  zero.trainable_params = 0;
  zero.total_params = 106626;

  MetricsReport lora = zero;
  lora.setting = Setting::lora_ft;
  lora.mape = 9.25;
  lora.trainable_params = 2048;
  lora.total_params = 106626 + 2048;

  const auto rows = param_tradeoff({zero, lora});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].finetuned_params == 0);
  CHECK(rows[0].total_params == 106626);
  CHECK(rows[1].finetuned_params == 2048);
  CHECK(rows[1].total_params == 106626 + 2048);
  CHECK(rows[1].mape == 9.25);

  CHECK_THROWS_AS(param_tradeoff({}), ContractError);
}

TEST_CASE("report csv round trip and wide layout") {
  MetricsReport r1;
  r1.model_label = "toy";
  r1.setting = Setting::zero_shot;
  r1.vital = Vital::MeanBP;
  r1.mse_runs = {0.5, 0.25};
  r1.dtw_runs = {3.5, 3.0};
  r1.mape_runs = {11.0, 10.0};
  r1.mse = 0.375;
  r1.dtw = 3.25;
  r1.mape = 10.5;

  MetricsReport r2 = r1;
  r2.vital = Vital::HeartRate;
  MetricsReport r3 = r1;
  r3.setting = Setting::lora_ft;

  const auto dir = std::filesystem::temp_directory_path();
  const auto long_path = dir / "tslora_report_long.csv";
  write_report_long_csv({r1, r2, r3}, long_path);
  const auto back = read_report_long_csv(long_path);
  REQUIRE(back.size() == 3);
  CHECK(back[0].mse_runs == r1.mse_runs);
  CHECK(back[0].mse == doctest::Approx(r1.mse).epsilon(1e-15));
  CHECK(back[1].vital == Vital::HeartRate);
  CHECK(back[2].setting == Setting::lora_ft);

  const auto wide_path = dir / "tslora_report_wide.csv";
  write_report_wide_csv({r1, r2, r3}, wide_path);
  std::ifstream in(wide_path);
  std::string header;
  std::getline(in, header);
  CHECK(header ==
        "model,setting,HeartRate_mse,HeartRate_dtw,HeartRate_mape,"
        "MeanBP_mse,MeanBP_dtw,MeanBP_mape");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      ++rows;
    }
  }
  CHECK(rows == 2);  // (toy, zero_shot) and (toy, lora_ft)
  std::filesystem::remove(long_path);
  std::filesystem::remove(wide_path);
}
