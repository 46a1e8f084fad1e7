#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "tslora/checkpoint.hpp"
#include "tslora/gradcheck.hpp"
#include "tslora/rng.hpp"
#include "tslora/training.hpp"

using namespace tslora;

namespace {

// Prepared target-regime dataset with one window per patient.
Dataset toy_dataset(int n_patients, uint64_t seed) {
  const auto corpus =
      generate_synthetic(n_patients, 108, Regime::target, seed, Vital::MeanBP);
  return prepare_dataset(corpus, Vital::MeanBP, 5, 36, seed + 1);
}

Dataset constant_dataset(int n_windows) {
  std::vector<WindowedSample> samples;
  for (int p = 0; p < n_windows; ++p) {
    WindowedSample s;
    s.patient_id = "p" + std::to_string(p);
    s.series_id = s.patient_id + "-s0";
    s.context.assign(72, 0.5);
    s.horizon.assign(36, 0.5);
    samples.push_back(std::move(s));
  }
  Dataset ds = split_dataset(samples, 1);
  ds.scaling = ScalingParams{0.0, 1.0};
  return ds;
}

std::vector<Matrix> snapshot(const Forecaster& model) {
  std::vector<Matrix> values;
  for (const Parameter& p : model.params()) {
    values.push_back(p.value);
  }
  return values;
}

}  // namespace

TEST_CASE("gaussian_nll value cases") {
  std::vector<StepDistribution> dist = {{0.3, 0.0}, {0.7, 0.0}};
  const std::vector<double> targets = {0.3, 0.7};
  CHECK(gaussian_nll(dist, targets) ==
        doctest::Approx(0.9189385332046727).epsilon(1e-14));

  // With the mean on target, shrinking sigma toward the residual std
  // (here zero) lowers the loss.
  std::vector<StepDistribution> wide = {{0.3, 0.0}};
  std::vector<StepDistribution> narrow = {{0.3, -2.0}};
  const std::vector<double> t1 = {0.3};
  CHECK(gaussian_nll(narrow, t1) < gaussian_nll(wide, t1));

  // With residuals of std r, sigma == r beats sigma far from r.
  const double r = 0.5;
  std::vector<StepDistribution> at{{0.0, std::log(r)}};
  std::vector<StepDistribution> above{{0.0, std::log(3 * r)}};
  std::vector<StepDistribution> below{{0.0, std::log(r / 3)}};
  const std::vector<double> t2 = {r};
  CHECK(gaussian_nll(at, t2) < gaussian_nll(above, t2));
  CHECK(gaussian_nll(at, t2) < gaussian_nll(below, t2));

  std::vector<StepDistribution> short_dist = {{0.0, 0.0}};
  CHECK_THROWS_AS(gaussian_nll(short_dist, targets), ContractError);
}

TEST_CASE("gaussian_nll gradient matches central differences") {
  Rng rng(21);
  Parameter mu("mu", Matrix::gaussian(12, 1, 0.5, rng));
  Parameter ls("ls", Matrix::gaussian(12, 1, 0.3, rng));
  std::vector<double> targets(12);
  for (double& t : targets) {
    t = rng.uniform(-1.0, 1.0);
  }
  std::vector<Parameter*> params = {&mu, &ls};
  const LossFn loss = [&](bool with_grads) {
    Tape tape;
    const auto l = tape.gaussian_nll(tape.param(mu), tape.param(ls), targets);
    if (with_grads) {
      tape.backward(l);
    }
    return tape.value(l)(0, 0);
  };
  CHECK(finite_diff_check(loss, params, 1e-6, 24, 3) < 1e-4);
}

TEST_CASE("adam step hand cases") {
  Parameter p("p", Matrix(1, 1, 0.0));
  p.grad(0, 0) = 1.0;
  AdamOptimizer adam({&p}, 0.1);
  adam.step();
  CHECK(p.value(0, 0) == doctest::Approx(-0.1).epsilon(1e-7));

  // Zero gradient leaves the parameter untouched on the first step.
  Parameter q("q", Matrix(1, 1, 2.5));
  AdamOptimizer adam2({&q}, 0.1);
  adam2.step();
  CHECK(q.value(0, 0) == 2.5);

  // Identical gradients update identically, elementwise.
  Parameter a("a", Matrix(1, 2, 1.0));
  a.grad(0, 0) = 0.7;
  a.grad(0, 1) = 0.7;
  AdamOptimizer adam3({&a}, 0.05);
  adam3.step();
  CHECK(a.value(0, 0) == a.value(0, 1));
}

TEST_CASE("mode and model kind must agree") {
  Forecaster model(ModelConfig{}, 1);
  AdaptedModel adapted = inject_lora(model, {'q'}, 2, 16, 1);
  const Dataset ds = constant_dataset(12);

  TrainConfig lora_cfg;
  lora_cfg.mode = TrainMode::lora_ft;
  CHECK_THROWS_AS(train_loop(model, ds, lora_cfg), ConfigError);

  TrainConfig full_cfg;
  full_cfg.mode = TrainMode::full_ft;
  CHECK_THROWS_AS(train_loop(adapted, ds, full_cfg), ConfigError);
}

TEST_CASE("training on an empty split fails") {
  Forecaster model(ModelConfig{}, 1);
  Dataset ds = constant_dataset(12);
  ds.train.clear();
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_loop(model, ds, cfg), DataError);
}

TEST_CASE("full fine-tuning descends and the model becomes position sensitive") {
  const Dataset ds = toy_dataset(50, 3);
  REQUIRE(ds.train.size() == 40);

  Forecaster model(ModelConfig{}, 7);
  TrainConfig cfg;
  cfg.mode = TrainMode::full_ft;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 30;
  cfg.seed = 107;
  cfg.patience = 0;  // run all epochs
  const TrainHistory history = train_loop(model, ds, cfg);

  REQUIRE(history.epochs_run() == 30);
  CHECK(history.train_loss.back() < history.train_loss.front());
  // Best-so-far train loss is monotone (checked at the ends).
  const double best = *std::min_element(history.train_loss.begin(),
                                        history.train_loss.end());
  CHECK(best <= history.train_loss.front());
  CHECK(history.trainable_params == model.total_param_count());

  // A trained model with a non-constant context is not permutation
  // invariant: positions carry information.
  const std::vector<double>& ctx = ds.train.front().context;
  std::vector<double> reversed(ctx.rbegin(), ctx.rend());
  const StepDistribution fwd = model.forward_dist(ctx);
  const StepDistribution rev = model.forward_dist(reversed);
  CHECK(fwd.mean != rev.mean);
}

TEST_CASE("convergence on the constant series pins the mean") {
  const Dataset ds = constant_dataset(12);
  Forecaster model(ModelConfig{}, 2);
  TrainConfig cfg;
  cfg.mode = TrainMode::pretrain;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 30;
  cfg.batch_size = 1;
  cfg.seed = 9;
  cfg.patience = 0;
  train_loop(model, ds, cfg);

  const std::vector<double> ctx(72, 0.5);
  const StepDistribution dist = model.forward_dist(ctx);
  CHECK(dist.mean == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("lora training changes exactly the adapter set") {
  const Dataset ds = toy_dataset(15, 11);
  const Forecaster base(ModelConfig{}, 4);
  AdaptedModel adapted = inject_lora(base, {'q', 'k', 'v', 'o'}, 2, 16, 6);

  const std::vector<Matrix> base_before = snapshot(adapted.base);
  std::vector<Matrix> adapters_before;
  for (const auto& [name, a] : adapted.adapters) {
    adapters_before.push_back(a.a.value);
    adapters_before.push_back(a.b.value);
  }

  TrainConfig cfg;
  cfg.mode = TrainMode::lora_ft;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 12;
  const TrainHistory history = train_loop(adapted, ds, cfg);
  CHECK(history.trainable_params == 2048);

  // Frozen base: bit identical, every tensor.
  for (size_t i = 0; i < base_before.size(); ++i) {
    CHECK(bit_equal(adapted.base.params()[i].value, base_before[i]));
  }
  // Every adapter tensor moved.
  size_t k = 0;
  for (const auto& [name, a] : adapted.adapters) {
    CHECK_FALSE(bit_equal(a.a.value, adapters_before[k++]));
    CHECK_FALSE(bit_equal(a.b.value, adapters_before[k++]));
  }
}

TEST_CASE("lora trains far fewer parameters than full fine-tuning") {
  const Forecaster base(ModelConfig{}, 1);
  const AdaptedModel adapted = inject_lora(base, {'q', 'k', 'v', 'o'}, 2, 16, 1);
  const double ratio =
      static_cast<double>(trainable_param_count(adapted)) /
      static_cast<double>(trainable_param_count(base));
  CHECK(ratio < 0.05);
}

TEST_CASE("training is bit-deterministic") {
  const Dataset ds = toy_dataset(15, 21);
  auto run = [&] {
    Forecaster model(ModelConfig{}, 31);
    TrainConfig cfg;
    cfg.mode = TrainMode::pretrain;
    cfg.epochs = 2;
    cfg.seed = 8;
    const TrainHistory h = train_loop(model, ds, cfg);
    return std::make_pair(snapshot(model), h);
  };
  const auto [params1, hist1] = run();
  const auto [params2, hist2] = run();
  REQUIRE(params1.size() == params2.size());
  for (size_t i = 0; i < params1.size(); ++i) {
    CHECK(bit_equal(params1[i], params2[i]));
  }
  CHECK(hist1.train_loss == hist2.train_loss);
  CHECK(hist1.val_loss == hist2.val_loss);
  CHECK(hist1.best_epoch == hist2.best_epoch);
}

TEST_CASE("history csv has one line per epoch") {
  TrainHistory h;
  h.train_loss = {1.0, 0.5};
  h.val_loss = {1.1, 0.6};
  h.seconds = {0.5, 1.0};
  const auto path = std::filesystem::temp_directory_path() / "tslora_hist.csv";
  write_history_csv(h, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_loss,seconds");
  int rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      ++rows;
    }
  }
  CHECK(rows == 2);
  std::filesystem::remove(path);
}
