#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "tslora/gradcheck.hpp"
#include "tslora/lora.hpp"
#include "tslora/model.hpp"
#include "tslora/rng.hpp"
#include "tslora/training.hpp"

using namespace tslora;

namespace {

std::vector<double> random_context(int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> ctx(n);
  for (double& v : ctx) {
    v = rng.uniform(0.0, 1.0);
  }
  return ctx;
}

}  // namespace

TEST_CASE("build is deterministic") {
  const ModelConfig cfg;
  const Forecaster a(cfg, 3);
  const Forecaster b(cfg, 3);
  REQUIRE(a.params().size() == b.params().size());
  for (size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(bit_equal(a.params()[i].value, b.params()[i].value));
  }
  const Forecaster c(cfg, 4);
  CHECK_FALSE(bit_equal(a.param("embed.weight").value,
                        c.param("embed.weight").value));
}

TEST_CASE("parameter count matches the closed form") {
  const ModelConfig cfg;
  const Forecaster model(cfg, 1);
  const long d = cfg.d_model;
  const long ff = cfg.d_ff;
  const long per_layer = 4 * d * d   // attention projections
                         + 2 * 2 * d  // two layer norms
                         + ff * d + ff + d * ff + d;  // feed-forward
  const long expected = d + d                          // value embedding
                        + cfg.max_positions() * d      // positions
                        + cfg.n_layers * per_layer     //
                        + 2 * d + 2;                   // head
  CHECK(model.total_param_count() == expected);
  CHECK(model.total_param_count() == 106626);
}

TEST_CASE("invalid head split is a config error") {
  ModelConfig cfg;
  cfg.n_heads = 3;
  CHECK_THROWS_AS(Forecaster(cfg, 1), ConfigError);
}

TEST_CASE("single-position attention is the value-output path") {
  // With one position, softmax over one score is 1, so the block reduces
  // to x W_v^T W_o^T regardless of W_q and W_k.
  ModelConfig cfg;
  const Forecaster model(cfg, 9);
  Rng rng(17);
  Matrix x = Matrix::gaussian(1, cfg.d_model, 1.0, rng);

  Tape tape;
  const auto h = tape.leaf(x);
  const auto out =
      attention_forward(tape, h, model.attention_weights(0), cfg, nullptr, 0);

  const Matrix expected = matmul_nt(
      matmul_nt(x, model.param("layers.0.attn.w_v").value),
      model.param("layers.0.attn.w_o").value);
  CHECK(max_abs_diff(tape.value(out), expected) < 1e-12);
}

TEST_CASE("causal mask blocks information from later positions") {
  const ModelConfig cfg;
  const Forecaster model(cfg, 5);
  auto ctx = random_context(3, 21);

  Tape t1;
  const auto out1 = model.forward_positions(t1, ctx);
  ctx[2] += 0.25;  // perturb the last position
  Tape t2;
  const auto out2 = model.forward_positions(t2, ctx);

  for (int j = 0; j < 2; ++j) {
    CHECK(t1.value(out1)(0, j) == t2.value(out2)(0, j));
    CHECK(t1.value(out1)(1, j) == t2.value(out2)(1, j));
  }
  CHECK(t1.value(out1)(2, 0) != t2.value(out2)(2, 0));
}

TEST_CASE("forward_dist is deterministic and validates the context") {
  const ModelConfig cfg;
  const Forecaster model(cfg, 7);
  const auto ctx = random_context(cfg.context_length, 3);

  const StepDistribution d1 = model.forward_dist(ctx);
  const StepDistribution d2 = model.forward_dist(ctx);
  CHECK(d1.mean == d2.mean);
  CHECK(d1.log_std == d2.log_std);

  const std::vector<double> single = {0.4};
  CHECK_NOTHROW(model.forward_dist(single));
  CHECK_THROWS_AS(model.forward_dist(std::vector<double>{}), ContractError);
  CHECK_THROWS_AS(model.forward_dist(random_context(cfg.context_length + 1, 4)),
                  ContractError);
}

TEST_CASE("sample_forecast shape, determinism and contracts") {
  const ModelConfig cfg;
  const Forecaster model(cfg, 2);
  const auto ctx = random_context(cfg.context_length, 5);

  const Matrix paths = model.sample_forecast(ctx, 36, 20, 77);
  CHECK(paths.rows == 20);
  CHECK(paths.cols == 36);
  CHECK(bit_equal(paths, model.sample_forecast(ctx, 36, 20, 77)));
  CHECK_FALSE(bit_equal(paths, model.sample_forecast(ctx, 36, 20, 78)));

  CHECK_THROWS_AS(model.sample_forecast(ctx, 0, 20, 1), ContractError);
  CHECK_THROWS_AS(model.sample_forecast(ctx, 36, 0, 1), ContractError);
}

TEST_CASE("batched sampling agrees with a step-by-step rollout") {
  const ModelConfig cfg;
  const Forecaster model(cfg, 8);
  const AdaptedModel adapted = inject_lora(model, {'q', 'v'}, 2, 16, 3);
  // Give the adapters real content so the adapted pathway is exercised.
  AdaptedModel live = adapted;
  Rng fill(5);
  for (auto& [name, a] : live.adapters) {
    for (double& v : a.b.value.data) {
      v = fill.gaussian(0.0, 0.1);
    }
  }

  const auto ctx = random_context(cfg.context_length, 31);
  const uint64_t seed = 91;
  const int h = 5;
  const int n_samples = 3;
  const Matrix fast = live.sample_forecast(ctx, h, n_samples, seed);

  // Reference: per-sample loop over forward_dist with the same streams.
  for (int s = 0; s < n_samples; ++s) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(s)));
    std::vector<double> rolling(ctx.begin(), ctx.end());
    for (int step = 0; step < h; ++step) {
      const StepDistribution dist =
          live.base.forward_dist(rolling, &live.adapters);
      const double draw = rng.gaussian(dist.mean, dist.std());
      CHECK(std::abs(fast(s, step) - draw) < 1e-9);
      rolling.push_back(fast(s, step));
      rolling.erase(rolling.begin());
    }
  }
}

TEST_CASE("degenerate log_std collapses paths onto the mean path") {
  const ModelConfig cfg;
  Forecaster model(cfg, 2);
  // Drive log_std to -inf territory; the sampler clamps std at 1e-6.
  Parameter& head_w = model.param("head.weight");
  for (int j = 0; j < cfg.d_model; ++j) {
    head_w.value(1, j) = 0.0;
  }
  model.param("head.bias").value(0, 1) = -1e9;

  const auto ctx = random_context(cfg.context_length, 6);
  const Matrix paths = model.sample_forecast(ctx, 8, 20, 3);
  for (int s = 1; s < paths.rows; ++s) {
    for (int j = 0; j < paths.cols; ++j) {
      CHECK(std::abs(paths(s, j) - paths(0, j)) < 1e-5);
    }
  }
}

// Central differences at step 1e-6 resolve a coordinate only when its
// gradient clears the evaluation's floating-point noise floor. A freshly
// initialized model has attention-score gradients far below that floor
// (softmax stays uniform at init-scale weights), so the whole-model check
// runs at a conditioned state instead: briefly trained on sequences whose
// next value is a trailing-window mean (attention must engage to fit
// them), then knocked off the optimum by a seeded parameter perturbation
// so every tensor carries macroscopic recovery gradients.
TEST_CASE("gradients flow through the whole model") {
  const ModelConfig cfg;
  Forecaster model(cfg, 11);

  Rng data_rng(9);
  std::vector<std::vector<double>> sequences;
  for (int w = 0; w < 4; ++w) {
    std::vector<double> x;
    for (int i = 0; i < 8; ++i) {
      x.push_back(data_rng.uniform(0.0, 1.0));
    }
    while (x.size() < 64) {
      double trailing = 0.0;
      for (int k = 0; k < 8; ++k) {
        trailing += x[x.size() - 1 - k];
      }
      x.push_back(0.95 * trailing / 8 + 0.01 * data_rng.gaussian() + 0.02);
    }
    sequences.push_back(std::move(x));
  }

  std::vector<Parameter*> params;
  for (Parameter& p : model.params()) {
    params.push_back(&p);
  }
  auto total_nll = [&](bool with_grads) {
    double acc = 0.0;
    for (const auto& x : sequences) {
      Tape tape;
      const std::span<const double> fed(x.data(), x.size() - 1);
      const std::vector<double> targets(x.begin() + 1, x.end());
      const auto out = model.forward_positions(tape, fed);
      const auto l = tape.gaussian_nll(tape.slice_cols(out, 0, 1),
                                       tape.slice_cols(out, 1, 1), targets);
      if (with_grads) {
        tape.backward(l);
      }
      acc += tape.value(l)(0, 0);
    }
    return acc;
  };

  AdamOptimizer adam(params, 1e-3);
  for (int step = 0; step < 150; ++step) {
    adam.zero_grad();
    total_nll(true);
    adam.step();
  }
  Rng perturb_rng(1234);
  for (Parameter* p : params) {
    for (double& v : p->value.data) {
      v += 0.15 * perturb_rng.gaussian();
    }
  }

  for (Parameter* p : params) {
    p->zero_grad();
  }
  const double err = finite_diff_check(LossFn(total_nll), params, 1e-6, 50, 1);
  CHECK(err < 1e-4);
}
