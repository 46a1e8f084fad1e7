#include "tslora/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tslora/rng.hpp"

namespace tslora {

double finite_diff_check(const LossFn& loss,
                         std::span<Parameter* const> params, double step,
                         int n_coords, uint64_t seed) {
  if (!(step > 0.0) || step > 1e-3) {
    throw ContractError("finite_diff_check: step must be in (0, 1e-3]");
  }
  if (params.empty() || n_coords < 1) {
    throw ContractError("finite_diff_check: nothing to check");
  }

  size_t total = 0;
  for (const Parameter* p : params) {
    total += p->value.size();
  }

  for (Parameter* p : params) {
    p->zero_grad();
  }
  const double base = loss(true);
  if (!std::isfinite(base)) {
    throw NumericError("finite_diff_check: non-finite loss");
  }

  // Flat coordinate indices across the parameter set.
  std::vector<size_t> coords;
  Rng rng(seed);
  if (static_cast<size_t>(n_coords) >= total) {
    coords.resize(total);
    std::iota(coords.begin(), coords.end(), size_t{0});
  } else {
    // Partial Fisher-Yates over [0, total) gives a sample without
    // replacement.
    std::vector<size_t> pool(total);
    std::iota(pool.begin(), pool.end(), size_t{0});
    for (int i = 0; i < n_coords; ++i) {
      const int j = rng.uniform_int(i, static_cast<int>(total) - 1);
      std::swap(pool[i], pool[j]);
      coords.push_back(pool[i]);
    }
  }

  double max_rel_err = 0.0;
  for (size_t flat : coords) {
    size_t offset = flat;
    Parameter* target = nullptr;
    for (Parameter* p : params) {
      if (offset < p->value.size()) {
        target = p;
        break;
      }
      offset -= p->value.size();
    }

    const double analytic = target->grad.data[offset];
    const double saved = target->value.data[offset];

    target->value.data[offset] = saved + step;
    const double up = loss(false);
    target->value.data[offset] = saved - step;
    const double down = loss(false);
    target->value.data[offset] = saved;

    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite loss at perturbation");
    }
    const double central = (up - down) / (2.0 * step);
    const double rel_err = std::abs(analytic - central) /
                           (std::abs(analytic) + std::abs(central) + 1e-12);
    max_rel_err = std::max(max_rel_err, rel_err);
  }
  return max_rel_err;
}

}  // namespace tslora
