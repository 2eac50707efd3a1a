#pragma once

// Test-only oracle: centered finite differences of the batch loss, computed
// through the loss-only forward path.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>

#include "cbqa/model.hpp"

namespace cbqa::testing {

struct GradientCheckReport {
  std::map<std::string, double> max_relative_error;
  std::size_t coordinates = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps coordinates
// whose true gradient is zero from dividing roundoff by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `per_tensor` > 0 checks that many coordinates per tensor, drawn without
// replacement from a fixed stream; 0 checks every coordinate.
inline GradientCheckReport check_gradients(const ModelConfig& cfg, const Parameters<double>& params, const Batch& batch,
                                           double h, std::size_t per_tensor = 0) {
  const auto analytic = loss_and_grad(cfg, params, batch, false, 0).grads;
  Parameters<double> probe = params;
  GradientCheckReport report;
  for (auto& [name, tensor] : probe.tensors) {
    double worst = 0.0;
    const auto& g = analytic.tensors.at(name);
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(tensor.size()));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    if (per_tensor > 0 && per_tensor < coords.size()) {
      std::mt19937_64 gen(coords.size());
      std::shuffle(coords.begin(), coords.end(), gen);
      coords.resize(per_tensor);
    }
    for (const Eigen::Index i : coords) {
      const double saved = tensor.data()[i];
      tensor.data()[i] = saved + h;
      const double up = batch_loss(cfg, probe, batch);
      tensor.data()[i] = saved - h;
      const double down = batch_loss(cfg, probe, batch);
      tensor.data()[i] = saved;
      worst = std::max(worst, relative_error(g.data()[i], (up - down) / (2 * h)));
      ++report.coordinates;
    }
    report.max_relative_error[name] = worst;
  }
  return report;
}

}  // namespace cbqa::testing
