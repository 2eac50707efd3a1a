#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "cbqa/error.hpp"
#include "cbqa/model.hpp"

namespace cbqa {

// Constant learning rate; the remaining constants are the optimizer's
// published defaults.
struct AdafactorConfig {
  double learning_rate = 1e-3;
  double eps1 = 1e-30;           // added to squared gradients
  double eps2 = 1e-3;            // floor on parameter RMS, used only with scale_by_parameter_rms
  double clip_threshold = 1.0;   // update RMS ceiling
  double decay_exponent = 0.8;   // beta2_t = 1 - t^(-decay_exponent)
  bool scale_by_parameter_rms = false;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(clip_threshold > 0.0)) throw ConfigError("clip_threshold must be positive");
    if (!(decay_exponent > 0.0 && decay_exponent <= 1.0)) throw ConfigError("decay_exponent must lie in (0, 1]");
    if (!(eps1 >= 0.0) || !(eps2 >= 0.0)) throw ConfigError("eps1 and eps2 must be nonnegative");
  }
};

// Second-moment accumulators of one tensor: row/column statistics for
// matrices, a full copy for vectors.
template <typename Scalar>
struct AdafactorSlot {
  bool factored = false;
  Vector<Scalar> row;   // length rows(), factored only
  Vector<Scalar> col;   // length cols(), factored only
  Matrix<Scalar> full;  // same shape as the parameter, vectors only
};

template <typename Scalar>
struct AdafactorState {
  std::uint64_t step = 0;
  std::map<std::string, AdafactorSlot<Scalar>> slots;
};

template <typename Scalar>
AdafactorState<Scalar> init_state(const Parameters<Scalar>& params) {
  AdafactorState<Scalar> state;
  for (const auto& [name, t] : params.tensors) {
    AdafactorSlot<Scalar> slot;
    slot.factored = !is_vector_tensor(t);
    if (slot.factored) {
      slot.row = Vector<Scalar>::Zero(t.rows());
      slot.col = Vector<Scalar>::Zero(t.cols());
    } else {
      slot.full = Matrix<Scalar>::Zero(t.rows(), t.cols());
    }
    state.slots.emplace(name, std::move(slot));
  }
  return state;
}

inline double adafactor_beta2(std::uint64_t step, double decay_exponent) {
  return 1.0 - std::pow(static_cast<double>(step), -decay_exponent);
}

// Factored estimate outer(row, col) / mean(row).
template <typename Scalar>
Matrix<Scalar> factored_second_moment(const Vector<Scalar>& row, const Vector<Scalar>& col) {
  const Scalar mean = row.mean();
  return (row * col.transpose()) / mean;
}

template <typename Scalar>
Matrix<Scalar> adafactor_second_moment(const AdafactorSlot<Scalar>& slot) {
  return slot.factored ? factored_second_moment(slot.row, slot.col) : slot.full;
}

template <typename Scalar>
Scalar rms(const Matrix<Scalar>& m) {
  return std::sqrt(m.squaredNorm() / static_cast<Scalar>(m.size()));
}

struct AdafactorStepStats {
  double max_update_rms = 0.0;  // after clipping
};

// One in-place update of every tensor.
template <typename Scalar>
AdafactorStepStats adafactor_step(Parameters<Scalar>& params, const Parameters<Scalar>& grads,
                                  AdafactorState<Scalar>& state, const AdafactorConfig& config) {
  config.validate();
  if (grads.tensors.size() != params.tensors.size() || state.slots.size() != params.tensors.size())
    throw InvalidArgument("adafactor: parameter, gradient and state sets differ");
  for (const auto& [name, g] : grads.tensors) {
    const auto it = params.tensors.find(name);
    if (it == params.tensors.end() || it->second.rows() != g.rows() || it->second.cols() != g.cols())
      throw InvalidArgument("adafactor: shape mismatch for " + name);
    if (!g.allFinite()) throw NumericError("adafactor: non-finite gradient in " + name);
  }

  const std::uint64_t t = state.step + 1;
  const auto beta2 = static_cast<Scalar>(adafactor_beta2(t, config.decay_exponent));
  const auto one_minus = static_cast<Scalar>(1) - beta2;
  const auto eps1 = static_cast<Scalar>(config.eps1);
  AdafactorStepStats stats;

  for (auto& [name, param] : params.tensors) {
    const Matrix<Scalar>& g = grads.tensors.at(name);
    auto& slot = state.slots.at(name);
    const Matrix<Scalar> g2 = (g.array().square() + eps1).matrix();
    Matrix<Scalar> update;
    if (slot.factored) {
      slot.row = beta2 * slot.row + one_minus * g2.rowwise().mean();
      slot.col = beta2 * slot.col + one_minus * g2.colwise().mean().transpose();
      update = (g.array() / factored_second_moment(slot.row, slot.col).array().sqrt()).matrix();
    } else {
      slot.full = beta2 * slot.full + one_minus * g2;
      update = (g.array() / slot.full.array().sqrt()).matrix();
    }
    const Scalar u_rms = rms(update);
    const auto clip = static_cast<Scalar>(config.clip_threshold);
    if (u_rms > clip) update *= clip / u_rms;
    stats.max_update_rms = std::max(stats.max_update_rms, static_cast<double>(rms(update)));

    Scalar step_size = static_cast<Scalar>(config.learning_rate);
    if (config.scale_by_parameter_rms) step_size *= std::max(static_cast<Scalar>(config.eps2), rms(param));
    param -= step_size * update;
  }
  state.step = t;
  return stats;
}

}  // namespace cbqa
