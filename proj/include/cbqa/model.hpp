#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cbqa/tokenizer.hpp"

namespace cbqa {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t max_len = 64;
  double dropout_rate = 0.1;
  std::size_t rel_pos_buckets = 32;
  std::size_t rel_pos_max_distance = 128;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named dense tensors. Norm gains are (d_model x 1) columns; every other
// tensor is a genuine matrix. std::map keeps iteration order stable.
template <typename Scalar>
struct Parameters {
  std::map<std::string, Matrix<Scalar>> tensors;

  Matrix<Scalar>& operator[](const std::string& name) { return tensors.at(name); }
  const Matrix<Scalar>& operator[](const std::string& name) const { return tensors.at(name); }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }
};

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& p) {
  Parameters<To> out;
  for (const auto& [name, t] : p.tensors) out.tensors.emplace(name, t.template cast<To>());
  return out;
}

template <typename Scalar>
Parameters<Scalar> zeros_like(const Parameters<Scalar>& p) {
  Parameters<Scalar> out;
  for (const auto& [name, t] : p.tensors) out.tensors.emplace(name, Matrix<Scalar>::Zero(t.rows(), t.cols()));
  return out;
}

// First non-finite tensor name, or empty.
template <typename Scalar>
std::string first_non_finite(const Parameters<Scalar>& p) {
  for (const auto& [name, t] : p.tensors)
    if (!t.allFinite()) return name;
  return {};
}

// Vector-shaped tensors get unfactored optimizer state.
template <typename Scalar>
bool is_vector_tensor(const Matrix<Scalar>& t) {
  return t.cols() == 1 || t.rows() == 1;
}

// Padded token matrices, one row per example.
struct Batch {
  using TokenMatrix = Eigen::Matrix<TokenId, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  TokenMatrix inputs;
  TokenMatrix targets;
  std::vector<std::size_t> input_lengths;
  std::vector<std::size_t> target_lengths;

  std::size_t size() const { return input_lengths.size(); }
  std::size_t target_tokens() const;
  std::span<const TokenId> input_row(std::size_t i) const {
    return {inputs.row(static_cast<Eigen::Index>(i)).data(), input_lengths[i]};
  }
  std::span<const TokenId> target_row(std::size_t i) const {
    return {targets.row(static_cast<Eigen::Index>(i)).data(), target_lengths[i]};
  }
};

struct SequencePair {
  TokenIds inputs;
  TokenIds targets;
  std::size_t tokens() const { return inputs.size() + targets.size(); }
};

// Right-pads with the pad id; `min_width` widens both matrices further.
Batch make_batch(std::span<const SequencePair> pairs, std::size_t min_width = 0);

// T5 relative-position bucket for key_pos - query_pos.
int relative_position_bucket(long relative_position, bool bidirectional, int num_buckets, int max_distance);

// Normal(0, 1/fan_in) projections, Normal(0, 0.25) shared embedding,
// Normal(0, 0.01) position-bias tables, unit norm gains. Every draw is keyed
// by (seed, tensor name, element index).
template <typename Scalar>
Parameters<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

template <typename Scalar>
struct LossAndGrad {
  double loss = 0.0;
  std::size_t target_tokens = 0;
  Parameters<Scalar> grads;
};

// Mean token cross-entropy over all target positions under teacher forcing,
// with exact gradients. Dropout masks are keyed by (rng_stream, example,
// layer, site). Examples are reduced in fixed chunk order, so results do not
// depend on `threads`.
template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const ModelConfig& config, const Parameters<Scalar>& params, const Batch& batch,
                                  bool dropout_on, std::uint64_t rng_stream, std::size_t threads = 1);

// Loss only (no dropout).
template <typename Scalar>
double batch_loss(const ModelConfig& config, const Parameters<Scalar>& params, const Batch& batch);

template <typename Scalar>
struct ForwardTrace {
  Matrix<Scalar> logits;  // (target_len x vocab)
  // Every attention probability matrix, encoder self, decoder self and
  // decoder cross, in layer order, one per head.
  std::vector<Matrix<Scalar>> attention;
};

// Teacher-forced forward pass of one example without dropout.
template <typename Scalar>
ForwardTrace<Scalar> trace_forward(const ModelConfig& config, const Parameters<Scalar>& params,
                                   std::span<const TokenId> inputs, std::span<const TokenId> targets);

// Emits the argmax token (ties to the lowest id) until eos or `max_len`
// tokens. The returned sequence excludes eos.
template <typename Scalar>
TokenIds greedy_decode(const ModelConfig& config, const Parameters<Scalar>& params, std::span<const TokenId> inputs,
                       std::size_t max_len);

#define CBQA_DECLARE_MODEL(Scalar)                                                                               \
  extern template Parameters<Scalar> init_params<Scalar>(const ModelConfig&, std::uint64_t);                     \
  extern template LossAndGrad<Scalar> loss_and_grad<Scalar>(const ModelConfig&, const Parameters<Scalar>&,       \
                                                            const Batch&, bool, std::uint64_t, std::size_t);     \
  extern template double batch_loss<Scalar>(const ModelConfig&, const Parameters<Scalar>&, const Batch&);        \
  extern template ForwardTrace<Scalar> trace_forward<Scalar>(const ModelConfig&, const Parameters<Scalar>&,      \
                                                             std::span<const TokenId>, std::span<const TokenId>); \
  extern template TokenIds greedy_decode<Scalar>(const ModelConfig&, const Parameters<Scalar>&,                  \
                                                 std::span<const TokenId>, std::size_t);

CBQA_DECLARE_MODEL(float)
CBQA_DECLARE_MODEL(double)
#undef CBQA_DECLARE_MODEL

}  // namespace cbqa
