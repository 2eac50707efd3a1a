#include "cbqa/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <thread>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"

namespace cbqa {

void ModelConfig::validate() const {
  if (vocab_size < 3) throw ConfigError("vocab_size must be at least 3");
  if (d_model == 0 || n_heads == 0 || d_ff == 0) throw ConfigError("d_model, n_heads and d_ff must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  if (n_enc_layers == 0 || n_dec_layers == 0) throw ConfigError("encoder and decoder need at least one layer");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (rel_pos_buckets < 4 || rel_pos_max_distance < rel_pos_buckets / 2)
    throw ConfigError("rel_pos_buckets must be >= 4 and rel_pos_max_distance >= rel_pos_buckets / 2");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},       {"d_model", d_model},
          {"n_heads", n_heads},             {"d_ff", d_ff},
          {"n_enc_layers", n_enc_layers},   {"n_dec_layers", n_dec_layers},
          {"max_len", max_len},             {"dropout_rate", dropout_rate},
          {"rel_pos_buckets", rel_pos_buckets}, {"rel_pos_max_distance", rel_pos_max_distance}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
  c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.rel_pos_buckets = j.value("rel_pos_buckets", std::size_t{32});
  c.rel_pos_max_distance = j.value("rel_pos_max_distance", std::size_t{128});
  return c;
}

std::size_t Batch::target_tokens() const {
  std::size_t n = 0;
  for (const auto l : target_lengths) n += l;
  return n;
}

Batch make_batch(std::span<const SequencePair> pairs, std::size_t min_width) {
  std::size_t in_w = min_width;
  std::size_t out_w = min_width;
  for (const auto& p : pairs) {
    in_w = std::max(in_w, p.inputs.size());
    out_w = std::max(out_w, p.targets.size());
  }
  const auto rows = static_cast<Eigen::Index>(pairs.size());
  Batch b;
  b.inputs = Batch::TokenMatrix::Constant(rows, static_cast<Eigen::Index>(in_w), kPadId);
  b.targets = Batch::TokenMatrix::Constant(rows, static_cast<Eigen::Index>(out_w), kPadId);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t t = 0; t < pairs[i].inputs.size(); ++t) b.inputs(r, static_cast<Eigen::Index>(t)) = pairs[i].inputs[t];
    for (std::size_t t = 0; t < pairs[i].targets.size(); ++t)
      b.targets(r, static_cast<Eigen::Index>(t)) = pairs[i].targets[t];
    b.input_lengths.push_back(pairs[i].inputs.size());
    b.target_lengths.push_back(pairs[i].targets.size());
  }
  return b;
}

int relative_position_bucket(long relative_position, bool bidirectional, int num_buckets, int max_distance) {
  int ret = 0;
  long n = -relative_position;
  if (bidirectional) {
    num_buckets /= 2;
    if (n < 0) ret += num_buckets;
    n = std::abs(n);
  } else {
    n = std::max(n, 0L);
  }
  const int max_exact = num_buckets / 2;
  if (n < max_exact) return ret + static_cast<int>(n);
  const int large = max_exact + static_cast<int>(std::log(static_cast<double>(n) / max_exact) /
                                                 std::log(static_cast<double>(max_distance) / max_exact) *
                                                 (num_buckets - max_exact));
  return ret + std::min(large, num_buckets - 1);
}

namespace {

constexpr double kNormEps = 1e-6;

std::string enc_layer(std::size_t i) { return "encoder/layer_" + std::to_string(i) + "/"; }
std::string dec_layer(std::size_t i) { return "decoder/layer_" + std::to_string(i) + "/"; }

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : name) h = (h ^ c) * 0x100000001b3ull;
  return h;
}

// ---------------------------------------------------------------------------
// Layer primitives. Activations are row-major (positions x features).

template <typename S>
struct NormCache {
  Matrix<S> x;
  Vector<S> inv_rms;
};

template <typename S>
Matrix<S> rms_norm(const Matrix<S>& x, const Matrix<S>& gain, NormCache<S>* cache) {
  const S d = static_cast<S>(x.cols());
  const Vector<S> inv = ((x.array().square().rowwise().sum() / d) + static_cast<S>(kNormEps)).rsqrt().matrix();
  Matrix<S> y = (x.array().colwise() * inv.array()).matrix();
  y.array().rowwise() *= gain.col(0).transpose().array();
  if (cache) {
    cache->x = x;
    cache->inv_rms = inv;
  }
  return y;
}

template <typename S>
Matrix<S> rms_norm_backward(const Matrix<S>& dy, const Matrix<S>& gain, const NormCache<S>& c, Matrix<S>& dgain) {
  const Matrix<S> xhat = (c.x.array().colwise() * c.inv_rms.array()).matrix();
  dgain.col(0) += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  Matrix<S> a = dy;
  a.array().rowwise() *= gain.col(0).transpose().array();
  const Vector<S> proj = (a.array() * xhat.array()).rowwise().sum().matrix() / static_cast<S>(c.x.cols());
  Matrix<S> dx = a - (xhat.array().colwise() * proj.array()).matrix();
  dx.array().colwise() *= c.inv_rms.array();
  return dx;
}

template <typename S>
S gelu(S x) {
  constexpr S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + std::tanh(c * (x + static_cast<S>(0.044715) * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  constexpr S c = static_cast<S>(0.7978845608028654);
  const S t = std::tanh(c * (x + static_cast<S>(0.044715) * x * x * x));
  return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
         static_cast<S>(0.5) * x * (static_cast<S>(1) - t * t) * c * (static_cast<S>(1) + static_cast<S>(0.134145) * x * x);
}

// Inverted dropout keyed by site; an empty mask means "keep everything".
template <typename S>
struct Dropout {
  bool on = false;
  double rate = 0.0;
  CounterRng rng{0, 0};

  Matrix<S> mask(std::uint64_t site, Eigen::Index rows, Eigen::Index cols) const {
    if (!on || rate <= 0.0) return {};
    Matrix<S> m(rows, cols);
    const CounterRng r = rng.fork(site);
    const S keep = static_cast<S>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.uniform(static_cast<std::uint64_t>(i)) < rate ? S(0) : keep;
    return m;
  }
};

enum class Site : std::uint64_t { EncSelf = 0, DecSelf = 1, DecCross = 2, EncFfn = 3, DecFfn = 4 };

std::uint64_t site_id(Site site, std::size_t layer, std::size_t head = 0) {
  return (static_cast<std::uint64_t>(layer) * 8 + static_cast<std::uint64_t>(site)) * 1024 + head;
}

struct AttentionWeights {
  std::string q, k, v, o;
};

template <typename S>
struct AttentionCache {
  Matrix<S> xq, xkv, q, k, v, context;
  std::vector<Matrix<S>> probs;
  std::vector<Matrix<S>> masks;
  Eigen::MatrixXi buckets;  // empty when the attention has no position bias
};

struct AttentionShape {
  std::size_t heads;
  bool causal;
  const std::string* bias;  // position-bias tensor name, or null
  bool bidirectional;
  Site site;
  std::size_t layer;
};

template <typename S>
Eigen::MatrixXi bucket_matrix(const ModelConfig& cfg, Eigen::Index tq, Eigen::Index tk, bool bidirectional) {
  Eigen::MatrixXi b(tq, tk);
  for (Eigen::Index i = 0; i < tq; ++i)
    for (Eigen::Index j = 0; j < tk; ++j)
      b(i, j) = relative_position_bucket(static_cast<long>(j - i), bidirectional, static_cast<int>(cfg.rel_pos_buckets),
                                         static_cast<int>(cfg.rel_pos_max_distance));
  return b;
}

template <typename S>
Matrix<S> attention(const ModelConfig& cfg, const Parameters<S>& p, const AttentionWeights& w, const AttentionShape& shape,
                    const Matrix<S>& xq, const Matrix<S>& xkv, const Dropout<S>& dropout, AttentionCache<S>& c) {
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  c.xq = xq;
  c.xkv = xkv;
  c.q.noalias() = xq * p[w.q];
  c.k.noalias() = xkv * p[w.k];
  c.v.noalias() = xkv * p[w.v];
  const Eigen::Index tq = xq.rows();
  const Eigen::Index tk = xkv.rows();
  if (shape.bias) c.buckets = bucket_matrix<S>(cfg, tq, tk, shape.bidirectional);
  c.context.resize(tq, static_cast<Eigen::Index>(cfg.d_model));
  c.probs.assign(shape.heads, {});
  c.masks.assign(shape.heads, {});

  for (std::size_t h = 0; h < shape.heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    Matrix<S> scores = (c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose()) * scale;
    if (shape.bias) {
      const Matrix<S>& table = p[*shape.bias];
      for (Eigen::Index i = 0; i < tq; ++i)
        for (Eigen::Index j = 0; j < tk; ++j) scores(i, j) += table(c.buckets(i, j), static_cast<Eigen::Index>(h));
    }
    for (Eigen::Index i = 0; i < tq; ++i) {
      const Eigen::Index valid = shape.causal ? std::min<Eigen::Index>(i + 1, tk) : tk;
      auto row = scores.row(i);
      const S mx = row.head(valid).maxCoeff();
      row.head(valid) = (row.head(valid).array() - mx).exp().matrix();
      row.head(valid) /= row.head(valid).sum();
      if (valid < tk) row.tail(tk - valid).setZero();
    }
    c.masks[h] = dropout.mask(site_id(shape.site, shape.layer, h), tq, tk);
    if (c.masks[h].size() > 0) {
      c.context.middleCols(off, dh).noalias() = (scores.array() * c.masks[h].array()).matrix() * c.v.middleCols(off, dh);
    } else {
      c.context.middleCols(off, dh).noalias() = scores * c.v.middleCols(off, dh);
    }
    c.probs[h] = std::move(scores);
  }
  return c.context * p[w.o];
}

// Returns (dxq, dxkv).
template <typename S>
std::pair<Matrix<S>, Matrix<S>> attention_backward(const ModelConfig& cfg, const Parameters<S>& p, Parameters<S>& g,
                                                   const AttentionWeights& w, const AttentionShape& shape,
                                                   const AttentionCache<S>& c, const Matrix<S>& dout) {
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  g[w.o].noalias() += c.context.transpose() * dout;
  const Matrix<S> dcontext = dout * p[w.o].transpose();
  Matrix<S> dq(c.q.rows(), c.q.cols());
  Matrix<S> dk(c.k.rows(), c.k.cols());
  Matrix<S> dv(c.v.rows(), c.v.cols());

  for (std::size_t h = 0; h < shape.heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    const Matrix<S>& P = c.probs[h];
    const bool masked = c.masks[h].size() > 0;
    const auto dctx = dcontext.middleCols(off, dh);
    Matrix<S> dP = dctx * c.v.middleCols(off, dh).transpose();
    if (masked) {
      dv.middleCols(off, dh).noalias() = (P.array() * c.masks[h].array()).matrix().transpose() * dctx;
      dP.array() *= c.masks[h].array();
    } else {
      dv.middleCols(off, dh).noalias() = P.transpose() * dctx;
    }
    const Vector<S> row_dot = (dP.array() * P.array()).rowwise().sum().matrix();
    const Matrix<S> dS = (P.array() * (dP.array().colwise() - row_dot.array())).matrix();
    if (shape.bias) {
      Matrix<S>& dtable = g[*shape.bias];
      for (Eigen::Index i = 0; i < dS.rows(); ++i)
        for (Eigen::Index j = 0; j < dS.cols(); ++j) dtable(c.buckets(i, j), static_cast<Eigen::Index>(h)) += dS(i, j);
    }
    dq.middleCols(off, dh).noalias() = (dS * c.k.middleCols(off, dh)) * scale;
    dk.middleCols(off, dh).noalias() = (dS.transpose() * c.q.middleCols(off, dh)) * scale;
  }
  g[w.q].noalias() += c.xq.transpose() * dq;
  g[w.k].noalias() += c.xkv.transpose() * dk;
  g[w.v].noalias() += c.xkv.transpose() * dv;
  Matrix<S> dxq = dq * p[w.q].transpose();
  Matrix<S> dxkv = dk * p[w.k].transpose();
  dxkv.noalias() += dv * p[w.v].transpose();
  return {std::move(dxq), std::move(dxkv)};
}

template <typename S>
struct FfnCache {
  Matrix<S> x, pre, act, mask;
};

template <typename S>
Matrix<S> ffn(const Parameters<S>& p, const std::string& prefix, const Matrix<S>& x, const Dropout<S>& dropout,
              std::uint64_t site, FfnCache<S>& c) {
  c.x = x;
  c.pre.noalias() = x * p[prefix + "ffn_in"];
  c.act = c.pre.unaryExpr([](S v) { return gelu(v); });
  c.mask = dropout.mask(site, c.act.rows(), c.act.cols());
  if (c.mask.size() > 0) return (c.act.array() * c.mask.array()).matrix() * p[prefix + "ffn_out"];
  return c.act * p[prefix + "ffn_out"];
}

template <typename S>
Matrix<S> ffn_backward(const Parameters<S>& p, Parameters<S>& g, const std::string& prefix, const FfnCache<S>& c,
                       const Matrix<S>& dout) {
  if (c.mask.size() > 0) {
    g[prefix + "ffn_out"].noalias() += (c.act.array() * c.mask.array()).matrix().transpose() * dout;
  } else {
    g[prefix + "ffn_out"].noalias() += c.act.transpose() * dout;
  }
  Matrix<S> dact = dout * p[prefix + "ffn_out"].transpose();
  if (c.mask.size() > 0) dact.array() *= c.mask.array();
  const Matrix<S> dpre = (dact.array() * c.pre.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  g[prefix + "ffn_in"].noalias() += c.x.transpose() * dpre;
  return dpre * p[prefix + "ffn_in"].transpose();
}

// ---------------------------------------------------------------------------
// Whole network.

template <typename S>
struct EncoderLayerCache {
  NormCache<S> attn_norm;
  AttentionCache<S> attn;
  NormCache<S> ffn_norm;
  FfnCache<S> ffn;
};

template <typename S>
struct DecoderLayerCache {
  NormCache<S> self_norm;
  AttentionCache<S> self_attn;
  NormCache<S> cross_norm;
  AttentionCache<S> cross_attn;
  NormCache<S> ffn_norm;
  FfnCache<S> ffn;
};

template <typename S>
struct ExampleCache {
  std::vector<EncoderLayerCache<S>> enc;
  NormCache<S> enc_final;
  Matrix<S> enc_out;
  std::vector<DecoderLayerCache<S>> dec;
  NormCache<S> dec_final;
  Matrix<S> dec_out;
  Matrix<S> logits;
};

const std::string kEmbedding = "shared_embedding";
const std::string kEncBias = "encoder/rel_bias";
const std::string kDecBias = "decoder/rel_bias";

AttentionWeights attn_weights(const std::string& prefix, const std::string& kind) {
  return {prefix + kind + "_q", prefix + kind + "_k", prefix + kind + "_v", prefix + kind + "_o"};
}

void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids, const char* what) {
  for (const TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw InvalidArgument(std::string(what) + " token id " + std::to_string(id) + " out of range [0, " +
                            std::to_string(cfg.vocab_size) + ")");
  if (ids.size() > cfg.max_len)
    throw InvalidArgument(std::string(what) + " length " + std::to_string(ids.size()) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
}

template <typename S>
Matrix<S> embed(const Parameters<S>& p, std::span<const TokenId> ids) {
  const Matrix<S>& table = p[kEmbedding];
  Matrix<S> x(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) x.row(static_cast<Eigen::Index>(t)) = table.row(ids[t]);
  return x;
}

template <typename S>
void embed_backward(Parameters<S>& g, std::span<const TokenId> ids, const Matrix<S>& dx) {
  Matrix<S>& table = g[kEmbedding];
  for (std::size_t t = 0; t < ids.size(); ++t) table.row(ids[t]) += dx.row(static_cast<Eigen::Index>(t));
}

template <typename S>
Matrix<S> encode(const ModelConfig& cfg, const Parameters<S>& p, std::span<const TokenId> inputs,
                 const Dropout<S>& dropout, ExampleCache<S>& c) {
  Matrix<S> x = embed(p, inputs);
  c.enc.resize(cfg.n_enc_layers);
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    const auto prefix = enc_layer(l);
    auto& lc = c.enc[l];
    const Matrix<S> n1 = rms_norm(x, p[prefix + "attn_norm"], &lc.attn_norm);
    const AttentionShape shape{cfg.n_heads, false, &kEncBias, true, Site::EncSelf, l};
    x += attention(cfg, p, attn_weights(prefix, "attn"), shape, n1, n1, dropout, lc.attn);
    const Matrix<S> n2 = rms_norm(x, p[prefix + "ffn_norm"], &lc.ffn_norm);
    x += ffn(p, prefix, n2, dropout, site_id(Site::EncFfn, l), lc.ffn);
  }
  c.enc_out = rms_norm(x, p["encoder/final_norm"], &c.enc_final);
  return c.enc_out;
}

// Decoder input is the target shifted right with pad as the start token.
TokenIds shift_right(std::span<const TokenId> targets) {
  TokenIds in;
  in.reserve(targets.size());
  in.push_back(kPadId);
  for (std::size_t t = 0; t + 1 < targets.size(); ++t) in.push_back(targets[t]);
  return in;
}

template <typename S>
const Matrix<S>& decode_logits(const ModelConfig& cfg, const Parameters<S>& p, std::span<const TokenId> decoder_inputs,
                               const Dropout<S>& dropout, ExampleCache<S>& c) {
  Matrix<S> x = embed(p, decoder_inputs);
  c.dec.resize(cfg.n_dec_layers);
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    const auto prefix = dec_layer(l);
    auto& lc = c.dec[l];
    const Matrix<S> n1 = rms_norm(x, p[prefix + "self_norm"], &lc.self_norm);
    const AttentionShape self_shape{cfg.n_heads, true, &kDecBias, false, Site::DecSelf, l};
    x += attention(cfg, p, attn_weights(prefix, "self"), self_shape, n1, n1, dropout, lc.self_attn);
    const Matrix<S> n2 = rms_norm(x, p[prefix + "cross_norm"], &lc.cross_norm);
    const AttentionShape cross_shape{cfg.n_heads, false, nullptr, false, Site::DecCross, l};
    x += attention(cfg, p, attn_weights(prefix, "cross"), cross_shape, n2, c.enc_out, dropout, lc.cross_attn);
    const Matrix<S> n3 = rms_norm(x, p[prefix + "ffn_norm"], &lc.ffn_norm);
    x += ffn(p, prefix, n3, dropout, site_id(Site::DecFfn, l), lc.ffn);
  }
  c.dec_out = rms_norm(x, p["decoder/final_norm"], &c.dec_final);
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  c.logits.noalias() = (c.dec_out * p[kEmbedding].transpose()) * scale;
  return c.logits;
}

// Sum of token cross-entropies; fills dlogits = (softmax - onehot) * weight.
template <typename S>
double cross_entropy(const Matrix<S>& logits, std::span<const TokenId> targets, S weight, Matrix<S>* dlogits) {
  double total = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const auto row = logits.row(t);
    const S mx = row.maxCoeff();
    const auto shifted = (row.array() - mx);
    const S sum = shifted.exp().sum();
    const S log_z = mx + std::log(sum);
    total += static_cast<double>(log_z - row(targets[static_cast<std::size_t>(t)]));
    if (dlogits) {
      dlogits->row(t) = (shifted.exp() / sum * weight).matrix();
      (*dlogits)(t, targets[static_cast<std::size_t>(t)]) -= weight;
    }
  }
  return total;
}

template <typename S>
void backward(const ModelConfig& cfg, const Parameters<S>& p, Parameters<S>& g, const ExampleCache<S>& c,
              std::span<const TokenId> inputs, std::span<const TokenId> decoder_inputs, const Matrix<S>& dlogits) {
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  g[kEmbedding].noalias() += (dlogits.transpose() * c.dec_out) * scale;
  Matrix<S> dx = rms_norm_backward<S>((dlogits * p[kEmbedding]) * scale, p["decoder/final_norm"], c.dec_final,
                                      g["decoder/final_norm"]);
  Matrix<S> denc = Matrix<S>::Zero(c.enc_out.rows(), c.enc_out.cols());

  for (std::size_t l = cfg.n_dec_layers; l-- > 0;) {
    const auto prefix = dec_layer(l);
    const auto& lc = c.dec[l];
    dx += rms_norm_backward<S>(ffn_backward(p, g, prefix, lc.ffn, dx), p[prefix + "ffn_norm"], lc.ffn_norm,
                               g[prefix + "ffn_norm"]);

    const AttentionShape cross_shape{cfg.n_heads, false, nullptr, false, Site::DecCross, l};
    auto [dq_cross, dkv_cross] = attention_backward(cfg, p, g, attn_weights(prefix, "cross"), cross_shape, lc.cross_attn, dx);
    denc += dkv_cross;
    dx += rms_norm_backward<S>(dq_cross, p[prefix + "cross_norm"], lc.cross_norm, g[prefix + "cross_norm"]);

    const AttentionShape self_shape{cfg.n_heads, true, &kDecBias, false, Site::DecSelf, l};
    auto [dq_self, dkv_self] = attention_backward(cfg, p, g, attn_weights(prefix, "self"), self_shape, lc.self_attn, dx);
    dx += rms_norm_backward<S>(Matrix<S>(dq_self + dkv_self), p[prefix + "self_norm"], lc.self_norm, g[prefix + "self_norm"]);
  }
  embed_backward(g, decoder_inputs, dx);

  dx = rms_norm_backward<S>(denc, p["encoder/final_norm"], c.enc_final, g["encoder/final_norm"]);
  for (std::size_t l = cfg.n_enc_layers; l-- > 0;) {
    const auto prefix = enc_layer(l);
    const auto& lc = c.enc[l];
    dx += rms_norm_backward<S>(ffn_backward(p, g, prefix, lc.ffn, dx), p[prefix + "ffn_norm"], lc.ffn_norm,
                               g[prefix + "ffn_norm"]);
    const AttentionShape shape{cfg.n_heads, false, &kEncBias, true, Site::EncSelf, l};
    auto [dq, dkv] = attention_backward(cfg, p, g, attn_weights(prefix, "attn"), shape, lc.attn, dx);
    dx += rms_norm_backward<S>(Matrix<S>(dq + dkv), p[prefix + "attn_norm"], lc.attn_norm, g[prefix + "attn_norm"]);
  }
  embed_backward(g, inputs, dx);
}

void check_shapes(const ModelConfig& cfg, std::span<const TokenId> inputs, std::span<const TokenId> targets) {
  if (inputs.empty()) throw InvalidArgument("empty input sequence");
  if (targets.empty()) throw InvalidArgument("empty target sequence");
  check_ids(cfg, inputs, "input");
  check_ids(cfg, targets, "target");
}

using ShapeMap = std::map<std::string, std::pair<Eigen::Index, Eigen::Index>>;

ShapeMap parameter_shapes(const ModelConfig& cfg) {
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto ff = static_cast<Eigen::Index>(cfg.d_ff);
  ShapeMap shapes;
  auto attention_block = [&](const std::string& prefix, const std::string& kind) {
    for (const char* suffix : {"_q", "_k", "_v", "_o"}) shapes[prefix + kind + suffix] = {d, d};
  };
  auto ffn_block = [&](const std::string& prefix) {
    shapes[prefix + "ffn_norm"] = {d, 1};
    shapes[prefix + "ffn_in"] = {d, ff};
    shapes[prefix + "ffn_out"] = {ff, d};
  };
  shapes[kEmbedding] = {static_cast<Eigen::Index>(cfg.vocab_size), d};
  shapes[kEncBias] = shapes[kDecBias] = {static_cast<Eigen::Index>(cfg.rel_pos_buckets),
                                         static_cast<Eigen::Index>(cfg.n_heads)};
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    const auto prefix = enc_layer(l);
    shapes[prefix + "attn_norm"] = {d, 1};
    attention_block(prefix, "attn");
    ffn_block(prefix);
  }
  shapes["encoder/final_norm"] = {d, 1};
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    const auto prefix = dec_layer(l);
    shapes[prefix + "self_norm"] = {d, 1};
    attention_block(prefix, "self");
    shapes[prefix + "cross_norm"] = {d, 1};
    attention_block(prefix, "cross");
    ffn_block(prefix);
  }
  shapes["decoder/final_norm"] = {d, 1};
  return shapes;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename S>
void check_params(const ModelConfig& cfg, const Parameters<S>& p) {
  const auto shapes = parameter_shapes(cfg);
  if (shapes.size() != p.tensors.size()) throw InvalidArgument("parameter set does not match the model config");
  for (const auto& [name, shape] : shapes) {
    const auto it = p.tensors.find(name);
    if (it == p.tensors.end()) throw InvalidArgument("missing parameter tensor " + name);
    if (it->second.rows() != shape.first || it->second.cols() != shape.second)
      throw InvalidArgument("parameter tensor " + name + " has the wrong shape");
  }
}

}  // namespace

template <typename Scalar>
Parameters<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters<Scalar> p;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    if (ends_with(name, "_norm")) {
      p.tensors.emplace(name, Matrix<Scalar>::Ones(shape.first, shape.second));
      continue;
    }
    double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    if (name == kEmbedding) stddev = 0.5;
    if (ends_with(name, "rel_bias")) stddev = 0.1;
    if (ends_with(name, "ffn_out")) stddev = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    Matrix<Scalar> m(shape.first, shape.second);
    const CounterRng rng(seed, name_hash(name));
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<Scalar>(stddev * rng.normal(static_cast<std::uint64_t>(i)));
    p.tensors.emplace(name, std::move(m));
  }
  return p;
}

template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const ModelConfig& cfg, const Parameters<Scalar>& params, const Batch& batch,
                                  bool dropout_on, std::uint64_t rng_stream, std::size_t threads) {
  cfg.validate();
  check_params(cfg, params);
  if (batch.size() == 0) throw InvalidArgument("loss_and_grad: empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i) check_shapes(cfg, batch.input_row(i), batch.target_row(i));

  const std::size_t n_tokens = batch.target_tokens();
  const Scalar weight = static_cast<Scalar>(1.0 / static_cast<double>(n_tokens));

  // Fixed-size chunks reduced in order keep the result independent of threads.
  constexpr std::size_t kChunk = 4;
  const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
  std::vector<Parameters<Scalar>> partial_grads(n_chunks);
  std::vector<double> partial_loss(n_chunks, 0.0);

  auto run_chunk = [&](std::size_t chunk) {
    auto grads = zeros_like(params);
    double loss = 0.0;
    ExampleCache<Scalar> cache;
    Matrix<Scalar> dlogits;
    for (std::size_t i = chunk * kChunk; i < std::min(batch.size(), (chunk + 1) * kChunk); ++i) {
      Dropout<Scalar> dropout{dropout_on, cfg.dropout_rate, CounterRng(rng_stream, i)};
      const auto inputs = batch.input_row(i);
      const auto targets = batch.target_row(i);
      const TokenIds dec_in = shift_right(targets);
      encode(cfg, params, inputs, dropout, cache);
      const auto& logits = decode_logits(cfg, params, dec_in, dropout, cache);
      loss += cross_entropy(logits, targets, weight, &dlogits);
      backward(cfg, params, grads, cache, inputs, dec_in, dlogits);
    }
    partial_grads[chunk] = std::move(grads);
    partial_loss[chunk] = loss;
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n_chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < n_chunks; c += workers) run_chunk(c);
      });
    for (auto& t : pool) t.join();
  }

  LossAndGrad<Scalar> out;
  out.target_tokens = n_tokens;
  out.grads = std::move(partial_grads[0]);
  double total = partial_loss[0];
  for (std::size_t c = 1; c < n_chunks; ++c) {
    for (auto& [name, t] : out.grads.tensors) t += partial_grads[c].tensors.at(name);
    total += partial_loss[c];
  }
  out.loss = total / static_cast<double>(n_tokens);
  if (!std::isfinite(out.loss)) {
    const auto bad = first_non_finite(params);
    throw NumericError("non-finite loss; first offending tensor: " + (bad.empty() ? std::string("logits") : bad));
  }
  return out;
}

template <typename Scalar>
double batch_loss(const ModelConfig& cfg, const Parameters<Scalar>& params, const Batch& batch) {
  check_params(cfg, params);
  double total = 0.0;
  ExampleCache<Scalar> cache;
  const Dropout<Scalar> off;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_shapes(cfg, batch.input_row(i), batch.target_row(i));
    const auto targets = batch.target_row(i);
    encode(cfg, params, batch.input_row(i), off, cache);
    total += cross_entropy<Scalar>(decode_logits(cfg, params, shift_right(targets), off, cache), targets, Scalar(1),
                                   nullptr);
  }
  return total / static_cast<double>(batch.target_tokens());
}

template <typename Scalar>
ForwardTrace<Scalar> trace_forward(const ModelConfig& cfg, const Parameters<Scalar>& params,
                                   std::span<const TokenId> inputs, std::span<const TokenId> targets) {
  check_params(cfg, params);
  check_shapes(cfg, inputs, targets);
  ExampleCache<Scalar> cache;
  const Dropout<Scalar> off;
  encode(cfg, params, inputs, off, cache);
  ForwardTrace<Scalar> trace;
  trace.logits = decode_logits(cfg, params, shift_right(targets), off, cache);
  for (const auto& l : cache.enc) trace.attention.insert(trace.attention.end(), l.attn.probs.begin(), l.attn.probs.end());
  for (const auto& l : cache.dec) {
    trace.attention.insert(trace.attention.end(), l.self_attn.probs.begin(), l.self_attn.probs.end());
    trace.attention.insert(trace.attention.end(), l.cross_attn.probs.begin(), l.cross_attn.probs.end());
  }
  return trace;
}

template <typename Scalar>
TokenIds greedy_decode(const ModelConfig& cfg, const Parameters<Scalar>& params, std::span<const TokenId> inputs,
                       std::size_t max_len) {
  check_params(cfg, params);
  TokenIds out;
  if (max_len == 0) return out;
  if (inputs.empty()) throw InvalidArgument("greedy_decode: empty input");
  check_ids(cfg, inputs, "input");
  max_len = std::min(max_len, cfg.max_len);

  ExampleCache<Scalar> cache;
  const Dropout<Scalar> off;
  encode(cfg, params, inputs, off, cache);
  TokenIds dec_in = {kPadId};
  while (out.size() < max_len) {
    const auto& logits = decode_logits(cfg, params, dec_in, off, cache);
    const auto last = logits.row(logits.rows() - 1);
    Eigen::Index best = 0;
    for (Eigen::Index v = 1; v < last.size(); ++v)
      if (last(v) > last(best)) best = v;
    const auto token = static_cast<TokenId>(best);
    if (token == kEosId) break;
    out.push_back(token);
    dec_in.push_back(token);
  }
  return out;
}

#define CBQA_INSTANTIATE_MODEL(Scalar)                                                                              \
  template Parameters<Scalar> init_params<Scalar>(const ModelConfig&, std::uint64_t);                               \
  template LossAndGrad<Scalar> loss_and_grad<Scalar>(const ModelConfig&, const Parameters<Scalar>&, const Batch&,   \
                                                     bool, std::uint64_t, std::size_t);                             \
  template double batch_loss<Scalar>(const ModelConfig&, const Parameters<Scalar>&, const Batch&);                  \
  template ForwardTrace<Scalar> trace_forward<Scalar>(const ModelConfig&, const Parameters<Scalar>&,                \
                                                      std::span<const TokenId>, std::span<const TokenId>);          \
  template TokenIds greedy_decode<Scalar>(const ModelConfig&, const Parameters<Scalar>&, std::span<const TokenId>, \
                                          std::size_t);

CBQA_INSTANTIATE_MODEL(float)
CBQA_INSTANTIATE_MODEL(double)

}  // namespace cbqa
