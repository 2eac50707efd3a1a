#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "cbqa/adafactor.hpp"
#include "cbqa/checkpoint.hpp"
#include "cbqa/error.hpp"

namespace cbqa {
namespace {

// Unfactored reference: elementwise EMA of grad^2 + eps1 under the same
// beta2 schedule.
struct UnfactoredOracle {
  Matrix<double> v;
  std::uint64_t step = 0;

  void update(const Matrix<double>& g, const AdafactorConfig& cfg) {
    ++step;
    const double beta2 = 1.0 - std::pow(static_cast<double>(step), -cfg.decay_exponent);
    const Matrix<double> g2 = (g.array().square() + cfg.eps1).matrix();
    v = v.size() == 0 ? Matrix<double>((1.0 - beta2) * g2) : Matrix<double>(beta2 * v + (1.0 - beta2) * g2);
  }
};

Parameters<double> single(const std::string& name, Matrix<double> m) {
  Parameters<double> p;
  p.tensors.emplace(name, std::move(m));
  return p;
}

TEST(AdafactorConfig, DefaultsArePinned) {
  const AdafactorConfig c;
  EXPECT_EQ(c.learning_rate, 0.001);
  EXPECT_EQ(c.eps1, 1e-30);
  EXPECT_EQ(c.eps2, 1e-3);
  EXPECT_EQ(c.clip_threshold, 1.0);
  EXPECT_EQ(c.decay_exponent, 0.8);
  EXPECT_FALSE(c.scale_by_parameter_rms);
}

TEST(AdafactorState, ShapesAndZeros) {
  Parameters<double> p;
  p.tensors.emplace("w", Matrix<double>::Random(3, 5));
  p.tensors.emplace("g", Matrix<double>::Random(4, 1));
  const auto s = init_state(p);
  EXPECT_EQ(s.step, 0u);
  const auto& w = s.slots.at("w");
  EXPECT_TRUE(w.factored);
  EXPECT_EQ(w.row.size(), 3);
  EXPECT_EQ(w.col.size(), 5);
  EXPECT_TRUE(w.row.isZero() && w.col.isZero());
  const auto& g = s.slots.at("g");
  EXPECT_FALSE(g.factored);
  EXPECT_EQ(g.full.rows(), 4);
  EXPECT_TRUE(g.full.isZero());
}

TEST(AdafactorStep, RankOneGradientRecoversExactSecondMoment) {
  const AdafactorConfig cfg;
  Vector<double> r(4), c(6);
  r << 0.5, -1.5, 2.0, 0.25;
  c << 1.0, -0.2, 0.3, 3.0, -0.7, 0.05;
  const Matrix<double> g = r * c.transpose();
  auto params = single("w", Matrix<double>::Zero(4, 6));
  auto state = init_state(params);
  UnfactoredOracle oracle;
  for (int t = 0; t < 20; ++t) {
    adafactor_step(params, single("w", g), state, cfg);
    oracle.update(g, cfg);
    const Matrix<double> estimate = adafactor_second_moment(state.slots.at("w"));
    const double rel = ((estimate - oracle.v).array().abs() / oracle.v.array()).maxCoeff();
    EXPECT_LT(rel, 1e-12) << "step " << t + 1;
  }
}

TEST(AdafactorStep, VectorStateMatchesUnfactoredReference) {
  const AdafactorConfig cfg;
  std::mt19937_64 gen(3);
  std::normal_distribution<double> normal;
  auto params = single("b", Matrix<double>::Zero(7, 1));
  auto state = init_state(params);
  UnfactoredOracle oracle;
  for (int t = 0; t < 50; ++t) {
    Matrix<double> g(7, 1);
    for (Eigen::Index i = 0; i < 7; ++i) g(i) = normal(gen);
    adafactor_step(params, single("b", g), state, cfg);
    oracle.update(g, cfg);
    EXPECT_LT((state.slots.at("b").full - oracle.v).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AdafactorStep, QuadraticBowlDecreasesMonotonically) {
  const AdafactorConfig cfg;
  auto params = single("x", Matrix<double>::Constant(1, 1, 1.0));
  auto state = init_state(params);
  double previous = 1.0;
  for (int t = 1; t <= 100; ++t) {
    const double x = params["x"](0, 0);
    adafactor_step(params, single("x", Matrix<double>::Constant(1, 1, 2.0 * x)), state, cfg);
    const double loss = params["x"](0, 0) * params["x"](0, 0);
    if (t > 2) EXPECT_LT(loss, previous) << "step " << t;
    previous = loss;
  }
  EXPECT_LT(previous, 1.0);
}

TEST(AdafactorStep, ZeroGradientOnlyDecaysAccumulators) {
  const AdafactorConfig cfg;
  Parameters<double> p;
  p.tensors.emplace("w", Matrix<double>::Random(3, 4));
  p.tensors.emplace("b", Matrix<double>::Random(3, 1));
  auto state = init_state(p);
  Parameters<double> g;
  g.tensors.emplace("w", Matrix<double>::Random(3, 4));
  g.tensors.emplace("b", Matrix<double>::Random(3, 1));
  adafactor_step(p, g, state, cfg);
  const auto before = p;
  const auto row_before = state.slots.at("w").row;
  adafactor_step(p, zeros_like(g), state, cfg);
  for (const auto& [name, t] : p.tensors) EXPECT_TRUE((t.array() == before.tensors.at(name).array()).all()) << name;
  const double beta2 = adafactor_beta2(2, cfg.decay_exponent);
  EXPECT_TRUE(state.slots.at("w").row.isApprox(beta2 * row_before + (1 - beta2) * Vector<double>::Constant(3, cfg.eps1)));
}

TEST(AdafactorStep, UpdateRmsNeverExceedsClipThreshold) {
  AdafactorConfig cfg;
  cfg.learning_rate = 1.0;
  std::mt19937_64 gen(11);
  std::normal_distribution<double> normal;
  Parameters<double> p;
  p.tensors.emplace("w", Matrix<double>::Zero(5, 8));
  p.tensors.emplace("b", Matrix<double>::Zero(5, 1));
  auto state = init_state(p);
  for (int t = 0; t < 200; ++t) {
    Parameters<double> g = zeros_like(p);
    for (auto& [_, m] : g.tensors)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(gen) * std::pow(10.0, (t % 7) - 3);
    const auto before = p;
    const auto stats = adafactor_step(p, g, state, cfg);
    EXPECT_LE(stats.max_update_rms, cfg.clip_threshold + 1e-6);
    for (const auto& [name, m] : p.tensors)
      EXPECT_LE(rms(Matrix<double>(before.tensors.at(name) - m)), cfg.clip_threshold + 1e-6);
  }
}

TEST(FactoredSecondMoment, PreservesRowAndColumnSums) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> uniform(0.0, 3.0);
  std::uniform_int_distribution<int> dim(1, 9);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix<double> m(dim(gen), dim(gen));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(gen);
    const Vector<double> rows = m.rowwise().mean();
    const Vector<double> cols = m.colwise().mean().transpose();
    const Matrix<double> f = factored_second_moment(rows, cols);
    EXPECT_TRUE(f.rowwise().sum().isApprox(m.rowwise().sum(), 1e-12));
    EXPECT_TRUE(f.colwise().sum().isApprox(m.colwise().sum(), 1e-12));
  }
}

TEST(AdafactorStep, RejectsShapeMismatchAndNonFiniteGradients) {
  auto p = single("w", Matrix<double>::Zero(2, 3));
  auto state = init_state(p);
  EXPECT_THROW(adafactor_step(p, single("w", Matrix<double>::Zero(3, 2)), state, {}), InvalidArgument);
  Matrix<double> bad = Matrix<double>::Zero(2, 3);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adafactor_step(p, single("w", bad), state, {}), NumericError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig cfg;
  cfg.vocab_size = 40;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params = init_params<float>(cfg, 1);
  auto state = init_state(ckpt.params);
  auto grads = zeros_like(ckpt.params);
  for (auto& [_, g] : grads.tensors) g.setConstant(0.25f);
  adafactor_step(ckpt.params, grads, state, {});
  ckpt.optimizer = state;
  ckpt.meta = {{"step", 1}, {"objective", "SC"}};

  const auto path = std::filesystem::temp_directory_path() / "cbqa_ckpt_roundtrip.ckpt";
  save_checkpoint(path, ckpt);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.config, cfg);
  EXPECT_EQ(loaded.meta, ckpt.meta);
  EXPECT_EQ(parameter_digest(loaded.params), parameter_digest(ckpt.params));
  ASSERT_TRUE(loaded.optimizer.has_value());
  EXPECT_EQ(loaded.optimizer->step, 1u);
  for (const auto& [name, slot] : state.slots) {
    const auto& other = loaded.optimizer->slots.at(name);
    EXPECT_EQ(slot.factored, other.factored);
    if (slot.factored) {
      EXPECT_TRUE((slot.row.array() == other.row.array()).all());
      EXPECT_TRUE((slot.col.array() == other.col.array()).all());
    } else {
      EXPECT_TRUE((slot.full.array() == other.full.array()).all());
    }
  }

  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::getline(in, magic);
  EXPECT_EQ(magic, "CBQA-CKPT v1");
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace cbqa
