// Exit-gate checks. Prints one PASS/FAIL line per criterion with its wall
// time and budget; exits nonzero if any criterion fails or overruns.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cbqa/adafactor.hpp"
#include "cbqa/audit.hpp"
#include "cbqa/metrics.hpp"
#include "cbqa/salient_spans.hpp"
#include "cbqa/span_corruption.hpp"
#include "cbqa/trainer.hpp"
#include "cli_harness.hpp"
#include "fixtures.hpp"
#include "gradient_check.hpp"
#include "stats.hpp"

namespace cbqa {
namespace {

// Outcome of one criterion: pass flag plus a short human-readable detail.
struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

QAExample qa(std::string id, std::vector<AnswerList> answers) {
  return {std::move(id), "q", std::move(answers), Dataset::NQ};
}

Outcome metric_goldens() {
  Outcome o;
  o.require(!exact_match("confetti", qa("a", {{"little warmth", "warmth"}})), "confetti matched");
  o.require(!exact_match("katherine kiernan maria mulgrew", qa("b", {{"kate mulgrew"}})), "mulgrew matched");
  o.require(!exact_match("kennedy lc39b", qa("c", {{"florida"}})), "kennedy lc39b matched");
  const AnswerList beatles = {"John Lennon", "Ringo Starr", "George Harrison", "Paul McCartney"};
  o.require(exact_match("Ringo Starr", qa("d", {beatles})), "Ringo Starr unmatched");
  const auto split = split_answers(multi_answer_target(beatles));
  o.require(split.size() == 4 && split == beatles, "Beatles target split into " + std::to_string(split.size()));
  return o;
}

Outcome category_arithmetic() {
  Outcome o;
  const auto summary = CategorySummary::from_counts({93, 20, 20, 17});
  const std::vector<double> expected = {62.0, 13.3, 13.3, 11.3};
  for (std::size_t k = 0; k < kCategoryCount; ++k) {
    const double got = summary.percentage(kCategories[k]);
    o.require(std::abs(got - expected[k]) < 1e-9,
              std::string(to_string(kCategories[k])) + " " + fmt(got) + " != " + fmt(expected[k]));
  }
  o.require(summary.labeled == 150, "labeled " + std::to_string(summary.labeled));
  for (const auto& [correct, total] : std::vector<std::pair<std::size_t, std::size_t>>{{350, 1000}, {0, 7}, {41, 97}}) {
    const double identity = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    const double got = adjusted_accuracy(correct, total, CategorySummary::from_counts({150, 0, 0, 0}));
    o.require(got == identity, "all-TrueNegative " + fmt(got, 17) + " != " + fmt(identity, 17));
    o.require(adjusted_accuracy(correct, total, CategoryFractions{}) == identity, "zero fractions not identity");
  }
  return o;
}

Outcome span_corruption() {
  Outcome o;
  const Vocab vocab = build_vocab(std::vector<std::string>{"the quick brown fox"}, 300 + kDefaultSentinels);
  std::mt19937_64 gen(2026);
  const auto draw = [&](std::size_t n) {
    TokenIds t(n);
    for (auto& id : t) id = static_cast<TokenId>(2 + gen() % (vocab.ordinary_count() - 2));
    return t;
  };
  const CorruptionConfig cfg{0.15, 17};
  std::size_t dropped = 0, total = 0;
  for (std::uint64_t s = 0; s < 10'000; ++s) {
    const auto t = draw(100);
    dropped += masked_token_count(vocab, corrupt(vocab, t, cfg, s));
    total += t.size();
  }
  const double rate = static_cast<double>(dropped) / static_cast<double>(total);
  o.require(total == 1'000'000, "drew " + std::to_string(total) + " tokens");
  o.require(rate >= 0.145 && rate <= 0.155, "drop rate " + fmt(rate, 6));
  std::size_t round_trips = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto t = draw(1 + gen() % 120);
    round_trips += decorrupt(vocab, corrupt(vocab, t, {0.15, gen()}, gen())) == t;
  }
  o.require(round_trips == 1000, "round trips " + std::to_string(round_trips) + "/1000");
  o.detail = o.detail.empty() ? "drop rate " + fmt(rate, 6) : o.detail;
  return o;
}

Outcome salient_spans() {
  Outcome o;
  const Vocab& vocab = testing::fixture_vocab();
  const SalientSpanSource source(vocab, mine_sentences(testing::fixture_corpus(), RuleTagger{}), 5);
  o.require(source.size() > 0, "no mined sentences");
  std::size_t pairs = 0, bad = 0;
  for (std::uint64_t epoch = 0; epoch < 20; ++epoch)
    for (std::size_t i = 0; i < source.size(); ++i) {
      const auto pair = source.make(i, epoch * source.size() + i);
      std::size_t in = 0, out = 0;
      for (const TokenId id : pair.inputs) in += vocab.is_sentinel(id);
      for (const TokenId id : pair.targets) out += vocab.is_sentinel(id) && vocab.sentinel_index(id) == 0;
      bad += in != 1 || out != 1;
      ++pairs;
    }
  o.require(bad == 0, std::to_string(bad) + " of " + std::to_string(pairs) + " pairs without exactly one sentinel");

  TaggedSentence t;
  t.sentence = {"d", 0, "Marie Curie met Albert Einstein in Paris in 1911."};
  t.spans = tag_salient(t.sentence.text, RuleTagger{});
  o.require(t.spans.size() == 4, "expected 4 spans, got " + std::to_string(t.spans.size()));
  if (t.spans.size() == 4) {
    const int n = 10'000;
    std::vector<double> counts(4, 0.0);
    for (int s = 0; s < n; ++s) counts[select_span(t, static_cast<std::uint64_t>(s), 9)] += 1.0;
    const auto chi = testing::chi_square(counts, std::vector<double>(4, n / 4.0));
    o.require(chi.p_value > 0.001, "chi-square p " + fmt(chi.p_value));
    if (o.pass) o.detail = std::to_string(pairs) + " pairs, p " + fmt(chi.p_value);
  }
  return o;
}

Outcome gradient_check() {
  Outcome o;
  ModelConfig cfg;  // desk defaults: 2 encoder and 2 decoder layers
  cfg.dropout_rate = 0.0;
  o.require(cfg.n_enc_layers == 2 && cfg.n_dec_layers == 2, "desk config is not 2-layer");
  const auto params = init_params<double>(cfg, 11);
  std::mt19937_64 gen(5);
  std::vector<SequencePair> pairs;
  for (int k = 0; k < 3; ++k) {
    TokenIds in(5 + gen() % 6), out(2 + gen() % 5);
    for (auto& id : in) id = static_cast<TokenId>(2 + gen() % (cfg.vocab_size - 2));
    for (auto& id : out) id = static_cast<TokenId>(2 + gen() % (cfg.vocab_size - 2));
    out.back() = kEosId;
    pairs.push_back({in, out});
  }
  const auto report = testing::check_gradients(cfg, params, make_batch(pairs), 1e-4, 400);
  o.require(report.max_relative_error.size() == params.tensors.size(), "not every tensor checked");
  double worst = 0.0;
  for (const auto& [name, err] : report.max_relative_error) {
    worst = std::max(worst, err);
    o.require(err < 1e-4, name + " relative error " + fmt(err));
  }
  if (o.pass)
    o.detail = std::to_string(report.max_relative_error.size()) + " tensors, " + std::to_string(report.coordinates) +
               " coordinates, max " + fmt(worst, 3);
  return o;
}

Parameters<double> single(const std::string& name, Matrix<double> m) {
  Parameters<double> p;
  p.tensors.emplace(name, std::move(m));
  return p;
}

Outcome adafactor() {
  Outcome o;
  const AdafactorConfig cfg;
  Vector<double> r(5), c(3);
  r << 0.5, -1.5, 2.0, 0.25, 4.0;
  c << 1.0, -0.2, 0.03;
  const Matrix<double> g = r * c.transpose();
  auto params = single("w", Matrix<double>::Zero(5, 3));
  auto state = init_state(params);
  // Unfactored reference: elementwise EMA of g^2 + eps1.
  Matrix<double> oracle;
  double worst = 0.0;
  for (int t = 1; t <= 30; ++t) {
    adafactor_step(params, single("w", g), state, cfg);
    const double beta2 = 1.0 - std::pow(static_cast<double>(t), -cfg.decay_exponent);
    const Matrix<double> g2 = (g.array().square() + cfg.eps1).matrix();
    oracle = t == 1 ? Matrix<double>((1.0 - beta2) * g2) : Matrix<double>(beta2 * oracle + (1.0 - beta2) * g2);
    const Matrix<double> estimate = adafactor_second_moment(state.slots.at("w"));
    worst = std::max(worst, ((estimate - oracle).array().abs() / oracle.array()).maxCoeff());
  }
  o.require(worst < 1e-12, "factored vs unfactored relative error " + fmt(worst));

  // Bowl 0.5 * sum(a_ij * w_ij^2) over a factored 3x4 parameter.
  Matrix<double> curvature(3, 4);
  curvature << 1, 2, 3, 4, 0.5, 1, 1.5, 2, 2, 2, 2, 2;
  auto bowl = single("w", Matrix<double>::Constant(3, 4, 1.0));
  auto bowl_state = init_state(bowl);
  const auto loss = [&] { return 0.5 * (curvature.array() * bowl["w"].array().square()).sum(); };
  double previous = loss();
  const double start = previous;
  int increases = 0;
  for (int t = 1; t <= 100; ++t) {
    const Matrix<double> grad = (curvature.array() * bowl["w"].array()).matrix();
    adafactor_step(bowl, single("w", grad), bowl_state, cfg);
    const double now = loss();
    if (t > 2 && !(now < previous)) ++increases;
    previous = now;
  }
  o.require(increases == 0, std::to_string(increases) + " non-decreasing bowl steps");
  o.require(previous < start, "bowl loss did not fall");
  if (o.pass) o.detail = "max rel " + fmt(worst, 3) + ", bowl " + fmt(start) + " -> " + fmt(previous);
  return o;
}

Outcome overfit() {
  Outcome o;
  const auto examples = testing::capitals();
  o.require(examples.size() == 32, "fixture has " + std::to_string(examples.size()) + " pairs");
  const TaskSpec task = default_task(Dataset::NQ);
  std::vector<std::string> text;
  for (const auto& e : examples) {
    text.push_back(task.prefix + e.question);
    for (const auto& list : e.annotator_answers)
      for (const auto& a : list) text.push_back(a);
  }
  const Vocab vocab = build_vocab(text, 512);
  ModelConfig model;  // desk defaults
  model.vocab_size = vocab.size();

  TrainConfig cfg;
  cfg.optimizer.learning_rate = 0.001;
  cfg.dropout_rate = 0.0;
  cfg.total_steps = 2000;
  cfg.checkpoint_every = 25;
  cfg.max_decode_len = 16;
  // One batch holds the whole training set.
  const TaskSource source(vocab, task, examples, model.max_len, cfg.seed);
  cfg.batch_tokens = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto p = source.make(i, i);
    cfg.batch_tokens += p.inputs.size() + p.targets.size();
  }
  cfg.batch_tokens += 64;  // headroom for random target draws

  LoopOptions opts;
  opts.stop_after = [](const CheckpointRecord& r) { return r.validation_score == 100.0; };
  TrainState state = TrainState::fresh(model, 1);
  const auto result = finetune(state, vocab, {TaskData{task, examples, examples}}, {}, cfg, {}, opts);
  const auto& last = result.checkpoints.back();

  std::size_t correct = 0;
  for (const auto& p : predict(state.model, state.params, vocab, task, examples, cfg.max_decode_len))
    for (const auto& e : examples)
      if (e.id == p.id) correct += exact_match(p.prediction, e);
  o.require(correct == examples.size(), "greedy EM " + std::to_string(correct) + "/" + std::to_string(examples.size()));
  o.require(last.step <= 2000, "needed more than 2000 steps");
  o.detail = "EM " + fmt(last.validation_score.value_or(0.0)) + " at step " + std::to_string(last.step) +
             (o.pass ? "" : "; " + o.detail);
  return o;
}

Outcome protocol_fidelity() {
  Outcome o;
  const Vocab& vocab = testing::fixture_vocab();
  TrainConfig cfg;
  cfg.batch_tokens = 400;
  cfg.dropout_rate = 0.1;
  cfg.total_steps = 2;
  cfg.checkpoint_every = 2;
  const std::vector<TaskData> tasks = {prepare_task(default_task(Dataset::NQ), testing::capitals(), 1),
                                       prepare_task(default_task(Dataset::WQ), testing::languages(), 1)};
  std::map<Dataset, TaskOverrides> overrides;
  for (const auto& t : tasks) overrides[t.task.name] = default_overrides(t.task.name, cfg);
  TrainState state = TrainState::fresh(testing::small_model(vocab.size()), 1);
  const auto manifest = finetune(state, vocab, tasks, {}, cfg, overrides).manifest.at("tasks");
  o.require(manifest.size() == 2, "manifest lists " + std::to_string(manifest.size()) + " tasks");
  if (manifest.size() == 2) {
    o.require(manifest[0].at("batch_tokens") == 400 && manifest[0].at("dropout_rate") == 0.1, "NQ settings altered");
    o.require(manifest[1].at("task") == "WQ" && manifest[1].at("batch_tokens") == 200, "WQ batch not halved");
    o.require(manifest[1].at("dropout_rate") == 0.2, "WQ dropout not doubled");
  }

  std::vector<QAExample> hundred;
  for (int i = 0; i < 100; ++i) hundred.push_back(qa("h" + std::to_string(i), {{"a" + std::to_string(i)}}));
  const auto split = prepare_task(default_task(Dataset::NQ), hundred, 3);
  std::set<std::string> ids;
  for (const auto* part : {&split.train, &split.validation})
    for (const auto& e : *part) ids.insert(e.id);
  o.require(split.validation.size() == 10 && split.train.size() == 90,
            "holdout " + std::to_string(split.validation.size()) + "/" + std::to_string(split.train.size()));
  o.require(ids.size() == 100, "split is not a partition");

  const auto scored = [](std::uint64_t step, double score) {
    CheckpointRecord r;
    r.step = step;
    r.validation_score = score;
    return r;
  };
  o.require(select_best_checkpoint({scored(100, 10), scored(200, 30), scored(300, 25)}).step == 200, "argmax");
  o.require(select_best_checkpoint({scored(300, 30), scored(100, 30), scored(200, 30)}).step == 100,
            "earliest-step tie-break");
  return o;
}

Outcome objective_comparison() {
  Outcome o;
  const Vocab& vocab = testing::fixture_vocab();
  const SalientSpanSource ssm(vocab, mine_sentences(testing::fixture_corpus(), RuleTagger{}), 1);
  const SpanCorruptionSource sc(vocab, testing::fixture_corpus(), 24, {0.15, 1});
  const std::vector<TaskData> tasks = {prepare_task(default_task(Dataset::NQ), testing::capitals(), 1),
                                       prepare_task(default_task(Dataset::WQ), testing::languages(), 1),
                                       prepare_task(default_task(Dataset::TQA), testing::continents(), 1)};
  ComparisonConfig cfg;
  cfg.blocks = 3;
  cfg.pretrain_block = 10;
  cfg.finetune_steps = 10;
  cfg.pretrain.batch_tokens = 400;
  cfg.finetune.batch_tokens = 400;
  cfg.finetune.checkpoint_every = 5;
  cfg.finetune.max_decode_len = 8;
  const TrainState base = TrainState::fresh(testing::small_model(vocab.size()), 4);
  const auto rows = run_objective_comparison(base, vocab, ssm, sc, tasks, cfg);
  o.require(rows.size() == 6, std::to_string(rows.size()) + " rows");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    o.require(row.objective == (i < 3 ? Objective::SSM : Objective::SC), "row " + std::to_string(i) + " objective");
    o.require(row.pretrain_step == (i % 3 + 1) * cfg.pretrain_block, "row " + std::to_string(i) + " step");
    o.require(row.probe_start_digest == row.block_digest, "row " + std::to_string(i) + " probe started elsewhere");
    o.require(row.block_digest_after_probe == row.block_digest, "row " + std::to_string(i) + " probe leaked");
    o.require(row.max_val_em >= 0.0 && row.max_val_em <= 100.0, "row " + std::to_string(i) + " EM out of range");
  }
  std::ostringstream csv;
  write_comparison_csv(csv, rows);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  o.require(header == "objective,pretrain_step,max_val_em", "header " + header);
  int body = 0;
  for (std::string line; std::getline(lines, line);) body += std::count(line.begin(), line.end(), ',') == 2;
  o.require(body == 6, std::to_string(body) + " well-formed CSV rows");
  return o;
}

Outcome cli_determinism() {
  Outcome o;
  const auto dir = std::filesystem::temp_directory_path() / "cbqa_acceptance_pipeline";
  const auto first = testing::run_full_pipeline(dir, CBQA_TEST_DATA);
  const auto second = testing::run_full_pipeline(dir, CBQA_TEST_DATA);
  o.require(first.size() > 20, "only " + std::to_string(first.size()) + " artifacts");
  std::size_t differing = 0;
  for (const auto& [path, digest] : first) {
    const auto it = second.find(path);
    differing += it == second.end() || it->second != digest;
  }
  o.require(first.size() == second.size() && differing == 0, std::to_string(differing) + " artifacts differ");
  if (o.pass) o.detail = std::to_string(first.size()) + " artifacts byte-identical";
  return o;
}

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace cbqa

int main() {
  using namespace cbqa;
  const std::vector<Criterion> criteria = {
      {"metric goldens", 1, metric_goldens},
      {"category arithmetic", 1, category_arithmetic},
      {"span corruption drop rate and round trip", 30, span_corruption},
      {"salient span pairs and selection uniformity", 30, salient_spans},
      {"gradient check", 300, gradient_check},
      {"adafactor factorization and bowl", 10, adafactor},
      {"end-to-end overfit", 600, overfit},
      {"fine-tuning protocol", 60, protocol_fidelity},
      {"compare-objectives table", 900, objective_comparison},
      {"cli rerun determinism", 0, cli_determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0 && seconds > c.budget_seconds) {
      outcome.pass = false;
      outcome.detail += (outcome.detail.empty() ? "" : "; ") + std::string("over time budget");
    }
    failures += !outcome.pass;
    std::printf("%s %s (%.2fs%s)%s%s\n", outcome.pass ? "PASS" : "FAIL", c.name.c_str(), seconds,
                c.budget_seconds > 0 ? (" / " + cbqa::fmt(c.budget_seconds) + "s").c_str() : "",
                outcome.detail.empty() ? "" : ": ", outcome.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
