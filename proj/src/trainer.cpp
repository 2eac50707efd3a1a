#include "cbqa/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "cbqa/counter_rng.hpp"
#include "cbqa/error.hpp"

namespace cbqa {

namespace {

constexpr std::uint64_t kShuffleStream = 0xe90c;
constexpr std::uint64_t kDropoutStream = 0xd50;
constexpr std::uint64_t kMixtureStream = 0x3a7e;
constexpr std::uint64_t kAnswerStream = 0xa45;

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

// Every target the task could produce for an example.
std::vector<std::string> candidate_targets(const TaskSpec& task, const QAExample& example) {
  switch (task.target_mode) {
    case TargetMode::FirstAnswer: {
      auto t = open_domain_target(example);
      if (!t) return {};
      return {*t};
    }
    case TargetMode::AllAnswers:
      for (std::size_t a = 0; a < example.annotator_answers.size(); ++a)
        if (!example.annotator_answers[a].empty()) return {multi_answer_target(example, a)};
      return {};
    case TargetMode::RandomAnswer: {
      std::vector<std::string> all;
      for (const auto& answers : example.annotator_answers) all.insert(all.end(), answers.begin(), answers.end());
      return all;
    }
  }
  return {};
}

TokenIds with_eos(TokenIds ids) {
  ids.push_back(kEosId);
  return ids;
}

std::string checkpoint_name(const std::string& prefix, std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%08llu.ckpt", static_cast<unsigned long long>(step));
  return prefix + buf;
}

nlohmann::json cursors_json(const std::map<std::string, Cursor>& cursors) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, c] : cursors) j[name] = c.to_json();
  return j;
}

CheckpointRecord make_record(const TrainState& state, const LoopOptions& options, std::optional<double> score,
                             const nlohmann::json& extra_meta) {
  CheckpointRecord rec;
  rec.step = state.step;
  rec.params_digest = parameter_digest(state.params);
  rec.validation_score = score;
  if (options.keep_params) rec.params = std::make_shared<const Parameters<float>>(state.params);
  if (options.out_dir) {
    nlohmann::json meta = options.checkpoint_meta;
    meta.update(extra_meta);
    if (score) meta["validation_score"] = *score;
    const auto path = *options.out_dir / checkpoint_name(options.checkpoint_prefix, state.step);
    save_checkpoint(path, state.to_checkpoint(meta));
    rec.path = path;
  }
  return rec;
}

// One optimizer step on a packed batch.
double train_step(TrainState& state, const std::vector<SequencePair>& pairs, double dropout_rate,
                  const TrainConfig& config) {
  ModelConfig model = state.model;
  model.dropout_rate = dropout_rate;
  const Batch batch = make_batch(pairs);
  const std::uint64_t rng_stream = CounterRng(config.seed, kDropoutStream).bits(state.step);
  auto result = loss_and_grad<float>(model, state.params, batch, dropout_rate > 0.0, rng_stream, config.threads);
  adafactor_step(state.params, result.grads, state.optimizer, config.optimizer);
  ++state.step;
  return result.loss;
}

void log_step(const LoopOptions& options, std::uint64_t step, double loss, const std::string& task) {
  if (!options.log) return;
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["task"] = task;
  *options.log << j.dump() << '\n';
}

bool is_checkpoint_step(std::uint64_t step, const TrainConfig& config) {
  return step % config.checkpoint_every == 0 || step == config.total_steps;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(TargetMode mode) {
  switch (mode) {
    case TargetMode::FirstAnswer: return "first";
    case TargetMode::AllAnswers: return "all";
    case TargetMode::RandomAnswer: return "random";
  }
  return "?";
}

TargetMode parse_target_mode(std::string_view name) {
  const std::string n = lower(name);
  if (n == "first") return TargetMode::FirstAnswer;
  if (n == "all") return TargetMode::AllAnswers;
  if (n == "random") return TargetMode::RandomAnswer;
  throw ConfigError("unknown target mode '" + std::string(name) + "' (expected first, all or random)");
}

void TaskSpec::validate() const {
  if (prefix.empty() || prefix.back() != ' ')
    throw ConfigError("task prefix for " + std::string(to_string(name)) + " must be non-empty and end with a space");
}

std::string default_prefix(Dataset dataset) { return lower(to_string(dataset)) + " question: "; }

TaskSpec default_task(Dataset dataset, TargetMode mode) { return {dataset, default_prefix(dataset), mode}; }

std::optional<FormattedExample> format_example(const TaskSpec& task, const QAExample& example,
                                               std::uint64_t rng_stream, std::uint64_t seed) {
  const auto targets = candidate_targets(task, example);
  if (targets.empty()) return std::nullopt;
  std::size_t pick = 0;
  if (task.target_mode == TargetMode::RandomAnswer)
    pick = CounterRng(seed, rng_stream).fork(kAnswerStream).below(targets.size(), 0);
  return FormattedExample{task.prefix + example.question, targets[pick]};
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_tokens == 0) throw ConfigError("batch_tokens must be positive");
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (max_decode_len == 0) throw ConfigError("max_decode_len must be positive");
  if (threads == 0) throw ConfigError("threads must be positive");
  optimizer.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_tokens", batch_tokens},
          {"total_steps", total_steps},
          {"dropout_rate", dropout_rate},
          {"checkpoint_every", checkpoint_every},
          {"seed", seed},
          {"learning_rate", optimizer.learning_rate},
          {"max_decode_len", max_decode_len}};
}

TrainConfig TrainConfig::paper_preset() {
  TrainConfig c;
  c.batch_tokens = kPaperBatchTokens;
  c.total_steps = kPaperFinetuneSteps;
  return c;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> pack_groups(std::span<const SequencePair> pairs, std::size_t batch_tokens) {
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  std::size_t used = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t t = pairs[i].tokens();
    if (t > batch_tokens)
      throw InvalidArgument("example " + std::to_string(i) + " has " + std::to_string(t) +
                            " tokens, exceeding the batch budget of " + std::to_string(batch_tokens));
    if (used + t > batch_tokens) {
      groups.push_back(std::move(current));
      current.clear();
      used = 0;
    }
    current.push_back(i);
    used += t;
  }
  if (!current.empty()) groups.push_back(std::move(current));
  return groups;
}

std::vector<Batch> pack_batches(std::span<const SequencePair> pairs, std::size_t batch_tokens) {
  std::vector<Batch> out;
  for (const auto& group : pack_groups(pairs, batch_tokens)) {
    std::vector<SequencePair> members;
    for (const std::size_t i : group) members.push_back(pairs[i]);
    out.push_back(make_batch(members));
  }
  return out;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const CounterRng rng = CounterRng(seed, kShuffleStream).fork(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i, i)]);
  return perm;
}

std::vector<SequencePair> next_batch_pairs(const PairSource& source, Cursor& cursor, std::size_t batch_tokens,
                                           std::uint64_t shuffle_seed) {
  const std::size_t n = source.size();
  if (n == 0) throw InvalidArgument("training source " + source.name() + " is empty");
  std::vector<SequencePair> out;
  std::size_t used = 0;
  auto perm = epoch_permutation(n, shuffle_seed, cursor.epoch);
  for (;;) {
    if (cursor.position == n) {
      ++cursor.epoch;
      cursor.position = 0;
      perm = epoch_permutation(n, shuffle_seed, cursor.epoch);
    }
    const std::size_t record = perm[cursor.position];
    SequencePair pair = source.make(record, cursor.epoch * n + record);
    const std::size_t t = pair.tokens();
    if (t > batch_tokens)
      throw InvalidArgument(source.name() + " record " + std::to_string(record) + " has " + std::to_string(t) +
                            " tokens, exceeding the batch budget of " + std::to_string(batch_tokens));
    if (used + t > batch_tokens) break;
    out.push_back(std::move(pair));
    used += t;
    ++cursor.position;
  }
  return out;
}

SpanCorruptionSource::SpanCorruptionSource(const Vocab& vocab, const std::vector<CorpusDocument>& corpus,
                                           std::size_t chunk_tokens, CorruptionConfig config)
    : vocab_(&vocab), config_(config) {
  config_.validate();
  if (chunk_tokens == 0) throw ConfigError("chunk_tokens must be positive");
  for (const auto& doc : corpus) {
    const TokenIds ids = vocab.encode(doc.text);
    for (std::size_t start = 0; start < ids.size(); start += chunk_tokens) {
      const std::size_t end = std::min(ids.size(), start + chunk_tokens);
      chunks_.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(start),
                           ids.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
}

SequencePair SpanCorruptionSource::make(std::size_t record, std::uint64_t stream_index) const {
  auto pair = corrupt(*vocab_, chunks_.at(record), config_, stream_index);
  return {std::move(pair.inputs), std::move(pair.targets)};
}

SalientSpanSource::SalientSpanSource(const Vocab& vocab, std::vector<TaggedSentence> sentences, std::uint64_t seed)
    : vocab_(&vocab), sentences_(std::move(sentences)), seed_(seed) {
  for (const auto& s : sentences_)
    if (s.spans.empty()) throw InvalidArgument("sentence without salient spans: " + s.sentence.text);
}

SequencePair SalientSpanSource::make(std::size_t record, std::uint64_t stream_index) const {
  auto pair = mask_salient(sentences_.at(record), *vocab_, stream_index, seed_);
  return {std::move(pair.inputs), std::move(pair.targets)};
}

TaskSource::TaskSource(const Vocab& vocab, TaskSpec task, std::vector<QAExample> examples, std::size_t max_len,
                       std::uint64_t seed)
    : vocab_(&vocab), task_(std::move(task)), seed_(seed) {
  task_.validate();
  for (auto& ex : examples) {
    const auto targets = candidate_targets(task_, ex);
    bool fits = !targets.empty() && vocab.encode(task_.prefix + ex.question).size() <= max_len;
    for (const auto& t : targets) fits = fits && vocab.encode(t).size() + 1 <= max_len;
    if (fits)
      examples_.push_back(std::move(ex));
    else
      ++dropped_;
  }
}

SequencePair TaskSource::make(std::size_t record, std::uint64_t stream_index) const {
  const auto formatted = format_example(task_, examples_.at(record), stream_index, seed_);
  return {vocab_->encode(formatted->input), with_eos(vocab_->encode(formatted->target))};
}

// ---------------------------------------------------------------------------

TrainState TrainState::fresh(const ModelConfig& model, std::uint64_t seed) {
  TrainState s;
  s.model = model;
  s.params = init_params<float>(model, seed);
  s.optimizer = init_state(s.params);
  return s;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ckpt, bool keep_optimizer) {
  TrainState s;
  s.model = ckpt.config;
  s.params = ckpt.params;
  if (keep_optimizer && ckpt.optimizer) {
    s.optimizer = *ckpt.optimizer;
    s.step = ckpt.meta.value("step", std::uint64_t{0});
    if (ckpt.meta.contains("cursors"))
      for (const auto& [name, c] : ckpt.meta.at("cursors").items()) s.cursors[name] = Cursor::from_json(c);
  } else {
    s.optimizer = init_state(s.params);
  }
  return s;
}

Checkpoint TrainState::to_checkpoint(nlohmann::json meta) const {
  Checkpoint c;
  c.config = model;
  c.params = params;
  c.optimizer = optimizer;
  meta["step"] = step;
  meta["cursors"] = cursors_json(cursors);
  c.meta = std::move(meta);
  return c;
}

std::string_view to_string(Objective objective) { return objective == Objective::SC ? "SC" : "SSM"; }

Objective parse_objective(std::string_view name) {
  const std::string n = lower(name);
  if (n == "sc") return Objective::SC;
  if (n == "ssm") return Objective::SSM;
  throw ConfigError("unknown objective '" + std::string(name) + "' (expected SC or SSM)");
}

std::vector<CheckpointRecord> pretrain(TrainState& state, const PairSource& source, const TrainConfig& config,
                                       const LoopOptions& options) {
  config.validate();
  state.model.validate();
  std::vector<CheckpointRecord> records;
  const nlohmann::json meta = {{"phase", "pretrain"}, {"objective", source.name()}};
  while (state.step < config.total_steps) {
    auto& cursor = state.cursors[source.name()];
    const auto pairs = next_batch_pairs(source, cursor, config.batch_tokens, config.seed);
    const double loss = train_step(state, pairs, config.dropout_rate, config);
    log_step(options, state.step, loss, source.name());
    if (is_checkpoint_step(state.step, config)) {
      records.push_back(make_record(state, options, std::nullopt, meta));
      if (options.stop_after && options.stop_after(records.back())) break;
    }
  }
  return records;
}

TaskOverrides default_overrides(Dataset dataset, const TrainConfig& config) {
  if (dataset != Dataset::WQ) return {};
  return {std::max<std::size_t>(1, config.batch_tokens / 2), config.dropout_rate * 2.0};
}

MixtureSampler::MixtureSampler(std::vector<double> weights, std::uint64_t seed) : seed_(seed) {
  if (weights.empty()) throw ConfigError("mixture needs at least one task");
  double total = 0.0;
  for (const double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("mixture weights must be finite and nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError("mixture weights sum to zero");
  double acc = 0.0;
  for (const double w : weights) {
    probabilities_.push_back(w / total);
    acc += w / total;
    cumulative_.push_back(acc);
  }
  cumulative_.back() = 1.0;
}

std::size_t MixtureSampler::draw(std::uint64_t step) const {
  const double u = CounterRng(seed_, kMixtureStream).uniform(step);
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  std::size_t k = static_cast<std::size_t>(it - cumulative_.begin());
  k = std::min(k, cumulative_.size() - 1);
  // Skip zero-weight tasks that share a boundary.
  while (probabilities_[k] == 0.0 && k > 0) --k;
  return k;
}

TaskData prepare_task(const TaskSpec& task, const std::vector<QAExample>& examples, std::uint64_t seed) {
  task.validate();
  auto split = make_holdout_split(examples, kHoldoutFraction, seed);
  return {task, std::move(split.train), std::move(split.validation)};
}

std::vector<Prediction> predict(const ModelConfig& model, const Parameters<float>& params, const Vocab& vocab,
                                const TaskSpec& task, const std::vector<QAExample>& examples,
                                std::size_t max_decode_len) {
  std::vector<Prediction> out;
  out.reserve(examples.size());
  const std::size_t limit = std::min(max_decode_len, model.max_len);
  for (const auto& ex : examples) {
    TokenIds ids = vocab.encode(task.prefix + ex.question);
    if (ids.size() > model.max_len) ids.resize(model.max_len);
    TokenIds decoded = greedy_decode(model, params, ids, limit);
    std::erase_if(decoded, [&](TokenId t) { return vocab.is_special(t); });
    out.push_back({ex.id, vocab.decode(decoded)});
  }
  return out;
}

double task_score(const ModelConfig& model, const Parameters<float>& params, const Vocab& vocab, const TaskData& task,
                  std::size_t max_decode_len) {
  const auto predictions = predict(model, params, vocab, task.task, task.validation, max_decode_len);
  const EvalMode mode =
      task.task.target_mode == TargetMode::AllAnswers ? EvalMode::MultiAnswerRecall : EvalMode::OpenDomainEM;
  return evaluate(predictions, task.validation, mode).aggregate;
}

FinetuneResult finetune(TrainState& state, const Vocab& vocab, const std::vector<TaskData>& tasks,
                        const std::vector<double>& rates, const TrainConfig& config,
                        const std::map<Dataset, TaskOverrides>& overrides, const LoopOptions& options) {
  config.validate();
  state.model.validate();
  if (tasks.empty()) throw ConfigError("fine-tuning needs at least one task");
  if (!rates.empty() && rates.size() != tasks.size())
    throw ConfigError("got " + std::to_string(rates.size()) + " mixing rates for " + std::to_string(tasks.size()) +
                      " tasks");

  std::vector<TaskSource> sources;
  std::vector<std::size_t> batch_tokens;
  std::vector<double> dropout;
  for (const auto& t : tasks) {
    sources.emplace_back(vocab, t.task, t.train, state.model.max_len, config.seed);
    if (sources.back().size() == 0)
      throw InvalidArgument("task " + std::string(to_string(t.task.name)) + " has no usable training examples after " +
                            "target filtering (" + std::to_string(sources.back().dropped()) + " dropped)");
    const auto it = overrides.find(t.task.name);
    const TaskOverrides o = it == overrides.end() ? TaskOverrides{} : it->second;
    batch_tokens.push_back(o.batch_tokens.value_or(config.batch_tokens));
    dropout.push_back(o.dropout_rate.value_or(config.dropout_rate));
    if (batch_tokens.back() == 0) throw ConfigError("batch_tokens override must be positive");
    if (!(dropout.back() >= 0.0 && dropout.back() < 1.0))
      throw ConfigError("dropout override for " + std::string(to_string(t.task.name)) + " must lie in [0, 1)");
  }
  std::vector<double> weights = rates;
  if (weights.empty())
    for (const auto& s : sources) weights.push_back(static_cast<double>(s.size()));
  const MixtureSampler sampler(weights, config.seed);

  FinetuneResult result;
  nlohmann::ordered_json task_list = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    nlohmann::ordered_json j;
    j["task"] = to_string(tasks[i].task.name);
    j["prefix"] = tasks[i].task.prefix;
    j["target_mode"] = to_string(tasks[i].task.target_mode);
    j["train_examples"] = sources[i].size();
    j["dropped_examples"] = sources[i].dropped();
    j["validation_examples"] = tasks[i].validation.size();
    j["batch_tokens"] = batch_tokens[i];
    j["dropout_rate"] = dropout[i];
    j["mixing_probability"] = sampler.probabilities()[i];
    task_list.push_back(std::move(j));
  }
  nlohmann::ordered_json manifest;
  manifest["tasks"] = std::move(task_list);
  manifest["total_steps"] = config.total_steps;
  manifest["checkpoint_every"] = config.checkpoint_every;
  manifest["learning_rate"] = config.optimizer.learning_rate;
  manifest["seed"] = config.seed;
  result.manifest = nlohmann::json::parse(manifest.dump());

  const nlohmann::json meta = {{"phase", "finetune"}};
  while (state.step < config.total_steps) {
    const std::size_t k = sampler.draw(state.step);
    const std::string name = sources[k].name();
    auto& cursor = state.cursors[name];
    const auto pairs = next_batch_pairs(sources[k], cursor, batch_tokens[k], config.seed);
    const double loss = train_step(state, pairs, dropout[k], config);
    log_step(options, state.step, loss, name);
    if (is_checkpoint_step(state.step, config)) {
      double total = 0.0;
      std::size_t counted = 0;
      for (const auto& t : tasks) {
        if (t.validation.empty()) continue;
        total += task_score(state.model, state.params, vocab, t, config.max_decode_len);
        ++counted;
      }
      const std::optional<double> score = counted ? std::optional<double>(total / static_cast<double>(counted))
                                                  : std::nullopt;
      result.checkpoints.push_back(make_record(state, options, score, meta));
      if (options.stop_after && options.stop_after(result.checkpoints.back())) break;
    }
  }
  return result;
}

const CheckpointRecord& select_best_checkpoint(const std::vector<CheckpointRecord>& series) {
  const CheckpointRecord* best = nullptr;
  for (const auto& rec : series) {
    if (!rec.validation_score) continue;
    if (!best || *rec.validation_score > *best->validation_score ||
        (*rec.validation_score == *best->validation_score && rec.step < best->step))
      best = &rec;
  }
  if (!best) throw InvalidArgument("no checkpoint carries a validation score");
  return *best;
}

std::vector<ComparisonRow> run_objective_comparison(const TrainState& base, const Vocab& vocab,
                                                    const PairSource& ssm_source, const PairSource& sc_source,
                                                    const std::vector<TaskData>& tasks,
                                                    const ComparisonConfig& config) {
  if (config.blocks == 0 || config.pretrain_block == 0 || config.finetune_steps == 0)
    throw ConfigError("blocks, pretrain_block and finetune_steps must be positive");
  std::map<Dataset, TaskOverrides> overrides;
  for (const auto& t : tasks) overrides[t.task.name] = default_overrides(t.task.name, config.finetune);

  std::vector<ComparisonRow> rows;
  for (const Objective objective : {Objective::SSM, Objective::SC}) {
    const PairSource& source = objective == Objective::SSM ? ssm_source : sc_source;
    TrainState current = base;
    const std::uint64_t start = current.step;
    for (std::size_t b = 1; b <= config.blocks; ++b) {
      TrainConfig pcfg = config.pretrain;
      pcfg.total_steps = start + b * config.pretrain_block;
      pcfg.checkpoint_every = config.pretrain_block;
      pretrain(current, source, pcfg);

      ComparisonRow row;
      row.objective = objective;
      row.pretrain_step = b * config.pretrain_block;
      row.block_digest = parameter_digest(current.params);

      TrainState probe;
      probe.model = current.model;
      probe.params = current.params;
      probe.optimizer = init_state(probe.params);
      row.probe_start_digest = parameter_digest(probe.params);

      TrainConfig fcfg = config.finetune;
      fcfg.total_steps = config.finetune_steps;
      const auto ft = finetune(probe, vocab, tasks, {}, fcfg, overrides);
      double best = 0.0;
      for (const auto& rec : ft.checkpoints) best = std::max(best, rec.validation_score.value_or(0.0));
      row.max_val_em = best;
      row.block_digest_after_probe = parameter_digest(current.params);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "objective,pretrain_step,max_val_em\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.2f", r.max_val_em);
    out << to_string(r.objective) << ',' << r.pretrain_step << ',' << buf << '\n';
  }
}

}  // namespace cbqa
