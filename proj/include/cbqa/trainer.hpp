#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbqa/adafactor.hpp"
#include "cbqa/checkpoint.hpp"
#include "cbqa/corpus.hpp"
#include "cbqa/metrics.hpp"
#include "cbqa/model.hpp"
#include "cbqa/salient_spans.hpp"
#include "cbqa/span_corruption.hpp"
#include "cbqa/tokenizer.hpp"

namespace cbqa {

// ---------------------------------------------------------------------------
// Text-to-text formatting

enum class TargetMode { FirstAnswer, AllAnswers, RandomAnswer };

std::string_view to_string(TargetMode mode);
TargetMode parse_target_mode(std::string_view name);

struct TaskSpec {
  Dataset name = Dataset::NQ;
  std::string prefix;
  TargetMode target_mode = TargetMode::FirstAnswer;

  void validate() const;
};

// "nq question: ", "wq question: ", "tqa question: ".
std::string default_prefix(Dataset dataset);
TaskSpec default_task(Dataset dataset, TargetMode mode = TargetMode::FirstAnswer);

struct FormattedExample {
  std::string input;
  std::string target;
};

// Input is prefix + question. Target per mode: the open-domain target
// (absent drops the example), the "answer:"-delimited list of the first
// non-null annotator, or one answer drawn uniformly over every annotator's
// answers keyed by (seed, rng_stream).
std::optional<FormattedExample> format_example(const TaskSpec& task, const QAExample& example,
                                               std::uint64_t rng_stream, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t batch_tokens = 4096;
  std::size_t total_steps = 2000;
  double dropout_rate = 0.1;
  std::size_t checkpoint_every = 500;
  std::uint64_t seed = 0;
  AdafactorConfig optimizer;
  std::size_t max_decode_len = 32;
  std::size_t threads = 1;

  void validate() const;
  nlohmann::json to_json() const;

  // 196,608-token batches, 20,000 fine-tuning steps.
  static TrainConfig paper_preset();
};

inline constexpr std::size_t kPaperBatchTokens = 196'608;
inline constexpr std::size_t kPaperFinetuneSteps = 20'000;
inline constexpr std::size_t kPaperSsmSteps = 100'000;
inline constexpr double kHoldoutFraction = 0.10;

// ---------------------------------------------------------------------------
// Batching

// Token count of a pair is inputs + targets.
// Greedy in stream order: a batch closes when the next pair would exceed the
// budget. Returns index groups.
std::vector<std::vector<std::size_t>> pack_groups(std::span<const SequencePair> pairs, std::size_t batch_tokens);
std::vector<Batch> pack_batches(std::span<const SequencePair> pairs, std::size_t batch_tokens);

// Deterministic per-epoch order of n records.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

// Finite list of records replayed epoch after epoch; record i in epoch e is
// materialized with stream index e * size() + i so masks are resampled.
class PairSource {
 public:
  virtual ~PairSource() = default;
  virtual std::size_t size() const = 0;
  virtual SequencePair make(std::size_t record, std::uint64_t stream_index) const = 0;
  virtual std::string name() const = 0;
};

struct Cursor {
  std::uint64_t epoch = 0;
  std::size_t position = 0;

  nlohmann::json to_json() const { return {{"epoch", epoch}, {"position", position}}; }
  static Cursor from_json(const nlohmann::json& j) {
    return {j.at("epoch").get<std::uint64_t>(), j.at("position").get<std::size_t>()};
  }
  friend bool operator==(const Cursor&, const Cursor&) = default;
};

// Reads the next greedily packed batch from an endlessly cycled source and
// advances the cursor.
std::vector<SequencePair> next_batch_pairs(const PairSource& source, Cursor& cursor, std::size_t batch_tokens,
                                           std::uint64_t shuffle_seed);

class SpanCorruptionSource final : public PairSource {
 public:
  // Documents are tokenized and cut into chunks of at most chunk_tokens.
  SpanCorruptionSource(const Vocab& vocab, const std::vector<CorpusDocument>& corpus, std::size_t chunk_tokens,
                       CorruptionConfig config);
  std::size_t size() const override { return chunks_.size(); }
  SequencePair make(std::size_t record, std::uint64_t stream_index) const override;
  std::string name() const override { return "SC"; }

 private:
  const Vocab* vocab_;
  std::vector<TokenIds> chunks_;
  CorruptionConfig config_;
};

class SalientSpanSource final : public PairSource {
 public:
  SalientSpanSource(const Vocab& vocab, std::vector<TaggedSentence> sentences, std::uint64_t seed);
  std::size_t size() const override { return sentences_.size(); }
  SequencePair make(std::size_t record, std::uint64_t stream_index) const override;
  std::string name() const override { return "SSM"; }
  const std::vector<TaggedSentence>& sentences() const { return sentences_; }

 private:
  const Vocab* vocab_;
  std::vector<TaggedSentence> sentences_;
  std::uint64_t seed_;
};

// QA examples of one task; examples without a target under the task's mode
// or longer than `max_len` tokens on either side are dropped up front.
class TaskSource final : public PairSource {
 public:
  TaskSource(const Vocab& vocab, TaskSpec task, std::vector<QAExample> examples, std::size_t max_len,
             std::uint64_t seed);
  std::size_t size() const override { return examples_.size(); }
  SequencePair make(std::size_t record, std::uint64_t stream_index) const override;
  std::string name() const override { return std::string(to_string(task_.name)); }
  const TaskSpec& task() const { return task_; }
  std::size_t dropped() const { return dropped_; }

 private:
  const Vocab* vocab_;
  TaskSpec task_;
  std::vector<QAExample> examples_;
  std::uint64_t seed_;
  std::size_t dropped_ = 0;
};

// ---------------------------------------------------------------------------
// Training state and loops

struct TrainState {
  ModelConfig model;
  Parameters<float> params;
  AdafactorState<float> optimizer;
  std::uint64_t step = 0;
  std::map<std::string, Cursor> cursors;

  static TrainState fresh(const ModelConfig& model, std::uint64_t seed);
  // Continues from a checkpoint's weights; `keep_optimizer` restores step,
  // cursors and accumulators for an exact resume.
  static TrainState from_checkpoint(const Checkpoint& ckpt, bool keep_optimizer);
  Checkpoint to_checkpoint(nlohmann::json meta = nlohmann::json::object()) const;
};

struct CheckpointRecord {
  std::uint64_t step = 0;
  std::string params_digest;
  std::optional<std::filesystem::path> path;
  std::optional<double> validation_score;
  std::shared_ptr<const Parameters<float>> params;  // kept in memory when requested
};

struct LoopOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints written here when set
  std::ostream* log = nullptr;                    // JSONL {"step","loss","task"}
  bool keep_params = false;                       // retain every checkpoint's weights in memory
  std::string checkpoint_prefix = "ckpt";
  nlohmann::json checkpoint_meta = nlohmann::json::object();  // merged into every checkpoint's meta
  std::function<bool(const CheckpointRecord&)> stop_after;  // ends the loop early when it returns true
};

enum class Objective { SC, SSM };

std::string_view to_string(Objective objective);
Objective parse_objective(std::string_view name);

// Runs pre-training until state.step == config.total_steps, checkpointing
// every checkpoint_every steps. Resuming from any checkpoint reproduces the
// uninterrupted run bit for bit.
std::vector<CheckpointRecord> pretrain(TrainState& state, const PairSource& source, const TrainConfig& config,
                                       const LoopOptions& options = {});

struct TaskOverrides {
  std::optional<std::size_t> batch_tokens;
  std::optional<double> dropout_rate;
};

// WQ halves the batch and doubles dropout; other tasks keep the base values.
TaskOverrides default_overrides(Dataset dataset, const TrainConfig& config);

struct MixtureSpec {
  std::vector<TaskSpec> tasks;
  // Empty means proportional to each task's training-set size.
  std::vector<double> rates;
};

// Draws one task per step with probability proportional to its weight.
class MixtureSampler {
 public:
  MixtureSampler(std::vector<double> weights, std::uint64_t seed);
  std::size_t draw(std::uint64_t step) const;
  const std::vector<double>& probabilities() const { return probabilities_; }

 private:
  std::vector<double> cumulative_;
  std::vector<double> probabilities_;
  std::uint64_t seed_;
};

struct TaskData {
  TaskSpec task;
  std::vector<QAExample> train;
  std::vector<QAExample> validation;
};

// Splits each dataset 90/10 with the holdout seed.
TaskData prepare_task(const TaskSpec& task, const std::vector<QAExample>& examples, std::uint64_t seed);

struct FinetuneResult {
  std::vector<CheckpointRecord> checkpoints;
  nlohmann::json manifest;  // effective per-task settings
};

// Fine-tunes on the training portions, one task per step drawn from the
// mixture, each step using that task's batch budget and dropout rate.
// Validation score at every checkpoint is the mean over tasks of EM
// (recall for AllAnswers tasks) on the held-out portions.
FinetuneResult finetune(TrainState& state, const Vocab& vocab, const std::vector<TaskData>& tasks,
                        const std::vector<double>& rates, const TrainConfig& config,
                        const std::map<Dataset, TaskOverrides>& overrides, const LoopOptions& options = {});

// Greedy predictions for every example of a task.
std::vector<Prediction> predict(const ModelConfig& model, const Parameters<float>& params, const Vocab& vocab,
                                const TaskSpec& task, const std::vector<QAExample>& examples, std::size_t max_decode_len);

double task_score(const ModelConfig& model, const Parameters<float>& params, const Vocab& vocab, const TaskData& task,
                  std::size_t max_decode_len);

// Highest validation score; ties go to the earliest step.
const CheckpointRecord& select_best_checkpoint(const std::vector<CheckpointRecord>& series);

struct ComparisonRow {
  Objective objective = Objective::SC;
  std::uint64_t pretrain_step = 0;
  double max_val_em = 0.0;
  std::string block_digest;        // weights at the end of the pre-training block
  std::string probe_start_digest;  // weights the probe started from
  std::string block_digest_after_probe;
};

struct ComparisonConfig {
  std::size_t blocks = 3;
  std::size_t pretrain_block = 100;
  std::size_t finetune_steps = 100;
  TrainConfig pretrain;  // total_steps ignored
  TrainConfig finetune;  // total_steps ignored
};

// For each objective, alternates pretrain_block steps of continued
// pre-training with a forked fine-tuning probe on the task mixture and
// records the probe's best validation EM.
std::vector<ComparisonRow> run_objective_comparison(const TrainState& base, const Vocab& vocab,
                                                    const PairSource& ssm_source, const PairSource& sc_source,
                                                    const std::vector<TaskData>& tasks, const ComparisonConfig& config);

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows);

}  // namespace cbqa
