// cbqa: every pipeline stage as a subcommand.

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cbqa/audit.hpp"
#include "cbqa/audit_server.hpp"
#include "cbqa/checkpoint.hpp"
#include "cbqa/corpus.hpp"
#include "cbqa/error.hpp"
#include "cbqa/metrics.hpp"
#include "cbqa/run_manifest.hpp"
#include "cbqa/salient_spans.hpp"
#include "cbqa/span_corruption.hpp"
#include "cbqa/tokenizer.hpp"
#include "cbqa/trainer.hpp"

namespace cbqa::cli {
namespace {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Settings resolution: flag > config file > preset > built-in default.

class Knobs {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = app->add_option(flag, var, help)->capture_default_str();
    entries_.push_back({key, opt, [&var] { return ojson(var); },
                        [&var, key](const nlohmann::json& j) {
                          try {
                            var = j.get<T>();
                          } catch (const nlohmann::json::exception&) {
                            throw ConfigError("config key '" + key + "' has the wrong type");
                          }
                        }});
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& flag, const std::string& key, bool& var,
                    const std::string& help) {
    CLI::Option* opt = app->add_flag(flag, var, help);
    entries_.push_back({key, opt, [&var] { return ojson(var); }, [&var, key](const nlohmann::json& j) {
                          if (!j.is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
                          var = j.get<bool>();
                        }});
    return opt;
  }

  void resolve(const nlohmann::json& preset, const nlohmann::json& file) const {
    for (const auto& [key, _] : file.items())
      if (!has(key)) throw ConfigError("unknown config key '" + key + "'");
    for (const auto& e : entries_) {
      if (e.opt->count() > 0) continue;
      if (file.contains(e.key)) e.set(file[e.key]);
      else if (preset.contains(e.key)) e.set(preset[e.key]);
    }
  }

  ojson to_json() const {
    ojson j = ojson::object();
    for (const auto& e : entries_) j[e.key] = e.get();
    return j;
  }

 private:
  bool has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.key == key; });
  }

  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<ojson()> get;
    std::function<void(const nlohmann::json&)> set;
  };
  std::vector<Entry> entries_;
};

struct Globals {
  std::string config_path;
  std::string preset = "desk";
  std::size_t threads = 1;
};

// Relative inputs missing from the working directory are looked up under
// CBQA_DATA_DIR.
fs::path input_path(const std::string& raw) {
  const fs::path p(raw);
  if (p.is_absolute() || fs::exists(p)) return p;
  if (const char* dir = std::getenv("CBQA_DATA_DIR"); dir && *dir) {
    const fs::path candidate = fs::path(dir) / p;
    if (fs::exists(candidate)) return candidate;
  }
  return p;
}

std::pair<std::string, std::string> split_assignment(const std::string& text, const std::string& flag) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == text.size())
    throw ConfigError(flag + " expects NAME=VALUE, got '" + text + "'");
  return {text.substr(0, eq), text.substr(eq + 1)};
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void require(bool condition, const std::string& message) {
  if (!condition) throw ConfigError(message);
}

// ---------------------------------------------------------------------------

class Command {
 public:
  virtual ~Command() = default;
  virtual void setup(CLI::App* app) = 0;
  virtual void run() = 0;

  void configure(const Globals& globals) {
    globals_ = globals;
    nlohmann::json file = nlohmann::json::object();
    if (!globals.config_path.empty()) {
      std::ifstream in(input_path(globals.config_path));
      if (!in) throw ConfigError("cannot read config file " + globals.config_path);
      try {
        file = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + globals.config_path + " is not valid JSON: " + e.what());
      }
      if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    }
    require(globals.preset == "desk" || globals.preset == "paper", "--preset must be desk or paper");
    require(globals.threads > 0, "--threads must be positive");
    knobs_.resolve(globals.preset == "paper" ? paper_preset() : nlohmann::json::object(), file);
  }

 protected:
  virtual nlohmann::json paper_preset() const { return nlohmann::json::object(); }

  // Writes the manifest before any work; returns its digest.
  std::string begin(const std::string& name, std::uint64_t seed, std::vector<std::pair<std::string, fs::path>> inputs,
                    std::vector<std::pair<std::string, fs::path>> artifacts, const fs::path& manifest) const {
    RunManifest m;
    m.subcommand = name;
    m.config = knobs_.to_json();
    m.config["threads"] = globals_.threads;
    m.config["preset"] = globals_.preset;
    m.seed = seed;
    m.inputs = std::move(inputs);
    m.artifacts = std::move(artifacts);
    return m.write(manifest);
  }

  Knobs knobs_;
  Globals globals_;
};

// Model shape flags shared by commands that may start from fresh weights.
struct ModelKnobs {
  std::size_t d_model = 64, heads = 4, d_ff = 128, enc_layers = 2, dec_layers = 2, max_len = 64;
  std::vector<CLI::Option*> options;

  void add(Knobs& knobs, CLI::App* app) {
    options = {knobs.add(app, "--d-model", "d_model", d_model, "model width"),
               knobs.add(app, "--heads", "heads", heads, "attention heads"),
               knobs.add(app, "--d-ff", "d_ff", d_ff, "feed-forward width"),
               knobs.add(app, "--enc-layers", "enc_layers", enc_layers, "encoder layers"),
               knobs.add(app, "--dec-layers", "dec_layers", dec_layers, "decoder layers"),
               knobs.add(app, "--max-len", "max_len", max_len, "maximum sequence length")};
  }

  ModelConfig config(std::size_t vocab_size, double dropout) const {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = d_model;
    c.n_heads = heads;
    c.d_ff = d_ff;
    c.n_enc_layers = enc_layers;
    c.n_dec_layers = dec_layers;
    c.max_len = max_len;
    c.dropout_rate = dropout;
    c.validate();
    return c;
  }

  void exclude(CLI::Option* other) {
    for (auto* o : options) o->excludes(other);
  }
};

struct TrainKnobs {
  std::size_t batch_tokens = 4096, steps = 2000, checkpoint_every = 500;
  double dropout = 0.1, learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void add(Knobs& knobs, CLI::App* app) {
    knobs.add(app, "--batch-tokens", "batch_tokens", batch_tokens, "token budget per batch");
    knobs.add(app, "--steps", "steps", steps, "total optimizer steps");
    knobs.add(app, "--checkpoint-every", "checkpoint_every", checkpoint_every, "steps between checkpoints");
    knobs.add(app, "--dropout", "dropout", dropout, "dropout rate");
    knobs.add(app, "--lr", "learning_rate", learning_rate, "AdaFactor learning rate");
    knobs.add(app, "--seed", "seed", seed, "seed for weights, data order and dropout");
  }

  TrainConfig config(std::size_t threads) const {
    TrainConfig c;
    c.batch_tokens = batch_tokens;
    c.total_steps = steps;
    c.checkpoint_every = checkpoint_every;
    c.dropout_rate = dropout;
    c.seed = seed;
    c.optimizer.learning_rate = learning_rate;
    c.threads = threads;
    c.validate();
    return c;
  }
};

std::vector<std::string> corpus_text(const std::vector<std::string>& corpora) {
  std::vector<std::string> text;
  for (const auto& c : corpora)
    for (auto& d : load_corpus(input_path(c))) text.push_back(std::move(d.text));
  return text;
}

std::vector<CorpusDocument> load_corpora(const std::vector<std::string>& corpora) {
  std::vector<CorpusDocument> docs;
  for (const auto& c : corpora)
    for (auto& d : load_corpus(input_path(c))) docs.push_back(std::move(d));
  return docs;
}

// "--task nq=path" plus optional "--target-mode nq=all" and "--rate nq=2".
struct TaskArgs {
  std::vector<std::string> tasks, modes, rates;

  void add(Knobs& knobs, CLI::App* app, bool with_rates) {
    knobs.add(app, "--task", "task", tasks, "DATASET=PATH, repeatable (nq, wq, tqa)")->required();
    knobs.add(app, "--target-mode", "target_mode", modes, "DATASET=first|all|random");
    if (with_rates) knobs.add(app, "--rate", "rate", rates, "DATASET=WEIGHT mixing weight; default size-proportional");
  }

  std::vector<std::pair<TaskSpec, fs::path>> specs() const {
    std::map<Dataset, TargetMode> mode_of;
    for (const auto& m : modes) {
      const auto [name, value] = split_assignment(m, "--target-mode");
      mode_of[parse_dataset(name)] = parse_target_mode(value);
    }
    std::vector<std::pair<TaskSpec, fs::path>> out;
    std::set<Dataset> seen;
    for (const auto& t : tasks) {
      const auto [name, path] = split_assignment(t, "--task");
      const Dataset d = parse_dataset(name);
      require(seen.insert(d).second, "dataset " + std::string(to_string(d)) + " given twice");
      const auto it = mode_of.find(d);
      out.emplace_back(default_task(d, it == mode_of.end() ? TargetMode::FirstAnswer : it->second), input_path(path));
    }
    for (const auto& [d, _] : mode_of)
      require(seen.count(d), "--target-mode names " + std::string(to_string(d)) + ", which has no --task");
    return out;
  }

  std::vector<double> weights(const std::vector<std::pair<TaskSpec, fs::path>>& specs) const {
    if (rates.empty()) return {};
    std::map<Dataset, double> rate_of;
    for (const auto& r : rates) {
      const auto [name, value] = split_assignment(r, "--rate");
      try {
        rate_of[parse_dataset(name)] = std::stod(value);
      } catch (const std::invalid_argument&) {
        throw ConfigError("--rate value '" + value + "' is not a number");
      }
    }
    std::vector<double> out;
    for (const auto& [spec, _] : specs) {
      const auto it = rate_of.find(spec.name);
      require(it != rate_of.end(), "--rate missing for " + std::string(to_string(spec.name)));
      out.push_back(it->second);
    }
    require(rate_of.size() == specs.size(), "--rate names a dataset without --task");
    return out;
  }
};

std::vector<TaskData> load_tasks(const std::vector<std::pair<TaskSpec, fs::path>>& specs, std::uint64_t seed) {
  std::vector<TaskData> out;
  for (const auto& [spec, path] : specs) out.push_back(prepare_task(spec, load_qa_dataset(path, spec.name), seed));
  return out;
}

std::vector<std::pair<std::string, fs::path>> task_inputs(const std::vector<std::pair<TaskSpec, fs::path>>& specs) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& [spec, path] : specs) out.emplace_back("task:" + std::string(to_string(spec.name)), path);
  return out;
}

ojson record_json(const CheckpointRecord& r) {
  ojson j;
  j["step"] = r.step;
  j["params_sha256"] = r.params_digest;
  j["path"] = r.path ? ojson(r.path->generic_string()) : ojson(nullptr);
  j["validation_score"] = r.validation_score ? ojson(*r.validation_score) : ojson(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

class BuildVocab final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--corpus", "corpus", corpus_, "corpus JSONL, repeatable");
    knobs_.add(app, "--qa", "qa", qa_, "DATASET=PATH QA JSONL whose questions and answers join the text, repeatable");
    knobs_.add(app, "--size", "size", size_, "vocabulary size including sentinels");
    knobs_.add(app, "--sentinels", "sentinels", sentinels_, "number of sentinel ids");
    knobs_.add(app, "--out", "out", out_, "vocabulary file")->required();
  }

  void run() override {
    require(!corpus_.empty() || !qa_.empty(), "build-vocab needs --corpus or --qa");
    std::vector<std::pair<std::string, fs::path>> inputs;
    for (const auto& c : corpus_) inputs.emplace_back("corpus", input_path(c));
    std::vector<std::pair<Dataset, fs::path>> qa;
    for (const auto& q : qa_) {
      const auto [name, path] = split_assignment(q, "--qa");
      qa.emplace_back(parse_dataset(name), input_path(path));
      inputs.emplace_back("qa:" + name, input_path(path));
    }
    begin("build-vocab", 0, inputs, {{"vocab", out_}}, manifest_path_for(out_));

    auto text = corpus_text(corpus_);
    for (const auto& [dataset, path] : qa)
      for (const auto& e : load_qa_dataset(path, dataset)) {
        text.push_back(default_prefix(dataset) + e.question);
        for (const auto& list : e.annotator_answers) text.push_back(multi_answer_target(list));
      }
    const Vocab vocab = build_vocab(text, size_, sentinels_);
    if (fs::path(out_).has_parent_path()) fs::create_directories(fs::path(out_).parent_path());
    vocab.save(out_);
    std::cout << "vocab: " << vocab.size() << " ids (" << vocab.sentinel_count() << " sentinels)\n";
  }

 private:
  std::vector<std::string> corpus_, qa_;
  std::size_t size_ = 2048, sentinels_ = kDefaultSentinels;
  std::string out_;
};

class Corrupt final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--vocab", "vocab", vocab_, "vocabulary file")->required();
    knobs_.add(app, "--corpus", "corpus", corpus_, "corpus JSONL, repeatable")->required();
    knobs_.add(app, "--mask-rate", "mask_rate", mask_rate_, "fraction of tokens dropped");
    knobs_.add(app, "--chunk-tokens", "chunk_tokens", chunk_tokens_, "tokens per corrupted sequence");
    knobs_.add(app, "--seed", "seed", seed_, "mask seed");
    knobs_.add(app, "--out", "out", out_, "pairs JSONL")->required();
  }

  void run() override {
    const CorruptionConfig config{mask_rate_, seed_};
    config.validate();
    require(chunk_tokens_ > 0, "--chunk-tokens must be positive");
    std::vector<std::pair<std::string, fs::path>> inputs = {{"vocab", input_path(vocab_)}};
    for (const auto& c : corpus_) inputs.emplace_back("corpus", input_path(c));
    begin("corrupt", seed_, inputs, {{"pairs", out_}}, manifest_path_for(out_));

    const Vocab vocab = Vocab::load(input_path(vocab_));
    auto out = open_output(out_);
    std::uint64_t stream = 0;
    std::size_t dropped = 0, total = 0;
    for (const auto& doc : load_corpora(corpus_)) {
      const TokenIds ids = vocab.encode(doc.text);
      for (std::size_t start = 0, k = 0; start < ids.size(); start += chunk_tokens_, ++k) {
        const std::span<const TokenId> chunk(ids.data() + start, std::min(chunk_tokens_, ids.size() - start));
        const auto pair = corrupt(vocab, chunk, config, stream++);
        dropped += masked_token_count(vocab, pair);
        total += chunk.size();
        out << to_json_line(pair, doc.doc_id + "#" + std::to_string(k)) << '\n';
      }
    }
    std::cout << "pairs: " << stream << ", dropped " << dropped << " of " << total << " tokens\n";
  }

 protected:
  nlohmann::json paper_preset() const override { return {{"mask_rate", 0.15}}; }

 private:
  std::string vocab_, out_;
  std::vector<std::string> corpus_;
  double mask_rate_ = 0.15;
  std::size_t chunk_tokens_ = 64;
  std::uint64_t seed_ = 0;
};

ojson tagged_json(const TaggedSentence& t) {
  ojson j;
  j["doc_id"] = t.sentence.doc_id;
  j["index"] = t.sentence.index;
  j["text"] = t.sentence.text;
  j["spans"] = ojson::array();
  for (const auto& s : t.spans) j["spans"].push_back({{"start", s.start}, {"end", s.end}, {"kind", to_string(s.kind)}});
  return j;
}

class MineSsm final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--corpus", "corpus", corpus_, "corpus JSONL, repeatable")->required();
    knobs_.add(app, "--annotations", "annotations", annotations_,
               "span annotations JSONL used instead of the rule tagger");
    knobs_.add(app, "--min-bytes", "min_bytes", min_bytes_, "shortest sentence kept");
    knobs_.add(app, "--max-bytes", "max_bytes", max_bytes_, "longest sentence kept; 0 means unbounded");
    knobs_.add(app, "--out", "out", out_, "tagged sentences JSONL")->required();
    auto* vocab = knobs_.add(app, "--vocab", "vocab", vocab_, "vocabulary file, needed for --pairs");
    knobs_.add(app, "--pairs", "pairs", pairs_, "also write one masked pair per sentence")->needs(vocab);
    knobs_.add(app, "--seed", "seed", seed_, "span selection seed");
  }

  void run() override {
    std::vector<std::pair<std::string, fs::path>> inputs;
    for (const auto& c : corpus_) inputs.emplace_back("corpus", input_path(c));
    if (!annotations_.empty()) inputs.emplace_back("annotations", input_path(annotations_));
    std::vector<std::pair<std::string, fs::path>> artifacts = {{"sentences", out_}};
    if (!pairs_.empty()) {
      require(!vocab_.empty(), "--pairs needs --vocab");
      inputs.emplace_back("vocab", input_path(vocab_));
      artifacts.emplace_back("pairs", pairs_);
    }
    begin("mine-ssm", seed_, inputs, artifacts, manifest_path_for(out_));

    std::unique_ptr<SpanTagger> tagger;
    if (annotations_.empty()) {
      tagger = std::make_unique<RuleTagger>();
    } else {
      auto annotated = std::make_unique<AnnotatedTagger>();
      for (auto& r : load_annotated_spans(input_path(annotations_))) annotated->add(r.sentence.text, r.spans);
      tagger = std::move(annotated);
    }
    MiningOptions options;
    options.min_bytes = min_bytes_;
    if (max_bytes_ > 0) options.max_bytes = max_bytes_;
    std::optional<Vocab> vocab;
    if (!vocab_.empty()) vocab = Vocab::load(input_path(vocab_));

    auto out = open_output(out_);
    std::optional<std::ofstream> pairs;
    if (!pairs_.empty()) pairs = open_output(pairs_);
    std::uint64_t stream = 0;
    const auto stats = mine_sentences(load_corpora(corpus_), *tagger, options, [&](TaggedSentence&& t) {
      out << tagged_json(t).dump() << '\n';
      if (pairs) *pairs << to_json_line(mask_salient(t, *vocab, stream, seed_), t.sentence.doc_id) << '\n';
      ++stream;
    });
    std::cout << "documents: " << stats.documents << ", sentences scanned: " << stats.scanned
              << ", kept: " << stats.kept << '\n';
  }

 private:
  std::vector<std::string> corpus_;
  std::string annotations_, out_, vocab_, pairs_;
  std::size_t min_bytes_ = 0, max_bytes_ = 0;
  std::uint64_t seed_ = 0;
};

std::vector<TaggedSentence> ssm_sentences(const std::string& sentences, const std::vector<std::string>& corpus) {
  if (!sentences.empty()) return load_annotated_spans(input_path(sentences));
  return mine_sentences(load_corpora(corpus), RuleTagger{});
}

class Pretrain final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--objective", "objective", objective_, "SC or SSM");
    knobs_.add(app, "--vocab", "vocab", vocab_, "vocabulary file")->required();
    auto* corpus = knobs_.add(app, "--corpus", "corpus", corpus_, "corpus JSONL, repeatable");
    knobs_.add(app, "--sentences", "sentences", sentences_, "tagged sentences JSONL from mine-ssm (SSM only)")
        ->excludes(corpus);
    init_ = knobs_.add(app, "--init", "init", init_path_, "resume from this checkpoint");
    knobs_.add(app, "--out-dir", "out_dir", out_dir_, "checkpoint directory")->required();
    knobs_.add(app, "--chunk-tokens", "chunk_tokens", chunk_tokens_, "tokens per SC sequence");
    knobs_.add(app, "--mask-rate", "mask_rate", mask_rate_, "SC drop rate");
    train_.add(knobs_, app);
    model_.add(knobs_, app);
    model_.exclude(init_);
  }

  void run() override {
    const Objective objective = parse_objective(objective_);
    require(!corpus_.empty() || !sentences_.empty(), "pretrain needs --corpus or --sentences");
    require(objective == Objective::SSM || !corpus_.empty(), "SC pre-training needs --corpus");
    const TrainConfig config = train_.config(globals_.threads);
    std::vector<std::pair<std::string, fs::path>> inputs = {{"vocab", input_path(vocab_)}};
    for (const auto& c : corpus_) inputs.emplace_back("corpus", input_path(c));
    if (!sentences_.empty()) inputs.emplace_back("sentences", input_path(sentences_));
    if (!init_path_.empty()) inputs.emplace_back("init", input_path(init_path_));
    const fs::path dir(out_dir_);
    const std::string digest = begin("pretrain", config.seed, inputs,
                                     {{"checkpoints", dir}, {"log", dir / "train_log.jsonl"}},
                                     manifest_path_for(dir));

    const Vocab vocab = Vocab::load(input_path(vocab_));
    std::unique_ptr<PairSource> source;
    if (objective == Objective::SC)
      source = std::make_unique<SpanCorruptionSource>(vocab, load_corpora(corpus_), chunk_tokens_,
                                                      CorruptionConfig{mask_rate_, config.seed});
    else
      source = std::make_unique<SalientSpanSource>(vocab, ssm_sentences(sentences_, corpus_), config.seed);

    TrainState state = init_path_.empty()
                           ? TrainState::fresh(model_.config(vocab.size(), config.dropout_rate), config.seed)
                           : TrainState::from_checkpoint(load_checkpoint(input_path(init_path_)), true);
    require(state.model.vocab_size == vocab.size(), "checkpoint vocabulary size differs from --vocab");
    require(state.step < config.total_steps, "checkpoint is already at step " + std::to_string(state.step));

    fs::create_directories(dir);
    std::ofstream log = open_output(dir / "train_log.jsonl");
    LoopOptions options;
    options.out_dir = dir;
    options.log = &log;
    options.checkpoint_meta = {{"manifest_sha256", digest}, {"objective", to_string(objective)}};
    const auto records = pretrain(state, *source, config, options);
    std::cout << "checkpoints: " << records.size() << ", final step " << state.step << '\n';
  }

 protected:
  nlohmann::json paper_preset() const override {
    return {{"batch_tokens", kPaperBatchTokens}, {"steps", kPaperSsmSteps}, {"learning_rate", 1e-3},
            {"dropout", 0.1}};
  }

 private:
  std::string objective_ = "SC", vocab_, sentences_, init_path_, out_dir_;
  std::vector<std::string> corpus_;
  std::size_t chunk_tokens_ = 64;
  double mask_rate_ = 0.15;
  CLI::Option* init_ = nullptr;
  TrainKnobs train_;
  ModelKnobs model_;
};

class Finetune final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--vocab", "vocab", vocab_, "vocabulary file")->required();
    tasks_.add(knobs_, app, true);
    init_ = knobs_.add(app, "--init", "init", init_path_, "start from this pre-trained checkpoint");
    knobs_.add(app, "--out-dir", "out_dir", out_dir_, "checkpoint directory")->required();
    knobs_.add(app, "--max-decode-len", "max_decode_len", max_decode_len_, "decode limit for validation");
    knobs_.flag(app, "--no-task-overrides", "no_task_overrides", no_overrides_,
                "use the base batch and dropout for WQ too");
    train_.add(knobs_, app);
    model_.add(knobs_, app);
    model_.exclude(init_);
  }

  void run() override {
    TrainConfig config = train_.config(globals_.threads);
    config.max_decode_len = max_decode_len_;
    config.validate();
    const auto specs = tasks_.specs();
    const auto rates = tasks_.weights(specs);
    auto inputs = task_inputs(specs);
    inputs.insert(inputs.begin(), {"vocab", input_path(vocab_)});
    if (!init_path_.empty()) inputs.emplace_back("init", input_path(init_path_));
    const fs::path dir(out_dir_);
    const std::string digest =
        begin("finetune", config.seed, inputs,
              {{"checkpoints", dir}, {"log", dir / "finetune_log.jsonl"}, {"summary", dir / "finetune.json"}},
              manifest_path_for(dir));

    const Vocab vocab = Vocab::load(input_path(vocab_));
    const auto tasks = load_tasks(specs, config.seed);
    std::map<Dataset, TaskOverrides> overrides;
    if (!no_overrides_)
      for (const auto& t : tasks) overrides[t.task.name] = default_overrides(t.task.name, config);
    TrainState state = init_path_.empty()
                           ? TrainState::fresh(model_.config(vocab.size(), config.dropout_rate), config.seed)
                           : TrainState::from_checkpoint(load_checkpoint(input_path(init_path_)), false);
    require(state.model.vocab_size == vocab.size(), "checkpoint vocabulary size differs from --vocab");

    fs::create_directories(dir);
    std::ofstream log = open_output(dir / "finetune_log.jsonl");
    LoopOptions options;
    options.out_dir = dir;
    options.log = &log;
    options.checkpoint_meta = {{"manifest_sha256", digest}, {"phase", "finetune"}};
    const auto result = finetune(state, vocab, tasks, rates, config, overrides, options);
    const auto& best = select_best_checkpoint(result.checkpoints);

    ojson summary;
    summary["manifest_sha256"] = digest;
    summary["run"] = ojson::parse(result.manifest.dump());
    summary["checkpoints"] = ojson::array();
    for (const auto& r : result.checkpoints) summary["checkpoints"].push_back(record_json(r));
    summary["best"] = record_json(best);
    open_output(dir / "finetune.json") << summary.dump(2) << '\n';
    std::cout << "best checkpoint: step " << best.step << ", validation score " << *best.validation_score << '\n';
  }

 protected:
  nlohmann::json paper_preset() const override {
    return {{"batch_tokens", kPaperBatchTokens}, {"steps", kPaperFinetuneSteps}, {"learning_rate", 1e-3},
            {"dropout", 0.1}};
  }

 private:
  std::string vocab_, init_path_, out_dir_;
  TaskArgs tasks_;
  std::size_t max_decode_len_ = 32;
  bool no_overrides_ = false;
  CLI::Option* init_ = nullptr;
  TrainKnobs train_;
  ModelKnobs model_;
};

class Decode final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--checkpoint", "checkpoint", checkpoint_, "model checkpoint")->required();
    knobs_.add(app, "--vocab", "vocab", vocab_, "vocabulary file")->required();
    knobs_.add(app, "--dataset", "dataset", dataset_, "QA JSONL to answer")->required();
    knobs_.add(app, "--dataset-name", "dataset_name", dataset_name_, "nq, wq or tqa (selects the prefix)");
    knobs_.add(app, "--max-decode-len", "max_decode_len", max_decode_len_, "decode limit");
    knobs_.add(app, "--out", "out", out_, "predictions JSONL")->required();
  }

  void run() override {
    const Dataset dataset = parse_dataset(dataset_name_);
    require(max_decode_len_ > 0, "--max-decode-len must be positive");
    begin("decode", 0,
          {{"checkpoint", input_path(checkpoint_)}, {"vocab", input_path(vocab_)}, {"dataset", input_path(dataset_)}},
          {{"predictions", out_}}, manifest_path_for(out_));
    const Vocab vocab = Vocab::load(input_path(vocab_));
    const Checkpoint ckpt = load_checkpoint(input_path(checkpoint_));
    require(ckpt.config.vocab_size == vocab.size(), "checkpoint vocabulary size differs from --vocab");
    const auto examples = load_qa_dataset(input_path(dataset_), dataset);
    const auto predictions = predict(ckpt.config, ckpt.params, vocab, default_task(dataset), examples, max_decode_len_);
    auto out = open_output(out_);
    for (const auto& p : predictions) out << to_json_line(p) << '\n';
    std::cout << "predictions: " << predictions.size() << '\n';
  }

 private:
  std::string checkpoint_, vocab_, dataset_, dataset_name_ = "nq", out_;
  std::size_t max_decode_len_ = 32;
};

class Evaluate final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--mode", "mode", mode_, "em or recall");
    knobs_.add(app, "--predictions", "predictions", predictions_, "predictions JSONL")->required();
    knobs_.add(app, "--dataset", "dataset", dataset_, "gold QA JSONL")->required();
    knobs_.add(app, "--dataset-name", "dataset_name", dataset_name_, "nq, wq or tqa");
    knobs_.add(app, "--out", "out", out_, "report JSON; default <predictions>.report.json");
  }

  void run() override {
    const EvalMode mode = parse_eval_mode(mode_);
    const Dataset dataset = parse_dataset(dataset_name_);
    const fs::path out = out_.empty() ? fs::path(predictions_ + ".report.json") : fs::path(out_);
    const std::string digest =
        begin("evaluate", 0, {{"predictions", input_path(predictions_)}, {"dataset", input_path(dataset_)}},
              {{"report", out}}, manifest_path_for(out));
    const auto report = evaluate(load_predictions(input_path(predictions_)),
                                 load_qa_dataset(input_path(dataset_), dataset), mode);
    ojson j = report.to_json();
    j["manifest_sha256"] = digest;
    open_output(out) << j.dump(2) << '\n';
    std::cout << report.summary_line() << '\n';
  }

 private:
  std::string mode_ = "em", predictions_, dataset_, dataset_name_ = "nq", out_;
};

class CompareObjectives final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--vocab", "vocab", vocab_, "vocabulary file")->required();
    knobs_.add(app, "--corpus", "corpus", corpus_, "corpus JSONL, repeatable")->required();
    knobs_.add(app, "--sentences", "sentences", sentences_, "tagged sentences JSONL; default mines --corpus");
    tasks_.add(knobs_, app, false);
    knobs_.add(app, "--blocks", "blocks", blocks_, "pre-training blocks per objective");
    knobs_.add(app, "--pretrain-block", "pretrain_block", pretrain_block_, "pre-training steps per block");
    knobs_.add(app, "--finetune-steps", "finetune_steps", finetune_steps_, "steps per fine-tuning probe");
    knobs_.add(app, "--probe-checkpoint-every", "probe_checkpoint_every", probe_every_,
               "probe steps between validations");
    knobs_.add(app, "--finetune-batch-tokens", "finetune_batch_tokens", finetune_batch_,
               "token budget per probe batch");
    knobs_.add(app, "--max-decode-len", "max_decode_len", max_decode_len_, "decode limit for validation");
    knobs_.add(app, "--chunk-tokens", "chunk_tokens", chunk_tokens_, "tokens per SC sequence");
    knobs_.add(app, "--mask-rate", "mask_rate", mask_rate_, "SC drop rate");
    train_.add(knobs_, app);
    model_.add(knobs_, app);
    knobs_.add(app, "--out", "out", out_, "curve table CSV")->required();
  }

  void run() override {
    ComparisonConfig cc;
    cc.blocks = blocks_;
    cc.pretrain_block = pretrain_block_;
    cc.finetune_steps = finetune_steps_;
    require(blocks_ > 0 && pretrain_block_ > 0 && finetune_steps_ > 0,
            "--blocks, --pretrain-block and --finetune-steps must be positive");
    cc.pretrain = train_.config(globals_.threads);
    cc.finetune = cc.pretrain;
    cc.finetune.batch_tokens = finetune_batch_;
    cc.finetune.checkpoint_every = probe_every_;
    cc.finetune.max_decode_len = max_decode_len_;
    cc.finetune.validate();
    const auto specs = tasks_.specs();
    auto inputs = task_inputs(specs);
    inputs.insert(inputs.begin(), {"vocab", input_path(vocab_)});
    for (const auto& c : corpus_) inputs.emplace_back("corpus", input_path(c));
    if (!sentences_.empty()) inputs.emplace_back("sentences", input_path(sentences_));
    const fs::path out(out_);
    const fs::path rows_path = out.string() + ".rows.json";
    const std::string digest = begin("compare-objectives", cc.pretrain.seed, inputs,
                                     {{"curve", out}, {"rows", rows_path}}, manifest_path_for(out));

    const Vocab vocab = Vocab::load(input_path(vocab_));
    const auto corpus = load_corpora(corpus_);
    const SalientSpanSource ssm(vocab, ssm_sentences(sentences_, corpus_), cc.pretrain.seed);
    const SpanCorruptionSource sc(vocab, corpus, chunk_tokens_, CorruptionConfig{mask_rate_, cc.pretrain.seed});
    const TrainState base = TrainState::fresh(model_.config(vocab.size(), cc.pretrain.dropout_rate), cc.pretrain.seed);
    const auto rows = run_objective_comparison(base, vocab, ssm, sc, load_tasks(specs, cc.pretrain.seed), cc);

    {
      auto csv = open_output(out);
      write_comparison_csv(csv, rows);
    }
    ojson j;
    j["manifest_sha256"] = digest;
    j["rows"] = ojson::array();
    bool isolated = true;
    for (const auto& r : rows) {
      isolated = isolated && r.probe_start_digest == r.block_digest && r.block_digest_after_probe == r.block_digest;
      j["rows"].push_back({{"objective", to_string(r.objective)},
                           {"pretrain_step", r.pretrain_step},
                           {"max_val_em", r.max_val_em},
                           {"block_sha256", r.block_digest},
                           {"probe_start_sha256", r.probe_start_digest},
                           {"block_sha256_after_probe", r.block_digest_after_probe}});
    }
    j["probe_isolation"] = isolated;
    open_output(rows_path) << j.dump(2) << '\n';
    std::ifstream table(out);
    std::cout << table.rdbuf();
    if (!isolated) throw InvalidArgument("probe isolation check failed");
  }

 private:
  std::string vocab_, sentences_, out_;
  std::vector<std::string> corpus_;
  TaskArgs tasks_;
  std::size_t blocks_ = 3, pretrain_block_ = 100, finetune_steps_ = 100, probe_every_ = 25, finetune_batch_ = 4096,
              max_decode_len_ = 32, chunk_tokens_ = 64;
  double mask_rate_ = 0.15;
  TrainKnobs train_;
  ModelKnobs model_;
};

class AuditSample final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--report", "report", report_, "evaluation report JSON")->required();
    knobs_.add(app, "--dataset", "dataset", dataset_, "gold QA JSONL the report was scored on")->required();
    knobs_.add(app, "--dataset-name", "dataset_name", dataset_name_, "nq, wq or tqa");
    knobs_.add(app, "--sample-size", "sample_size", sample_size_, "records to sample");
    knobs_.add(app, "--seed", "seed", seed_, "sampling seed");
    knobs_.add(app, "--store", "store", store_, "audit journal JSONL")->required();
  }

  void run() override {
    const Dataset dataset = parse_dataset(dataset_name_);
    begin("audit sample", seed_, {{"report", input_path(report_)}, {"dataset", input_path(dataset_)}},
          {{"store", store_}}, fs::path(store_ + ".sample.manifest.json"));
    std::ifstream in(input_path(report_));
    if (!in) throw IoError("cannot read " + report_);
    const EvalReport report = EvalReport::from_json(nlohmann::json::parse(in));
    const auto records = surface_candidates(report, load_qa_dataset(input_path(dataset_), dataset), sample_size_, seed_);
    AuditStore store(store_);
    const auto revision = store.add(records);
    std::cout << "sampled: " << records.size() << ", revision " << revision << '\n';
  }

 protected:
  nlohmann::json paper_preset() const override { return {{"sample_size", 150}}; }

 private:
  std::string report_, dataset_, dataset_name_ = "nq", store_;
  std::size_t sample_size_ = 150;
  std::uint64_t seed_ = 0;
};

class AuditExport final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--store", "store", store_, "audit journal JSONL")->required();
    knobs_.add(app, "--out", "out", out_, "TSV file")->required();
  }

  void run() override {
    require(fs::exists(input_path(store_)), "audit store " + store_ + " does not exist");
    begin("audit export", 0, {{"store", input_path(store_)}}, {{"tsv", out_}}, manifest_path_for(out_));
    const AuditStore store(input_path(store_));
    if (fs::path(out_).has_parent_path()) fs::create_directories(fs::path(out_).parent_path());
    export_audit(store, out_);
    std::cout << "exported: " << store.records().size() << " records\n";
  }

 private:
  std::string store_, out_;
};

std::atomic<AuditServer*> g_server{nullptr};

extern "C" void stop_server(int) {
  if (AuditServer* s = g_server.load()) std::thread([s] { s->stop(); }).detach();
}

class Serve final : public Command {
 public:
  void setup(CLI::App* app) override {
    knobs_.add(app, "--store", "store", store_, "audit journal JSONL")->required();
    knobs_.add(app, "--report", "report", report_, "evaluation report JSON giving the base score")->required();
    knobs_.add(app, "--host", "host", host_, "bind address");
    knobs_.add(app, "--port", "port", port_, "TCP port; 0 picks a free one");
  }

  void run() override {
    require(port_ >= 0 && port_ < 65536, "--port must lie in [0, 65535]");
    begin("serve", 0, {{"store", input_path(store_)}, {"report", input_path(report_)}}, {{"store", store_}},
          fs::path(store_ + ".serve.manifest.json"));
    std::ifstream in(input_path(report_));
    if (!in) throw IoError("cannot read " + report_);
    const EvalReport report = EvalReport::from_json(nlohmann::json::parse(in));
    AuditStore store(input_path(store_));
    AuditServer server(store, {report.matched, report.evaluated});
    const int port = server.bind(host_, port_);
    std::cout << "listening on http://" << host_ << ":" << port << std::endl;
    g_server = &server;
    std::signal(SIGINT, stop_server);
    std::signal(SIGTERM, stop_server);
    server.run();
    g_server = nullptr;
  }

 private:
  std::string store_, report_, host_ = "127.0.0.1";
  int port_ = 8080;
};

std::string valid_flags(const CLI::App* app) {
  std::string out;
  for (const auto* opt : app->get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || opt->get_group().empty()) continue;
    out += (out.empty() ? "" : ", ") + opt->get_name();
  }
  return out;
}

void print_error(const std::string& kind, const std::string& message) {
  std::string one_line = message;
  std::replace(one_line.begin(), one_line.end(), '\n', ' ');
  std::cerr << "error: " << kind << ": " << one_line << std::endl;
}

}  // namespace

int dispatch(int argc, char** argv) {
  CLI::App app{"Closed-book question answering toolkit", "cbqa"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Globals globals;
  app.add_option("--config", globals.config_path, "JSON file of settings; flags override it")->expected(1);
  app.add_option("--preset", globals.preset, "desk (default) or paper-scale training numbers")->capture_default_str();
  app.add_option("--threads", globals.threads, "worker cap")->capture_default_str();
  app.fallthrough();

  std::vector<std::pair<CLI::App*, std::unique_ptr<Command>>> commands;
  const auto reg = [&](CLI::App* parent, const std::string& name, const std::string& help,
                       std::unique_ptr<Command> cmd) {
    CLI::App* sub = parent->add_subcommand(name, help);
    sub->fallthrough();
    cmd->setup(sub);
    commands.emplace_back(sub, std::move(cmd));
  };
  reg(&app, "build-vocab", "build a byte-level subword vocabulary", std::make_unique<BuildVocab>());
  reg(&app, "corrupt", "write span-corruption pairs", std::make_unique<Corrupt>());
  reg(&app, "mine-ssm", "mine sentences with salient spans", std::make_unique<MineSsm>());
  reg(&app, "pretrain", "pre-train with span corruption or salient span masking", std::make_unique<Pretrain>());
  reg(&app, "finetune", "fine-tune on a QA task mixture", std::make_unique<Finetune>());
  reg(&app, "decode", "greedy-decode answers for a QA file", std::make_unique<Decode>());
  reg(&app, "evaluate", "score predictions by exact match or recall", std::make_unique<Evaluate>());
  reg(&app, "compare-objectives", "SSM versus SC curve table", std::make_unique<CompareObjectives>());
  CLI::App* audit = app.add_subcommand("audit", "false-negative audit tools");
  audit->require_subcommand(1);
  audit->fallthrough();
  reg(audit, "sample", "sample unmatched predictions into an audit store", std::make_unique<AuditSample>());
  reg(audit, "export", "export an audit store as TSV", std::make_unique<AuditExport>());
  reg(&app, "serve", "serve the audit JSON API", std::make_unique<Serve>());

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const CLI::App* where = &app;
    for (const auto& [sub, _] : commands)
      if (sub->parsed()) where = sub;
    print_error("usage", std::string(e.what()) + "; valid flags: " + valid_flags(where));
    return 2;
  }

  try {
    for (auto& [sub, cmd] : commands)
      if (sub->parsed()) {
        cmd->configure(globals);
        cmd->run();
      }
    return 0;
  } catch (const ConfigError& e) {
    print_error(e.kind(), e.what());
    return 2;
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    print_error("json", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
}

}  // namespace cbqa::cli

int main(int argc, char** argv) { return cbqa::cli::dispatch(argc, argv); }
