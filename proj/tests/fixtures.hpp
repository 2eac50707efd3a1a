#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cbqa/corpus.hpp"
#include "cbqa/model.hpp"
#include "cbqa/tokenizer.hpp"
#include "cbqa/trainer.hpp"

namespace cbqa::testing {

inline const std::filesystem::path kDataDir = CBQA_TEST_DATA;

inline std::vector<QAExample> capitals() { return load_qa_dataset(kDataDir / "capitals.jsonl", Dataset::NQ); }
inline std::vector<QAExample> languages() { return load_qa_dataset(kDataDir / "languages.jsonl", Dataset::WQ); }
inline std::vector<QAExample> continents() { return load_qa_dataset(kDataDir / "continents.jsonl", Dataset::TQA); }
inline std::vector<CorpusDocument> fixture_corpus() { return load_corpus(kDataDir / "ssm_corpus.jsonl"); }

// Vocabulary over every fixture text, prefixes included.
inline const Vocab& fixture_vocab() {
  static const Vocab vocab = [] {
    std::vector<std::string> text;
    for (const auto& d : fixture_corpus()) text.push_back(d.text);
    for (const auto& set : {capitals(), languages(), continents()})
      for (const auto& e : set) {
        text.push_back(default_prefix(e.dataset) + e.question);
        for (const auto& list : e.annotator_answers)
          for (const auto& a : list) text.push_back(a);
      }
    return build_vocab(text, 512);
  }();
  return vocab;
}

inline ModelConfig small_model(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.max_len = 64;
  return c;
}

}  // namespace cbqa::testing
