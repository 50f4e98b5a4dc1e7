#pragma once

// IOB2 sequence-labeling data: CoNLL I/O, tag validation, span extraction,
// character-chunk tokenization, and the synthetic lookahead tasks.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/errors.hpp"

namespace bdlab {

struct LabeledSequence {
  std::vector<std::string> words;
  std::vector<std::string> labels;      // one IOB2 tag per word
  std::vector<std::int64_t> token_ids;  // filled by tokenization
  std::vector<bool> word_start;         // aligned to token_ids
  std::vector<bool> pad_flags;          // aligned to token_ids

  bool operator==(const LabeledSequence&) const = default;
};

inline constexpr std::size_t kMaxTokens = 256;

// Parses "word<TAB or space>tag" lines; blank lines separate sentences.
// Runs of blank lines and -DOCSTART- lines are skipped.
std::vector<LabeledSequence> read_conll(const std::filesystem::path& path);
std::vector<LabeledSequence> parse_conll(const std::string& text);
std::string format_conll(std::span<const LabeledSequence> sentences);
void write_conll(const std::filesystem::path& path, std::span<const LabeledSequence> sentences);

bool is_valid_tag(const std::string& tag);

class Iob2Violation : public ContractError {
 public:
  explicit Iob2Violation(std::size_t index)
      : ContractError("IOB2 violation at index " + std::to_string(index)), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

enum class Iob2Mode { kStrict, kRepair };

// Strict: throws Iob2Violation at the first I-X not preceded by B-X or I-X.
// Repair: rewrites each such I-X to B-X.
std::vector<std::string> validate_iob2(const std::vector<std::string>& tags, Iob2Mode mode);

struct Span {
  std::size_t start = 0;  // inclusive word index
  std::size_t end = 0;    // inclusive word index
  std::string type;

  auto operator<=>(const Span&) const = default;
};

using SpanSet = std::set<Span>;

SpanSet extract_spans(const std::vector<std::string>& tags);
// Inverse of extract_spans for non-overlapping spans inside [0, length).
std::vector<std::string> tags_from_spans(const SpanSet& spans, std::size_t length);

class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;

  Vocabulary();
  std::int64_t add(const std::string& token);
  std::int64_t id(const std::string& token) const;  // kUnk when absent
  const std::string& token(std::int64_t id) const;
  std::size_t size() const { return tokens_.size(); }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int64_t> index_;
};

// Splits a word into chunks of `chunk` code points (last one may be shorter).
std::vector<std::string> word_chunks(const std::string& word, std::size_t chunk);

Vocabulary build_vocabulary(std::span<const LabeledSequence> sentences, std::size_t chunk);

struct Tokenized {
  std::vector<std::int64_t> ids;
  std::vector<bool> word_start;
};

Tokenized tokenize(const std::vector<std::string>& words, const Vocabulary& vocab, std::size_t chunk);

// Fills token_ids, word_start and pad_flags; throws DimensionError past max_tokens.
void tokenize_all(std::vector<LabeledSequence>& sentences, const Vocabulary& vocab, std::size_t chunk,
                  std::size_t max_tokens = kMaxTokens);

struct DatasetSplit {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t chunk = 2;
  std::vector<LabeledSequence> train, valid, test;
  std::vector<std::string> label_vocabulary;
  Vocabulary tokens;

  std::int64_t label_id(const std::string& tag) const;
  nlohmann::json manifest() const;
};

// Builds a split from raw sentences: vocabulary from train, tokenization, label vocabulary.
DatasetSplit make_split(std::string name, std::uint64_t seed, std::vector<LabeledSequence> train,
                        std::vector<LabeledSequence> valid, std::vector<LabeledSequence> test,
                        std::size_t chunk = 2);

inline constexpr const char* kTrigger = "!";

struct SyntheticTaskParams {
  std::size_t n_sentences = 2858;
  std::uint64_t seed = 0;
  std::size_t min_words = 8;
  std::size_t max_words = 24;
  double trigger_p = 0.15;
  std::size_t chunk = 2;
};

// The 20 non-trigger symbols. Six of them span two tokens at chunk=2.
const std::vector<std::string>& symbol_alphabet();

// Split sizes floor(0.7n), floor(0.1n), rest.
std::array<std::size_t, 3> split_sizes(std::size_t n);

// A word is B-NXT iff the following word is the trigger; the last word is O.
DatasetSplit gen_lookahead_task(std::size_t n_sentences, std::uint64_t seed);
DatasetSplit gen_lookahead_task(const SyntheticTaskParams& params);
// A word is B-PRV iff the preceding word is the trigger; the first word is O.
DatasetSplit gen_leftcontext_task(std::size_t n_sentences, std::uint64_t seed);
DatasetSplit gen_leftcontext_task(const SyntheticTaskParams& params);

// Raw word sequences from the same generative model, for language-model pretraining.
std::vector<std::vector<std::string>> sample_sentences(std::size_t count, const SyntheticTaskParams& params,
                                                       std::uint64_t seed);

}  // namespace bdlab
