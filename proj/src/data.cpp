#include "bdlab/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>

namespace bdlab {

namespace {

const std::regex& tag_pattern() {
  static const std::regex re("^(O|[BI]-[A-Za-z0-9_]+)$");
  return re;
}

bool is_blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace

bool is_valid_tag(const std::string& tag) { return std::regex_match(tag, tag_pattern()); }

std::vector<LabeledSequence> parse_conll(const std::string& text) {
  std::vector<LabeledSequence> out;
  LabeledSequence current;
  auto flush = [&] {
    if (!current.words.empty()) out.push_back(std::move(current));
    current = {};
  };
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) {
      flush();
      continue;
    }
    if (line.rfind("-DOCSTART-", 0) == 0) continue;
    const auto word_end = line.find_first_of(" \t");
    if (word_end == std::string::npos) {
      throw ParseError("expected \"word tag\", found a single field", line_no, 1);
    }
    auto tag_begin = line.find_last_of(" \t");
    ++tag_begin;
    auto tag_end = line.size();
    if (tag_begin == tag_end) {
      // Trailing whitespace: the tag is the last non-blank field.
      tag_end = line.find_last_not_of(" \t") + 1;
      tag_begin = line.find_last_of(" \t", tag_end - 1) + 1;
    }
    if (tag_begin <= word_end) throw ParseError("expected \"word tag\", found a single field", line_no, 1);
    const std::string tag = line.substr(tag_begin, tag_end - tag_begin);
    if (!is_valid_tag(tag)) throw ParseError("invalid tag \"" + tag + "\"", line_no, tag_begin + 1);
    current.words.push_back(line.substr(0, word_end));
    current.labels.push_back(tag);
  }
  flush();
  return out;
}

std::vector<LabeledSequence> read_conll(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_conll(buf.str());
}

std::string format_conll(std::span<const LabeledSequence> sentences) {
  std::string out;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& sent = sentences[s];
    if (sent.words.size() != sent.labels.size()) throw DimensionError("sentence has mismatched words and labels");
    if (s > 0) out += '\n';
    for (std::size_t i = 0; i < sent.words.size(); ++i) out += sent.words[i] + '\t' + sent.labels[i] + '\n';
  }
  return out;
}

void write_conll(const std::filesystem::path& path, std::span<const LabeledSequence> sentences) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_conll(sentences);
}

std::vector<std::string> validate_iob2(const std::vector<std::string>& tags, Iob2Mode mode) {
  std::vector<std::string> out = tags;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!is_valid_tag(out[i])) throw ContractError("malformed tag \"" + out[i] + "\" at index " + std::to_string(i));
    if (out[i][0] != 'I') continue;
    const std::string type = out[i].substr(2);
    const bool continues = i > 0 && out[i - 1] != "O" && out[i - 1].substr(2) == type;
    if (continues) continue;
    if (mode == Iob2Mode::kStrict) throw Iob2Violation(i);
    out[i] = "B-" + type;
  }
  return out;
}

SpanSet extract_spans(const std::vector<std::string>& tags) {
  validate_iob2(tags, Iob2Mode::kStrict);
  SpanSet spans;
  std::size_t i = 0;
  while (i < tags.size()) {
    if (tags[i][0] != 'B') {
      ++i;
      continue;
    }
    const std::string type = tags[i].substr(2);
    std::size_t end = i;
    while (end + 1 < tags.size() && tags[end + 1] == "I-" + type) ++end;
    spans.insert({i, end, type});
    i = end + 1;
  }
  return spans;
}

std::vector<std::string> tags_from_spans(const SpanSet& spans, std::size_t length) {
  std::vector<std::string> tags(length, "O");
  for (const auto& s : spans) {
    if (s.start > s.end || s.end >= length) throw ContractError("span out of range");
    for (std::size_t i = s.start; i <= s.end; ++i) {
      if (tags[i] != "O") throw ContractError("overlapping spans at index " + std::to_string(i));
      tags[i] = (i == s.start ? "B-" : "I-") + s.type;
    }
  }
  return tags;
}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

std::int64_t Vocabulary::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const auto id = static_cast<std::int64_t>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::int64_t Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

nlohmann::json Vocabulary::to_json() const { return tokens_; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  const auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
    throw ConfigError("vocabulary must start with <pad>, <unk>");
  }
  Vocabulary v;
  for (const auto& t : tokens) v.add(t);
  if (v.size() != tokens.size()) throw ConfigError("vocabulary has duplicate tokens");
  return v;
}

std::vector<std::string> word_chunks(const std::string& word, std::size_t chunk) {
  if (chunk == 0) throw ConfigError("chunk must be >= 1");
  std::vector<std::string> out;
  std::string piece;
  std::size_t points = 0;
  for (std::size_t i = 0; i < word.size();) {
    std::size_t len = 1;
    const auto lead = static_cast<unsigned char>(word[i]);
    if (lead >= 0xF0) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = 3;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    piece += word.substr(i, len);
    i += len;
    if (++points == chunk) {
      out.push_back(std::move(piece));
      piece.clear();
      points = 0;
    }
  }
  if (!piece.empty()) out.push_back(std::move(piece));
  return out;
}

Vocabulary build_vocabulary(std::span<const LabeledSequence> sentences, std::size_t chunk) {
  std::set<std::string> seen;
  for (const auto& s : sentences) {
    for (const auto& w : s.words) {
      for (auto& c : word_chunks(w, chunk)) seen.insert(std::move(c));
    }
  }
  Vocabulary v;
  for (const auto& t : seen) v.add(t);
  return v;
}

Tokenized tokenize(const std::vector<std::string>& words, const Vocabulary& vocab, std::size_t chunk) {
  if (words.empty()) throw ContractError("tokenize needs at least one word");
  Tokenized out;
  for (const auto& w : words) {
    const auto pieces = word_chunks(w, chunk);
    if (pieces.empty()) throw ContractError("tokenize: empty word");
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      out.ids.push_back(vocab.id(pieces[i]));
      out.word_start.push_back(i == 0);
    }
  }
  return out;
}

void tokenize_all(std::vector<LabeledSequence>& sentences, const Vocabulary& vocab, std::size_t chunk,
                  std::size_t max_tokens) {
  for (auto& s : sentences) {
    auto t = tokenize(s.words, vocab, chunk);
    if (t.ids.size() > max_tokens) {
      throw DimensionError("sentence has " + std::to_string(t.ids.size()) + " tokens, limit is " +
                           std::to_string(max_tokens));
    }
    s.token_ids = std::move(t.ids);
    s.word_start = std::move(t.word_start);
    s.pad_flags.assign(s.token_ids.size(), false);
  }
}

std::int64_t DatasetSplit::label_id(const std::string& tag) const {
  const auto it = std::find(label_vocabulary.begin(), label_vocabulary.end(), tag);
  if (it == label_vocabulary.end()) throw ContractError("tag \"" + tag + "\" is not in the label vocabulary");
  return it - label_vocabulary.begin();
}

nlohmann::json DatasetSplit::manifest() const {
  return {{"name", name},
          {"sizes", {{"train", train.size()}, {"valid", valid.size()}, {"test", test.size()}}},
          {"label_vocabulary", label_vocabulary},
          {"seed", seed}};
}

DatasetSplit make_split(std::string name, std::uint64_t seed, std::vector<LabeledSequence> train,
                        std::vector<LabeledSequence> valid, std::vector<LabeledSequence> test, std::size_t chunk) {
  DatasetSplit split;
  split.name = std::move(name);
  split.seed = seed;
  split.chunk = chunk;
  split.tokens = build_vocabulary(train, chunk);
  std::set<std::string> tags;
  for (auto* part : {&train, &valid, &test}) {
    for (auto& s : *part) {
      if (s.words.size() != s.labels.size()) throw DimensionError("sentence has mismatched words and labels");
      s.labels = validate_iob2(s.labels, Iob2Mode::kStrict);
      tags.insert(s.labels.begin(), s.labels.end());
    }
    tokenize_all(*part, split.tokens, chunk);
  }
  split.label_vocabulary.push_back("O");
  for (const auto& t : tags) {
    if (t != "O") split.label_vocabulary.push_back(t);
  }
  split.train = std::move(train);
  split.valid = std::move(valid);
  split.test = std::move(test);
  return split;
}

const std::vector<std::string>& symbol_alphabet() {
  static const std::vector<std::string> symbols = {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j",
                                                   "k", "l", "m", "n", "opq", "rst", "uvw", "xyz", "oop", "rrs"};
  return symbols;
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const std::size_t train = n * 7 / 10;
  const std::size_t valid = n / 10;
  return {train, valid, n - train - valid};
}

std::vector<std::vector<std::string>> sample_sentences(std::size_t count, const SyntheticTaskParams& params,
                                                       std::uint64_t seed) {
  if (params.min_words == 0 || params.min_words > params.max_words) throw ConfigError("invalid sentence length range");
  if (params.trigger_p < 0.0 || params.trigger_p > 1.0) throw ConfigError("trigger probability must be in [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(params.min_words, params.max_words);
  std::uniform_int_distribution<std::size_t> symbol(0, symbol_alphabet().size() - 1);
  std::bernoulli_distribution trigger(params.trigger_p);
  std::vector<std::vector<std::string>> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<std::string> words(length(rng));
    for (auto& w : words) w = trigger(rng) ? kTrigger : symbol_alphabet()[symbol(rng)];
    out.push_back(std::move(words));
  }
  return out;
}

namespace {

enum class Direction { kNext, kPrevious };

DatasetSplit gen_trigger_task(const SyntheticTaskParams& params, Direction direction) {
  if (params.n_sentences < 100) throw ConfigError("synthetic tasks need n_sentences >= 100");
  const std::string tag = direction == Direction::kNext ? "B-NXT" : "B-PRV";
  std::set<std::vector<std::string>> seen;
  std::vector<LabeledSequence> all;
  std::uint64_t draw_seed = params.seed;
  std::size_t attempts = 0;
  while (all.size() < params.n_sentences) {
    // Batches keep the stream reproducible while rejecting duplicates.
    for (auto& words : sample_sentences(params.n_sentences - all.size(), params, draw_seed++)) {
      if (!seen.insert(words).second) continue;
      LabeledSequence s;
      s.labels.assign(words.size(), "O");
      for (std::size_t i = 0; i < words.size(); ++i) {
        const bool hit = direction == Direction::kNext ? i + 1 < words.size() && words[i + 1] == kTrigger
                                                       : i > 0 && words[i - 1] == kTrigger;
        if (hit) s.labels[i] = tag;
      }
      s.words = std::move(words);
      all.push_back(std::move(s));
    }
    if (++attempts > 1000) throw ConfigError("cannot draw enough distinct sentences");
  }
  const auto sizes = split_sizes(all.size());
  std::vector<LabeledSequence> train(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(sizes[0]));
  std::vector<LabeledSequence> valid(all.begin() + static_cast<std::ptrdiff_t>(sizes[0]),
                                     all.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]));
  std::vector<LabeledSequence> test(all.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]), all.end());
  return make_split(direction == Direction::kNext ? "lookahead" : "leftcontext", params.seed, std::move(train),
                    std::move(valid), std::move(test), params.chunk);
}

}  // namespace

DatasetSplit gen_lookahead_task(const SyntheticTaskParams& params) { return gen_trigger_task(params, Direction::kNext); }

DatasetSplit gen_lookahead_task(std::size_t n_sentences, std::uint64_t seed) {
  SyntheticTaskParams p;
  p.n_sentences = n_sentences;
  p.seed = seed;
  return gen_lookahead_task(p);
}

DatasetSplit gen_leftcontext_task(const SyntheticTaskParams& params) {
  return gen_trigger_task(params, Direction::kPrevious);
}

DatasetSplit gen_leftcontext_task(std::size_t n_sentences, std::uint64_t seed) {
  SyntheticTaskParams p;
  p.n_sentences = n_sentences;
  p.seed = seed;
  return gen_leftcontext_task(p);
}

}  // namespace bdlab
