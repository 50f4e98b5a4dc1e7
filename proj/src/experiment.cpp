#include "bdlab/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "bdlab/errors.hpp"

namespace bdlab {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown " + where + " key '" + key + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void to_json(nlohmann::json& j, const TaskConfig& c) {
  j = {{"name", c.name},
       {"n_sentences", c.params.n_sentences},
       {"seed", c.params.seed},
       {"min_words", c.params.min_words},
       {"max_words", c.params.max_words},
       {"trigger_p", c.params.trigger_p},
       {"chunk", c.params.chunk},
       {"train", c.train_path},
       {"valid", c.valid_path},
       {"test", c.test_path}};
}

void from_json(const nlohmann::json& j, TaskConfig& c) {
  reject_unknown(j,
                 {"name", "n_sentences", "seed", "min_words", "max_words", "trigger_p", "chunk", "train", "valid",
                  "test"},
                 "task config");
  read(j, "name", c.name);
  read(j, "n_sentences", c.params.n_sentences);
  read(j, "seed", c.params.seed);
  read(j, "min_words", c.params.min_words);
  read(j, "max_words", c.params.max_words);
  read(j, "trigger_p", c.params.trigger_p);
  read(j, "chunk", c.params.chunk);
  read(j, "train", c.train_path);
  read(j, "valid", c.valid_path);
  read(j, "test", c.test_path);
  if (c.name != "lookahead" && c.name != "leftcontext" && c.name != "conll") {
    throw ConfigError("task name must be lookahead, leftcontext or conll, got \"" + c.name + "\"");
  }
  if (c.params.chunk == 0) throw ConfigError("chunk must be positive");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"steps", c.steps},           {"corpus_size", c.corpus_size}, {"copies", c.copies},
       {"copies_only", c.copies_only}, {"lr", c.lr},                   {"batch_size", c.batch_size},
       {"grad_accum", c.grad_accum}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  reject_unknown(j,
                 {"steps", "corpus_size", "copies", "copies_only", "lr", "batch_size", "grad_accum",
                  "weight_decay", "seed"},
                 "pretrain config");
  read(j, "steps", c.steps);
  read(j, "corpus_size", c.corpus_size);
  read(j, "copies", c.copies);
  read(j, "copies_only", c.copies_only);
  read(j, "lr", c.lr);
  read(j, "batch_size", c.batch_size);
  read(j, "grad_accum", c.grad_accum);
  read(j, "weight_decay", c.weight_decay);
  read(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"task", c.task},     {"model", c.model}, {"train", c.train}, {"pretrain", c.pretrain},
       {"lora", c.lora},     {"base", c.base},   {"seeds", c.seeds}, {"jobs", c.jobs},
       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  reject_unknown(j, {"task", "model", "train", "pretrain", "lora", "base", "seeds", "jobs", "out_dir"},
                 "experiment config");
  try {
    if (j.contains("task")) from_json(j.at("task"), c.task);
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("pretrain")) from_json(j.at("pretrain"), c.pretrain);
    read(j, "lora", c.lora);
    read(j, "base", c.base);
    read(j, "seeds", c.seeds);
    read(j, "jobs", c.jobs);
    read(j, "out_dir", c.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  c.train.validate();
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

std::filesystem::path resolve_out_dir(const ExperimentConfig& c) {
  if (const char* env = std::getenv("BDLAB_OUT"); env != nullptr && *env != '\0') return env;
  return c.out_dir;
}

DatasetSplit build_split(const TaskConfig& task) {
  if (task.name == "lookahead") return gen_lookahead_task(task.params);
  if (task.name == "leftcontext") return gen_leftcontext_task(task.params);
  if (task.train_path.empty() || task.valid_path.empty() || task.test_path.empty()) {
    throw ConfigError("conll task needs train, valid and test paths");
  }
  for (const auto& p : {task.train_path, task.valid_path, task.test_path}) {
    if (!std::filesystem::exists(p)) throw ConfigError("missing data file " + p);
  }
  return make_split("conll", task.params.seed, read_conll(task.train_path), read_conll(task.valid_path),
                    read_conll(task.test_path), task.params.chunk);
}

ModelConfig model_config_for(const ExperimentConfig& c, const DatasetSplit& split) {
  ModelConfig m = c.model;
  m.vocab_size = split.tokens.size();
  m.n_labels = split.label_vocabulary.size();
  m.validate();
  return m;
}

SLModel pretrain_base(const ExperimentConfig& c, const DatasetSplit& split, PretrainReport* report) {
  SLModel model(model_config_for(c, split), c.pretrain.seed);
  SyntheticTaskParams params = c.task.params;
  params.chunk = split.chunk;
  const auto corpus = build_lm_corpus(split.tokens, params, c.pretrain.corpus_size, c.pretrain.copies,
                                      mix(c.pretrain.seed, 7), c.pretrain.copies_only);
  TrainConfig t;
  t.lr = c.pretrain.lr;
  t.batch_size = c.pretrain.batch_size;
  t.grad_accum = c.pretrain.grad_accum;
  t.weight_decay = c.pretrain.weight_decay;
  t.seed = c.pretrain.seed;
  auto r = pretrain_lm(model, corpus, c.pretrain.steps, t);
  if (report) *report = std::move(r);
  return model;
}

void save_base(const SLModel& model, const DatasetSplit& split, const std::filesystem::path& path,
               const PretrainReport& report) {
  model.save(path, {{"tokens", split.tokens.to_json()},
                    {"task", split.manifest()},
                    {"initial_loss", report.initial_loss},
                    {"final_loss", report.final_loss},
                    {"steps", report.losses.size()}});
}

SLModel load_base(const std::filesystem::path& path, const DatasetSplit& split) {
  if (!std::filesystem::exists(path)) throw ConfigError("base checkpoint not found: " + path.string());
  auto [model, meta] = SLModel::load(path);
  if (!meta.contains("tokens") || meta.at("tokens") != split.tokens.to_json()) {
    throw ConfigError("base checkpoint vocabulary does not match the task vocabulary");
  }
  return std::move(model);
}

RunManifest finetune_run(const ExperimentConfig& c, const DatasetSplit& split, const SLModel* base,
                         const TrainConfig& train, SLModel* trained) {
  train.validate();
  const std::size_t n_labels = split.label_vocabulary.size();
  SLModel model = base ? base->clone() : SLModel(model_config_for(c, split), train.seed);
  if (base) {
    configure_for_finetune(model, train, c.lora, n_labels);
    if (!c.lora) model.reset_classifier(n_labels, mix(train.seed, 2));
  } else {
    configure_for_finetune(model, train, false, n_labels);
  }
  auto manifest = train_sl(model, split, train);
  if (trained) *trained = std::move(model);
  return manifest;
}

}  // namespace bdlab
