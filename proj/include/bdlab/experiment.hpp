#pragma once

// Experiment plumbing shared by the command line and the acceptance suite:
// one JSON document resolves the task, model, pretraining and fine-tuning setup.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/data.hpp"
#include "bdlab/model.hpp"
#include "bdlab/trainer.hpp"

namespace bdlab {

struct TaskConfig {
  std::string name = "lookahead";  // lookahead | leftcontext | conll
  SyntheticTaskParams params;      // synthetic tasks; seed fixes the split
  std::string train_path, valid_path, test_path;  // conll only
};

struct PretrainConfig {
  std::size_t steps = 0;
  std::size_t corpus_size = 20000;
  std::size_t copies = 2;
  bool copies_only = true;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t grad_accum = 1;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  TaskConfig task;
  ModelConfig model;  // vocab_size and n_labels are taken from the data
  TrainConfig train;
  PretrainConfig pretrain;
  bool lora = true;         // adapters when fine-tuning a pretrained base
  std::string base;         // checkpoint to fine-tune; empty trains from scratch
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  std::size_t jobs = 1;
  std::string out_dir = "runs";
};

void to_json(nlohmann::json& j, const TaskConfig& c);
void from_json(const nlohmann::json& j, TaskConfig& c);
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Absent keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Output directory: BDLAB_OUT when set, otherwise the configured one.
std::filesystem::path resolve_out_dir(const ExperimentConfig& c);

DatasetSplit build_split(const TaskConfig& task);

// Model config with vocabulary and label counts filled from the split.
ModelConfig model_config_for(const ExperimentConfig& c, const DatasetSplit& split);

// Fresh model pretrained on the copy corpus for c.pretrain.steps updates.
SLModel pretrain_base(const ExperimentConfig& c, const DatasetSplit& split, PretrainReport* report = nullptr);

void save_base(const SLModel& model, const DatasetSplit& split, const std::filesystem::path& path,
               const PretrainReport& report);
// Loads a base checkpoint and checks its vocabulary against the split.
SLModel load_base(const std::filesystem::path& path, const DatasetSplit& split);

// One fine-tuning run. With a base, the base is cloned and adapted (LoRA
// when c.lora); without one, a model is initialised from the run seed.
RunManifest finetune_run(const ExperimentConfig& c, const DatasetSplit& split, const SLModel* base,
                         const TrainConfig& train, SLModel* trained = nullptr);

}  // namespace bdlab
