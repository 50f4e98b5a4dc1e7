#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/data.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/model.hpp"

namespace bdlab {

enum class Strategy { kMasked, kRepeat, kFullUnmask, kMiddleUnmask };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);  // ConfigError on unknown names
MaskStrategy mask_strategy(Strategy s);

inline const std::vector<std::uint64_t> kDefaultSeeds{5, 29, 42, 81, 123};

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::size_t batch_size = 8;
  std::size_t grad_accum = 4;
  std::size_t epochs = 10;
  std::uint64_t seed = 42;
  std::size_t max_len = kMaxTokens;
  std::size_t lora_rank = 16;
  double lora_alpha = 16.0;
  double lora_dropout = 0.1;
  Strategy strategy = Strategy::kMasked;
  std::size_t r = 0;
  std::optional<std::size_t> exit_layer;

  std::size_t effective_batch() const { return batch_size * grad_accum; }
  // Rejects out-of-range values and r > 0 with anything but repeat.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);  // unknown keys rejected

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

// One AdamW update: decoupled decay p *= 1 - lr*wd, then the bias-corrected
// Adam step. Moments are created on first use.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamState& state, const TrainConfig& cfg);

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const TrainConfig& cfg);
  // Applies one update to every parameter with a gradient, then clears gradients.
  void step();
  void zero_grad();
  std::size_t steps() const { return steps_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  TrainConfig cfg_;
  std::size_t steps_ = 0;
};

// Right-pads sentences to the longest in the group.
TokenBatch make_batch(std::span<const LabeledSequence* const> sentences);

// Word-level tags predicted from first-subtoken argmax, IOB2-repaired.
std::vector<std::vector<std::string>> predict_tags(const SLModel& model, std::span<const LabeledSequence> sentences,
                                                   const std::vector<std::string>& label_vocabulary,
                                                   const LayerMaskConfig& masks, std::size_t r,
                                                   std::size_t batch_size = 32);

F1Result evaluate(const SLModel& model, std::span<const LabeledSequence> sentences,
                  const std::vector<std::string>& label_vocabulary, const LayerMaskConfig& masks, std::size_t r,
                  std::size_t batch_size = 32);

struct RunManifest {
  std::string task;
  TrainConfig config;
  nlohmann::json model_config;
  bool lora = false;
  std::size_t trainable_parameters = 0;
  std::vector<double> train_loss;  // mean per epoch
  std::vector<double> valid_f1;    // per epoch
  std::size_t best_epoch = 0;      // 1-indexed
  double best_valid_f1 = 0.0;
  F1Result test;
  std::vector<double> epoch_seconds;
  double total_seconds = 0.0;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  // {task}_{strategy}_r{r}_L{exit}_s{seed}.json, exit "full" without early exit.
  std::string file_name() const;
  RunMetrics metrics() const;
};

// Prepares a model for fine-tuning: early exit and, when requested, LoRA
// adapters on the query, key, value and output projections plus a fresh head.
void configure_for_finetune(SLModel& model, const TrainConfig& cfg, bool lora, std::size_t n_labels);

// Fine-tunes on split.train, selects the epoch with the best validation
// micro-F1, restores its weights and scores split.test.
RunManifest train_sl(SLModel& model, const DatasetSplit& split, const TrainConfig& cfg);

struct PretrainReport {
  std::vector<double> losses;  // one per update
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

struct LmExample {
  std::vector<std::int64_t> ids;
  std::size_t target_begin = 1;  // first position whose token is predicted
};

// Next-token training on all-causal, full-depth passes. Throws
// TrainingDiverged when the loss is non-finite or stays above twice the
// initial loss for 100 consecutive updates.
PretrainReport pretrain_lm(SLModel& model, std::span<const LmExample> corpus, std::size_t steps,
                           const TrainConfig& cfg);

// Pretraining sequences: each sampled sentence tokenized and written
// `copies` times back to back. With copies_only, targets start at the second
// copy, so the loss measures copying alone.
std::vector<LmExample> build_lm_corpus(const Vocabulary& vocab, const SyntheticTaskParams& params, std::size_t count,
                                       std::size_t copies, std::uint64_t seed, bool copies_only = false);

// Runs `run` for each seed on up to `jobs` threads; results keep seed order.
std::vector<RunManifest> run_seeds(const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                                   const std::function<RunManifest(std::uint64_t)>& run);

}  // namespace bdlab
