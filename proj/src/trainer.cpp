#include "bdlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <atomic>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "bdlab/errors.hpp"

namespace bdlab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kMasked:
      return "masked";
    case Strategy::kRepeat:
      return "repeat";
    case Strategy::kFullUnmask:
      return "full_unmask";
    case Strategy::kMiddleUnmask:
      return "middle_unmask";
  }
  return "masked";
}

Strategy parse_strategy(const std::string& name) {
  for (auto s : {Strategy::kMasked, Strategy::kRepeat, Strategy::kFullUnmask, Strategy::kMiddleUnmask}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + name + "' (expected masked, repeat, full_unmask or middle_unmask)");
}

MaskStrategy mask_strategy(Strategy s) {
  switch (s) {
    case Strategy::kFullUnmask:
      return MaskStrategy::kFullUnmask;
    case Strategy::kMiddleUnmask:
      return MaskStrategy::kMiddleUnmask;
    default:
      return MaskStrategy::kMasked;
  }
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("betas must be in [0,1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0 || grad_accum == 0) throw ConfigError("batch_size and grad_accum must be positive");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (lora_rank == 0) throw ConfigError("lora_rank must be positive");
  if (lora_dropout < 0.0 || lora_dropout >= 1.0) throw ConfigError("lora_dropout must be in [0,1)");
  if (r > 0 && strategy != Strategy::kRepeat) {
    throw ConfigError("r = " + std::to_string(r) + " is only allowed with the repeat strategy, not " +
                      to_string(strategy));
  }
  if (exit_layer && *exit_layer < 2) throw ConfigError("exit_layer must be >= 2");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"grad_accum", c.grad_accum},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"max_len", c.max_len},
       {"lora_rank", c.lora_rank},
       {"lora_alpha", c.lora_alpha},
       {"lora_dropout", c.lora_dropout},
       {"strategy", to_string(c.strategy)},
       {"r", c.r},
       {"exit_layer", c.exit_layer ? nlohmann::json(*c.exit_layer) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"lr",         "beta1",     "beta2",     "eps",        "weight_decay",
                                           "batch_size", "grad_accum", "epochs",   "seed",       "max_len",
                                           "lora_rank",  "lora_alpha", "lora_dropout", "strategy", "r",
                                           "exit_layer"};
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown training config key '" + key + "'");
  }
  try {
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.max_len = j.value("max_len", c.max_len);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
    c.lora_dropout = j.value("lora_dropout", c.lora_dropout);
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.r = j.value("r", c.r);
    if (j.contains("exit_layer")) {
      const auto& e = j.at("exit_layer");
      c.exit_layer = e.is_null() ? std::nullopt : std::optional<std::size_t>(e.get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
}

void adamw_step(std::span<double> param, std::span<const double> grad, AdamState& state, const TrainConfig& cfg) {
  if (param.size() != grad.size()) {
    throw DimensionError("adamw_step: parameter has " + std::to_string(param.size()) + " values, gradient " +
                         std::to_string(grad.size()));
  }
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) throw DimensionError("adamw_step: optimizer state does not match parameter");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] *= decay;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {}

void AdamW::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.has_grad()) adamw_step(p.mutable_data(), p.grad(), states_[i], cfg_);
  }
  ++steps_;
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

TokenBatch make_batch(std::span<const LabeledSequence* const> sentences) {
  if (sentences.empty()) throw ContractError("make_batch needs at least one sentence");
  TokenBatch b;
  b.batch = sentences.size();
  for (const auto* s : sentences) b.length = std::max(b.length, s->token_ids.size());
  if (b.length == 0) throw ContractError("make_batch: sentences are not tokenized");
  b.ids.assign(b.batch * b.length, Vocabulary::kPad);
  b.pad.assign(b.batch * b.length, true);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto& s = *sentences[i];
    for (std::size_t t = 0; t < s.token_ids.size(); ++t) {
      b.ids[i * b.length + t] = s.token_ids[t];
      b.pad[i * b.length + t] = s.pad_flags.empty() ? false : s.pad_flags[t];
    }
  }
  return b;
}

std::vector<std::vector<std::string>> predict_tags(const SLModel& model, std::span<const LabeledSequence> sentences,
                                                   const std::vector<std::string>& label_vocabulary,
                                                   const LayerMaskConfig& masks, std::size_t r,
                                                   std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  NoGradGuard no_grad;
  std::vector<std::vector<std::string>> out;
  out.reserve(sentences.size());
  for (std::size_t begin = 0; begin < sentences.size(); begin += batch_size) {
    const std::size_t end = std::min(sentences.size(), begin + batch_size);
    std::vector<const LabeledSequence*> group;
    for (std::size_t i = begin; i < end; ++i) group.push_back(&sentences[i]);
    const TokenBatch batch = make_batch(group);
    const Tensor logits = model.forward_sl_batch(batch, masks, r);
    const std::size_t classes = logits.dim(2);
    if (classes != label_vocabulary.size()) {
      throw ConfigError("model predicts " + std::to_string(classes) + " labels, vocabulary has " +
                        std::to_string(label_vocabulary.size()));
    }
    const auto values = logits.data();
    for (std::size_t i = 0; i < group.size(); ++i) {
      const auto& s = *group[i];
      std::vector<std::string> tags;
      for (std::size_t t = 0; t < s.token_ids.size(); ++t) {
        if (!s.word_start[t]) continue;
        const double* row = values.data() + (i * batch.length + t) * classes;
        tags.push_back(label_vocabulary[static_cast<std::size_t>(std::max_element(row, row + classes) - row)]);
      }
      out.push_back(validate_iob2(tags, Iob2Mode::kRepair));
    }
  }
  return out;
}

F1Result evaluate(const SLModel& model, std::span<const LabeledSequence> sentences,
                  const std::vector<std::string>& label_vocabulary, const LayerMaskConfig& masks, std::size_t r,
                  std::size_t batch_size) {
  const auto predicted = predict_tags(model, sentences, label_vocabulary, masks, r, batch_size);
  std::vector<SpanSet> gold, pred;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    gold.push_back(extract_spans(sentences[i].labels));
    pred.push_back(extract_spans(predicted[i]));
  }
  return micro_f1(gold, pred);
}

namespace {

nlohmann::json f1_json(const F1Result& f) {
  return {{"tp", f.tp}, {"fp", f.fp}, {"fn", f.fn}, {"precision", f.precision}, {"recall", f.recall}, {"f1", f.f1}};
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
  nlohmann::json cfg = config;
  return {{"task", task},
          {"config", cfg},
          {"model_config", model_config},
          {"lora", lora},
          {"trainable_parameters", trainable_parameters},
          {"train_loss", train_loss},
          {"valid_f1", valid_f1},
          {"best_epoch", best_epoch},
          {"best_valid_f1", best_valid_f1},
          {"test", f1_json(test)},
          {"epoch_seconds", epoch_seconds},
          {"total_seconds", total_seconds}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.task = j.at("task").get<std::string>();
  m.config = j.at("config").get<TrainConfig>();
  m.model_config = j.value("model_config", nlohmann::json::object());
  m.lora = j.value("lora", false);
  m.trainable_parameters = j.value("trainable_parameters", std::size_t{0});
  m.train_loss = j.value("train_loss", std::vector<double>{});
  m.valid_f1 = j.value("valid_f1", std::vector<double>{});
  m.best_epoch = j.value("best_epoch", std::size_t{0});
  m.best_valid_f1 = j.value("best_valid_f1", 0.0);
  const auto& t = j.at("test");
  m.test = F1Result::from_counts(t.at("tp").get<std::size_t>(), t.at("fp").get<std::size_t>(),
                                 t.at("fn").get<std::size_t>());
  m.test.f1 = t.at("f1").get<double>();
  m.epoch_seconds = j.value("epoch_seconds", std::vector<double>{});
  m.total_seconds = j.value("total_seconds", 0.0);
  return m;
}

std::string RunManifest::file_name() const {
  const std::string exit = config.exit_layer ? std::to_string(*config.exit_layer) : "full";
  return task + "_" + to_string(config.strategy) + "_r" + std::to_string(config.r) + "_L" + exit + "_s" +
         std::to_string(config.seed) + ".json";
}

RunMetrics RunManifest::metrics() const {
  RunMetrics m;
  m.dataset = task;
  m.strategy = to_string(config.strategy);
  m.r = config.r;
  m.exit_layer = config.exit_layer;
  m.seed = config.seed;
  m.f1 = test;
  return m;
}

void configure_for_finetune(SLModel& model, const TrainConfig& cfg, bool lora, std::size_t n_labels) {
  cfg.validate();
  model.set_early_exit(cfg.exit_layer);
  if (lora) {
    model.attach_lora({LoraTarget::kQuery, LoraTarget::kKey, LoraTarget::kValue, LoraTarget::kOutput}, cfg.lora_rank,
                      cfg.lora_alpha, cfg.lora_dropout, mix(cfg.seed, 1));
    model.reset_classifier(n_labels, mix(cfg.seed, 2));
  } else if (model.config().n_labels != n_labels) {
    model.reset_classifier(n_labels, mix(cfg.seed, 2));
  }
}

namespace {

struct Snapshot {
  std::vector<std::vector<double>> values;
};

Snapshot snapshot(const std::vector<NamedParameter>& params) {
  Snapshot s;
  for (const auto& p : params) s.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

void restore(std::vector<NamedParameter>& params, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(s.values[i].begin(), s.values[i].end(), params[i].tensor.mutable_data().begin());
  }
}

}  // namespace

RunManifest train_sl(SLModel& model, const DatasetSplit& split, const TrainConfig& cfg) {
  cfg.validate();
  if (split.train.empty() || split.valid.empty() || split.test.empty()) {
    throw ContractError("train_sl needs non-empty train, valid and test splits");
  }
  if (model.early_exit() != cfg.exit_layer) throw ConfigError("model early exit does not match the training config");
  const auto start = Clock::now();
  const LayerMaskConfig masks = build_mask_config(mask_strategy(cfg.strategy), model.n_layers());
  const std::size_t r = cfg.r;
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    for (const auto& s : *part) {
      if (s.token_ids.size() > cfg.max_len || s.token_ids.size() * (r + 1) > model.config().max_len) {
        throw DimensionError("sentence of " + std::to_string(s.token_ids.size()) +
                             " tokens exceeds the length limit at r = " + std::to_string(r));
      }
    }
  }

  RunManifest manifest;
  manifest.task = split.name;
  manifest.config = cfg;
  manifest.model_config = model.config();
  manifest.lora = model.has_lora();

  auto params = model.trainable_parameters();
  manifest.trainable_parameters = model.trainable_parameter_count();
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  AdamW optimizer(tensors, cfg);

  // Per-sentence targets over token positions; only first subtokens count.
  struct Target {
    std::vector<int> labels;
    std::vector<bool> active;
  };
  std::vector<Target> targets;
  for (const auto& s : split.train) {
    Target t;
    std::size_t word = 0;
    for (std::size_t i = 0; i < s.token_ids.size(); ++i) {
      const bool first = s.word_start[i] && !s.pad_flags[i];
      t.active.push_back(first);
      t.labels.push_back(first ? static_cast<int>(split.label_id(s.labels[word])) : 0);
      if (s.word_start[i]) ++word;
    }
    targets.push_back(std::move(t));
  }

  std::vector<std::size_t> order(split.train.size());
  Snapshot best;
  std::size_t micro_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix(cfg.seed, 1000 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_total = 0.0;
    std::size_t loss_terms = 0;
    const std::size_t group = cfg.effective_batch();
    for (std::size_t g0 = 0; g0 < order.size(); g0 += group) {
      const std::size_t g1 = std::min(order.size(), g0 + group);
      std::size_t active_in_group = 0;
      for (std::size_t i = g0; i < g1; ++i) {
        const auto& a = targets[order[i]].active;
        active_in_group += static_cast<std::size_t>(std::count(a.begin(), a.end(), true));
      }
      if (active_in_group == 0) continue;
      double group_loss = 0.0;
      for (std::size_t b0 = g0; b0 < g1; b0 += cfg.batch_size) {
        const std::size_t b1 = std::min(g1, b0 + cfg.batch_size);
        std::vector<const LabeledSequence*> sentences;
        for (std::size_t i = b0; i < b1; ++i) sentences.push_back(&split.train[order[i]]);
        const TokenBatch batch = make_batch(sentences);
        std::vector<int> labels(batch.batch * batch.length, 0);
        std::vector<bool> active(batch.batch * batch.length, false);
        for (std::size_t i = 0; i < sentences.size(); ++i) {
          const auto& t = targets[order[b0 + i]];
          for (std::size_t p = 0; p < t.labels.size(); ++p) {
            labels[i * batch.length + p] = t.labels[p];
            active[i * batch.length + p] = t.active[p];
          }
        }
        if (std::none_of(active.begin(), active.end(), [](bool v) { return v; })) continue;
        DropoutStream stream(mix(cfg.seed, 1'000'000 + micro_step++));
        const RunMode mode{true, &stream};
        const Tensor logits = model.forward_sl_batch(batch, masks, r, mode);
        const Tensor loss =
            cross_entropy_sum(reshape(logits, {batch.batch * batch.length, logits.dim(2)}), labels, active,
                              static_cast<double>(active_in_group));
        const double value = loss.item();
        if (!std::isfinite(value)) {
          std::ostringstream msg;
          msg << "non-finite loss " << value << " at epoch " << epoch + 1 << ", update " << optimizer.steps() + 1
              << " (lr " << cfg.lr << ", strategy " << to_string(cfg.strategy) << ", r " << r << ")";
          throw TrainingDiverged(msg.str());
        }
        loss.backward();
        group_loss += value;
      }
      optimizer.step();
      loss_total += group_loss;
      ++loss_terms;
    }
    manifest.train_loss.push_back(loss_terms ? loss_total / static_cast<double>(loss_terms) : 0.0);

    const double f1 = evaluate(model, split.valid, split.label_vocabulary, masks, r).f1;
    manifest.valid_f1.push_back(f1);
    if (manifest.best_epoch == 0 || f1 > manifest.best_valid_f1) {
      manifest.best_epoch = epoch + 1;
      manifest.best_valid_f1 = f1;
      best = snapshot(params);
    }
    manifest.epoch_seconds.push_back(seconds_since(epoch_start));
  }
  if (manifest.best_epoch > 0) restore(params, best);
  manifest.test = evaluate(model, split.test, split.label_vocabulary, masks, r);
  manifest.total_seconds = seconds_since(start);
  return manifest;
}

PretrainReport pretrain_lm(SLModel& model, std::span<const LmExample> corpus, std::size_t steps,
                           const TrainConfig& cfg) {
  cfg.validate();
  PretrainReport report;
  if (steps == 0) return report;
  if (corpus.empty()) throw ContractError("pretrain_lm needs a non-empty corpus");
  for (const auto& ex : corpus) {
    if (ex.ids.size() < 2) throw ContractError("pretraining sequences need at least two tokens");
    if (ex.target_begin == 0 || ex.target_begin >= ex.ids.size()) {
      throw ContractError("pretraining target_begin must lie in [1, length)");
    }
    if (ex.ids.size() > model.config().max_len) throw DimensionError("pretraining sequence exceeds max_len");
  }
  const auto objective = SLModel::Objective::kLanguageModel;
  std::vector<Tensor> tensors;
  for (const auto& p : model.trainable_parameters(objective)) tensors.push_back(p.tensor);
  AdamW optimizer(tensors, cfg);
  const std::size_t vocab = model.config().vocab_size;

  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();
  std::size_t epoch = 0;
  std::size_t micro_step = 0;
  std::size_t above = 0;
  auto next_sequence = [&]() -> const LmExample& {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(mix(cfg.seed, 5000 + epoch++));
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return corpus[order[cursor++]];
  };

  for (std::size_t step = 0; step < steps; ++step) {
    // Draw the whole accumulation group first so the loss is normalised by its token count.
    std::vector<std::vector<const LmExample*>> micro(cfg.grad_accum);
    std::size_t active_total = 0;
    for (auto& m : micro) {
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        m.push_back(&next_sequence());
        active_total += m.back()->ids.size() - m.back()->target_begin;
      }
    }
    double step_loss = 0.0;
    for (const auto& m : micro) {
      TokenBatch batch;
      batch.batch = m.size();
      for (const auto* ex : m) batch.length = std::max(batch.length, ex->ids.size());
      batch.ids.assign(batch.batch * batch.length, Vocabulary::kPad);
      batch.pad.assign(batch.batch * batch.length, true);
      std::vector<int> labels(batch.batch * batch.length, 0);
      std::vector<bool> active(batch.batch * batch.length, false);
      for (std::size_t i = 0; i < m.size(); ++i) {
        const auto& ex = *m[i];
        for (std::size_t t = 0; t < ex.ids.size(); ++t) {
          batch.ids[i * batch.length + t] = ex.ids[t];
          batch.pad[i * batch.length + t] = false;
          if (t + 1 < ex.ids.size() && t + 1 >= ex.target_begin) {
            labels[i * batch.length + t] = static_cast<int>(ex.ids[t + 1]);
            active[i * batch.length + t] = true;
          }
        }
      }
      DropoutStream stream(mix(cfg.seed, 2'000'000 + micro_step++));
      const Tensor logits = model.forward_lm_batch(batch, RunMode{true, &stream});
      const Tensor loss = cross_entropy_sum(reshape(logits, {batch.batch * batch.length, vocab}), labels, active,
                                            static_cast<double>(active_total));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingDiverged("non-finite pretraining loss at update " + std::to_string(step + 1));
      }
      loss.backward();
      step_loss += value;
    }
    optimizer.step();
    report.losses.push_back(step_loss);
    if (step == 0) report.initial_loss = step_loss;
    above = step_loss > 2.0 * report.initial_loss ? above + 1 : 0;
    if (above >= 100) {
      throw TrainingDiverged("pretraining loss stayed above twice its initial value (" +
                             std::to_string(report.initial_loss) + ") for 100 updates, now " +
                             std::to_string(step_loss));
    }
  }
  report.final_loss = report.losses.back();
  return report;
}

std::vector<LmExample> build_lm_corpus(const Vocabulary& vocab, const SyntheticTaskParams& params, std::size_t count,
                                       std::size_t copies, std::uint64_t seed, bool copies_only) {
  if (copies == 0) throw ConfigError("copies must be >= 1");
  if (copies_only && copies < 2) throw ConfigError("copies_only needs at least two copies");
  std::vector<LmExample> out;
  out.reserve(count);
  for (const auto& words : sample_sentences(count, params, seed)) {
    const auto t = tokenize(words, vocab, params.chunk);
    LmExample ex;
    for (std::size_t c = 0; c < copies; ++c) ex.ids.insert(ex.ids.end(), t.ids.begin(), t.ids.end());
    ex.target_begin = copies_only ? t.ids.size() : 1;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<RunManifest> run_seeds(const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                                   const std::function<RunManifest(std::uint64_t)>& run) {
  std::vector<RunManifest> results(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        results[i] = run(seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, seeds.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace bdlab
