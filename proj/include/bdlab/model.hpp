#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/attention.hpp"
#include "bdlab/linear.hpp"
#include "bdlab/tensor.hpp"

namespace bdlab {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t n_layers = 12;
  std::size_t d_ff = 256;
  double rope_base = 10000.0;
  double dropout_p = 0.0;  // residual dropout, train mode only
  std::size_t n_labels = 2;
  std::size_t max_len = 256;
  double init_std = 0.02;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class LayerMask { kCausal, kBidirectional };

struct LayerMaskConfig {
  std::vector<LayerMask> per_layer;

  std::size_t size() const { return per_layer.size(); }
};

enum class MaskStrategy { kMasked, kFullUnmask, kMiddleUnmask };

// Inclusive [lb, ub] of 0-based layer indices unmasked by middle unmasking:
// N_u = floor(N/3) rounded down to even, lb = N/2 - 1 - N_u/2, ub = N/2 + N_u/2.
std::pair<std::size_t, std::size_t> middle_unmask_interval(std::size_t n_layers);

LayerMaskConfig build_mask_config(MaskStrategy strategy, std::size_t n_layers);

enum class LoraTarget { kQuery, kKey, kValue, kOutput };

struct DecoderLayer {
  Tensor attn_norm;  // [d_model]
  AttentionParams attn;
  Tensor ffn_norm;  // [d_model]
  Tensor ffn_in;    // [d_model, d_ff]
  Tensor ffn_out;   // [d_ff, d_model]
};

// Right-padded token batch. ids and pad are row-major [batch, length].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int64_t> ids;
  std::vector<bool> pad;

  static TokenBatch single(std::vector<std::int64_t> ids, std::vector<bool> pad);
};

// Per-layer attention weights recorded during a forward pass.
struct AttentionCapture {
  std::vector<Tensor> weights;  // one [batch, heads, seq, seq] per evaluated layer
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class SLModel {
 public:
  SLModel(ModelConfig config, std::uint64_t seed);

  // Parameters are shared handles, so copies must be explicit.
  SLModel(const SLModel&) = delete;
  SLModel& operator=(const SLModel&) = delete;
  SLModel(SLModel&&) = default;
  SLModel& operator=(SLModel&&) = default;
  SLModel clone() const;

  const ModelConfig& config() const { return config_; }
  std::size_t n_layers() const { return layers_.size(); }

  // Number of decoder layers a forward pass evaluates.
  std::size_t active_layers() const;

  // Layers 1..L-1 (1-indexed) are used and the head reads the hidden state
  // after layer L-1. std::nullopt restores full depth.
  void set_early_exit(std::optional<std::size_t> exit_layer);
  std::optional<std::size_t> early_exit() const { return exit_layer_; }

  // Freezes all base weights and adds LoRA adapters to the chosen attention
  // projections of every layer. Only adapters and the classification head stay trainable.
  void attach_lora(const std::set<LoraTarget>& targets, std::size_t rank, double alpha, double dropout_p,
                   std::uint64_t seed);
  bool has_lora() const { return lora_attached_; }

  // Replaces the classification head with a freshly initialised one.
  void reset_classifier(std::size_t n_labels, std::uint64_t seed);

  // Token-classification logits [n, n_labels] for the final instance of the
  // input repeated r times.
  Tensor forward_sl(const std::vector<std::int64_t>& ids, const std::vector<bool>& pad_flags,
                    const LayerMaskConfig& masks, std::size_t r, const RunMode& mode = {},
                    AttentionCapture* capture = nullptr) const;

  // Batched form: logits [batch, length, n_labels].
  Tensor forward_sl_batch(const TokenBatch& batch, const LayerMaskConfig& masks, std::size_t r,
                          const RunMode& mode = {}, AttentionCapture* capture = nullptr) const;

  // Next-token logits [n, vocab] under causal masking at full depth.
  Tensor forward_lm(const std::vector<std::int64_t>& ids, const std::vector<bool>& pad_flags,
                    const RunMode& mode = {}) const;
  Tensor forward_lm_batch(const TokenBatch& batch, const RunMode& mode = {}) const;

  // Pipeline stages, exposed for sensitivity analysis.
  Tensor embed(const TokenBatch& batch) const;  // [batch, length, d_model]
  Tensor run_layers(const Tensor& hidden, const std::vector<bool>& pad, const LayerMaskConfig& masks,
                    std::size_t depth, const RunMode& mode, AttentionCapture* capture) const;
  Tensor classify(const Tensor& hidden) const;  // final norm + classification head

  enum class Objective { kTokenClassification, kLanguageModel };

  std::vector<NamedParameter> parameters() const;
  // Parameters that receive updates for the objective: requires_grad and
  // reachable under the current early exit.
  std::vector<NamedParameter> trainable_parameters(Objective objective = Objective::kTokenClassification) const;
  std::size_t trainable_parameter_count(Objective objective = Objective::kTokenClassification) const;

  DecoderLayer& layer(std::size_t index) { return layers_.at(index); }
  const DecoderLayer& layer(std::size_t index) const { return layers_.at(index); }
  Tensor& classifier() { return cls_head_; }

  void save(const std::filesystem::path& path, const nlohmann::json& metadata = nlohmann::json::object()) const;
  static std::pair<SLModel, nlohmann::json> load(const std::filesystem::path& path);

  // Copies every parameter value from `other` with the same name and shape.
  void copy_weights_from(const SLModel& other);

 private:
  Tensor lm_logits(const Tensor& hidden) const;

  ModelConfig config_;
  Tensor embedding_;
  std::vector<DecoderLayer> layers_;
  Tensor final_norm_;
  Tensor lm_head_;
  Tensor cls_head_;
  std::optional<std::size_t> exit_layer_;
  bool lora_attached_ = false;
};

inline constexpr const char* kCheckpointMagic = "BDLAB1";

}  // namespace bdlab
