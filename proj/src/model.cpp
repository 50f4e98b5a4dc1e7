#include "bdlab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "bdlab/errors.hpp"
#include "bdlab/repetition.hpp"

namespace bdlab {

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if ((d_model / heads) % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
  if (n_layers == 0) throw ConfigError("n_layers must be >= 1");
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  if (n_labels == 0) throw ConfigError("n_labels must be positive");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0,1)");
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"heads", c.heads},
       {"n_layers", c.n_layers},     {"d_ff", c.d_ff},           {"rope_base", c.rope_base},
       {"dropout_p", c.dropout_p},   {"n_labels", c.n_labels},   {"max_len", c.max_len},
       {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known{"vocab_size", "d_model",  "heads",    "n_layers", "d_ff",
                                           "rope_base",  "dropout_p", "n_labels", "max_len",  "init_std"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.dropout_p = j.value("dropout_p", c.dropout_p);
    c.n_labels = j.value("n_labels", c.n_labels);
    c.max_len = j.value("max_len", c.max_len);
    c.init_std = j.value("init_std", c.init_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

std::pair<std::size_t, std::size_t> middle_unmask_interval(std::size_t n_layers) {
  if (n_layers < 6) {
    throw ConfigError("middle unmasking needs at least 6 layers, got " + std::to_string(n_layers));
  }
  std::size_t unmasked = n_layers / 3;
  unmasked -= unmasked % 2;
  const std::size_t half = n_layers / 2;
  return {half - 1 - unmasked / 2, half + unmasked / 2};
}

LayerMaskConfig build_mask_config(MaskStrategy strategy, std::size_t n_layers) {
  if (n_layers == 0) throw ConfigError("mask config needs at least one layer");
  LayerMaskConfig cfg;
  switch (strategy) {
    case MaskStrategy::kMasked:
      cfg.per_layer.assign(n_layers, LayerMask::kCausal);
      break;
    case MaskStrategy::kFullUnmask:
      cfg.per_layer.assign(n_layers, LayerMask::kBidirectional);
      break;
    case MaskStrategy::kMiddleUnmask: {
      const auto [lb, ub] = middle_unmask_interval(n_layers);
      cfg.per_layer.assign(n_layers, LayerMask::kCausal);
      for (std::size_t i = lb; i <= ub; ++i) cfg.per_layer[i] = LayerMask::kBidirectional;
      break;
    }
  }
  return cfg;
}

TokenBatch TokenBatch::single(std::vector<std::int64_t> ids, std::vector<bool> pad) {
  if (pad.size() != ids.size()) throw DimensionError("pad flags do not align with token ids");
  TokenBatch b;
  b.batch = 1;
  b.length = ids.size();
  b.ids = std::move(ids);
  b.pad = std::move(pad);
  return b;
}

namespace {

// Repeats each row's content back to back and moves its trailing padding to
// the end, so instance offsets follow the sentence and not its batch-mates.
// final_index[b * length + t] addresses the final-instance copy of position t
// in the flattened [batch * repeated_length] output.
struct RepeatedBatch {
  TokenBatch tokens;
  std::vector<std::int64_t> final_index;
  bool contiguous = true;  // no row had trailing padding
};

RepeatedBatch repeat_batch(const TokenBatch& batch, std::size_t r) {
  RepeatedBatch out;
  if (r == 0) {
    out.tokens = batch;
    return out;
  }
  const std::size_t k = r + 1;
  auto& t = out.tokens;
  t.batch = batch.batch;
  t.length = batch.length * k;
  t.ids.reserve(t.batch * t.length);
  t.pad.reserve(t.batch * t.length);
  out.final_index.reserve(batch.batch * batch.length);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::size_t row = b * batch.length;
    std::size_t content = batch.length;
    while (content > 0 && batch.pad[row + content - 1]) --content;
    if (content == 0) content = batch.length;  // an all-pad row is repeated as is
    out.contiguous = out.contiguous && content == batch.length;
    const std::span<const std::int64_t> ids(batch.ids.data() + row, content);
    const auto rep = repeat(ids, r);
    const std::vector<bool> flags(batch.pad.begin() + static_cast<std::ptrdiff_t>(row),
                                  batch.pad.begin() + static_cast<std::ptrdiff_t>(row + content));
    const auto rep_pad = repeat_flags(flags, r);
    t.ids.insert(t.ids.end(), rep.ids.begin(), rep.ids.end());
    t.pad.insert(t.pad.end(), rep_pad.begin(), rep_pad.end());
    const std::size_t tail = t.length - k * content;
    if (tail > 0) t.ids.insert(t.ids.end(), tail, batch.ids[row + content]);
    t.pad.insert(t.pad.end(), tail, true);
    const auto base = static_cast<std::int64_t>(b * t.length);
    for (std::size_t i = 0; i < batch.length; ++i) {
      // Content maps into the last instance; original pads map onto trailing pads.
      const std::size_t src = i < content ? r * content + i : k * content + (i - content);
      out.final_index.push_back(base + static_cast<std::int64_t>(src));
    }
  }
  return out;
}

Tensor padded_masks(std::size_t batch, std::size_t seq, const std::vector<bool>& pad, LayerMask kind) {
  const AttentionMask base = kind == LayerMask::kCausal ? causal_mask(seq) : bidirectional_mask(seq);
  std::vector<AttentionMask> masks;
  masks.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<bool> row(pad.begin() + static_cast<std::ptrdiff_t>(b * seq),
                          pad.begin() + static_cast<std::ptrdiff_t>((b + 1) * seq));
    masks.push_back(combine_padding(base, row));
  }
  return stack_masks(masks);
}

Tensor ones(std::size_t n, bool requires_grad) { return Tensor::full({n}, 1.0, requires_grad); }

}  // namespace

SLModel::SLModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const double std_out = config_.init_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  const std::size_t d = config_.d_model;
  embedding_ = gaussian({config_.vocab_size, d}, config_.init_std, rng, true);
  layers_.reserve(config_.n_layers);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    DecoderLayer layer;
    layer.attn_norm = ones(d, true);
    layer.attn.q.weight = gaussian({d, d}, config_.init_std, rng, true);
    layer.attn.k.weight = gaussian({d, d}, config_.init_std, rng, true);
    layer.attn.v.weight = gaussian({d, d}, config_.init_std, rng, true);
    layer.attn.o.weight = gaussian({d, d}, std_out, rng, true);
    layer.ffn_norm = ones(d, true);
    layer.ffn_in = gaussian({d, config_.d_ff}, config_.init_std, rng, true);
    layer.ffn_out = gaussian({config_.d_ff, d}, std_out, rng, true);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = ones(d, true);
  lm_head_ = gaussian({d, config_.vocab_size}, config_.init_std, rng, true);
  cls_head_ = gaussian({d, config_.n_labels}, config_.init_std, rng, true);
}

SLModel SLModel::clone() const {
  SLModel copy(config_, 0);
  copy.exit_layer_ = exit_layer_;
  if (lora_attached_) {
    copy.lora_attached_ = true;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& src = layers_[i].attn;
      auto& dst = copy.layers_[i].attn;
      for (auto [s, t] : {std::pair{&src.q, &dst.q}, {&src.k, &dst.k}, {&src.v, &dst.v}, {&src.o, &dst.o}}) {
        if (s->lora) {
          t->lora = *s->lora;
          t->lora->a = s->lora->a.clone(s->lora->a.requires_grad());
          t->lora->b = s->lora->b.clone(s->lora->b.requires_grad());
        }
      }
    }
  }
  const auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.mutable_data().begin());
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

std::size_t SLModel::active_layers() const { return exit_layer_ ? *exit_layer_ - 1 : layers_.size(); }

void SLModel::set_early_exit(std::optional<std::size_t> exit_layer) {
  if (exit_layer && (*exit_layer < 2 || *exit_layer > layers_.size())) {
    throw ConfigError("exit layer " + std::to_string(*exit_layer) + " outside [2, " +
                      std::to_string(layers_.size()) + "]");
  }
  exit_layer_ = exit_layer;
}

void SLModel::attach_lora(const std::set<LoraTarget>& targets, std::size_t rank, double alpha, double dropout_p,
                          std::uint64_t seed) {
  if (lora_attached_) throw ConfigError("LoRA adapters are already attached");
  if (targets.empty()) throw ConfigError("LoRA needs at least one target projection");
  if (rank == 0) throw ConfigError("LoRA rank must be positive");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("LoRA dropout must be in [0,1)");
  for (auto& p : parameters()) p.tensor.set_requires_grad(false);
  std::mt19937_64 rng(seed);
  for (auto& layer : layers_) {
    for (auto target : targets) {
      Linear* lin = nullptr;
      switch (target) {
        case LoraTarget::kQuery:
          lin = &layer.attn.q;
          break;
        case LoraTarget::kKey:
          lin = &layer.attn.k;
          break;
        case LoraTarget::kValue:
          lin = &layer.attn.v;
          break;
        case LoraTarget::kOutput:
          lin = &layer.attn.o;
          break;
      }
      LoraAdapter adapter;
      adapter.rank = rank;
      adapter.alpha = alpha;
      adapter.dropout_p = dropout_p;
      adapter.a = gaussian({lin->in_features(), rank}, 0.02, rng, true);
      adapter.b = Tensor::zeros({rank, lin->out_features()}, true);
      lin->lora = std::move(adapter);
    }
  }
  cls_head_.set_requires_grad(true);
  lora_attached_ = true;
}

void SLModel::reset_classifier(std::size_t n_labels, std::uint64_t seed) {
  if (n_labels == 0) throw ConfigError("n_labels must be positive");
  std::mt19937_64 rng(seed);
  config_.n_labels = n_labels;
  cls_head_ = gaussian({config_.d_model, n_labels}, config_.init_std, rng, true);
}

Tensor SLModel::embed(const TokenBatch& batch) const {
  if (batch.ids.size() != batch.batch * batch.length || batch.pad.size() != batch.ids.size()) {
    throw DimensionError("token batch buffers do not match [batch, length]");
  }
  return embedding(embedding_, batch.ids, {batch.batch, batch.length});
}

Tensor SLModel::run_layers(const Tensor& hidden, const std::vector<bool>& pad, const LayerMaskConfig& masks,
                           std::size_t depth, const RunMode& mode, AttentionCapture* capture) const {
  if (masks.size() != layers_.size()) {
    throw ConfigError("mask config has " + std::to_string(masks.size()) + " layers, model has " +
                      std::to_string(layers_.size()));
  }
  if (depth > layers_.size()) throw ConfigError("requested depth exceeds layer count");
  const std::size_t batch = hidden.dim(0);
  const std::size_t seq = hidden.dim(1);
  if (pad.size() != batch * seq) throw DimensionError("pad flags do not match hidden states");

  Tensor causal;
  Tensor bidirectional;
  const AttentionSettings settings{config_.heads, config_.rope_base};
  Tensor h = hidden;
  for (std::size_t i = 0; i < depth; ++i) {
    const auto& layer = layers_[i];
    Tensor& mask = masks.per_layer[i] == LayerMask::kCausal ? causal : bidirectional;
    if (!mask.defined()) mask = padded_masks(batch, seq, pad, masks.per_layer[i]);

    auto attn = attend_batch(mul(rms_normalize_lastdim(h), layer.attn_norm), layer.attn, mask, settings, mode);
    if (capture) capture->weights.push_back(attn.weights);
    h = add(h, dropout(attn.values, config_.dropout_p, mode.next_key(), mode.train));

    Tensor ff = gelu(matmul(mul(rms_normalize_lastdim(h), layer.ffn_norm), layer.ffn_in));
    ff = matmul(ff, layer.ffn_out);
    h = add(h, dropout(ff, config_.dropout_p, mode.next_key(), mode.train));
  }
  return h;
}

Tensor SLModel::classify(const Tensor& hidden) const {
  return matmul(mul(rms_normalize_lastdim(hidden), final_norm_), cls_head_);
}

Tensor SLModel::lm_logits(const Tensor& hidden) const {
  return matmul(mul(rms_normalize_lastdim(hidden), final_norm_), lm_head_);
}

Tensor SLModel::forward_sl_batch(const TokenBatch& batch, const LayerMaskConfig& masks, std::size_t r,
                                 const RunMode& mode, AttentionCapture* capture) const {
  if (batch.length > config_.max_len) {
    throw DimensionError("sequence length " + std::to_string(batch.length) + " exceeds maximum " +
                         std::to_string(config_.max_len));
  }
  if (cls_head_.dim(1) != config_.n_labels) throw ConfigError("classification head does not match n_labels");
  const RepeatedBatch repeated = repeat_batch(batch, r);
  const TokenBatch& tokens = repeated.tokens;
  Tensor logits = classify(run_layers(embed(tokens), tokens.pad, masks, active_layers(), mode, capture));
  if (repeated.contiguous) return extract_final_instance(logits, batch.length, r + 1, 1);
  const Tensor flat = reshape(logits, {tokens.batch * tokens.length, config_.n_labels});
  return embedding(flat, repeated.final_index, {batch.batch, batch.length});
}

Tensor SLModel::forward_sl(const std::vector<std::int64_t>& ids, const std::vector<bool>& pad_flags,
                           const LayerMaskConfig& masks, std::size_t r, const RunMode& mode,
                           AttentionCapture* capture) const {
  const auto batch = TokenBatch::single(ids, pad_flags);
  Tensor logits = forward_sl_batch(batch, masks, r, mode, capture);
  return reshape(logits, {ids.size(), config_.n_labels});
}

Tensor SLModel::forward_lm_batch(const TokenBatch& batch, const RunMode& mode) const {
  const auto masks = build_mask_config(MaskStrategy::kMasked, layers_.size());
  Tensor h = run_layers(embed(batch), batch.pad, masks, layers_.size(), mode, nullptr);
  return lm_logits(h);
}

Tensor SLModel::forward_lm(const std::vector<std::int64_t>& ids, const std::vector<bool>& pad_flags,
                           const RunMode& mode) const {
  Tensor logits = forward_lm_batch(TokenBatch::single(ids, pad_flags), mode);
  return reshape(logits, {ids.size(), config_.vocab_size});
}

std::vector<NamedParameter> SLModel::parameters() const {
  std::vector<NamedParameter> out;
  out.push_back({"embedding", embedding_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "attn_norm", l.attn_norm});
    for (auto [name, lin] : {std::pair{"q", &l.attn.q}, {"k", &l.attn.k}, {"v", &l.attn.v}, {"o", &l.attn.o}}) {
      out.push_back({p + name + ".weight", lin->weight});
      if (lin->lora) {
        out.push_back({p + name + ".lora_a", lin->lora->a});
        out.push_back({p + name + ".lora_b", lin->lora->b});
      }
    }
    out.push_back({p + "ffn_norm", l.ffn_norm});
    out.push_back({p + "ffn_in", l.ffn_in});
    out.push_back({p + "ffn_out", l.ffn_out});
  }
  out.push_back({"final_norm", final_norm_});
  out.push_back({"lm_head", lm_head_});
  out.push_back({"cls_head", cls_head_});
  return out;
}

std::vector<NamedParameter> SLModel::trainable_parameters(Objective objective) const {
  const std::size_t depth = objective == Objective::kLanguageModel ? layers_.size() : active_layers();
  std::vector<NamedParameter> out;
  for (auto& p : parameters()) {
    if (!p.tensor.requires_grad()) continue;
    if (p.name.starts_with("layers.")) {
      const std::size_t idx = std::stoul(p.name.substr(7));
      if (idx >= depth) continue;
    }
    if (objective == Objective::kTokenClassification && p.name == "lm_head") continue;
    if (objective == Objective::kLanguageModel && p.name == "cls_head") continue;
    out.push_back(p);
  }
  return out;
}

std::size_t SLModel::trainable_parameter_count(Objective objective) const {
  std::size_t total = 0;
  for (const auto& p : trainable_parameters(objective)) total += p.tensor.numel();
  return total;
}

void SLModel::copy_weights_from(const SLModel& other) {
  std::map<std::string, Tensor> source;
  for (auto& p : other.parameters()) source.emplace(p.name, p.tensor);
  for (auto& p : parameters()) {
    auto it = source.find(p.name);
    if (it == source.end() || it->second.shape() != p.tensor.shape()) continue;
    std::copy(it->second.data().begin(), it->second.data().end(), p.tensor.mutable_data().begin());
  }
}

// Checkpoint layout: "BDLAB1\n", u64 little-endian header length, JSON header,
// then every tensor's float64 values (little-endian) in header order.
void SLModel::save(const std::filesystem::path& path, const nlohmann::json& metadata) const {
  nlohmann::json header;
  header["format"] = kCheckpointMagic;
  header["config"] = config_;
  header["exit_layer"] = exit_layer_ ? nlohmann::json(*exit_layer_) : nlohmann::json(nullptr);
  header["metadata"] = metadata;
  nlohmann::json lora = nullptr;
  for (const auto& layer : layers_) {
    for (auto [name, lin] : {std::pair{"q", &layer.attn.q}, {"k", &layer.attn.k}, {"v", &layer.attn.v},
                             {"o", &layer.attn.o}}) {
      if (!lin->lora) continue;
      if (lora.is_null()) {
        lora = {{"rank", lin->lora->rank},
                {"alpha", lin->lora->alpha},
                {"dropout_p", lin->lora->dropout_p},
                {"targets", nlohmann::json::array()}};
      }
      if (&layer == &layers_.front()) lora["targets"].push_back(name);
    }
  }
  header["lora"] = lora;
  nlohmann::json tensors = nlohmann::json::array();
  const auto params = parameters();
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"requires_grad", p.tensor.requires_grad()}});
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out << kCheckpointMagic << '\n';
  const std::uint64_t len = text.size();
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian host");
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::pair<SLModel, nlohmann::json> SLModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw std::runtime_error("not a " + std::string(kCheckpointMagic) + " checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);

  SLModel model(header.at("config").get<ModelConfig>(), 0);
  if (!header.at("lora").is_null()) {
    const auto& l = header["lora"];
    std::set<LoraTarget> targets;
    for (const auto& t : l.at("targets")) {
      const auto s = t.get<std::string>();
      targets.insert(s == "q" ? LoraTarget::kQuery : s == "k" ? LoraTarget::kKey : s == "v" ? LoraTarget::kValue : LoraTarget::kOutput);
    }
    model.attach_lora(targets, l.at("rank").get<std::size_t>(), l.at("alpha").get<double>(),
                      l.at("dropout_p").get<double>(), 0);
  }
  if (!header.at("exit_layer").is_null()) model.set_early_exit(header["exit_layer"].get<std::size_t>());

  std::map<std::string, Tensor> by_name;
  for (auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second.shape() != shape) {
      throw std::runtime_error("checkpoint tensor '" + name + "' does not fit the model");
    }
    auto dst = it->second.mutable_data();
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    it->second.set_requires_grad(entry.at("requires_grad").get<bool>());
  }
  if (!in) throw std::runtime_error("truncated checkpoint data in " + path.string());
  return {std::move(model), header.at("metadata")};
}

}  // namespace bdlab
