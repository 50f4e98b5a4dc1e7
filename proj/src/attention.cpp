#include "bdlab/attention.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "bdlab/errors.hpp"

namespace bdlab {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

Tensor Linear::operator()(const Tensor& x, const RunMode& mode) const {
  Tensor y = matmul(x, weight);
  if (!lora) return y;
  const Tensor dropped = dropout(x, lora->dropout_p, mode.next_key(), mode.train);
  return add(y, scale(matmul(matmul(dropped, lora->a), lora->b), lora->scaling()));
}

bool AttentionMask::blocked(std::size_t query, std::size_t key) const {
  return matrix.at({query, key}) == kNegInf;
}

AttentionMask causal_mask(std::size_t seq_len) {
  if (seq_len == 0) throw ContractError("causal_mask needs seq_len >= 1");
  std::vector<double> m(seq_len * seq_len, 0.0);
  for (std::size_t i = 0; i < seq_len; ++i) {
    for (std::size_t j = i + 1; j < seq_len; ++j) m[i * seq_len + j] = kNegInf;
  }
  return {Tensor::from({seq_len, seq_len}, std::move(m))};
}

AttentionMask bidirectional_mask(std::size_t seq_len) {
  if (seq_len == 0) throw ContractError("bidirectional_mask needs seq_len >= 1");
  return {Tensor::zeros({seq_len, seq_len})};
}

AttentionMask combine_padding(const AttentionMask& mask, const std::vector<bool>& pad_positions) {
  const std::size_t n = mask.size();
  if (pad_positions.size() != n) {
    throw DimensionError("combine_padding: mask is " + std::to_string(n) + "x" + std::to_string(n) + " but " +
                         std::to_string(pad_positions.size()) + " pad flags given");
  }
  std::vector<double> m(mask.matrix.data().begin(), mask.matrix.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (pad_positions[i]) {
        m[i * n + j] = i == j ? 0.0 : kNegInf;
      } else if (pad_positions[j]) {
        m[i * n + j] = kNegInf;
      }
    }
  }
  return {Tensor::from({n, n}, std::move(m))};
}

Tensor stack_masks(std::span<const AttentionMask> masks) {
  if (masks.empty()) throw DimensionError("stack_masks needs at least one mask");
  const std::size_t n = masks[0].size();
  std::vector<double> m;
  m.reserve(masks.size() * n * n);
  for (const auto& mask : masks) {
    if (mask.size() != n) throw DimensionError("stack_masks: masks differ in size");
    m.insert(m.end(), mask.matrix.data().begin(), mask.matrix.data().end());
  }
  return Tensor::from({masks.size(), n, n}, std::move(m));
}

Tensor rope_rotate(const Tensor& x, double base) {
  if (x.rank() < 2) throw DimensionError("rope_rotate needs [..., seq, d_head], got " + shape_str(x.shape()));
  const std::size_t d = x.dim(-1);
  const std::size_t seq = x.dim(-2);
  if (d % 2 != 0) throw ConfigError("rope_rotate needs an even head dimension, got " + std::to_string(d));
  const std::size_t half = d / 2;
  auto cos_t = std::make_shared<std::vector<double>>(seq * half);
  auto sin_t = std::make_shared<std::vector<double>>(seq * half);
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      (*cos_t)[t * half + i] = std::cos(angle);
      (*sin_t)[t * half + i] = std::sin(angle);
    }
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  const auto src = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = r % seq;
    for (std::size_t i = 0; i < half; ++i) {
      const double c = (*cos_t)[t * half + i];
      const double s = (*sin_t)[t * half + i];
      const double x0 = src[r * d + 2 * i];
      const double x1 = src[r * d + 2 * i + 1];
      out[r * d + 2 * i] = x0 * c - x1 * s;
      out[r * d + 2 * i + 1] = x0 * s + x1 * c;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [cos_t, sin_t, rows, seq, d, half](detail::Node& self) {
    const auto& parent = self.parents[0];
    if (!parent->requires_grad) return;
    auto& g = parent->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t t = r % seq;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = (*cos_t)[t * half + i];
        const double s = (*sin_t)[t * half + i];
        const double g0 = self.grad[r * d + 2 * i];
        const double g1 = self.grad[r * d + 2 * i + 1];
        g[r * d + 2 * i] += g0 * c + g1 * s;
        g[r * d + 2 * i + 1] += -g0 * s + g1 * c;
      }
    }
  });
}

namespace {

// [batch, seq, seq] -> [batch, heads, seq, seq] constant copy.
Tensor expand_heads(const Tensor& masks, std::size_t heads) {
  const std::size_t batch = masks.dim(0);
  const std::size_t block = masks.numel() / batch;
  std::vector<double> out(batch * heads * block);
  const double* src = masks.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) std::copy_n(src + b * block, block, out.data() + (b * heads + h) * block);
  }
  return Tensor::from({batch, heads, masks.dim(1), masks.dim(2)}, std::move(out));
}

}  // namespace

AttentionOutput attend_batch(const Tensor& x, const AttentionParams& params, const Tensor& masks,
                             const AttentionSettings& settings, const RunMode& mode) {
  if (x.rank() != 3) throw DimensionError("attend_batch expects [batch, seq, d_model], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t seq = x.dim(1);
  const std::size_t d_model = x.dim(2);
  const std::size_t heads = settings.heads;
  if (heads == 0 || d_model % heads != 0) {
    throw DimensionError("d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  if (masks.shape() != Shape{batch, seq, seq}) {
    throw DimensionError("attention mask shape " + shape_str(masks.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  for (const Linear* lin : {&params.q, &params.k, &params.v, &params.o}) {
    if (lin->in_features() != d_model || lin->out_features() != d_model) {
      throw DimensionError("attention projection " + shape_str(lin->weight.shape()) + " does not match d_model " +
                           std::to_string(d_model));
    }
  }
  const std::size_t d_head = d_model / heads;

  auto split_heads = [&](const Tensor& t) {
    return transpose(reshape(t, {batch, seq, heads, d_head}), 1, 2);  // [batch, heads, seq, d_head]
  };
  const Tensor q = rope_rotate(split_heads(params.q(x, mode)), settings.rope_base);
  const Tensor k = rope_rotate(split_heads(params.k(x, mode)), settings.rope_base);
  const Tensor v = split_heads(params.v(x, mode));

  Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(d_head)));
  scores = add(scores, expand_heads(masks, heads));
  Tensor weights = softmax_lastdim(scores);
  Tensor context = reshape(transpose(matmul(weights, v), 1, 2), {batch, seq, d_model});
  return {params.o(context, mode), weights};
}

AttentionOutput attend(const Tensor& x, const AttentionParams& params, const AttentionMask& mask,
                       const AttentionSettings& settings, const RunMode& mode) {
  if (x.rank() != 2) throw DimensionError("attend expects [seq, d_model], got " + shape_str(x.shape()));
  if (mask.size() != x.dim(0)) {
    throw DimensionError("mask size " + std::to_string(mask.size()) + " does not match sequence length " +
                         std::to_string(x.dim(0)));
  }
  const std::size_t seq = x.dim(0);
  auto out = attend_batch(reshape(x, {1, seq, x.dim(1)}), params, reshape(mask.matrix, {1, seq, seq}), settings, mode);
  return {reshape(out.values, {seq, x.dim(1)}), reshape(out.weights, {settings.heads, seq, seq})};
}

}  // namespace bdlab
