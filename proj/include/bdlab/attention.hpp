#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bdlab/linear.hpp"
#include "bdlab/tensor.hpp"

namespace bdlab {

// Additive attention mask: a [seq, seq] matrix whose entries are 0 (attend)
// or -inf (blocked). Row i is query position i.
struct AttentionMask {
  Tensor matrix;

  std::size_t size() const { return matrix.dim(0); }
  bool blocked(std::size_t query, std::size_t key) const;
};

AttentionMask causal_mask(std::size_t seq_len);
AttentionMask bidirectional_mask(std::size_t seq_len);

// Pad keys become unattendable for every non-pad query. A pad query attends
// only to itself, so no row is ever fully masked.
AttentionMask combine_padding(const AttentionMask& mask, const std::vector<bool>& pad_positions);

// Rotary embedding over the last dimension of a [..., seq, d_head] tensor.
// Feature pairs (2i, 2i+1) at position t rotate by t * base^(-2i / d_head).
Tensor rope_rotate(const Tensor& x, double base = 10000.0);

struct AttentionParams {
  Linear q;
  Linear k;
  Linear v;
  Linear o;
};

struct AttentionOutput {
  Tensor values;   // [seq, d_model], or [batch, seq, d_model] for batched calls
  Tensor weights;  // [heads, seq, seq], or [batch, heads, seq, seq]
};

struct AttentionSettings {
  std::size_t heads = 1;
  double rope_base = 10000.0;
};

// Multi-head scaled dot-product attention over one sequence x: [seq, d_model].
AttentionOutput attend(const Tensor& x, const AttentionParams& params, const AttentionMask& mask,
                       const AttentionSettings& settings, const RunMode& mode = {});

// Batched form. x: [batch, seq, d_model]; masks: [batch, seq, seq] additive.
AttentionOutput attend_batch(const Tensor& x, const AttentionParams& params, const Tensor& masks,
                             const AttentionSettings& settings, const RunMode& mode = {});

// Stacks per-sequence masks into a [batch, seq, seq] tensor.
Tensor stack_masks(std::span<const AttentionMask> masks);

}  // namespace bdlab
