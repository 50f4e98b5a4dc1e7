#pragma once

// Input-level sequence repetition and the block structure it induces in a
// causally masked attention matrix.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/tensor.hpp"

namespace bdlab {

struct RepeatedSequence {
  std::vector<std::int64_t> ids;  // k copies of the original, pads included
  std::size_t n = 0;              // original length
  std::size_t k = 1;              // instances, k = r + 1
  std::size_t r = 0;              // repetitions
};

RepeatedSequence repeat(std::span<const std::int64_t> ids, std::size_t r);

// Repeats each flag list the same way token ids are repeated.
std::vector<bool> repeat_flags(const std::vector<bool>& flags, std::size_t r);

// Fraction of contributing (non-zero) k x k blocks that are fully dense:
// (k(k+1)/2 - k) / (k(k+1)/2) = (k-1)/(k+1).
double bidirectional_share(std::size_t k);

enum class BlockClass { kDense, kLowerTriangular, kZero, kIrregular };

std::string to_string(BlockClass c);

struct BlockReport {
  std::size_t k = 1;
  std::size_t n = 1;
  std::vector<std::vector<BlockClass>> classes;  // [row block][column block]
  double share_bidirectional = 0.0;

  // True when block (i, j) is Zero above, LowerTriangular on, and Dense below the diagonal.
  bool matches_causal_pattern() const;
  nlohmann::json to_json() const;
};

// Scans the k^2 blocks of an [k*n, k*n] attention matrix. Entries with
// |w| < tol count as zero, all others as positive.
BlockReport classify_blocks(const Tensor& weights, std::size_t n, std::size_t k, double tol = 1e-300);

// Rows (k-1)*n .. k*n-1 along `axis`: the last instance.
Tensor extract_final_instance(const Tensor& per_position, std::size_t n, std::size_t k, int axis = 0);

}  // namespace bdlab
