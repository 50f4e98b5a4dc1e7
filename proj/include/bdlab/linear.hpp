#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>

#include "bdlab/tensor.hpp"

namespace bdlab {

// Hands out distinct dropout keys in call order, so a forward pass with a
// fixed seed reproduces every mask.
class DropoutStream {
 public:
  explicit DropoutStream(std::uint64_t seed) : seed_(seed) {}
  DropoutKey next() { return DropoutKey{seed_, counter_++}; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

struct RunMode {
  bool train = false;
  DropoutStream* dropout = nullptr;  // required when train is set and any p > 0

  DropoutKey next_key() const { return dropout ? dropout->next() : DropoutKey{}; }
};

// Low-rank update added to a frozen projection:
//   y = x W + (alpha / rank) * dropout(x) A B
// B starts at zero, so a fresh adapter leaves the projection unchanged.
struct LoraAdapter {
  std::size_t rank = 16;
  double alpha = 16.0;
  double dropout_p = 0.1;
  Tensor a;  // [d_in, rank]
  Tensor b;  // [rank, d_out]

  double scaling() const { return alpha / static_cast<double>(rank); }
};

// Bias-free projection x -> x W with W: [d_in, d_out].
struct Linear {
  Tensor weight;
  std::optional<LoraAdapter> lora;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x, const RunMode& mode = {}) const;
};

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad);

}  // namespace bdlab
