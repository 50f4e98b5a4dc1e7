#include "bdlab/repetition.hpp"

#include <cmath>

#include "bdlab/errors.hpp"

namespace bdlab {

RepeatedSequence repeat(std::span<const std::int64_t> ids, std::size_t r) {
  if (ids.empty()) throw ContractError("repeat needs a non-empty sequence");
  RepeatedSequence out;
  out.n = ids.size();
  out.r = r;
  out.k = r + 1;
  out.ids.reserve(out.k * out.n);
  for (std::size_t i = 0; i < out.k; ++i) out.ids.insert(out.ids.end(), ids.begin(), ids.end());
  return out;
}

std::vector<bool> repeat_flags(const std::vector<bool>& flags, std::size_t r) {
  std::vector<bool> out;
  out.reserve(flags.size() * (r + 1));
  for (std::size_t i = 0; i <= r; ++i) out.insert(out.end(), flags.begin(), flags.end());
  return out;
}

double bidirectional_share(std::size_t k) {
  if (k == 0) throw ContractError("bidirectional_share needs k >= 1");
  return static_cast<double>(k - 1) / static_cast<double>(k + 1);
}

std::string to_string(BlockClass c) {
  switch (c) {
    case BlockClass::kDense:
      return "Dense";
    case BlockClass::kLowerTriangular:
      return "LowerTriangular";
    case BlockClass::kZero:
      return "Zero";
    case BlockClass::kIrregular:
      return "Irregular";
  }
  return "Irregular";
}

bool BlockReport::matches_causal_pattern() const {
  if (classes.size() != k) return false;
  for (std::size_t i = 0; i < k; ++i) {
    if (classes[i].size() != k) return false;
    for (std::size_t j = 0; j < k; ++j) {
      const BlockClass want = i < j ? BlockClass::kZero : i == j ? BlockClass::kLowerTriangular : BlockClass::kDense;
      if (classes[i][j] != want) return false;
    }
  }
  return true;
}

nlohmann::json BlockReport::to_json() const {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& row : classes) {
    nlohmann::json r = nlohmann::json::array();
    for (auto c : row) r.push_back(to_string(c));
    grid.push_back(std::move(r));
  }
  return {{"k", k}, {"n", n}, {"classes", std::move(grid)}, {"share_bidirectional", share_bidirectional}};
}

BlockReport classify_blocks(const Tensor& weights, std::size_t n, std::size_t k, double tol) {
  if (weights.rank() != 2 || weights.dim(0) != weights.dim(1)) {
    throw DimensionError("classify_blocks needs a square matrix, got " + shape_str(weights.shape()));
  }
  if (n == 0 || k == 0 || weights.dim(0) != n * k) {
    throw DimensionError("classify_blocks: size " + std::to_string(weights.dim(0)) + " is not k*n = " +
                         std::to_string(k) + "*" + std::to_string(n));
  }
  const std::size_t seq = n * k;
  const auto w = weights.data();
  BlockReport report;
  report.k = k;
  report.n = n;
  report.share_bidirectional = bidirectional_share(k);
  report.classes.assign(k, std::vector<BlockClass>(k, BlockClass::kIrregular));
  for (std::size_t bi = 0; bi < k; ++bi) {
    for (std::size_t bj = 0; bj < k; ++bj) {
      bool all_zero = true;
      bool all_positive = true;
      bool upper_zero = true;
      bool lower_has_positive = false;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const bool positive = std::abs(w[(bi * n + i) * seq + bj * n + j]) >= tol;
          all_zero = all_zero && !positive;
          all_positive = all_positive && positive;
          if (j > i) {
            upper_zero = upper_zero && !positive;
          } else {
            lower_has_positive = lower_has_positive || positive;
          }
        }
      }
      BlockClass c = BlockClass::kIrregular;
      const bool lower_tri = upper_zero && lower_has_positive;
      if (all_zero) {
        c = BlockClass::kZero;
      } else if (lower_tri && all_positive) {
        // Only possible for n == 1, where the two shapes coincide.
        c = bi == bj ? BlockClass::kLowerTriangular : BlockClass::kDense;
      } else if (lower_tri) {
        c = BlockClass::kLowerTriangular;
      } else if (all_positive) {
        c = BlockClass::kDense;
      }
      report.classes[bi][bj] = c;
    }
  }
  return report;
}

Tensor extract_final_instance(const Tensor& per_position, std::size_t n, std::size_t k, int axis) {
  if (n == 0 || k == 0 || per_position.dim(axis) != n * k) {
    throw DimensionError("extract_final_instance: axis length " + std::to_string(per_position.dim(axis)) +
                         " is not k*n = " + std::to_string(k) + "*" + std::to_string(n));
  }
  if (k == 1) return per_position;
  return slice(per_position, axis, (k - 1) * n, k * n);
}

}  // namespace bdlab
