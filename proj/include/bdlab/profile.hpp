#pragma once

// Inference timing of early exit x repetition cells against the full-depth,
// unrepeated base, plus a fitted analytic cost model for comparison.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/data.hpp"
#include "bdlab/model.hpp"

namespace bdlab {

struct ProfileOptions {
  std::vector<std::size_t> exits;  // 1-indexed exit layers
  std::vector<std::size_t> reps;   // repetition counts r
  std::size_t warmup = 3;
  std::size_t repetitions = 20;
  std::size_t max_sentences = 32;  // leading validation sentences timed per pass
  std::size_t batch_size = 32;
};

struct ProfileGrid {
  std::vector<std::size_t> exits;
  std::vector<std::size_t> reps;
  std::size_t n_layers = 0;
  double base_seconds = 0.0;                 // full depth, r = 0
  double calibration_seconds = 0.0;          // full depth, r = 1
  std::vector<std::vector<double>> seconds;  // [exit][rep], medians
  std::vector<std::vector<double>> speedup;  // base_seconds / seconds
  // Cost per sequence of length l through one layer: alpha*l + beta*l^2.
  double alpha = 0.0;
  double beta = 0.0;
  std::vector<std::vector<double>> model_speedup;

  // Strictly decreasing along r in every row and along later exits in every column.
  bool monotone() const;
  // Spearman rank correlation between measured and modelled speedups.
  double rank_correlation() const;

  std::string speedup_csv() const;
  std::string model_csv() const;
  nlohmann::json to_json() const;
};

// Exits at N*{9,14,19,24}/32 rounded to the nearest layer, kept in [2, N] and deduplicated.
std::vector<std::size_t> scaled_exits(std::size_t n_layers);

// Spearman correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Times forward_sl over the sentences for the base and every (exit, r) cell.
// Throws ContractError when there is nothing to time.
ProfileGrid profile_inference(const SLModel& model, std::span<const LabeledSequence> sentences,
                              const ProfileOptions& options);

// Restricts the calling thread to the CPU it is running on, where supported.
bool pin_to_current_cpu();

}  // namespace bdlab
