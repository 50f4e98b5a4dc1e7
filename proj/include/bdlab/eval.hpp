#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/data.hpp"

namespace bdlab {

struct F1Result {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  static F1Result from_counts(std::size_t tp, std::size_t fp, std::size_t fn);
};

// Exact (start, end, type) matching pooled over sentences. When both sides
// contain no spans at all, f1 is defined as 1.0.
F1Result micro_f1(const std::vector<SpanSet>& gold, const std::vector<SpanSet>& pred);

struct SeedAggregate {
  std::vector<double> values;
  double mean = 0.0;
  double ci_halfwidth = 0.0;  // 95%, Student t with n-1 degrees of freedom
};

SeedAggregate aggregate(const std::vector<double>& values);

// Two-sided 97.5% quantile of Student's t.
double t_quantile_975(std::size_t degrees_of_freedom);

struct ChanceCeiling {
  double closed_form = 0.0;  // optimum over the predict-rate sweep
  double best_rate = 0.0;    // predict-rate q attaining it
  double empirical_mean = 0.0;
  double empirical_ci = 0.0;
  std::size_t sample_words = 0;
};

// Best expected micro-F1 of a predictor that sees words up to position p (and
// the sentence length) on the lookahead task. Since the next word is
// independent of everything visible, the best such predictor labels each
// non-final word positive with some rate q; the sweep maximises over q. The
// winner is then replayed on a sampled corpus of at least `sample_words` words.
ChanceCeiling causal_chance_oracle(const std::string& task, const SyntheticTaskParams& params,
                                   std::size_t sample_words = 100000);

struct RunMetrics {
  std::string dataset;
  std::string strategy;
  std::size_t r = 0;
  std::optional<std::size_t> exit_layer;
  std::uint64_t seed = 0;
  F1Result f1;

  nlohmann::json to_json() const;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const RunMetrics& m);

// 17 significant digits, '.' decimal.
std::string format_real(double v);

}  // namespace bdlab
