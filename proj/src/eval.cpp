#include "bdlab/eval.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace bdlab {

F1Result F1Result::from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  F1Result r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  r.f1 = r.precision + r.recall == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

F1Result micro_f1(const std::vector<SpanSet>& gold, const std::vector<SpanSet>& pred) {
  if (gold.size() != pred.size()) {
    throw DimensionError("micro_f1: " + std::to_string(gold.size()) + " gold sentences vs " +
                         std::to_string(pred.size()) + " predicted");
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::size_t hit = 0;
    for (const auto& s : pred[i]) hit += gold[i].count(s);
    tp += hit;
    fp += pred[i].size() - hit;
    fn += gold[i].size() - hit;
  }
  F1Result r = F1Result::from_counts(tp, fp, fn);
  if (tp + fp + fn == 0) r.f1 = 1.0;
  return r;
}

double t_quantile_975(std::size_t degrees_of_freedom) {
  if (degrees_of_freedom == 0) throw ContractError("t quantile needs at least one degree of freedom");
  const boost::math::students_t dist(static_cast<double>(degrees_of_freedom));
  return boost::math::quantile(dist, 0.975);
}

SeedAggregate aggregate(const std::vector<double>& values) {
  if (values.size() < 2) throw ContractError("aggregate needs at least two values, got " + std::to_string(values.size()));
  SeedAggregate a;
  a.values = values;
  const double n = static_cast<double>(values.size());
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  a.ci_halfwidth = t_quantile_975(values.size() - 1) * sd / std::sqrt(n);
  return a;
}

ChanceCeiling causal_chance_oracle(const std::string& task, const SyntheticTaskParams& params,
                                   std::size_t sample_words) {
  if (task != "lookahead") throw ConfigError("chance oracle supports only the lookahead task, got \"" + task + "\"");
  const double p = params.trigger_p;
  if (p < 0.0 || p > 1.0) throw ConfigError("trigger probability must be in [0,1]");

  // Per non-final word: E[tp] = qp, E[fp] = q(1-p), E[fn] = (1-q)p.
  ChanceCeiling out;
  out.closed_form = -1.0;
  constexpr int kGrid = 1000;
  for (int i = 0; i <= kGrid; ++i) {
    const double q = static_cast<double>(i) / kGrid;
    const double tp = q * p;
    const double fp = q * (1.0 - p);
    const double fn = (1.0 - q) * p;
    const double denom = 2.0 * tp + fp + fn;
    const double f1 = denom == 0.0 ? 1.0 : 2.0 * tp / denom;
    if (f1 > out.closed_form) {
      out.closed_form = f1;
      out.best_rate = q;
    }
  }

  // Replay the winning strategy on sampled sentences, scored in ten chunks.
  constexpr std::size_t kChunks = 10;
  std::mt19937_64 rng(params.seed ^ 0x9e3779b97f4a7c15ULL);
  std::bernoulli_distribution predict(out.best_rate);
  std::vector<double> chunk_f1;
  std::size_t words = 0;
  std::uint64_t draw = params.seed;
  for (std::size_t c = 0; c < kChunks; ++c) {
    std::vector<SpanSet> gold, pred;
    std::size_t chunk_words = 0;
    while (chunk_words < (sample_words + kChunks - 1) / kChunks) {
      for (const auto& sent : sample_sentences(64, params, draw++)) {
        SpanSet g, q;
        for (std::size_t i = 0; i + 1 < sent.size(); ++i) {
          if (sent[i + 1] == kTrigger) g.insert({i, i, "NXT"});
          if (predict(rng)) q.insert({i, i, "NXT"});
        }
        gold.push_back(std::move(g));
        pred.push_back(std::move(q));
        chunk_words += sent.size();
      }
    }
    words += chunk_words;
    chunk_f1.push_back(micro_f1(gold, pred).f1);
  }
  const auto agg = aggregate(chunk_f1);
  out.empirical_mean = agg.mean;
  out.empirical_ci = agg.ci_halfwidth;
  out.sample_words = words;
  return out;
}

nlohmann::json RunMetrics::to_json() const {
  return {{"dataset", dataset},
          {"strategy", strategy},
          {"r", r},
          {"exit_layer", exit_layer ? nlohmann::json(*exit_layer) : nlohmann::json(nullptr)},
          {"seed", seed},
          {"f1", f1.f1},
          {"precision", f1.precision},
          {"recall", f1.recall}};
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string metrics_csv_header() { return "dataset,strategy,r,exit_layer,seed,f1,precision,recall"; }

std::string metrics_csv_row(const RunMetrics& m) {
  return m.dataset + "," + m.strategy + "," + std::to_string(m.r) + "," +
         (m.exit_layer ? std::to_string(*m.exit_layer) : std::string("full")) + "," + std::to_string(m.seed) + "," +
         format_real(m.f1.f1) + "," + format_real(m.f1.precision) + "," + format_real(m.f1.recall);
}

}  // namespace bdlab
