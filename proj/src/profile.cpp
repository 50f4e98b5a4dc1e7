#include "bdlab/profile.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#ifdef __linux__
#include <sched.h>
#endif

#include "bdlab/errors.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/trainer.hpp"

namespace bdlab {

namespace {

using Clock = std::chrono::steady_clock;

struct Workload {
  std::vector<TokenBatch> batches;
};

Workload make_workload(std::span<const LabeledSequence> sentences, const ProfileOptions& options) {
  const std::size_t count = std::min(sentences.size(), options.max_sentences);
  if (count == 0) throw ContractError("profiling needs at least one sentence");
  Workload w;
  for (std::size_t b0 = 0; b0 < count; b0 += options.batch_size) {
    std::vector<const LabeledSequence*> group;
    for (std::size_t i = b0; i < std::min(count, b0 + options.batch_size); ++i) group.push_back(&sentences[i]);
    w.batches.push_back(make_batch(group));
  }
  return w;
}

double median_seconds(const SLModel& model, const Workload& work, const LayerMaskConfig& masks, std::size_t r,
                      const ProfileOptions& options) {
  NoGradGuard guard;
  auto pass = [&] {
    for (const auto& b : work.batches) model.forward_sl_batch(b, masks, r);
  };
  for (std::size_t i = 0; i < options.warmup; ++i) pass();
  std::vector<double> times;
  for (std::size_t i = 0; i < options.repetitions; ++i) {
    const auto start = Clock::now();
    pass();
    times.push_back(std::chrono::duration<double>(Clock::now() - start).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

// Sum over batches of rows * (a*len + b*len^2) for the repeated length.
std::pair<double, double> length_moments(const Workload& work, std::size_t r) {
  double lin = 0.0, quad = 0.0;
  for (const auto& b : work.batches) {
    const double len = static_cast<double>(b.length * (r + 1));
    lin += static_cast<double>(b.batch) * len;
    quad += static_cast<double>(b.batch) * len * len;
  }
  return {lin, quad};
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) out[idx[k]] = avg;
    i = j + 1;
  }
  return out;
}

std::string grid_csv(const ProfileGrid& g, const std::vector<std::vector<double>>& values) {
  std::ostringstream out;
  out << "exit_layer";
  for (auto r : g.reps) out << ",r=" << r;
  out << "\n";
  for (std::size_t i = 0; i < g.exits.size(); ++i) {
    out << g.exits[i];
    for (double v : values[i]) out << "," << format_real(v);
    out << "\n";
  }
  return out.str();
}

}  // namespace

bool ProfileGrid::monotone() const {
  for (std::size_t i = 0; i < exits.size(); ++i) {
    for (std::size_t j = 0; j < reps.size(); ++j) {
      if (j + 1 < reps.size() && !(speedup[i][j + 1] < speedup[i][j])) return false;
      if (i + 1 < exits.size() && !(speedup[i + 1][j] < speedup[i][j])) return false;
    }
  }
  return true;
}

double ProfileGrid::rank_correlation() const {
  std::vector<double> a, b;
  for (std::size_t i = 0; i < exits.size(); ++i) {
    a.insert(a.end(), speedup[i].begin(), speedup[i].end());
    b.insert(b.end(), model_speedup[i].begin(), model_speedup[i].end());
  }
  return spearman(a, b);
}

std::string ProfileGrid::speedup_csv() const { return grid_csv(*this, speedup); }
std::string ProfileGrid::model_csv() const { return grid_csv(*this, model_speedup); }

nlohmann::json ProfileGrid::to_json() const {
  return {{"exits", exits},
          {"reps", reps},
          {"n_layers", n_layers},
          {"base_seconds", base_seconds},
          {"calibration_seconds", calibration_seconds},
          {"seconds", seconds},
          {"speedup", speedup},
          {"alpha", alpha},
          {"beta", beta},
          {"model_speedup", model_speedup},
          {"monotone", monotone()},
          {"spearman", rank_correlation()}};
}

std::vector<std::size_t> scaled_exits(std::size_t n_layers) {
  if (n_layers < 2) throw ConfigError("early exit needs at least two layers");
  std::set<std::size_t> out;
  for (std::size_t paper : {9u, 14u, 19u, 24u}) {
    const auto l = static_cast<std::size_t>(std::lround(static_cast<double>(n_layers * paper) / 32.0));
    out.insert(std::clamp<std::size_t>(l, 2, n_layers));
  }
  return {out.begin(), out.end()};
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("spearman needs two equal-length series of >= 2");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

ProfileGrid profile_inference(const SLModel& model, std::span<const LabeledSequence> sentences,
                              const ProfileOptions& options) {
  if (options.exits.empty() || options.reps.empty()) throw ConfigError("profiling needs exits and reps");
  if (options.repetitions == 0) throw ConfigError("profiling needs at least one timed repetition");
  const Workload work = make_workload(sentences, options);
  SLModel m = model.clone();
  const std::size_t n = m.n_layers();
  const auto masks = build_mask_config(MaskStrategy::kMasked, n);

  ProfileGrid g;
  g.exits = options.exits;
  g.reps = options.reps;
  g.n_layers = n;
  m.set_early_exit(std::nullopt);
  g.base_seconds = median_seconds(m, work, masks, 0, options);
  g.calibration_seconds = median_seconds(m, work, masks, 1, options);

  for (auto exit : g.exits) {
    m.set_early_exit(exit);
    std::vector<double> row;
    for (auto r : g.reps) row.push_back(median_seconds(m, work, masks, r, options));
    g.seconds.push_back(std::move(row));
  }

  // Fit alpha, beta from the two full-depth timings:
  //   t_r = N * (alpha * lin_r + beta * quad_r), r in {0, 1}.
  const auto [l0, q0] = length_moments(work, 0);
  const auto [l1, q1] = length_moments(work, 1);
  const double t0 = g.base_seconds / static_cast<double>(n);
  const double t1 = g.calibration_seconds / static_cast<double>(n);
  const double det = l0 * q1 - l1 * q0;
  g.alpha = (t0 * q1 - t1 * q0) / det;
  g.beta = (l0 * t1 - l1 * t0) / det;
  if (g.beta < 0.0 || g.alpha < 0.0) {
    // Noisy calibration; fall back to the nearest non-negative fit.
    g.beta = std::max(0.0, g.beta);
    g.alpha = std::max(0.0, (t0 - g.beta * q0) / l0);
  }
  auto cost = [&](std::size_t layers, std::size_t r) {
    const auto [l, q] = length_moments(work, r);
    return static_cast<double>(layers) * (g.alpha * l + g.beta * q);
  };
  const double base_cost = cost(n, 0);
  for (std::size_t i = 0; i < g.exits.size(); ++i) {
    std::vector<double> measured, modelled;
    for (std::size_t j = 0; j < g.reps.size(); ++j) {
      measured.push_back(g.base_seconds / g.seconds[i][j]);
      modelled.push_back(base_cost / cost(g.exits[i] - 1, g.reps[j]));
    }
    g.speedup.push_back(std::move(measured));
    g.model_speedup.push_back(std::move(modelled));
  }
  return g;
}

bool pin_to_current_cpu() {
#ifdef __linux__
  const int cpu = sched_getcpu();
  if (cpu < 0) return false;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  return sched_setaffinity(0, sizeof(set), &set) == 0;
#else
  return false;
#endif
}

}  // namespace bdlab
