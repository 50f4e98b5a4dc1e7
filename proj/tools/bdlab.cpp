#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bdlab/errors.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/experiment.hpp"
#include "bdlab/profile.hpp"
#include "bdlab/repetition.hpp"
#include "bdlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace bdlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

std::vector<std::size_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " list entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what + " list");
  return out;
}

ExperimentConfig load_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment_config(path);
}

fs::path out_dir_for(const ExperimentConfig& c, const std::string& flag) {
  return flag.empty() ? resolve_out_dir(c) : fs::path(flag);
}

struct PretrainArgs {
  std::string config, out, checkpoint;
  std::optional<std::size_t> steps;
};

int cmd_pretrain(const PretrainArgs& a) {
  auto c = load_or_default(a.config);
  if (a.steps) c.pretrain.steps = *a.steps;
  const auto split = build_split(c.task);
  PretrainReport report;
  const SLModel model = pretrain_base(c, split, &report);
  const fs::path dir = out_dir_for(c, a.out);
  const fs::path ckpt = a.checkpoint.empty() ? dir / "base.bin" : fs::path(a.checkpoint);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_base(model, split, ckpt, report);
  nlohmann::json summary = {{"config", c},
                            {"checkpoint", ckpt.string()},
                            {"initial_loss", report.initial_loss},
                            {"final_loss", report.final_loss},
                            {"losses", report.losses}};
  write_file(fs::path(ckpt).replace_extension(".json"), summary.dump(2) + "\n");
  std::cout << "pretrained " << report.losses.size() << " steps: loss " << report.initial_loss << " -> "
            << report.final_loss << "\nwrote " << ckpt.string() << "\n";
  return kExitOk;
}

struct FinetuneArgs {
  std::string config, out, base, strategy;
  std::optional<std::size_t> r, exit_layer, jobs, epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool no_lora = false;
};

int cmd_finetune(const FinetuneArgs& a) {
  auto c = load_or_default(a.config);
  TrainConfig t = c.train;
  if (!a.strategy.empty()) t.strategy = parse_strategy(a.strategy);
  if (a.r) t.r = *a.r;
  if (a.exit_layer) t.exit_layer = *a.exit_layer;
  if (a.epochs) t.epochs = *a.epochs;
  if (a.lr) t.lr = *a.lr;
  if (!a.base.empty()) c.base = a.base;
  if (a.no_lora) c.lora = false;
  if (a.jobs) c.jobs = *a.jobs;
  if (a.seed) c.seeds = {*a.seed};
  c.train = t;
  t.validate();

  const auto split = build_split(c.task);
  const auto mc = model_config_for(c, split);
  if (t.exit_layer && (*t.exit_layer < 2 || *t.exit_layer > mc.n_layers)) {
    throw ConfigError("--exit-layer must lie in [2, " + std::to_string(mc.n_layers) + "]");
  }
  std::optional<SLModel> base;
  if (!c.base.empty()) base.emplace(load_base(c.base, split));

  const fs::path dir = out_dir_for(c, a.out);
  fs::create_directories(dir);
  const nlohmann::json echoed = c;
  const auto manifests = run_seeds(c.seeds, std::max<std::size_t>(1, c.jobs), [&](std::uint64_t seed) {
    TrainConfig run = t;
    run.seed = seed;
    SLModel trained(mc, seed);
    auto m = finetune_run(c, split, base ? &*base : nullptr, run, &trained);
    nlohmann::json j = m.to_json();
    j["experiment"] = echoed;
    const fs::path file = dir / m.file_name();
    write_file(file, j.dump(2) + "\n");
    trained.save(fs::path(file).replace_extension(".bin"), {{"manifest", m.file_name()}});
    return m;
  });
  for (const auto& m : manifests) {
    std::cout << m.file_name() << ": best epoch " << m.best_epoch << ", valid F1 " << format_real(m.best_valid_f1)
              << ", test F1 " << format_real(m.test.f1) << "\n";
  }
  return kExitOk;
}

struct AnalyzeArgs {
  std::size_t n = 0, k = 0;
  std::uint64_t seed = 0;
  std::string model, out;
};

int cmd_analyze_mask(const AnalyzeArgs& a) {
  if (a.n == 0 || a.k == 0) throw ConfigError("--n and --k must be positive");
  std::optional<SLModel> model;
  if (!a.model.empty()) {
    if (!fs::exists(a.model)) throw ConfigError("checkpoint not found: " + a.model);
    model.emplace(SLModel::load(a.model).first);
  } else {
    ModelConfig toy;
    toy.vocab_size = 64;
    model.emplace(toy, a.seed);
  }
  const auto& cfg = model->config();
  if (a.n * a.k > cfg.max_len) {
    throw ConfigError("k*n = " + std::to_string(a.n * a.k) + " exceeds the maximum length " +
                      std::to_string(cfg.max_len));
  }
  std::mt19937_64 rng(a.seed);
  std::uniform_int_distribution<std::int64_t> pick(Vocabulary::kUnk + 1,
                                                   static_cast<std::int64_t>(cfg.vocab_size) - 1);
  std::vector<std::int64_t> ids(a.n);
  for (auto& id : ids) id = pick(rng);

  AttentionCapture capture;
  {
    NoGradGuard guard;
    model->forward_sl(ids, std::vector<bool>(a.n, false), build_mask_config(MaskStrategy::kMasked, model->n_layers()),
                      a.k - 1, RunMode{}, &capture);
  }
  const std::size_t len = a.n * a.k;
  std::ostringstream csv;
  csv << "layer,head,query,key,weight\n";
  nlohmann::json layers = nlohmann::json::array();
  bool all_causal = true;
  for (std::size_t l = 0; l < capture.weights.size(); ++l) {
    const auto& w = capture.weights[l];
    const std::size_t heads = w.shape()[1];
    nlohmann::json per_head = nlohmann::json::array();
    for (std::size_t h = 0; h < heads; ++h) {
      const double* base = w.data().data() + h * len * len;
      for (std::size_t q = 0; q < len; ++q) {
        for (std::size_t kk = 0; kk < len; ++kk) {
          csv << l << "," << h << "," << q << "," << kk << "," << format_real(base[q * len + kk]) << "\n";
        }
      }
      const Tensor one = Tensor::from({len, len}, std::vector<double>(base, base + len * len));
      const auto report = classify_blocks(one, a.n, a.k);
      all_causal = all_causal && report.matches_causal_pattern();
      auto j = report.to_json();
      j["layer"] = l;
      j["head"] = h;
      per_head.push_back(std::move(j));
    }
    layers.push_back(std::move(per_head));
  }
  const nlohmann::json summary = {{"n", a.n},
                                  {"k", a.k},
                                  {"share_bidirectional", bidirectional_share(a.k)},
                                  {"causal_pattern_everywhere", all_causal},
                                  {"blocks", layers}};
  const fs::path dir = a.out.empty() ? resolve_out_dir(ExperimentConfig{}) : fs::path(a.out);
  const std::string stem = "attention_n" + std::to_string(a.n) + "_k" + std::to_string(a.k);
  write_file(dir / (stem + ".csv"), csv.str());
  write_file(dir / (stem + ".json"), summary.dump(2) + "\n");
  std::cout << "share_bidirectional " << format_real(bidirectional_share(a.k)) << ", causal pattern "
            << (all_causal ? "holds" : "BROKEN") << " in every layer and head\nwrote " << (dir / stem).string()
            << ".{csv,json}\n";
  return kExitOk;
}

struct ProfileArgs {
  std::string config, out, base, exits, reps;
  std::size_t repetitions = 20, warmup = 3, sentences = 32;
};

int cmd_profile(const ProfileArgs& a) {
  const auto c = load_or_default(a.config);
  const auto split = build_split(c.task);
  if (split.valid.empty()) throw ConfigError("profiling needs a non-empty validation split");
  const std::string base = a.base.empty() ? c.base : a.base;
  SLModel model = base.empty() ? SLModel(model_config_for(c, split), c.train.seed) : load_base(base, split);

  ProfileOptions o;
  o.exits = a.exits.empty() ? scaled_exits(model.n_layers()) : parse_list(a.exits, "exit");
  o.reps = parse_list(a.reps, "rep");
  o.repetitions = a.repetitions;
  o.warmup = a.warmup;
  o.max_sentences = a.sentences;
  for (auto e : o.exits) {
    if (e < 2 || e > model.n_layers()) {
      throw ConfigError("exit " + std::to_string(e) + " outside [2, " + std::to_string(model.n_layers()) + "]");
    }
  }
  if (o.repetitions < 20) std::cerr << "warning: fewer than 20 timed repetitions\n";
  pin_to_current_cpu();
  const auto grid = profile_inference(model, split.valid, o);

  const fs::path dir = out_dir_for(c, a.out);
  write_file(dir / "profile_speedup.csv", grid.speedup_csv());
  write_file(dir / "profile_model.csv", grid.model_csv());
  auto j = grid.to_json();
  j["config"] = c;
  write_file(dir / "profile.json", j.dump(2) + "\n");
  std::cout << "measured speedup\n" << grid.speedup_csv() << "cost model\n" << grid.model_csv()
            << "monotone " << (grid.monotone() ? "yes" : "no") << ", spearman "
            << format_real(grid.rank_correlation()) << "\n";
  return kExitOk;
}

struct ReportArgs {
  std::string runs, out;
};

std::string cell_name(const RunMetrics& m) {
  return m.dataset + "/" + m.strategy + "/r" + std::to_string(m.r) + "/L" +
         (m.exit_layer ? std::to_string(*m.exit_layer) : "full");
}

int cmd_report(const ReportArgs& a) {
  if (!fs::is_directory(a.runs)) throw ConfigError("runs directory not found: " + a.runs);
  using Key = std::tuple<std::string, std::string, std::size_t, std::size_t>;
  std::map<Key, std::vector<RunMetrics>> cells;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.runs)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    std::ifstream in(path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("task") || !j.contains("config") || !j.contains("test")) {
      continue;
    }
    const auto m = RunManifest::from_json(j).metrics();
    cells[{m.dataset, m.strategy, m.r, m.exit_layer.value_or(0)}].push_back(m);
  }
  if (cells.empty()) throw ConfigError("no run manifests found in " + a.runs);
  for (const auto& [key, runs] : cells) {
    if (runs.size() < 2) {
      throw ConfigError("cell " + cell_name(runs.front()) + " has " + std::to_string(runs.size()) +
                        " seed; at least 2 are needed for a confidence interval");
    }
  }
  std::map<std::string, double> best;
  std::map<Key, SeedAggregate> stats;
  for (const auto& [key, runs] : cells) {
    std::vector<double> f1;
    for (const auto& m : runs) f1.push_back(m.f1.f1);
    stats[key] = aggregate(f1);
    auto [it, fresh] = best.emplace(std::get<0>(key), stats[key].mean);
    if (!fresh) it->second = std::max(it->second, stats[key].mean);
  }
  std::ostringstream csv, md;
  csv << "task,strategy,r,exit_layer,seeds,mean_f1,ci95,best\n";
  md << "| task | strategy | r | exit | seeds | test micro-F1 (mean ± 95% CI) |\n|---|---|---|---|---|---|\n";
  for (const auto& [key, runs] : cells) {
    const auto& s = stats[key];
    const bool is_best = s.mean == best[std::get<0>(key)];
    const auto& m = runs.front();
    const std::string exit = m.exit_layer ? std::to_string(*m.exit_layer) : "full";
    csv << m.dataset << "," << m.strategy << "," << m.r << "," << exit << "," << runs.size() << ","
        << format_real(s.mean) << "," << format_real(s.ci_halfwidth) << "," << (is_best ? 1 : 0) << "\n";
    std::ostringstream cellv;
    cellv.setf(std::ios::fixed);
    cellv.precision(2);
    cellv << 100.0 * s.mean << " ± " << 100.0 * s.ci_halfwidth;
    const std::string shown = is_best ? "**" + cellv.str() + "**" : cellv.str();
    md << "| " << m.dataset << " | " << m.strategy << " | " << m.r << " | " << exit << " | " << runs.size() << " | "
       << shown << " |\n";
  }
  const fs::path dir = a.out.empty() ? fs::path(a.runs) : fs::path(a.out);
  write_file(dir / "report.csv", csv.str());
  write_file(dir / "report.md", md.str());
  std::cout << md.str();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Decoder-only sequence labeling laboratory"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Pretrain a base model on the copy corpus and save a checkpoint");
  pre->add_option("--config", pa.config, "Experiment config JSON")->check(CLI::ExistingFile);
  pre->add_option("--steps", pa.steps, "Override pretrain.steps");
  pre->add_option("--out", pa.out, "Output directory");
  pre->add_option("--checkpoint", pa.checkpoint, "Checkpoint path (default <out>/base.bin)");

  FinetuneArgs fa;
  auto* fine = app.add_subcommand("finetune", "Fine-tune for sequence labeling and write run manifests");
  fine->add_option("--config", fa.config, "Experiment config JSON")->check(CLI::ExistingFile);
  fine->add_option("--strategy", fa.strategy, "masked | repeat | full_unmask | middle_unmask");
  fine->add_option("--r", fa.r, "Repetitions (repeat only)");
  fine->add_option("--exit-layer", fa.exit_layer, "1-indexed early-exit layer");
  fine->add_option("--seed", fa.seed, "Single seed (default: every configured seed)");
  fine->add_option("--base", fa.base, "Base checkpoint from pretrain");
  fine->add_flag("--no-lora", fa.no_lora, "Fine-tune all weights of the base");
  fine->add_option("--epochs", fa.epochs, "Override train.epochs");
  fine->add_option("--lr", fa.lr, "Override train.lr");
  fine->add_option("--jobs", fa.jobs, "Seed runs in parallel");
  fine->add_option("--out", fa.out, "Output directory");

  AnalyzeArgs aa;
  auto* ana = app.add_subcommand("analyze-mask", "Dump attention weights of a repeated input and classify blocks");
  ana->add_option("--n", aa.n, "Sentence length")->required();
  ana->add_option("--k", aa.k, "Instances (r + 1)")->required();
  ana->add_option("--model", aa.model, "Checkpoint (default: random toy model)");
  ana->add_option("--seed", aa.seed, "Seed for weights and token ids");
  ana->add_option("--out", aa.out, "Output directory");

  ProfileArgs pra;
  pra.reps = "1,2,4,8";
  auto* prof = app.add_subcommand("profile", "Time early exit x repetition cells against the base");
  prof->add_option("--config", pra.config, "Experiment config JSON")->check(CLI::ExistingFile);
  prof->add_option("--exits", pra.exits, "Comma-separated exit layers (default: depth-scaled 9,14,19,24 of 32)");
  prof->add_option("--reps", pra.reps, "Comma-separated repetition counts");
  prof->add_option("--base", pra.base, "Checkpoint to time (default: random weights)");
  prof->add_option("--repetitions", pra.repetitions, "Timed passes per cell");
  prof->add_option("--warmup", pra.warmup, "Untimed passes per cell");
  prof->add_option("--sentences", pra.sentences, "Validation sentences per pass");
  prof->add_option("--out", pra.out, "Output directory");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Mean and 95% CI of test micro-F1 per cell");
  rep->add_option("--runs", ra.runs, "Directory of run manifests")->required();
  rep->add_option("--out", ra.out, "Output directory (default: the runs directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*pre) return cmd_pretrain(pa);
    if (*fine) return cmd_finetune(fa);
    if (*ana) return cmd_analyze_mask(aa);
    if (*prof) return cmd_profile(pra);
    if (*rep) return cmd_report(ra);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingDiverged& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
