#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "bdlab_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(BDLAB_CLI) + " " + args + " > " + (kWork / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string last_output() {
  std::ifstream in(kWork / "last.log");
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  return nlohmann::json::parse(in);
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
  fs::create_directories(kWork);
  const auto path = kWork / name;
  std::ofstream(path) << j.dump(2);
  return path;
}

nlohmann::json tiny_config(const std::string& out) {
  return {{"task", {{"name", "leftcontext"}, {"n_sentences", 100}, {"seed", 3}}},
          {"model", {{"d_model", 16}, {"heads", 2}, {"n_layers", 6}, {"d_ff", 32}}},
          {"train", {{"epochs", 1}, {"lr", 3e-3}}},
          {"pretrain", {{"steps", 5}, {"corpus_size", 50}, {"batch_size", 4}}},
          {"seeds", {1, 2}},
          {"out_dir", (kWork / out).string()}};
}

}  // namespace

TEST_CASE("pretrain exit codes") {
  fs::remove_all(kWork);
  const auto good = write_config("good.json", tiny_config("pre"));
  CHECK(run("pretrain --config " + good.string()) == 0);
  CHECK(fs::exists(kWork / "pre" / "base.bin"));
  CHECK(read_json(kWork / "pre" / "base.json").at("losses").size() == 5);

  std::ofstream(kWork / "bad.json") << "{\"task\": ";
  CHECK(run("pretrain --config " + (kWork / "bad.json").string()) == 2);
  CHECK(last_output().find("malformed JSON") != std::string::npos);

  auto unknown = tiny_config("pre");
  unknown["trian"] = nlohmann::json::object();
  CHECK(run("pretrain --config " + write_config("unknown.json", unknown).string()) == 2);
  CHECK(run("pretrain --config " + (kWork / "missing.json").string()) == 2);

  auto wild = tiny_config("wild");
  wild["pretrain"] = {{"steps", 400}, {"corpus_size", 50}, {"batch_size", 4}, {"lr", 10.0}};
  CHECK(run("pretrain --config " + write_config("wild.json", wild).string()) == 3);
}

TEST_CASE("finetune flags") {
  const auto cfg = write_config("ft.json", tiny_config("ft"));
  const std::string base = "finetune --config " + cfg.string() + " --seed 7 ";

  SUBCASE("repeat r=4 is recorded in the manifest") {
    REQUIRE(run(base + "--strategy repeat --r 4") == 0);
    const auto m = read_json(kWork / "ft" / "leftcontext_repeat_r4_Lfull_s7.json");
    CHECK(m.at("config").at("r") == 4);
    CHECK(m.at("config").at("strategy") == "repeat");
    CHECK(m.at("experiment").at("task").at("name") == "leftcontext");
    CHECK(fs::exists(kWork / "ft" / "leftcontext_repeat_r4_Lfull_s7.bin"));
  }
  SUBCASE("masked equals repeat with r=0") {
    REQUIRE(run(base + "--strategy masked") == 0);
    REQUIRE(run(base + "--strategy repeat --r 0") == 0);
    const auto a = read_json(kWork / "ft" / "leftcontext_masked_r0_Lfull_s7.json");
    const auto b = read_json(kWork / "ft" / "leftcontext_repeat_r0_Lfull_s7.json");
    CHECK(a.at("valid_f1") == b.at("valid_f1"));
    CHECK(a.at("train_loss") == b.at("train_loss"));
    CHECK(a.at("test") == b.at("test"));
  }
  SUBCASE("repeated invocations write identical manifests apart from timing") {
    REQUIRE(run(base + "--strategy middle_unmask --exit-layer 5") == 0);
    auto first = read_json(kWork / "ft" / "leftcontext_middle_unmask_r0_L5_s7.json");
    REQUIRE(run(base + "--strategy middle_unmask --exit-layer 5") == 0);
    auto second = read_json(kWork / "ft" / "leftcontext_middle_unmask_r0_L5_s7.json");
    for (auto* j : {&first, &second}) {
      j->erase("epoch_seconds");
      j->erase("total_seconds");
    }
    CHECK(first == second);
  }
  SUBCASE("illegal combinations exit 2") {
    CHECK(run(base + "--strategy full_unmask --r 1") == 2);
    CHECK(last_output().find("full_unmask") != std::string::npos);
    CHECK(run(base + "--strategy sideways") == 2);
    CHECK(run(base + "--exit-layer 9") == 2);
    CHECK(run(base + "--base " + (kWork / "nope.bin").string()) == 2);
  }
  SUBCASE("BDLAB_OUT overrides the configured directory, --out overrides both") {
    const auto env_dir = kWork / "env_out";
    REQUIRE(run("--help") == 0);
    const std::string env = "BDLAB_OUT=" + env_dir.string() + " ";
    const int status = std::system((env + BDLAB_CLI + " " + base + "> /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(fs::exists(env_dir / "leftcontext_masked_r0_Lfull_s7.json"));
    const auto flag_dir = kWork / "flag_out";
    const int status2 = std::system((env + BDLAB_CLI + " " + base + "--out " + flag_dir.string() + " > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(status2) == 0);
    CHECK(fs::exists(flag_dir / "leftcontext_masked_r0_Lfull_s7.json"));
  }
}

TEST_CASE("finetune from a pretrained base with LoRA") {
  const auto cfg = write_config("lora.json", tiny_config("lora"));
  REQUIRE(run("pretrain --config " + cfg.string()) == 0);
  REQUIRE(run("finetune --config " + cfg.string() + " --seed 4 --base " + (kWork / "lora" / "base.bin").string()) == 0);
  const auto m = read_json(kWork / "lora" / "leftcontext_masked_r0_Lfull_s4.json");
  CHECK(m.at("lora") == true);
  // Mismatched vocabulary: a base built for a different chunk size.
  auto other = tiny_config("other");
  other["task"]["chunk"] = 1;
  REQUIRE(run("pretrain --config " + write_config("other.json", other).string()) == 0);
  CHECK(run("finetune --config " + cfg.string() + " --seed 4 --base " + (kWork / "other" / "base.bin").string()) == 2);
}

TEST_CASE("analyze-mask") {
  const auto out = kWork / "mask";
  REQUIRE(run("analyze-mask --n 3 --k 2 --out " + out.string()) == 0);
  const auto j = read_json(out / "attention_n3_k2.json");
  CHECK(j.at("share_bidirectional") == doctest::Approx(1.0 / 3.0));
  CHECK(j.at("causal_pattern_everywhere") == true);
  const auto& first = j.at("blocks").at(0).at(0).at("classes");
  CHECK(first == nlohmann::json::array({nlohmann::json::array({"LowerTriangular", "Zero"}),
                                       nlohmann::json::array({"Dense", "LowerTriangular"})}));
  std::ifstream csv(out / "attention_n3_k2.csv");
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  CHECK(line == "layer,head,query,key,weight");
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 12 * 4 * 6 * 6);

  REQUIRE(run("analyze-mask --n 4 --k 1 --out " + out.string()) == 0);
  CHECK(read_json(out / "attention_n4_k1.json").at("share_bidirectional") == 0.0);
  REQUIRE(run("analyze-mask --n 4 --k 4 --out " + out.string()) == 0);
  CHECK(read_json(out / "attention_n4_k4.json").at("share_bidirectional") == 0.6);
  CHECK(run("analyze-mask --n 100 --k 3 --out " + out.string()) == 2);
  CHECK(run("analyze-mask --n 3 --out " + out.string()) == 2);
}

TEST_CASE("profile") {
  const auto cfg = write_config("prof.json", tiny_config("prof"));
  REQUIRE(run("profile --config " + cfg.string() + " --exits 3,5 --reps 1,2 --repetitions 3 --warmup 1 --sentences 4") ==
          0);
  const auto j = read_json(kWork / "prof" / "profile.json");
  CHECK(j.at("exits") == nlohmann::json{3, 5});
  CHECK(j.at("speedup").size() == 2);
  CHECK(fs::exists(kWork / "prof" / "profile_speedup.csv"));
  CHECK(fs::exists(kWork / "prof" / "profile_model.csv"));
  CHECK(run("profile --config " + cfg.string() + " --exits 9 --repetitions 3") == 2);
  auto conll = tiny_config("prof");
  conll["task"] = {{"name", "conll"}, {"train", (kWork / "absent.conll").string()},
                   {"valid", (kWork / "absent.conll").string()}, {"test", (kWork / "absent.conll").string()}};
  CHECK(run("profile --config " + write_config("conll.json", conll).string()) == 2);
}

TEST_CASE("report") {
  const auto dir = kWork / "report";
  fs::create_directories(dir);
  auto manifest = [&](const std::string& strategy, int r, int seed, double f1) {
    nlohmann::json j = {{"task", "lookahead"},
                        {"config", {{"strategy", strategy}, {"r", r}, {"seed", seed}}},
                        {"test", {{"tp", 1}, {"fp", 0}, {"fn", 0}, {"f1", f1}}}};
    std::ofstream(dir / ("m_" + strategy + std::to_string(r) + "_" + std::to_string(seed) + ".json")) << j.dump();
  };
  const double values[] = {0.81, 0.82, 0.83, 0.84, 0.85};
  for (int s = 0; s < 5; ++s) {
    manifest("repeat", 1, s, values[s]);
    manifest("masked", 0, s, 0.5);
  }
  REQUIRE(run("report --runs " + dir.string()) == 0);
  std::ifstream csv(dir / "report.csv");
  std::string header, row1, row2;
  std::getline(csv, header);
  std::getline(csv, row1);
  std::getline(csv, row2);
  CHECK(header == "task,strategy,r,exit_layer,seeds,mean_f1,ci95,best");
  CHECK(row1 == "lookahead,masked,0,full,5,0.5,0,0");
  CHECK(row2.rfind("lookahead,repeat,1,full,5,", 0) == 0);
  CHECK(row2.back() == '1');
  std::stringstream fields(row2.substr(26));
  double mean = 0.0, ci = 0.0;
  char comma = 0;
  fields >> mean >> comma >> ci;
  CHECK(mean == doctest::Approx(0.83).epsilon(1e-12));
  // t(0.975, 4) * sd / sqrt(5), sd = sqrt(0.001 / 4).
  CHECK(ci == doctest::Approx(2.7764451051977987 * std::sqrt(0.001 / 4.0) / std::sqrt(5.0)).epsilon(1e-9));
  std::ifstream md(dir / "report.md");
  std::stringstream mds;
  mds << md.rdbuf();
  CHECK(mds.str().find("**83.00 ± 1.96**") != std::string::npos);

  manifest("full_unmask", 0, 0, 0.9);
  CHECK(run("report --runs " + dir.string()) == 2);
  CHECK(last_output().find("lookahead/full_unmask/r0/Lfull") != std::string::npos);
  CHECK(run("report --runs " + (kWork / "nowhere").string()) == 2);
}
