#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include <segcascade/nifti_io.hpp>

using namespace segcascade;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int status = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Pipeline : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / ("segcascade_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path write_config(const json& j, const std::string& name = "run.json") const {
    const auto p = dir / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  CliResult cli(const std::string& args) const {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string(SEGCASCADE_CLI) + " " + args + " --quiet > " + out.string() + " 2> " + err.string();
    CliResult r;
    const int raw = std::system(cmd.c_str());
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  CliResult cli(const std::string& command, const fs::path& config, const std::string& extra = "") const {
    return cli(command + " --config " + config.string() + (extra.empty() ? "" : " " + extra));
  }
};

json small_config(const std::string& arch = "cascade") {
  return {{"seed", 11},
          {"paths", {{"data_dir", "data"}, {"output_dir", "runs"}}},
          {"phantom", {{"extents", {8, 8, 8}}, {"p_cc", 0.4}, {"n_train", 40}, {"n_val", 4}}},
          {"network", {{"depth", 2}, {"base_width", 2}}},
          {"train", {{"epochs", 1}, {"batch_size", 8}}},
          {"folds", 5},
          {"architecture", arch}};
}

json error_of(const CliResult& r) { return json::parse(r.err.substr(0, r.err.find('\n'))); }

}  // namespace

TEST_F(Pipeline, ConfigErrorsAreMachineReadable) {
  auto r = cli("generate", dir / "absent.json");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_of(r).at("error"), "ConfigError");

  auto cfg = small_config();
  cfg["architecture"] = "unet";
  r = cli("generate", write_config(cfg));
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_of(r).at("error"), "ConfigError");
  EXPECT_NE(error_of(r).at("message").dump().find("unet"), std::string::npos);

  cfg = small_config();
  cfg["train"]["epochs"] = 0;
  EXPECT_EQ(error_of(cli("generate", write_config(cfg))).at("error"), "ConfigError");

  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(error_of(cli("generate", dir / "broken.json")).at("error"), "ConfigError");

  EXPECT_NE(cli("frobnicate --config x").status, 0);
}

TEST_F(Pipeline, GenerateThenEvaluateTruthAgainstItself) {
  const auto cfg = write_config(small_config());
  ASSERT_EQ(cli("generate", cfg).status, 0);
  const auto cohort = json::parse(slurp(dir / "data" / "cohort.json"));
  ASSERT_EQ(cohort.at("cases").size(), 44u);
  json pairs;
  for (const auto& c : cohort.at("cases")) {
    const auto truth = load_label_nifti(dir / "data" / c.at("truth").get<std::string>());
    EXPECT_EQ(c.at("has_cc").get<bool>(), count_value(truth, Label::CC) > 0);
    EXPECT_EQ(c.at("has_ed").get<bool>(), count_value(truth, Label::ED) > 0);
    pairs["cases"].push_back({{"case_id", c.at("case_id")},
                              {"prediction", "data/" + c.at("truth").get<std::string>()},
                              {"truth", "data/" + c.at("truth").get<std::string>()}});
  }
  std::ofstream(dir / "pairs.json") << pairs.dump();

  const auto r = cli("evaluate", cfg, "--manifest " + (dir / "pairs.json").string());
  ASSERT_EQ(r.status, 0) << r.err;
  const auto summary = json::parse(r.out);
  EXPECT_EQ(summary.at("n_cases"), 44);
  EXPECT_EQ(summary.at("columns"), json({"ET", "TC", "WT", "NETC", "CC", "ED"}));
  for (const auto& [name, region] : summary.at("regions").items()) {
    EXPECT_EQ(region.at("dice").get<double>(), 1.0) << name;
    EXPECT_EQ(region.at("lesionwise_dice").get<double>(), 1.0) << name;
  }
  EXPECT_TRUE(fs::exists(dir / "runs" / "evaluation" / "cascade" / "cases.csv"));
  EXPECT_EQ(slurp(dir / "runs" / "evaluation" / "cascade" / "summary.json"), summary.dump(2) + "\n");
}

TEST_F(Pipeline, PredictBeforeTrainIsMissingArtifact) {
  const auto cfg = write_config(small_config());
  auto r = cli("predict", cfg);
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_of(r).at("error"), "MissingArtifact");
  ASSERT_EQ(cli("generate", cfg).status, 0);
  ASSERT_EQ(cli("normalize", cfg).status, 0);
  r = cli("predict", cfg);
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_of(r).at("error"), "MissingArtifact");
  EXPECT_EQ(cli("train", cfg).status, 0);
  r = cli("evaluate", cfg);  // no predictions yet
  EXPECT_EQ(r.status, 2);
}

TEST_F(Pipeline, CascadeEndToEnd) {
  const auto cfg = write_config(small_config());
  for (const char* cmd : {"generate", "normalize", "train", "predict", "evaluate"}) {
    const auto r = cli(cmd, cfg);
    ASSERT_EQ(r.status, 0) << cmd << ": " << r.err;
  }
  int checkpoints = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "runs" / "models"))
    if (e.path().filename().string().ends_with(".ckpt") && !e.path().filename().string().ends_with(".best.ckpt"))
      ++checkpoints;
  EXPECT_EQ(checkpoints, 15);
  for (const char* stage : {"resenc", "stage2a", "stage2b"})
    for (int f = 0; f < 5; ++f)
      EXPECT_TRUE(fs::exists(dir / "runs" / "models" / stage / ("fold_" + std::to_string(f) + ".ckpt"))) << stage;

  const auto pm = json::parse(slurp(dir / "runs" / "predictions" / "cascade" / "manifest.json"));
  ASSERT_EQ(pm.at("cases").size(), 4u);
  for (const auto& c : pm.at("cases")) {
    const auto pred = load_label_nifti(dir / "runs" / "predictions" / "cascade" / c.at("prediction").get<std::string>());
    EXPECT_EQ(pred.extents(), (Index3{8, 8, 8}));
    const auto prov = json::parse(slurp(dir / "runs" / "predictions" / "cascade" / c.at("provenance").get<std::string>()));
    EXPECT_EQ(prov.at("stage2_prior_source"), "stage1_cross_validated");
  }

  // The empties table counts truth exactly as the cohort manifest flags it.
  const auto r = cli("report-empties", cfg);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto cohort = json::parse(slurp(dir / "data" / "cohort.json"));
  int cc_empty = 0, ed_empty = 0;
  for (const auto& c : cohort.at("cases"))
    if (c.at("split") == "val") {
      cc_empty += !c.at("has_cc").get<bool>();
      ed_empty += !c.at("has_ed").get<bool>();
    }
  std::istringstream lines(r.out);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "region pred_empty truth_empty");
  std::vector<std::string> names;
  while (std::getline(lines, line)) {
    std::istringstream f(line);
    std::string name, pred, truth;
    f >> name >> pred >> truth;
    names.push_back(name);
    EXPECT_TRUE(pred.ends_with("/4")) << line;
    if (name == "CC") EXPECT_EQ(truth, std::to_string(cc_empty) + "/4");
    if (name == "ED") EXPECT_EQ(truth, std::to_string(ed_empty) + "/4");
  }
  EXPECT_EQ(names, (std::vector<std::string>{"ET", "TC", "WT", "NETC", "CC", "ED"}));
  EXPECT_EQ(slurp(dir / "runs" / "evaluation" / "cascade" / "empties.txt"), r.out);

  // A config whose network no longer matches the checkpoints fails closed.
  auto wide = small_config();
  wide["network"]["base_width"] = 4;
  const auto e = cli("predict", write_config(wide, "wide.json"));
  EXPECT_EQ(e.status, 2);
  EXPECT_EQ(error_of(e).at("error"), "ConfigError");
}

TEST_F(Pipeline, RerunsAreByteIdentical) {
  auto cfg = small_config("resenc");
  cfg["phantom"]["n_train"] = 10;
  cfg["folds"] = 2;
  cfg["train"]["epochs"] = 2;
  // Same config in two workspaces; every artifact must match byte for byte.
  for (const char* ws : {"a", "b"}) {
    fs::create_directories(dir / ws);
    const auto c = write_config(cfg, std::string(ws) + "/run.json");
    for (const char* cmd : {"generate", "normalize", "train", "predict", "evaluate", "report-empties"})
      ASSERT_EQ(cli(cmd, c).status, 0) << cmd;
  }
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    ASSERT_TRUE(fs::exists(dir / "b" / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 100u);
}

TEST_F(Pipeline, LabelMapOption) {
  std::ofstream(dir / "bad_map.json") << R"({"1": "TC"})";
  const auto cfg = write_config(small_config());
  const auto r = cli("generate", cfg, "--label-map " + (dir / "bad_map.json").string());
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_of(r).at("error"), "ConfigError");
}
