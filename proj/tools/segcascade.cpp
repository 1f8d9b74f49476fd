// segcascade <generate|normalize|train|predict|evaluate|report-empties> --config <path>

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <segcascade/pipeline.hpp>

namespace {

int fail(const std::string& code, const std::string& message, int status) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << '\n';
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace segcascade;
  CLI::App app{"Phantom-scale cascade segmentation pipeline"};
  app.require_subcommand(1, 1);

  std::string config_path, label_map_path, manifest_path, split = "val";
  int jobs = 0;
  bool quiet = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
    sub->add_option("--label-map", label_map_path, "JSON map from file label codes to BG/ET/NET/CC/ED");
    sub->add_option("--jobs", jobs, "Parallel workers (overrides the config)")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "Suppress progress messages");
  };
  auto* gen = app.add_subcommand("generate", "Write a phantom cohort and its manifest");
  auto* norm = app.add_subcommand("normalize", "Write peak-normalised copies and records");
  auto* tr = app.add_subcommand("train", "Train the fold models of the configured architecture");
  auto* pred = app.add_subcommand("predict", "Predict label volumes for a split");
  auto* eval = app.add_subcommand("evaluate", "Per-case CSV and cohort JSON summary");
  auto* emp = app.add_subcommand("report-empties", "Predicted versus truth empty-mask counts");
  for (auto* s : {gen, norm, tr, pred, eval, emp}) common(s);
  pred->add_option("--split", split, "train, val or all")->check(CLI::IsMember({"train", "val", "all"}));
  for (auto* s : {eval, emp}) s->add_option("--manifest", manifest_path, "Prediction/truth pair manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    Workspace ws{load_run_config(config_path), {}, Logger(quiet ? nullptr : &std::clog)};
    if (jobs > 0) ws.config.jobs = jobs;
    if (!label_map_path.empty()) ws.label_map = load_label_map(label_map_path);
    const std::optional<std::filesystem::path> manifest =
        manifest_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(manifest_path);

    if (gen->parsed()) cmd_generate(ws);
    else if (norm->parsed()) cmd_normalize(ws);
    else if (tr->parsed()) cmd_train(ws);
    else if (pred->parsed()) cmd_predict(ws, split);
    else if (eval->parsed()) {
      const auto s = cmd_evaluate(ws, manifest);
      std::cout << summary_json(s).dump(2) << '\n';
    } else if (emp->parsed()) {
      std::cout << cmd_report_empties(ws, manifest);
    }
  } catch (const Error& e) {
    return fail(to_string(e.code()), e.what(), 2);
  } catch (const std::exception& e) {
    return fail("InternalError", e.what(), 1);
  }
  return 0;
}
