#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "vaelasso/pipeline.hpp"

namespace fs = std::filesystem;
namespace pl = vaelasso::pipeline;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

int report_error(const std::string& command, const std::string& kind, const std::string& message, int code) {
  nlohmann::json err{{"error", {{"command", command}, {"kind", kind}, {"message", message}}}};
  std::cerr << err.dump() << std::endl;
  return code;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("vaelasso");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  // VAELASSO_LOG=debug|info|warn|error|off
  if (const char* level = std::getenv("VAELASSO_LOG")) {
    auto parsed = spdlog::level::from_str(level);
    if (parsed == spdlog::level::off && std::string(level) != "off")
      spdlog::warn("VAELASSO_LOG={} not recognized, keeping info", level);
    else
      spdlog::set_level(parsed);
  }
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Simulated PK profiles -> VAE latent space -> LASSO covariate selection"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON configuration file (defaults apply when omitted)");
    sub->add_option("--out", out_dir, "Output directory (overrides paths.out_dir)");
  };

  auto* simulate = app.add_subcommand("simulate", "Simulate training and test PK profiles");
  add_common(simulate);

  std::string train_csv;
  auto* train = app.add_subcommand("train", "Train the VAE on simulated profiles");
  add_common(train);
  train->add_option("--train", train_csv, "Training dataset CSV")->required();

  std::string model_json, test_csv;
  auto* evaluate = app.add_subcommand("evaluate", "Reconstruction metrics on held-out profiles");
  add_common(evaluate);
  evaluate->add_option("--model", model_json, "Trained model JSON")->required();
  evaluate->add_option("--test", test_csv, "Test dataset CSV")->required();

  std::string data_csv, latents_name = "latents.csv";
  auto* encode = app.add_subcommand("encode", "Encode profiles to latent means and log-variances");
  add_common(encode);
  encode->add_option("--model", model_json, "Trained model JSON")->required();
  encode->add_option("--data", data_csv, "Dataset CSV to encode")->required();
  encode->add_option("--name", latents_name, "Output file name inside --out");

  std::string latents_csv;
  auto* fit = app.add_subcommand("fit-lasso", "Fit LASSO paths from covariates to latent means");
  add_common(fit);
  fit->add_option("--latents", latents_csv, "Latent CSV from encode")->required();
  fit->add_option("--data", data_csv, "Dataset CSV with covariates for the same subjects")->required();
  fit->add_option("--model", model_json, "Optional model; adds a decode diagnostic");

  std::string path_json, metrics_json, recon_csv;
  auto* report = app.add_subcommand("report", "Write report.md and plot-ready series");
  add_common(report);
  report->add_option("--path", path_json, "path.json from fit-lasso")->required();
  report->add_option("--metrics", metrics_json, "metrics.json from evaluate");
  report->add_option("--reconstruction", recon_csv, "reconstruction.csv from evaluate");
  report->add_option("--test", test_csv, "Test dataset CSV for the overlay series");

  auto* run = app.add_subcommand("run", "Run every stage in sequence");
  add_common(run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("cli", "usage", e.what(), kExitValidation);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    pl::PipelineConfig cfg = config_path.empty() ? pl::default_config() : pl::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const fs::path out = cfg.out_dir;

    if (command == "simulate") {
      pl::cmd_simulate(cfg, out);
    } else if (command == "train") {
      pl::cmd_train(cfg, train_csv, out);
    } else if (command == "evaluate") {
      pl::cmd_evaluate(cfg, model_json, test_csv, out);
    } else if (command == "encode") {
      pl::cmd_encode(cfg, model_json, data_csv, out, latents_name);
    } else if (command == "fit-lasso") {
      pl::cmd_fit_lasso(cfg, latents_csv, data_csv, out, opt_path(model_json));
    } else if (command == "report") {
      pl::cmd_report(cfg, path_json, opt_path(metrics_json), out, opt_path(recon_csv), opt_path(test_csv));
    } else if (command == "run") {
      pl::run_all(cfg, out);
    }
    spdlog::info("{} finished; outputs in {}", command, out.string());
    return 0;
  } catch (const std::invalid_argument& e) {
    return report_error(command, "validation", e.what(), kExitValidation);
  } catch (const vaelasso::io::ParseError& e) {
    return report_error(command, "parse", e.what(), kExitValidation);
  } catch (const pl::InputError& e) {
    return report_error(command, "input", e.what(), kExitValidation);
  } catch (const std::exception& e) {
    return report_error(command, "runtime", e.what(), kExitRuntime);
  }
}
