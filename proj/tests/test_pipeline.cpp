#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "vaelasso/pipeline.hpp"

using namespace vaelasso;
using namespace vaelasso::pipeline;

namespace {

PipelineConfig tiny_config() {
  auto c = config_from_json(nlohmann::json::parse(R"({
    "master_seed": 99,
    "simulation": {"n_train": 150, "n_test": 30},
    "training": {"epochs": 3}
  })"));
  return c;
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("vaelasso_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    spdlog::set_level(spdlog::level::warn);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

std::size_t line_count(const fs::path& p) {
  const auto text = io::read_text(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST(Config, DefaultsMatchReferenceValues) {
  const auto c = default_config();
  EXPECT_EQ(c.simulation.n_train, 10000u);
  EXPECT_EQ(c.simulation.n_test, 2000u);
  EXPECT_EQ(c.lasso.lambdas, (std::vector<double>{0.0001, 0.002, 0.005, 0.008, 0.01, 0.1, 1.0}));
  EXPECT_EQ(c.simulation.seed, derive_seed(c.master_seed, "simulation"));
  EXPECT_NE(c.simulation.seed, c.training.seed);
}

TEST(Config, RoundTripThroughJson) {
  const auto c = tiny_config();
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, ExplicitSeedOverridesDerivation) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"simulation": {"seed": 5}})"));
  EXPECT_EQ(c.simulation.seed, 5u);
}

TEST(Config, FieldLevelErrors) {
  auto message = [](const char* text) {
    try {
      config_from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"simulation": {"n_train": 0}})").find("simulation.n_train"), std::string::npos);
  EXPECT_NE(message(R"({"training": {"bogus": 1}})").find("training.bogus"), std::string::npos);
  EXPECT_NE(message(R"({"lasso": {"lambdas": []}})").find("lasso.lambdas"), std::string::npos);
  EXPECT_NE(message(R"({"lasso": {"lambdas": [0.1, -1]}})").find("lasso.lambdas"), std::string::npos);
  EXPECT_NE(message(R"({"training": {"epochs": "ten"}})").find("training.epochs"), std::string::npos);
  EXPECT_NE(message(R"({"lasso": {"target_scaling": "zscore"}})").find("lasso.target_scaling"), std::string::npos);
}

TEST_F(PipelineTest, SimulateWritesDatasetsAndIsReproducible) {
  const auto cfg = tiny_config();
  auto a = cmd_simulate(cfg, dir_ / "a");
  auto b = cmd_simulate(cfg, dir_ / "b");
  EXPECT_EQ(line_count(a.train_csv), 151u);
  EXPECT_EQ(line_count(a.test_csv), 31u);
  EXPECT_EQ(RunManifest::load_or_create(dir_ / "a").checksums(), RunManifest::load_or_create(dir_ / "b").checksums());
  EXPECT_EQ(RunManifest::load_or_create(dir_ / "a").document().at("config").at("simulation").at("seed"),
            cfg.simulation.seed);
}

TEST_F(PipelineTest, EndToEndArtifactsAndDeterminism) {
  const auto cfg = tiny_config();
  const auto r = run_all(cfg, dir_ / "run1");
  run_all(cfg, dir_ / "run2");
  const auto m1 = RunManifest::load_or_create(dir_ / "run1");
  EXPECT_EQ(m1.checksums(), RunManifest::load_or_create(dir_ / "run2").checksums());

  // Every emitted file is listed.
  for (const auto& entry : fs::directory_iterator(dir_ / "run1")) {
    const auto name = entry.path().filename().string();
    if (name != RunManifest::kFileName) EXPECT_TRUE(m1.checksums().count(name)) << name;
  }

  EXPECT_EQ(line_count(r.train.history_csv), 1 + cfg.training.epochs);
  const auto latents = io::read_csv(r.latents_csv);
  EXPECT_EQ(latents.header.size(), 1 + 2 * cfg.training.architecture.latent_dim);
  EXPECT_EQ(latents.rows.size(), cfg.simulation.n_train);
  EXPECT_EQ(r.lasso.path.lambdas.size(), 7u);
  EXPECT_EQ(line_count(r.lasso.selection_csv), 1 + 9 * 7u);
  const auto metrics = nlohmann::json::parse(io::read_text(r.evaluate.metrics_json));
  EXPECT_TRUE(metrics.contains("mape_exclusion"));
  ASSERT_TRUE(r.report.overlay_csv_path.has_value());
  EXPECT_EQ(line_count(*r.report.overlay_csv_path), 1 + cfg.simulation.n_test * cfg.simulation.grid_points);

  const auto series = selection_from_csv(io::read_csv(r.lasso.selection_csv), "selection.csv");
  EXPECT_EQ(series, r.lasso.selection.series);
}

TEST_F(PipelineTest, ReportIsIdempotent) {
  const auto cfg = tiny_config();
  const auto r = run_all(cfg, dir_);
  const auto first = io::read_text(r.report.report_md);
  cmd_report(cfg, r.lasso.path_json, r.evaluate.metrics_json, dir_ / "again");
  EXPECT_EQ(io::read_text(dir_ / "again" / "report.md"), first);
}

TEST_F(PipelineTest, EmptyPathReportsNoCovariates) {
  lasso::LassoPathResult p;
  p.lambdas = {1.0};
  p.latent_dim = 1;
  p.column_names = {"snp"};
  p.group_of_column = {0};
  for (auto c : pksim::kCovariateNames) p.covariates.emplace_back(c);
  p.coefficients = {{lasso::VectorXd::Zero(1)}};
  p.intercepts = {{0.0}};
  p.converged = {{true}};
  p.iterations = {{1}};
  p.kkt = {{0.0}};
  p.target_offset = {0.0};
  p.target_scale = {1.0};
  p.importance = {std::vector<double>(9, 0.0)};
  io::write_text(dir_ / "path.json", lasso::to_json(p).dump());
  const auto out = cmd_report(tiny_config(), dir_ / "path.json", std::nullopt, dir_ / "rep");
  EXPECT_NE(io::read_text(out.report_md).find("No covariates retained"), std::string::npos);
}

TEST_F(PipelineTest, FitLassoJoinsOnSubjectId) {
  const auto cfg = tiny_config();
  const auto r = run_all(cfg, dir_);
  // Shuffle the dataset rows; coefficients must not change.
  auto table = io::read_csv(r.simulate.train_csv);
  std::mt19937 rng(1);
  std::shuffle(table.rows.begin(), table.rows.end(), rng);
  std::string text = io::join(table.header) + "\n";
  for (const auto& row : table.rows) text += io::join(row) + "\n";
  io::write_text(dir_ / "shuffled" / "train.csv", text);
  const auto again = cmd_fit_lasso(cfg, r.latents_csv, dir_ / "shuffled" / "train.csv", dir_ / "shuffled");
  EXPECT_EQ(lasso::to_json(again.path).dump(), lasso::to_json(r.lasso.path).dump());

  // Drop one dataset row: mismatch error, nothing written.
  table.rows.pop_back();
  text = io::join(table.header) + "\n";
  for (const auto& row : table.rows) text += io::join(row) + "\n";
  io::write_text(dir_ / "short.csv", text);
  EXPECT_THROW(cmd_fit_lasso(cfg, r.latents_csv, dir_ / "short.csv", dir_ / "mismatch"), InputError);
  EXPECT_FALSE(fs::exists(dir_ / "mismatch"));
}

TEST_F(PipelineTest, ValidationFailuresWriteNothing) {
  const auto cfg = tiny_config();
  const auto sim = cmd_simulate(cfg, dir_ / "data");
  EXPECT_THROW(cmd_train(cfg, dir_ / "missing.csv", dir_ / "t"), InputError);
  EXPECT_FALSE(fs::exists(dir_ / "t"));

  auto text = io::read_text(sim.train_csv);
  text.replace(text.find("alb"), 3, "alx");
  io::write_text(dir_ / "bad.csv", text);
  try {
    cmd_train(cfg, dir_ / "bad.csv", dir_ / "t");
    FAIL();
  } catch (const io::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("'alb'"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir_ / "t"));
  EXPECT_THROW(cmd_evaluate(cfg, dir_ / "nomodel.json", sim.test_csv, dir_ / "e"), InputError);
  EXPECT_FALSE(fs::exists(dir_ / "e"));
}

TEST_F(PipelineTest, EvaluateRejectsMismatchedGrid) {
  auto cfg = tiny_config();
  const auto r = cmd_train(cfg, cmd_simulate(cfg, dir_).train_csv, dir_);
  auto coarse = cfg;
  coarse.simulation.grid_points = 49;
  const auto other = cmd_simulate(coarse, dir_ / "coarse");
  EXPECT_THROW(cmd_evaluate(cfg, r.model_json, other.test_csv, dir_ / "e"), nn::ShapeError);
  EXPECT_FALSE(fs::exists(dir_ / "e"));
}
