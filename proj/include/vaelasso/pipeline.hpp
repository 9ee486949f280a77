#pragma once

// End-to-end orchestration: configuration, stage commands, run manifest and
// report emission. Every command loads and validates all of its inputs before
// it writes anything.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "vaelasso/io.hpp"
#include "vaelasso/lasso.hpp"
#include "vaelasso/pksim.hpp"
#include "vaelasso/rng.hpp"
#include "vaelasso/vae.hpp"

namespace vaelasso::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kConfigFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;
inline constexpr int kMetricsFormatVersion = 1;
inline constexpr int kReportFormatVersion = 1;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LassoConfig {
  std::vector<double> lambdas{0.0001, 0.002, 0.005, 0.008, 0.01, 0.1, 1.0};
  double tolerance = 1e-8;
  std::size_t max_iterations = 10000;
  double zero_threshold = 1e-10;
  lasso::TargetScaling target_scaling = lasso::TargetScaling::standardize;
};

struct PipelineConfig {
  std::uint64_t master_seed = 20240501;
  pksim::SimulationConfig simulation{};
  vae::TrainConfig training = default_training();
  LassoConfig lasso{};
  fs::path out_dir = "out";
  std::optional<std::uint64_t> simulation_seed_override;
  std::optional<std::uint64_t> training_seed_override;

  static vae::TrainConfig default_training() {
    vae::TrainConfig t;
    t.epochs = 200;
    t.batch_size = 8;
    t.learning_rate = 3e-3;
    t.lr_final_fraction = 0.01;
    t.kl_weight = 1e-3;
    t.kl_warmup_fraction = 0.1;
    return t;
  }

  /// Stage seeds: explicit overrides win, otherwise derived from master_seed.
  void resolve_seeds() {
    simulation.seed = simulation_seed_override.value_or(derive_seed(master_seed, "simulation"));
    training.seed = training_seed_override.value_or(derive_seed(master_seed, "training"));
  }

  void validate() const {
    simulation.validate();
    training.validate();
    if (lasso.lambdas.empty()) throw ConfigError("lasso.lambdas: must not be empty");
    for (double l : lasso.lambdas)
      if (!(l >= 0) || !std::isfinite(l)) throw ConfigError("lasso.lambdas: every value must be finite and >= 0");
    if (!(lasso.tolerance > 0)) throw ConfigError("lasso.tolerance: must be > 0");
    if (lasso.max_iterations == 0) throw ConfigError("lasso.max_iterations: must be > 0");
    if (!(lasso.zero_threshold >= 0)) throw ConfigError("lasso.zero_threshold: must be >= 0");
  }
};

namespace detail {

template <class T>
void read_field(const json& obj, const std::string& section, const std::string& key, T& target) {
  if (!obj.contains(key)) return;
  try {
    target = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

inline void reject_unknown(const json& obj, const std::string& section, const std::set<std::string>& known) {
  if (!obj.is_object()) throw ConfigError(section + ": must be a JSON object");
  for (const auto& [key, _] : obj.items())
    if (!known.count(key)) throw ConfigError(section + "." + key + ": unknown field");
}

inline void read_normal(const json& obj, const std::string& section, const std::string& key, pksim::NormalSpec& spec) {
  if (!obj.contains(key)) return;
  const auto& s = obj.at(key);
  reject_unknown(s, section + "." + key, {"mean", "sd"});
  read_field(s, section + "." + key, "mean", spec.mean);
  read_field(s, section + "." + key, "sd", spec.sd);
}

}  // namespace detail

inline PipelineConfig config_from_json(const json& j) {
  using detail::read_field;
  using detail::reject_unknown;
  PipelineConfig c;
  reject_unknown(j, "config", {"format_version", "master_seed", "simulation", "training", "lasso", "paths"});
  if (j.contains("format_version") && j.at("format_version") != kConfigFormatVersion)
    throw ConfigError("config.format_version: unsupported value");
  read_field(j, "config", "master_seed", c.master_seed);

  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    reject_unknown(s, "simulation",
                   {"n_train", "n_test", "seed", "grid_points", "horizon_h", "dose_mg", "ka_per_h", "tlag_h",
                    "dose_time_h", "typical_volume_l", "sd_eta_cl", "sd_eta_v", "covariate_floor", "clearance", "age",
                    "weight", "hgb", "alb"});
    auto& sim = c.simulation;
    for (auto [key, target] : {std::pair{"n_train", &sim.n_train}, std::pair{"n_test", &sim.n_test},
                               std::pair{"grid_points", &sim.grid_points}}) {
      if (!s.contains(key)) continue;
      const auto& v = s.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(std::string("simulation.") + key + ": must be a non-negative integer");
      *target = v.get<std::size_t>();
    }
    if (s.contains("seed")) {
      std::uint64_t seed = 0;
      read_field(s, "simulation", "seed", seed);
      c.simulation_seed_override = seed;
    }
    read_field(s, "simulation", "horizon_h", sim.horizon_h);
    read_field(s, "simulation", "dose_mg", sim.dose_mg);
    read_field(s, "simulation", "ka_per_h", sim.ka_per_h);
    read_field(s, "simulation", "tlag_h", sim.tlag_h);
    read_field(s, "simulation", "dose_time_h", sim.dose_time_h);
    read_field(s, "simulation", "typical_volume_l", sim.typical_volume_l);
    read_field(s, "simulation", "sd_eta_cl", sim.sd_eta_cl);
    read_field(s, "simulation", "sd_eta_v", sim.sd_eta_v);
    read_field(s, "simulation", "covariate_floor", sim.covariate_floor);
    if (s.contains("clearance")) {
      const auto& cl = s.at("clearance");
      reject_unknown(cl, "simulation.clearance",
                     {"typical", "snp_exponent", "age_reference", "age_exponent", "alb_reference", "alb_exponent",
                      "hgb_reference", "hgb_exponent"});
      auto& t = sim.clearance;
      read_field(cl, "simulation.clearance", "typical", t.typical);
      read_field(cl, "simulation.clearance", "snp_exponent", t.snp_exponent);
      read_field(cl, "simulation.clearance", "age_reference", t.age_reference);
      read_field(cl, "simulation.clearance", "age_exponent", t.age_exponent);
      read_field(cl, "simulation.clearance", "alb_reference", t.alb_reference);
      read_field(cl, "simulation.clearance", "alb_exponent", t.alb_exponent);
      read_field(cl, "simulation.clearance", "hgb_reference", t.hgb_reference);
      read_field(cl, "simulation.clearance", "hgb_exponent", t.hgb_exponent);
    }
    detail::read_normal(s, "simulation", "age", sim.age);
    detail::read_normal(s, "simulation", "weight", sim.weight);
    detail::read_normal(s, "simulation", "hgb", sim.hgb);
    detail::read_normal(s, "simulation", "alb", sim.alb);
  }

  if (j.contains("training")) {
    const auto& t = j.at("training");
    reject_unknown(t, "training",
                   {"epochs", "batch_size", "kl_weight", "kl_warmup_fraction", "seed", "learning_rate",
                    "lr_final_fraction", "profile_transform", "log_offset", "latent_dim", "hidden"});
    auto& tr = c.training;
    for (auto [key, target] : {std::pair{"epochs", &tr.epochs}, std::pair{"batch_size", &tr.batch_size},
                               std::pair{"latent_dim", &tr.architecture.latent_dim}}) {
      if (!t.contains(key)) continue;
      const auto& v = t.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(std::string("training.") + key + ": must be a non-negative integer");
      *target = v.get<std::size_t>();
    }
    if (t.contains("seed")) {
      std::uint64_t seed = 0;
      read_field(t, "training", "seed", seed);
      c.training_seed_override = seed;
    }
    read_field(t, "training", "kl_weight", tr.kl_weight);
    read_field(t, "training", "kl_warmup_fraction", tr.kl_warmup_fraction);
    read_field(t, "training", "learning_rate", tr.learning_rate);
    read_field(t, "training", "lr_final_fraction", tr.lr_final_fraction);
    read_field(t, "training", "log_offset", tr.log_offset);
    read_field(t, "training", "hidden", tr.architecture.hidden);
    if (t.contains("profile_transform")) {
      try {
        tr.profile_transform = vae::parse_profile_transform(t.at("profile_transform").get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError(std::string("training.profile_transform: ") + e.what());
      }
    }
  }

  if (j.contains("lasso")) {
    const auto& l = j.at("lasso");
    reject_unknown(l, "lasso", {"lambdas", "tolerance", "max_iterations", "zero_threshold", "target_scaling"});
    read_field(l, "lasso", "lambdas", c.lasso.lambdas);
    read_field(l, "lasso", "tolerance", c.lasso.tolerance);
    read_field(l, "lasso", "max_iterations", c.lasso.max_iterations);
    read_field(l, "lasso", "zero_threshold", c.lasso.zero_threshold);
    if (l.contains("target_scaling")) {
      try {
        c.lasso.target_scaling = lasso::parse_target_scaling(l.at("target_scaling").get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError(std::string("lasso.target_scaling: ") + e.what());
      }
    }
  }

  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    reject_unknown(p, "paths", {"out_dir"});
    std::string out;
    read_field(p, "paths", "out_dir", out);
    if (!out.empty()) c.out_dir = out;
  }

  c.resolve_seeds();
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline PipelineConfig default_config() {
  PipelineConfig c;
  c.resolve_seeds();
  return c;
}

inline json to_json(const PipelineConfig& c) {
  const auto& s = c.simulation;
  const auto& t = c.training;
  auto normal = [](const pksim::NormalSpec& n) { return json{{"mean", n.mean}, {"sd", n.sd}}; };
  return {{"format_version", kConfigFormatVersion},
          {"master_seed", c.master_seed},
          {"simulation",
           {{"n_train", s.n_train},
            {"n_test", s.n_test},
            {"seed", s.seed},
            {"grid_points", s.grid_points},
            {"horizon_h", s.horizon_h},
            {"dose_mg", s.dose_mg},
            {"ka_per_h", s.ka_per_h},
            {"tlag_h", s.tlag_h},
            {"dose_time_h", s.dose_time_h},
            {"typical_volume_l", s.typical_volume_l},
            {"sd_eta_cl", s.sd_eta_cl},
            {"sd_eta_v", s.sd_eta_v},
            {"covariate_floor", s.covariate_floor},
            {"clearance",
             {{"typical", s.clearance.typical},
              {"snp_exponent", s.clearance.snp_exponent},
              {"age_reference", s.clearance.age_reference},
              {"age_exponent", s.clearance.age_exponent},
              {"alb_reference", s.clearance.alb_reference},
              {"alb_exponent", s.clearance.alb_exponent},
              {"hgb_reference", s.clearance.hgb_reference},
              {"hgb_exponent", s.clearance.hgb_exponent}}},
            {"age", normal(s.age)},
            {"weight", normal(s.weight)},
            {"hgb", normal(s.hgb)},
            {"alb", normal(s.alb)}}},
          {"training",
           {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"kl_weight", t.kl_weight},
            {"kl_warmup_fraction", t.kl_warmup_fraction},
            {"seed", t.seed},
            {"learning_rate", t.learning_rate},
            {"lr_final_fraction", t.lr_final_fraction},
            {"profile_transform", vae::to_string(t.profile_transform)},
            {"log_offset", t.log_offset},
            {"latent_dim", t.architecture.latent_dim},
            {"hidden", t.architecture.hidden}}},
          {"lasso",
           {{"lambdas", c.lasso.lambdas},
            {"tolerance", c.lasso.tolerance},
            {"max_iterations", c.lasso.max_iterations},
            {"zero_threshold", c.lasso.zero_threshold},
            {"target_scaling", lasso::to_string(c.lasso.target_scaling)}}},
          {"paths", {{"out_dir", c.out_dir.string()}}}};
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// manifest.json in an output directory. Each stage adds its artifacts with
/// SHA-256 checksums; timestamps live only here, never inside artifacts.
class RunManifest {
 public:
  static constexpr const char* kFileName = "manifest.json";

  static RunManifest load_or_create(const fs::path& dir) {
    RunManifest m;
    m.dir_ = dir;
    const auto path = dir / kFileName;
    if (fs::exists(path)) {
      m.doc_ = json::parse(io::read_text(path));
      if (m.doc_.value("format_version", -1) != kManifestFormatVersion)
        throw InputError(path.string() + ": unsupported manifest format_version");
    } else {
      m.doc_ = {{"format_version", kManifestFormatVersion},
                {"formats",
                 {{"dataset_csv", 1},
                  {"latents_csv", 1},
                  {"history_csv", 1},
                  {"selection_csv", 1},
                  {"network_json", nn::kParameterFormatVersion},
                  {"model_json", vae::kModelFormatVersion},
                  {"path_json", lasso::kPathFormatVersion},
                  {"metrics_json", kMetricsFormatVersion},
                  {"report", kReportFormatVersion}}},
                {"stages", json::object()},
                {"artifacts", json::object()}};
    }
    return m;
  }

  void record(const std::string& stage, const PipelineConfig& config, const std::string& started,
              const std::vector<fs::path>& files) {
    doc_["config"] = to_json(config);
    doc_["stages"][stage] = {{"started_utc", started}, {"finished_utc", utc_now()}};
    for (const auto& f : files)
      doc_["artifacts"][f.filename().string()] = {{"sha256", io::sha256_file(f)}, {"stage", stage}};
  }

  void save() const { io::write_text(dir_ / kFileName, doc_.dump(2) + "\n"); }

  std::map<std::string, std::string> checksums() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, entry] : doc_.at("artifacts").items()) out[name] = entry.at("sha256").get<std::string>();
    return out;
  }

  const json& document() const { return doc_; }

 private:
  fs::path dir_;
  json doc_;
};

namespace detail {

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw InputError(what + " not found: " + p.string());
}

inline void finish_stage(const fs::path& out, const std::string& stage, const PipelineConfig& cfg,
                         const std::string& started, const std::vector<fs::path>& files) {
  auto manifest = RunManifest::load_or_create(out);
  manifest.record(stage, cfg, started, files);
  manifest.save();
}

inline vae::VaeModel load_model(const fs::path& p) {
  require_file(p, "model");
  try {
    return vae::model_from_json(json::parse(io::read_text(p)));
  } catch (const json::exception& e) {
    throw InputError(p.string() + ": " + e.what());
  }
}

inline std::vector<pksim::Subject> load_dataset(const fs::path& p, const PipelineConfig& cfg) {
  require_file(p, "dataset");
  return io::read_dataset(p, cfg.simulation.horizon_h);
}

inline std::string history_to_csv(const std::vector<vae::EpochRecord>& h) {
  std::string out = "epoch,recon,kl,beta\n";
  for (const auto& r : h)
    out += std::to_string(r.epoch) + "," + io::format_double(r.reconstruction) + "," + io::format_double(r.kl) + "," +
           io::format_double(r.beta) + "\n";
  return out;
}

inline json metrics_to_json(const vae::Metrics& m, std::size_t n_profiles) {
  return {{"format_version", kMetricsFormatVersion},
          {"mae_mg_l", m.mae_mg_l},
          {"mape_percent", m.mape_percent},
          {"profiles", n_profiles},
          {"points_total", m.points_total},
          {"points_in_mape", m.points_in_mape},
          {"reconstruction", "posterior mean (z = mu)"},
          {"mape_exclusion",
           {{"rule", "points with true concentration <= floor_mg_l are excluded from MAPE"},
            {"floor_mg_l", m.mape_floor_mg_l}}}};
}

inline std::string profiles_matrix_to_csv(const std::vector<std::int64_t>& ids, const nn::Matrix& m) {
  std::vector<std::string> header{"subject_id"};
  for (Eigen::Index j = 0; j < m.cols(); ++j) header.push_back(io::concentration_column(static_cast<std::size_t>(j)));
  std::string out = io::join(header) + "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<std::string> f{std::to_string(ids[static_cast<std::size_t>(i)])};
    for (Eigen::Index j = 0; j < m.cols(); ++j) f.push_back(io::format_double(m(i, j)));
    out += io::join(f) + "\n";
  }
  return out;
}

inline std::string selection_to_csv(const lasso::SelectionReport& rep) {
  std::string out = "covariate,lambda,importance,retained\n";
  for (const auto& p : rep.series)
    out += p.covariate + "," + io::format_double(p.lambda) + "," + io::format_double(p.importance) + "," +
           (p.retained ? "1" : "0") + "\n";
  return out;
}

}  // namespace detail

inline std::vector<lasso::SeriesPoint> selection_from_csv(const io::CsvTable& t, std::string_view source) {
  if (t.header != std::vector<std::string>{"covariate", "lambda", "importance", "retained"})
    throw io::ParseError(std::string(source) + ": expected header covariate,lambda,importance,retained");
  std::vector<lasso::SeriesPoint> out;
  for (const auto& r : t.rows) {
    if (r[3] != "0" && r[3] != "1") throw io::ParseError(std::string(source) + ": retained must be 0 or 1");
    out.push_back({r[0], io::parse_double(r[1], "lambda"), io::parse_double(r[2], "importance"), r[3] == "1"});
  }
  return out;
}

// ---- stage commands --------------------------------------------------------

struct SimulateOutputs {
  fs::path train_csv, test_csv;
};

inline SimulateOutputs cmd_simulate(const PipelineConfig& cfg, const fs::path& out) {
  const auto started = utc_now();
  cfg.validate();
  spdlog::info("simulating {} train + {} test profiles (seed {})", cfg.simulation.n_train, cfg.simulation.n_test,
               cfg.simulation.seed);
  const auto ds = pksim::generate_dataset(cfg.simulation);
  SimulateOutputs o{out / "train.csv", out / "test.csv"};
  io::write_text(o.train_csv, io::dataset_to_csv(ds.train));
  io::write_text(o.test_csv, io::dataset_to_csv(ds.test));
  detail::finish_stage(out, "simulate", cfg, started, {o.train_csv, o.test_csv});
  return o;
}

struct TrainOutputs {
  fs::path model_json, history_csv;
  std::vector<vae::EpochRecord> history;
};

inline TrainOutputs cmd_train(const PipelineConfig& cfg, const fs::path& train_csv, const fs::path& out) {
  const auto started = utc_now();
  cfg.validate();
  const auto train = detail::load_dataset(train_csv, cfg);
  spdlog::info("training VAE on {} profiles for {} epochs", train.size(), cfg.training.epochs);
  const std::size_t log_every = std::max<std::size_t>(1, cfg.training.epochs / 10);
  auto result = vae::train(train, cfg.training, [&](const vae::EpochRecord& r) {
    if (r.epoch % log_every == 0 || r.epoch + 1 == cfg.training.epochs)
      spdlog::info("epoch {:4d}  recon {:.6f}  kl {:.4f}  beta {:.2e}", r.epoch, r.reconstruction, r.kl, r.beta);
  });
  TrainOutputs o{out / "model.json", out / "history.csv", result.history};
  io::write_text(o.model_json, vae::to_json(result.model).dump() + "\n");
  io::write_text(o.history_csv, detail::history_to_csv(result.history));
  detail::finish_stage(out, "train", cfg, started, {o.model_json, o.history_csv});
  return o;
}

struct EvaluateOutputs {
  fs::path metrics_json, reconstruction_csv;
  vae::Metrics metrics;
};

inline EvaluateOutputs cmd_evaluate(const PipelineConfig& cfg, const fs::path& model_json, const fs::path& test_csv,
                                    const fs::path& out) {
  const auto started = utc_now();
  const auto model = detail::load_model(model_json);
  const auto test = detail::load_dataset(test_csv, cfg);
  const auto recon = vae::reconstruct(model, test);
  const auto metrics = vae::reconstruction_metrics(vae::to_matrix(test), recon);
  spdlog::info("test MAE {:.6f} mg/L, MAPE {:.3f}%", metrics.mae_mg_l, metrics.mape_percent);

  std::vector<std::int64_t> ids;
  for (const auto& s : test) ids.push_back(s.curve.subject_id);
  EvaluateOutputs o{out / "metrics.json", out / "reconstruction.csv", metrics};
  io::write_text(o.metrics_json, detail::metrics_to_json(metrics, test.size()).dump(2) + "\n");
  io::write_text(o.reconstruction_csv, detail::profiles_matrix_to_csv(ids, recon));
  detail::finish_stage(out, "evaluate", cfg, started, {o.metrics_json, o.reconstruction_csv});
  return o;
}

inline io::LatentTable encode_subjects(const vae::VaeModel& model, std::span<const pksim::Subject> subjects) {
  io::LatentTable t;
  for (const auto& s : subjects) {
    if (s.curve.concentrations.size() != model.grid_length)
      throw nn::ShapeError("profile grid length " + std::to_string(s.curve.concentrations.size()) +
                           " != model grid length " + std::to_string(model.grid_length));
    t.subject_ids.push_back(s.curve.subject_id);
  }
  auto code = vae::encode_batch(model, model.profile_scale.forward(vae::to_matrix(subjects)));
  t.mu = code.mu;
  t.logvar = code.logvar;
  return t;
}

inline fs::path cmd_encode(const PipelineConfig& cfg, const fs::path& model_json, const fs::path& data_csv,
                           const fs::path& out, const std::string& file_name = "latents.csv") {
  const auto started = utc_now();
  const auto model = detail::load_model(model_json);
  const auto data = detail::load_dataset(data_csv, cfg);
  const auto table = encode_subjects(model, data);
  const auto path = out / file_name;
  io::write_text(path, io::latents_to_csv(table));
  spdlog::info("encoded {} profiles into {} latent dimensions", table.subject_ids.size(), model.latent_dim);
  detail::finish_stage(out, "encode", cfg, started, {path});
  return path;
}

/// Latent rows joined to dataset rows on subject_id, ordered by subject_id.
struct JoinedData {
  std::vector<std::int64_t> subject_ids;
  std::vector<pksim::Subject> subjects;
  Eigen::MatrixXd mu;
};

inline JoinedData join_on_subject(const io::LatentTable& latents, const std::vector<pksim::Subject>& data) {
  std::unordered_map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!by_id.emplace(data[i].curve.subject_id, i).second)
      throw InputError("dataset has duplicate subject_id " + std::to_string(data[i].curve.subject_id));
  if (latents.subject_ids.size() != data.size())
    throw InputError("subject_id mismatch: " + std::to_string(latents.subject_ids.size()) + " latent rows vs " +
                     std::to_string(data.size()) + " dataset rows");

  std::vector<std::size_t> order(latents.subject_ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](auto a, auto b) { return latents.subject_ids[a] < latents.subject_ids[b]; });
  JoinedData j;
  j.mu.resize(latents.mu.rows(), latents.mu.cols());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto id = latents.subject_ids[order[k]];
    if (k > 0 && id == j.subject_ids.back()) throw InputError("latents have duplicate subject_id " + std::to_string(id));
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InputError("subject_id mismatch: " + std::to_string(id) + " missing from dataset");
    j.subject_ids.push_back(id);
    j.subjects.push_back(data[it->second]);
    j.mu.row(static_cast<Eigen::Index>(k)) = latents.mu.row(static_cast<Eigen::Index>(order[k]));
  }
  return j;
}

struct FitLassoOutputs {
  fs::path path_json, selection_json, selection_csv;
  std::optional<fs::path> diagnostic_json;
  lasso::LassoPathResult path;
  lasso::SelectionReport selection;
};

inline FitLassoOutputs cmd_fit_lasso(const PipelineConfig& cfg, const fs::path& latents_csv, const fs::path& data_csv,
                                     const fs::path& out, const std::optional<fs::path>& model_json = std::nullopt) {
  const auto started = utc_now();
  cfg.validate();
  detail::require_file(latents_csv, "latents");
  const auto latents = io::latents_from_table(io::read_csv(latents_csv), latents_csv.string());
  const auto data = detail::load_dataset(data_csv, cfg);
  std::optional<vae::VaeModel> model;
  if (model_json) {
    model = detail::load_model(*model_json);
    if (model->latent_dim != static_cast<std::size_t>(latents.mu.cols()))
      throw nn::ShapeError("model latent_dim does not match latent file");
  }
  const auto joined = join_on_subject(latents, data);

  std::vector<pksim::CovariateRecord> records;
  for (const auto& s : joined.subjects) records.push_back(s.covariates);
  const auto design = lasso::preprocess_covariates(records);
  lasso::LassoOptions opt;
  opt.tolerance = cfg.lasso.tolerance;
  opt.max_iterations = cfg.lasso.max_iterations;
  FitLassoOutputs o;
  o.path = lasso::fit_path(design, joined.mu, cfg.lasso.lambdas, opt, cfg.lasso.target_scaling);
  o.selection = lasso::selection_report(o.path, cfg.lasso.zero_threshold);
  if (!o.path.all_converged()) spdlog::warn("some (dimension, lambda) fits did not converge; see path.json");

  json diagnostic;
  if (model) {
    // Decoding covariate-predicted latents; reported for inspection only.
    const auto truth = vae::to_matrix(joined.subjects);
    diagnostic = {{"format_version", kMetricsFormatVersion},
                  {"description", "profiles decoded from LASSO-predicted latent means, training subjects"},
                  {"per_lambda", json::array()}};
    for (std::size_t l = 0; l < o.path.lambdas.size(); ++l) {
      const nn::Matrix pred = lasso::predict(o.path, l, design.values);
      const auto m = vae::reconstruction_metrics(truth, vae::decode_batch(*model, pred));
      diagnostic["per_lambda"].push_back(
          {{"lambda", o.path.lambdas[l]}, {"mae_mg_l", m.mae_mg_l}, {"mape_percent", m.mape_percent}});
    }
  }

  o.path_json = out / "path.json";
  o.selection_json = out / "selection.json";
  o.selection_csv = out / "selection.csv";
  json path_doc = lasso::to_json(o.path);
  path_doc["design_scaling"] = {{"columns", lasso::kContinuousColumns}, {"min", design.scaling.min}, {"max", design.scaling.max}};
  io::write_text(o.path_json, path_doc.dump() + "\n");
  io::write_text(o.selection_json, lasso::to_json(o.selection).dump(2) + "\n");
  io::write_text(o.selection_csv, detail::selection_to_csv(o.selection));
  std::vector<fs::path> files{o.path_json, o.selection_json, o.selection_csv};
  if (model) {
    o.diagnostic_json = out / "lasso_decode_diagnostic.json";
    io::write_text(*o.diagnostic_json, diagnostic.dump(2) + "\n");
    files.push_back(*o.diagnostic_json);
  }
  for (std::size_t l = 0; l < o.selection.per_lambda.size(); ++l) {
    const auto& e = o.selection.per_lambda[l];
    spdlog::info("lambda {:<8g} retained: {}", e.lambda, io::join(e.retained, ' '));
  }
  detail::finish_stage(out, "fit-lasso", cfg, started, files);
  return o;
}

/// Markdown summary of a path and (optionally) reconstruction metrics.
inline std::string render_report(const lasso::LassoPathResult& path, const lasso::SelectionReport& sel,
                                 const std::optional<json>& metrics) {
  std::ostringstream md;
  md << "# Covariate selection report\n\n";
  md << "## Reconstruction\n\n";
  if (metrics) {
    md << "| metric | value |\n|---|---|\n";
    md << "| MAE (mg/L) | " << io::format_double(metrics->at("mae_mg_l").get<double>()) << " |\n";
    md << "| MAPE (%) | " << io::format_double(metrics->at("mape_percent").get<double>()) << " |\n";
    md << "| profiles | " << metrics->at("profiles").get<std::size_t>() << " |\n\n";
    md << "MAPE excludes points whose true concentration is at or below "
       << io::format_double(metrics->at("mape_exclusion").at("floor_mg_l").get<double>())
       << " mg/L. Reconstructions decode the posterior mean.\n\n";
  } else {
    md << "No metrics supplied.\n\n";
  }

  md << "## Retained covariates per lambda\n\n";
  md << "Target scaling: " << lasso::to_string(path.target_scaling) << "; zero threshold "
     << io::format_double(sel.zero_threshold) << ".\n\n";
  md << "| lambda |";
  for (const auto& c : sel.covariates) md << " " << c << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < sel.covariates.size(); ++i) md << "---|";
  md << "\n";
  bool any_retained = false;
  for (std::size_t l = 0; l < path.lambdas.size(); ++l) {
    md << "| " << io::format_double(path.lambdas[l]) << " |";
    for (std::size_t c = 0; c < sel.covariates.size(); ++c) {
      const bool kept = path.importance[l][c] > sel.zero_threshold;
      any_retained = any_retained || kept;
      md << " " << (kept ? "x" : ".") << " |";
    }
    md << "\n";
  }
  md << "\n";
  for (const auto& e : sel.per_lambda) {
    md << "- lambda " << io::format_double(e.lambda) << ": ";
    md << (e.retained.empty() ? std::string("no covariates retained") : "retained " + io::join(e.retained, ' ')) << "\n";
  }
  if (!any_retained) md << "\nNo covariates retained at any lambda.\n";

  md << "\n## Elimination order\n\n";
  std::vector<std::size_t> order(sel.covariates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    return sel.elimination_lambda[i].value_or(std::numeric_limits<double>::infinity());
  };
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return key(a) < key(b); });
  md << "| covariate | eliminated from lambda |\n|---|---|\n";
  for (auto i : order)
    md << "| " << sel.covariates[i] << " | "
       << (sel.elimination_lambda[i] ? io::format_double(*sel.elimination_lambda[i]) : std::string("never")) << " |\n";

  std::size_t bad = 0;
  for (const auto& row : path.converged)
    for (bool c : row) bad += !c;
  md << "\n## Solver\n\n";
  md << path.lambdas.size() << " lambda values x " << path.latent_dim << " latent dimensions; " << bad
     << " fits did not converge.\n";
  return md.str();
}

struct ReportOutputs {
  fs::path report_md, importance_csv;
  std::optional<fs::path> overlay_csv_path;
};

/// Long-form overlay: observed vs reconstructed per subject and time.
inline std::string overlay_csv(const std::vector<pksim::Subject>& test, const io::CsvTable& recon,
                               std::string_view source) {
  if (recon.header.empty() || recon.header[0] != "subject_id")
    throw io::ParseError(std::string(source) + ": expected subject_id column");
  std::unordered_map<std::int64_t, const std::vector<std::string>*> rows;
  for (const auto& r : recon.rows) rows[io::parse_int(r[0], "subject_id")] = &r;
  std::string out = "subject_id,time_h,observed_mg_l,reconstructed_mg_l\n";
  for (const auto& s : test) {
    auto it = rows.find(s.curve.subject_id);
    if (it == rows.end()) throw InputError("reconstruction missing subject " + std::to_string(s.curve.subject_id));
    if (it->second->size() != s.curve.concentrations.size() + 1)
      throw nn::ShapeError("reconstruction grid length differs from test set");
    for (std::size_t k = 0; k < s.curve.concentrations.size(); ++k)
      out += std::to_string(s.curve.subject_id) + "," + io::format_double(s.curve.time_grid[k]) + "," +
             io::format_double(s.curve.concentrations[k]) + "," + (*it->second)[k + 1] + "\n";
  }
  return out;
}

inline ReportOutputs cmd_report(const PipelineConfig& cfg, const fs::path& path_json,
                                const std::optional<fs::path>& metrics_json, const fs::path& out,
                                const std::optional<fs::path>& reconstruction_csv = std::nullopt,
                                const std::optional<fs::path>& test_csv = std::nullopt) {
  const auto started = utc_now();
  detail::require_file(path_json, "path");
  lasso::LassoPathResult path;
  try {
    path = lasso::path_from_json(json::parse(io::read_text(path_json)));
  } catch (const json::exception& e) {
    throw InputError(path_json.string() + ": " + e.what());
  }
  std::optional<json> metrics;
  if (metrics_json) {
    detail::require_file(*metrics_json, "metrics");
    metrics = json::parse(io::read_text(*metrics_json));
    if (metrics->value("format_version", -1) != kMetricsFormatVersion)
      throw InputError(metrics_json->string() + ": unsupported metrics format_version");
  }
  std::optional<std::string> overlay;
  if (reconstruction_csv || test_csv) {
    if (!reconstruction_csv || !test_csv) throw InputError("overlay series need both reconstruction and test files");
    detail::require_file(*reconstruction_csv, "reconstruction");
    const auto test = detail::load_dataset(*test_csv, cfg);
    overlay = overlay_csv(test, io::read_csv(*reconstruction_csv), reconstruction_csv->string());
  }

  const auto sel = lasso::selection_report(path, cfg.lasso.zero_threshold);
  ReportOutputs o{out / "report.md", out / "importance_series.csv", std::nullopt};
  io::write_text(o.report_md, render_report(path, sel, metrics));
  io::write_text(o.importance_csv, detail::selection_to_csv(sel));
  std::vector<fs::path> files{o.report_md, o.importance_csv};
  if (overlay) {
    o.overlay_csv_path = out / "reconstruction_overlay.csv";
    io::write_text(*o.overlay_csv_path, *overlay);
    files.push_back(*o.overlay_csv_path);
  }
  detail::finish_stage(out, "report", cfg, started, files);
  return o;
}

struct RunOutputs {
  SimulateOutputs simulate;
  TrainOutputs train;
  EvaluateOutputs evaluate;
  fs::path latents_csv;
  FitLassoOutputs lasso;
  ReportOutputs report;
};

/// simulate -> train -> evaluate -> encode(train) -> fit-lasso -> report, all in `out`.
inline RunOutputs run_all(const PipelineConfig& cfg, const fs::path& out) {
  RunOutputs r;
  r.simulate = cmd_simulate(cfg, out);
  r.train = cmd_train(cfg, r.simulate.train_csv, out);
  r.evaluate = cmd_evaluate(cfg, r.train.model_json, r.simulate.test_csv, out);
  r.latents_csv = cmd_encode(cfg, r.train.model_json, r.simulate.train_csv, out);
  r.lasso = cmd_fit_lasso(cfg, r.latents_csv, r.simulate.train_csv, out, r.train.model_json);
  r.report = cmd_report(cfg, r.lasso.path_json, r.evaluate.metrics_json, out, r.evaluate.reconstruction_csv,
                        r.simulate.test_csv);
  return r;
}

}  // namespace vaelasso::pipeline
