#pragma once

// Virtual tacrolimus population: covariate sampling, covariate-driven
// clearance/volume, and single-dose one-compartment concentration profiles
// with first-order absorption and an absorption lag.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vaelasso/rng.hpp"

namespace vaelasso::pksim {

enum class Sex { male, female };
enum class Race { caucasian_american, african_american, hispanic, asian, other };

inline constexpr std::array<Sex, 2> kSexes{Sex::male, Sex::female};
inline constexpr std::array<Race, 5> kRaces{Race::caucasian_american, Race::african_american,
                                            Race::hispanic, Race::asian, Race::other};

inline std::string_view to_string(Sex s) { return s == Sex::male ? "male" : "female"; }

inline std::string_view to_string(Race r) {
  switch (r) {
    case Race::caucasian_american: return "caucasian_american";
    case Race::african_american: return "african_american";
    case Race::hispanic: return "hispanic";
    case Race::asian: return "asian";
    case Race::other: return "other";
  }
  throw std::invalid_argument("invalid race value");
}

inline std::optional<Sex> parse_sex(std::string_view s) {
  for (Sex v : kSexes)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

inline std::optional<Race> parse_race(std::string_view s) {
  for (Race v : kRaces)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

struct CovariateRecord {
  int snp = 1;  // CYP3A5 genotype code: 1 expressor, 2 intermediate, 3 non-expressor
  double age = 47.0;     // years
  Sex sex = Sex::male;
  double weight = 80.0;  // kg
  double hgb = 12.5;     // g/dL
  double alb = 4.1;      // g/dL
  Race race = Race::other;
  double extra_1 = 0.5;  // negative control
  double extra_2 = 0.5;  // negative control

  bool valid() const {
    return snp >= 1 && snp <= 3 && age > 0 && weight > 0 && hgb > 0 && alb > 0 && extra_1 >= 0 &&
           extra_1 <= 1 && extra_2 >= 0 && extra_2 <= 1;
  }

  bool operator==(const CovariateRecord&) const = default;
};

/// Covariate names in declared order. This order is used by the dataset CSV
/// and by the covariate reports.
inline constexpr std::array<std::string_view, 9> kCovariateNames{
    "snp", "age", "sex", "weight", "hgb", "alb", "race", "extra_1", "extra_2"};

struct NormalSpec {
  double mean;
  double sd;
};

/// Clearance model CL = t1 * snp^t2 * (age/47)^t3 * (alb/4.1)^t4 * (hgb/125)^t5 * exp(eta).
/// The hemoglobin reference is applied exactly as 125 even though hgb is sampled in g/dL.
struct ClearanceTheta {
  double typical = 26.2;
  double snp_exponent = 0.71;
  double age_reference = 47.0;
  double age_exponent = -0.26;
  double alb_reference = 4.1;
  double alb_exponent = 0.35;
  double hgb_reference = 125.0;
  double hgb_exponent = -0.29;
};

struct SimulationConfig {
  std::size_t n_train = 10000;
  std::size_t n_test = 2000;
  std::uint64_t seed = 20240501;
  std::size_t grid_points = 97;
  double horizon_h = 48.0;

  double dose_mg = 300.0;
  double ka_per_h = 0.502;
  double tlag_h = 0.346;
  double dose_time_h = 0.0;
  ClearanceTheta clearance{};
  double typical_volume_l = 3726.0;
  double sd_eta_cl = 0.408;
  double sd_eta_v = 0.653;

  NormalSpec age{45.9, 12.7};
  NormalSpec weight{82.9, 20.8};
  NormalSpec hgb{12.5, 2.1};
  NormalSpec alb{4.1, 0.4};
  double covariate_floor = 0.1;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("simulation." + field + ": " + why);
    };
    if (n_train == 0) fail("n_train", "must be > 0");
    if (n_test == 0) fail("n_test", "must be > 0");
    if (grid_points < 2) fail("grid_points", "must be >= 2");
    if (!(horizon_h > 0)) fail("horizon_h", "must be > 0");
    if (!(dose_mg > 0)) fail("dose_mg", "must be > 0");
    if (!(ka_per_h > 0)) fail("ka_per_h", "must be > 0");
    if (!(tlag_h >= 0)) fail("tlag_h", "must be >= 0");
    if (!(dose_time_h >= 0)) fail("dose_time_h", "must be >= 0");
    if (!(clearance.typical > 0)) fail("clearance.typical", "must be > 0");
    if (!(typical_volume_l > 0)) fail("typical_volume_l", "must be > 0");
    if (!(sd_eta_cl >= 0)) fail("sd_eta_cl", "must be >= 0");
    if (!(sd_eta_v >= 0)) fail("sd_eta_v", "must be >= 0");
    for (auto [name, spec] : {std::pair{"age", age}, std::pair{"weight", weight},
                              std::pair{"hgb", hgb}, std::pair{"alb", alb}}) {
      if (!(spec.sd >= 0)) fail(std::string(name) + ".sd", "must be >= 0");
    }
    if (!(covariate_floor > 0)) fail("covariate_floor", "must be > 0");
  }
};

struct PkParameters {
  double dose = 0;    // mg
  double ka = 0;      // 1/h
  double tlag = 0;    // h
  double cl = 0;      // L/h
  double v = 0;       // L
  double ke = 0;      // 1/h, cl / v
  double eta_cl = 0;
  double eta_v = 0;
  double dose_time = 0;  // h

  /// Time of maximum concentration for a single dose.
  double peak_time() const { return dose_time + tlag + std::log(ka / ke) / (ka - ke); }
};

struct PkCurve {
  std::int64_t subject_id = 0;
  std::vector<double> time_grid;
  std::vector<double> concentrations;  // mg/L
  PkParameters params;
};

struct Subject {
  CovariateRecord covariates;
  PkCurve curve;
};

struct Dataset {
  std::vector<Subject> train;
  std::vector<Subject> test;
};

inline std::vector<double> make_time_grid(std::size_t points, double horizon_h) {
  if (points < 2) throw std::invalid_argument("time grid needs at least 2 points");
  std::vector<double> grid(points);
  const double step = horizon_h / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) grid[i] = step * static_cast<double>(i);
  grid.back() = horizon_h;
  return grid;
}

inline CovariateRecord sample_covariate(Rng& rng, const SimulationConfig& config = {}) {
  std::uniform_int_distribution<int> snp(1, 3);
  std::uniform_int_distribution<int> sex(0, static_cast<int>(kSexes.size()) - 1);
  std::uniform_int_distribution<int> race(0, static_cast<int>(kRaces.size()) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](const NormalSpec& spec) {
    std::normal_distribution<double> dist(spec.mean, spec.sd);
    return std::max(dist(rng), config.covariate_floor);
  };

  CovariateRecord r;
  r.snp = snp(rng);
  r.age = draw(config.age);
  r.sex = kSexes[static_cast<std::size_t>(sex(rng))];
  r.weight = draw(config.weight);
  r.hgb = draw(config.hgb);
  r.alb = draw(config.alb);
  r.race = kRaces[static_cast<std::size_t>(race(rng))];
  r.extra_1 = unit(rng);
  r.extra_2 = unit(rng);
  return r;
}

inline std::vector<CovariateRecord> sample_covariates(Rng& rng, std::size_t n,
                                                      const SimulationConfig& config = {}) {
  if (n == 0) throw std::invalid_argument("sample_covariates: n must be > 0");
  std::vector<CovariateRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_covariate(rng, config));
  return out;
}

inline double clearance(const CovariateRecord& r, double eta_cl, const ClearanceTheta& theta = {}) {
  if (!r.valid()) throw std::invalid_argument("clearance: invalid covariate record");
  return theta.typical * std::pow(static_cast<double>(r.snp), theta.snp_exponent) *
         std::pow(r.age / theta.age_reference, theta.age_exponent) *
         std::pow(r.alb / theta.alb_reference, theta.alb_exponent) *
         std::pow(r.hgb / theta.hgb_reference, theta.hgb_exponent) * std::exp(eta_cl);
}

inline double volume(double eta_v, double typical_volume_l = 3726.0) {
  return typical_volume_l * std::exp(eta_v);
}

inline double concentration_at(const PkParameters& p, double t) {
  if (p.ka == p.ke || std::abs(p.ka - p.ke) <= 1e-12 * std::abs(p.ka))
    throw std::domain_error("concentration_at: ka equals ke, one-compartment solution is degenerate");
  const double tau = t - p.dose_time - p.tlag;
  if (tau <= 0) return 0.0;
  const double c = p.dose / p.v * p.ka / (p.ka - p.ke) * (std::exp(-p.ke * tau) - std::exp(-p.ka * tau));
  return std::max(c, 0.0);
}

inline PkParameters make_parameters(const CovariateRecord& r, double eta_cl, double eta_v,
                                    const SimulationConfig& config) {
  PkParameters p;
  p.dose = config.dose_mg;
  p.ka = config.ka_per_h;
  p.tlag = config.tlag_h;
  p.dose_time = config.dose_time_h;
  p.eta_cl = eta_cl;
  p.eta_v = eta_v;
  p.cl = clearance(r, eta_cl, config.clearance);
  p.v = volume(eta_v, config.typical_volume_l);
  p.ke = p.cl / p.v;
  return p;
}

/// Deterministic profile for given random effects.
inline PkCurve simulate_profile(const CovariateRecord& r, std::int64_t subject_id, double eta_cl,
                                double eta_v, const SimulationConfig& config) {
  PkCurve curve;
  curve.subject_id = subject_id;
  curve.params = make_parameters(r, eta_cl, eta_v, config);
  curve.time_grid = make_time_grid(config.grid_points, config.horizon_h);
  curve.concentrations.reserve(curve.time_grid.size());
  for (double t : curve.time_grid) curve.concentrations.push_back(concentration_at(curve.params, t));
  return curve;
}

/// Draws eta_cl then eta_v from `rng` and evaluates the profile on the configured grid.
inline PkCurve simulate_profile(const CovariateRecord& r, Rng& rng, const SimulationConfig& config,
                                std::int64_t subject_id = 0) {
  config.validate();
  std::normal_distribution<double> eta_cl(0.0, config.sd_eta_cl);
  std::normal_distribution<double> eta_v(0.0, config.sd_eta_v);
  const double ecl = eta_cl(rng);
  const double ev = eta_v(rng);
  return simulate_profile(r, subject_id, ecl, ev, config);
}

/// One subject from its own sub-stream; subject ids are global across train and test.
inline Subject simulate_subject(std::int64_t subject_id, const SimulationConfig& config) {
  Rng rng = make_stream(config.seed, static_cast<std::uint64_t>(subject_id));
  Subject s;
  s.covariates = sample_covariate(rng, config);
  s.curve = simulate_profile(s.covariates, rng, config, subject_id);
  return s;
}

/// Train subjects get ids [0, n_train), test subjects [n_train, n_train + n_test).
inline Dataset generate_dataset(const SimulationConfig& config) {
  config.validate();
  Dataset ds;
  ds.train.reserve(config.n_train);
  ds.test.reserve(config.n_test);
  for (std::size_t i = 0; i < config.n_train; ++i)
    ds.train.push_back(simulate_subject(static_cast<std::int64_t>(i), config));
  for (std::size_t i = 0; i < config.n_test; ++i)
    ds.test.push_back(simulate_subject(static_cast<std::int64_t>(config.n_train + i), config));
  return ds;
}

}  // namespace vaelasso::pksim
