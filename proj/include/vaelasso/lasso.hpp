#pragma once

// L1-regularized linear maps from covariates to latent codes.
//
// Objective per target: (1/(2n)) * ||y - b0 - X b||^2 + lambda * ||b||_1 with
// an unpenalized intercept, minimized by cyclic coordinate descent with exact
// soft-threshold updates on centered data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vaelasso/pksim.hpp"

namespace vaelasso::lasso {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr int kPathFormatVersion = 1;

/// Continuous columns in design order; these are min-max scaled.
inline constexpr std::array<std::string_view, 7> kContinuousColumns{"snp", "age", "weight", "hgb",
                                                                    "alb", "extra_1", "extra_2"};

struct MinMaxScaling {
  std::vector<double> min;  // one per continuous column
  std::vector<double> max;
};

struct DesignMatrix {
  std::vector<std::string> column_names;
  std::vector<std::size_t> group_of_column;  // index into pksim::kCovariateNames
  MatrixXd values;                           // n x p
  MinMaxScaling scaling;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
};

namespace detail {

inline std::size_t covariate_index(std::string_view name) {
  for (std::size_t i = 0; i < pksim::kCovariateNames.size(); ++i)
    if (pksim::kCovariateNames[i] == name) return i;
  throw std::logic_error("unknown covariate " + std::string(name));
}

inline double continuous_value(const pksim::CovariateRecord& r, std::size_t k) {
  switch (k) {
    case 0: return r.snp;
    case 1: return r.age;
    case 2: return r.weight;
    case 3: return r.hgb;
    case 4: return r.alb;
    case 5: return r.extra_1;
    case 6: return r.extra_2;
  }
  throw std::logic_error("continuous column out of range");
}

inline DesignMatrix encode(std::span<const pksim::CovariateRecord> records, const MinMaxScaling& scaling) {
  DesignMatrix dm;
  for (auto name : kContinuousColumns) {
    dm.column_names.emplace_back(name);
    dm.group_of_column.push_back(covariate_index(name));
  }
  for (auto s : pksim::kSexes) {
    dm.column_names.push_back("sex_" + std::string(pksim::to_string(s)));
    dm.group_of_column.push_back(covariate_index("sex"));
  }
  for (auto r : pksim::kRaces) {
    dm.column_names.push_back("race_" + std::string(pksim::to_string(r)));
    dm.group_of_column.push_back(covariate_index("race"));
  }

  const auto n = static_cast<Eigen::Index>(records.size());
  const auto p = static_cast<Eigen::Index>(dm.column_names.size());
  dm.values = MatrixXd::Zero(n, p);
  const auto nc = static_cast<Eigen::Index>(kContinuousColumns.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = records[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < nc; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      dm.values(i, k) = (continuous_value(rec, kk) - scaling.min[kk]) / (scaling.max[kk] - scaling.min[kk]);
    }
    const auto sex = std::find(pksim::kSexes.begin(), pksim::kSexes.end(), rec.sex) - pksim::kSexes.begin();
    const auto race = std::find(pksim::kRaces.begin(), pksim::kRaces.end(), rec.race) - pksim::kRaces.begin();
    dm.values(i, nc + sex) = 1.0;
    dm.values(i, nc + static_cast<Eigen::Index>(pksim::kSexes.size()) + race) = 1.0;
  }
  dm.scaling = scaling;
  return dm;
}

inline void check_records(std::span<const pksim::CovariateRecord> records) {
  if (records.empty()) throw std::invalid_argument("preprocess_covariates: no records");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const bool sex_ok = std::find(pksim::kSexes.begin(), pksim::kSexes.end(), r.sex) != pksim::kSexes.end();
    const bool race_ok = std::find(pksim::kRaces.begin(), pksim::kRaces.end(), r.race) != pksim::kRaces.end();
    if (!sex_ok || !race_ok || r.snp < 1 || r.snp > 3)
      throw std::invalid_argument("preprocess_covariates: unseen category in record " + std::to_string(i));
  }
}

}  // namespace detail

/// One-hot encodes sex and race, min-max scales the continuous columns with
/// constants fit on `records`. Columns: snp, age, weight, hgb, alb, extra_1,
/// extra_2, sex_*, race_*.
inline DesignMatrix preprocess_covariates(std::span<const pksim::CovariateRecord> records) {
  detail::check_records(records);
  MinMaxScaling s;
  for (std::size_t k = 0; k < kContinuousColumns.size(); ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& r : records) {
      const double v = detail::continuous_value(r, k);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (!(hi > lo))
      throw std::invalid_argument("preprocess_covariates: column '" + std::string(kContinuousColumns[k]) +
                                  "' is constant, min-max scaling is degenerate");
    s.min.push_back(lo);
    s.max.push_back(hi);
  }
  return detail::encode(records, s);
}

/// Applies previously fit scaling constants.
inline DesignMatrix preprocess_covariates(std::span<const pksim::CovariateRecord> records,
                                          const MinMaxScaling& scaling) {
  detail::check_records(records);
  if (scaling.min.size() != kContinuousColumns.size() || scaling.max.size() != kContinuousColumns.size())
    throw std::invalid_argument("preprocess_covariates: scaling constants have wrong length");
  for (std::size_t k = 0; k < kContinuousColumns.size(); ++k)
    if (!(scaling.max[k] > scaling.min[k]))
      throw std::invalid_argument("preprocess_covariates: degenerate scaling for '" +
                                  std::string(kContinuousColumns[k]) + "'");
  return detail::encode(records, scaling);
}

/// How latent targets are expressed before fitting. `standardize` centers each
/// latent dimension and divides by its standard deviation.
enum class TargetScaling { none, standardize };

inline std::string to_string(TargetScaling t) { return t == TargetScaling::none ? "none" : "standardize"; }

inline TargetScaling parse_target_scaling(const std::string& s) {
  if (s == "none") return TargetScaling::none;
  if (s == "standardize") return TargetScaling::standardize;
  throw std::invalid_argument("unknown target scaling '" + s + "'");
}

struct ScaledTargets {
  MatrixXd values;
  VectorXd offset;  // original = values * scale + offset, per column
  VectorXd scale;
};

inline ScaledTargets scale_targets(const MatrixXd& targets, TargetScaling mode) {
  ScaledTargets out;
  const auto d = targets.cols();
  out.offset = VectorXd::Zero(d);
  out.scale = VectorXd::Ones(d);
  if (mode == TargetScaling::standardize) {
    out.offset = targets.colwise().mean().transpose();
    for (Eigen::Index k = 0; k < d; ++k) {
      const double sd = std::sqrt((targets.col(k).array() - out.offset[k]).square().mean());
      if (!(sd > 0)) throw std::invalid_argument("scale_targets: latent dimension " + std::to_string(k) + " is constant");
      out.scale[k] = sd;
    }
  }
  out.values = (targets.rowwise() - out.offset.transpose()).array().rowwise() / out.scale.transpose().array();
  return out;
}

struct LassoOptions {
  double tolerance = 1e-8;  // on the largest coefficient change in a sweep
  std::size_t max_iterations = 10000;  // sweeps
  bool record_objective = false;
};

struct LassoFit {
  VectorXd coefficients;
  double intercept = 0;
  double lambda = 0;
  std::size_t n_iterations = 0;
  bool converged = false;
  double objective = 0;
  std::vector<double> objective_trace;  // after each sweep, when requested
};

inline double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

/// Centered copy of a design matrix, reusable across targets and lambdas.
class CenteredDesign {
 public:
  explicit CenteredDesign(const MatrixXd& x) : mean_(x.colwise().mean().transpose()), x_(x) {
    if (x.rows() < 2) throw std::invalid_argument("fit_lasso: need at least two rows");
    x_.rowwise() -= mean_.transpose();
    const double n = static_cast<double>(x.rows());
    second_moment_ = x_.colwise().squaredNorm().transpose() / n;
  }

  const MatrixXd& x() const { return x_; }
  const VectorXd& mean() const { return mean_; }
  const VectorXd& second_moment() const { return second_moment_; }
  Eigen::Index rows() const { return x_.rows(); }
  Eigen::Index cols() const { return x_.cols(); }

 private:
  VectorXd mean_;
  MatrixXd x_;
  VectorXd second_moment_;
};

inline double objective(const CenteredDesign& d, const VectorXd& y_centered, const VectorXd& beta, double lambda) {
  const VectorXd r = y_centered - d.x() * beta;
  return r.squaredNorm() / (2.0 * static_cast<double>(d.rows())) + lambda * beta.lpNorm<1>();
}

inline LassoFit fit_lasso(const CenteredDesign& d, const VectorXd& y, double lambda, const LassoOptions& opt = {},
                          const VectorXd* warm_start = nullptr) {
  if (y.size() != d.rows()) throw std::invalid_argument("fit_lasso: target length does not match design rows");
  if (!(lambda >= 0)) throw std::invalid_argument("fit_lasso: lambda must be >= 0");
  const double n = static_cast<double>(d.rows());
  const double y_mean = y.mean();
  const VectorXd yc = y.array() - y_mean;

  LassoFit fit;
  fit.lambda = lambda;
  fit.coefficients = warm_start ? *warm_start : VectorXd::Zero(d.cols());
  if (fit.coefficients.size() != d.cols()) throw std::invalid_argument("fit_lasso: warm start has wrong length");
  VectorXd& beta = fit.coefficients;
  VectorXd r = yc - d.x() * beta;

  while (fit.n_iterations < opt.max_iterations) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < d.cols(); ++j) {
      const double sq = d.second_moment()[j];
      const double old = beta[j];
      if (sq <= 0.0) {
        beta[j] = 0.0;
        continue;
      }
      const double rho = d.x().col(j).dot(r) / n + sq * old;
      const double updated = soft_threshold(rho, lambda) / sq;
      if (updated != old) {
        r.noalias() -= (updated - old) * d.x().col(j);
        beta[j] = updated;
        max_change = std::max(max_change, std::abs(updated - old));
      }
    }
    ++fit.n_iterations;
    if (opt.record_objective)
      fit.objective_trace.push_back(r.squaredNorm() / (2.0 * n) + lambda * beta.lpNorm<1>());
    if (max_change < opt.tolerance) {
      fit.converged = true;
      break;
    }
  }
  fit.intercept = y_mean - d.mean().dot(beta);
  fit.objective = objective(d, yc, beta, lambda);
  return fit;
}

inline LassoFit fit_lasso(const MatrixXd& x, const VectorXd& y, double lambda, const LassoOptions& opt = {}) {
  return fit_lasso(CenteredDesign(x), y, lambda, opt);
}

/// Smallest lambda at which every coefficient is zero: max_j |x_j^T (y - mean y)| / n.
inline double lambda_max(const MatrixXd& x, const VectorXd& y) {
  const CenteredDesign d(x);
  const VectorXd yc = y.array() - y.mean();
  return (d.x().transpose() * yc).cwiseAbs().maxCoeff() / static_cast<double>(x.rows());
}

/// Largest violation of the lasso optimality conditions:
/// |g_j - lambda sign(b_j)| for b_j != 0 and max(0, |g_j| - lambda) for b_j = 0,
/// with g = X^T r / n on the fitted residual r.
inline double kkt_violation(const MatrixXd& x, const VectorXd& y, const LassoFit& fit) {
  const VectorXd r = y - (x * fit.coefficients).eval() - VectorXd::Constant(y.size(), fit.intercept);
  const VectorXd g = x.transpose() * r / static_cast<double>(x.rows());
  double worst = 0.0;
  for (Eigen::Index j = 0; j < g.size(); ++j) {
    const double b = fit.coefficients[j];
    const double v = b != 0.0 ? std::abs(g[j] - fit.lambda * (b > 0 ? 1.0 : -1.0))
                              : std::max(0.0, std::abs(g[j]) - fit.lambda);
    worst = std::max(worst, v);
  }
  return worst;
}

struct LassoPathResult {
  std::vector<double> lambdas;  // as given
  std::vector<std::string> column_names;
  std::vector<std::size_t> group_of_column;
  std::vector<std::string> covariates;
  std::size_t latent_dim = 0;
  TargetScaling target_scaling = TargetScaling::none;
  std::vector<double> target_offset;  // per dimension; see ScaledTargets
  std::vector<double> target_scale;
  // Indexed [lambda][dimension].
  std::vector<std::vector<VectorXd>> coefficients;
  std::vector<std::vector<double>> intercepts;
  std::vector<std::vector<bool>> converged;
  std::vector<std::vector<std::size_t>> iterations;
  std::vector<std::vector<double>> kkt;
  // Indexed [lambda][covariate]: mean over dimensions of the summed |b| of the covariate's columns.
  std::vector<std::vector<double>> importance;

  bool all_converged() const {
    for (const auto& row : converged)
      for (bool c : row)
        if (!c) return false;
    return true;
  }
};

inline std::vector<std::vector<double>> aggregate_importance(const LassoPathResult& path) {
  std::vector<std::vector<double>> imp(path.lambdas.size(), std::vector<double>(path.covariates.size(), 0.0));
  for (std::size_t l = 0; l < path.lambdas.size(); ++l) {
    for (std::size_t d = 0; d < path.latent_dim; ++d)
      for (std::size_t j = 0; j < path.column_names.size(); ++j)
        imp[l][path.group_of_column[j]] += std::abs(path.coefficients[l][d][static_cast<Eigen::Index>(j)]);
    for (double& v : imp[l]) v /= static_cast<double>(path.latent_dim);
  }
  return imp;
}

/// Fits every latent dimension along the lambda grid, largest lambda first
/// with warm starts. Results keep the caller's grid order.
inline LassoPathResult fit_path(const DesignMatrix& x, const MatrixXd& raw_targets, std::span<const double> lambdas,
                                const LassoOptions& opt = {}, TargetScaling scaling = TargetScaling::none) {
  if (raw_targets.rows() != x.values.rows())
    throw std::invalid_argument("fit_path: targets have " + std::to_string(raw_targets.rows()) +
                                " rows, design has " + std::to_string(x.values.rows()));
  if (lambdas.empty()) throw std::invalid_argument("fit_path: empty lambda grid");
  for (double l : lambdas)
    if (!(l >= 0)) throw std::invalid_argument("fit_path: lambdas must be >= 0");

  const ScaledTargets scaled = scale_targets(raw_targets, scaling);
  const MatrixXd& targets = scaled.values;
  LassoPathResult res;
  res.target_scaling = scaling;
  res.target_offset.assign(scaled.offset.data(), scaled.offset.data() + scaled.offset.size());
  res.target_scale.assign(scaled.scale.data(), scaled.scale.data() + scaled.scale.size());
  res.lambdas.assign(lambdas.begin(), lambdas.end());
  res.column_names = x.column_names;
  res.group_of_column = x.group_of_column;
  for (auto c : pksim::kCovariateNames) res.covariates.emplace_back(c);
  res.latent_dim = static_cast<std::size_t>(targets.cols());
  const std::size_t nl = lambdas.size(), nd = res.latent_dim;
  res.coefficients.assign(nl, std::vector<VectorXd>(nd));
  res.intercepts.assign(nl, std::vector<double>(nd));
  res.converged.assign(nl, std::vector<bool>(nd));
  res.iterations.assign(nl, std::vector<std::size_t>(nd));
  res.kkt.assign(nl, std::vector<double>(nd));

  std::vector<std::size_t> order(nl);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return lambdas[a] > lambdas[b]; });

  const CenteredDesign design(x.values);
  for (std::size_t d = 0; d < nd; ++d) {
    const VectorXd y = targets.col(static_cast<Eigen::Index>(d));
    std::optional<LassoFit> prev;
    for (std::size_t idx : order) {
      LassoFit fit;
      if (prev && prev->lambda == lambdas[idx]) {
        fit = *prev;
      } else {
        fit = fit_lasso(design, y, lambdas[idx], opt, prev ? &prev->coefficients : nullptr);
      }
      res.coefficients[idx][d] = fit.coefficients;
      res.intercepts[idx][d] = fit.intercept;
      res.converged[idx][d] = fit.converged;
      res.iterations[idx][d] = fit.n_iterations;
      res.kkt[idx][d] = kkt_violation(x.values, y, fit);
      prev = std::move(fit);
    }
  }
  res.importance = aggregate_importance(res);
  return res;
}

/// Predicted latent targets (n x latent_dim) for one lambda slice, in the
/// original latent units.
inline MatrixXd predict(const LassoPathResult& path, std::size_t lambda_index, const MatrixXd& x) {
  MatrixXd out(x.rows(), static_cast<Eigen::Index>(path.latent_dim));
  for (std::size_t d = 0; d < path.latent_dim; ++d)
    out.col(static_cast<Eigen::Index>(d)) =
        ((x * path.coefficients[lambda_index][d]).array() + path.intercepts[lambda_index][d]) * path.target_scale[d] +
        path.target_offset[d];
  return out;
}

struct SelectionEntry {
  double lambda = 0;
  std::vector<std::string> retained;
  std::vector<std::string> eliminated;
};

struct SeriesPoint {
  std::string covariate;
  double lambda = 0;
  double importance = 0;
  bool retained = false;

  bool operator==(const SeriesPoint&) const = default;
};

struct SelectionReport {
  double zero_threshold = 1e-10;
  std::vector<std::string> covariates;
  std::vector<SelectionEntry> per_lambda;  // grid order
  // Smallest grid lambda from which the covariate stays at zero importance; empty if never.
  std::vector<std::optional<double>> elimination_lambda;
  std::vector<SeriesPoint> series;

  std::optional<double> elimination_of(std::string_view covariate) const {
    for (std::size_t i = 0; i < covariates.size(); ++i)
      if (covariates[i] == covariate) return elimination_lambda[i];
    throw std::invalid_argument("unknown covariate " + std::string(covariate));
  }
};

inline SelectionReport selection_report(const LassoPathResult& path, double zero_threshold = 1e-10) {
  SelectionReport rep;
  rep.zero_threshold = zero_threshold;
  rep.covariates = path.covariates;
  const std::size_t nl = path.lambdas.size(), nc = path.covariates.size();
  for (std::size_t l = 0; l < nl; ++l) {
    SelectionEntry e;
    e.lambda = path.lambdas[l];
    for (std::size_t c = 0; c < nc; ++c) {
      const bool kept = path.importance[l][c] > zero_threshold;
      (kept ? e.retained : e.eliminated).push_back(path.covariates[c]);
      rep.series.push_back({path.covariates[c], path.lambdas[l], path.importance[l][c], kept});
    }
    rep.per_lambda.push_back(std::move(e));
  }

  std::vector<std::size_t> asc(nl);
  std::iota(asc.begin(), asc.end(), std::size_t{0});
  std::stable_sort(asc.begin(), asc.end(), [&](auto a, auto b) { return path.lambdas[a] < path.lambdas[b]; });
  for (std::size_t c = 0; c < nc; ++c) {
    std::optional<double> elim;
    for (std::size_t k = nl; k-- > 0;) {
      if (path.importance[asc[k]][c] > zero_threshold) break;
      elim = path.lambdas[asc[k]];
    }
    rep.elimination_lambda.push_back(elim);
  }
  return rep;
}

inline nlohmann::json to_json(const LassoPathResult& p) {
  nlohmann::json coef = nlohmann::json::array();
  for (const auto& slice : p.coefficients) {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& v : slice) s.push_back(std::vector<double>(v.data(), v.data() + v.size()));
    coef.push_back(s);
  }
  return {{"format_version", kPathFormatVersion},
          {"lambdas", p.lambdas},
          {"column_names", p.column_names},
          {"column_groups", p.group_of_column},
          {"covariates", p.covariates},
          {"latent_dim", p.latent_dim},
          {"target_scaling", to_string(p.target_scaling)},
          {"target_offset", p.target_offset},
          {"target_scale", p.target_scale},
          {"coefficients", coef},
          {"intercepts", p.intercepts},
          {"converged", p.converged},
          {"iterations", p.iterations},
          {"kkt_violation", p.kkt},
          {"importance", p.importance}};
}

inline LassoPathResult path_from_json(const nlohmann::json& j) {
  if (j.value("format_version", -1) != kPathFormatVersion)
    throw std::invalid_argument("path json: unsupported format_version");
  LassoPathResult p;
  p.lambdas = j.at("lambdas").get<std::vector<double>>();
  p.column_names = j.at("column_names").get<std::vector<std::string>>();
  p.group_of_column = j.at("column_groups").get<std::vector<std::size_t>>();
  p.covariates = j.at("covariates").get<std::vector<std::string>>();
  p.latent_dim = j.at("latent_dim").get<std::size_t>();
  p.target_scaling = parse_target_scaling(j.at("target_scaling").get<std::string>());
  p.target_offset = j.at("target_offset").get<std::vector<double>>();
  p.target_scale = j.at("target_scale").get<std::vector<double>>();
  if (p.target_offset.size() != p.latent_dim || p.target_scale.size() != p.latent_dim)
    throw std::invalid_argument("path json: target scaling has wrong length");
  p.intercepts = j.at("intercepts").get<std::vector<std::vector<double>>>();
  p.converged = j.at("converged").get<std::vector<std::vector<bool>>>();
  p.iterations = j.at("iterations").get<std::vector<std::vector<std::size_t>>>();
  p.kkt = j.at("kkt_violation").get<std::vector<std::vector<double>>>();
  p.importance = j.at("importance").get<std::vector<std::vector<double>>>();
  const std::size_t nl = p.lambdas.size(), p_cols = p.column_names.size();
  const auto& coef = j.at("coefficients");
  if (coef.size() != nl || p.group_of_column.size() != p_cols || p.importance.size() != nl)
    throw std::invalid_argument("path json: inconsistent dimensions");
  for (const auto& slice : coef) {
    if (slice.size() != p.latent_dim) throw std::invalid_argument("path json: coefficient slice has wrong latent_dim");
    std::vector<VectorXd> s;
    for (const auto& v : slice) {
      auto vals = v.get<std::vector<double>>();
      if (vals.size() != p_cols) throw std::invalid_argument("path json: coefficient vector has wrong length");
      s.push_back(Eigen::Map<VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size())));
    }
    p.coefficients.push_back(std::move(s));
  }
  for (auto g : p.group_of_column)
    if (g >= p.covariates.size()) throw std::invalid_argument("path json: column group out of range");
  return p;
}

inline nlohmann::json to_json(const SelectionReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& e : r.per_lambda)
    per.push_back({{"lambda", e.lambda}, {"retained", e.retained}, {"eliminated", e.eliminated}});
  nlohmann::json elim = nlohmann::json::object();
  for (std::size_t i = 0; i < r.covariates.size(); ++i)
    elim[r.covariates[i]] = r.elimination_lambda[i] ? nlohmann::json(*r.elimination_lambda[i]) : nlohmann::json();
  return {{"format_version", kPathFormatVersion},
          {"zero_threshold", r.zero_threshold},
          {"covariates", r.covariates},
          {"per_lambda", per},
          {"elimination_lambda", elim}};
}

}  // namespace vaelasso::lasso
