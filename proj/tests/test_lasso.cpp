#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "vaelasso/lasso.hpp"
#include "vaelasso/pksim.hpp"

using namespace vaelasso;
using namespace vaelasso::lasso;

namespace {

MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

VectorXd ols(const MatrixXd& x, const VectorXd& y) {
  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  const VectorXd yc = y.array() - y.mean();
  return (xc.transpose() * xc).ldlt().solve(xc.transpose() * yc);
}

std::vector<pksim::CovariateRecord> records(std::size_t n, std::uint64_t seed) {
  Rng rng = make_stream(seed, 0);
  return pksim::sample_covariates(rng, n);
}

}  // namespace

TEST(SoftThreshold, Cases) {
  EXPECT_EQ(soft_threshold(1.0, 0.3), 0.7);
  EXPECT_EQ(soft_threshold(-1.0, 0.3), -0.7);
  EXPECT_EQ(soft_threshold(0.2, 0.3), 0.0);
}

TEST(FitLasso, SinglePredictorExample) {
  MatrixXd x(4, 1);
  x << 1, -1, 1, -1;
  VectorXd y(4);
  y << 2, 0, 2, 0;
  const auto fit = fit_lasso(x, y, 0.3);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.coefficients[0], 0.7, 1e-10);
  EXPECT_NEAR(fit.intercept, 1.0, 1e-10);
}

TEST(FitLasso, AboveLambdaMaxAllZero) {
  Rng rng = make_stream(1, 0);
  const MatrixXd x = gaussian(50, 5, rng);
  const VectorXd y = gaussian(50, 1, rng);
  const auto fit = fit_lasso(x, y, lambda_max(x, y) * (1 + 1e-9));
  EXPECT_TRUE(fit.coefficients.isZero());
  EXPECT_NEAR(fit.intercept, y.mean(), 1e-12);
}

TEST(FitLasso, LambdaZeroMatchesNormalEquations) {
  Rng rng = make_stream(2, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixXd x = gaussian(100, 1 + trial % 10, rng);
    const VectorXd y = x * gaussian(x.cols(), 1, rng) + 0.1 * gaussian(100, 1, rng);
    const auto fit = fit_lasso(x, y, 0.0, {.tolerance = 1e-13, .max_iterations = 100000});
    EXPECT_LT((fit.coefficients - ols(x, y)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(FitLasso, KktHoldsAndObjectiveMonotone) {
  Rng rng = make_stream(3, 0);
  const MatrixXd x = gaussian(80, 8, rng);
  const VectorXd y = x.col(0) - 0.5 * x.col(3) + gaussian(80, 1, rng);
  for (double lambda : {0.0, 0.01, 0.1, 0.5}) {
    const auto fit = fit_lasso(x, y, lambda, {.record_objective = true});
    ASSERT_TRUE(fit.converged);
    EXPECT_LE(kkt_violation(x, y, fit), 10 * 1e-8);
    for (std::size_t i = 1; i < fit.objective_trace.size(); ++i)
      EXPECT_LE(fit.objective_trace[i], fit.objective_trace[i - 1] + 1e-15);
  }
}

TEST(FitLasso, RowPermutationInvariant) {
  Rng rng = make_stream(4, 0);
  const MatrixXd x = gaussian(60, 6, rng);
  const VectorXd y = x.col(1) + gaussian(60, 1, rng);
  std::vector<int> perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  MatrixXd xp(60, 6);
  VectorXd yp(60);
  for (int i = 0; i < 60; ++i) {
    xp.row(i) = x.row(perm[i]);
    yp[i] = y[perm[i]];
  }
  const LassoOptions opt{.tolerance = 1e-14, .max_iterations = 100000};
  const auto a = fit_lasso(x, y, 0.05, opt), b = fit_lasso(xp, yp, 0.05, opt);
  EXPECT_LT((a.coefficients - b.coefficients).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FitLasso, BruteForceGridForTwoPredictors) {
  Rng rng = make_stream(5, 0);
  for (int trial = 0; trial < 3; ++trial) {
    const MatrixXd x = gaussian(40, 2, rng);
    const VectorXd y = 0.4 * x.col(0) - 0.2 * x.col(1) + 0.3 * gaussian(40, 1, rng);
    const double lambda = 0.05;
    const CenteredDesign d(x);
    const VectorXd yc = y.array() - y.mean();
    const auto fit = fit_lasso(d, y, lambda);
    double best = std::numeric_limits<double>::infinity();
    VectorXd b(2);
    for (int i = -1000; i <= 1000; ++i)
      for (int j = -1000; j <= 1000; ++j) {
        b << i * 1e-3, j * 1e-3;
        best = std::min(best, objective(d, yc, b, lambda));
      }
    EXPECT_GE(best, fit.objective - 1e-6);
    EXPECT_LT(best - fit.objective, 1e-5);
  }
}

TEST(FitLasso, NonConvergenceFlagged) {
  Rng rng = make_stream(6, 0);
  const MatrixXd x = gaussian(30, 5, rng);
  const VectorXd y = gaussian(30, 1, rng);
  const auto fit = fit_lasso(x, y, 0.0, {.tolerance = 1e-15, .max_iterations = 1});
  EXPECT_FALSE(fit.converged);
  EXPECT_EQ(fit.n_iterations, 1u);
}

TEST(FitLasso, RejectsBadInputs) {
  EXPECT_THROW(fit_lasso(MatrixXd::Ones(1, 2), VectorXd::Ones(1), 0.1), std::invalid_argument);
  EXPECT_THROW(fit_lasso(MatrixXd::Ones(3, 2), VectorXd::Ones(2), 0.1), std::invalid_argument);
  EXPECT_THROW(fit_lasso(MatrixXd::Random(3, 2), VectorXd::Ones(3), -1.0), std::invalid_argument);
}

TEST(Preprocess, ColumnsAndScaling) {
  const auto recs = records(10000, 7);
  const auto d = preprocess_covariates(recs);
  ASSERT_EQ(d.cols(), 14u);
  EXPECT_EQ(d.column_names[7], "sex_male");
  EXPECT_EQ(d.values.leftCols(7).minCoeff(), 0.0);
  EXPECT_EQ(d.values.leftCols(7).maxCoeff(), 1.0);
  const auto oldest = std::max_element(recs.begin(), recs.end(), [](auto& a, auto& b) { return a.age < b.age; });
  EXPECT_EQ(d.values(oldest - recs.begin(), 1), 1.0);
  for (Eigen::Index i = 0; i < d.values.rows(); ++i) {
    EXPECT_EQ(d.values.row(i).segment(7, 2).sum(), 1.0);
    EXPECT_EQ(d.values.row(i).segment(9, 5).sum(), 1.0);
  }
}

TEST(Preprocess, OneHotSex) {
  auto recs = records(20, 8);
  recs[0].sex = pksim::Sex::male;
  recs[1].sex = pksim::Sex::female;
  const auto d = preprocess_covariates(recs);
  EXPECT_EQ(d.values(0, 7), 1.0);
  EXPECT_EQ(d.values(0, 8), 0.0);
  EXPECT_EQ(d.values(1, 7), 0.0);
  EXPECT_EQ(d.values(1, 8), 1.0);
}

TEST(Preprocess, DegenerateColumnRejected) {
  auto recs = records(20, 9);
  for (auto& r : recs) r.age = 50;
  EXPECT_THROW(preprocess_covariates(recs), std::invalid_argument);
}

TEST(Preprocess, AppliesSuppliedScaling) {
  const auto train = records(100, 10), test = records(10, 11);
  const auto fitted = preprocess_covariates(train);
  const auto applied = preprocess_covariates(test, fitted.scaling);
  EXPECT_EQ(applied.scaling.min, fitted.scaling.min);
  EXPECT_EQ(applied.cols(), 14u);
}

TEST(FitPath, DuplicateLambdaGivesIdenticalSlices) {
  const auto recs = records(200, 12);
  const auto d = preprocess_covariates(recs);
  Rng rng = make_stream(12, 1);
  const MatrixXd targets = d.values.leftCols(2) * gaussian(2, 3, rng) + 0.1 * gaussian(200, 3, rng);
  const std::vector<double> grid{0.01, 0.001, 0.01};
  const auto path = fit_path(d, targets, grid);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(path.coefficients[0][k], path.coefficients[2][k]);
  EXPECT_EQ(path.importance[0], path.importance[2]);
}

TEST(FitPath, SparsityMonotoneAndLargeLambdaEmpty) {
  const auto recs = records(500, 13);
  const auto d = preprocess_covariates(recs);
  Rng rng = make_stream(13, 1);
  const MatrixXd targets = d.values.leftCols(3) * gaussian(3, 2, rng) + 0.2 * gaussian(500, 2, rng);
  const std::vector<double> grid{0.0001, 0.002, 0.005, 0.008, 0.01, 0.1, 1.0};
  const auto path = fit_path(d, targets, grid, {}, TargetScaling::standardize);
  EXPECT_TRUE(path.all_converged());
  for (std::size_t k = 0; k < path.latent_dim; ++k)
    for (std::size_t l = 1; l < grid.size(); ++l) {
      auto nnz = [&](std::size_t li) { return (path.coefficients[li][k].array() != 0).count(); };
      EXPECT_LE(nnz(l), nnz(l - 1));
    }
  for (double v : path.importance.back()) EXPECT_EQ(v, 0.0);
  for (const auto& row : path.kkt)
    for (double v : row) EXPECT_LE(v, 1e-7);
}

TEST(FitPath, SingleDimensionImportanceIsAggregate) {
  const auto recs = records(100, 14);
  const auto d = preprocess_covariates(recs);
  Rng rng = make_stream(14, 1);
  const MatrixXd targets = d.values * gaussian(14, 1, rng);
  const std::vector<double> grid{0.001};
  const auto path = fit_path(d, targets, grid);
  std::vector<double> agg(9, 0.0);
  for (std::size_t j = 0; j < 14; ++j) agg[d.group_of_column[j]] += std::abs(path.coefficients[0][0][j]);
  EXPECT_EQ(path.importance[0], agg);
}

TEST(FitPath, PredictReturnsOriginalUnits) {
  const auto recs = records(300, 15);
  const auto d = preprocess_covariates(recs);
  Rng rng = make_stream(15, 1);
  const MatrixXd targets = (d.values * gaussian(14, 2, rng)).array() * 0.05 + 3.0;
  const std::vector<double> grid{0.0};
  for (auto s : {TargetScaling::none, TargetScaling::standardize}) {
    const auto path = fit_path(d, targets, grid, {.tolerance = 1e-12, .max_iterations = 100000}, s);
    EXPECT_LT((predict(path, 0, d.values) - targets).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Selection, AllZeroPathEliminatesEverythingAtSmallestLambda) {
  LassoPathResult p;
  p.lambdas = {0.5, 0.1};
  for (auto c : pksim::kCovariateNames) p.covariates.emplace_back(c);
  p.importance.assign(2, std::vector<double>(9, 0.0));
  const auto rep = selection_report(p);
  for (std::size_t c = 0; c < 9; ++c) EXPECT_EQ(rep.elimination_lambda[c], 0.1);
  for (const auto& e : rep.per_lambda) {
    EXPECT_TRUE(e.retained.empty());
    EXPECT_EQ(e.eliminated.size(), 9u);
  }
  EXPECT_EQ(rep.series.size(), 18u);
}

TEST(Selection, EliminationMustPersist) {
  LassoPathResult p;
  p.lambdas = {0.001, 0.01, 0.1};
  for (auto c : pksim::kCovariateNames) p.covariates.emplace_back(c);
  p.importance = {std::vector<double>(9, 1.0), std::vector<double>(9, 0.0), std::vector<double>(9, 0.0)};
  p.importance[2][0] = 0.5;  // snp reappears at the largest lambda
  p.importance[1][0] = 0.5;
  p.importance[2][1] = 0.3;  // age vanishes then returns
  const auto rep = selection_report(p);
  EXPECT_FALSE(rep.elimination_of("snp").has_value());
  EXPECT_FALSE(rep.elimination_of("age").has_value());
  EXPECT_EQ(rep.elimination_of("hgb"), 0.01);
  for (const auto& e : rep.per_lambda) EXPECT_EQ(e.retained.size() + e.eliminated.size(), 9u);
}

TEST(Serialization, PathRoundTrip) {
  const auto recs = records(100, 16);
  const auto d = preprocess_covariates(recs);
  Rng rng = make_stream(16, 1);
  const MatrixXd targets = d.values * gaussian(14, 2, rng);
  const std::vector<double> grid{0.01, 0.001};
  const auto path = fit_path(d, targets, grid, {}, TargetScaling::standardize);
  const auto back = path_from_json(nlohmann::json::parse(to_json(path).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(path).dump());
  EXPECT_EQ(back.importance, path.importance);
}
