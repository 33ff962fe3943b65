#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "netlmm/estim.hpp"
#include "netlmm/simlab.hpp"
#include "oracles.hpp"

using namespace netlmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr VMode kModes[] = {VMode::kDiagonalCell, VMode::kDiagonalEdge, VMode::kBlock};

NetworkPopulation single_edge(const std::vector<double>& y, const std::vector<double>& g = {}) {
  std::vector<SubjectNetwork> subs;
  for (std::size_t m = 0; m < y.size(); ++m) {
    MatrixXd w = MatrixXd::Zero(2, 2);
    w(0, 1) = w(1, 0) = y[m];
    VectorXd x(g.empty() ? 1 : 2);
    x[0] = 1.0;
    if (!g.empty()) x[1] = g[m];
    subs.push_back({"s" + std::to_string(m), w, x});
  }
  std::vector<std::string> names = {"intercept"};
  if (!g.empty()) names.push_back("group");
  return NetworkPopulation(NodeSet::sequential(2), CellPartition::from_labels(std::vector<int>{0, 0}), subs, names);
}

// Dense constrained GLS: drop the stacked beta columns fixed at zero.
VectorXd constrained_gls(const NetworkPopulation& pop, const oracle::Layout& l, const MatrixXd& sigma,
                         const std::vector<std::pair<std::size_t, std::size_t>>& zeros) {
  const auto p = static_cast<Eigen::Index>(pop.covariate_count());
  const auto dp = static_cast<Eigen::Index>(l.pairs.size()) * p;
  std::vector<bool> drop(static_cast<std::size_t>(dp), false);
  for (const auto& [c, j] : zeros) {
    const VectorXd a = oracle::cell_contrast(l, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j), p);
    for (Eigen::Index k = 0; k < dp; ++k) {
      if (a[k] != 0.0) drop[static_cast<std::size_t>(k)] = true;
    }
  }
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < dp; ++k) {
    if (!drop[static_cast<std::size_t>(k)]) keep.push_back(k);
  }
  const MatrixXd w = sigma.inverse();
  const MatrixXd y = oracle::responses(pop, l);
  const auto nk = static_cast<Eigen::Index>(keep.size());
  MatrixXd a = MatrixXd::Zero(nk, nk);
  VectorXd rhs = VectorXd::Zero(nk);
  for (std::size_t m = 0; m < pop.subject_count(); ++m) {
    const MatrixXd full = oracle::design(l, pop.subjects()[m].covariates);
    MatrixXd x(full.rows(), nk);
    for (Eigen::Index k = 0; k < nk; ++k) x.col(k) = full.col(keep[static_cast<std::size_t>(k)]);
    a += x.transpose() * w * x;
    rhs += x.transpose() * w * y.col(static_cast<Eigen::Index>(m));
  }
  const VectorXd sol = a.ldlt().solve(rhs);
  VectorXd out = VectorXd::Zero(dp);
  for (Eigen::Index k = 0; k < nk; ++k) out[keep[static_cast<std::size_t>(k)]] = sol[k];
  return out;
}

double max_abs_diff(const CoefficientSet& a, const CoefficientSet& b) {
  return std::max((a.beta - b.beta).cwiseAbs().maxCoeff(), (a.eta - b.eta).cwiseAbs().maxCoeff());
}

}  // namespace

TEST(FitOls, InterceptOnlySampleMean) {
  const auto pop = single_edge({3.0, 5.0});
  const auto fit = fit_ols(pop);
  EXPECT_DOUBLE_EQ(fit.alpha.beta(0, 0), 4.0);
}

TEST(FitOls, BinaryCovariateIsMeanDifference) {
  const auto pop = single_edge({1.0, 2.0, 3.0, 7.0, 9.0}, {0, 0, 0, 1, 1});
  const auto fit = fit_ols(pop);
  EXPECT_NEAR(fit.alpha.beta(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(fit.alpha.beta(0, 1), 8.0 - 2.0, 1e-12);
}

TEST(FitOls, MatchesDenseNormalEquations) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = oracle::random_instance(rng, VMode::kDiagonalCell);
    const auto& pop = inst.pop;
    const auto lay = oracle::layout(pop.partition().labels());
    const auto fit = fit_ols(pop);
    const auto ref = oracle::ols(pop, lay);
    EXPECT_LT(oracle::rel_err(fit.alpha.stacked(pop.partition().cells()), ref.alpha), 1e-8) << "trial " << trial;
    EXPECT_LT(fit.alpha.max_eta_sum(pop.partition().cells()), 1e-10);
    // residuals orthogonal to every design column
    const MatrixXd y = oracle::responses(pop, lay);
    VectorXd grad = VectorXd::Zero(ref.alpha.size());
    for (std::size_t m = 0; m < pop.subject_count(); ++m) {
      const MatrixXd x = oracle::design(lay, pop.subjects()[m].covariates);
      grad += x.transpose() * (y.col(static_cast<Eigen::Index>(m)) - x * fit.alpha.stacked(pop.partition().cells()));
    }
    EXPECT_LT(grad.cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, y.cwiseAbs().maxCoeff() * static_cast<double>(pop.subject_count())));
  }
}

TEST(FitOls, RankDeficientCovariatesRejected) {
  const auto pop = single_edge({1.0, 2.0, 3.0}, {1.0, 1.0, 1.0});
  EXPECT_THROW(fit_ols(pop), ValidationError);
}

TEST(CoefficientSet, StackedRoundTrip) {
  std::mt19937_64 rng(3);
  const auto inst = oracle::random_instance(rng, VMode::kDiagonalCell, 2);
  const auto& cells = inst.pop.partition().cells();
  const VectorXd a = VectorXd::Random(static_cast<Eigen::Index>(inst.pop.partition().edge_count()) * 2);
  const auto set = CoefficientSet::from_stacked(a, cells, 2);
  EXPECT_LT(set.max_eta_sum(cells), 1e-12);
  EXPECT_LT((set.stacked(cells) - a).cwiseAbs().maxCoeff(), 1e-14);
  const auto again = CoefficientSet::from_edge_effects(set.edge_effects(cells), cells);
  EXPECT_LT(max_abs_diff(again, set), 1e-14);
}

TEST(FitGls, IdentityCovarianceEqualsOls) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto inst = oracle::random_instance(rng, VMode::kDiagonalCell);
    const auto& cells = inst.pop.partition().cells();
    const StructuredCovariance id(ResidualCov::diagonal_cell(cells, VectorXd::Ones(static_cast<Eigen::Index>(cells.size()))),
                                  MatrixXd::Zero(static_cast<Eigen::Index>(cells.size()), static_cast<Eigen::Index>(cells.size())));
    const auto ols = fit_ols(inst.pop);
    for (GlsSolver solver : {GlsSolver::kClosedForm, GlsSolver::kBlockCoordinate}) {
      GlsOptions o;
      o.solver = solver;
      const auto gls = fit_gls(inst.pop, id, o);
      EXPECT_LT(max_abs_diff(gls.alpha, ols.alpha), 1e-10);
    }
  }
}

TEST(FitGls, MatchesDenseOracle) {
  std::mt19937_64 rng(23);
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 100; ++trial) {
      const auto inst = oracle::random_instance(rng, mode);
      const auto& pop = inst.pop;
      const auto& cells = pop.partition().cells();
      const auto lay = oracle::layout(pop.partition().labels());
      const MatrixXd sigma_dense = oracle::dense_sigma(inst.v, inst.u, lay);
      const auto ref = oracle::gls(pop, lay, sigma_dense);
      const StructuredCovariance sigma(inst.v, inst.u);
      const auto p = static_cast<Eigen::Index>(pop.covariate_count());
      for (GlsSolver solver : {GlsSolver::kClosedForm, GlsSolver::kBlockCoordinate}) {
        GlsOptions o;
        o.solver = solver;
        o.max_iter = 5000;
        o.tol = 1e-13;
        const auto fit = fit_gls(pop, sigma, o);
        EXPECT_LT(oracle::rel_err(fit.alpha.stacked(cells), ref.alpha), 1e-8) << to_string(mode) << " trial " << trial;
      }
      // edge-contrast and cell-contrast variances
      const auto fit = fit_gls(pop, sigma);
      for (std::size_t c = 0; c < cells.size(); ++c) {
        const auto s = static_cast<Eigen::Index>(cells[c].size);
        for (Eigen::Index j = 0; j < p; ++j) {
          const VectorXd uj = VectorXd::Unit(p, j);
          const VectorXd a = oracle::cell_contrast(lay, static_cast<Eigen::Index>(c), j, p);
          const double ref_var = a.dot(ref.cov * a);
          EXPECT_LT(oracle::rel_err(fit.covariance.contrast_variance(c, VectorXd::Constant(s, 1.0 / static_cast<double>(s)), uj), ref_var), 1e-8);
          for (Eigen::Index k = 0; k < s; ++k) {
            const VectorXd e = oracle::edge_contrast(lay, static_cast<Eigen::Index>(cells[c].offset) + k, j, p);
            EXPECT_LT(oracle::rel_err(fit.covariance.contrast_variance(c, VectorXd::Unit(s, k), uj), e.dot(ref.cov * e)), 1e-8);
          }
        }
      }
    }
  }
}

TEST(FitGls, ZeroConstraintsMatchDenseOracle) {
  std::mt19937_64 rng(29);
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 40; ++trial) {
      const auto inst = oracle::random_instance(rng, mode, 2);
      const auto& pop = inst.pop;
      const auto& cells = pop.partition().cells();
      const auto lay = oracle::layout(pop.partition().labels());
      std::vector<std::pair<std::size_t, std::size_t>> zeros;
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (std::bernoulli_distribution(0.5)(rng)) zeros.emplace_back(c, 1);
      }
      if (zeros.empty()) zeros.emplace_back(0, 1);
      const VectorXd ref = constrained_gls(pop, lay, oracle::dense_sigma(inst.v, inst.u, lay), zeros);
      GlsOptions o;
      o.zero_beta = zeros;
      const auto fit = fit_gls(pop, StructuredCovariance(inst.v, inst.u), o);
      EXPECT_LT(oracle::rel_err(fit.alpha.stacked(cells), ref), 1e-8) << to_string(mode) << " trial " << trial;
      for (const auto& [c, j] : zeros) {
        EXPECT_EQ(fit.alpha.beta(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)), 0.0);
      }
      EXPECT_LT(fit.alpha.max_eta_sum(cells), 1e-10);
    }
  }
}

TEST(FitGls, ConstrainedEstimatorUnbiased) {
  // Monte Carlo mean of the constrained GLS estimate over 1000 draws.
  MatrixXd beta(3, 2);
  beta << 0.5, 0.0, -0.2, 0.4, 1.0, 0.0;
  MatrixXd u(3, 3);
  u << 1.0, 0.5, 0.3, 0.5, 1.0, 0.2, 0.3, 0.2, 0.8;
  const auto spec = fixture::with_random_eta(fixture::spec({0, 0, 1, 1}, beta, u, VectorXd::Constant(3, 0.5), 8, 8), 4);
  const auto& cells = spec.partition.cells();
  const PopulationSampler sampler(spec);
  const StructuredCovariance sigma_tilde(ResidualCov::diagonal_cell(cells, VectorXd::Ones(3)), 0.5 * u);
  GlsOptions o;
  o.zero_beta = {{0, 1}, {2, 1}};
  const int draws = 1000;
  std::vector<VectorXd> est;
  for (int r = 0; r < draws; ++r) est.push_back(fit_gls(sampler.draw(1000 + static_cast<std::uint64_t>(r)), sigma_tilde, o).alpha.stacked(cells));
  const VectorXd truth = spec.alpha.stacked(cells);
  VectorXd mean = VectorXd::Zero(truth.size());
  for (const auto& e : est) mean += e / draws;
  VectorXd var = VectorXd::Zero(truth.size());
  for (const auto& e : est) var += (e - mean).cwiseAbs2() / (draws - 1);
  for (Eigen::Index k = 0; k < truth.size(); ++k) {
    EXPECT_LE(std::abs(mean[k] - truth[k]), 3.0 * std::sqrt(var[k] / draws) + 1e-12) << "coefficient " << k;
  }
}

TEST(MarginalLoglik, ZeroResidualIdentity) {
  const auto pop = single_edge({2.0, 2.0, 2.0});
  const auto& cells = pop.partition().cells();
  CoefficientSet alpha;
  alpha.beta = MatrixXd::Constant(1, 1, 2.0);
  alpha.eta = MatrixXd::Zero(1, 1);
  const StructuredCovariance id(ResidualCov::diagonal_cell(cells, VectorXd::Ones(1)), MatrixXd::Zero(1, 1));
  EXPECT_NEAR(marginal_loglik(pop, alpha, id), -0.5 * 3.0 * 1.0 * std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(MarginalLoglik, MatchesDenseOracleAndScales) {
  std::mt19937_64 rng(31);
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 100; ++trial) {
      const auto inst = oracle::random_instance(rng, mode);
      const auto& pop = inst.pop;
      const auto& cells = pop.partition().cells();
      const auto lay = oracle::layout(pop.partition().labels());
      const auto alpha = fit_ols(pop).alpha;
      const MatrixXd dense = oracle::dense_sigma(inst.v, inst.u, lay);
      const double ll = marginal_loglik(pop, alpha, StructuredCovariance(inst.v, inst.u));
      EXPECT_LT(oracle::rel_err(ll, oracle::loglik(pop, lay, alpha.stacked(cells), dense)), 1e-8) << to_string(mode);
      // Sigma -> c Sigma: L(c) = L(1) - (N d / 2) log c - (1/c - 1) Q / 2
      const double c = 2.5;
      const double nd = static_cast<double>(pop.subject_count() * pop.partition().edge_count());
      const double q = -2.0 * ll - nd * std::log(2.0 * std::numbers::pi) - static_cast<double>(pop.subject_count()) * oracle::logdet(dense);
      ResidualCov vc = inst.v;
      switch (mode) {
        case VMode::kDiagonalCell: vc = ResidualCov::diagonal_cell(cells, c * inst.v.values()); break;
        case VMode::kDiagonalEdge: vc = ResidualCov::diagonal_edge(cells, c * inst.v.values()); break;
        case VMode::kBlock: {
          auto blocks = inst.v.blocks();
          for (auto& b : blocks) b *= c;
          vc = ResidualCov::block(cells, blocks);
          break;
        }
      }
      const double scaled = marginal_loglik(pop, alpha, StructuredCovariance(vc, c * inst.u));
      EXPECT_LT(oracle::rel_err(scaled, ll - 0.5 * nd * std::log(c) - 0.5 * (1.0 / c - 1.0) * q), 1e-8);
    }
  }
}

TEST(FitEm, SingleEdgeMatchesGaussianMle) {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> z(1.5, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> y(40);
    for (auto& v : y) v = z(rng);
    const auto pop = single_edge(y);
    EmOptions o;
    o.tol = 1e-12;  // U + V is only pinned down by the stopping rule
    o.max_iter = 100000;
    const auto fit = fit_em(pop, VMode::kDiagonalCell, o);
    ASSERT_TRUE(fit.converged);
    double mean = 0.0;
    for (double v : y) mean += v / static_cast<double>(y.size());
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean) / static_cast<double>(y.size());
    EXPECT_NEAR(fit.alpha.beta(0, 0), mean, 1e-8 * std::abs(mean));
    const double total = fit.u(0, 0) + fit.v.values()[0];
    EXPECT_NEAR(total, var, 1e-8 * var);
    const double mle_ll = -0.5 * static_cast<double>(y.size()) * (std::log(2.0 * std::numbers::pi * var) + 1.0);
    EXPECT_NEAR(fit.loglik(), mle_ll, 1e-8 * std::abs(mle_ll));
  }
}

TEST(FitEm, LoglikNondecreasingOnRandomInstances) {
  std::mt19937_64 rng(41);
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 25; ++trial) {
      const auto inst = oracle::random_instance(rng, mode);
      EmOptions o;
      o.max_iter = 200;
      const auto fit = fit_em(inst.pop, mode, o);
      for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) {
        EXPECT_GE(fit.loglik_trace[k], fit.loglik_trace[k - 1] - 1e-6) << to_string(mode) << " trial " << trial << " step " << k;
      }
      EXPECT_LT(fit.alpha.max_eta_sum(inst.pop.partition().cells()), 1e-10);
      const double last = marginal_loglik(inst.pop, fit.alpha, fit.sigma());
      EXPECT_NEAR(last, fit.loglik(), 1e-8 * std::abs(last));
      if (fit.converged) {
        EXPECT_LT(std::abs(fit.loglik_trace.back() - fit.loglik_trace[fit.loglik_trace.size() - 2]), o.tol);
      }
    }
  }
}

TEST(FitEm, FullModelMeanIsOls) {
  std::mt19937_64 rng(43);
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto inst = oracle::random_instance(rng, mode);
      EmOptions o;
      o.max_iter = 300;
      const auto fit = fit_em(inst.pop, mode, o);
      const auto ols = fit_ols(inst.pop);
      EXPECT_LT(max_abs_diff(fit.alpha, ols.alpha), 1e-8 * std::max(1.0, ols.alpha.beta.cwiseAbs().maxCoeff()));
    }
  }
}

// A warm start takes the general update; a cold diagonal-cell fit with the
// full mean model iterates on cell summaries. Both must agree step by step.
TEST(FitEm, CellSummaryStepsMatchGeneralUpdate) {
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = oracle::random_instance(rng, VMode::kDiagonalCell);
    for (int k = 1; k <= 4; ++k) {
      EmOptions o;
      o.max_iter = k;
      const auto fast = fit_em(inst.pop, VMode::kDiagonalCell, o);
      o.max_iter = k - 1;
      const auto prev = fit_em(inst.pop, VMode::kDiagonalCell, o);
      EmOptions w;
      w.max_iter = 1;
      w.start = EmStart{prev.alpha, prev.u, prev.v, prev.variance_floor};
      const auto slow = fit_em(inst.pop, VMode::kDiagonalCell, w);
      const double scale = std::max(1.0, fast.u.cwiseAbs().maxCoeff());
      EXPECT_LT((fast.u - slow.u).cwiseAbs().maxCoeff(), 1e-10 * scale) << "trial " << trial << " step " << k;
      EXPECT_LT((fast.v.values() - slow.v.values()).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, fast.v.values().maxCoeff()));
      EXPECT_LT(max_abs_diff(fast.alpha, slow.alpha), 1e-10);
      EXPECT_NEAR(fast.loglik(), slow.loglik(), 1e-9 * std::abs(slow.loglik()));
    }
  }
}

TEST(FitEm, ZeroConstraintsHeldAndMonotone) {
  std::mt19937_64 rng(47);
  for (VMode mode : {VMode::kDiagonalCell, VMode::kDiagonalEdge}) {
    for (int trial = 0; trial < 15; ++trial) {
      const auto inst = oracle::random_instance(rng, mode, 2);
      EmOptions o;
      o.max_iter = 300;
      o.structure.zero_beta = {{0, 1}};
      const auto fit = fit_em(inst.pop, mode, o);
      EXPECT_EQ(fit.alpha.beta(0, 1), 0.0);
      for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) {
        EXPECT_GE(fit.loglik_trace[k], fit.loglik_trace[k - 1] - 1e-6);
      }
    }
  }
}

TEST(FitEm, FixedPointIsStationary) {
  MatrixXd beta(3, 2);
  beta << 0.2, 0.1, -0.1, 0.0, 0.3, -0.2;
  MatrixXd u(3, 3);
  u << 0.5, 0.2, 0.1, 0.2, 0.4, 0.1, 0.1, 0.1, 0.3;
  const auto spec = fixture::spec(fixture::blocks(2, 4), beta, u, VectorXd::Constant(3, 1.0), 40, 40, 9);
  const auto pop = generate(spec);
  for (VMode mode : {VMode::kDiagonalCell, VMode::kDiagonalEdge}) {
    const auto fit = fit_em(pop, mode);
    ASSERT_TRUE(fit.converged) << to_string(mode);
    EmOptions again;
    again.max_iter = 1;
    again.start = EmStart{fit.alpha, fit.u, fit.v, fit.variance_floor};
    const auto next = fit_em(pop, mode, again);
    const double tol = 10.0 * EmOptions{}.tol;
    EXPECT_LT(max_abs_diff(next.alpha, fit.alpha), tol);
    EXPECT_LT((next.u - fit.u).cwiseAbs().maxCoeff(), tol);
    EXPECT_LT((next.v.values() - fit.v.values()).cwiseAbs().maxCoeff(), tol);
  }
}

TEST(FitEm, NullRandomEffectShrinksToZero) {
  // U = 0, V = sigma^2 I at N = 200.
  const double sigma2 = 1.5;
  const auto labels = fixture::blocks(2, 6);
  const auto ncell = static_cast<Eigen::Index>(CellPartition::from_labels(labels).cell_count());
  for (int run = 0; run < 20; ++run) {
    const auto spec = fixture::spec(labels, MatrixXd::Zero(ncell, 2), MatrixXd::Zero(ncell, ncell),
                                    VectorXd::Constant(ncell, sigma2), 100, 100, 500 + static_cast<std::uint64_t>(run));
    const auto fit = fit_em(generate(spec), VMode::kDiagonalCell);
    EXPECT_LT(fit.u.cwiseAbs().maxCoeff(), 5.0 * sigma2 / std::sqrt(200.0)) << "run " << run;
    for (Eigen::Index c = 0; c < ncell; ++c) EXPECT_NEAR(fit.v.values()[c], sigma2, 0.1 * sigma2) << "run " << run;
  }
}

TEST(FitEm, BlockModeOnWellPosedInstance) {
  MatrixXd beta = MatrixXd::Zero(3, 2);
  MatrixXd u(3, 3);
  u << 0.6, 0.2, 0.1, 0.2, 0.5, 0.1, 0.1, 0.1, 0.4;
  const auto spec = fixture::spec({0, 0, 0, 1, 1}, beta, u, VectorXd::Constant(3, 1.0), 60, 60, 3);
  const auto pop = generate(spec);
  const auto fit = fit_em(pop, VMode::kBlock);
  EXPECT_TRUE(fit.converged);
  for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) EXPECT_GE(fit.loglik_trace[k], fit.loglik_trace[k - 1] - 1e-6);
  // The block model nests the diagonal one.
  EXPECT_GE(fit.loglik(), fit_em(pop, VMode::kDiagonalEdge).loglik() - 1e-6);
  EXPECT_GE(fit_em(pop, VMode::kDiagonalEdge).loglik(), fit_em(pop, VMode::kDiagonalCell).loglik() - 1e-6);
}

TEST(FitEm, StartMustMatchPopulation) {
  std::mt19937_64 rng(53);
  const auto a = oracle::random_instance(rng, VMode::kDiagonalCell);
  EmOptions o;
  o.start = EmStart{CoefficientSet{MatrixXd::Zero(1, 1), MatrixXd::Zero(1, 1)}, MatrixXd::Zero(1, 1), {}, {}};
  if (a.pop.partition().edge_count() != 1) EXPECT_THROW(fit_em(a.pop, VMode::kDiagonalCell, o), ValidationError);
}
