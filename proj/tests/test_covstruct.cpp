#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "netlmm/covstruct.hpp"
#include "oracles.hpp"

using namespace netlmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr VMode kModes[] = {VMode::kDiagonalCell, VMode::kDiagonalEdge, VMode::kBlock};

std::vector<Cell> cells_of(const std::vector<int>& labels) { return CellPartition::from_labels(labels).cells(); }

}  // namespace

TEST(ResidualCov, RejectsInvalid) {
  const auto cells = cells_of({0, 0, 1, 1});
  EXPECT_THROW(ResidualCov::diagonal_cell(cells, VectorXd::Ones(2)), ValidationError);
  EXPECT_THROW(ResidualCov::diagonal_cell(cells, -VectorXd::Ones(3)), ValidationError);
  EXPECT_THROW(ResidualCov::diagonal_edge(cells, VectorXd::Ones(5)), ValidationError);
  std::vector<MatrixXd> blocks = {MatrixXd::Identity(1, 1), MatrixXd::Identity(4, 4), MatrixXd::Identity(1, 1)};
  EXPECT_NO_THROW(ResidualCov::block(cells, blocks));
  blocks[1](0, 0) = -1.0;
  EXPECT_THROW(ResidualCov::block(cells, blocks), ValidationError);
  blocks[1] = MatrixXd::Identity(3, 3);
  EXPECT_THROW(ResidualCov::block(cells, blocks), ValidationError);
}

TEST(ResidualCov, TinyNegativeEigenvaluesAreClipped) {
  const auto cells = cells_of({0, 0, 0});
  MatrixXd b = MatrixXd::Ones(3, 3);
  b(0, 0) -= 1e-12;
  const auto v = ResidualCov::block(cells, {b});
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(v.blocks()[0]);
  EXPECT_GE(es.eigenvalues().minCoeff(), 0.0);
  EXPECT_TRUE(v.blocks()[0].isApprox(v.blocks()[0].transpose()));
}

TEST(StructuredCovariance, ZeroUSolvesWithV) {
  std::mt19937_64 rng(1);
  const auto cells = cells_of({0, 0, 0, 1, 1});
  VectorXd vals(10);
  for (auto& x : vals) x = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
  const StructuredCovariance sigma(ResidualCov::diagonal_edge(cells, vals), MatrixXd::Zero(3, 3));
  const VectorXd b = VectorXd::Random(10);
  EXPECT_LT((sigma.solve(b) - b.cwiseQuotient(vals)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(sigma.logdet(), vals.array().log().sum(), 1e-12);
}

TEST(StructuredCovariance, IdentityLogdetIsZero) {
  const auto cells = cells_of({0, 0, 1, 1, 1});
  const StructuredCovariance sigma(ResidualCov::diagonal_cell(cells, VectorXd::Ones(3)), MatrixXd::Zero(3, 3));
  EXPECT_NEAR(sigma.logdet(), 0.0, 1e-14);
}

TEST(StructuredCovariance, EqualCellsClosedForm) {
  // three cells of two edges each
  const std::vector<Cell> cells = {{0, 0, 0, 2}, {0, 1, 2, 2}, {1, 1, 4, 2}};
  const StructuredCovariance sigma(ResidualCov::diagonal_cell(cells, VectorXd::Ones(3)), MatrixXd::Identity(3, 3));
  const double s = 2.0;
  MatrixXd expected = MatrixXd::Identity(6, 6);
  for (int c = 0; c < 3; ++c) expected.block(2 * c, 2 * c, 2, 2).array() -= (s / (s + 1.0)) / s;
  EXPECT_LT((sigma.solve(MatrixXd(MatrixXd::Identity(6, 6))) - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((sigma.dense().inverse() - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(StructuredCovariance, MatchesDenseOracle) {
  std::mt19937_64 rng(42);
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 100; ++trial) {
      const auto inst = oracle::random_instance(rng, mode);
      const auto lay = oracle::layout(inst.pop.partition().labels());
      const StructuredCovariance sigma(inst.v, inst.u);
      const MatrixXd dense = oracle::dense_sigma(inst.v, inst.u, lay);
      ASSERT_LT(oracle::rel_err(sigma.dense(), dense), 1e-14);
      const MatrixXd b = MatrixXd::Random(dense.rows(), 3);
      const MatrixXd s = sigma.solve(b);
      EXPECT_LT(oracle::rel_err(s, oracle::solve(dense, b)), 1e-8) << to_string(mode) << " trial " << trial;
      EXPECT_LT(oracle::rel_err(MatrixXd(dense * s), b), 1e-8);
      EXPECT_LT(oracle::rel_err(sigma.apply(b), MatrixXd(dense * b)), 1e-12);
      EXPECT_LT(oracle::rel_err(sigma.logdet(), oracle::logdet(dense)), 1e-8) << to_string(mode) << " trial " << trial;
      const VectorXd q = sigma.inverse_quadratic(b);
      for (Eigen::Index k = 0; k < b.cols(); ++k) {
        EXPECT_LT(oracle::rel_err(q[k], b.col(k).dot(oracle::solve(dense, b.col(k)).col(0))), 1e-8);
      }
      // posterior covariance U - U Z^T Sigma^{-1} Z U
      const MatrixXd z = oracle::indicator(lay);
      const MatrixXd g = inst.u - inst.u * z.transpose() * oracle::solve(dense, z) * inst.u;
      EXPECT_LT((sigma.posterior_cov() - g).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, g.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(StructuredCovariance, SingularVIsReported) {
  const auto cells = cells_of({0, 0, 1});
  VectorXd vals(2);
  vals << 1.0, 0.0;
  EXPECT_THROW(StructuredCovariance(ResidualCov::diagonal_cell(cells, vals), MatrixXd::Zero(2, 2)), NumericalError);
  MatrixXd u(2, 2);
  u << 1, 2, 2, 1;
  EXPECT_THROW(StructuredCovariance(ResidualCov::diagonal_cell(cells, VectorXd::Ones(2)), u), NumericalError);
}

TEST(ProjectV, DiagonalInputUnchanged) {
  const auto cells = cells_of({0, 0, 1, 1});
  VectorXd d(6);
  d << 1, 2, 3, 4, 5, 6;
  const auto v = project_v(MatrixXd(d.asDiagonal()), VMode::kDiagonalEdge, cells);
  EXPECT_EQ(v.values(), d);
  VectorXd per_cell(3);
  per_cell << 1, 2, 3;
  const auto vc = ResidualCov::diagonal_cell(cells, per_cell);
  EXPECT_EQ(project_v(vc.dense(), VMode::kDiagonalCell, cells).values(), per_cell);
}

TEST(ProjectV, BlockModeZeroesCrossBlocks) {
  std::mt19937_64 rng(7);
  const auto cells = cells_of({0, 0, 0, 1, 1});
  const MatrixXd m = oracle::random_psd(10, rng, 1.0);
  const auto v = project_v(m, VMode::kBlock, cells);
  const MatrixXd dense = v.dense();
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const auto blk = dense.block(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[k].offset),
                                   static_cast<Eigen::Index>(cells[c].size), static_cast<Eigen::Index>(cells[k].size));
      if (c != k) {
        EXPECT_EQ(blk.cwiseAbs().maxCoeff(), 0.0);
      } else {
        const auto src = m.block(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].offset),
                                 static_cast<Eigen::Index>(cells[c].size), static_cast<Eigen::Index>(cells[c].size));
        EXPECT_LT((blk - src).cwiseAbs().maxCoeff(), 1e-12);
      }
    }
  }
  EXPECT_THROW(project_v(MatrixXd::Zero(9, 9), VMode::kBlock, cells), ValidationError);
}

TEST(ProjectV, FrobeniusNearestWithinSparsityClass) {
  // Any perturbation inside the class can only increase the distance.
  std::mt19937_64 rng(13);
  std::normal_distribution<double> z;
  const auto cells = cells_of({0, 0, 1, 1, 1});
  for (VMode mode : kModes) {
    for (int trial = 0; trial < 20; ++trial) {
      MatrixXd a(10, 10);
      for (auto& x : a.reshaped()) x = z(rng);
      a = 0.5 * (a + a.transpose());
      a.diagonal().array() += 20.0;  // keep the projection PSD so clipping is inactive
      const MatrixXd proj = project_v(a, mode, cells).dense();
      const double best = (a - proj).norm();
      for (int k = 0; k < 20; ++k) {
        MatrixXd pert = MatrixXd::Zero(10, 10);
        for (std::size_t c = 0; c < cells.size(); ++c) {
          const auto o = static_cast<Eigen::Index>(cells[c].offset);
          const auto s = static_cast<Eigen::Index>(cells[c].size);
          switch (mode) {
            case VMode::kDiagonalCell: pert.block(o, o, s, s).diagonal().setConstant(0.1 * z(rng)); break;
            case VMode::kDiagonalEdge:
              for (Eigen::Index i = 0; i < s; ++i) pert(o + i, o + i) = 0.1 * z(rng);
              break;
            case VMode::kBlock: {
              MatrixXd b(s, s);
              for (auto& x : b.reshaped()) x = 0.1 * z(rng);
              pert.block(o, o, s, s) = 0.5 * (b + b.transpose());
              break;
            }
          }
        }
        EXPECT_GE((a - proj - pert).norm(), best - 1e-12);
      }
    }
  }
}

TEST(ClipEigenvalues, FloorsSpectrum) {
  MatrixXd a(2, 2);
  a << 1, 2, 2, 1;  // eigenvalues -1, 3
  const MatrixXd c = clip_eigenvalues(a, 0.0);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
  EXPECT_NEAR(es.eigenvalues()[0], 0.0, 1e-14);
  EXPECT_NEAR(es.eigenvalues()[1], 3.0, 1e-14);
  const MatrixXd id = MatrixXd::Identity(3, 3);
  EXPECT_EQ(clip_eigenvalues(id, 0.5), id);
}

TEST(VMode, Parsing) {
  EXPECT_EQ(parse_v_mode("diag"), VMode::kDiagonalCell);
  EXPECT_EQ(parse_v_mode("diag-edge"), VMode::kDiagonalEdge);
  EXPECT_EQ(parse_v_mode("block"), VMode::kBlock);
  EXPECT_THROW(parse_v_mode("full"), ValidationError);
  for (VMode m : kModes) EXPECT_EQ(parse_v_mode(to_string(m)), m);
}
