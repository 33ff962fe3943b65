#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "netlmm/fit_io.hpp"
#include "netlmm/io.hpp"

using namespace netlmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

// Fresh directory named after the running test.
fs::path scratch() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const fs::path dir = fs::temp_directory_path() / "netlmm_tests" / (std::string(info->test_suite_name()) + "_" + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

NetworkPopulation small_population(std::uint64_t seed = 4) {
  MatrixXd beta(3, 2);
  beta << 0.5, 0.2, 0.1, 0.0, 0.4, -0.3;
  auto spec = fixture::spec(fixture::blocks(2, 4), beta, 0.1 * MatrixXd::Identity(3, 3), VectorXd::Constant(3, 0.2), 6, 7, seed);
  return generate(fixture::with_random_eta(spec, seed));
}

void expect_same_population(const NetworkPopulation& a, const NetworkPopulation& b) {
  EXPECT_EQ(a.nodes().ids(), b.nodes().ids());
  EXPECT_EQ(a.partition().labels(), b.partition().labels());
  EXPECT_EQ(a.covariate_names(), b.covariate_names());
  ASSERT_EQ(a.subject_count(), b.subject_count());
  for (std::size_t m = 0; m < a.subject_count(); ++m) EXPECT_EQ(a.subjects()[m].id, b.subjects()[m].id);
  EXPECT_LT((a.response() - b.response()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(a.design(), b.design());
}

}  // namespace

TEST(Partition, RoundTripWithHeaderAndComments) {
  const auto dir = scratch();
  const NodeSet nodes({"L1", "L2", "R1", "R2", "R3"});
  const auto part = CellPartition(std::vector<int>{0, 0, 1, 1, 0}, {"left", "right"});
  io::write_partition(dir / "p.csv", nodes, part, {{"method", "test"}});
  const auto pf = io::read_partition(dir / "p.csv");
  EXPECT_EQ(pf.node_ids, nodes.ids());
  EXPECT_EQ(pf.labels, (std::vector<std::string>{"left", "left", "right", "right", "left"}));

  write_text(dir / "h.csv", "node_id,community_id\n# a comment\n\na,x\nb,y\n");
  const auto ph = io::read_partition(dir / "h.csv");
  EXPECT_EQ(ph.node_ids, (std::vector<std::string>{"a", "b"}));
}

TEST(Matrix, DenseAndLongFormatsAgree) {
  const auto dir = scratch();
  const std::vector<std::string> ids = {"a", "b", "c"};
  write_text(dir / "dense.csv", "9,0.1,0.2\n0.1,9,-0.3\n0.2,-0.3,9\n");
  write_text(dir / "long.csv", "i,j,weight\na,b,0.1\nc,a,0.2\nb,c,-0.3\nc,b,-0.3\n");
  const MatrixXd dense = io::read_matrix(dir / "dense.csv", ids);
  const MatrixXd lng = io::read_matrix(dir / "long.csv", ids);
  EXPECT_EQ(dense, lng);
  EXPECT_EQ(dense.diagonal(), VectorXd::Zero(3));
  EXPECT_DOUBLE_EQ(dense(2, 1), -0.3);
}

TEST(Matrix, RejectsInconsistentInput) {
  const auto dir = scratch();
  const std::vector<std::string> ids = {"a", "b", "c"};
  write_text(dir / "clash.csv", "i,j,weight\na,b,0.1\nb,a,0.2\na,c,0\nb,c,0\n");
  write_text(dir / "gap.csv", "i,j,weight\na,b,0.1\na,c,0.2\n");
  write_text(dir / "ragged.csv", "0,0.1,0.2\n0.1,0\n0.2,-0.3,0\n");
  for (const char* f : {"clash.csv", "gap.csv", "ragged.csv"}) {
    EXPECT_THROW(io::read_matrix(dir / f, ids), ValidationError) << f;
  }
  EXPECT_THROW(io::read_matrix(dir / "absent.csv", ids), ValidationError);
}

TEST(Population, WriteLoadRoundTrip) {
  const auto dir = scratch();
  const auto pop = small_population();
  io::write_population(dir, pop);
  const auto back = io::load_population(dir / "manifest.csv", dir / "partition.csv");
  expect_same_population(pop, back);
}

TEST(Population, ExclusionDropsNodes) {
  const auto dir = scratch();
  const auto pop = small_population();
  io::write_population(dir, pop);
  io::LoadOptions lo;
  lo.exclude = {"1", "6"};
  const auto back = io::load_population(dir / "manifest.csv", dir / "partition.csv", lo);
  EXPECT_EQ(back.nodes().ids(), (std::vector<std::string>{"0", "2", "3", "4", "5", "7"}));
  EXPECT_EQ(back.partition().edge_count(), 15u);
  const auto& w = pop.subjects()[2].weights;
  EXPECT_EQ(back.subjects()[2].weights(0, 3), w(0, 4));
  EXPECT_EQ(back.subjects()[2].weights(1, 5), w(2, 7));

  lo.exclude = {"nope"};
  EXPECT_THROW(io::load_population(dir / "manifest.csv", dir / "partition.csv", lo), ValidationError);
}

TEST(Population, FisherTransform) {
  const auto dir = scratch();
  write_text(dir / "partition.csv", "a,0\nb,0\nc,1\n");
  write_text(dir / "s1.csv", "1,0.5,-0.2\n0.5,1,0.9\n-0.2,0.9,1\n");
  write_text(dir / "s2.csv", "1,0.1,0.3\n0.1,1,0\n0.3,0,1\n");
  write_text(dir / "bad.csv", "1,1.0,0.3\n1.0,1,0\n0.3,0,1\n");
  write_text(dir / "manifest.csv", "subject_id,matrix_path,age\ns1,s1.csv,30\ns2,s2.csv,41\n");
  write_text(dir / "manifest_bad.csv", "subject_id,matrix_path,age\ns1,s1.csv,30\nsx,bad.csv,41\n");
  io::LoadOptions lo;
  lo.fisher = true;
  const auto pop = io::load_population(dir / "manifest.csv", dir / "partition.csv", lo);
  EXPECT_DOUBLE_EQ(pop.subjects()[0].weights(1, 2), std::atanh(0.9));
  EXPECT_DOUBLE_EQ(pop.subjects()[0].weights(0, 2), std::atanh(-0.2));
  EXPECT_EQ(pop.design()(1, 1), 41.0);
  try {
    io::load_population(dir / "manifest_bad.csv", dir / "partition.csv", lo);
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("sx"), std::string::npos);
  }
}

TEST(Manifest, ErrorsNameTheProblem) {
  const auto dir = scratch();
  write_text(dir / "partition.csv", "a,0\nb,0\nc,1\n");
  write_text(dir / "s1.csv", "0,0.5,-0.2\n0.5,0,0.9\n-0.2,0.9,0\n");
  write_text(dir / "dup.csv", "subject_id,matrix_path\ns1,s1.csv\ns1,s1.csv\n");
  write_text(dir / "missing.csv", "subject_id,matrix_path\ns1,s1.csv\ns2,nowhere.csv\n");
  write_text(dir / "short.csv", "subject_id,matrix_path,age\ns1,s1.csv\n");
  auto message = [&](const char* f) {
    try {
      io::load_population(dir / f, dir / "partition.csv");
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("dup.csv").find("duplicate subject"), std::string::npos);
  EXPECT_NE(message("missing.csv").find("nowhere.csv"), std::string::npos);
  EXPECT_NE(message("short.csv").find("expected 3 fields"), std::string::npos);
}

TEST(Population, RejectsAsymmetricOrMissingWeights) {
  const auto dir = scratch();
  write_text(dir / "partition.csv", "a,0\nb,0\nc,1\n");
  write_text(dir / "asym.csv", "0,0.1,0.2\n0.5,0,-0.3\n0.2,-0.3,0\n");
  write_text(dir / "nan.csv", "0,0.1,nan\n0.1,0,-0.3\nnan,-0.3,0\n");
  write_text(dir / "m_asym.csv", "subject_id,matrix_path\ns1,asym.csv\n");
  write_text(dir / "m_nan.csv", "subject_id,matrix_path\ns1,nan.csv\n");
  EXPECT_THROW(io::load_population(dir / "m_asym.csv", dir / "partition.csv"), ValidationError);
  EXPECT_THROW(io::load_population(dir / "m_nan.csv", dir / "partition.csv"), ValidationError);
}

TEST(Population, CovariateSubsetAndOrder) {
  const auto dir = scratch();
  write_text(dir / "partition.csv", "a,0\nb,0\nc,1\n");
  write_text(dir / "s.csv", "0,0.5,-0.2\n0.5,0,0.9\n-0.2,0.9,0\n");
  write_text(dir / "manifest.csv", "subject_id,matrix_path,age,group,site\ns1,s.csv,30,1,2\ns2,s.csv,41,0,3\n");
  io::LoadOptions lo;
  lo.covariates = {"site", "group"};
  const auto pop = io::load_population(dir / "manifest.csv", dir / "partition.csv", lo);
  EXPECT_EQ(pop.covariate_names(), (std::vector<std::string>{"intercept", "site", "group"}));
  MatrixXd x(2, 3);
  x << 1, 2, 1, 1, 3, 0;
  EXPECT_EQ(pop.design(), x);
  lo.covariates = {"weight"};
  EXPECT_THROW(io::load_population(dir / "manifest.csv", dir / "partition.csv", lo), ValidationError);
}

class FitRoundTrip : public ::testing::TestWithParam<VMode> {};

TEST_P(FitRoundTrip, ReadReproducesWrite) {
  const auto dir = scratch();
  const auto pop = small_population(8);
  EmOptions em;
  em.max_iter = 40;
  const SavedFit saved = saved_fit(pop, fit_em(pop, GetParam(), em));
  write_fit(dir, saved);
  const SavedFit back = read_fit(dir);
  EXPECT_EQ(back.estimator, "gls-em");
  EXPECT_EQ(back.mode, GetParam());
  EXPECT_EQ(back.nodes.ids(), saved.nodes.ids());
  EXPECT_EQ(back.partition.labels(), saved.partition.labels());
  EXPECT_EQ(back.subject_ids, saved.subject_ids);
  EXPECT_EQ(back.covariate_names, saved.covariate_names);
  EXPECT_EQ(back.design, saved.design);
  EXPECT_EQ(back.alpha.beta, saved.alpha.beta);
  EXPECT_EQ(back.alpha.eta, saved.alpha.eta);
  EXPECT_EQ(back.u, saved.u);
  ASSERT_EQ(back.v.mode(), saved.v.mode());
  for (std::size_t c = 0; c < saved.partition.cell_count(); ++c) EXPECT_EQ(back.v.cell_block(c), saved.v.cell_block(c));
  EXPECT_EQ(back.loglik_trace, saved.loglik_trace);
  EXPECT_EQ(back.converged, saved.converged);
  EXPECT_EQ(back.iterations, saved.iterations);
}

INSTANTIATE_TEST_SUITE_P(Modes, FitRoundTrip,
                         ::testing::Values(VMode::kDiagonalCell, VMode::kDiagonalEdge, VMode::kBlock));

TEST(FitIo, OlsRoundTripAndMissingFile) {
  const auto dir = scratch();
  const auto pop = small_population(2);
  const SavedFit saved = saved_fit(pop, fit_ols(pop));
  write_fit(dir, saved);
  const SavedFit back = read_fit(dir);
  EXPECT_EQ(back.estimator, "ols");
  EXPECT_EQ(back.alpha.beta, saved.alpha.beta);
  EXPECT_EQ(back.v.values(), saved.v.values());
  EXPECT_EQ(back.df(), 11.0);

  fs::remove(dir / "U.csv");
  try {
    read_fit(dir);
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("U.csv"), std::string::npos);
  }
}
