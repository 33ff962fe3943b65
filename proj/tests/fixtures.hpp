#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "netlmm/simlab.hpp"

namespace fixture {

/// Two-group spec with zero edge deviations and diagonal-cell V.
inline netlmm::GenerativeSpec spec(const std::vector<int>& labels, const Eigen::MatrixXd& beta, const Eigen::MatrixXd& u,
                                   const Eigen::VectorXd& v, std::size_t n0, std::size_t n1, std::uint64_t seed = 1) {
  netlmm::GenerativeSpec s;
  s.partition = netlmm::CellPartition::from_labels(labels);
  s.nodes = netlmm::NodeSet::sequential(labels.size());
  s.alpha.beta = beta;
  s.alpha.eta = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(s.partition.edge_count()), beta.cols());
  s.u = u;
  s.v = netlmm::ResidualCov::diagonal_cell(s.partition.cells(), v);
  s.n0 = n0;
  s.n1 = n1;
  s.seed = seed;
  for (Eigen::Index c = 0; c < beta.rows(); ++c) {
    if (beta.cols() > 1 && beta(c, 1) != 0.0) s.true_positive_cells.push_back(static_cast<std::size_t>(c));
  }
  return s;
}

/// Same spec with random non-zero edge deviations (summing to zero per cell).
inline netlmm::GenerativeSpec with_random_eta(netlmm::GenerativeSpec s, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, scale);
  Eigen::MatrixXd theta = s.alpha.edge_effects(s.partition.cells());
  for (auto& x : theta.reshaped()) x += z(rng);
  const auto beta = s.alpha.beta;
  s.alpha = netlmm::CoefficientSet::from_edge_effects(theta, s.partition.cells());
  s.alpha.beta = beta;
  return s;
}

/// Labels 0..k-1 for k communities of `size` nodes, community-contiguous.
inline std::vector<int> blocks(int k, int size) {
  std::vector<int> labels;
  for (int a = 0; a < k; ++a) labels.insert(labels.end(), static_cast<std::size_t>(size), a);
  return labels;
}

/// Community 0 of `coarse` (2 * half nodes) hides two sub-communities whose
/// group effects differ by `separation` times the noise sd of a per-edge OLS
/// slope; community 1 has `other` nodes. `fine` labels the truth 0, 1 (the
/// halves) and 2.
struct PlantedSplit {
  netlmm::GenerativeSpec truth;
  std::vector<int> coarse;
  std::vector<int> fine;
};

inline PlantedSplit planted_split(double separation = 3.0, int half = 6, int other = 6, std::size_t n_per_group = 30) {
  PlantedSplit out;
  for (int k = 0; k < half; ++k) out.fine.push_back(0);
  for (int k = 0; k < half; ++k) out.fine.push_back(1);
  for (int k = 0; k < other; ++k) out.fine.push_back(2);
  for (int l : out.fine) out.coarse.push_back(l == 2 ? 1 : 0);
  const double u = 0.2;
  const double v = 1.0;
  const double n = static_cast<double>(n_per_group);
  const double slope_sd = std::sqrt((u + v) * 2.0 / n);
  const double d = 0.5 * separation * slope_sd;
  const auto part = netlmm::CellPartition::from_labels(out.fine);
  Eigen::MatrixXd beta(static_cast<Eigen::Index>(part.cell_count()), 2);
  for (std::size_t c = 0; c < part.cell_count(); ++c) {
    const auto& cell = part.cell(c);
    const auto q = static_cast<Eigen::Index>(c);
    beta(q, 0) = cell.a == cell.b ? 0.3 : 0.1;
    // the two halves respond with opposite signs
    double sign = 0.0;
    if (cell.a == 0 && cell.b == 0) sign = 1.0;
    if (cell.a == 1 && cell.b == 1) sign = 1.0;
    if (cell.a == 0 && cell.b == 1) sign = -1.0;
    if (cell.a == 0 && cell.b == 2) sign = 1.0;
    if (cell.a == 1 && cell.b == 2) sign = -1.0;
    beta(q, 1) = sign * d;
  }
  out.truth = spec(out.fine, beta, u * Eigen::MatrixXd::Identity(beta.rows(), beta.rows()),
                   Eigen::VectorXd::Constant(beta.rows(), v), n_per_group, n_per_group);
  return out;
}

/// True when a and b agree up to a swap of the labels x and y.
inline bool same_split(const std::vector<int>& a, const std::vector<int>& b, int x, int y) {
  bool direct = true;
  bool swapped = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int flip = b[i] == x ? y : (b[i] == y ? x : b[i]);
    direct = direct && a[i] == b[i];
    swapped = swapped && a[i] == flip;
  }
  return direct || swapped;
}

}  // namespace fixture
