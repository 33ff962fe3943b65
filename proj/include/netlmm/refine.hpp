#pragma once

// Community refinement for covariate homogeneity.
//
// refine_kmeans clusters nodes so that the OLS edge effects x_ij are close
// to a per-cell center. refine_likelihood moves single nodes between
// communities when that raises the marginal likelihood of a cell-effects
// model, re-fitting by EM after every sweep.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "netlmm/covstruct.hpp"
#include "netlmm/error.hpp"
#include "netlmm/estim.hpp"
#include "netlmm/netdata.hpp"
#include "netlmm/parallel.hpp"

namespace netlmm {

/// x_ij for every node pair, one symmetric n x n matrix per refined covariate.
struct EdgeEffectField {
  std::vector<Eigen::MatrixXd> components;

  std::size_t node_count() const { return components.empty() ? 0 : static_cast<std::size_t>(components[0].rows()); }
  std::size_t dim() const { return components.size(); }
};

/// OLS edge effects beta_j + eta_ij. Per-edge OLS does not depend on the
/// partition, so neither does the field.
inline EdgeEffectField edge_effect_field(const NetworkPopulation& pop, const std::vector<std::size_t>& covariates = {1}) {
  if (covariates.empty()) throw ValidationError("no covariate selected for the edge-effect field");
  const OlsFit ols = fit_ols(pop);
  const Eigen::MatrixXd theta = ols.alpha.edge_effects(pop.partition().cells());
  EdgeEffectField field;
  for (auto j : covariates) {
    if (j >= pop.covariate_count()) throw ValidationError("covariate index " + std::to_string(j) + " out of range");
    field.components.push_back(devectorize(theta.col(static_cast<Eigen::Index>(j)), pop.partition()));
  }
  return field;
}

struct RefinementResult {
  std::vector<int> labels;
  double objective = 0.0;
  int n_init = 1;
  std::uint64_t best_init = 0;  // seed of the winning restart
  std::vector<double> trace;    // objective after every iteration of the winning run
  int moves = 0;                // node moves in the winning run
};

struct KMeansOptions {
  int k = 2;
  int n_init = 100;
  std::uint64_t seed = 0;
  int max_iter = 1000;
  unsigned threads = 1;
  /// Restricted runs: frozen nodes keep base_labels; free nodes take labels
  /// from `allowed`. All three empty means every node is free over 0..k-1.
  std::vector<bool> frozen;
  std::vector<int> base_labels;
  std::vector<int> allowed;
};

namespace detail {

class KMeansRun {
 public:
  KMeansRun(const EdgeEffectField& field, const KMeansOptions& opts) : field_(field), opts_(opts) {
    n_ = field.node_count();
    if (field.dim() == 0 || n_ < 2) throw ValidationError("edge-effect field is empty");
    restricted_ = !opts.frozen.empty();
    if (restricted_) {
      if (opts.frozen.size() != n_ || opts.base_labels.size() != n_ || opts.allowed.empty()) {
        throw ValidationError("restricted refinement needs frozen flags, base labels and allowed labels for every node");
      }
      allowed_ = opts.allowed;
      int top = *std::max_element(opts.base_labels.begin(), opts.base_labels.end());
      top = std::max(top, *std::max_element(allowed_.begin(), allowed_.end()));
      label_count_ = top + 1;
    } else {
      if (opts.k < 1) throw ValidationError("k must be at least 1");
      if (static_cast<std::size_t>(opts.k) > n_) throw ValidationError("k exceeds the number of nodes");
      for (int l = 0; l < opts.k; ++l) allowed_.push_back(l);
      label_count_ = opts.k;
    }
    std::sort(allowed_.begin(), allowed_.end());
    allowed_.erase(std::unique(allowed_.begin(), allowed_.end()), allowed_.end());
    free_.clear();
    for (std::size_t i = 0; i < n_; ++i) {
      if (!restricted_ || !opts.frozen[i]) free_.push_back(i);
    }
    if (free_.size() < allowed_.size()) throw ValidationError("fewer free nodes than target communities");
    const auto l = static_cast<Eigen::Index>(label_count_);
    double grand = 0.0;
    centers_.assign(field.dim(), Eigen::MatrixXd::Zero(l, l));
    for (std::size_t d = 0; d < field.dim(); ++d) {
      grand = 0.0;
      for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t j = i + 1; j < n_; ++j) grand += field.components[d](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
      centers_[d].setConstant(grand / (static_cast<double>(n_) * static_cast<double>(n_ - 1) / 2.0));
    }
  }

  std::vector<int> random_labels(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<int> labels = restricted_ ? opts_.base_labels : std::vector<int>(n_, 0);
    std::vector<std::size_t> order = free_;
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<std::size_t> pick(0, allowed_.size() - 1);
    for (std::size_t k = 0; k < order.size(); ++k) {
      labels[order[k]] = k < allowed_.size() ? allowed_[k] : allowed_[pick(rng)];
    }
    return labels;
  }

  RefinementResult run(std::vector<int> labels) {
    labels_ = std::move(labels);
    if (labels_.size() != n_) throw ValidationError("initial labels have wrong length");
    for (std::size_t i : free_) {
      if (!std::binary_search(allowed_.begin(), allowed_.end(), labels_[i])) {
        throw ValidationError("initial label of node " + std::to_string(i) + " is not an allowed label");
      }
    }
    counts_.assign(static_cast<std::size_t>(label_count_), 0);
    for (int l : labels_) {
      if (l < 0 || l >= label_count_) throw ValidationError("label out of range");
      ++counts_[static_cast<std::size_t>(l)];
    }
    RefinementResult out;
    update_centers();
    repair_empty(out);
    out.trace.push_back(objective());
    for (int it = 0; it < opts_.max_iter; ++it) {
      int moved = sweep();
      if (moved == 0) moved = polish();
      if (moved == 0) moved = swap();
      if (moved == 0) break;
      out.moves += moved;
      update_centers();
      out.trace.push_back(objective());
    }
    out.labels = labels_;
    out.objective = out.trace.back();
    return out;
  }

  double objective_of(const std::vector<int>& labels) {
    labels_ = labels;
    update_centers();
    return objective();
  }

 private:
  double pair_cost(std::size_t i, std::size_t j, int li, int lj) const {
    double s = 0.0;
    for (std::size_t d = 0; d < field_.dim(); ++d) {
      const double r = field_.components[d](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - centers_[d](li, lj);
      s += r * r;
    }
    return s;
  }

  double node_cost(std::size_t i, int l) const {
    double s = 0.0;
    for (std::size_t j = 0; j < n_; ++j) {
      if (j != i) s += pair_cost(i, j, l, labels_[j]);
    }
    return s;
  }

  double objective() const {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = i + 1; j < n_; ++j) s += pair_cost(i, j, labels_[i], labels_[j]);
    }
    return s;
  }

  // Cell means; cells without pairs keep their previous center.
  void update_centers() {
    const auto l = static_cast<Eigen::Index>(label_count_);
    Eigen::MatrixXd count = Eigen::MatrixXd::Zero(l, l);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = i + 1; j < n_; ++j) {
        const int a = std::min(labels_[i], labels_[j]);
        const int b = std::max(labels_[i], labels_[j]);
        count(a, b) += 1.0;
      }
    }
    for (std::size_t d = 0; d < field_.dim(); ++d) {
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(l, l);
      for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t j = i + 1; j < n_; ++j) {
          const int a = std::min(labels_[i], labels_[j]);
          const int b = std::max(labels_[i], labels_[j]);
          sum(a, b) += field_.components[d](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
      }
      for (Eigen::Index a = 0; a < l; ++a) {
        for (Eigen::Index b = a; b < l; ++b) {
          if (count(a, b) > 0.0) centers_[d](a, b) = centers_[d](b, a) = sum(a, b) / count(a, b);
        }
      }
    }
  }

  // Gauss-Seidel pass: each free node moves to its cheapest label with the
  // centers held fixed. A node that is the last member of its community stays.
  int sweep() {
    int moved = 0;
    for (std::size_t i : free_) {
      const int cur = labels_[i];
      if (counts_[static_cast<std::size_t>(cur)] <= 1) continue;
      int best = cur;
      double best_cost = node_cost(i, cur);
      const double slack = 1e-12 * std::max(1.0, std::abs(best_cost));
      for (int l : allowed_) {
        if (l == cur) continue;
        const double c = node_cost(i, l);
        if (c < best_cost - slack) {
          best = l;
          best_cost = c;
        }
      }
      if (best != cur) {
        --counts_[static_cast<std::size_t>(cur)];
        ++counts_[static_cast<std::size_t>(best)];
        labels_[i] = best;
        ++moved;
      }
    }
    return moved;
  }

  // Single-node moves scored exactly, with the centers following the move.
  // The objective is a constant minus sum over cells of S^2 / n (S the cell
  // sum, n its pair count), so a move only touches the cells of two labels.
  // Runs once the fixed-center sweeps stop; they can stall where such a move
  // still lowers the objective.
  int polish() {
    const auto l = static_cast<Eigen::Index>(label_count_);
    const std::size_t dim = field_.dim();
    int moved = 0;
    for (std::size_t i : free_) {
      const int cur = labels_[i];
      if (counts_[static_cast<std::size_t>(cur)] <= 1) continue;
      Eigen::MatrixXd count = Eigen::MatrixXd::Zero(l, l);
      std::vector<Eigen::MatrixXd> sum(dim, Eigen::MatrixXd::Zero(l, l));
      for (std::size_t a = 0; a < n_; ++a) {
        for (std::size_t b = a + 1; b < n_; ++b) {
          const int p = std::min(labels_[a], labels_[b]);
          const int q = std::max(labels_[a], labels_[b]);
          count(p, q) += 1.0;
          for (std::size_t d = 0; d < dim; ++d) {
            sum[d](p, q) += field_.components[d](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
          }
        }
      }
      // pairs of node i, by label of the other endpoint
      Eigen::VectorXd m = Eigen::VectorXd::Zero(l);
      Eigen::MatrixXd r = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), l);
      for (std::size_t j = 0; j < n_; ++j) {
        if (j == i) continue;
        m[labels_[j]] += 1.0;
        for (std::size_t d = 0; d < dim; ++d) {
          r(static_cast<Eigen::Index>(d), labels_[j]) += field_.components[d](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
      }
      auto explained = [&](const Eigen::MatrixXd& cnt, const std::vector<Eigen::MatrixXd>& sm, int x, int y) {
        double total = 0.0;
        for (Eigen::Index p = 0; p < l; ++p) {
          for (Eigen::Index q = p; q < l; ++q) {
            if (p != x && p != y && q != x && q != y) continue;
            if (cnt(p, q) <= 0.0) continue;
            for (std::size_t d = 0; d < dim; ++d) total += sm[d](p, q) * sm[d](p, q) / cnt(p, q);
          }
        }
        return total;
      };
      int best = cur;
      double best_gain = 0.0;
      double before = 0.0;
      for (int b : allowed_) {
        if (b == cur) continue;
        Eigen::MatrixXd cnt = count;
        std::vector<Eigen::MatrixXd> sm = sum;
        for (Eigen::Index q = 0; q < l; ++q) {
          if (m[q] == 0.0) continue;
          const auto from_lo = std::min<Eigen::Index>(cur, q);
          const auto from_hi = std::max<Eigen::Index>(cur, q);
          const auto to_lo = std::min<Eigen::Index>(b, q);
          const auto to_hi = std::max<Eigen::Index>(b, q);
          cnt(from_lo, from_hi) -= m[q];
          cnt(to_lo, to_hi) += m[q];
          for (std::size_t d = 0; d < dim; ++d) {
            sm[d](from_lo, from_hi) -= r(static_cast<Eigen::Index>(d), q);
            sm[d](to_lo, to_hi) += r(static_cast<Eigen::Index>(d), q);
          }
        }
        before = explained(count, sum, cur, b);
        const double gain = explained(cnt, sm, cur, b) - before;
        if (gain > best_gain + 1e-10 * std::max(1.0, before)) {
          best = b;
          best_gain = gain;
        }
      }
      if (best != cur) {
        --counts_[static_cast<std::size_t>(cur)];
        ++counts_[static_cast<std::size_t>(best)];
        labels_[i] = best;
        ++moved;
      }
    }
    if (moved > 0) update_centers();
    return moved;
  }

  // Exchanges of two free nodes with different labels, scored exactly. Sizes
  // are kept, so this reaches optima that no single move can.
  int swap() {
    const auto l = static_cast<Eigen::Index>(label_count_);
    const std::size_t dim = field_.dim();
    Eigen::MatrixXd count = Eigen::MatrixXd::Zero(l, l);
    std::vector<Eigen::MatrixXd> sum(dim, Eigen::MatrixXd::Zero(l, l));
    for (std::size_t a = 0; a < n_; ++a) {
      for (std::size_t b = a + 1; b < n_; ++b) {
        const int p = std::min(labels_[a], labels_[b]);
        const int q = std::max(labels_[a], labels_[b]);
        count(p, q) += 1.0;
        for (std::size_t d = 0; d < dim; ++d) {
          sum[d](p, q) += field_.components[d](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
      }
    }
    auto explained = [&](const Eigen::MatrixXd& cnt, const std::vector<Eigen::MatrixXd>& sm) {
      double total = 0.0;
      for (Eigen::Index p = 0; p < l; ++p) {
        for (Eigen::Index q = p; q < l; ++q) {
          if (cnt(p, q) <= 0.0) continue;
          for (std::size_t d = 0; d < dim; ++d) total += sm[d](p, q) * sm[d](p, q) / cnt(p, q);
        }
      }
      return total;
    };
    // relabel node i to b in the tallies, the other endpoints read from `lab`
    auto shift = [&](Eigen::MatrixXd& cnt, std::vector<Eigen::MatrixXd>& sm, const std::vector<int>& lab, std::size_t i, int b) {
      for (std::size_t j = 0; j < n_; ++j) {
        if (j == i) continue;
        const int from_lo = std::min(lab[i], lab[j]);
        const int from_hi = std::max(lab[i], lab[j]);
        const int to_lo = std::min(b, lab[j]);
        const int to_hi = std::max(b, lab[j]);
        cnt(from_lo, from_hi) -= 1.0;
        cnt(to_lo, to_hi) += 1.0;
        for (std::size_t d = 0; d < dim; ++d) {
          const double w = field_.components[d](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
          sm[d](from_lo, from_hi) -= w;
          sm[d](to_lo, to_hi) += w;
        }
      }
    };
    const double before = explained(count, sum);
    double best_gain = 1e-10 * std::max(1.0, before);
    std::size_t bi = n_;
    std::size_t bj = n_;
    std::vector<int> lab;
    for (std::size_t x = 0; x < free_.size(); ++x) {
      for (std::size_t y = x + 1; y < free_.size(); ++y) {
        const std::size_t i = free_[x];
        const std::size_t j = free_[y];
        if (labels_[i] == labels_[j]) continue;
        Eigen::MatrixXd cnt = count;
        std::vector<Eigen::MatrixXd> sm = sum;
        lab = labels_;
        shift(cnt, sm, lab, i, labels_[j]);
        lab[i] = labels_[j];
        shift(cnt, sm, lab, j, labels_[i]);
        const double gain = explained(cnt, sm) - before;
        if (gain > best_gain) {
          best_gain = gain;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi == n_) return 0;
    std::swap(labels_[bi], labels_[bj]);
    update_centers();
    return 2;
  }

  // An allowed label without nodes receives the free node with the largest
  // deviation from its current centers.
  void repair_empty(RefinementResult& out) {
    for (int l : allowed_) {
      if (counts_[static_cast<std::size_t>(l)] > 0) continue;
      std::size_t worst = n_;
      double worst_cost = -1.0;
      for (std::size_t i : free_) {
        if (counts_[static_cast<std::size_t>(labels_[i])] <= 1) continue;
        const double c = node_cost(i, labels_[i]);
        if (c > worst_cost) {
          worst_cost = c;
          worst = i;
        }
      }
      if (worst == n_) throw NumericalError("cannot repopulate empty community " + std::to_string(l));
      --counts_[static_cast<std::size_t>(labels_[worst])];
      ++counts_[static_cast<std::size_t>(l)];
      labels_[worst] = l;
      ++out.moves;
      update_centers();
    }
  }

  const EdgeEffectField& field_;
  const KMeansOptions& opts_;
  std::size_t n_ = 0;
  bool restricted_ = false;
  int label_count_ = 0;
  std::vector<int> allowed_;
  std::vector<std::size_t> free_;
  std::vector<int> labels_;
  std::vector<int> counts_;
  std::vector<Eigen::MatrixXd> centers_;
};

/// Renames labels in order of first appearance (unrestricted runs only).
inline std::vector<int> canonical_labels(const std::vector<int>& labels) {
  std::vector<int> map;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (static_cast<std::size_t>(l) >= map.size()) map.resize(static_cast<std::size_t>(l) + 1, -1);
    if (map[static_cast<std::size_t>(l)] < 0) {
      map[static_cast<std::size_t>(l)] = static_cast<int>(std::count_if(map.begin(), map.end(), [](int v) { return v >= 0; }));
    }
    out[i] = map[static_cast<std::size_t>(l)];
  }
  return out;
}

}  // namespace detail

/// K-means objective sum_{i<j} || x_ij - center(c_i, c_j) ||^2 with centers
/// at the cell means of the given labels.
inline double kmeans_objective(const EdgeEffectField& field, const std::vector<int>& labels) {
  KMeansOptions opts;
  opts.k = *std::max_element(labels.begin(), labels.end()) + 1;
  opts.k = std::min<int>(opts.k, static_cast<int>(field.node_count()));
  detail::KMeansRun run(field, opts);
  return run.objective_of(labels);
}

/// One k-means run from given labels.
inline RefinementResult refine_kmeans_from(const EdgeEffectField& field, const std::vector<int>& labels,
                                           const KMeansOptions& opts) {
  detail::KMeansRun run(field, opts);
  RefinementResult out = run.run(labels);
  if (opts.frozen.empty()) out.labels = detail::canonical_labels(out.labels);
  return out;
}

/// Best of opts.n_init random restarts (restart r uses seed + r). Ties go to
/// the earliest restart.
inline RefinementResult refine_kmeans(const EdgeEffectField& field, const KMeansOptions& opts) {
  if (opts.n_init < 1) throw ValidationError("n_init must be positive");
  std::vector<RefinementResult> runs(static_cast<std::size_t>(opts.n_init));
  parallel_for(runs.size(), opts.threads, [&](std::size_t r) {
    detail::KMeansRun run(field, opts);
    const std::uint64_t seed = opts.seed + r;
    runs[r] = run.run(run.random_labels(seed));
    runs[r].best_init = seed;
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r) {
    if (runs[r].objective < runs[best].objective) best = r;
  }
  RefinementResult out = std::move(runs[best]);
  out.n_init = opts.n_init;
  if (opts.frozen.empty()) out.labels = detail::canonical_labels(out.labels);
  return out;
}

struct LikelihoodOptions {
  VMode mode = VMode::kDiagonalCell;  // diag or diag-edge
  EmOptions em;                       // structure is replaced by the cell-effects model
  int max_sweeps = 100;
  double min_gain = 1e-8;  // smallest log-likelihood gain that counts as a move
  /// Restricted runs: frozen nodes never move; free nodes may take labels
  /// from `allowed` (empty: every community).
  std::vector<bool> frozen;
  std::vector<int> allowed;
};

struct LikelihoodRefinement {
  RefinementResult refinement;  // objective = -log-likelihood
  FitResult fit;                // cell-effects fit at the final labels
  CellPartition partition;
};

/// The cell-effects-only model: per-edge intercepts, cell-level slopes.
inline ModelStructure cell_effects_structure(std::size_t p) {
  ModelStructure s;
  s.edge_deviation.assign(p, false);
  s.edge_deviation[0] = true;
  return s;
}

namespace detail {

// Log-likelihood of the cell-effects model as a function of the labels with
// all parameters held fixed. Per-edge intercepts (and per-edge variances in
// diag-edge mode) travel with their node pair; slopes, cell variances and U
// belong to cells. The likelihood only needs per-cell sums
// m_c = sum 1/v_e, T_cm = sum r_em / v_e, plus sum r^2/v and sum log v.
class LabelScorer {
 public:
  LabelScorer(const NetworkPopulation& pop, const FitResult& fit, std::vector<int> labels, int community_count)
      : pop_(pop), n_(pop.nodes().size()), k_(community_count), labels_(std::move(labels)) {
    const auto& part0 = pop.partition();
    const Eigen::MatrixXd& x = pop.design();
    big_n_ = x.rows();
    xs_ = x.rightCols(x.cols() - 1);
    row_.assign(n_ * n_, -1);
    for (std::size_t e = 0; e < part0.edge_count(); ++e) {
      const auto& ed = part0.edge(e);
      row_[static_cast<std::size_t>(ed.i) * n_ + static_cast<std::size_t>(ed.j)] = static_cast<int>(e);
    }
    set_parameters(fit);
  }

  /// Reads parameters from a fit on CellPartition(labels_).
  void set_parameters(const FitResult& fit) {
    const CellPartition part(labels_, names());
    cell_count_ = part.cell_count();
    if (cell_count_ != static_cast<std::size_t>(k_ * (k_ + 1) / 2)) {
      throw ValidationError("likelihood refinement needs every community to have at least 2 nodes");
    }
    mode_ = fit.v.mode();
    if (mode_ == VMode::kBlock) throw ValidationError("likelihood refinement supports diagonal V only");
    const Eigen::MatrixXd theta = fit.alpha.edge_effects(part.cells());
    const auto d = static_cast<Eigen::Index>(part.edge_count());
    mu_.resize(d);
    vedge_.resize(d);
    for (std::size_t e = 0; e < part.edge_count(); ++e) {
      const auto& ed = part.edge(e);
      const auto r = static_cast<Eigen::Index>(row_[static_cast<std::size_t>(ed.i) * n_ + static_cast<std::size_t>(ed.j)]);
      mu_[r] = theta(static_cast<Eigen::Index>(e), 0);
      vedge_[r] = fit.v.edge_variance(e, part.edge_cell(e));
    }
    slope_ = fit.alpha.beta.rightCols(fit.alpha.beta.cols() - 1);
    if (mode_ == VMode::kDiagonalCell) vcell_ = fit.v.values();
    u_ = fit.u;
    floor_ = fit.variance_floor;
    rebuild();
  }

  double loglik() const { return evaluate(m_, t_, q_, logv_); }

  /// Log-likelihood after moving node i to label b.
  double loglik_if(std::size_t i, int b) const {
    Eigen::VectorXd m = m_;
    Eigen::MatrixXd t = t_;
    double q = q_;
    double logv = logv_;
    const int a = labels_[i];
    Eigen::VectorXd r(big_n_);
    for (std::size_t j = 0; j < n_; ++j) {
      if (j == i) continue;
      const std::size_t row = pair_row(i, j);
      const int c_old = cell_of(a, labels_[j]);
      const int c_new = cell_of(b, labels_[j]);
      edge_terms(row, c_old, r);
      double v = variance(row, c_old);
      m[c_old] -= 1.0 / v;
      t.row(c_old) -= r.transpose() / v;
      q -= r.squaredNorm() / v;
      logv -= std::log(v);
      edge_terms(row, c_new, r);
      v = variance(row, c_new);
      m[c_new] += 1.0 / v;
      t.row(c_new) += r.transpose() / v;
      q += r.squaredNorm() / v;
      logv += std::log(v);
    }
    return evaluate(m, t, q, logv);
  }

  void move(std::size_t i, int b) {
    labels_[i] = b;
    rebuild();
  }

  const std::vector<int>& labels() const { return labels_; }

  /// Warm start for EM on the current labels.
  EmStart warm_start(const CellPartition& part) const {
    const auto d = static_cast<Eigen::Index>(part.edge_count());
    const auto p = slope_.cols() + 1;
    Eigen::MatrixXd theta(d, p);
    Eigen::VectorXd ve(d);
    for (std::size_t e = 0; e < part.edge_count(); ++e) {
      const auto& ed = part.edge(e);
      const std::size_t row = pair_row(static_cast<std::size_t>(ed.i), static_cast<std::size_t>(ed.j));
      const int c = part.edge_cell(e);
      theta(static_cast<Eigen::Index>(e), 0) = mu_[static_cast<Eigen::Index>(row)];
      theta.row(static_cast<Eigen::Index>(e)).tail(p - 1) = slope_.row(c);
      ve[static_cast<Eigen::Index>(e)] = vedge_[static_cast<Eigen::Index>(row)];
    }
    EmStart start;
    start.alpha = CoefficientSet::from_edge_effects(theta, part.cells());
    start.u = u_;
    start.v = mode_ == VMode::kDiagonalCell ? ResidualCov::diagonal_cell(part.cells(), vcell_)
                                            : ResidualCov::diagonal_edge(part.cells(), ve);
    start.variance_floor = floor_;
    return start;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (int a = 0; a < k_; ++a) out.push_back(std::to_string(a));
    return out;
  }

 private:
  std::size_t pair_row(std::size_t i, std::size_t j) const {
    if (i > j) std::swap(i, j);
    return static_cast<std::size_t>(row_[i * n_ + j]);
  }

  // Cell order of a partition with all K(K+1)/2 cells present: row-major a <= b.
  int cell_of(int a, int b) const {
    if (a > b) std::swap(a, b);
    return a * k_ - a * (a - 1) / 2 + (b - a);
  }

  double variance(std::size_t row, int cell) const {
    return mode_ == VMode::kDiagonalCell ? vcell_[cell] : vedge_[static_cast<Eigen::Index>(row)];
  }

  void edge_terms(std::size_t row, int cell, Eigen::VectorXd& r) const {
    r = pop_.response().row(static_cast<Eigen::Index>(row)).transpose();
    r.array() -= mu_[static_cast<Eigen::Index>(row)];
    if (xs_.cols() > 0) r.noalias() -= xs_ * slope_.row(cell).transpose();
  }

  void rebuild() {
    const auto c = static_cast<Eigen::Index>(cell_count_);
    m_ = Eigen::VectorXd::Zero(c);
    t_ = Eigen::MatrixXd::Zero(c, big_n_);
    q_ = 0.0;
    logv_ = 0.0;
    d_ = 0;
    Eigen::VectorXd r(big_n_);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = i + 1; j < n_; ++j) {
        const std::size_t row = pair_row(i, j);
        const int cell = cell_of(labels_[i], labels_[j]);
        edge_terms(row, cell, r);
        const double v = variance(row, cell);
        m_[cell] += 1.0 / v;
        t_.row(cell) += r.transpose() / v;
        q_ += r.squaredNorm() / v;
        logv_ += std::log(v);
        ++d_;
      }
    }
  }

  double evaluate(const Eigen::VectorXd& m, const Eigen::MatrixXd& t, double q, double logv) const {
    const Eigen::VectorXd dsqrt = m.cwiseSqrt();
    const Eigen::MatrixXd scaled_u = dsqrt.asDiagonal() * u_ * dsqrt.asDiagonal();
    Eigen::MatrixXd inner = scaled_u;
    inner.diagonal().array() += 1.0;
    Eigen::LLT<Eigen::MatrixXd> llt(inner);
    if (llt.info() != Eigen::Success) throw NumericalError("inner covariance system is not positive definite");
    const Eigen::VectorXd dinv = dsqrt.cwiseInverse();
    const Eigen::MatrixXd g = dinv.asDiagonal() * llt.solve(scaled_u) * dinv.asDiagonal();
    const double logdet = logv + 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double quad = q - (t.cwiseProduct(g * t)).sum();
    const double nn = static_cast<double>(big_n_);
    return -0.5 * (nn * (static_cast<double>(d_) * std::log(2.0 * std::numbers::pi) + logdet) + quad);
  }

  const NetworkPopulation& pop_;
  std::size_t n_;
  int k_;
  std::vector<int> labels_;
  Eigen::Index big_n_ = 0;
  Eigen::MatrixXd xs_;
  std::vector<int> row_;
  std::size_t cell_count_ = 0;
  VMode mode_ = VMode::kDiagonalCell;
  Eigen::VectorXd mu_;
  Eigen::VectorXd vedge_;
  Eigen::MatrixXd slope_;
  Eigen::VectorXd vcell_;
  Eigen::MatrixXd u_;
  Eigen::VectorXd floor_;
  Eigen::VectorXd m_;
  Eigen::MatrixXd t_;
  double q_ = 0.0;
  double logv_ = 0.0;
  std::size_t d_ = 0;
};

}  // namespace detail

/// Likelihood-based refinement starting from `labels` (0-based, every
/// community with at least 2 nodes). Node moves are scored with the EM
/// parameters held fixed; a move is accepted when it raises the
/// log-likelihood, and communities never drop below 2 nodes. After each
/// sweep with moves the model is re-fitted by EM from the moved parameters.
inline LikelihoodRefinement refine_likelihood(const NetworkPopulation& pop, std::vector<int> labels,
                                              const LikelihoodOptions& opts = {}) {
  const std::size_t n = pop.nodes().size();
  if (labels.size() != n) throw ValidationError("initial labels have wrong length");
  if (opts.mode == VMode::kBlock) throw ValidationError("likelihood refinement supports diagonal V only");
  if (!opts.frozen.empty() && opts.frozen.size() != n) throw ValidationError("frozen flags have wrong length");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    if (l < 0) throw ValidationError("negative label");
    ++sizes[static_cast<std::size_t>(l)];
  }
  for (int a = 0; a < k; ++a) {
    if (sizes[static_cast<std::size_t>(a)] < 2) {
      throw ValidationError("community " + std::to_string(a) + " has fewer than 2 nodes");
    }
  }
  std::vector<int> allowed = opts.allowed;
  if (allowed.empty()) {
    for (int a = 0; a < k; ++a) allowed.push_back(a);
  }
  std::sort(allowed.begin(), allowed.end());

  EmOptions em = opts.em;
  em.structure = cell_effects_structure(pop.covariate_count());
  em.start.reset();

  std::vector<std::string> names;
  for (int a = 0; a < k; ++a) names.push_back(std::to_string(a));
  CellPartition part(labels, names);
  FitResult fit = fit_em(pop.with_partition(part), opts.mode, em);

  detail::LabelScorer scorer(pop, fit, labels, k);
  LikelihoodRefinement out;
  out.refinement.trace.push_back(-fit.loglik());
  double current = scorer.loglik();

  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    int moved = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!opts.frozen.empty() && opts.frozen[i]) continue;
      const int cur = scorer.labels()[i];
      if (sizes[static_cast<std::size_t>(cur)] <= 2) continue;
      if (!std::binary_search(allowed.begin(), allowed.end(), cur)) continue;
      int best = cur;
      double best_ll = current;
      for (int b : allowed) {
        if (b == cur) continue;
        const double ll = scorer.loglik_if(i, b);
        if (ll > best_ll + opts.min_gain) {
          best = b;
          best_ll = ll;
        }
      }
      if (best != cur) {
        scorer.move(i, best);
        --sizes[static_cast<std::size_t>(cur)];
        ++sizes[static_cast<std::size_t>(best)];
        current = scorer.loglik();
        ++moved;
      }
    }
    if (moved == 0) break;
    out.refinement.moves += moved;
    part = CellPartition(scorer.labels(), names);
    em.start = scorer.warm_start(part);
    fit = fit_em(pop.with_partition(part), opts.mode, em);
    scorer.set_parameters(fit);
    current = scorer.loglik();
    out.refinement.trace.push_back(-fit.loglik());
  }

  out.refinement.labels = scorer.labels();
  out.refinement.objective = -fit.loglik();
  out.partition = CellPartition(scorer.labels(), names);
  out.fit = std::move(fit);
  return out;
}

enum class RefineMethod { kKMeans, kLikelihood };

inline RefineMethod parse_refine_method(const std::string& s) {
  if (s == "kmeans") return RefineMethod::kKMeans;
  if (s == "likelihood") return RefineMethod::kLikelihood;
  throw ValidationError("unknown refinement method '" + s + "' (expected kmeans or likelihood)");
}

struct SplitOptions {
  RefineMethod method = RefineMethod::kKMeans;
  int parts = 2;
  std::vector<std::size_t> covariates = {1};  // field for the k-means step
  int n_init = 100;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  VMode mode = VMode::kDiagonalCell;  // final re-fit (and likelihood moves)
  EmOptions em;
};

struct SplitResult {
  RefinementResult refinement;
  CellPartition partition;
  FitResult fit;  // full model on the new partition
};

/// Splits community `a` into `parts` sub-communities while every other node
/// keeps its label. The first part keeps a's index and name (suffixed ".1");
/// new parts are appended as ".2", ".3", ...
inline SplitResult split_community(const NetworkPopulation& pop, int a, const SplitOptions& opts) {
  const auto& part0 = pop.partition();
  if (a < 0 || a >= part0.community_count()) throw ValidationError("community index out of range");
  if (opts.parts < 1) throw ValidationError("parts must be at least 1");
  const auto size_a = part0.community_size(a);
  if (static_cast<std::size_t>(opts.parts) > size_a) {
    throw ValidationError("cannot split community '" + part0.community_names()[static_cast<std::size_t>(a)] + "' of " +
                          std::to_string(size_a) + " nodes into " + std::to_string(opts.parts) + " parts");
  }
  const std::size_t n = part0.node_count();
  const int k = part0.community_count();
  std::vector<bool> frozen(n);
  for (std::size_t i = 0; i < n; ++i) frozen[i] = part0.label(i) != a;
  std::vector<int> allowed = {a};
  for (int q = 1; q < opts.parts; ++q) allowed.push_back(k + q - 1);

  std::vector<std::string> names = part0.community_names();
  if (opts.parts > 1) {
    const std::string base = names[static_cast<std::size_t>(a)];
    names[static_cast<std::size_t>(a)] = base + ".1";
    for (int q = 2; q <= opts.parts; ++q) names.push_back(base + "." + std::to_string(q));
  }

  SplitResult out;
  const EdgeEffectField field = edge_effect_field(pop, opts.covariates);
  if (opts.parts == 1) {
    out.refinement.labels = part0.labels();
    out.refinement.objective = kmeans_objective(field, part0.labels());
    out.refinement.trace = {out.refinement.objective};
  } else {
    KMeansOptions km;
    km.n_init = opts.n_init;
    km.seed = opts.seed;
    km.threads = opts.threads;
    km.frozen = frozen;
    km.base_labels = part0.labels();
    km.allowed = allowed;
    out.refinement = refine_kmeans(field, km);
    if (opts.method == RefineMethod::kLikelihood) {
      LikelihoodOptions lo;
      lo.mode = opts.mode;
      lo.em = opts.em;
      lo.frozen = frozen;
      lo.allowed = allowed;
      auto lr = refine_likelihood(pop, out.refinement.labels, lo);
      lr.refinement.n_init = out.refinement.n_init;
      lr.refinement.best_init = out.refinement.best_init;
      out.refinement = std::move(lr.refinement);
    }
  }
  out.partition = CellPartition(out.refinement.labels, names);
  EmOptions em = opts.em;
  em.start.reset();
  out.fit = fit_em(pop.with_partition(out.partition), opts.mode, em);
  return out;
}

}  // namespace netlmm
