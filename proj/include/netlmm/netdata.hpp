#pragma once

// Multi-subject network data: node sets, community partitions with their
// cell/edge indexing, per-subject networks, and the design matrices of the
// graph-aware mixed model.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "netlmm/error.hpp"

namespace netlmm {

class NodeSet {
 public:
  NodeSet() = default;

  explicit NodeSet(std::vector<std::string> ids) : ids_(std::move(ids)) {
    if (ids_.size() < 2) {
      throw ValidationError("node set needs at least 2 nodes, got " + std::to_string(ids_.size()));
    }
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) {
        throw ValidationError("duplicate node id '" + ids_[i] + "'");
      }
    }
  }

  /// Nodes named "0", "1", ..., "n-1".
  static NodeSet sequential(std::size_t n) {
    std::vector<std::string> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
    return NodeSet(std::move(ids));
  }

  std::size_t size() const { return ids_.size(); }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  const std::vector<std::string>& ids() const { return ids_; }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Community indices are 0-based, a <= b.
struct Cell {
  int a = 0;
  int b = 0;
  std::size_t offset = 0;  // first edge of the cell in the stacked edge vector
  std::size_t size = 0;    // n_ab
};

/// Unordered node pair, stored with i < j.
struct Edge {
  int i = 0;
  int j = 0;
};

/// Number of edges in cell (a,b) given community sizes.
constexpr std::size_t cell_edge_count(std::size_t n_a, std::size_t n_b, bool within) {
  return within ? n_a * (n_a - (n_a > 0 ? 1 : 0)) / 2 : n_a * n_b;
}

/// Node -> community map together with the induced cells and canonical edge
/// order. Cells are enumerated a <= b in row-major order; empty cells (the
/// within-cell of a singleton community) are dropped. Edges inside a cell
/// are ordered lexicographically by (min node, max node).
class CellPartition {
 public:
  CellPartition() = default;

  /// labels[i] in [0, names.size()); every community must own a node.
  CellPartition(std::vector<int> labels, std::vector<std::string> names)
      : labels_(std::move(labels)), names_(std::move(names)) {
    build();
  }

  /// Arbitrary non-negative integer labels, relabeled to consecutive
  /// communities in increasing label order.
  static CellPartition from_labels(std::span<const int> labels) {
    if (labels.empty()) throw ValidationError("empty label list");
    std::vector<int> uniq(labels.begin(), labels.end());
    for (int v : uniq) {
      if (v < 0) throw ValidationError("negative community label " + std::to_string(v));
    }
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<int> mapped(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      mapped[i] = static_cast<int>(std::lower_bound(uniq.begin(), uniq.end(), labels[i]) - uniq.begin());
    }
    std::vector<std::string> names;
    for (int v : uniq) names.push_back(std::to_string(v));
    return CellPartition(std::move(mapped), std::move(names));
  }

  /// Community names as read from a file. All-integer names are ordered
  /// numerically (and must be non-negative); otherwise lexicographically.
  static CellPartition from_names(std::span<const std::string> labels) {
    if (labels.empty()) throw ValidationError("empty label list");
    bool numeric = true;
    std::vector<long long> values(labels.size());
    for (std::size_t i = 0; i < labels.size() && numeric; ++i) {
      const auto& s = labels[i];
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), values[i]);
      numeric = ec == std::errc() && ptr == s.data() + s.size();
    }
    std::vector<std::string> order(labels.begin(), labels.end());
    if (numeric) {
      for (auto v : values) {
        if (v < 0) throw ValidationError("negative community label " + std::to_string(v));
      }
      std::sort(order.begin(), order.end(),
                [](const std::string& l, const std::string& r) { return std::stoll(l) < std::stoll(r); });
    } else {
      std::sort(order.begin(), order.end());
    }
    order.erase(std::unique(order.begin(), order.end()), order.end());
    std::map<std::string, int> index;
    for (std::size_t k = 0; k < order.size(); ++k) index[order[k]] = static_cast<int>(k);
    std::vector<int> mapped(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) mapped[i] = index.at(labels[i]);
    return CellPartition(std::move(mapped), std::move(order));
  }

  std::size_t node_count() const { return labels_.size(); }
  int community_count() const { return static_cast<int>(names_.size()); }
  const std::vector<int>& labels() const { return labels_; }
  int label(std::size_t node) const { return labels_.at(node); }
  const std::vector<std::string>& community_names() const { return names_; }
  std::size_t community_size(int a) const { return community_sizes_.at(static_cast<std::size_t>(a)); }

  const std::vector<Cell>& cells() const { return cells_; }
  const Cell& cell(std::size_t c) const { return cells_.at(c); }
  std::size_t cell_count() const { return cells_.size(); }

  /// Total number of edges d = sum of n_ab.
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const Edge& edge(std::size_t e) const { return edges_.at(e); }
  int edge_cell(std::size_t e) const { return edge_cell_[e]; }
  const std::vector<int>& edge_cells() const { return edge_cell_; }

  /// Index into cells() of the (unordered) community pair, -1 when empty.
  int cell_index(int a, int b) const {
    if (a > b) std::swap(a, b);
    return cell_lookup_[static_cast<std::size_t>(a) * names_.size() + static_cast<std::size_t>(b)];
  }

  /// Position of the unordered node pair in the stacked edge vector.
  std::size_t edge_index(std::size_t i, std::size_t j) const {
    if (i == j || i >= node_count() || j >= node_count()) {
      throw ValidationError("no edge between nodes " + std::to_string(i) + " and " + std::to_string(j));
    }
    return static_cast<std::size_t>(edge_lookup_[i * node_count() + j]);
  }

 private:
  void build() {
    const std::size_t n = labels_.size();
    const std::size_t k = names_.size();
    if (n == 0) throw ValidationError("empty label list");
    community_sizes_.assign(k, 0);
    for (int l : labels_) {
      if (l < 0 || static_cast<std::size_t>(l) >= k) {
        throw ValidationError("community label " + std::to_string(l) + " out of range");
      }
      ++community_sizes_[static_cast<std::size_t>(l)];
    }
    for (std::size_t a = 0; a < k; ++a) {
      if (community_sizes_[a] == 0) throw ValidationError("community '" + names_[a] + "' has no nodes");
    }

    std::vector<std::vector<Edge>> per_cell(k * k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        auto a = static_cast<std::size_t>(std::min(labels_[i], labels_[j]));
        auto b = static_cast<std::size_t>(std::max(labels_[i], labels_[j]));
        per_cell[a * k + b].push_back({static_cast<int>(i), static_cast<int>(j)});
      }
    }

    cells_.clear();
    edges_.clear();
    edge_cell_.clear();
    cell_lookup_.assign(k * k, -1);
    edge_lookup_.assign(n * n, -1);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a; b < k; ++b) {
        auto& list = per_cell[a * k + b];
        if (list.empty()) continue;
        const int c = static_cast<int>(cells_.size());
        cells_.push_back({static_cast<int>(a), static_cast<int>(b), edges_.size(), list.size()});
        cell_lookup_[a * k + b] = c;
        cell_lookup_[b * k + a] = c;
        for (const auto& e : list) {
          const auto idx = static_cast<int>(edges_.size());
          edge_lookup_[static_cast<std::size_t>(e.i) * n + static_cast<std::size_t>(e.j)] = idx;
          edge_lookup_[static_cast<std::size_t>(e.j) * n + static_cast<std::size_t>(e.i)] = idx;
          edges_.push_back(e);
          edge_cell_.push_back(c);
        }
      }
    }
  }

  std::vector<int> labels_;
  std::vector<std::string> names_;
  std::vector<std::size_t> community_sizes_;
  std::vector<Cell> cells_;
  std::vector<Edge> edges_;
  std::vector<int> edge_cell_;
  std::vector<int> cell_lookup_;
  std::vector<int> edge_lookup_;
};

/// Fisher z-transform of a correlation, 0.5 * log((1 + r) / (1 - r)).
inline double fisher_z(double r) {
  if (!std::isfinite(r) || std::abs(r) >= 1.0) {
    throw ValidationError("Fisher transform needs |r| < 1, got " + std::to_string(r));
  }
  return std::atanh(r);
}

/// Stacks the off-diagonal weights of a symmetric matrix in canonical
/// cell/edge order.
inline Eigen::VectorXd vectorize(const Eigen::MatrixXd& weights, const CellPartition& partition) {
  const auto n = static_cast<Eigen::Index>(partition.node_count());
  if (weights.rows() != n || weights.cols() != n) {
    throw ValidationError("matrix is " + std::to_string(weights.rows()) + "x" + std::to_string(weights.cols()) +
                          " but the partition has " + std::to_string(n) + " nodes");
  }
  Eigen::VectorXd y(static_cast<Eigen::Index>(partition.edge_count()));
  for (std::size_t e = 0; e < partition.edge_count(); ++e) {
    const auto& ed = partition.edge(e);
    y[static_cast<Eigen::Index>(e)] = weights(ed.i, ed.j);
  }
  return y;
}

/// Inverse of vectorize; the diagonal is emitted as 0.
inline Eigen::MatrixXd devectorize(const Eigen::VectorXd& y, const CellPartition& partition) {
  if (static_cast<std::size_t>(y.size()) != partition.edge_count()) {
    throw ValidationError("edge vector has length " + std::to_string(y.size()) + ", expected " +
                          std::to_string(partition.edge_count()));
  }
  const auto n = static_cast<Eigen::Index>(partition.node_count());
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t e = 0; e < partition.edge_count(); ++e) {
    const auto& ed = partition.edge(e);
    w(ed.i, ed.j) = w(ed.j, ed.i) = y[static_cast<Eigen::Index>(e)];
  }
  return w;
}

struct SubjectNetwork {
  std::string id;
  Eigen::MatrixXd weights;     // symmetric n x n; diagonal ignored
  Eigen::VectorXd covariates;  // length p, covariates[0] == 1 (intercept)
};

/// N subjects sharing one node set and partition. Immutable; the stacked
/// responses (d x N) and the subject design (N x p) are computed once.
class NetworkPopulation {
 public:
  NetworkPopulation(NodeSet nodes, CellPartition partition, std::vector<SubjectNetwork> subjects,
                    std::vector<std::string> covariate_names)
      : nodes_(std::move(nodes)),
        partition_(std::move(partition)),
        subjects_(std::move(subjects)),
        covariate_names_(std::move(covariate_names)) {
    validate();
    const auto d = static_cast<Eigen::Index>(partition_.edge_count());
    const auto big_n = static_cast<Eigen::Index>(subjects_.size());
    const auto p = static_cast<Eigen::Index>(covariate_names_.size());
    response_.resize(d, big_n);
    design_.resize(big_n, p);
    for (Eigen::Index m = 0; m < big_n; ++m) {
      response_.col(m) = vectorize(subjects_[static_cast<std::size_t>(m)].weights, partition_);
      design_.row(m) = subjects_[static_cast<std::size_t>(m)].covariates.transpose();
    }
  }

  const NodeSet& nodes() const { return nodes_; }
  const CellPartition& partition() const { return partition_; }
  const std::vector<SubjectNetwork>& subjects() const { return subjects_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  std::size_t subject_count() const { return subjects_.size(); }
  std::size_t covariate_count() const { return covariate_names_.size(); }

  /// Column m is the stacked edge vector y_m.
  const Eigen::MatrixXd& response() const { return response_; }
  /// Row m is x_m.
  const Eigen::MatrixXd& design() const { return design_; }

  NetworkPopulation with_partition(CellPartition partition) const {
    return NetworkPopulation(nodes_, std::move(partition), subjects_, covariate_names_);
  }

  NetworkPopulation with_covariates(const Eigen::MatrixXd& x, std::vector<std::string> names) const {
    if (static_cast<std::size_t>(x.rows()) != subjects_.size()) {
      throw ValidationError("covariate matrix has wrong number of rows");
    }
    auto subjects = subjects_;
    for (std::size_t m = 0; m < subjects.size(); ++m) {
      subjects[m].covariates = x.row(static_cast<Eigen::Index>(m)).transpose();
    }
    return NetworkPopulation(nodes_, partition_, std::move(subjects), std::move(names));
  }

  NetworkPopulation subset(std::span<const std::size_t> which) const {
    std::vector<SubjectNetwork> subjects;
    subjects.reserve(which.size());
    for (auto m : which) subjects.push_back(subjects_.at(m));
    return NetworkPopulation(nodes_, partition_, std::move(subjects), covariate_names_);
  }

 private:
  void validate() const {
    const auto n = static_cast<Eigen::Index>(nodes_.size());
    if (partition_.node_count() != nodes_.size()) {
      throw ValidationError("partition labels " + std::to_string(partition_.node_count()) + " nodes, node set has " +
                            std::to_string(nodes_.size()));
    }
    if (subjects_.size() < 2) throw ValidationError("population needs at least 2 subjects");
    if (covariate_names_.empty()) throw ValidationError("at least the intercept covariate is required");
    const auto p = static_cast<Eigen::Index>(covariate_names_.size());
    for (const auto& s : subjects_) {
      if (s.weights.rows() != n || s.weights.cols() != n) {
        throw ValidationError("subject '" + s.id + "': matrix is " + std::to_string(s.weights.rows()) + "x" +
                              std::to_string(s.weights.cols()) + ", expected " + std::to_string(n) + "x" +
                              std::to_string(n));
      }
      if (s.covariates.size() != p) {
        throw ValidationError("subject '" + s.id + "': expected " + std::to_string(p) + " covariates");
      }
      if (!s.covariates.allFinite()) throw ValidationError("subject '" + s.id + "': non-finite covariate");
      if (s.covariates[0] != 1.0) {
        throw ValidationError("subject '" + s.id + "': first covariate must be the intercept 1");
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
          const double w = s.weights(i, j);
          const double wt = s.weights(j, i);
          if (!std::isfinite(w) || !std::isfinite(wt)) {
            throw ValidationError("subject '" + s.id + "': missing or non-finite weight at (" + nodes_.id(i) + ", " +
                                  nodes_.id(j) + ")");
          }
          if (std::abs(w - wt) > 1e-8 * std::max(1.0, std::abs(w))) {
            throw ValidationError("subject '" + s.id + "': matrix not symmetric at (" + nodes_.id(i) + ", " +
                                  nodes_.id(j) + ")");
          }
        }
      }
    }
  }

  NodeSet nodes_;
  CellPartition partition_;
  std::vector<SubjectNetwork> subjects_;
  std::vector<std::string> covariate_names_;
  Eigen::MatrixXd response_;
  Eigen::MatrixXd design_;
};

/// Explicit random- and fixed-effect designs. Z is d x C; the fixed-effect
/// design of subject m is block-diagonal over cells with blocks X^{ab}_m of
/// shape n_ab x p*n_ab whose columns are [beta, eta_1, ..., eta_{n_ab-1}]
/// (p columns each). The last edge of a cell carries -x_m^T in every eta
/// column, which encodes sum_i eta_i = 0.
///
/// X_m is materialised on demand: it has p*d columns.
struct DesignMatrices {
  Eigen::SparseMatrix<double> z;
  Eigen::MatrixXd covariates;  // N x p
  std::vector<Cell> cells;
  std::size_t edge_count = 0;

  static Eigen::MatrixXd cell_block(std::size_t n_ab, const Eigen::VectorXd& x) {
    const auto s = static_cast<Eigen::Index>(n_ab);
    const auto p = x.size();
    Eigen::MatrixXd block = Eigen::MatrixXd::Zero(s, p * s);
    const Eigen::RowVectorXd xt = x.transpose();
    for (Eigen::Index i = 0; i < s; ++i) {
      block.block(i, 0, 1, p) = xt;
      if (i + 1 < s) {
        block.block(i, p * (i + 1), 1, p) = xt;
      } else {
        for (Eigen::Index k = 1; k < s; ++k) block.block(i, p * k, 1, p) = -xt;
      }
    }
    return block;
  }

  Eigen::SparseMatrix<double> subject_design(std::size_t m) const {
    const Eigen::VectorXd x = covariates.row(static_cast<Eigen::Index>(m)).transpose();
    const auto p = x.size();
    std::vector<Eigen::Triplet<double>> trips;
    for (const auto& c : cells) {
      const Eigen::MatrixXd block = cell_block(c.size, x);
      const auto row0 = static_cast<Eigen::Index>(c.offset);
      const auto col0 = static_cast<Eigen::Index>(c.offset) * p;
      for (Eigen::Index i = 0; i < block.rows(); ++i) {
        for (Eigen::Index j = 0; j < block.cols(); ++j) {
          if (block(i, j) != 0.0) trips.emplace_back(row0 + i, col0 + j, block(i, j));
        }
      }
    }
    const auto d = static_cast<Eigen::Index>(edge_count);
    Eigen::SparseMatrix<double> xm(d, d * p);
    xm.setFromTriplets(trips.begin(), trips.end());
    return xm;
  }
};

inline Eigen::SparseMatrix<double> random_effect_design(const CellPartition& partition) {
  const auto d = static_cast<Eigen::Index>(partition.edge_count());
  const auto c = static_cast<Eigen::Index>(partition.cell_count());
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(partition.edge_count());
  for (std::size_t e = 0; e < partition.edge_count(); ++e) {
    trips.emplace_back(static_cast<Eigen::Index>(e), partition.edge_cell(e), 1.0);
  }
  Eigen::SparseMatrix<double> z(d, c);
  z.setFromTriplets(trips.begin(), trips.end());
  return z;
}

inline DesignMatrices build_designs(const NetworkPopulation& pop) {
  DesignMatrices out;
  out.z = random_effect_design(pop.partition());
  out.covariates = pop.design();
  out.cells = pop.partition().cells();
  out.edge_count = pop.partition().edge_count();
  return out;
}

}  // namespace netlmm
