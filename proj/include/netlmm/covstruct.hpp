#pragma once

// Structured edge covariance Sigma = V + Z U Z^T with V diagonal or
// block-diagonal by cell. All solves go through the low-rank identity
//
//   Sigma^{-1} = V^{-1} - V^{-1} Z (I + U M)^{-1} U Z^T V^{-1},   M = Z^T V^{-1} Z,
//
// which holds for any PSD U (singular included). M is diagonal because V
// never couples two cells, so the inner system is evaluated in the
// form D^{-1} (I + D U D)^{-1} D U D D^{-1} with D = M^{1/2}.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "netlmm/error.hpp"
#include "netlmm/netdata.hpp"

namespace netlmm {

enum class VMode {
  kDiagonalCell,  // one variance per cell
  kDiagonalEdge,  // one variance per edge
  kBlock,         // dense PSD block per cell
};

inline std::string to_string(VMode mode) {
  switch (mode) {
    case VMode::kDiagonalCell: return "diag";
    case VMode::kDiagonalEdge: return "diag-edge";
    case VMode::kBlock: return "block";
  }
  return "?";
}

inline VMode parse_v_mode(const std::string& s) {
  if (s == "diag" || s == "diag-cell" || s == "diagonal") return VMode::kDiagonalCell;
  if (s == "diag-edge") return VMode::kDiagonalEdge;
  if (s == "block" || s == "block-diag") return VMode::kBlock;
  throw ValidationError("unknown V mode '" + s + "' (expected diag, diag-edge or block)");
}

/// Symmetrised U after checking it is finite, symmetric and PSD to 1e-8.
inline Eigen::MatrixXd checked_random_effect_cov(const Eigen::MatrixXd& u) {
  if (u.rows() != u.cols()) throw ValidationError("U must be square");
  if (!u.allFinite()) throw NumericalError("U has non-finite entries");
  const double uscale = std::max(1.0, u.cwiseAbs().maxCoeff());
  if ((u - u.transpose()).cwiseAbs().maxCoeff() > 1e-10 * uscale) throw NumericalError("U is not symmetric");
  Eigen::MatrixXd out = 0.5 * (u + u.transpose());
  if (out.rows() > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out, Eigen::EigenvaluesOnly);
    const double lmax = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < -1e-8 * lmax) throw NumericalError("U is not positive semidefinite");
  }
  return out;
}

/// Eigenvalue clipping of a symmetric matrix at `floor`.
inline Eigen::MatrixXd clip_eigenvalues(const Eigen::MatrixXd& a, double floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  if (es.eigenvalues().minCoeff() >= floor) return 0.5 * (a + a.transpose());
  const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(floor);
  const Eigen::MatrixXd out = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

/// Residual covariance V.
class ResidualCov {
 public:
  ResidualCov() = default;

  static ResidualCov diagonal_cell(std::vector<Cell> cells, Eigen::VectorXd per_cell) {
    ResidualCov v(VMode::kDiagonalCell, std::move(cells));
    if (static_cast<std::size_t>(per_cell.size()) != v.cells_.size()) {
      throw ValidationError("per-cell variance vector has wrong length");
    }
    check_variances(per_cell);
    v.values_ = std::move(per_cell);
    return v;
  }

  static ResidualCov diagonal_edge(std::vector<Cell> cells, Eigen::VectorXd per_edge) {
    ResidualCov v(VMode::kDiagonalEdge, std::move(cells));
    if (static_cast<std::size_t>(per_edge.size()) != v.edge_count_) {
      throw ValidationError("per-edge variance vector has wrong length");
    }
    check_variances(per_edge);
    v.values_ = std::move(per_edge);
    return v;
  }

  /// Blocks are symmetrised; eigenvalues down to -1e-8 (relative) are
  /// clipped to 0, anything more negative is rejected.
  static ResidualCov block(std::vector<Cell> cells, std::vector<Eigen::MatrixXd> blocks, bool check_psd = true) {
    ResidualCov v(VMode::kBlock, std::move(cells));
    if (blocks.size() != v.cells_.size()) throw ValidationError("wrong number of V blocks");
    for (std::size_t c = 0; c < blocks.size(); ++c) {
      const auto s = static_cast<Eigen::Index>(v.cells_[c].size);
      if (blocks[c].rows() != s || blocks[c].cols() != s) {
        throw ValidationError("V block " + std::to_string(c) + " has wrong shape");
      }
      if (!blocks[c].allFinite()) throw ValidationError("V block " + std::to_string(c) + " is not finite");
      if (check_psd) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (blocks[c] + blocks[c].transpose()),
                                                          Eigen::EigenvaluesOnly);
        const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
        if (es.eigenvalues().minCoeff() < -1e-8 * scale) {
          throw ValidationError("V block " + std::to_string(c) + " is not positive semidefinite");
        }
        blocks[c] = clip_eigenvalues(blocks[c], 0.0);
      } else {
        blocks[c] = 0.5 * (blocks[c] + blocks[c].transpose());
      }
    }
    v.blocks_ = std::move(blocks);
    return v;
  }

  VMode mode() const { return mode_; }
  const std::vector<Cell>& cells() const { return cells_; }
  std::size_t edge_count() const { return edge_count_; }

  /// Per-cell variances (diag-cell) or per-edge variances (diag-edge).
  const Eigen::VectorXd& values() const { return values_; }
  const std::vector<Eigen::MatrixXd>& blocks() const { return blocks_; }

  Eigen::MatrixXd cell_block(std::size_t c) const {
    const auto& cell = cells_.at(c);
    const auto s = static_cast<Eigen::Index>(cell.size);
    switch (mode_) {
      case VMode::kDiagonalCell: return Eigen::MatrixXd::Identity(s, s) * values_[static_cast<Eigen::Index>(c)];
      case VMode::kDiagonalEdge:
        return values_.segment(static_cast<Eigen::Index>(cell.offset), s).asDiagonal();
      case VMode::kBlock: return blocks_[c];
    }
    return {};
  }

  double edge_variance(std::size_t e, int cell) const {
    switch (mode_) {
      case VMode::kDiagonalCell: return values_[cell];
      case VMode::kDiagonalEdge: return values_[static_cast<Eigen::Index>(e)];
      case VMode::kBlock: {
        const auto& c = cells_[static_cast<std::size_t>(cell)];
        const auto k = static_cast<Eigen::Index>(e - c.offset);
        return blocks_[static_cast<std::size_t>(cell)](k, k);
      }
    }
    return 0.0;
  }

  /// w^T V_c w for a vector supported on cell c.
  double cell_quadratic(std::size_t c, const Eigen::VectorXd& w) const {
    const auto& cell = cells_.at(c);
    switch (mode_) {
      case VMode::kDiagonalCell: return values_[static_cast<Eigen::Index>(c)] * w.squaredNorm();
      case VMode::kDiagonalEdge:
        return (w.array().square() *
                values_.segment(static_cast<Eigen::Index>(cell.offset), static_cast<Eigen::Index>(cell.size)).array())
            .sum();
      case VMode::kBlock: return w.dot(blocks_[c] * w);
    }
    return 0.0;
  }

  Eigen::MatrixXd dense() const {
    const auto d = static_cast<Eigen::Index>(edge_count_);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells_[c].offset);
      const auto s = static_cast<Eigen::Index>(cells_[c].size);
      out.block(o, o, s, s) = cell_block(c);
    }
    return out;
  }

 private:
  ResidualCov(VMode mode, std::vector<Cell> cells) : mode_(mode), cells_(std::move(cells)) {
    for (const auto& c : cells_) edge_count_ += c.size;
  }

  static void check_variances(const Eigen::VectorXd& v) {
    if (!v.allFinite() || (v.size() > 0 && v.minCoeff() < 0.0)) {
      throw ValidationError("residual variances must be finite and non-negative");
    }
  }

  VMode mode_ = VMode::kDiagonalCell;
  std::vector<Cell> cells_;
  std::size_t edge_count_ = 0;
  Eigen::VectorXd values_;
  std::vector<Eigen::MatrixXd> blocks_;
};

/// Projects a dense d x d residual moment matrix onto the sparsity class of
/// `mode` (Frobenius-nearest), then clips eigenvalues of each block at
/// `floor`.
inline ResidualCov project_v(const Eigen::MatrixXd& moment, VMode mode, const std::vector<Cell>& cells,
                             double floor = 0.0) {
  std::size_t d = 0;
  for (const auto& c : cells) d += c.size;
  if (moment.rows() != static_cast<Eigen::Index>(d) || moment.cols() != static_cast<Eigen::Index>(d)) {
    throw ValidationError("moment matrix is " + std::to_string(moment.rows()) + "x" + std::to_string(moment.cols()) +
                          ", expected " + std::to_string(d) + "x" + std::to_string(d));
  }
  switch (mode) {
    case VMode::kDiagonalCell: {
      Eigen::VectorXd v(static_cast<Eigen::Index>(cells.size()));
      for (std::size_t c = 0; c < cells.size(); ++c) {
        const auto o = static_cast<Eigen::Index>(cells[c].offset);
        const auto s = static_cast<Eigen::Index>(cells[c].size);
        v[static_cast<Eigen::Index>(c)] = std::max(floor, moment.diagonal().segment(o, s).mean());
      }
      return ResidualCov::diagonal_cell(cells, std::move(v));
    }
    case VMode::kDiagonalEdge:
      return ResidualCov::diagonal_edge(cells, moment.diagonal().cwiseMax(floor));
    case VMode::kBlock: {
      std::vector<Eigen::MatrixXd> blocks;
      for (const auto& c : cells) {
        const auto o = static_cast<Eigen::Index>(c.offset);
        const auto s = static_cast<Eigen::Index>(c.size);
        blocks.push_back(clip_eigenvalues(moment.block(o, o, s, s), floor));
      }
      return ResidualCov::block(cells, std::move(blocks), false);
    }
  }
  throw ValidationError("unknown V mode");
}

/// Sigma = V + Z U Z^T with cached factorizations. Immutable; all member
/// functions are const and thread-safe.
class StructuredCovariance {
 public:
  StructuredCovariance(ResidualCov v, Eigen::MatrixXd u) : v_(std::move(v)), u_(std::move(u)) { factorize(); }

  const ResidualCov& v() const { return v_; }
  const Eigen::MatrixXd& u() const { return u_; }
  const std::vector<Cell>& cells() const { return v_.cells(); }
  std::size_t dim() const { return v_.edge_count(); }
  std::size_t cell_count() const { return v_.cells().size(); }

  /// M = Z^T V^{-1} Z (diagonal).
  const Eigen::VectorXd& inner_diagonal() const { return m_; }

  /// Posterior covariance of the cell random effects given one subject's
  /// edges: U - U Z^T Sigma^{-1} Z U = (I + U M)^{-1} U.
  const Eigen::MatrixXd& posterior_cov() const { return g_; }

  double logdet() const { return logdet_; }

  /// V^{-1} B, column by column.
  Eigen::MatrixXd v_solve(const Eigen::MatrixXd& b) const {
    check_rows(b);
    Eigen::MatrixXd out(b.rows(), b.cols());
    const auto& cells = v_.cells();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto s = static_cast<Eigen::Index>(cells[c].size);
      switch (v_.mode()) {
        case VMode::kDiagonalCell: out.middleRows(o, s) = b.middleRows(o, s) / v_.values()[static_cast<Eigen::Index>(c)]; break;
        case VMode::kDiagonalEdge:
          out.middleRows(o, s) = v_.values().segment(o, s).cwiseInverse().asDiagonal() * b.middleRows(o, s);
          break;
        case VMode::kBlock: out.middleRows(o, s) = block_llt_[c].solve(b.middleRows(o, s)); break;
      }
    }
    return out;
  }

  /// Z^T B: per-cell column sums.
  Eigen::MatrixXd cell_sums(const Eigen::MatrixXd& b) const {
    const auto& cells = v_.cells();
    Eigen::MatrixXd out(static_cast<Eigen::Index>(cells.size()), b.cols());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out.row(static_cast<Eigen::Index>(c)) =
          b.middleRows(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].size))
              .colwise()
              .sum();
    }
    return out;
  }

  /// Sigma^{-1} B. Each column is split into Z bbar + b_perp with bbar the
  /// V-weighted cell means, so Z^T V^{-1} b_perp = 0 and
  /// Sigma^{-1} b = V^{-1} b_perp + V^{-1} Z M^{-1} A^{-1} bbar, A = M^{-1} + U.
  /// Nothing large cancels when V is tiny next to U.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const {
    Eigen::MatrixXd bbar;
    Eigen::MatrixXd s = v_solve(split(b, bbar));
    const Eigen::MatrixXd h = m_.cwiseInverse().asDiagonal() * a_llt_.solve(bbar);
    add_cell_terms(h, s);
    return s;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    return solve(Eigen::MatrixXd(b)).col(0);
  }

  /// r^T Sigma^{-1} r = r_perp^T V^{-1} r_perp + rbar^T A^{-1} rbar for every
  /// column r of R.
  Eigen::VectorXd inverse_quadratic(const Eigen::MatrixXd& r) const {
    Eigen::MatrixXd rbar;
    const Eigen::MatrixXd perp = split(r, rbar);
    const Eigen::MatrixXd vp = v_solve(perp);
    return (perp.cwiseProduct(vp)).colwise().sum().transpose() +
           (rbar.cwiseProduct(a_llt_.solve(rbar))).colwise().sum().transpose();
  }

  /// E(gamma | y) for residual columns R: U A^{-1} rbar, equal to G Z^T V^{-1} r.
  Eigen::MatrixXd posterior_mean(const Eigen::MatrixXd& r) const {
    const Eigen::MatrixXd rbar = cell_sums(v_solve(r)).array().colwise() / m_.array();
    return u_ * a_llt_.solve(rbar);
  }

  /// U A^{-1} rbar for columns of V-weighted cell means.
  Eigen::MatrixXd posterior_mean_from_means(const Eigen::MatrixXd& rbar) const { return u_ * a_llt_.solve(rbar); }

  /// Sum over columns of rbar^T A^{-1} rbar.
  double mean_quadratic(const Eigen::MatrixXd& rbar) const { return rbar.cwiseProduct(a_llt_.solve(rbar)).sum(); }

  /// Sigma B.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& b) const {
    check_rows(b);
    Eigen::MatrixXd out(b.rows(), b.cols());
    const auto& cells = v_.cells();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto s = static_cast<Eigen::Index>(cells[c].size);
      switch (v_.mode()) {
        case VMode::kDiagonalCell: out.middleRows(o, s) = b.middleRows(o, s) * v_.values()[static_cast<Eigen::Index>(c)]; break;
        case VMode::kDiagonalEdge: out.middleRows(o, s) = v_.values().segment(o, s).asDiagonal() * b.middleRows(o, s); break;
        case VMode::kBlock: out.middleRows(o, s) = v_.blocks()[c] * b.middleRows(o, s); break;
      }
    }
    const Eigen::MatrixXd h = u_ * cell_sums(b);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto s = static_cast<Eigen::Index>(cells[c].size);
      out.middleRows(o, s).rowwise() += h.row(static_cast<Eigen::Index>(c));
    }
    return out;
  }

  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd out = v_.dense();
    const auto& cells = v_.cells();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      for (std::size_t k = 0; k < cells.size(); ++k) {
        out.block(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[k].offset),
                  static_cast<Eigen::Index>(cells[c].size), static_cast<Eigen::Index>(cells[k].size))
            .array() += u_(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k));
      }
    }
    return out;
  }

  /// w^T Sigma_cc w for a vector supported on cell c.
  double cell_contrast_variance(std::size_t c, const Eigen::VectorXd& w) const {
    const double sum = w.sum();
    const auto ci = static_cast<Eigen::Index>(c);
    return v_.cell_quadratic(c, w) + sum * sum * u_(ci, ci);
  }

 private:
  void check_rows(const Eigen::MatrixXd& b) const {
    if (b.rows() != static_cast<Eigen::Index>(dim())) {
      throw ValidationError("right-hand side has " + std::to_string(b.rows()) + " rows, expected " +
                            std::to_string(dim()));
    }
  }

  // S += V^{-1} Z H, i.e. per cell add w_c * H_c with w_c = V_c^{-1} 1.
  void add_cell_terms(const Eigen::MatrixXd& h, Eigen::MatrixXd& s) const {
    const auto& cells = v_.cells();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto sz = static_cast<Eigen::Index>(cells[c].size);
      s.middleRows(o, sz).noalias() += w_[c] * h.row(static_cast<Eigen::Index>(c));
    }
  }

  // B - Z Bbar with Bbar the V-weighted cell means (w_c^T b_c / m_c).
  Eigen::MatrixXd split(const Eigen::MatrixXd& b, Eigen::MatrixXd& bbar) const {
    check_rows(b);
    const auto& cells = v_.cells();
    bbar.resize(static_cast<Eigen::Index>(cells.size()), b.cols());
    Eigen::MatrixXd perp = b;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      auto seg = perp.middleRows(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].size));
      bbar.row(ci) = (w_[c].transpose() * seg) / m_[ci];
      seg.rowwise() -= bbar.row(ci);
    }
    return perp;
  }

  void factorize() {
    const auto& cells = v_.cells();
    const auto k = static_cast<Eigen::Index>(cells.size());
    if (u_.rows() != k || u_.cols() != k) {
      throw ValidationError("U is " + std::to_string(u_.rows()) + "x" + std::to_string(u_.cols()) + ", expected " +
                            std::to_string(k) + "x" + std::to_string(k));
    }
    u_ = checked_random_effect_cov(u_);

    m_.resize(k);
    w_.resize(cells.size());
    block_llt_.resize(v_.mode() == VMode::kBlock ? cells.size() : 0);
    double logdet_v = 0.0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto s = static_cast<Eigen::Index>(cells[c].size);
      switch (v_.mode()) {
        case VMode::kDiagonalCell: {
          const double var = v_.values()[static_cast<Eigen::Index>(c)];
          if (!(var > 0.0)) throw NumericalError("singular V: zero variance in cell " + std::to_string(c));
          w_[c] = Eigen::VectorXd::Constant(s, 1.0 / var);
          logdet_v += static_cast<double>(s) * std::log(var);
          break;
        }
        case VMode::kDiagonalEdge: {
          const auto seg = v_.values().segment(o, s);
          if (!(seg.minCoeff() > 0.0)) throw NumericalError("singular V: zero variance in cell " + std::to_string(c));
          w_[c] = seg.cwiseInverse();
          logdet_v += seg.array().log().sum();
          break;
        }
        case VMode::kBlock: {
          block_llt_[c].compute(v_.blocks()[c]);
          if (block_llt_[c].info() != Eigen::Success) {
            throw NumericalError("singular V block in cell " + std::to_string(c));
          }
          const auto diag = block_llt_[c].matrixLLT().diagonal();
          if (!(diag.minCoeff() > 0.0)) throw NumericalError("singular V block in cell " + std::to_string(c));
          logdet_v += 2.0 * diag.array().log().sum();
          w_[c] = block_llt_[c].solve(Eigen::VectorXd::Ones(s));
          break;
        }
      }
      m_[static_cast<Eigen::Index>(c)] = w_[c].sum();
    }

    const Eigen::VectorXd dsqrt = m_.cwiseSqrt();
    const Eigen::MatrixXd scaled_u = dsqrt.asDiagonal() * u_ * dsqrt.asDiagonal();
    Eigen::MatrixXd inner = scaled_u;
    inner.diagonal().array() += 1.0;
    Eigen::LLT<Eigen::MatrixXd> llt(inner);
    if (llt.info() != Eigen::Success) throw NumericalError("inner covariance system is not positive definite");
    const Eigen::VectorXd dinv = dsqrt.cwiseInverse();
    g_ = dinv.asDiagonal() * llt.solve(scaled_u) * dinv.asDiagonal();
    g_ = 0.5 * (g_ + g_.transpose());
    Eigen::MatrixXd a = u_;
    a.diagonal() += m_.cwiseInverse();
    a_llt_.compute(a);
    if (a_llt_.info() != Eigen::Success) throw NumericalError("inner covariance system is not positive definite");
    logdet_ = logdet_v + 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }

  ResidualCov v_;
  Eigen::MatrixXd u_;
  Eigen::VectorXd m_;
  std::vector<Eigen::VectorXd> w_;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> block_llt_;
  Eigen::MatrixXd g_;
  Eigen::LLT<Eigen::MatrixXd> a_llt_;  // M^{-1} + U
  double logdet_ = 0.0;
};

}  // namespace netlmm
