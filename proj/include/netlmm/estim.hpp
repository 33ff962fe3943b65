#pragma once

// Estimation of the graph-aware mixed model
//
//   y_m = X_m alpha + Z gamma_m + eps_m,  gamma_m ~ N(0, U),  eps_m ~ N(0, V).
//
// The fixed-effect design is saturated per edge: alpha is a reparametrisation
// of one coefficient vector theta_e = beta_cell + eta_e per edge. Every
// estimator here therefore works on the d x p matrix Theta and converts to
// (beta, eta) at the end.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "netlmm/covstruct.hpp"
#include "netlmm/error.hpp"
#include "netlmm/netdata.hpp"

namespace netlmm {

namespace detail {

inline Eigen::MatrixXd cell_means(const Eigen::MatrixXd& a, const std::vector<Cell>& cells) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(cells.size()), a.cols());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    out.row(static_cast<Eigen::Index>(c)) =
        a.middleRows(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].size))
            .colwise()
            .mean();
  }
  return out;
}

/// Z B: repeats row c of B over the edges of cell c.
inline Eigen::MatrixXd expand_cells(const Eigen::MatrixXd& b, const std::vector<Cell>& cells) {
  std::size_t d = 0;
  for (const auto& c : cells) d += c.size;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(d), b.cols());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    out.middleRows(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].size)).rowwise() =
        b.row(static_cast<Eigen::Index>(c));
  }
  return out;
}

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& cols) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = x.col(cols[k]);
  return out;
}

inline Eigen::MatrixXd symmetric_inverse(const Eigen::MatrixXd& a, const std::string& what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
  if (!(es.eigenvalues().minCoeff() > 1e-12 * std::max(lmax, 1e-300))) {
    throw ValidationError(what);
  }
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

/// (A + delta I)^{-1} for PSD A with delta tiny relative to the spectrum, so
/// null directions of A get a very large (not zero) weight.
inline Eigen::MatrixXd ridge_inverse(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  const double delta = 1e-10 * std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  const Eigen::VectorXd inv = (es.eigenvalues().cwiseMax(0.0).array() + delta).inverse();
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Fixed effects alpha = ({beta^{ab}}, {eta_i^{ab}}).
struct CoefficientSet {
  Eigen::MatrixXd beta;  // C x p, row = cell
  Eigen::MatrixXd eta;   // d x p, row = edge; columns sum to zero within every cell

  static CoefficientSet from_edge_effects(const Eigen::MatrixXd& theta, const std::vector<Cell>& cells) {
    CoefficientSet out;
    out.beta = detail::cell_means(theta, cells);
    out.eta = theta - detail::expand_cells(out.beta, cells);
    return out;
  }

  /// theta_e = beta_cell(e) + eta_e.
  Eigen::MatrixXd edge_effects(const std::vector<Cell>& cells) const {
    return detail::expand_cells(beta, cells) + eta;
  }

  std::size_t covariate_count() const { return static_cast<std::size_t>(beta.cols()); }

  /// Stacked alpha in the column order of X_m: per cell beta, eta_1, ...,
  /// eta_{n_ab - 1}, each of length p.
  Eigen::VectorXd stacked(const std::vector<Cell>& cells) const {
    const auto p = beta.cols();
    Eigen::VectorXd out(eta.rows() * p);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto s = static_cast<Eigen::Index>(cells[c].size);
      out.segment(o * p, p) = beta.row(static_cast<Eigen::Index>(c)).transpose();
      for (Eigen::Index i = 0; i + 1 < s; ++i) out.segment((o + i + 1) * p, p) = eta.row(o + i).transpose();
    }
    return out;
  }

  static CoefficientSet from_stacked(const Eigen::VectorXd& alpha, const std::vector<Cell>& cells, Eigen::Index p) {
    CoefficientSet out;
    const auto d = alpha.size() / p;
    out.beta.resize(static_cast<Eigen::Index>(cells.size()), p);
    out.eta.resize(d, p);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells[c].offset);
      const auto s = static_cast<Eigen::Index>(cells[c].size);
      out.beta.row(static_cast<Eigen::Index>(c)) = alpha.segment(o * p, p).transpose();
      Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(p);
      for (Eigen::Index i = 0; i + 1 < s; ++i) {
        out.eta.row(o + i) = alpha.segment((o + i + 1) * p, p).transpose();
        sum += out.eta.row(o + i);
      }
      out.eta.row(o + s - 1) = -sum;
    }
    return out;
  }

  /// Largest |sum_i eta_i| over cells and covariates.
  double max_eta_sum(const std::vector<Cell>& cells) const {
    double worst = 0.0;
    for (const auto& c : cells) {
      const auto sums =
          eta.middleRows(static_cast<Eigen::Index>(c.offset), static_cast<Eigen::Index>(c.size)).colwise().sum();
      worst = std::max(worst, sums.cwiseAbs().maxCoeff());
    }
    return worst;
  }
};

/// Which parts of the mean model are free. Defaults to the full model.
struct ModelStructure {
  /// Per covariate: whether edges deviate from the cell effect (eta free).
  /// Empty means every covariate has edge deviations.
  std::vector<bool> edge_deviation;
  /// (cell, covariate) pairs whose beta is fixed at 0.
  std::vector<std::pair<std::size_t, std::size_t>> zero_beta;

  bool has_edge_deviation(std::size_t j) const { return edge_deviation.empty() || edge_deviation.at(j); }

  bool is_zero(std::size_t cell, std::size_t j) const {
    return std::find(zero_beta.begin(), zero_beta.end(), std::make_pair(cell, j)) != zero_beta.end();
  }

  bool full() const {
    return zero_beta.empty() &&
           std::all_of(edge_deviation.begin(), edge_deviation.end(), [](bool b) { return b; });
  }
};

/// (sum_m X_m^T X_m)^{-1} restricted to the covariate Gram matrix S = X^T X.
inline Eigen::MatrixXd gram_inverse(const NetworkPopulation& pop) {
  const Eigen::MatrixXd s = pop.design().transpose() * pop.design();
  const auto& cell = pop.partition().cell(0);
  return detail::symmetric_inverse(
      s, "covariates do not span R^p across subjects; the design of every cell is rank deficient (first: cell (" +
             pop.partition().community_names()[static_cast<std::size_t>(cell.a)] + "," +
             pop.partition().community_names()[static_cast<std::size_t>(cell.b)] + "))");
}

/// Covariance of the estimated edge effects, Cov(vec Theta) = S^{-1} (x) Sigma,
/// where Sigma = V + Z U Z^T. For OLS, Sigma is sigma2_ab I per cell.
class CoefficientCovariance {
 public:
  CoefficientCovariance() = default;
  CoefficientCovariance(ResidualCov v, Eigen::MatrixXd u, Eigen::MatrixXd gram_inv)
      : v_(std::move(v)), u_(std::move(u)), gram_inv_(std::move(gram_inv)) {}

  const ResidualCov& v() const { return v_; }
  const Eigen::MatrixXd& u() const { return u_; }
  const Eigen::MatrixXd& gram_inverse() const { return gram_inv_; }

  /// Var(w^T Theta_c u) for edge weights w on cell c and covariate weights u.
  double contrast_variance(std::size_t c, const Eigen::VectorXd& w, const Eigen::VectorXd& u) const {
    const double sum = w.sum();
    const auto ci = static_cast<Eigen::Index>(c);
    const double edge_part = v_.cell_quadratic(c, w) + sum * sum * u_(ci, ci);
    return edge_part * u.dot(gram_inv_ * u);
  }

 private:
  ResidualCov v_;
  Eigen::MatrixXd u_;
  Eigen::MatrixXd gram_inv_;
};

struct OlsFit {
  CoefficientSet alpha;
  Eigen::VectorXd sigma2;        // pooled residual variance per cell
  Eigen::MatrixXd gram_inverse;  // (X^T X)^{-1}

  CoefficientCovariance covariance() const {
    const auto c = sigma2.size();
    return CoefficientCovariance(ResidualCov::diagonal_cell(cells, sigma2), Eigen::MatrixXd::Zero(c, c), gram_inverse);
  }

  std::vector<Cell> cells;
};

/// Ordinary least squares, cell by cell. Under a restricted structure beta
/// is the regression of the cell-mean response on the free covariates and
/// eta the per-edge regression of the deviations from the cell mean.
inline OlsFit fit_ols(const NetworkPopulation& pop, const ModelStructure& structure = {}) {
  const auto& cells = pop.partition().cells();
  const Eigen::MatrixXd& y = pop.response();
  const Eigen::MatrixXd& x = pop.design();
  const auto p = x.cols();
  const auto big_n = x.rows();

  OlsFit out;
  out.cells = cells;
  out.gram_inverse = gram_inverse(pop);

  const Eigen::MatrixXd ybar = detail::cell_means(y, cells);  // C x N
  out.alpha.beta = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cells.size()), p);
  if (structure.zero_beta.empty()) {
    out.alpha.beta = ybar * x * out.gram_inverse;
  } else {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      std::vector<Eigen::Index> free;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (!structure.is_zero(c, static_cast<std::size_t>(j))) free.push_back(j);
      }
      if (free.empty()) continue;
      const Eigen::MatrixXd xf = detail::select_columns(x, free);
      const Eigen::VectorXd b = (xf.transpose() * xf).ldlt().solve(xf.transpose() * ybar.row(static_cast<Eigen::Index>(c)).transpose());
      for (std::size_t k = 0; k < free.size(); ++k) out.alpha.beta(static_cast<Eigen::Index>(c), free[k]) = b[static_cast<Eigen::Index>(k)];
    }
  }

  std::vector<Eigen::Index> dev_cols;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (structure.has_edge_deviation(static_cast<std::size_t>(j))) dev_cols.push_back(j);
  }
  out.alpha.eta = Eigen::MatrixXd::Zero(y.rows(), p);
  if (!dev_cols.empty()) {
    const Eigen::MatrixXd deviations = y - detail::expand_cells(ybar, cells);
    const Eigen::MatrixXd xf = detail::select_columns(x, dev_cols);
    const Eigen::MatrixXd eta_f = deviations * xf * (xf.transpose() * xf).inverse();
    for (std::size_t k = 0; k < dev_cols.size(); ++k) out.alpha.eta.col(dev_cols[k]) = eta_f.col(static_cast<Eigen::Index>(k));
  }

  const Eigen::MatrixXd resid = y - out.alpha.edge_effects(cells) * x.transpose();
  out.sigma2.resize(static_cast<Eigen::Index>(cells.size()));
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto s = static_cast<double>(cells[c].size);
    double beta_free = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) beta_free += structure.is_zero(c, static_cast<std::size_t>(j)) ? 0.0 : 1.0;
    const double dof = s * static_cast<double>(big_n) - beta_free - (s - 1.0) * static_cast<double>(dev_cols.size());
    if (dof <= 0.0) throw ValidationError("no residual degrees of freedom in cell " + std::to_string(c));
    out.sigma2[static_cast<Eigen::Index>(c)] =
        resid.middleRows(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].size))
            .squaredNorm() /
        dof;
  }
  return out;
}

/// Gaussian marginal log-likelihood sum_m log N(y_m; X_m alpha, Sigma).
inline double marginal_loglik(const NetworkPopulation& pop, const CoefficientSet& alpha,
                              const StructuredCovariance& sigma) {
  const auto& cells = pop.partition().cells();
  const Eigen::MatrixXd resid = pop.response() - alpha.edge_effects(cells) * pop.design().transpose();
  const Eigen::VectorXd q = sigma.inverse_quadratic(resid);
  const double d = static_cast<double>(resid.rows());
  const double per_subject_const = d * std::log(2.0 * std::numbers::pi) + sigma.logdet();
  double total = 0.0;
  for (Eigen::Index m = 0; m < q.size(); ++m) total += -0.5 * (per_subject_const + q[m]);
  return total;
}

enum class GlsSolver { kClosedForm, kBlockCoordinate };

struct GlsOptions {
  GlsSolver solver = GlsSolver::kClosedForm;
  double tol = 1e-8;
  int max_iter = 500;
  /// (cell, covariate) pairs whose beta is constrained to 0.
  std::vector<std::pair<std::size_t, std::size_t>> zero_beta;
};

struct GlsFit {
  CoefficientSet alpha;
  CoefficientCovariance covariance;  // (sum_m X_m^T Sigma^{-1} X_m)^{-1}, unconstrained
  int sweeps = 0;
};

/// Generalised least squares with a fixed Sigma.
///
/// With a saturated per-edge design shared by all subjects the normal
/// equations read Sigma^{-1} (Theta - B) S = 0 with B the per-edge OLS
/// solution, so the unconstrained estimate is B whatever Sigma is. Zero
/// constraints on beta are imposed through an exact Lagrange correction.
/// The block coordinate solver sweeps over cells instead; it is kept for
/// cross-checking and reaches the same fixed point.
inline GlsFit fit_gls(const NetworkPopulation& pop, const StructuredCovariance& sigma, const GlsOptions& opts = {}) {
  const auto& cells = pop.partition().cells();
  if (sigma.dim() != pop.partition().edge_count() || sigma.cell_count() != cells.size()) {
    throw ValidationError("covariance dimensions do not match the population");
  }
  const OlsFit ols = fit_ols(pop);
  const Eigen::MatrixXd b = ols.alpha.edge_effects(cells);
  const Eigen::MatrixXd& s_inv = ols.gram_inverse;

  GlsFit out;
  out.covariance = CoefficientCovariance(sigma.v(), sigma.u(), s_inv);

  if (!opts.zero_beta.empty()) {
    const auto k = static_cast<Eigen::Index>(opts.zero_beta.size());
    const auto d = b.rows();
    // sigma_a.col(k) = Sigma a_k with a_k the averaging vector of cell c_k.
    Eigen::MatrixXd sigma_a(d, k);
    Eigen::MatrixXd gram(k, k);
    Eigen::VectorXd rhs(k);
    for (Eigen::Index r = 0; r < k; ++r) {
      const auto [c, j] = opts.zero_beta[static_cast<std::size_t>(r)];
      if (c >= cells.size() || j >= static_cast<std::size_t>(b.cols())) throw ValidationError("constraint out of range");
      Eigen::VectorXd a = Eigen::VectorXd::Zero(d);
      a.segment(static_cast<Eigen::Index>(cells[c].offset), static_cast<Eigen::Index>(cells[c].size))
          .setConstant(1.0 / static_cast<double>(cells[c].size));
      sigma_a.col(r) = sigma.apply(a);
      rhs[r] = ols.alpha.beta(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
    }
    for (Eigen::Index r = 0; r < k; ++r) {
      for (Eigen::Index q = 0; q < k; ++q) {
        const auto [cr, jr] = opts.zero_beta[static_cast<std::size_t>(r)];
        const auto [cq, jq] = opts.zero_beta[static_cast<std::size_t>(q)];
        const double aca = sigma_a.col(q)
                               .segment(static_cast<Eigen::Index>(cells[cr].offset), static_cast<Eigen::Index>(cells[cr].size))
                               .mean();
        gram(r, q) = s_inv(static_cast<Eigen::Index>(jr), static_cast<Eigen::Index>(jq)) * aca;
      }
    }
    const Eigen::VectorXd lambda = gram.ldlt().solve(rhs);
    Eigen::MatrixXd theta = b;
    for (Eigen::Index r = 0; r < k; ++r) {
      const auto j = static_cast<Eigen::Index>(opts.zero_beta[static_cast<std::size_t>(r)].second);
      theta.noalias() -= lambda[r] * sigma_a.col(r) * s_inv.col(j).transpose();
    }
    out.alpha = CoefficientSet::from_edge_effects(theta, cells);
    for (const auto& [c, j] : opts.zero_beta) out.alpha.beta(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = 0.0;
    return out;
  }

  if (opts.solver == GlsSolver::kClosedForm) {
    out.alpha = ols.alpha;
    return out;
  }

  // Block coordinate descent on Q (Theta - B) = 0, Q = Sigma^{-1}, from Theta = 0.
  // With Q_cc' = delta V_c^{-1} - w_c G_cc' w_c'^T the exact block update is
  // Delta_c = (1 + kappa_c m_c) 1 rho_c, rho_c = sum_{c' != c} G_cc' h_c',
  // h_c = w_c^T Delta_c, kappa_c = G_cc / (1 - G_cc m_c).
  const Eigen::MatrixXd& g = sigma.posterior_cov();
  const Eigen::VectorXd& m = sigma.inner_diagonal();
  const auto ncell = static_cast<Eigen::Index>(cells.size());
  const auto p = b.cols();
  Eigen::MatrixXd delta = -b;
  Eigen::MatrixXd h(ncell, p);
  const Eigen::MatrixXd vinv_delta = sigma.v_solve(delta);
  h = sigma.cell_sums(vinv_delta);
  for (int sweep = 1; sweep <= opts.max_iter; ++sweep) {
    double change = 0.0;
    double scale = 0.0;
    for (Eigen::Index c = 0; c < ncell; ++c) {
      const Eigen::RowVectorXd rho = g.row(c) * h - g(c, c) * h.row(c);
      const double kappa = g(c, c) / (1.0 - g(c, c) * m[c]);
      const Eigen::RowVectorXd level = (1.0 + kappa * m[c]) * rho;
      auto block = delta.middleRows(static_cast<Eigen::Index>(cells[static_cast<std::size_t>(c)].offset),
                                    static_cast<Eigen::Index>(cells[static_cast<std::size_t>(c)].size));
      const Eigen::MatrixXd old = block;
      block.rowwise() = level;
      h.row(c) = m[c] * level;
      change = std::max(change, (block - old).cwiseAbs().maxCoeff());
    }
    scale = (b + delta).cwiseAbs().maxCoeff();
    out.sweeps = sweep;
    if (change <= opts.tol * std::max(scale, 1e-300)) {
      out.alpha = CoefficientSet::from_edge_effects(b + delta, cells);
      return out;
    }
  }
  throw ConvergenceError("block coordinate GLS did not converge in " + std::to_string(opts.max_iter) + " sweeps");
}

/// Parameters to start EM from instead of the OLS/moment initialisation.
struct EmStart {
  CoefficientSet alpha;
  Eigen::MatrixXd u;
  ResidualCov v;
  Eigen::VectorXd variance_floor;  // per cell; empty = derive from the data
};

struct EmOptions {
  double tol = 1e-6;  // absolute change of the marginal log-likelihood
  int max_iter = 1000;
  int inner_max_iter = 50;
  double inner_tol = 1e-8;
  /// Lower bound on residual variances (eigenvalues of V blocks), relative to
  /// the initial mean residual variance of each cell.
  double variance_floor = 1e-6;
  /// Tolerated log-likelihood decrease before the fit is declared broken.
  double decrease_tol = 1e-6;
  ModelStructure structure;
  std::optional<EmStart> start;
};

struct FitResult {
  CoefficientSet alpha;
  Eigen::MatrixXd u;
  ResidualCov v;
  VMode mode = VMode::kDiagonalCell;
  std::vector<double> loglik_trace;  // [0] is the initial value
  bool converged = false;
  int iterations = 0;
  Eigen::MatrixXd posterior_gamma;  // C x N, <gamma_m>
  Eigen::MatrixXd posterior_cov;    // C x C, Var(gamma_m | y_m)
  Eigen::VectorXd variance_floor;   // per cell, absolute

  double loglik() const { return loglik_trace.back(); }
  StructuredCovariance sigma() const { return StructuredCovariance(v, u); }
};

namespace detail {

class EmEngine {
 public:
  EmEngine(const NetworkPopulation& pop, VMode mode, const EmOptions& opts)
      : pop_(pop), cells_(pop.partition().cells()), y_(pop.response()), x_(pop.design()), mode_(mode), opts_(opts) {
    const auto p = x_.cols();
    if (pop.subject_count() < 2) throw ValidationError("EM needs at least 2 subjects");
    if (!opts.structure.edge_deviation.empty() && opts.structure.edge_deviation.size() != static_cast<std::size_t>(p)) {
      throw ValidationError("edge_deviation mask has wrong length");
    }
    s_inv_ = gram_inverse(pop);
    profile_ = mode != VMode::kDiagonalCell && opts.structure.full();
    reduced_ = mode == VMode::kDiagonalCell && opts.structure.full() && !opts.start;
    for (Eigen::Index j = 0; j < p; ++j) {
      if (opts.structure.has_edge_deviation(static_cast<std::size_t>(j))) dev_cols_.push_back(j);
    }
    if (!dev_cols_.empty()) {
      xf_ = select_columns(x_, dev_cols_);
      proj_f_ = xf_ * (xf_.transpose() * xf_).inverse();
    }
  }

  FitResult run() {
    initialise();
    FitResult out;
    out.mode = mode_;
    out.variance_floor = floor_;

    auto sigma = std::make_optional<StructuredCovariance>(v_, u_);
    Eigen::MatrixXd resid = y_ - theta() * x_.transpose();
    if (reduced_) summarise(resid);
    auto objective = [&] { return reduced_ ? reduced_loglik(*sigma) : loglik(*sigma, resid); };
    double ll = objective();
    out.loglik_trace.push_back(ll);

    Eigen::VectorXd before = packed();
    for (int it = 1; it <= opts_.max_iter; ++it) {
      if (reduced_) {
        reduced_step(*sigma);
      } else {
        step(*sigma, resid);
      }
      sigma.emplace(v_, u_);
      // alpha stays at OLS under the full mean model
      if (!profile_ && !reduced_) resid = y_ - theta() * x_.transpose();
      const double next = objective();
      out.loglik_trace.push_back(next);
      out.iterations = it;
      const double allowed = std::max(opts_.decrease_tol, 1e-12 * std::abs(ll));
      if (next < ll - allowed) {
        throw NumericalError("EM log-likelihood decreased from " + std::to_string(ll) + " to " +
                             std::to_string(next) + " at iteration " + std::to_string(it));
      }
      // Flat likelihood directions can still be drifting when the objective
      // has stalled, so the parameters must settle as well.
      const Eigen::VectorXd after = packed();
      const double moved = (after - before).cwiseAbs().maxCoeff();
      const bool done = std::abs(next - ll) < opts_.tol && moved <= opts_.tol * std::max(1.0, after.cwiseAbs().maxCoeff());
      ll = next;
      before = after;
      if (done) {
        out.converged = true;
        break;
      }
    }

    out.posterior_cov = sigma->posterior_cov();
    out.posterior_gamma = sigma->posterior_mean(resid);
    out.alpha.beta = beta_;
    out.alpha.eta = eta_;
    out.u = u_;
    out.v = v_;
    return out;
  }

 private:
  Eigen::MatrixXd theta() const { return expand_cells(beta_, cells_) + eta_; }

  Eigen::VectorXd packed() const {
    Eigen::Index nv = v_.values().size();
    for (const auto& b : v_.blocks()) nv += b.size();
    Eigen::VectorXd out(beta_.size() + eta_.size() + u_.size() + nv);
    Eigen::Index k = 0;
    auto put = [&](const auto& m) {
      for (const double x : m.reshaped()) out[k++] = x;
    };
    put(beta_);
    put(eta_);
    put(u_);
    put(v_.values());
    for (const auto& b : v_.blocks()) put(b);
    return out;
  }

  static double loglik(const StructuredCovariance& sigma, const Eigen::MatrixXd& resid) {
    const Eigen::VectorXd q = sigma.inverse_quadratic(resid);
    const double c = static_cast<double>(resid.rows()) * std::log(2.0 * std::numbers::pi) + sigma.logdet();
    double total = 0.0;
    for (Eigen::Index m = 0; m < q.size(); ++m) total += -0.5 * (c + q[m]);
    return total;
  }

  // Per-cell residual summaries; with V constant within cells and alpha fixed
  // these carry everything the iterations need.
  void summarise(const Eigen::MatrixXd& resid) {
    rbar_ = cell_means(resid, cells_);
    perp_.resize(static_cast<Eigen::Index>(cells_.size()));
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      perp_[ci] = (resid.middleRows(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size))
                       .rowwise() -
                   rbar_.row(ci))
                      .squaredNorm();
    }
  }

  double reduced_loglik(const StructuredCovariance& sigma) const {
    const double big_n = static_cast<double>(x_.rows());
    const double d = static_cast<double>(y_.rows());
    const double within = (perp_.array() / v_.values().array()).sum();
    return -0.5 * (big_n * (d * std::log(2.0 * std::numbers::pi) + sigma.logdet()) + within + sigma.mean_quadratic(rbar_));
  }

  void reduced_step(const StructuredCovariance& sigma) {
    const Eigen::MatrixXd& g = sigma.posterior_cov();
    const double big_n = static_cast<double>(x_.rows());
    const Eigen::MatrixXd gamma = sigma.posterior_mean_from_means(rbar_);
    u_ = gamma * gamma.transpose() / big_n + g;
    u_ = 0.5 * (u_ + u_.transpose());
    Eigen::VectorXd v(static_cast<Eigen::Index>(cells_.size()));
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      const double n = static_cast<double>(cells_[c].size);
      const double ms = (perp_[ci] + n * (rbar_.row(ci) - gamma.row(ci)).squaredNorm()) / (n * big_n);
      v[ci] = std::max(ms + g(ci, ci), floor_[ci]);
    }
    v_ = ResidualCov::diagonal_cell(cells_, std::move(v));
  }

  void initialise() {
    const auto ncell = static_cast<Eigen::Index>(cells_.size());
    const double big_n = static_cast<double>(x_.rows());
    if (opts_.start) {
      const auto& st = *opts_.start;
      if (st.alpha.beta.rows() != ncell || st.alpha.eta.rows() != y_.rows() || st.u.rows() != ncell) {
        throw ValidationError("EM start does not match the population");
      }
      // Re-centre so that eta sums to zero in every cell of this partition.
      const CoefficientSet centred = CoefficientSet::from_edge_effects(st.alpha.edge_effects(cells_), cells_);
      beta_ = centred.beta;
      eta_ = centred.eta;
      u_ = st.u;
      v_ = st.v;
      if (v_.mode() != mode_) throw ValidationError("EM start has a different V mode");
      if (st.variance_floor.size() == ncell) {
        floor_ = st.variance_floor;
        return;
      }
      const Eigen::MatrixXd e = y_ - theta() * x_.transpose();
      floor_.resize(ncell);
      for (std::size_t c = 0; c < cells_.size(); ++c) {
        floor_[static_cast<Eigen::Index>(c)] =
            opts_.variance_floor *
            e.middleRows(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size))
                .squaredNorm() /
            (static_cast<double>(cells_[c].size) * big_n);
      }
      return;
    }

    const OlsFit ols = fit_ols(pop_, opts_.structure);
    beta_ = ols.alpha.beta;
    eta_ = ols.alpha.eta;
    const Eigen::MatrixXd e = y_ - theta() * x_.transpose();
    const Eigen::MatrixXd ebar = cell_means(e, cells_);
    u_ = ebar * ebar.transpose() / (big_n - 1.0);
    Eigen::VectorXd v0(ncell);
    floor_.resize(ncell);
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      const double mean_diag =
          e.middleRows(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size))
              .squaredNorm() /
          (static_cast<double>(cells_[c].size) * (big_n - 1.0));
      if (!(mean_diag > 0.0)) {
        throw NumericalError("no residual variation in cell " + std::to_string(c) + "; cannot initialise EM");
      }
      v0[ci] = std::max(mean_diag - u_(ci, ci), 0.1 * mean_diag);
      floor_[ci] = opts_.variance_floor * mean_diag;
    }
    v_ = initial_v(v0);
  }

  ResidualCov initial_v(const Eigen::VectorXd& per_cell) const {
    switch (mode_) {
      case VMode::kDiagonalCell: return ResidualCov::diagonal_cell(cells_, per_cell);
      case VMode::kDiagonalEdge: {
        Eigen::VectorXd per_edge(y_.rows());
        for (std::size_t c = 0; c < cells_.size(); ++c) {
          per_edge.segment(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size))
              .setConstant(per_cell[static_cast<Eigen::Index>(c)]);
        }
        return ResidualCov::diagonal_edge(cells_, std::move(per_edge));
      }
      case VMode::kBlock: {
        std::vector<Eigen::MatrixXd> blocks;
        for (std::size_t c = 0; c < cells_.size(); ++c) {
          const auto s = static_cast<Eigen::Index>(cells_[c].size);
          blocks.push_back(Eigen::MatrixXd::Identity(s, s) * per_cell[static_cast<Eigen::Index>(c)]);
        }
        return ResidualCov::block(cells_, std::move(blocks), false);
      }
    }
    throw ValidationError("unknown V mode");
  }

  // One EM iteration in the mean-shifted parametrisation
  // zeta_m = B x_m + gamma_m ~ N(B x_m, U), y_m | zeta_m ~ N(Z zeta_m + X^eta_m eta, V).
  void step(const StructuredCovariance& sigma, const Eigen::MatrixXd& resid) {
    const Eigen::MatrixXd& g = sigma.posterior_cov();
    const double big_n = static_cast<double>(x_.rows());

    if (profile_) {
      // Under the full mean model alpha stays at OLS, which maximises the
      // likelihood for every Sigma; only (U, V) move.
      const Eigen::MatrixXd gamma = sigma.posterior_mean(resid);
      u_ = gamma * gamma.transpose() / big_n + g;
      u_ = 0.5 * (u_ + u_.transpose());
      update_v(resid - expand_cells(gamma, cells_), g, big_n);
      return;
    }

    // E-step: <zeta_m> = B x_m + G Z^T V^{-1} (y_m - X_m alpha); Var(zeta_m | y_m) = G.
    const Eigen::MatrixXd zeta = beta_ * x_.transpose() + sigma.posterior_mean(resid);

    update_beta_u(zeta, g, big_n);

    // (eta, V): per-edge regression of y_m - Z <zeta_m> on the covariates with
    // edge deviations, projected onto sum-to-zero in the V-metric.
    const Eigen::MatrixXd target = y_ - expand_cells(zeta, cells_);
    Eigen::MatrixXd raw;
    if (!dev_cols_.empty()) raw = target * proj_f_;
    const int inner = mode_ == VMode::kDiagonalCell ? 1 : opts_.inner_max_iter;
    Eigen::MatrixXd eta_f_prev;
    for (int k = 0; k < inner; ++k) {
      Eigen::MatrixXd eta_f;
      Eigen::MatrixXd rt = target;
      if (!dev_cols_.empty()) {
        eta_f = project_sum_zero(raw);
        rt.noalias() -= eta_f * xf_.transpose();
      }
      update_v(rt, g, big_n);
      if (!dev_cols_.empty()) {
        eta_.setZero();
        for (std::size_t q = 0; q < dev_cols_.size(); ++q) eta_.col(dev_cols_[q]) = eta_f.col(static_cast<Eigen::Index>(q));
      }
      if (dev_cols_.empty()) break;
      if (k > 0) {
        const double change = (eta_f - eta_f_prev).cwiseAbs().maxCoeff();
        if (change <= opts_.inner_tol * std::max(eta_f.cwiseAbs().maxCoeff(), 1e-300)) break;
      }
      eta_f_prev = std::move(eta_f);
    }
  }

  void update_beta_u(const Eigen::MatrixXd& zeta, const Eigen::MatrixXd& g, double big_n) {
    auto update_u = [&] {
      const Eigen::MatrixXd gamma = zeta - beta_ * x_.transpose();
      u_ = gamma * gamma.transpose() / big_n + g;
      u_ = 0.5 * (u_ + u_.transpose());
    };
    if (opts_.structure.zero_beta.empty()) {
      beta_ = zeta * x_ * s_inv_;
      update_u();
      return;
    }
    // Zero constraints couple beta to U: alternate the two conditional maxima.
    const auto ncell = static_cast<Eigen::Index>(cells_.size());
    const auto p = x_.cols();
    std::vector<Eigen::Index> free;
    for (Eigen::Index j = 0; j < p; ++j) {
      for (Eigen::Index c = 0; c < ncell; ++c) {
        if (!opts_.structure.is_zero(static_cast<std::size_t>(c), static_cast<std::size_t>(j))) free.push_back(j * ncell + c);
      }
    }
    const Eigen::MatrixXd s = x_.transpose() * x_;
    for (int k = 0; k < opts_.inner_max_iter; ++k) {
      const Eigen::MatrixXd uinv = ridge_inverse(u_);
      const Eigen::MatrixXd rhs_full = uinv * zeta * x_;  // C x p, entry (c, j)
      const auto nf = static_cast<Eigen::Index>(free.size());
      Eigen::MatrixXd h(nf, nf);
      Eigen::VectorXd rhs(nf);
      for (Eigen::Index a = 0; a < nf; ++a) {
        const Eigen::Index ja = free[static_cast<std::size_t>(a)] / ncell;
        const Eigen::Index ca = free[static_cast<std::size_t>(a)] % ncell;
        rhs[a] = rhs_full(ca, ja);
        for (Eigen::Index b = 0; b < nf; ++b) {
          const Eigen::Index jb = free[static_cast<std::size_t>(b)] / ncell;
          const Eigen::Index cb = free[static_cast<std::size_t>(b)] % ncell;
          h(a, b) = s(ja, jb) * uinv(ca, cb);
        }
      }
      const Eigen::VectorXd sol = h.completeOrthogonalDecomposition().solve(rhs);
      Eigen::MatrixXd next = Eigen::MatrixXd::Zero(ncell, p);
      for (Eigen::Index a = 0; a < nf; ++a) {
        next(free[static_cast<std::size_t>(a)] % ncell, free[static_cast<std::size_t>(a)] / ncell) = sol[a];
      }
      const double change = (next - beta_).cwiseAbs().maxCoeff();
      beta_ = next;
      update_u();
      if (change <= opts_.inner_tol * std::max(beta_.cwiseAbs().maxCoeff(), 1e-300)) break;
    }
  }

  Eigen::MatrixXd project_sum_zero(const Eigen::MatrixXd& raw) const {
    Eigen::MatrixXd out = raw;
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const auto o = static_cast<Eigen::Index>(cells_[c].offset);
      const auto s = static_cast<Eigen::Index>(cells_[c].size);
      auto block = out.middleRows(o, s);
      const Eigen::RowVectorXd sums = block.colwise().sum();
      Eigen::VectorXd v1;
      switch (mode_) {
        case VMode::kDiagonalCell: v1 = Eigen::VectorXd::Ones(s); break;
        case VMode::kDiagonalEdge: v1 = v_.values().segment(o, s); break;
        case VMode::kBlock: v1 = v_.blocks()[c].rowwise().sum(); break;
      }
      block.noalias() -= v1 * (sums / v1.sum());
    }
    return out;
  }

  void update_v(const Eigen::MatrixXd& rt, const Eigen::MatrixXd& g, double big_n) {
    switch (mode_) {
      case VMode::kDiagonalCell: {
        Eigen::VectorXd v(static_cast<Eigen::Index>(cells_.size()));
        for (std::size_t c = 0; c < cells_.size(); ++c) {
          const auto ci = static_cast<Eigen::Index>(c);
          const double ms = rt.middleRows(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size))
                                .squaredNorm() /
                            (static_cast<double>(cells_[c].size) * big_n);
          v[ci] = std::max(ms + g(ci, ci), floor_[ci]);
        }
        v_ = ResidualCov::diagonal_cell(cells_, std::move(v));
        return;
      }
      case VMode::kDiagonalEdge: {
        Eigen::VectorXd v = rt.rowwise().squaredNorm() / big_n;
        for (std::size_t c = 0; c < cells_.size(); ++c) {
          const auto ci = static_cast<Eigen::Index>(c);
          auto seg = v.segment(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size));
          seg = (seg.array() + g(ci, ci)).cwiseMax(floor_[ci]).matrix();
        }
        v_ = ResidualCov::diagonal_edge(cells_, std::move(v));
        return;
      }
      case VMode::kBlock: {
        std::vector<Eigen::MatrixXd> blocks;
        blocks.reserve(cells_.size());
        for (std::size_t c = 0; c < cells_.size(); ++c) {
          const auto ci = static_cast<Eigen::Index>(c);
          const auto r = rt.middleRows(static_cast<Eigen::Index>(cells_[c].offset), static_cast<Eigen::Index>(cells_[c].size));
          Eigen::MatrixXd moment = r * r.transpose() / big_n;
          moment.array() += g(ci, ci);
          blocks.push_back(clip_eigenvalues(moment, floor_[ci]));
        }
        v_ = ResidualCov::block(cells_, std::move(blocks), false);
        return;
      }
    }
  }

  const NetworkPopulation& pop_;
  const std::vector<Cell>& cells_;
  const Eigen::MatrixXd& y_;
  const Eigen::MatrixXd& x_;
  VMode mode_;
  const EmOptions& opts_;
  Eigen::MatrixXd s_inv_;
  std::vector<Eigen::Index> dev_cols_;
  Eigen::MatrixXd xf_;
  Eigen::MatrixXd proj_f_;

  Eigen::MatrixXd beta_;
  Eigen::MatrixXd eta_;
  Eigen::MatrixXd u_;
  ResidualCov v_;
  Eigen::VectorXd floor_;
  bool profile_ = false;
  bool reduced_ = false;
  Eigen::MatrixXd rbar_;
  Eigen::VectorXd perp_;
};

}  // namespace detail

/// Maximum-likelihood fit of (alpha, U, V) by EM. Initialisation: OLS alpha,
/// U from cell-averaged residual cross-covariances, V diagonal per cell
/// whatever the mode. Stops when the marginal log-likelihood changes by less
/// than opts.tol and no parameter moves by more than opts.tol (relative to the
/// largest, when that exceeds one); `converged` is false if max_iter is
/// reached first.
inline FitResult fit_em(const NetworkPopulation& pop, VMode mode, const EmOptions& opts = {}) {
  return detail::EmEngine(pop, mode, opts).run();
}

/// Coefficient covariance of an EM fit in GLS form, evaluated at (V, U).
inline CoefficientCovariance coefficient_covariance(const FitResult& fit, const NetworkPopulation& pop) {
  return CoefficientCovariance(fit.v, fit.u, gram_inverse(pop));
}

}  // namespace netlmm
