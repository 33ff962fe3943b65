#pragma once

// Cell- and edge-level Wald tests, confidence intervals, multiple-testing
// corrections and a Kolmogorov-Smirnov uniformity check.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "netlmm/error.hpp"
#include "netlmm/estim.hpp"
#include "netlmm/netdata.hpp"

namespace netlmm {

enum class Correction { kNone, kBenjaminiHochberg, kBonferroni, kHolm, kHochberg, kBenjaminiYekutieli };

inline std::string to_string(Correction c) {
  switch (c) {
    case Correction::kNone: return "none";
    case Correction::kBenjaminiHochberg: return "bh";
    case Correction::kBonferroni: return "bonferroni";
    case Correction::kHolm: return "holm";
    case Correction::kHochberg: return "hochberg";
    case Correction::kBenjaminiYekutieli: return "by";
  }
  return "?";
}

inline Correction parse_correction(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (s == "none") return Correction::kNone;
  if (s == "bh" || s == "fdr" || s == "benjamini-hochberg") return Correction::kBenjaminiHochberg;
  if (s == "bonferroni") return Correction::kBonferroni;
  if (s == "holm") return Correction::kHolm;
  if (s == "hochberg") return Correction::kHochberg;
  if (s == "by" || s == "benjamini-yekutieli") return Correction::kBenjaminiYekutieli;
  throw ValidationError("unknown correction '" + s + "' (expected none, bh, bonferroni, holm, hochberg or by)");
}

inline const std::vector<Correction>& all_corrections() {
  static const std::vector<Correction> all = {Correction::kBenjaminiHochberg, Correction::kBonferroni,
                                              Correction::kHolm, Correction::kHochberg,
                                              Correction::kBenjaminiYekutieli};
  return all;
}

struct Adjustment {
  std::vector<double> adjusted;
  std::vector<bool> rejected;  // adjusted <= level
};

/// Adjusted p-values in the usual (R p.adjust) sense; rejection at `level`
/// on the adjusted scale reproduces the step-up / step-down rules.
inline Adjustment adjust(std::span<const double> p, Correction method, double level) {
  if (p.empty()) throw ValidationError("no p-values to adjust");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("level must lie in (0, 1)");
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("p-value outside [0, 1]: " + std::to_string(v));
  }
  const std::size_t m = p.size();
  const double md = static_cast<double>(m);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });

  Adjustment out;
  out.adjusted.assign(m, 0.0);
  switch (method) {
    case Correction::kNone:
      out.adjusted.assign(p.begin(), p.end());
      break;
    case Correction::kBonferroni:
      for (std::size_t i = 0; i < m; ++i) out.adjusted[i] = std::min(1.0, md * p[i]);
      break;
    case Correction::kHolm: {
      double running = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        running = std::max(running, std::min(1.0, (md - static_cast<double>(k)) * p[order[k]]));
        out.adjusted[order[k]] = running;
      }
      break;
    }
    case Correction::kHochberg: {
      double running = 1.0;
      for (std::size_t k = m; k-- > 0;) {
        running = std::min(running, std::min(1.0, (md - static_cast<double>(k)) * p[order[k]]));
        out.adjusted[order[k]] = running;
      }
      break;
    }
    case Correction::kBenjaminiHochberg:
    case Correction::kBenjaminiYekutieli: {
      double factor = 1.0;
      if (method == Correction::kBenjaminiYekutieli) {
        factor = 0.0;
        for (std::size_t k = 1; k <= m; ++k) factor += 1.0 / static_cast<double>(k);
      }
      double running = 1.0;
      for (std::size_t k = m; k-- > 0;) {
        running = std::min(running, std::min(1.0, factor * md / static_cast<double>(k + 1) * p[order[k]]));
        out.adjusted[order[k]] = running;
      }
      break;
    }
  }
  out.rejected.resize(m);
  for (std::size_t i = 0; i < m; ++i) out.rejected[i] = out.adjusted[i] <= level;
  return out;
}

enum class Reference { kNormal, kStudentT };

struct TestOptions {
  Correction correction = Correction::kBenjaminiHochberg;
  double level = 0.05;
  Reference reference = Reference::kNormal;
};

/// Two-sided p-value of a Wald statistic. df is used for the t reference only.
inline double two_sided_p(double t, Reference ref, double df) {
  if (!std::isfinite(t)) throw NumericalError("non-finite test statistic");
  const double at = std::abs(t);
  if (ref == Reference::kNormal) return std::erfc(at / std::sqrt(2.0));
  if (!(df > 0.0)) throw ValidationError("t reference needs positive degrees of freedom");
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(df), at)));
}

struct TestRow {
  std::size_t cell = 0;
  int a = 0;  // community indices of the cell
  int b = 0;
  std::size_t edge = 0;  // edge tests only
  int i = -1;            // edge endpoints (node indices), edge tests only
  int j = -1;
  double estimate = 0.0;
  double se = 0.0;
  double t = 0.0;
  double p_raw = 1.0;
  double p_adjusted = 1.0;
  bool rejected = false;
};

struct InferenceReport {
  std::string family;  // "cell" or "edge"
  std::size_t covariate = 0;
  Correction correction = Correction::kBenjaminiHochberg;
  double level = 0.05;
  Reference reference = Reference::kNormal;
  double df = 0.0;
  std::vector<TestRow> rows;

  std::vector<double> raw_p() const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.p_raw);
    return out;
  }

  std::size_t rejection_count() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const TestRow& r) { return r.rejected; }));
  }
};

namespace detail {

inline void finish_report(InferenceReport& report) {
  for (auto& r : report.rows) {
    if (!(r.se > 0.0) || !std::isfinite(r.se)) {
      throw NumericalError("zero standard error for cell " + std::to_string(r.cell) + " (degenerate design)");
    }
    r.t = r.estimate / r.se;
    r.p_raw = two_sided_p(r.t, report.reference, report.df);
  }
  const auto raw = report.raw_p();
  const Adjustment adj = adjust(raw, report.correction, report.level);
  for (std::size_t k = 0; k < report.rows.size(); ++k) {
    report.rows[k].p_adjusted = adj.adjusted[k];
    report.rows[k].rejected = adj.rejected[k];
  }
}

inline void check_covariate(const CoefficientSet& alpha, std::size_t j) {
  if (j >= alpha.covariate_count()) {
    throw ValidationError("covariate index " + std::to_string(j) + " out of range (p = " +
                          std::to_string(alpha.covariate_count()) + ")");
  }
}

}  // namespace detail

/// H0: beta_j^{ab} = 0 for every cell. df is N - p (t reference only).
inline InferenceReport cell_tests(const CellPartition& partition, const CoefficientSet& alpha,
                                  const CoefficientCovariance& cov, std::size_t j, double df,
                                  const TestOptions& opts = {}) {
  detail::check_covariate(alpha, j);
  InferenceReport report{"cell", j, opts.correction, opts.level, opts.reference, df, {}};
  const auto p = static_cast<Eigen::Index>(alpha.covariate_count());
  const Eigen::VectorXd u = Eigen::VectorXd::Unit(p, static_cast<Eigen::Index>(j));
  for (std::size_t c = 0; c < partition.cell_count(); ++c) {
    const auto& cell = partition.cell(c);
    const auto s = static_cast<Eigen::Index>(cell.size);
    const Eigen::VectorXd w = Eigen::VectorXd::Constant(s, 1.0 / static_cast<double>(s));
    TestRow row;
    row.cell = c;
    row.a = cell.a;
    row.b = cell.b;
    row.estimate = alpha.beta(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
    row.se = std::sqrt(cov.contrast_variance(c, w, u));
    report.rows.push_back(row);
  }
  detail::finish_report(report);
  return report;
}

/// H0: beta_j^{ab} + eta_{ij}^{ab} = 0 for every edge.
inline InferenceReport edge_tests(const CellPartition& partition, const CoefficientSet& alpha,
                                  const CoefficientCovariance& cov, std::size_t j, double df,
                                  const TestOptions& opts = {}) {
  detail::check_covariate(alpha, j);
  InferenceReport report{"edge", j, opts.correction, opts.level, opts.reference, df, {}};
  const auto p = static_cast<Eigen::Index>(alpha.covariate_count());
  const Eigen::VectorXd u = Eigen::VectorXd::Unit(p, static_cast<Eigen::Index>(j));
  const double gjj = u.dot(cov.gram_inverse() * u);
  for (std::size_t e = 0; e < partition.edge_count(); ++e) {
    const auto c = static_cast<std::size_t>(partition.edge_cell(e));
    const auto& cell = partition.cell(c);
    const auto ci = static_cast<Eigen::Index>(c);
    TestRow row;
    row.cell = c;
    row.a = cell.a;
    row.b = cell.b;
    row.edge = e;
    row.i = partition.edge(e).i;
    row.j = partition.edge(e).j;
    row.estimate = alpha.beta(ci, static_cast<Eigen::Index>(j)) + alpha.eta(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(j));
    row.se = std::sqrt((cov.v().edge_variance(e, static_cast<int>(c)) + cov.u()(ci, ci)) * gjj);
    report.rows.push_back(row);
  }
  detail::finish_report(report);
  return report;
}

inline double subject_df(const NetworkPopulation& pop) {
  return static_cast<double>(pop.subject_count()) - static_cast<double>(pop.covariate_count());
}

inline InferenceReport cell_tests(const NetworkPopulation& pop, const FitResult& fit, std::size_t j,
                                  const TestOptions& opts = {}) {
  return cell_tests(pop.partition(), fit.alpha, coefficient_covariance(fit, pop), j, subject_df(pop), opts);
}

inline InferenceReport edge_tests(const NetworkPopulation& pop, const FitResult& fit, std::size_t j,
                                  const TestOptions& opts = {}) {
  return edge_tests(pop.partition(), fit.alpha, coefficient_covariance(fit, pop), j, subject_df(pop), opts);
}

inline InferenceReport cell_tests(const NetworkPopulation& pop, const OlsFit& fit, std::size_t j,
                                  const TestOptions& opts = {}) {
  return cell_tests(pop.partition(), fit.alpha, fit.covariance(), j, subject_df(pop), opts);
}

inline InferenceReport edge_tests(const NetworkPopulation& pop, const OlsFit& fit, std::size_t j,
                                  const TestOptions& opts = {}) {
  return edge_tests(pop.partition(), fit.alpha, fit.covariance(), j, subject_df(pop), opts);
}

/// Two-sided critical value of the reference distribution.
inline double critical_value(double level, Reference ref = Reference::kNormal, double df = 0.0) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0, 1)");
  const double q = 0.5 + 0.5 * level;
  if (ref == Reference::kNormal) return boost::math::quantile(boost::math::normal(), q);
  if (!(df > 0.0)) throw ValidationError("t reference needs positive degrees of freedom");
  return boost::math::quantile(boost::math::students_t(df), q);
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
  bool contains(double v) const { return lower <= v && v <= upper; }
};

/// estimate +/- z * se for every row of a report.
inline std::vector<Interval> confidence_intervals(const InferenceReport& report, double level = 0.95) {
  const double z = critical_value(level, report.reference, report.df);
  std::vector<Interval> out;
  out.reserve(report.rows.size());
  for (const auto& r : report.rows) out.push_back({r.estimate - z * r.se, r.estimate + z * r.se});
  return out;
}

/// K x K symmetric matrix of a per-cell quantity; empty cells are NaN.
template <class F>
Eigen::MatrixXd cell_matrix(const InferenceReport& report, const CellPartition& partition, F field) {
  const auto k = static_cast<Eigen::Index>(partition.community_count());
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(k, k, std::nan(""));
  for (const auto& r : report.rows) out(r.a, r.b) = out(r.b, r.a) = field(r);
  return out;
}

/// Number of rejections per (method, level).
inline Eigen::MatrixXd rejection_sweep(std::span<const double> p, std::span<const Correction> methods,
                                       std::span<const double> levels) {
  Eigen::MatrixXd counts(static_cast<Eigen::Index>(methods.size()), static_cast<Eigen::Index>(levels.size()));
  for (std::size_t a = 0; a < methods.size(); ++a) {
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const auto adj = adjust(p, methods[a], levels[l]);
      counts(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(l)) =
          static_cast<double>(std::count(adj.rejected.begin(), adj.rejected.end(), true));
    }
  }
  return counts;
}

struct KsResult {
  double statistic = 0.0;  // sup |F_n - F|
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Asymptotic Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
inline double kolmogorov_survival(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? term : -term);
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// One-sample KS test against Uniform(0, 1), with Stephens' finite-n
/// correction of the asymptotic p-value.
inline KsResult ks_uniform(std::vector<double> x) {
  if (x.empty()) throw ValidationError("KS test needs at least one value");
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = std::clamp(x[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d), x.size()};
}

}  // namespace netlmm
