#pragma once

// Simulation from the mixed model and the two validation studies: repeated
// estimation under a known truth (error, s.e. calibration, coverage) and
// random splits of a single group (null p-value uniformity).

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "netlmm/covstruct.hpp"
#include "netlmm/error.hpp"
#include "netlmm/estim.hpp"
#include "netlmm/infer.hpp"
#include "netlmm/netdata.hpp"
#include "netlmm/parallel.hpp"

namespace netlmm {

/// Two-group generative model: x_m = (1, group_m) with the first n0 subjects
/// in group 0 and the next n1 in group 1.
struct GenerativeSpec {
  NodeSet nodes;
  CellPartition partition;
  CoefficientSet alpha;  // p = 2 (p = 1 allowed when n1 == 0)
  Eigen::MatrixXd u;
  ResidualCov v;
  std::size_t n0 = 0;
  std::size_t n1 = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> true_positive_cells;  // cells with beta_1 != 0
};

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Draws populations from a spec: gamma_m ~ N(0, U), eps_m ~ N(0, V),
/// y_m = X_m alpha + Z gamma_m + eps_m. Square roots are computed once.
class PopulationSampler {
 public:
  explicit PopulationSampler(GenerativeSpec spec) : spec_(std::move(spec)) {
    const auto& cells = spec_.partition.cells();
    const auto c = static_cast<Eigen::Index>(cells.size());
    if (spec_.u.rows() != c || spec_.u.cols() != c) throw ValidationError("spec U has wrong shape");
    if (spec_.alpha.beta.rows() != c || spec_.alpha.eta.rows() != static_cast<Eigen::Index>(spec_.partition.edge_count())) {
      throw ValidationError("spec coefficients do not match the partition");
    }
    if (spec_.v.edge_count() != spec_.partition.edge_count()) throw ValidationError("spec V does not match the partition");
    const auto p = spec_.alpha.covariate_count();
    if (p != 2 && !(p == 1 && spec_.n1 == 0)) throw ValidationError("spec needs an intercept and one group covariate");
    if (spec_.n0 + spec_.n1 < 2) throw ValidationError("spec needs at least 2 subjects");
    spec_.u = checked_random_effect_cov(spec_.u);
    u_root_ = detail::psd_sqrt(spec_.u);
    if (spec_.v.mode() == VMode::kBlock) {
      for (const auto& b : spec_.v.blocks()) v_roots_.push_back(detail::psd_sqrt(b));
    }
    theta_ = spec_.alpha.edge_effects(cells);
  }

  const GenerativeSpec& spec() const { return spec_; }

  NetworkPopulation draw(std::uint64_t seed) const {
    const auto& cells = spec_.partition.cells();
    const auto d = static_cast<Eigen::Index>(spec_.partition.edge_count());
    const auto c = static_cast<Eigen::Index>(cells.size());
    const std::size_t big_n = spec_.n0 + spec_.n1;
    const auto p = static_cast<Eigen::Index>(spec_.alpha.covariate_count());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<SubjectNetwork> subjects;
    subjects.reserve(big_n);
    Eigen::VectorXd z(c);
    Eigen::VectorXd e(d);
    for (std::size_t m = 0; m < big_n; ++m) {
      Eigen::VectorXd x(p);
      x[0] = 1.0;
      if (p > 1) x[1] = m < spec_.n0 ? 0.0 : 1.0;
      for (Eigen::Index k = 0; k < c; ++k) z[k] = normal(rng);
      for (Eigen::Index k = 0; k < d; ++k) e[k] = normal(rng);
      const Eigen::VectorXd gamma = u_root_ * z;
      Eigen::VectorXd y = theta_ * x;
      for (std::size_t q = 0; q < cells.size(); ++q) {
        const auto o = static_cast<Eigen::Index>(cells[q].offset);
        const auto s = static_cast<Eigen::Index>(cells[q].size);
        auto seg = y.segment(o, s);
        seg.array() += gamma[static_cast<Eigen::Index>(q)];
        switch (spec_.v.mode()) {
          case VMode::kDiagonalCell: seg += std::sqrt(spec_.v.values()[static_cast<Eigen::Index>(q)]) * e.segment(o, s); break;
          case VMode::kDiagonalEdge: seg += spec_.v.values().segment(o, s).cwiseSqrt().cwiseProduct(e.segment(o, s)); break;
          case VMode::kBlock: seg += v_roots_[q] * e.segment(o, s); break;
        }
      }
      char id[32];
      std::snprintf(id, sizeof id, "s%04zu", m + 1);
      subjects.push_back({id, devectorize(y, spec_.partition), x});
    }
    std::vector<std::string> names = {"intercept"};
    if (p > 1) names.push_back("group");
    return NetworkPopulation(spec_.nodes, spec_.partition, std::move(subjects), std::move(names));
  }

 private:
  GenerativeSpec spec_;
  Eigen::MatrixXd u_root_;
  std::vector<Eigen::MatrixXd> v_roots_;
  Eigen::MatrixXd theta_;
};

inline NetworkPopulation generate(const GenerativeSpec& spec, std::optional<std::uint64_t> seed = std::nullopt) {
  return PopulationSampler(spec).draw(seed.value_or(spec.seed));
}

/// The bundled desk-scale spec: 4 communities of 10 nodes (10 cells, 780
/// edges), 50 + 50 subjects, three cells with a group effect. Per-cell
/// random effects are correlated across cells; two cells have weak ones.
inline GenerativeSpec fixture_spec(std::uint64_t seed = 20240611) {
  constexpr int kCommunities = 4;
  constexpr int kPerCommunity = 10;
  std::vector<int> labels;
  for (int a = 0; a < kCommunities; ++a) labels.insert(labels.end(), kPerCommunity, a);
  std::vector<std::string> names;
  for (int a = 0; a < kCommunities; ++a) names.push_back(std::to_string(a + 1));
  GenerativeSpec spec;
  spec.nodes = NodeSet::sequential(labels.size());
  spec.partition = CellPartition(labels, names);
  spec.n0 = 50;
  spec.n1 = 50;
  spec.seed = seed;

  const auto& cells = spec.partition.cells();
  const auto c = static_cast<Eigen::Index>(cells.size());
  const auto d = static_cast<Eigen::Index>(spec.partition.edge_count());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  spec.alpha.beta = Eigen::MatrixXd::Zero(c, 2);
  spec.alpha.eta = Eigen::MatrixXd::Zero(d, 2);
  const std::vector<std::pair<std::pair<int, int>, double>> effects = {{{0, 0}, 0.15}, {{1, 2}, -0.12}, {{2, 3}, 0.10}};
  for (const auto& [ab, value] : effects) {
    const auto q = static_cast<std::size_t>(spec.partition.cell_index(ab.first, ab.second));
    spec.alpha.beta(static_cast<Eigen::Index>(q), 1) = value;
    spec.true_positive_cells.push_back(q);
  }
  std::sort(spec.true_positive_cells.begin(), spec.true_positive_cells.end());
  for (std::size_t q = 0; q < cells.size(); ++q) {
    spec.alpha.beta(static_cast<Eigen::Index>(q), 0) = cells[q].a == cells[q].b ? 0.6 : 0.15;
    const auto o = static_cast<Eigen::Index>(cells[q].offset);
    const auto s = static_cast<Eigen::Index>(cells[q].size);
    for (Eigen::Index i = 0; i < s; ++i) {
      spec.alpha.eta(o + i, 0) = 0.1 * normal(rng);
      spec.alpha.eta(o + i, 1) = 0.03 * normal(rng);
    }
    spec.alpha.eta.middleRows(o, s).rowwise() -= spec.alpha.eta.middleRows(o, s).colwise().mean();
  }

  Eigen::VectorXd v(c);
  Eigen::VectorXd ratio(c);
  for (Eigen::Index q = 0; q < c; ++q) {
    v[q] = 0.03 + 0.02 * unif(rng);
    ratio[q] = 0.6 + 0.4 * unif(rng);
  }
  // Two between-community cells with weak random effects.
  ratio[static_cast<Eigen::Index>(spec.partition.cell_index(0, 3))] = 0.1;
  ratio[static_cast<Eigen::Index>(spec.partition.cell_index(1, 3))] = 0.1;
  const Eigen::VectorXd sd = (ratio.cwiseProduct(v)).cwiseSqrt();
  Eigen::MatrixXd r = Eigen::MatrixXd::Constant(c, c, 0.3);
  r.diagonal().setOnes();
  spec.u = sd.asDiagonal() * r * sd.asDiagonal();
  spec.v = ResidualCov::diagonal_cell(cells, v);
  return spec;
}

namespace detail {

/// Group sizes of a population whose second covariate is a 0/1 indicator
/// with all 0s first.
inline std::pair<std::size_t, std::size_t> group_sizes(const NetworkPopulation& pop) {
  if (pop.covariate_count() != 2) throw ValidationError("expected an intercept and one group covariate");
  const Eigen::VectorXd g = pop.design().col(1);
  std::size_t n0 = 0;
  for (Eigen::Index m = 0; m < g.size(); ++m) {
    if (g[m] != 0.0 && g[m] != 1.0) throw ValidationError("group covariate must be 0/1");
    if (g[m] == 0.0) {
      if (n0 != static_cast<std::size_t>(m)) throw ValidationError("group 0 subjects must come first");
      ++n0;
    }
  }
  return {n0, static_cast<std::size_t>(g.size()) - n0};
}

}  // namespace detail

/// Keeps beta_1 for cells with raw p < threshold and refits by EM with the
/// remaining beta_1's fixed at 0.
inline GenerativeSpec spec_from_fit(const NetworkPopulation& pop, const FitResult& fit, double threshold = 0.05,
                                    const EmOptions& em = {}) {
  const auto [n0, n1] = detail::group_sizes(pop);
  const InferenceReport tests = cell_tests(pop, fit, 1, {Correction::kNone, 0.05, Reference::kNormal});
  GenerativeSpec spec;
  spec.nodes = pop.nodes();
  spec.partition = pop.partition();
  spec.n0 = n0;
  spec.n1 = n1;
  std::vector<std::pair<std::size_t, std::size_t>> zeros;
  for (const auto& row : tests.rows) {
    if (row.p_raw < threshold) {
      spec.true_positive_cells.push_back(row.cell);
    } else {
      zeros.emplace_back(row.cell, 1);
    }
  }
  if (zeros.empty()) {
    spec.alpha = fit.alpha;
    spec.u = fit.u;
    spec.v = fit.v;
    return spec;
  }
  EmOptions opts = em;
  opts.start.reset();
  opts.structure.zero_beta = zeros;
  const FitResult refit = fit_em(pop, fit.mode, opts);
  spec.alpha = refit.alpha;
  for (const auto& [c, j] : zeros) spec.alpha.beta(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = 0.0;
  spec.u = refit.u;
  spec.v = refit.v;
  return spec;
}

enum class Estimator { kOls, kGlsDiag, kGlsBlock };

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::kOls: return "ols";
    case Estimator::kGlsDiag: return "gls-diag";
    case Estimator::kGlsBlock: return "gls-block";
  }
  return "?";
}

inline Estimator parse_estimator(const std::string& s) {
  if (s == "ols") return Estimator::kOls;
  if (s == "gls-diag" || s == "gls") return Estimator::kGlsDiag;
  if (s == "gls-block") return Estimator::kGlsBlock;
  throw ValidationError("unknown estimator '" + s + "' (expected ols, gls-diag or gls-block)");
}

/// Cell-level tests of covariate j under one estimator (normal reference,
/// no correction).
inline InferenceReport estimate_cells(const NetworkPopulation& pop, Estimator est, std::size_t j = 1,
                                      const EmOptions& em = {}) {
  const TestOptions raw{Correction::kNone, 0.05, Reference::kNormal};
  switch (est) {
    case Estimator::kOls: return cell_tests(pop, fit_ols(pop), j, raw);
    case Estimator::kGlsDiag: return cell_tests(pop, fit_em(pop, VMode::kDiagonalCell, em), j, raw);
    case Estimator::kGlsBlock: return cell_tests(pop, fit_em(pop, VMode::kBlock, em), j, raw);
  }
  throw ValidationError("unknown estimator");
}

struct StudyOptions {
  std::vector<Estimator> estimators = {Estimator::kOls, Estimator::kGlsDiag, Estimator::kGlsBlock};
  int replications = 100;
  std::uint64_t seed = 1;  // replication r draws with seed + r
  unsigned threads = 1;
  double level = 0.95;
  EmOptions em;
};

struct CellSummary {
  std::size_t cell = 0;
  double truth = 0.0;
  std::vector<double> errors;  // beta_1 hat - beta_1
  std::vector<double> se;
  std::vector<double> se_ratio;  // se / empirical sd of the estimates
  double mean_error = 0.0;
  double empirical_sd = 0.0;
  double median_se_ratio = 0.0;
  double coverage = 0.0;
};

struct EstimatorSummary {
  Estimator estimator = Estimator::kOls;
  std::vector<CellSummary> cells;
  int used = 0;
  int failures = 0;
  double seconds = 0.0;  // summed fit time over replications
};

struct StudyReport {
  int replications = 0;
  double level = 0.95;
  std::vector<EstimatorSummary> estimators;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

/// Repeated generation and estimation under a known truth.
inline StudyReport estimator_study(const GenerativeSpec& spec, const StudyOptions& opts) {
  if (opts.replications < 2) throw ValidationError("a study needs at least 2 replications");
  if (spec.alpha.covariate_count() != 2) throw ValidationError("study spec needs a group covariate");
  const PopulationSampler sampler(spec);
  const std::size_t ncell = spec.partition.cell_count();
  const std::size_t nest = opts.estimators.size();
  const auto reps = static_cast<std::size_t>(opts.replications);

  struct Rep {
    std::vector<std::optional<InferenceReport>> reports;
    std::vector<double> seconds;
  };
  std::vector<Rep> results(reps);
  parallel_for(reps, opts.threads, [&](std::size_t r) {
    const NetworkPopulation pop = sampler.draw(opts.seed + r);
    results[r].reports.resize(nest);
    results[r].seconds.resize(nest);
    for (std::size_t k = 0; k < nest; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        results[r].reports[k] = estimate_cells(pop, opts.estimators[k], 1, opts.em);
      } catch (const NumericalError&) {
      } catch (const ConvergenceError&) {
      }
      results[r].seconds[k] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  });

  const double z = critical_value(opts.level);
  StudyReport report;
  report.replications = opts.replications;
  report.level = opts.level;
  for (std::size_t k = 0; k < nest; ++k) {
    EstimatorSummary es;
    es.estimator = opts.estimators[k];
    es.cells.resize(ncell);
    for (std::size_t c = 0; c < ncell; ++c) {
      es.cells[c].cell = c;
      es.cells[c].truth = spec.alpha.beta(static_cast<Eigen::Index>(c), 1);
    }
    for (const auto& rep : results) {
      es.seconds += rep.seconds[k];
      if (!rep.reports[k]) {
        ++es.failures;
        continue;
      }
      ++es.used;
      for (std::size_t c = 0; c < ncell; ++c) {
        const auto& row = rep.reports[k]->rows[c];
        es.cells[c].errors.push_back(row.estimate - es.cells[c].truth);
        es.cells[c].se.push_back(row.se);
      }
    }
    for (auto& cs : es.cells) {
      const auto n = static_cast<double>(cs.errors.size());
      if (cs.errors.size() < 2) continue;
      cs.mean_error = std::accumulate(cs.errors.begin(), cs.errors.end(), 0.0) / n;
      double ss = 0.0;
      for (double e : cs.errors) ss += (e - cs.mean_error) * (e - cs.mean_error);
      cs.empirical_sd = std::sqrt(ss / (n - 1.0));
      std::size_t covered = 0;
      for (std::size_t r = 0; r < cs.errors.size(); ++r) {
        cs.se_ratio.push_back(cs.se[r] / cs.empirical_sd);
        if (std::abs(cs.errors[r]) <= z * cs.se[r]) ++covered;
      }
      cs.median_se_ratio = median(cs.se_ratio);
      cs.coverage = static_cast<double>(covered) / n;
    }
    report.estimators.push_back(std::move(es));
  }
  return report;
}

/// Covariates (1, g) for a split given by group indicators.
inline NetworkPopulation with_split(const NetworkPopulation& pop, const std::vector<int>& group) {
  if (group.size() != pop.subject_count()) throw ValidationError("split has wrong length");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(group.size()), 2);
  for (std::size_t m = 0; m < group.size(); ++m) {
    x(static_cast<Eigen::Index>(m), 0) = 1.0;
    x(static_cast<Eigen::Index>(m), 1) = group[m];
  }
  return pop.with_covariates(x, {"intercept", "split"});
}

/// Random halving: a uniformly shuffled floor(N/2) subjects form group 1.
inline std::vector<int> random_split(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> group(n, 0);
  for (std::size_t k = 0; k < n / 2; ++k) group[order[k]] = 1;
  return group;
}

struct NullSplitOptions {
  std::vector<Estimator> estimators = {Estimator::kOls, Estimator::kGlsDiag};
  int repetitions = 100;
  std::uint64_t seed = 1;  // repetition r splits with seed + r
  unsigned threads = 1;
  int bins = 20;
  double alpha = 0.05;
  EmOptions em;
};

struct NullSplitSummary {
  Estimator estimator = Estimator::kOls;
  std::vector<double> pooled_p;  // repetition-major, cell order within
  std::vector<int> histogram;    // equal-width bins on [0, 1]
  std::size_t below_alpha = 0;
  double mean_bonferroni = 0.0;  // cells significant after Bonferroni, per repetition
  KsResult ks;
  int failures = 0;
};

struct NullSplitReport {
  int repetitions = 0;
  std::size_t cells = 0;
  std::vector<NullSplitSummary> estimators;
  // Pooled p-values share subjects across repetitions and cells, so the KS
  // p-value is descriptive only.
  static constexpr const char* kCaveat =
      "pooled p-values are dependent across splits and cells; the KS p-value is descriptive, not a valid test";
};

/// Random halvings of a single group; pools the cell p-values of every split.
inline NullSplitReport null_split_study(const NetworkPopulation& group, const NullSplitOptions& opts) {
  if (group.subject_count() < 4) throw ValidationError("null-split study needs at least 4 subjects");
  if (opts.repetitions < 1) throw ValidationError("repetitions must be positive");
  if (opts.bins < 1) throw ValidationError("bins must be positive");
  const auto reps = static_cast<std::size_t>(opts.repetitions);
  const std::size_t nest = opts.estimators.size();
  std::vector<std::vector<std::optional<std::vector<double>>>> results(reps);
  parallel_for(reps, opts.threads, [&](std::size_t r) {
    const NetworkPopulation pop = with_split(group, random_split(group.subject_count(), opts.seed + r));
    results[r].resize(nest);
    for (std::size_t k = 0; k < nest; ++k) {
      try {
        results[r][k] = estimate_cells(pop, opts.estimators[k], 1, opts.em).raw_p();
      } catch (const NumericalError&) {
      } catch (const ConvergenceError&) {
      }
    }
  });

  NullSplitReport report;
  report.repetitions = opts.repetitions;
  report.cells = group.partition().cell_count();
  for (std::size_t k = 0; k < nest; ++k) {
    NullSplitSummary s;
    s.estimator = opts.estimators[k];
    s.histogram.assign(static_cast<std::size_t>(opts.bins), 0);
    double bonf = 0.0;
    int used = 0;
    for (const auto& rep : results) {
      if (!rep[k]) {
        ++s.failures;
        continue;
      }
      ++used;
      const auto& p = *rep[k];
      const auto adj = adjust(p, Correction::kBonferroni, opts.alpha);
      bonf += static_cast<double>(std::count(adj.rejected.begin(), adj.rejected.end(), true));
      for (double v : p) {
        s.pooled_p.push_back(v);
        if (v < opts.alpha) ++s.below_alpha;
        const auto bin = std::min(static_cast<std::size_t>(v * opts.bins), static_cast<std::size_t>(opts.bins - 1));
        ++s.histogram[bin];
      }
    }
    s.mean_bonferroni = used > 0 ? bonf / used : 0.0;
    if (!s.pooled_p.empty()) s.ks = ks_uniform(s.pooled_p);
    report.estimators.push_back(std::move(s));
  }
  return report;
}

}  // namespace netlmm
