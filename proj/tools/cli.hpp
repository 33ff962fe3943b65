#pragma once

// Subcommands: validate, fit, test, refine, simulate, nullcheck.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "netlmm/netlmm.hpp"

namespace netlmm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct InputOptions {
  std::string manifest;
  std::string partition;
  std::string exclude;
  bool fisher = false;
  std::vector<std::string> covariates;
};

struct EmFlags {
  double tol = 1e-6;
  int max_iter = 1000;
  int inner_max_iter = 50;
  double variance_floor = 1e-6;

  EmOptions options() const {
    EmOptions o;
    o.tol = tol;
    o.max_iter = max_iter;
    o.inner_max_iter = inner_max_iter;
    o.variance_floor = variance_floor;
    return o;
  }
};

struct TestFlags {
  std::string covariate;
  std::string correction = "bh";
  double level = 0.05;
  std::string reference = "normal";
  std::vector<double> sweep = {0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2};
};

inline void add_inputs(CLI::App* app, InputOptions& in, bool manifest_required = true) {
  auto* m = app->add_option("--manifest", in.manifest, "Subject manifest (subject_id,matrix_path,<covariates>)");
  if (manifest_required) m->required();
  app->add_option("--partition", in.partition, "Partition file (node_id,community_id)")->required();
  app->add_option("--exclude", in.exclude, "Node ids to drop, one per line");
  app->add_flag("--fisher", in.fisher, "Inputs are raw correlations; apply the Fisher z-transform");
  app->add_option("--covariates", in.covariates, "Manifest covariates to use, in order (default: all)")->delimiter(',');
}

inline void add_em(CLI::App* app, EmFlags& em) {
  app->add_option("--tol", em.tol, "EM convergence tolerance on the log-likelihood")->capture_default_str();
  app->add_option("--max-iter", em.max_iter, "EM iteration cap")->capture_default_str();
  app->add_option("--inner-max-iter", em.inner_max_iter, "M-step inner iteration cap")->capture_default_str();
  app->add_option("--variance-floor", em.variance_floor, "Relative floor on V variances/eigenvalues")->capture_default_str();
}

inline void add_test(CLI::App* app, TestFlags& t) {
  app->add_option("--covariate", t.covariate, "Covariate under test (default: the first non-intercept one)");
  app->add_option("--correction", t.correction, "none, bh, bonferroni, holm, hochberg or by")->capture_default_str();
  app->add_option("--level", t.level, "Significance level")->capture_default_str();
  app->add_option("--reference", t.reference, "normal or t")->capture_default_str();
  app->add_option("--sweep-levels", t.sweep, "Levels for the rejection sweep")->delimiter(',');
}

inline NetworkPopulation load(const InputOptions& in, const std::string& manifest) {
  io::LoadOptions lo;
  lo.fisher = in.fisher;
  lo.covariates = in.covariates;
  if (!in.exclude.empty()) lo.exclude = io::read_exclusions(in.exclude);
  return io::load_population(manifest, in.partition, lo);
}

inline NetworkPopulation load(const InputOptions& in) { return load(in, in.manifest); }

inline Reference parse_reference(const std::string& s) {
  if (s == "normal" || s == "z") return Reference::kNormal;
  if (s == "t") return Reference::kStudentT;
  throw ValidationError("unknown reference distribution '" + s + "' (expected normal or t)");
}

inline std::ofstream open(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << std::setprecision(10);
  return out;
}

inline void write_json(const fs::path& path, const json& j) { open(path) << j.dump(2) << "\n"; }

/// Config echo, versions and wall time for a finished run.
inline void write_run_manifest(const fs::path& dir, const CLI::App& app, const std::vector<std::string>& argv,
                               const std::string& subcommand, double seconds, const json& extra = json::object()) {
  json j;
  j["tool"] = "netlmm";
  j["version"] = kVersion;
  j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  j["subcommand"] = subcommand;
  j["argv"] = argv;
  j["config"] = app.config_to_str(true, false);
  j["wall_seconds"] = seconds;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_json(dir / "run.json", j);
}

inline std::size_t default_covariate(const std::vector<std::string>& names, const std::string& requested) {
  if (!requested.empty()) {
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (names[j] == requested) return j;
    }
    throw ValidationError("covariate '" + requested + "' is not part of the model");
  }
  return names.size() > 1 ? 1 : 0;
}

inline void write_cell_tests(const fs::path& path, const InferenceReport& r, const CellPartition& part) {
  auto out = open(path);
  const auto& names = part.community_names();
  out << "a,b,cell,n_edges,estimate,se,t,p,p_adj,reject\n";
  for (const auto& row : r.rows) {
    out << names[static_cast<std::size_t>(row.a)] << "," << names[static_cast<std::size_t>(row.b)] << "," << row.cell << ","
        << part.cell(row.cell).size << "," << row.estimate << "," << row.se << "," << row.t << "," << row.p_raw << ","
        << row.p_adjusted << "," << (row.rejected ? 1 : 0) << "\n";
  }
}

inline void write_edge_tests(const fs::path& path, const InferenceReport& r, const CellPartition& part, const NodeSet& nodes) {
  auto out = open(path);
  const auto& names = part.community_names();
  out << "i,j,cell,a,b,estimate,se,t,p,p_adj,reject\n";
  for (const auto& row : r.rows) {
    out << nodes.id(static_cast<std::size_t>(row.i)) << "," << nodes.id(static_cast<std::size_t>(row.j)) << "," << row.cell << ","
        << names[static_cast<std::size_t>(row.a)] << "," << names[static_cast<std::size_t>(row.b)] << "," << row.estimate << ","
        << row.se << "," << row.t << "," << row.p_raw << "," << row.p_adjusted << "," << (row.rejected ? 1 : 0) << "\n";
  }
}

inline void write_named_matrix(const fs::path& path, const Eigen::MatrixXd& m, const std::vector<std::string>& names) {
  auto out = open(path);
  out << "community";
  for (const auto& n : names) out << "," << n;
  out << "\n";
  for (Eigen::Index a = 0; a < m.rows(); ++a) {
    out << names[static_cast<std::size_t>(a)];
    for (Eigen::Index b = 0; b < m.cols(); ++b) {
      out << ",";
      if (std::isfinite(m(a, b))) out << m(a, b);
      else out << "NA";
    }
    out << "\n";
  }
}

struct TestOutcome {
  InferenceReport cells;
  InferenceReport edges;
  Eigen::MatrixXd sweep;
};

/// Cell and edge tests of a saved fit, written under `dir`.
inline TestOutcome run_tests(const SavedFit& fit, const TestFlags& flags, const fs::path& dir) {
  fs::create_directories(dir);
  if (!(flags.level > 0.0 && flags.level < 1.0)) throw ValidationError("--level must lie in (0, 1)");
  const std::size_t j = default_covariate(fit.covariate_names, flags.covariate);
  TestOptions opts{parse_correction(flags.correction), flags.level, parse_reference(flags.reference)};
  const auto cov = fit.covariance();
  TestOutcome out;
  out.cells = cell_tests(fit.partition, fit.alpha, cov, j, fit.df(), opts);
  out.edges = edge_tests(fit.partition, fit.alpha, cov, j, fit.df(), opts);
  write_cell_tests(dir / "cell_tests.csv", out.cells, fit.partition);
  write_edge_tests(dir / "edge_tests.csv", out.edges, fit.partition, fit.nodes);
  const auto& names = fit.partition.community_names();
  write_named_matrix(dir / "cell_estimates.csv", cell_matrix(out.cells, fit.partition, [](const TestRow& r) { return r.estimate; }), names);
  write_named_matrix(dir / "cell_pvalues.csv", cell_matrix(out.cells, fit.partition, [](const TestRow& r) { return r.p_raw; }), names);
  write_named_matrix(dir / "cell_significant.csv",
                     cell_matrix(out.cells, fit.partition, [](const TestRow& r) { return r.rejected ? 1.0 : 0.0; }), names);

  std::vector<double> levels = flags.sweep;
  std::sort(levels.begin(), levels.end());
  for (double l : levels) {
    if (!(l > 0.0 && l < 1.0)) throw ValidationError("sweep levels must lie in (0, 1)");
  }
  const auto& methods = all_corrections();
  const auto raw = out.cells.raw_p();
  out.sweep = rejection_sweep(raw, methods, levels);
  {
    auto s = open(dir / "rejection_sweep.csv");
    s << "level";
    for (auto m : methods) s << "," << to_string(m);
    s << "\n";
    for (std::size_t l = 0; l < levels.size(); ++l) {
      s << levels[l];
      for (std::size_t m = 0; m < methods.size(); ++m) s << "," << out.sweep(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(l));
      s << "\n";
    }
  }
  json summary;
  summary["covariate"] = fit.covariate_names[j];
  summary["estimator"] = fit.estimator;
  summary["v_mode"] = to_string(fit.v.mode());
  summary["correction"] = to_string(opts.correction);
  summary["level"] = opts.level;
  summary["reference"] = flags.reference;
  summary["df"] = fit.df();
  summary["cells_tested"] = out.cells.rows.size();
  summary["cells_rejected"] = out.cells.rejection_count();
  summary["edges_tested"] = out.edges.rows.size();
  summary["edges_rejected"] = out.edges.rejection_count();
  std::vector<std::size_t> order(out.cells.rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return out.cells.rows[x].p_raw < out.cells.rows[y].p_raw; });
  json top = json::array();
  for (std::size_t k = 0; k < std::min<std::size_t>(5, order.size()); ++k) {
    const auto& r = out.cells.rows[order[k]];
    top.push_back({{"a", names[static_cast<std::size_t>(r.a)]}, {"b", names[static_cast<std::size_t>(r.b)]}, {"p", r.p_raw}});
  }
  summary["top_cells"] = top;
  write_json(dir / "summary.json", summary);
  return out;
}

inline SavedFit fit_population(const NetworkPopulation& pop, const std::string& estimator, VMode mode, const EmOptions& em) {
  if (estimator == "ols") return saved_fit(pop, fit_ols(pop));
  if (estimator == "gls-em" || estimator == "gls") return saved_fit(pop, fit_em(pop, mode, em));
  throw ValidationError("unknown estimator '" + estimator + "' (expected ols or gls-em)");
}

inline std::vector<Estimator> parse_estimators(const std::vector<std::string>& names) {
  std::vector<Estimator> out;
  for (const auto& n : names) out.push_back(parse_estimator(n));
  if (out.empty()) throw ValidationError("no estimators selected");
  return out;
}

inline int community_index(const CellPartition& part, const std::string& name) {
  const auto& names = part.community_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ValidationError("community '" + name + "' is not in the partition");
  return static_cast<int>(it - names.begin());
}

inline std::string canonical(const std::string& p) {
  std::error_code ec;
  const auto c = fs::weakly_canonical(p, ec);
  return ec ? p : c.string();
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const auto started = std::chrono::steady_clock::now();
  std::vector<std::string> args(argv, argv + argc);

  CLI::App app{"Linear mixed models for populations of weighted networks"};
  app.set_version_flag("--version", std::string(kVersion));
  app.set_config("--config", "", "INI/TOML config file; flags given on the command line take precedence");
  app.require_subcommand(1);
  unsigned threads = default_thread_count();
  app.add_option("--threads", threads, "Worker threads (default: NETLMM_THREADS or hardware concurrency)");

  // validate
  InputOptions v_in;
  auto* validate = app.add_subcommand("validate", "Check inputs and print a summary");
  add_inputs(validate, v_in);

  // fit
  InputOptions f_in;
  EmFlags f_em;
  std::string f_estimator = "gls-em";
  std::string f_mode = "diag";
  std::string f_out;
  auto* fit = app.add_subcommand("fit", "Fit OLS or the mixed model by EM");
  add_inputs(fit, f_in);
  add_em(fit, f_em);
  fit->add_option("--estimator", f_estimator, "ols or gls-em")->capture_default_str();
  fit->add_option("--v-mode", f_mode, "diag, diag-edge or block")->capture_default_str();
  fit->add_option("--out", f_out, "Output fit directory")->required();

  // test
  std::string t_fit;
  std::string t_out;
  TestFlags t_flags;
  auto* test = app.add_subcommand("test", "Cell- and edge-level tests from a fit directory");
  test->add_option("--fit", t_fit, "Fit directory written by `fit`")->required();
  test->add_option("--out", t_out, "Output directory (default: the fit directory)");
  add_test(test, t_flags);

  // refine
  InputOptions r_in;
  EmFlags r_em;
  TestFlags r_test;
  std::string r_method = "kmeans";
  std::string r_split;
  int r_parts = 2;
  int r_k = 0;
  int r_n_init = 100;
  std::uint64_t r_seed = 0;
  std::vector<std::string> r_field = {};
  std::string r_mode = "diag";
  std::string r_refine_on;
  std::string r_test_on;
  bool r_double_dip = false;
  std::string r_out;
  auto* refine = app.add_subcommand("refine", "Refine the partition (k-means or likelihood)");
  add_inputs(refine, r_in, false);
  add_em(refine, r_em);
  add_test(refine, r_test);
  refine->add_option("--method", r_method, "kmeans or likelihood")->capture_default_str();
  refine->add_option("--split-community", r_split, "Community to split (others stay fixed)");
  refine->add_option("--parts", r_parts, "Number of sub-communities for --split-community")->capture_default_str();
  refine->add_option("--k", r_k, "Re-cluster all nodes into k communities (k-means without --split-community)");
  refine->add_option("--n-init", r_n_init, "k-means restarts")->capture_default_str();
  refine->add_option("--seed", r_seed, "Seed of the first restart")->capture_default_str();
  refine->add_option("--field-covariates", r_field, "Covariates defining the k-means edge-effect field")->delimiter(',');
  refine->add_option("--v-mode", r_mode, "diag or diag-edge")->capture_default_str();
  refine->add_option("--refine-on", r_refine_on, "Manifest of the dataset used for refinement");
  refine->add_option("--test-on", r_test_on, "Manifest of an independent dataset to fit and test on");
  refine->add_flag("--allow-double-dip", r_double_dip, "Permit refining and testing on the same data");
  refine->add_option("--out", r_out, "Output directory")->required();

  // simulate
  InputOptions s_in;
  EmFlags s_em;
  int s_reps = 200;
  std::uint64_t s_seed = 1;
  std::uint64_t s_spec_seed = 20240611;
  std::vector<std::string> s_estimators = {"ols", "gls-diag", "gls-block"};
  std::optional<std::size_t> s_n0;
  std::optional<std::size_t> s_n1;
  double s_threshold = 0.05;
  double s_level = 0.95;
  std::string s_emit;
  std::string s_out;
  auto* simulate = app.add_subcommand("simulate", "Estimator study under a known truth");
  simulate->add_option("--manifest", s_in.manifest, "Derive the truth from this dataset (default: built-in fixture)");
  simulate->add_option("--partition", s_in.partition, "Partition for --manifest");
  simulate->add_option("--exclude", s_in.exclude, "Node ids to drop");
  simulate->add_flag("--fisher", s_in.fisher, "Apply the Fisher z-transform to --manifest data");
  simulate->add_option("--threshold", s_threshold, "Raw p-value cut for true-positive cells")->capture_default_str();
  simulate->add_option("--replications", s_reps, "Replications")->capture_default_str();
  simulate->add_option("--seed", s_seed, "Replication r uses seed + r")->capture_default_str();
  simulate->add_option("--spec-seed", s_spec_seed, "Seed of the built-in fixture truth")->capture_default_str();
  simulate->add_option("--estimators", s_estimators, "ols, gls-diag, gls-block")->delimiter(',');
  simulate->add_option("--n0", s_n0, "Group 0 size");
  simulate->add_option("--n1", s_n1, "Group 1 size");
  simulate->add_option("--level", s_level, "Confidence level of the coverage check")->capture_default_str();
  simulate->add_option("--emit-population", s_emit, "Also write one draw (seed) as manifest + matrices here");
  add_em(simulate, s_em);
  simulate->add_option("--out", s_out, "Output directory")->required();

  // nullcheck
  InputOptions n_in;
  EmFlags n_em;
  std::string n_group_column;
  double n_group_value = 0.0;
  std::size_t n_synthetic = 0;
  int n_reps = 100;
  std::uint64_t n_seed = 1;
  std::vector<std::string> n_estimators = {"ols", "gls-diag"};
  int n_bins = 20;
  double n_alpha = 0.05;
  std::string n_out;
  auto* nullcheck = app.add_subcommand("nullcheck", "Random halvings of one group; pooled null p-values");
  nullcheck->add_option("--manifest", n_in.manifest, "Dataset manifest");
  nullcheck->add_option("--partition", n_in.partition, "Partition file");
  nullcheck->add_option("--exclude", n_in.exclude, "Node ids to drop");
  nullcheck->add_flag("--fisher", n_in.fisher, "Apply the Fisher z-transform");
  nullcheck->add_option("--group-column", n_group_column, "Keep only subjects whose covariate equals --group-value");
  nullcheck->add_option("--group-value", n_group_value, "Value selecting the group")->capture_default_str();
  nullcheck->add_option("--synthetic", n_synthetic, "Use N subjects drawn from the built-in fixture instead");
  nullcheck->add_option("--repetitions", n_reps, "Random splits")->capture_default_str();
  nullcheck->add_option("--seed", n_seed, "Split r uses seed + r")->capture_default_str();
  nullcheck->add_option("--estimators", n_estimators, "ols, gls-diag, gls-block")->delimiter(',');
  nullcheck->add_option("--bins", n_bins, "Histogram bins")->capture_default_str();
  nullcheck->add_option("--alpha", n_alpha, "Per-test level for the small-p count")->capture_default_str();
  add_em(nullcheck, n_em);
  nullcheck->add_option("--out", n_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(); };

  try {
    if (threads == 0) throw ValidationError("--threads must be positive");

    if (*validate) {
      const NetworkPopulation pop = load(v_in);
      const auto& part = pop.partition();
      out << "nodes: " << pop.nodes().size() << "\n"
          << "communities: " << part.community_count() << "\n"
          << "cells: " << part.cell_count() << "\n"
          << "edges: " << part.edge_count() << "\n"
          << "subjects: " << pop.subject_count() << "\n"
          << "covariates:";
      for (const auto& c : pop.covariate_names()) out << " " << c;
      out << "\n";
      (void)gram_inverse(pop);
      out << "ok\n";
      return kExitOk;
    }

    if (*fit) {
      const NetworkPopulation pop = load(f_in);
      const VMode mode = parse_v_mode(f_mode);
      SavedFit saved = fit_population(pop, f_estimator, mode, f_em.options());
      saved.meta["manifest"] = f_in.manifest;
      saved.meta["partition"] = f_in.partition;
      write_fit(f_out, saved);
      json extra;
      extra["converged"] = saved.converged;
      extra["iterations"] = saved.iterations;
      if (!saved.loglik_trace.empty()) extra["loglik"] = saved.loglik_trace.back();
      write_run_manifest(f_out, app, args, "fit", elapsed(), extra);
      out << "fit: " << saved.estimator << " (" << to_string(saved.v.mode()) << "), " << pop.subject_count() << " subjects, "
          << pop.partition().cell_count() << " cells, " << pop.partition().edge_count() << " edges";
      if (saved.estimator != "ols") out << ", " << saved.iterations << " iterations, loglik " << saved.loglik_trace.back();
      out << "\n";
      if (!saved.converged) {
        err << "warning: EM did not converge within " << f_em.max_iter << " iterations\n";
        return kExitNonConvergence;
      }
      return kExitOk;
    }

    if (*test) {
      const SavedFit saved = read_fit(t_fit);
      const fs::path dir = t_out.empty() ? fs::path(t_fit) : fs::path(t_out);
      const TestOutcome res = run_tests(saved, t_flags, dir);
      write_run_manifest(dir, app, args, "test", elapsed());
      out << "cells rejected: " << res.cells.rejection_count() << "/" << res.cells.rows.size()
          << ", edges rejected: " << res.edges.rejection_count() << "/" << res.edges.rows.size() << "\n";
      return kExitOk;
    }

    if (*refine) {
      std::string refine_manifest = r_in.manifest;
      if (!r_refine_on.empty()) refine_manifest = r_refine_on;
      if (refine_manifest.empty()) throw ValidationError("refine needs --manifest or --refine-on");
      if (!r_test_on.empty() && canonical(r_test_on) == canonical(refine_manifest) && !r_double_dip) {
        throw ValidationError(
            "--refine-on and --test-on name the same dataset; tests after data-driven refinement are biased "
            "(pass --allow-double-dip to proceed anyway)");
      }
      const NetworkPopulation pop = load(r_in, refine_manifest);
      const auto& part0 = pop.partition();
      const VMode mode = parse_v_mode(r_mode);
      const RefineMethod method = parse_refine_method(r_method);
      std::vector<std::size_t> field_cov;
      for (const auto& name : r_field) field_cov.push_back(default_covariate(pop.covariate_names(), name));
      if (field_cov.empty()) field_cov.push_back(default_covariate(pop.covariate_names(), ""));
      EmOptions em = r_em.options();

      fs::create_directories(r_out);
      CellPartition refined;
      RefinementResult result;
      std::optional<SavedFit> refined_fit;
      json extra;
      extra["method"] = r_method;
      if (!r_split.empty()) {
        SplitOptions so;
        so.method = method;
        so.parts = r_parts;
        so.covariates = field_cov;
        so.n_init = r_n_init;
        so.seed = r_seed;
        so.threads = threads;
        so.mode = mode;
        so.em = em;
        SplitResult split = split_community(pop, community_index(part0, r_split), so);
        refined = split.partition;
        result = split.refinement;
        refined_fit = saved_fit(pop.with_partition(refined), split.fit);
        extra["split_community"] = r_split;
        extra["parts"] = r_parts;
      } else if (method == RefineMethod::kKMeans) {
        if (r_k < 1) throw ValidationError("whole-network k-means needs --k (or use --split-community)");
        KMeansOptions ko;
        ko.k = r_k;
        ko.n_init = r_n_init;
        ko.seed = r_seed;
        ko.threads = threads;
        result = refine_kmeans(edge_effect_field(pop, field_cov), ko);
        refined = CellPartition::from_labels(result.labels);
      } else {
        LikelihoodOptions lo;
        lo.mode = mode;
        lo.em = em;
        LikelihoodRefinement lr = refine_likelihood(pop, part0.labels(), lo);
        result = lr.refinement;
        refined = CellPartition(lr.partition.labels(), part0.community_names());
        refined_fit = saved_fit(pop.with_partition(refined), lr.fit);
      }
      io::write_partition(fs::path(r_out) / "partition.csv", pop.nodes(), refined,
                          {{"method", r_method},
                           {"seed", std::to_string(r_seed)},
                           {"restarts", std::to_string(result.n_init)},
                           {"objective", std::to_string(result.objective)},
                           {"source", refine_manifest}});
      extra["objective"] = result.objective;
      extra["restarts"] = result.n_init;
      extra["best_init"] = result.best_init;
      extra["moves"] = result.moves;
      extra["communities"] = refined.community_names();

      if (!r_test_on.empty()) {
        const NetworkPopulation test_pop = load(r_in, r_test_on).with_partition(refined);
        SavedFit tf = saved_fit(test_pop, fit_em(test_pop, mode, em));
        tf.meta["manifest"] = r_test_on;
        write_fit(fs::path(r_out) / "fit", tf);
        const TestOutcome res = run_tests(tf, r_test, fs::path(r_out) / "tests");
        extra["test_on"] = r_test_on;
        extra["cells_rejected"] = res.cells.rejection_count();
        out << "tested on independent data: " << res.cells.rejection_count() << "/" << res.cells.rows.size()
            << " cells rejected\n";
      } else if (refined_fit) {
        refined_fit->meta["manifest"] = refine_manifest;
        write_fit(fs::path(r_out) / "fit", *refined_fit);
      }
      write_run_manifest(r_out, app, args, "refine", elapsed(), extra);
      out << "refined partition: " << refined.community_count() << " communities, objective " << result.objective << "\n";
      return kExitOk;
    }

    if (*simulate) {
      GenerativeSpec spec;
      if (!s_in.manifest.empty()) {
        if (s_in.partition.empty()) throw ValidationError("--manifest needs --partition");
        const NetworkPopulation pop = load(s_in);
        const FitResult f = fit_em(pop, VMode::kDiagonalCell, s_em.options());
        spec = spec_from_fit(pop, f, s_threshold, s_em.options());
      } else {
        spec = fixture_spec(s_spec_seed);
      }
      if (s_n0) spec.n0 = *s_n0;
      if (s_n1) spec.n1 = *s_n1;
      fs::create_directories(s_out);
      if (!s_emit.empty()) io::write_population(s_emit, generate(spec, s_seed));
      StudyOptions so;
      so.estimators = parse_estimators(s_estimators);
      so.replications = s_reps;
      so.seed = s_seed;
      so.threads = threads;
      so.level = s_level;
      so.em = s_em.options();
      const StudyReport rep = estimator_study(spec, so);
      const auto& names = spec.partition.community_names();
      {
        auto csv = open(fs::path(s_out) / "study_cells.csv");
        csv << "estimator,cell,a,b,truth,mean_error,empirical_sd,mc_se,median_se_ratio,se_ratio_q1,se_ratio_q3,coverage\n";
        for (const auto& es : rep.estimators) {
          for (const auto& c : es.cells) {
            std::vector<double> r = c.se_ratio;
            std::sort(r.begin(), r.end());
            auto q = [&](double f) { return r.empty() ? std::nan("") : r[static_cast<std::size_t>(f * static_cast<double>(r.size() - 1))]; };
            const auto& cell = spec.partition.cell(c.cell);
            csv << to_string(es.estimator) << "," << c.cell << "," << names[static_cast<std::size_t>(cell.a)] << ","
                << names[static_cast<std::size_t>(cell.b)] << "," << c.truth << "," << c.mean_error << "," << c.empirical_sd << ","
                << c.empirical_sd / std::sqrt(static_cast<double>(std::max(es.used, 1))) << "," << c.median_se_ratio << ","
                << q(0.25) << "," << q(0.75) << "," << c.coverage << "\n";
          }
        }
      }
      json summary;
      summary["replications"] = rep.replications;
      summary["level"] = rep.level;
      summary["n0"] = spec.n0;
      summary["n1"] = spec.n1;
      summary["true_positive_cells"] = spec.true_positive_cells;
      for (const auto& es : rep.estimators) {
        json e;
        e["used"] = es.used;
        e["failures"] = es.failures;
        e["seconds"] = es.seconds;
        json cells = json::array();
        for (const auto& c : es.cells) {
          cells.push_back({{"cell", c.cell}, {"mean_error", c.mean_error}, {"median_se_ratio", c.median_se_ratio}, {"coverage", c.coverage}});
        }
        e["cells"] = cells;
        summary["estimators"][to_string(es.estimator)] = e;
      }
      write_json(fs::path(s_out) / "summary.json", summary);
      write_run_manifest(s_out, app, args, "simulate", elapsed());
      for (const auto& es : rep.estimators) {
        out << to_string(es.estimator) << ": " << es.used << " replications, " << es.failures << " failures\n";
      }
      return kExitOk;
    }

    if (*nullcheck) {
      NetworkPopulation group = [&] {
        if (n_synthetic > 0) {
          GenerativeSpec spec = fixture_spec();
          spec.n0 = n_synthetic;
          spec.n1 = 0;
          return generate(spec, n_seed);
        }
        if (n_in.manifest.empty() || n_in.partition.empty()) {
          throw ValidationError("nullcheck needs --manifest and --partition, or --synthetic N");
        }
        NetworkPopulation pop = load(n_in);
        if (n_group_column.empty()) return pop;
        const std::size_t col = default_covariate(pop.covariate_names(), n_group_column);
        std::vector<std::size_t> keep;
        for (std::size_t m = 0; m < pop.subject_count(); ++m) {
          if (pop.design()(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(col)) == n_group_value) keep.push_back(m);
        }
        if (keep.empty()) throw ValidationError("no subject has " + n_group_column + " = " + std::to_string(n_group_value));
        return pop.subset(keep);
      }();
      NullSplitOptions no;
      no.estimators = parse_estimators(n_estimators);
      no.repetitions = n_reps;
      no.seed = n_seed;
      no.threads = threads;
      no.bins = n_bins;
      no.alpha = n_alpha;
      no.em = n_em.options();
      const NullSplitReport rep = null_split_study(group, no);
      fs::create_directories(n_out);
      {
        auto csv = open(fs::path(n_out) / "pooled_p.csv");
        csv << "estimator,repetition,cell,p\n";
        for (const auto& es : rep.estimators) {
          for (std::size_t k = 0; k < es.pooled_p.size(); ++k) {
            csv << to_string(es.estimator) << "," << k / rep.cells << "," << k % rep.cells << "," << es.pooled_p[k] << "\n";
          }
        }
      }
      {
        auto csv = open(fs::path(n_out) / "histogram.csv");
        csv << "estimator,bin_lower,bin_upper,count\n";
        for (const auto& es : rep.estimators) {
          for (std::size_t b = 0; b < es.histogram.size(); ++b) {
            const double w = 1.0 / static_cast<double>(es.histogram.size());
            csv << to_string(es.estimator) << "," << w * static_cast<double>(b) << "," << w * static_cast<double>(b + 1) << ","
                << es.histogram[b] << "\n";
          }
        }
      }
      json summary;
      summary["repetitions"] = rep.repetitions;
      summary["cells"] = rep.cells;
      summary["subjects"] = group.subject_count();
      summary["caveat"] = NullSplitReport::kCaveat;
      for (const auto& es : rep.estimators) {
        summary["estimators"][to_string(es.estimator)] = {{"pooled", es.pooled_p.size()},
                                                          {"below_alpha", es.below_alpha},
                                                          {"mean_bonferroni", es.mean_bonferroni},
                                                          {"ks_statistic", es.ks.statistic},
                                                          {"ks_p_value", es.ks.p_value},
                                                          {"failures", es.failures}};
      }
      write_json(fs::path(n_out) / "summary.json", summary);
      write_run_manifest(n_out, app, args, "nullcheck", elapsed());
      for (const auto& es : rep.estimators) {
        out << to_string(es.estimator) << ": " << es.pooled_p.size() << " p-values, " << es.below_alpha << " below " << n_alpha
            << ", KS p = " << es.ks.p_value << "\n";
      }
      return kExitOk;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConvergenceError& e) {
    err << "no convergence: " << e.what() << "\n";
    return kExitNonConvergence;
  }
  return kExitOk;
}

}  // namespace netlmm::cli
