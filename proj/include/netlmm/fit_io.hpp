#pragma once

// Fit directories: everything `test` needs to recompute inference without
// re-reading the subject matrices.
//
//   meta.txt          key=value (format_version, estimator, v_mode, ...)
//   communities.csv   index,name in model order
//   partition.csv     node_id,community (community index)
//   design.csv        subject_id,<covariates> (intercept included)
//   coefficients.csv  kind,cell,a,b,edge,i,j,covariate,estimate
//   U.csv             dense C x C
//   V.txt             "mode <m>" then one "cell <c> <size>" header per cell
//                     followed by its variance(s) or block rows
//   loglik.csv        iteration,loglik

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "netlmm/covstruct.hpp"
#include "netlmm/error.hpp"
#include "netlmm/estim.hpp"
#include "netlmm/io.hpp"
#include "netlmm/netdata.hpp"

namespace netlmm {

inline constexpr int kFitFormatVersion = 1;

struct SavedFit {
  std::string estimator;  // "ols" or "gls-em"
  VMode mode = VMode::kDiagonalCell;
  NodeSet nodes;
  CellPartition partition;
  std::vector<std::string> subject_ids;
  std::vector<std::string> covariate_names;
  Eigen::MatrixXd design;  // N x p
  CoefficientSet alpha;
  Eigen::MatrixXd u;
  ResidualCov v;
  std::vector<double> loglik_trace;
  bool converged = true;
  int iterations = 0;
  std::map<std::string, std::string> meta;

  double df() const { return static_cast<double>(design.rows() - design.cols()); }

  CoefficientCovariance covariance() const {
    const Eigen::MatrixXd s = design.transpose() * design;
    return CoefficientCovariance(v, u, s.ldlt().solve(Eigen::MatrixXd::Identity(s.rows(), s.cols())));
  }

  std::size_t covariate_index(const std::string& name) const {
    for (std::size_t j = 0; j < covariate_names.size(); ++j) {
      if (covariate_names[j] == name) return j;
    }
    throw ValidationError("covariate '" + name + "' is not part of the fit");
  }
};

namespace detail {

inline SavedFit saved_header(const NetworkPopulation& pop) {
  SavedFit out;
  out.nodes = pop.nodes();
  out.partition = pop.partition();
  for (const auto& s : pop.subjects()) out.subject_ids.push_back(s.id);
  out.covariate_names = pop.covariate_names();
  out.design = pop.design();
  return out;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  return out;
}

inline void require(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("fit directory is missing '" + path.filename().string() + "'");
}

}  // namespace detail

inline SavedFit saved_fit(const NetworkPopulation& pop, const OlsFit& fit) {
  SavedFit out = detail::saved_header(pop);
  out.estimator = "ols";
  out.alpha = fit.alpha;
  out.v = ResidualCov::diagonal_cell(fit.cells, fit.sigma2);
  out.u = Eigen::MatrixXd::Zero(fit.sigma2.size(), fit.sigma2.size());
  return out;
}

inline SavedFit saved_fit(const NetworkPopulation& pop, const FitResult& fit) {
  SavedFit out = detail::saved_header(pop);
  out.estimator = "gls-em";
  out.mode = fit.mode;
  out.alpha = fit.alpha;
  out.u = fit.u;
  out.v = fit.v;
  out.loglik_trace = fit.loglik_trace;
  out.converged = fit.converged;
  out.iterations = fit.iterations;
  return out;
}

inline void write_fit(const std::filesystem::path& dir, const SavedFit& fit) {
  std::filesystem::create_directories(dir);
  const auto& part = fit.partition;
  const auto& names = part.community_names();
  {
    auto out = detail::open_out(dir / "meta.txt");
    std::map<std::string, std::string> meta = fit.meta;
    meta["format_version"] = std::to_string(kFitFormatVersion);
    meta["estimator"] = fit.estimator;
    meta["v_mode"] = to_string(fit.v.mode());
    meta["converged"] = fit.converged ? "true" : "false";
    meta["iterations"] = std::to_string(fit.iterations);
    meta["subjects"] = std::to_string(fit.design.rows());
    meta["covariates"] = std::to_string(fit.design.cols());
    meta["cells"] = std::to_string(part.cell_count());
    meta["edges"] = std::to_string(part.edge_count());
    for (const auto& [k, v] : meta) out << k << "=" << v << "\n";
  }
  {
    auto out = detail::open_out(dir / "communities.csv");
    out << "index,name\n";
    for (std::size_t a = 0; a < names.size(); ++a) out << a << "," << names[a] << "\n";
  }
  {
    auto out = detail::open_out(dir / "partition.csv");
    out << "node_id,community\n";
    for (std::size_t i = 0; i < fit.nodes.size(); ++i) out << fit.nodes.id(i) << "," << part.label(i) << "\n";
  }
  {
    auto out = detail::open_out(dir / "design.csv");
    out << "subject_id";
    for (const auto& n : fit.covariate_names) out << "," << n;
    out << "\n";
    for (Eigen::Index m = 0; m < fit.design.rows(); ++m) {
      out << fit.subject_ids[static_cast<std::size_t>(m)];
      for (Eigen::Index j = 0; j < fit.design.cols(); ++j) out << "," << fit.design(m, j);
      out << "\n";
    }
  }
  {
    auto out = detail::open_out(dir / "coefficients.csv");
    out << "kind,cell,a,b,edge,i,j,covariate,estimate\n";
    const auto p = fit.alpha.beta.cols();
    for (std::size_t c = 0; c < part.cell_count(); ++c) {
      const auto& cell = part.cell(c);
      const std::string an = names[static_cast<std::size_t>(cell.a)];
      const std::string bn = names[static_cast<std::size_t>(cell.b)];
      for (Eigen::Index j = 0; j < p; ++j) {
        out << "beta," << c << "," << an << "," << bn << ",,,," << fit.covariate_names[static_cast<std::size_t>(j)] << ","
            << fit.alpha.beta(static_cast<Eigen::Index>(c), j) << "\n";
      }
      if (cell.size < 2) continue;
      for (std::size_t e = cell.offset; e < cell.offset + cell.size; ++e) {
        const auto& edge = part.edge(e);
        for (Eigen::Index j = 0; j < p; ++j) {
          out << "eta," << c << "," << an << "," << bn << "," << e << "," << fit.nodes.id(static_cast<std::size_t>(edge.i)) << ","
              << fit.nodes.id(static_cast<std::size_t>(edge.j)) << "," << fit.covariate_names[static_cast<std::size_t>(j)] << ","
              << fit.alpha.eta(static_cast<Eigen::Index>(e), j) << "\n";
        }
      }
    }
  }
  io::write_matrix(dir / "U.csv", fit.u);
  {
    auto out = detail::open_out(dir / "V.txt");
    out << "mode " << to_string(fit.v.mode()) << "\n";
    for (std::size_t c = 0; c < part.cell_count(); ++c) {
      const auto& cell = part.cell(c);
      out << "cell " << c << " " << cell.size << "\n";
      switch (fit.v.mode()) {
        case VMode::kDiagonalCell: out << fit.v.values()[static_cast<Eigen::Index>(c)] << "\n"; break;
        case VMode::kDiagonalEdge:
          for (std::size_t e = cell.offset; e < cell.offset + cell.size; ++e) out << fit.v.values()[static_cast<Eigen::Index>(e)] << "\n";
          break;
        case VMode::kBlock: {
          const auto& b = fit.v.blocks()[c];
          for (Eigen::Index r = 0; r < b.rows(); ++r) {
            for (Eigen::Index k = 0; k < b.cols(); ++k) out << (k ? "," : "") << b(r, k);
            out << "\n";
          }
          break;
        }
      }
    }
  }
  {
    auto out = detail::open_out(dir / "loglik.csv");
    out << "iteration,loglik\n";
    for (std::size_t t = 0; t < fit.loglik_trace.size(); ++t) out << t << "," << fit.loglik_trace[t] << "\n";
  }
}

inline SavedFit read_fit(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("fit directory '" + dir.string() + "' does not exist");
  for (const char* f : {"meta.txt", "communities.csv", "partition.csv", "design.csv", "coefficients.csv", "U.csv", "V.txt"}) {
    detail::require(dir / f);
  }
  SavedFit fit;
  {
    std::ifstream in(dir / "meta.txt");
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      fit.meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (fit.meta["format_version"] != std::to_string(kFitFormatVersion)) {
      throw ValidationError("unsupported fit format version '" + fit.meta["format_version"] + "'");
    }
    fit.estimator = fit.meta["estimator"];
    fit.converged = fit.meta["converged"] == "true";
    fit.iterations = std::stoi(fit.meta["iterations"]);
  }

  std::vector<std::string> names;
  {
    const auto path = dir / "communities.csv";
    auto rows = io::read_rows(path);
    for (std::size_t k = 1; k < rows.size(); ++k) {
      if (rows[k].fields.size() != 2 || rows[k].fields[0] != std::to_string(k - 1)) {
        throw ValidationError(io::where(path, rows[k].line) + ": malformed community row");
      }
      names.push_back(rows[k].fields[1]);
    }
  }
  {
    const auto path = dir / "partition.csv";
    auto rows = io::read_rows(path);
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (std::size_t k = 1; k < rows.size(); ++k) {
      if (rows[k].fields.size() != 2) throw ValidationError(io::where(path, rows[k].line) + ": malformed partition row");
      ids.push_back(rows[k].fields[0]);
      labels.push_back(static_cast<int>(io::to_double(rows[k].fields[1], path, rows[k].line)));
    }
    fit.nodes = NodeSet(ids);
    fit.partition = CellPartition(labels, names);
  }
  {
    const auto path = dir / "design.csv";
    auto rows = io::read_rows(path);
    if (rows.size() < 2) throw ValidationError(path.string() + ": no subjects");
    fit.covariate_names.assign(rows[0].fields.begin() + 1, rows[0].fields.end());
    const auto p = static_cast<Eigen::Index>(fit.covariate_names.size());
    fit.design.resize(static_cast<Eigen::Index>(rows.size() - 1), p);
    for (std::size_t k = 1; k < rows.size(); ++k) {
      if (static_cast<Eigen::Index>(rows[k].fields.size()) != p + 1) {
        throw ValidationError(io::where(path, rows[k].line) + ": wrong field count");
      }
      fit.subject_ids.push_back(rows[k].fields[0]);
      for (Eigen::Index j = 0; j < p; ++j) {
        fit.design(static_cast<Eigen::Index>(k - 1), j) = io::to_double(rows[k].fields[static_cast<std::size_t>(j + 1)], path, rows[k].line);
      }
    }
  }
  const auto& part = fit.partition;
  const auto p = static_cast<Eigen::Index>(fit.covariate_names.size());
  const auto cc = static_cast<Eigen::Index>(part.cell_count());
  {
    const auto path = dir / "coefficients.csv";
    fit.alpha.beta = Eigen::MatrixXd::Zero(cc, p);
    fit.alpha.eta = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(part.edge_count()), p);
    auto rows = io::read_rows(path);
    for (std::size_t k = 1; k < rows.size(); ++k) {
      const auto& f = rows[k].fields;
      if (f.size() != 9) throw ValidationError(io::where(path, rows[k].line) + ": expected 9 fields");
      const auto j = static_cast<Eigen::Index>(fit.covariate_index(f[7]));
      const double value = io::to_double(f[8], path, rows[k].line);
      if (f[0] == "beta") {
        const auto c = static_cast<Eigen::Index>(io::to_double(f[1], path, rows[k].line));
        if (c < 0 || c >= cc) throw ValidationError(io::where(path, rows[k].line) + ": cell index out of range");
        fit.alpha.beta(c, j) = value;
      } else if (f[0] == "eta") {
        const auto e = static_cast<Eigen::Index>(io::to_double(f[4], path, rows[k].line));
        if (e < 0 || e >= fit.alpha.eta.rows()) throw ValidationError(io::where(path, rows[k].line) + ": edge index out of range");
        fit.alpha.eta(e, j) = value;
      } else {
        throw ValidationError(io::where(path, rows[k].line) + ": unknown coefficient kind '" + f[0] + "'");
      }
    }
  }
  fit.u = io::read_numeric_grid(dir / "U.csv");
  if (fit.u.rows() != cc || fit.u.cols() != cc) throw ValidationError("U.csv has wrong shape");
  {
    const auto path = dir / "V.txt";
    auto rows = io::read_rows(path);
    if (rows.empty() || rows[0].fields.size() != 2 || rows[0].fields[0] != "mode") {
      throw ValidationError(path.string() + ": first line must be 'mode <name>'");
    }
    fit.mode = parse_v_mode(rows[0].fields[1]);
    std::size_t k = 1;
    Eigen::VectorXd values(fit.mode == VMode::kDiagonalEdge ? static_cast<Eigen::Index>(part.edge_count()) : cc);
    std::vector<Eigen::MatrixXd> blocks;
    for (std::size_t c = 0; c < part.cell_count(); ++c) {
      const auto& cell = part.cell(c);
      if (k >= rows.size() || rows[k].fields.size() != 3 || rows[k].fields[0] != "cell" ||
          rows[k].fields[2] != std::to_string(cell.size)) {
        throw ValidationError(path.string() + ": expected header for cell " + std::to_string(c));
      }
      ++k;
      const std::size_t lines = fit.mode == VMode::kDiagonalCell ? 1 : cell.size;
      if (k + lines > rows.size()) throw ValidationError(path.string() + ": truncated");
      if (fit.mode == VMode::kBlock) {
        const auto s = static_cast<Eigen::Index>(cell.size);
        Eigen::MatrixXd b(s, s);
        for (Eigen::Index r = 0; r < s; ++r) {
          const auto& row = rows[k + static_cast<std::size_t>(r)];
          if (static_cast<Eigen::Index>(row.fields.size()) != s) throw ValidationError(io::where(path, row.line) + ": wrong block width");
          for (Eigen::Index q = 0; q < s; ++q) b(r, q) = io::to_double(row.fields[static_cast<std::size_t>(q)], path, row.line);
        }
        blocks.push_back(std::move(b));
      } else if (fit.mode == VMode::kDiagonalCell) {
        values[static_cast<Eigen::Index>(c)] = io::to_double(rows[k].fields[0], path, rows[k].line);
      } else {
        for (std::size_t r = 0; r < cell.size; ++r) {
          values[static_cast<Eigen::Index>(cell.offset + r)] = io::to_double(rows[k + r].fields[0], path, rows[k + r].line);
        }
      }
      k += lines;
    }
    switch (fit.mode) {
      case VMode::kDiagonalCell: fit.v = ResidualCov::diagonal_cell(part.cells(), values); break;
      case VMode::kDiagonalEdge: fit.v = ResidualCov::diagonal_edge(part.cells(), values); break;
      case VMode::kBlock:
        // validate, then keep the stored values bit for bit (clipping again would perturb them)
        (void)ResidualCov::block(part.cells(), blocks);
        fit.v = ResidualCov::block(part.cells(), std::move(blocks), false);
        break;
    }
  }
  if (std::filesystem::exists(dir / "loglik.csv")) {
    const auto path = dir / "loglik.csv";
    auto rows = io::read_rows(path);
    for (std::size_t k = 1; k < rows.size(); ++k) fit.loglik_trace.push_back(io::to_double(rows[k].fields.at(1), path, rows[k].line));
  }
  return fit;
}

}  // namespace netlmm
