#pragma once

// Delimited-text readers and writers: partition files, subject manifests,
// connectivity matrices (dense grid or long i,j,weight format) and
// exclusion lists.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "netlmm/error.hpp"
#include "netlmm/netdata.hpp"

namespace netlmm::io {

struct Row {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

/// Splits on commas, else tabs, else runs of whitespace.
inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  char delim = 0;
  if (line.find(',') != std::string::npos) {
    delim = ',';
  } else if (line.find('\t') != std::string::npos) {
    delim = '\t';
  }
  if (delim != 0) {
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, delim)) out.push_back(trim(field));
    if (!line.empty() && line.back() == delim) out.emplace_back();
  } else {
    std::istringstream ss(line);
    std::string field;
    while (ss >> field) out.push_back(field);
  }
  return out;
}

/// Non-empty, non-comment ('#') rows with their 1-based line numbers.
inline std::vector<Row> read_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::vector<Row> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    rows.push_back({number, split_fields(t)});
  }
  return rows;
}

inline std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (*b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, out);
  if (ec == std::errc() && ptr == e) return true;
  const std::string l = lower(s);
  if (l == "nan" || l == "na") {
    out = std::numeric_limits<double>::quiet_NaN();
    return true;
  }
  return false;
}

inline double to_double(const std::string& s, const std::filesystem::path& path, std::size_t line) {
  double v = 0.0;
  if (!parse_double(s, v)) throw ValidationError(where(path, line) + ": not a number: '" + s + "'");
  return v;
}

struct PartitionFile {
  std::vector<std::string> node_ids;
  std::vector<std::string> labels;
};

/// `node_id,community_id` per line; an optional header row is recognised by
/// its first field (node, node_id, id, roi).
inline PartitionFile read_partition(const std::filesystem::path& path) {
  auto rows = read_rows(path);
  if (!rows.empty()) {
    const std::string h = lower(rows.front().fields.front());
    if (h == "node" || h == "node_id" || h == "id" || h == "roi") rows.erase(rows.begin());
  }
  if (rows.empty()) throw ValidationError(path.string() + ": empty partition file");
  PartitionFile out;
  std::set<std::string> seen;
  for (const auto& r : rows) {
    if (r.fields.size() != 2) {
      throw ValidationError(where(path, r.line) + ": expected 2 fields (node_id, community_id), got " +
                            std::to_string(r.fields.size()));
    }
    if (r.fields[0].empty() || r.fields[1].empty()) throw ValidationError(where(path, r.line) + ": empty field");
    if (!seen.insert(r.fields[0]).second) throw ValidationError(where(path, r.line) + ": duplicate node '" + r.fields[0] + "'");
    out.node_ids.push_back(r.fields[0]);
    out.labels.push_back(r.fields[1]);
  }
  return out;
}

/// Writes `node_id,community_id` with an optional block of `# key: value` lines.
inline void write_partition(const std::filesystem::path& path, const NodeSet& nodes, const CellPartition& partition,
                            const std::vector<std::pair<std::string, std::string>>& provenance = {}) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  for (const auto& [k, v] : provenance) out << "# " << k << ": " << v << "\n";
  out << "node_id,community_id\n";
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    out << nodes.id(i) << "," << partition.community_names()[static_cast<std::size_t>(partition.label(i))] << "\n";
  }
}

/// One node id per row (first field).
inline std::vector<std::string> read_exclusions(const std::filesystem::path& path) {
  std::vector<std::string> out;
  for (const auto& r : read_rows(path)) out.push_back(r.fields.front());
  return out;
}

/// Reads an n x n matrix whose rows follow `ids`. Dense grids have n rows
/// of n numbers. The long format has rows `i,j,weight` with node ids; it is
/// chosen when the header reads i,j,weight or the file is not an n x n grid.
/// Long entries given in both orders must agree to 1e-8; every off-diagonal
/// pair must be present. The diagonal is ignored and set to 0.
inline Eigen::MatrixXd read_matrix(const std::filesystem::path& path, const std::vector<std::string>& ids) {
  if (!std::filesystem::exists(path)) throw ValidationError("matrix file not found: '" + path.string() + "'");
  auto rows = read_rows(path);
  const auto n = static_cast<Eigen::Index>(ids.size());
  bool long_format = false;
  if (!rows.empty() && rows.front().fields.size() == 3) {
    const auto& f = rows.front().fields;
    if (lower(f[0]) == "i" && lower(f[1]) == "j") {
      long_format = true;
      rows.erase(rows.begin());
    }
  }
  if (!long_format) {
    const bool grid = static_cast<Eigen::Index>(rows.size()) == n &&
                      std::all_of(rows.begin(), rows.end(), [&](const Row& r) { return static_cast<Eigen::Index>(r.fields.size()) == n; });
    if (!grid) {
      long_format = !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.fields.size() == 3; });
      if (!long_format) {
        throw ValidationError(path.string() + ": expected a " + std::to_string(n) + "x" + std::to_string(n) +
                              " grid or i,j,weight rows");
      }
    }
  }

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  if (!long_format) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& r = rows[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        w(i, j) = to_double(r.fields[static_cast<std::size_t>(j)], path, r.line);
      }
    }
    return w;
  }

  std::map<std::string, Eigen::Index> index;
  for (Eigen::Index i = 0; i < n; ++i) index[ids[static_cast<std::size_t>(i)]] = i;
  Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, n);
  for (const auto& r : rows) {
    const auto a = index.find(r.fields[0]);
    const auto b = index.find(r.fields[1]);
    if (a == index.end() || b == index.end()) {
      const std::string& missing = a == index.end() ? r.fields[0] : r.fields[1];
      throw ValidationError(where(path, r.line) + ": unknown node '" + missing + "'");
    }
    const double v = to_double(r.fields[2], path, r.line);
    const Eigen::Index i = a->second;
    const Eigen::Index j = b->second;
    if (i == j) continue;
    for (auto [p, q] : {std::pair{i, j}, std::pair{j, i}}) {
      if (seen(p, q) != 0) {
        if (std::abs(w(p, q) - v) > 1e-8) {
          throw ValidationError(where(path, r.line) + ": weight for (" + r.fields[0] + ", " + r.fields[1] +
                                ") disagrees with an earlier entry");
        }
      }
      w(p, q) = v;
      seen(p, q) = 1;
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (seen(i, j) == 0) {
        throw ValidationError(path.string() + ": missing weight for (" + ids[static_cast<std::size_t>(i)] + ", " +
                              ids[static_cast<std::size_t>(j)] + ")");
      }
    }
  }
  return w;
}

inline void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << m(i, j);
    out << "\n";
  }
}

/// Dense numeric CSV (no header) into a matrix.
inline Eigen::MatrixXd read_numeric_grid(const std::filesystem::path& path) {
  const auto rows = read_rows(path);
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().fields.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].fields.size() != rows.front().fields.size()) throw ValidationError(where(path, rows[i].line) + ": ragged row");
    for (std::size_t j = 0; j < rows[i].fields.size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = to_double(rows[i].fields[j], path, rows[i].line);
    }
  }
  return m;
}

struct ManifestEntry {
  std::string subject_id;
  std::filesystem::path matrix_path;
  std::vector<double> covariates;  // without the intercept
  std::size_t line = 0;
};

struct Manifest {
  std::vector<std::string> covariate_names;  // without the intercept
  std::vector<ManifestEntry> entries;
};

/// Header row `subject_id,matrix_path,<covariates...>`. Relative matrix
/// paths are resolved against the manifest's directory.
inline Manifest read_manifest(const std::filesystem::path& path) {
  const auto rows = read_rows(path);
  if (rows.size() < 2) throw ValidationError(path.string() + ": manifest needs a header and at least one subject");
  const auto& header = rows.front().fields;
  if (header.size() < 2) throw ValidationError(where(path, rows.front().line) + ": header needs subject_id,matrix_path");
  Manifest out;
  out.covariate_names.assign(header.begin() + 2, header.end());
  const auto base = path.parent_path();
  std::set<std::string> ids;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& r = rows[k];
    if (r.fields.size() != header.size()) {
      throw ValidationError(where(path, r.line) + ": expected " + std::to_string(header.size()) + " fields, got " +
                            std::to_string(r.fields.size()));
    }
    ManifestEntry e;
    e.subject_id = r.fields[0];
    if (!ids.insert(e.subject_id).second) throw ValidationError(where(path, r.line) + ": duplicate subject '" + e.subject_id + "'");
    e.matrix_path = r.fields[1];
    if (e.matrix_path.is_relative()) e.matrix_path = base / e.matrix_path;
    for (std::size_t c = 2; c < r.fields.size(); ++c) {
      const double v = to_double(r.fields[c], path, r.line);
      if (!std::isfinite(v)) throw ValidationError(where(path, r.line) + ": missing covariate '" + header[c] + "'");
      e.covariates.push_back(v);
    }
    e.line = r.line;
    out.entries.push_back(std::move(e));
  }
  return out;
}

struct LoadOptions {
  std::vector<std::string> exclude;      // node ids dropped before analysis
  bool fisher = false;                   // apply the Fisher z-transform to every weight
  std::vector<std::string> covariates;   // subset/order of manifest covariates; empty = all
};

/// Reads manifest, partition and matrices into a population. Node order is
/// the partition file order; matrices must list every partition node
/// (excluded ones included).
inline NetworkPopulation load_population(const std::filesystem::path& manifest_path,
                                         const std::filesystem::path& partition_path, const LoadOptions& opts = {}) {
  const PartitionFile pf = read_partition(partition_path);
  const Manifest manifest = read_manifest(manifest_path);

  std::set<std::string> excluded(opts.exclude.begin(), opts.exclude.end());
  for (const auto& x : excluded) {
    if (std::find(pf.node_ids.begin(), pf.node_ids.end(), x) == pf.node_ids.end()) {
      throw ValidationError("excluded node '" + x + "' is not in the partition file");
    }
  }
  std::vector<std::size_t> keep;
  std::vector<std::string> kept_ids;
  std::vector<std::string> kept_labels;
  for (std::size_t i = 0; i < pf.node_ids.size(); ++i) {
    if (excluded.count(pf.node_ids[i]) != 0) continue;
    keep.push_back(i);
    kept_ids.push_back(pf.node_ids[i]);
    kept_labels.push_back(pf.labels[i]);
  }
  NodeSet nodes(kept_ids);
  CellPartition partition = CellPartition::from_names(kept_labels);

  std::vector<std::size_t> cov_index;
  std::vector<std::string> names = {"intercept"};
  if (opts.covariates.empty()) {
    for (std::size_t c = 0; c < manifest.covariate_names.size(); ++c) cov_index.push_back(c);
  } else {
    for (const auto& name : opts.covariates) {
      const auto it = std::find(manifest.covariate_names.begin(), manifest.covariate_names.end(), name);
      if (it == manifest.covariate_names.end()) throw ValidationError("covariate '" + name + "' is not in the manifest");
      cov_index.push_back(static_cast<std::size_t>(it - manifest.covariate_names.begin()));
    }
  }
  for (auto c : cov_index) names.push_back(manifest.covariate_names[c]);

  std::vector<SubjectNetwork> subjects;
  for (const auto& e : manifest.entries) {
    Eigen::MatrixXd full;
    try {
      full = read_matrix(e.matrix_path, pf.node_ids);
    } catch (const ValidationError& err) {
      throw ValidationError("subject '" + e.subject_id + "' (" + where(manifest_path, e.line) + "): " + err.what());
    }
    const auto n = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd w(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        w(i, j) = i == j ? 0.0 : full(static_cast<Eigen::Index>(keep[static_cast<std::size_t>(i)]), static_cast<Eigen::Index>(keep[static_cast<std::size_t>(j)]));
        if (opts.fisher && i != j) {
          try {
            w(i, j) = fisher_z(w(i, j));
          } catch (const ValidationError&) {
            throw ValidationError("subject '" + e.subject_id + "' (" + e.matrix_path.string() + "): entry (" +
                                  kept_ids[static_cast<std::size_t>(i)] + ", " + kept_ids[static_cast<std::size_t>(j)] +
                                  ") = " + std::to_string(w(i, j)) + " is not a correlation in (-1, 1)");
          }
        }
      }
    }
    Eigen::VectorXd x(static_cast<Eigen::Index>(cov_index.size() + 1));
    x[0] = 1.0;
    for (std::size_t k = 0; k < cov_index.size(); ++k) x[static_cast<Eigen::Index>(k + 1)] = e.covariates[cov_index[k]];
    subjects.push_back({e.subject_id, std::move(w), std::move(x)});
  }
  return NetworkPopulation(std::move(nodes), std::move(partition), std::move(subjects), std::move(names));
}

/// Writes a population as manifest + one dense matrix per subject under `dir`.
inline void write_population(const std::filesystem::path& dir, const NetworkPopulation& pop) {
  std::filesystem::create_directories(dir / "matrices");
  write_partition(dir / "partition.csv", pop.nodes(), pop.partition());
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw ValidationError("cannot write manifest in '" + dir.string() + "'");
  manifest << "subject_id,matrix_path";
  for (std::size_t c = 1; c < pop.covariate_count(); ++c) manifest << "," << pop.covariate_names()[c];
  manifest << "\n" << std::setprecision(17);
  for (const auto& s : pop.subjects()) {
    const std::string rel = "matrices/" + s.id + ".csv";
    write_matrix(dir / rel, s.weights);
    manifest << s.id << "," << rel;
    for (Eigen::Index c = 1; c < s.covariates.size(); ++c) manifest << "," << s.covariates[c];
    manifest << "\n";
  }
}

}  // namespace netlmm::io
