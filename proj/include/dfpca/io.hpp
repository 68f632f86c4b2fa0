#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfpca/dataset.hpp"
#include "dfpca/errors.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/scores.hpp"
#include "dfpca/surface.hpp"

// File formats: long-format observation tables, the "dfpca-grid v1" grid/mask
// file, and the persisted model bundle directory. Every writer here pairs
// with a reader that reproduces the written object bit-for-bit (doubles are
// serialized with 17 significant digits).

namespace dfpca {

namespace detail {

/// Formats a double so that parsing it back recovers the exact bits.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& token, const std::string& file, std::size_t line) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0' || errno == ERANGE)
    throw err::parse(file + ":" + std::to_string(line) + ": not a number: '" + token + "'");
  return v;
}

inline long long parse_int(const std::string& token, const std::string& file, std::size_t line) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(token.c_str(), &end, 10);
  if (end == token.c_str() || *end != '\0' || errno == ERANGE)
    throw err::parse(file + ":" + std::to_string(line) + ": not an integer: '" + token + "'");
  return v;
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  if (delim == ' ') {
    // Whitespace mode: any run of blanks separates fields.
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
  }
  std::string::size_type pos = 0;
  while (true) {
    const auto next = line.find(delim, pos);
    out.push_back(line.substr(pos, next == std::string::npos ? next : next - pos));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

/// Picks the delimiter that splits the header into the most fields.
inline char sniff_delimiter(const std::string& header) {
  char best = '\t';
  std::size_t best_fields = 0;
  for (char cand : {'\t', ',', ';', ' '}) {
    const std::size_t fields = split_line(header, cand).size();
    if (fields > best_fields) {
      best_fields = fields;
      best = cand;
    }
  }
  return best;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw err::io("cannot open '" + path + "' for writing");
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw err::io("cannot open '" + path + "' for reading");
  return in;
}

}  // namespace detail

/**
 * @brief Reads a delimiter-separated long-format observation table.
 *
 * Expected layout: a header row naming the columns (sample id, one column
 * per axis, then the value), followed by one record per observation. The
 * delimiter is sniffed from the header (tab, comma, semicolon, or runs of
 * spaces). Rows with the same sample id are grouped into one sample, in
 * order of first appearance. Parse failures name the file and line.
 */
inline FunctionalDataset read_long_format(const std::string& path) {
  std::ifstream in = detail::open_input(path);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw err::parse(path + ":1: empty file, expected a header row");
  ++lineno;
  line = detail::strip_cr(line);
  const char delim = detail::sniff_delimiter(line);
  const auto header = detail::split_line(line, delim);
  if (header.size() < 3)
    throw err::parse(path + ":1: header needs at least (id, coordinate, value) columns");
  const std::size_t d = header.size() - 2;

  FunctionalDataset data;
  data.dim = d;
  std::map<std::string, std::size_t> index_of;
  std::size_t n_rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split_line(line, delim);
    if (fields.size() != header.size())
      throw err::parse(path + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()));
    const std::string& id = fields[0];
    auto [it, inserted] = index_of.try_emplace(id, data.samples.size());
    if (inserted) {
      data.samples.emplace_back();
      data.samples.back().id = id;
    }
    Sample& s = data.samples[it->second];
    for (std::size_t k = 0; k < d; ++k)
      s.coords.push_back(detail::parse_double(fields[1 + k], path, lineno));
    s.values.push_back(detail::parse_double(fields[1 + d], path, lineno));
    ++n_rows;
  }
  if (n_rows == 0) throw err::parse(path + ":" + std::to_string(lineno) + ": no observation rows");
  return data;
}

/** @brief Writes a dataset as a tab-separated long-format table. */
inline void write_long_format(const std::string& path, const FunctionalDataset& data,
                              std::vector<std::string> axis_names = {}) {
  if (axis_names.empty())
    for (std::size_t k = 0; k < data.dim; ++k) axis_names.push_back("t" + std::to_string(k + 1));
  if (axis_names.size() != data.dim) throw err::invalid_argument("one axis name per dimension");

  std::ofstream out = detail::open_output(path);
  out << "sample_id";
  for (const auto& name : axis_names) out << '\t' << name;
  out << "\ty\n";
  for (const Sample& s : data.samples)
    for (std::size_t j = 0; j < s.n_obs(); ++j) {
      out << s.id;
      for (std::size_t k = 0; k < data.dim; ++k)
        out << '\t' << detail::format_double(s.coords[j * data.dim + k]);
      out << '\t' << detail::format_double(s.values[j]) << '\n';
    }
  if (!out) throw err::io("failed writing '" + path + "'");
}

/**
 * @brief Writes a grid (and mask, if any) in the "dfpca-grid v1" format.
 *
 * Layout: a version line, `dim <d>`, one `axis <k> <count> <nodes...>` line
 * per axis, and an optional `mask <0/1 string>` line flattened row-major
 * with the last axis varying fastest.
 */
inline void write_grid(const std::string& path, const EvaluationGrid& grid) {
  std::ofstream out = detail::open_output(path);
  out << "dfpca-grid v1\n";
  out << "dim " << grid.dim() << '\n';
  for (std::size_t k = 0; k < grid.dim(); ++k) {
    const auto& axis = grid.axis(k);
    out << "axis " << k << ' ' << axis.size();
    for (double v : axis) out << ' ' << detail::format_double(v);
    out << '\n';
  }
  if (grid.has_mask()) {
    out << "mask ";
    for (Index f = 0; f < grid.size(); ++f) out << (grid.in_mask(f) ? '1' : '0');
    out << '\n';
  }
  if (!out) throw err::io("failed writing '" + path + "'");
}

/** @brief Reads a "dfpca-grid v1" file written by write_grid. */
inline EvaluationGrid read_grid(const std::string& path) {
  std::ifstream in = detail::open_input(path);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw err::parse(path + ":1: empty grid file");
  ++lineno;
  line = detail::strip_cr(line);
  if (line.rfind("dfpca-grid", 0) != 0)
    throw err::parse(path + ":1: not a dfpca-grid file (bad magic)");
  if (line != "dfpca-grid v1")
    throw err::version_mismatch(path + ": unsupported grid format '" + line + "'");

  std::size_t dim = 0;
  std::vector<std::vector<double>> axes;
  std::string mask_bits;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "dim") {
      long long d = 0;
      if (!(ss >> d) || d < 1)
        throw err::parse(path + ":" + std::to_string(lineno) + ": bad dimension");
      dim = static_cast<std::size_t>(d);
      axes.resize(dim);
    } else if (tag == "axis") {
      long long k = -1, count = 0;
      if (!(ss >> k >> count) || k < 0 || static_cast<std::size_t>(k) >= axes.size() || count < 2)
        throw err::parse(path + ":" + std::to_string(lineno) + ": bad axis header");
      auto& axis = axes[static_cast<std::size_t>(k)];
      axis.resize(static_cast<std::size_t>(count));
      std::string tok;
      for (auto& v : axis) {
        if (!(ss >> tok))
          throw err::parse(path + ":" + std::to_string(lineno) + ": axis shorter than declared");
        v = detail::parse_double(tok, path, lineno);
      }
    } else if (tag == "mask") {
      std::string chunk;
      while (ss >> chunk) mask_bits += chunk;
    } else {
      throw err::parse(path + ":" + std::to_string(lineno) + ": unknown record '" + tag + "'");
    }
  }
  if (dim == 0) throw err::parse(path + ": missing 'dim' record");
  for (std::size_t k = 0; k < dim; ++k)
    if (axes[k].empty()) throw err::parse(path + ": missing axis " + std::to_string(k));

  if (mask_bits.empty()) return EvaluationGrid(std::move(axes));
  Index total = 1;
  for (const auto& axis : axes) total *= static_cast<Index>(axis.size());
  if (static_cast<Index>(mask_bits.size()) != total)
    throw err::parse(path + ": mask length " + std::to_string(mask_bits.size()) +
                     " does not match grid size " + std::to_string(total));
  std::vector<std::uint8_t> mask(mask_bits.size());
  for (std::size_t f = 0; f < mask_bits.size(); ++f) {
    if (mask_bits[f] != '0' && mask_bits[f] != '1')
      throw err::parse(path + ": mask entries must be 0 or 1");
    mask[f] = mask_bits[f] == '1' ? 1 : 0;
  }
  return EvaluationGrid(std::move(axes), std::move(mask));
}

namespace detail {

/// One value per line; masked-out nodes round-trip through "nan".
inline void write_value_column(const std::string& path, const std::vector<double>& values) {
  std::ofstream out = open_output(path);
  for (double v : values) out << format_double(v) << '\n';
  if (!out) throw err::io("failed writing '" + path + "'");
}

inline std::vector<double> read_value_column(const std::string& path, std::size_t expected) {
  std::ifstream in = open_input(path);
  std::vector<double> values;
  values.reserve(expected);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    values.push_back(parse_double(line, path, lineno));
  }
  if (values.size() != expected)
    throw err::parse(path + ": expected " + std::to_string(expected) + " values, found " +
                     std::to_string(values.size()));
  return values;
}

/// Tab-separated matrix, one row per line.
inline void write_matrix(const std::string& path, const std::vector<std::vector<double>>& rows) {
  std::ofstream out = open_output(path);
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out << '\t';
      out << format_double(row[j]);
    }
    out << '\n';
  }
  if (!out) throw err::io("failed writing '" + path + "'");
}

inline std::vector<std::vector<double>> read_matrix(const std::string& path, std::size_t cols) {
  std::ifstream in = open_input(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_line(line, '\t');
    if (fields.size() != cols)
      throw err::parse(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) +
                       " columns, found " + std::to_string(fields.size()));
    auto& row = rows.emplace_back();
    row.reserve(cols);
    for (const auto& f : fields) row.push_back(parse_double(f, path, lineno));
  }
  return rows;
}

}  // namespace detail

/// Current model bundle layout version; load_model refuses other versions.
inline constexpr int kModelFormatVersion = 1;

/**
 * @brief Persists a fitted model as a directory bundle.
 *
 * Layout: metadata.json (scalars, eigenvalues, FVE, bandwidths, seed),
 * grid.txt (dfpca-grid v1), mean.tsv (one value per node), eigenfunctions.tsv
 * (one row per node, one column per component), scores.tsv (sample_id plus
 * one score column per component).
 */
inline void save_model(const FpcaModel& model, const std::string& dir) {
  model.validate();
  std::filesystem::create_directories(dir);
  const auto file = [&dir](const char* name) { return (std::filesystem::path(dir) / name).string(); };

  write_grid(file("grid.txt"), model.grid());
  detail::write_value_column(file("mean.tsv"), model.mean.values);

  const std::size_t L = model.n_components();
  const auto g = static_cast<std::size_t>(model.grid().size());
  std::vector<std::vector<double>> phi_rows(g, std::vector<double>(L));
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t f = 0; f < g; ++f) phi_rows[f][l] = model.eig.eigenfunctions[l][f];
  detail::write_matrix(file("eigenfunctions.tsv"), phi_rows);

  {
    std::ofstream out = detail::open_output(file("scores.tsv"));
    out << "sample_id";
    for (std::size_t l = 1; l <= L; ++l) out << "\tA_" << l;
    out << '\n';
    for (std::size_t i = 0; i < model.scores.size(); ++i) {
      out << (i < model.sample_ids.size() ? model.sample_ids[i] : std::to_string(i));
      for (double a : model.scores[i]) out << '\t' << detail::format_double(a);
      out << '\n';
    }
    if (!out) throw err::io("failed writing '" + file("scores.tsv") + "'");
  }

  nlohmann::json meta;
  meta["format_version"] = kModelFormatVersion;
  meta["kind"] = "dfpca-model";
  meta["dim"] = model.grid().dim();
  meta["n_components"] = L;
  meta["n_samples"] = model.scores.size();
  meta["sigma2"] = model.sigma2;
  meta["total_variance"] = model.eig.total_variance;
  meta["eigenvalues"] = model.eig.eigenvalues;
  meta["fve"] = model.eig.fve;
  meta["fve_threshold"] = model.fve_threshold;
  meta["seed"] = model.seed;
  meta["score_method"] = score_method_name(model.score_method);
  meta["bandwidths"] = {{"mean", model.mean_bandwidth.h},
                        {"covariance", model.cov_bandwidth.h},
                        {"diag", model.diag_bandwidth.h}};
  std::ofstream out = detail::open_output(file("metadata.json"));
  out << meta.dump(2) << '\n';
  if (!out) throw err::io("failed writing '" + file("metadata.json") + "'");
}

/** @brief Loads a bundle written by save_model; checks the format version. */
inline FpcaModel load_model(const std::string& dir) {
  const auto file = [&dir](const char* name) { return (std::filesystem::path(dir) / name).string(); };

  nlohmann::json meta;
  {
    std::ifstream in = detail::open_input(file("metadata.json"));
    try {
      in >> meta;
    } catch (const std::exception& e) {
      throw err::parse(file("metadata.json") + ": " + e.what());
    }
  }
  if (!meta.contains("format_version") || !meta["format_version"].is_number_integer())
    throw err::parse(file("metadata.json") + ": missing format_version");
  if (meta["format_version"].get<int>() != kModelFormatVersion)
    throw err::version_mismatch(dir + ": bundle format_version " +
                                meta["format_version"].dump() + ", expected " +
                                std::to_string(kModelFormatVersion));

  FpcaModel model;
  try {
    model.mean.grid = read_grid(file("grid.txt"));
    model.mean.kind = SurfaceKind::Mean;
    const auto g = static_cast<std::size_t>(model.mean.grid.size());
    model.mean.values = detail::read_value_column(file("mean.tsv"), g);

    const auto L = meta.at("n_components").get<std::size_t>();
    const auto phi_rows = detail::read_matrix(file("eigenfunctions.tsv"), L);
    if (phi_rows.size() != g)
      throw err::parse(file("eigenfunctions.tsv") + ": expected one row per grid node");
    model.eig.eigenfunctions.assign(L, std::vector<double>(g));
    for (std::size_t f = 0; f < g; ++f)
      for (std::size_t l = 0; l < L; ++l) model.eig.eigenfunctions[l][f] = phi_rows[f][l];

    model.eig.eigenvalues = meta.at("eigenvalues").get<std::vector<double>>();
    model.eig.fve = meta.at("fve").get<std::vector<double>>();
    model.eig.total_variance = meta.at("total_variance").get<double>();
    if (model.eig.eigenvalues.size() != L || model.eig.fve.size() != L)
      throw err::parse(file("metadata.json") + ": eigenvalue/fve lengths disagree with n_components");

    model.sigma2 = meta.at("sigma2").get<double>();
    model.fve_threshold = meta.at("fve_threshold").get<double>();
    model.seed = meta.at("seed").get<std::uint64_t>();
    model.score_method = parse_score_method(meta.at("score_method").get<std::string>());
    model.mean_bandwidth.h = meta.at("bandwidths").at("mean").get<std::vector<double>>();
    model.cov_bandwidth.h = meta.at("bandwidths").at("covariance").get<std::vector<double>>();
    model.diag_bandwidth.h = meta.at("bandwidths").at("diag").get<std::vector<double>>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw err::parse(file("metadata.json") + ": " + e.what());
  }

  // Score table: header then one row per sample.
  {
    const std::string path = file("scores.tsv");
    std::ifstream in = detail::open_input(path);
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) throw err::parse(path + ":1: empty score table");
    ++lineno;
    const std::size_t L = model.n_components();
    while (std::getline(in, line)) {
      ++lineno;
      line = detail::strip_cr(line);
      if (line.empty()) continue;
      const auto fields = detail::split_line(line, '\t');
      if (fields.size() != L + 1)
        throw err::parse(path + ":" + std::to_string(lineno) + ": expected " +
                         std::to_string(L + 1) + " fields");
      model.sample_ids.push_back(fields[0]);
      auto& row = model.scores.emplace_back();
      for (std::size_t l = 0; l < L; ++l)
        row.push_back(detail::parse_double(fields[1 + l], path, lineno));
    }
  }

  const auto n = meta.at("n_samples").get<std::size_t>();
  if (model.scores.size() != n)
    throw err::parse(file("scores.tsv") + ": expected " + std::to_string(n) + " score rows");
  model.validate();
  return model;
}

}  // namespace dfpca
