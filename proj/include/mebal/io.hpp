#pragma once

// CSV ingestion (long format, one row per replicate), weight files, and
// JSON / CSV result emitters.

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mebal/correction.hpp"
#include "mebal/dataset.hpp"
#include "mebal/diagnostics.hpp"
#include "mebal/error.hpp"
#include "mebal/simulation.hpp"

namespace mebal {

namespace io_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& what, std::size_t line) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (s.empty() || ec != std::errc() || ptr != last)
    fail(ErrorCode::ParseError, "line " + std::to_string(line) + ": cannot parse " + what + " '" + s + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Data CSV

struct CsvTable {
  std::vector<std::string> x_names;
  std::vector<std::string> u_names;
  bool has_outcome = false;
  std::vector<RawRecord> records;
};

// Columns: id, treat, [outcome], [rep], x_* ..., u_* ...  (any order).
inline CsvTable parse_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) fail(ErrorCode::ParseError, "empty input");
  ++lineno;
  const auto header = io_detail::split(line);
  CsvTable table;
  int id_col = -1, treat_col = -1, outcome_col = -1, rep_col = -1;
  std::vector<int> x_cols, u_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& h = header[c];
    const int ci = static_cast<int>(c);
    if (h == "id") id_col = ci;
    else if (h == "treat") treat_col = ci;
    else if (h == "outcome") outcome_col = ci;
    else if (h == "rep") rep_col = ci;
    else if (h.rfind("x_", 0) == 0) x_cols.push_back(ci), table.x_names.push_back(h);
    else if (h.rfind("u_", 0) == 0) u_cols.push_back(ci), table.u_names.push_back(h);
    else fail(ErrorCode::ParseError, "line 1: unknown column '" + h + "'");
  }
  if (id_col < 0) fail(ErrorCode::ParseError, "line 1: missing column 'id'");
  if (treat_col < 0) fail(ErrorCode::ParseError, "line 1: missing column 'treat'");
  table.has_outcome = outcome_col >= 0;

  while (std::getline(in, line)) {
    ++lineno;
    if (io_detail::trim(line).empty()) continue;
    const auto cells = io_detail::split(line);
    if (cells.size() != header.size())
      fail(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": expected " +
                                      std::to_string(header.size()) + " fields, found " +
                                      std::to_string(cells.size()));
    RawRecord r;
    r.line = lineno;
    r.id = cells[static_cast<std::size_t>(id_col)];
    if (r.id.empty()) fail(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": empty id");
    r.treat = io_detail::parse_double(cells[static_cast<std::size_t>(treat_col)], "treat", lineno);
    if (outcome_col >= 0) {
      const auto& cell = cells[static_cast<std::size_t>(outcome_col)];
      if (!cell.empty() && cell != "NA") r.outcome = io_detail::parse_double(cell, "outcome", lineno);
    }
    if (rep_col >= 0) {
      const double rep = io_detail::parse_double(cells[static_cast<std::size_t>(rep_col)], "rep", lineno);
      if (rep < 1.0 || rep != std::floor(rep))
        fail(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": rep must be an integer >= 1");
      r.rep = static_cast<int>(rep);
    }
    for (int c : x_cols) r.x.push_back(io_detail::parse_double(cells[static_cast<std::size_t>(c)], header[static_cast<std::size_t>(c)], lineno));
    for (int c : u_cols) r.u.push_back(io_detail::parse_double(cells[static_cast<std::size_t>(c)], header[static_cast<std::size_t>(c)], lineno));
    table.records.push_back(std::move(r));
  }
  return table;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ParseError, "cannot open '" + path + "'");
  return parse_csv(in);
}

struct LoadedData {
  Dataset data;
  std::vector<std::string> x_names;
  std::vector<std::string> u_names;
};

inline LoadedData load_dataset(const std::string& path, bool intercept = true) {
  CsvTable t = read_csv(path);
  return {validate(t.records, intercept), std::move(t.x_names), std::move(t.u_names)};
}

inline void write_csv(std::ostream& out, const Dataset& data, const std::vector<std::string>& x_names = {},
                      const std::vector<std::string>& u_names = {}) {
  auto xname = [&](Eigen::Index k) {
    return k < static_cast<Eigen::Index>(x_names.size()) ? x_names[static_cast<std::size_t>(k)]
                                                          : "x_" + std::to_string(k + 1);
  };
  auto uname = [&](Eigen::Index k) {
    return k < static_cast<Eigen::Index>(u_names.size()) ? u_names[static_cast<std::size_t>(k)]
                                                          : "u_" + std::to_string(k + 1);
  };
  out << "id,treat";
  if (data.has_outcome()) out << ",outcome";
  out << ",rep";
  for (Eigen::Index k = 0; k < data.p1(); ++k) out << ',' << xname(k);
  for (Eigen::Index k = 0; k < data.p2(); ++k) out << ',' << uname(k);
  out << '\n';
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < data.m(i); ++j) {
      out << data.ids()[i] << ',' << data.treat(i);
      if (data.has_outcome()) out << ',' << io_detail::format_double(data.outcome()(ii));
      out << ',' << (j + 1);
      for (Eigen::Index k = 0; k < data.p1(); ++k) out << ',' << io_detail::format_double(data.replicates(i)(j, k));
      for (Eigen::Index k = 0; k < data.p2(); ++k) out << ',' << io_detail::format_double(data.u()(ii, k));
      out << '\n';
    }
  }
}

inline void write_csv(const std::string& path, const Dataset& data, const std::vector<std::string>& x_names = {},
                      const std::vector<std::string>& u_names = {}) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::ConfigError, "cannot write '" + path + "'");
  write_csv(out, data, x_names, u_names);
}

// ---------------------------------------------------------------------------
// Weight files: id,weight over the control subjects.

inline void write_weights(std::ostream& out, const Dataset& data, const WeightVector& w) {
  out << "id,weight\n";
  for (std::size_t k = 0; k < w.size(); ++k)
    out << data.ids()[w.rows()[k]] << ',' << io_detail::format_double(w.values()(static_cast<Eigen::Index>(k))) << '\n';
}

inline WeightVector read_weights(std::istream& in, const Dataset& data) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) fail(ErrorCode::ParseError, "empty weight file");
  ++lineno;
  const auto header = io_detail::split(line);
  if (header.size() != 2 || header[0] != "id" || header[1] != "weight")
    fail(ErrorCode::ParseError, "line 1: weight file header must be 'id,weight'");
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < data.n(); ++i) row_of.emplace(data.ids()[i], i);
  std::map<std::size_t, double> given;
  while (std::getline(in, line)) {
    ++lineno;
    if (io_detail::trim(line).empty()) continue;
    const auto cells = io_detail::split(line);
    if (cells.size() != 2) fail(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": expected id,weight");
    const auto it = row_of.find(cells[0]);
    if (it == row_of.end())
      fail(ErrorCode::InvalidWeights, "line " + std::to_string(lineno) + ": unknown id '" + cells[0] + "'");
    if (data.is_treated(it->second))
      fail(ErrorCode::InvalidWeights, "line " + std::to_string(lineno) + ": id '" + cells[0] + "' is treated");
    if (!given.emplace(it->second, io_detail::parse_double(cells[1], "weight", lineno)).second)
      fail(ErrorCode::InvalidWeights, "line " + std::to_string(lineno) + ": duplicate id '" + cells[0] + "'");
  }
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.n_control()));
  for (std::size_t k = 0; k < data.n_control(); ++k) {
    const auto it = given.find(data.control_rows()[k]);
    if (it == given.end())
      fail(ErrorCode::InvalidWeights, "no weight for control id '" + data.ids()[data.control_rows()[k]] + "'");
    v(static_cast<Eigen::Index>(k)) = it->second;
  }
  return WeightVector(data.control_rows(), std::move(v));
}

// ---------------------------------------------------------------------------
// JSON

using json = nlohmann::ordered_json;

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number_or_null(v(i)));
  return a;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(to_json(Eigen::VectorXd(m.row(i).transpose())));
  return a;
}

inline json to_json(const BalanceFit& fit) {
  return json{{"method", fit.method},
              {"theta", to_json(fit.theta)},
              {"converged", fit.converged},
              {"grad_norm", number_or_null(fit.grad_norm)},
              {"iterations", fit.iterations},
              {"objective", number_or_null(fit.objective)},
              {"warnings", fit.warnings}};
}

inline json to_json(const ImbalanceReport& r) {
  json asmd = json::array();
  for (const auto& a : r.asmd) asmd.push_back(a ? json(*a) : json(nullptr));
  return json{{"basis", std::string(to_string(r.basis))},
              {"weights_source", r.weights_source},
              {"asmd", asmd},
              {"md", r.md ? json(*r.md) : json(nullptr)},
              {"flags", r.flags}};
}

inline json to_json(const AttResult& r) {
  json j{{"method", r.method}, {"att", r.tau}};
  j["se"] = r.se ? json(*r.se) : json(nullptr);
  j["ci_lower"] = r.ci_lower ? json(*r.ci_lower) : json(nullptr);
  j["ci_upper"] = r.ci_upper ? json(*r.ci_upper) : json(nullptr);
  j["bootstrap_b"] = r.bootstrap_b;
  j["bootstrap_failed"] = r.bootstrap_failed;
  return j;
}

inline json to_json(const ErrorModel& m) {
  return json{{"family", std::string(to_string(m.family()))}, {"sigma1", to_json(m.sigma1())}};
}

inline json to_json(const MonteCarloCell& c) {
  return json{{"method", c.method},
              {"reps_ok", c.reps_ok},
              {"reps_failed", c.reps_failed},
              {"first_error", c.first_error},
              {"att_mean", number_or_null(c.tau_mean)},
              {"bias", number_or_null(c.bias)},
              {"sd", number_or_null(c.sd)},
              {"mse", number_or_null(c.mse)},
              {"mean_abs_bias", number_or_null(c.mean_abs_bias)},
              {"theta_mean", to_json(c.theta_mean)},
              {"asmd_true_mean", to_json(c.asmd_mean)},
              {"md_true_mean", number_or_null(c.md_mean)},
              {"asmd_limit_mean", to_json(c.limit_asmd_mean)},
              {"md_limit_mean", number_or_null(c.limit_md_mean)}};
}

inline json to_json(const MonteCarloTable& t) {
  json cells = json::array();
  for (const auto& c : t.cells) cells.push_back(to_json(c));
  json meta = json::object();
  for (const auto& [k, v] : t.metadata) meta[k] = v;
  return json{{"metadata", meta}, {"cells", cells}};
}

// ---------------------------------------------------------------------------
// CSV emitters

inline void write_table_csv(std::ostream& out, const std::vector<MonteCarloTable>& tables) {
  out << "design,error_family,error_variance,n,m,reps,method,reps_ok,reps_failed,att_mean,bias,sd,mse,"
         "mean_abs_bias,theta_mean,asmd_true_mean,md_true_mean,asmd_limit_mean,md_limit_mean\n";
  auto vec = [](const Eigen::VectorXd& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ";" : "") + io_detail::format_double(v(i));
    return s;
  };
  const auto f = io_detail::format_double;
  for (const auto& t : tables) {
    for (const auto& c : t.cells) {
      out << to_string(t.spec.design) << ',' << to_string(t.spec.error_family) << ','
          << f(t.spec.variance()) << ',' << t.spec.n << ',' << t.spec.m << ',' << t.spec.reps << ','
          << c.method << ',' << c.reps_ok << ',' << c.reps_failed << ',' << f(c.tau_mean) << ','
          << f(c.bias) << ',' << f(c.sd) << ',' << f(c.mse) << ',' << f(c.mean_abs_bias) << ','
          << vec(c.theta_mean) << ',' << vec(c.asmd_mean) << ',' << f(c.md_mean) << ','
          << vec(c.limit_asmd_mean) << ',' << f(c.limit_md_mean) << '\n';
    }
  }
}

inline void write_plot_csv(std::ostream& out, const std::vector<PlotRow>& rows) {
  out << "scenario,method,x,metric,value\n";
  for (const auto& r : rows)
    out << r.scenario << ',' << r.method << ',' << io_detail::format_double(r.x) << ',' << r.metric << ','
        << io_detail::format_double(r.value) << '\n';
}

}  // namespace mebal
