#pragma once

// Monte Carlo harness for the bivariate and four-covariate designs, plus
// bootstrap inference for a single dataset.
//
// Reps are independent: each draws from its own mt19937_64 stream seeded by
// mix_seed(seed, rep), writes its results into slot `rep`, and aggregation
// walks the slots in order.  Output is therefore identical for any thread
// count.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mebal/balancing.hpp"
#include "mebal/correction.hpp"
#include "mebal/dataset.hpp"
#include "mebal/diagnostics.hpp"
#include "mebal/error.hpp"
#include "mebal/error_model.hpp"

namespace mebal {

enum class Design { bivariate, four_covariate };
enum class ErrorDist { none, normal, uniform, modified_beta, scaled_t };

inline std::string_view to_string(Design d) { return d == Design::bivariate ? "bivariate" : "four_covariate"; }

inline Design parse_design(std::string_view s) {
  if (s == "bivariate") return Design::bivariate;
  if (s == "four_covariate") return Design::four_covariate;
  fail(ErrorCode::ConfigError, "unknown design '" + std::string(s) + "'");
}

inline std::string_view to_string(ErrorDist e) {
  switch (e) {
    case ErrorDist::none: return "none";
    case ErrorDist::normal: return "normal";
    case ErrorDist::uniform: return "uniform";
    case ErrorDist::modified_beta: return "modified_beta";
    case ErrorDist::scaled_t: return "scaled_t";
  }
  return "none";
}

inline ErrorDist parse_error_dist(std::string_view s) {
  for (ErrorDist e : {ErrorDist::none, ErrorDist::normal, ErrorDist::uniform, ErrorDist::modified_beta,
                      ErrorDist::scaled_t})
    if (to_string(e) == s) return e;
  fail(ErrorCode::ConfigError, "unknown error family '" + std::string(s) + "'");
}

inline constexpr double kTrueAtt = 10.0;

// Covariate law of the four-covariate design (not pinned down by the design
// description itself): equal means, unit variances, equicorrelation.  A mean
// of 4 centres the propensity logit near zero, so both arms are sizeable.
inline constexpr double kFourCovMean = 4.0;
inline constexpr double kFourCovCorr = 0.2;

// Estimator label used by the harness: a Method, optionally fitted on the
// true (error-free) covariates as an oracle.
struct SimMethod {
  Method method = Method::eb;
  bool on_true = false;

  std::string label() const { return std::string(to_string(method)) + (on_true ? "_true" : ""); }
  static SimMethod parse(std::string_view s) {
    constexpr std::string_view suffix = "_true";
    if (s.size() > suffix.size() && s.substr(s.size() - suffix.size()) == suffix)
      return {parse_method(s.substr(0, s.size() - suffix.size())), true};
    return {parse_method(s), false};
  }
};

struct ScenarioSpec {
  Design design = Design::bivariate;
  std::size_t n = 2000;
  ErrorDist error_family = ErrorDist::normal;
  double error_variance = 0.0;
  int m = 1;
  int reps = 200;
  std::uint64_t seed = 20240901;
  std::vector<SimMethod> methods{SimMethod{}};
  ReplicatePolicy replicate_policy = ReplicatePolicy::first;
  SolverConfig solver;
  int threads = 1;
  double covariate_mean = kFourCovMean;  // four-covariate design only

  Eigen::Index p1() const { return design == Design::bivariate ? 1 : 2; }
  Eigen::Index p2() const { return design == Design::bivariate ? 1 : 2; }
  double variance() const { return error_family == ErrorDist::none ? 0.0 : error_variance; }

  void check() const {
    if (reps < 1) fail(ErrorCode::ConfigError, "reps must be >= 1");
    if (n < 4) fail(ErrorCode::ConfigError, "n must be >= 4");
    if (!(error_variance >= 0.0) || !std::isfinite(error_variance))
      fail(ErrorCode::ConfigError, "error_variance must be >= 0");
    if (m < 1) fail(ErrorCode::ConfigError, "m must be >= 1");
    if (threads < 1) fail(ErrorCode::ConfigError, "threads must be >= 1");
    if (methods.empty()) fail(ErrorCode::ConfigError, "no methods requested");
    for (const auto& sm : methods)
      if (needs_replicates(sm.method) && m < 2)
        fail(ErrorCode::ConfigError, "method " + sm.label() + " needs m >= 2 replicates");
    if (replicate_policy == ReplicatePolicy::second && m < 2)
      fail(ErrorCode::ConfigError, "replicate_policy=second needs m >= 2");
    solver.check();
  }

  // Error model handed to the parametric corrections: the true family when
  // its MGF is implemented, otherwise a normal model with the true variance.
  ErrorModel correction_model() const {
    const double v = variance();
    return ErrorModel::isotropic(error_family == ErrorDist::uniform ? ErrorFamily::uniform_symmetric
                                                                    : ErrorFamily::normal,
                                 p1(), v);
  }

  std::map<std::string, std::string> metadata() const {
    std::map<std::string, std::string> md;
    md["design"] = std::string(to_string(design));
    md["n"] = std::to_string(n);
    md["error_family"] = std::string(to_string(error_family));
    md["error_variance"] = std::to_string(variance());
    md["m"] = std::to_string(m);
    md["reps"] = std::to_string(reps);
    md["seed"] = std::to_string(seed);
    md["replicate_policy"] = std::string(to_string(replicate_policy));
    md["true_att"] = "10";
    md["sd_divisor"] = "reps-1";
    md["mse"] = "bias^2 + sd^2*(reps-1)/reps";
    md["correction_model"] = std::string(to_string(correction_model().family()));
    md["covariate_law"] =
        design == Design::bivariate
            ? "(X1,U1) ~ N((5,10), [[1,0.3],[0.3,1]])"
            : "(X1,X2,U1,U2) ~ N(" + std::to_string(covariate_mean) +
                  ", unit variances, pairwise correlation 0.2)";
    md["modified_beta"] = "Beta(3,1) centred and rescaled to the target variance";
    md["scaled_t"] = "t3 * sqrt(variance/3)";
    return md;
  }
};

// splitmix64 finaliser over (seed, rep).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// One draw of zero-mean measurement error with the requested variance.
inline double draw_error(ErrorDist family, double variance, std::mt19937_64& rng) {
  if (variance == 0.0 || family == ErrorDist::none) return 0.0;
  switch (family) {
    case ErrorDist::normal:
      return std::sqrt(variance) * std::normal_distribution<double>(0.0, 1.0)(rng);
    case ErrorDist::uniform: {
      const double a = std::sqrt(3.0 * variance);
      return std::uniform_real_distribution<double>(-a, a)(rng);
    }
    case ErrorDist::modified_beta: {
      // Beta(3,1) = V^{1/3}: mean 3/4, variance 3/80.
      const double b = std::cbrt(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
      return (b - 0.75) * std::sqrt(variance / (3.0 / 80.0));
    }
    case ErrorDist::scaled_t:
      return std::student_t_distribution<double>(3.0)(rng) * std::sqrt(variance / 3.0);
    case ErrorDist::none:
      break;
  }
  return 0.0;
}

struct SimulatedData {
  Dataset truth;     // replicates all equal to the true X
  Dataset observed;  // X*_ij = X_i + eps_ij
};

inline SimulatedData generate(const ScenarioSpec& spec, std::uint64_t rep) {
  std::mt19937_64 rng(mix_seed(spec.seed, rep));
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(spec.n);
  const Eigen::Index p1 = spec.p1(), p2 = spec.p2(), p = p1 + p2;

  Eigen::VectorXd mean(p), beta(p), alpha(p);
  Eigen::MatrixXd cov(p, p);
  double intercept = 0.0;
  if (spec.design == Design::bivariate) {
    mean << 5.0, 10.0;
    cov << 1.0, 0.3, 0.3, 1.0;
    intercept = 0.5;
    alpha << -3.0, 1.5;
    beta << 27.4, 13.7;
  } else {
    mean.setConstant(spec.covariate_mean);
    cov.setConstant(kFourCovCorr);
    cov.diagonal().setOnes();
    intercept = 3.5;
    alpha << -1.0, 0.5, -0.25, -0.1;
    beta << 27.4, 13.7, 13.7, 13.7;
  }
  const Eigen::MatrixXd chol = cov.llt().matrixL();

  Eigen::MatrixXd z(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd e(p);
    for (Eigen::Index j = 0; j < p; ++j) e(j) = std_normal(rng);
    z.row(i) = (mean + chol * e).transpose();
  }
  std::vector<int> treat(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    treat[static_cast<std::size_t>(i)] = unif(rng) < expit(intercept + z.row(i).dot(alpha)) ? 1 : 0;
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double base = z.row(i).dot(beta) + 2.0 * std_normal(rng);
    y(i) = (treat[static_cast<std::size_t>(i)] ? 220.0 : 210.0) + base;
  }

  const Eigen::MatrixXd u = z.rightCols(p2);
  std::vector<Eigen::MatrixXd> x_true(static_cast<std::size_t>(n)), x_obs(static_cast<std::size_t>(n));
  std::vector<std::string> ids(static_cast<std::size_t>(n));
  const double v = spec.variance();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    x_true[ii] = z.row(i).head(p1).replicate(spec.m, 1);
    x_obs[ii] = x_true[ii];
    for (int j = 0; j < spec.m; ++j)
      for (Eigen::Index k = 0; k < p1; ++k) x_obs[ii](j, k) += draw_error(spec.error_family, v, rng);
    ids[ii] = std::to_string(i + 1);
  }
  Dataset truth(treat, y, u, std::move(x_true), ids);
  Dataset observed(std::move(treat), std::move(y), u, std::move(x_obs), std::move(ids));
  return {std::move(truth), std::move(observed)};
}

// ---------------------------------------------------------------------------

struct RepOutcome {
  bool ok = false;
  std::string error;
  double tau = 0.0;
  Eigen::VectorXd theta;
  Eigen::VectorXd asmd_true;  // NaN where undefined
  double md_true = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd limit_asmd;  // naive EB only
  double limit_md = std::numeric_limits<double>::quiet_NaN();
};

struct MonteCarloCell {
  std::string method;
  int reps_ok = 0;
  int reps_failed = 0;
  std::string first_error;
  double tau_mean = 0.0;
  double bias = 0.0;
  double sd = 0.0;
  double mse = 0.0;
  double mean_abs_bias = 0.0;
  Eigen::VectorXd theta_mean;
  Eigen::VectorXd asmd_mean;
  double md_mean = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd limit_asmd_mean;
  double limit_md_mean = std::numeric_limits<double>::quiet_NaN();
};

struct MonteCarloTable {
  ScenarioSpec spec;
  std::vector<MonteCarloCell> cells;
  std::map<std::string, std::string> metadata;

  const MonteCarloCell& cell(std::string_view method) const {
    for (const auto& c : cells)
      if (c.method == method) return c;
    fail(ErrorCode::InvalidArgument, "no cell for method '" + std::string(method) + "'");
  }
};

inline RepOutcome run_method(const SimMethod& sm, const SimulatedData& sim, const ScenarioSpec& spec) {
  RepOutcome out;
  const Dataset& data = sm.on_true ? sim.truth : sim.observed;
  CorrectionSpec cs;
  cs.method = sm.method;
  cs.replicate_policy = spec.replicate_policy;
  cs.solver = spec.solver;
  if (needs_error_model(sm.method))
    cs.error_model = sm.on_true ? ErrorModel::isotropic(ErrorFamily::normal, spec.p1(), 0.0)
                                : spec.correction_model();
  try {
    const BalanceFit fit = estimate(data, cs);
    out.theta = fit.theta;
    out.tau = att(fit.weights, data);
    const Eigen::MatrixXd z_true = sim.truth.covariates(ReplicatePolicy::first);
    const ImbalanceReport rep = imbalance(fit.weights, z_true, sim.truth, ImbalanceBasis::true_covariates);
    out.asmd_true.resize(static_cast<Eigen::Index>(rep.asmd.size()));
    for (std::size_t j = 0; j < rep.asmd.size(); ++j)
      out.asmd_true(static_cast<Eigen::Index>(j)) =
          rep.asmd[j].value_or(std::numeric_limits<double>::quiet_NaN());
    if (rep.md) out.md_true = *rep.md;
    if (sm.method == Method::eb && !sm.on_true) {
      const TreatedMoments tm = treated_moments(z_true, sim.truth);
      const ImbalanceLimits lim = asymptotic_imbalance(fit.theta, spec.correction_model(), tm.sd, tm.cov);
      out.limit_asmd = lim.asmd;
      out.limit_md = lim.md;
    }
    out.ok = true;
  } catch (const Error& e) {
    if (!is_numerical(e.code())) throw;
    out.error = e.what();
  }
  return out;
}

namespace detail {

// Runs body(k) for k in [0, count) on `threads` workers; the first exception
// is rethrown after all workers stop.
template <class Body>
void parallel_for(std::size_t count, int threads, Body&& body) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t k = 0; k < count; ++k) body(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= count) return;
      try {
        body(k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(count);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int used = std::min<int>(threads, static_cast<int>(count));
  pool.reserve(static_cast<std::size_t>(used));
  for (int t = 0; t < used; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline double nan_mean(const std::vector<double>& xs) {
  double s = 0.0;
  int k = 0;
  for (double x : xs)
    if (std::isfinite(x)) {
      s += x;
      ++k;
    }
  return k ? s / k : std::numeric_limits<double>::quiet_NaN();
}

inline Eigen::VectorXd nan_mean_vec(const std::vector<Eigen::VectorXd>& xs) {
  if (xs.empty() || xs.front().size() == 0) return {};
  const Eigen::Index p = xs.front().size();
  Eigen::VectorXd out(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    std::vector<double> col;
    col.reserve(xs.size());
    for (const auto& x : xs) col.push_back(x(j));
    out(j) = nan_mean(col);
  }
  return out;
}

}  // namespace detail

inline MonteCarloCell aggregate(const std::string& label, const std::vector<RepOutcome>& reps) {
  MonteCarloCell c;
  c.method = label;
  std::vector<double> taus, md, lmd;
  std::vector<Eigen::VectorXd> thetas, asmd, lasmd;
  for (const auto& r : reps) {
    if (!r.ok) {
      ++c.reps_failed;
      if (c.first_error.empty()) c.first_error = r.error;
      continue;
    }
    ++c.reps_ok;
    taus.push_back(r.tau);
    thetas.push_back(r.theta);
    asmd.push_back(r.asmd_true);
    md.push_back(r.md_true);
    if (r.limit_asmd.size()) {
      lasmd.push_back(r.limit_asmd);
      lmd.push_back(r.limit_md);
    }
  }
  if (c.reps_ok == 0) fail(ErrorCode::AllRepsFailed, "every rep failed for " + label + ": " + c.first_error);
  const double k = static_cast<double>(c.reps_ok);
  double sum = 0.0, abs_sum = 0.0;
  for (double t : taus) {
    sum += t;
    abs_sum += std::abs(t - kTrueAtt);
  }
  c.tau_mean = sum / k;
  c.bias = c.tau_mean - kTrueAtt;
  c.mean_abs_bias = abs_sum / k;
  double ss = 0.0;
  for (double t : taus) ss += (t - c.tau_mean) * (t - c.tau_mean);
  c.sd = c.reps_ok > 1 ? std::sqrt(ss / (k - 1.0)) : 0.0;
  c.mse = c.bias * c.bias + c.sd * c.sd * (k - 1.0) / k;
  c.theta_mean = detail::nan_mean_vec(thetas);
  c.asmd_mean = detail::nan_mean_vec(asmd);
  c.md_mean = detail::nan_mean(md);
  c.limit_asmd_mean = detail::nan_mean_vec(lasmd);
  c.limit_md_mean = detail::nan_mean(lmd);
  return c;
}

inline MonteCarloTable run_table(const ScenarioSpec& spec) {
  spec.check();
  const auto reps = static_cast<std::size_t>(spec.reps);
  std::vector<std::vector<RepOutcome>> results(spec.methods.size(), std::vector<RepOutcome>(reps));
  detail::parallel_for(reps, spec.threads, [&](std::size_t r) {
    const SimulatedData sim = generate(spec, r);
    for (std::size_t k = 0; k < spec.methods.size(); ++k) results[k][r] = run_method(spec.methods[k], sim, spec);
  });
  MonteCarloTable table;
  table.spec = spec;
  table.metadata = spec.metadata();
  for (std::size_t k = 0; k < spec.methods.size(); ++k)
    table.cells.push_back(aggregate(spec.methods[k].label(), results[k]));
  return table;
}

// ---------------------------------------------------------------------------
// Sweeps and tidy plot data

enum class SweepAxis { error_variance, n };

struct PlotRow {
  std::string scenario;
  std::string method;
  double x = 0.0;
  std::string metric;
  double value = 0.0;
};

inline std::vector<PlotRow> plot_rows(const MonteCarloTable& t, double x) {
  const std::string scenario = std::string(to_string(t.spec.design)) + "/" +
                               std::string(to_string(t.spec.error_family));
  std::vector<PlotRow> rows;
  auto add = [&](const std::string& method, const std::string& metric, double v) {
    rows.push_back({scenario, method, x, metric, v});
  };
  for (const auto& c : t.cells) {
    add(c.method, "bias", c.bias);
    add(c.method, "abs_bias", c.mean_abs_bias);
    add(c.method, "sd", c.sd);
    add(c.method, "mse", c.mse);
    for (Eigen::Index j = 0; j < c.theta_mean.size(); ++j)
      add(c.method, "theta_" + std::to_string(j + 1), c.theta_mean(j));
    for (Eigen::Index j = 0; j < c.asmd_mean.size(); ++j)
      add(c.method, "asmd_" + std::to_string(j + 1), c.asmd_mean(j));
    add(c.method, "md", c.md_mean);
    for (Eigen::Index j = 0; j < c.limit_asmd_mean.size(); ++j)
      add(c.method, "asmd_limit_" + std::to_string(j + 1), c.limit_asmd_mean(j));
    if (c.limit_asmd_mean.size()) add(c.method, "md_limit", c.limit_md_mean);
  }
  return rows;
}

struct SweepResult {
  SweepAxis axis = SweepAxis::error_variance;
  std::vector<double> values;
  std::vector<MonteCarloTable> tables;
  std::vector<PlotRow> plot;
};

inline SweepResult run_sweep(const ScenarioSpec& base, SweepAxis axis, const std::vector<double>& values) {
  SweepResult out;
  out.axis = axis;
  out.values = values;
  for (double v : values) {
    ScenarioSpec s = base;
    if (axis == SweepAxis::error_variance) {
      s.error_variance = v;
    } else {
      if (!(v >= 1.0) || v != std::floor(v)) fail(ErrorCode::ConfigError, "sweep sizes must be positive integers");
      s.n = static_cast<std::size_t>(v);
    }
    out.tables.push_back(run_table(s));
    auto rows = plot_rows(out.tables.back(), v);
    out.plot.insert(out.plot.end(), rows.begin(), rows.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

struct AttResult {
  std::string method;
  double tau = 0.0;
  std::optional<double> se;
  std::optional<double> ci_lower;
  std::optional<double> ci_upper;
  int bootstrap_b = 0;
  int bootstrap_failed = 0;
};

inline AttResult att_result(const BalanceFit& fit, const Dataset& data) {
  AttResult r;
  r.method = fit.method;
  r.tau = att(fit.weights, data);
  return r;
}

// Type-7 (linear interpolation) sample quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) fail(ErrorCode::InvalidArgument, "quantile of empty sample");
  const double h = prob * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline constexpr int kBootstrapRedraws = 10;
inline constexpr double kBootstrapMaxFailure = 0.10;

// Arm-stratified nonparametric bootstrap of the ATT.  Resample b uses its own
// stream mix_seed(seed, b), so results do not depend on `threads`.
inline AttResult bootstrap(const Dataset& data, const CorrectionSpec& spec, int b_count, std::uint64_t seed,
                           int threads = 1) {
  if (b_count < 2) fail(ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  if (!data.has_outcome()) fail(ErrorCode::MissingOutcome, "bootstrap needs an outcome column");
  const BalanceFit full = estimate(data, spec);
  AttResult res = att_result(full, data);
  res.bootstrap_b = b_count;

  const auto& trt = data.treated_rows();
  const auto& ctl = data.control_rows();
  std::vector<double> taus(static_cast<std::size_t>(b_count), std::numeric_limits<double>::quiet_NaN());
  detail::parallel_for(static_cast<std::size_t>(b_count), threads, [&](std::size_t b) {
    std::mt19937_64 rng(mix_seed(seed, b));
    std::uniform_int_distribution<std::size_t> pick_t(0, trt.size() - 1), pick_c(0, ctl.size() - 1);
    for (int attempt = 0; attempt < kBootstrapRedraws; ++attempt) {
      std::vector<std::size_t> rows;
      rows.reserve(data.n());
      for (std::size_t k = 0; k < trt.size(); ++k) rows.push_back(trt[pick_t(rng)]);
      for (std::size_t k = 0; k < ctl.size(); ++k) rows.push_back(ctl[pick_c(rng)]);
      try {
        const Dataset boot = data.subset(rows);
        taus[b] = att(estimate(boot, spec).weights, boot);
        return;
      } catch (const Error& e) {
        if (!is_numerical(e.code())) throw;
      }
    }
  });
  std::vector<double> ok;
  for (double t : taus)
    if (std::isfinite(t)) ok.push_back(t);
  res.bootstrap_failed = b_count - static_cast<int>(ok.size());
  if (res.bootstrap_failed >= kBootstrapMaxFailure * b_count || ok.size() < 2)
    fail(ErrorCode::BootstrapUnstable, std::to_string(res.bootstrap_failed) + " of " +
                                           std::to_string(b_count) + " bootstrap resamples failed");
  double mean = 0.0;
  for (double t : ok) mean += t;
  mean /= static_cast<double>(ok.size());
  double ss = 0.0;
  for (double t : ok) ss += (t - mean) * (t - mean);
  res.se = std::sqrt(ss / static_cast<double>(ok.size() - 1));
  std::sort(ok.begin(), ok.end());
  res.ci_lower = quantile_sorted(ok, 0.025);
  res.ci_upper = quantile_sorted(ok, 0.975);
  return res;
}

}  // namespace mebal
