// mebal: balancing weights and ATT estimates under covariate measurement error.
//
//   mebal estimate --input data.csv --method ceb --sigma1 0.5
//   mebal balance  --input data.csv --weights w.csv
//   mebal simulate --design bivariate --variance-grid 0,0.1,0.2 --out-prefix fig1
//
// Options may also come from a TOML file (--config) with one section per
// subcommand; flags override the file.  Exit status: 0 ok, 2 bad input or
// configuration, 3 numerical failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mebal/mebal.hpp"

namespace {

using mebal::ErrorCode;
using mebal::fail;
using mebal::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct SolverOpts {
  double grad_tol = 1e-8;
  int max_iter = 200;
  int multi_start = 5;
  std::uint64_t solver_seed = 0x5eed;

  void add(CLI::App* app) {
    app->add_option("--grad-tol", grad_tol, "Stationarity tolerance (inf-norm)")->capture_default_str();
    app->add_option("--max-iter", max_iter, "Newton iteration limit")->capture_default_str();
    app->add_option("--multi-start", multi_start, "Random restarts for non-convex objectives")
        ->capture_default_str();
    app->add_option("--solver-seed", solver_seed, "Seed for restart points")->capture_default_str();
  }
  mebal::SolverConfig config() const {
    mebal::SolverConfig c;
    c.grad_tol = grad_tol;
    c.max_iter = max_iter;
    c.multi_start = multi_start;
    c.seed = solver_seed;
    c.check();
    return c;
  }
};

// Estimator selection shared by `estimate` and `balance`.
struct MethodOpts {
  std::string method = "eb";
  std::string error_family = "normal";
  std::vector<double> sigma1;
  bool estimate_sigma = false;
  std::string replicate_policy = "first";
  std::string cbps_variant = "over_identified";
  bool no_intercept = false;
  SolverOpts solver;

  void add(CLI::App* app) {
    app->add_option("--method", method, "eb, cbps, ceb, bceb, ceb_hl, ceb_hw or corrected_cbps")
        ->capture_default_str();
    app->add_option("--error-family", error_family, "normal or uniform")->capture_default_str();
    app->add_option("--sigma1", sigma1,
                    "Error covariance of the x columns: p1 diagonal entries or p1*p1 row-major entries")
        ->delimiter(',');
    app->add_flag("--estimate-sigma", estimate_sigma, "Estimate sigma1 from replicate measurements");
    app->add_option("--replicate-policy", replicate_policy, "first, second or mean")->capture_default_str();
    app->add_option("--cbps-variant", cbps_variant, "over_identified or exact")->capture_default_str();
    app->add_flag("--no-intercept", no_intercept, "Omit the CBPS intercept column");
    solver.add(app);
  }

  mebal::CorrectionSpec spec(const mebal::Dataset& data) const {
    mebal::CorrectionSpec s;
    s.method = mebal::parse_method(method);
    s.replicate_policy = mebal::parse_replicate_policy(replicate_policy);
    s.solver = solver.config();
    if (cbps_variant == "exact") {
      s.cbps_variant = mebal::CbpsVariant::exact;
    } else if (cbps_variant != "over_identified") {
      fail(ErrorCode::ConfigError, "unknown cbps variant '" + cbps_variant + "'");
    }
    mebal::ErrorFamily family = mebal::ErrorFamily::normal;
    if (error_family == "uniform") {
      family = mebal::ErrorFamily::uniform_symmetric;
    } else if (error_family != "normal") {
      fail(ErrorCode::ConfigError, "unknown error family '" + error_family + "'");
    }
    if (!sigma1.empty() && estimate_sigma)
      fail(ErrorCode::ConfigError, "--sigma1 and --estimate-sigma are mutually exclusive");
    if (mebal::needs_replicates(s.method) && !sigma1.empty())
      fail(ErrorCode::ConfigError, "method " + method + " uses replicates; --sigma1 is not allowed");
    if (mebal::needs_error_model(s.method) && sigma1.empty() && !estimate_sigma)
      fail(ErrorCode::ConfigError, "method " + method + " needs --sigma1 or --estimate-sigma");
    if (!sigma1.empty()) {
      const auto p1 = static_cast<std::size_t>(data.p1());
      Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(data.p1(), data.p1());
      if (sigma1.size() == p1) {
        for (std::size_t j = 0; j < p1; ++j) s1(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) = sigma1[j];
      } else if (sigma1.size() == p1 * p1) {
        for (std::size_t k = 0; k < sigma1.size(); ++k)
          s1(static_cast<Eigen::Index>(k / p1), static_cast<Eigen::Index>(k % p1)) = sigma1[k];
      } else {
        fail(ErrorCode::DimensionMismatch, "--sigma1 has " + std::to_string(sigma1.size()) +
                                               " entries; expected " + std::to_string(p1) + " or " +
                                               std::to_string(p1 * p1));
      }
      s.error_model = family == mebal::ErrorFamily::uniform_symmetric ? mebal::ErrorModel::uniform(s1)
                                                                       : mebal::ErrorModel::normal(s1);
    }
    s.estimate_sigma = estimate_sigma;
    s.estimated_family = family;
    return s;
  }
};

json data_summary(const mebal::LoadedData& d) {
  return json{{"n", d.data.n()},
              {"n_treated", d.data.n_treated()},
              {"n_control", d.data.n_control()},
              {"p1", d.data.p1()},
              {"p2", d.data.p2()},
              {"x_columns", d.x_names},
              {"u_columns", d.u_names},
              {"replicate_dof", d.data.replicate_dof()}};
}

void emit(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) fail(ErrorCode::ConfigError, "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::ConfigError, "cannot write '" + path + "'");
  return out;
}

json error_model_json(const mebal::CorrectionSpec& spec, const mebal::Dataset& data) {
  if (!mebal::needs_error_model(spec.method)) return nullptr;
  return mebal::to_json(mebal::resolve_error_model(data, spec));
}

// ---------------------------------------------------------------------------

struct EstimateCmd {
  std::string input;
  std::string output;
  std::string weights_out;
  int bootstrap_b = 0;
  std::uint64_t seed = 1;
  int threads = 1;
  MethodOpts opts;

  void add(CLI::App* app) {
    app->add_option("--input", input, "Long-format CSV (id, treat, outcome, rep, x_*, u_*)")->required();
    app->add_option("--output", output, "JSON result path (default stdout)");
    app->add_option("--weights-out", weights_out, "Write control weights as id,weight CSV");
    app->add_option("--bootstrap", bootstrap_b, "Bootstrap resamples for SE and percentile CI (0 = off)")
        ->capture_default_str();
    app->add_option("--seed", seed, "Bootstrap seed")->capture_default_str();
    app->add_option("--threads", threads, "Worker threads for the bootstrap")->envname("THREADS")->capture_default_str();
    opts.add(app);
  }

  int run(const std::string& echo) const {
    const mebal::LoadedData loaded = mebal::load_dataset(input, !opts.no_intercept);
    const mebal::Dataset& data = loaded.data;
    if (!data.has_outcome()) fail(ErrorCode::MissingOutcome, "estimate needs an outcome column");
    if (bootstrap_b < 0 || bootstrap_b == 1) fail(ErrorCode::ConfigError, "--bootstrap must be 0 or >= 2");
    if (threads < 1) fail(ErrorCode::ConfigError, "--threads must be >= 1");
    const mebal::CorrectionSpec spec = opts.spec(data);
    const json model = error_model_json(spec, data);

    const mebal::BalanceFit fit = mebal::estimate(data, spec);
    mebal::AttResult att = bootstrap_b >= 2 ? mebal::bootstrap(data, spec, bootstrap_b, seed, threads)
                                            : mebal::att_result(fit, data);
    att.method = fit.method;
    const mebal::ImbalanceReport imb =
        mebal::imbalance(fit.weights, data.covariates(spec.replicate_policy), data,
                         mebal::ImbalanceBasis::observed_covariates, fit.method);
    if (!weights_out.empty()) {
      auto out = open_out(weights_out);
      mebal::write_weights(out, data, fit.weights);
    }
    emit(json{{"schema", "mebal/estimate/1"},
              {"command", "estimate"},
              {"config", echo},
              {"data", data_summary(loaded)},
              {"error_model", model},
              {"fit", mebal::to_json(fit)},
              {"att", mebal::to_json(att)},
              {"imbalance", mebal::to_json(imb)}},
         output);
    return kExitOk;
  }
};

struct BalanceCmd {
  std::string input;
  std::string output;
  std::string weights;
  MethodOpts opts;

  void add(CLI::App* app) {
    app->add_option("--input", input, "Long-format CSV")->required();
    app->add_option("--output", output, "JSON result path (default stdout)");
    app->add_option("--weights", weights, "Audit these id,weight control weights instead of fitting");
    opts.add(app);
  }

  int run(const std::string& echo) const {
    const mebal::LoadedData loaded = mebal::load_dataset(input, !opts.no_intercept);
    const mebal::Dataset& data = loaded.data;
    const auto policy = mebal::parse_replicate_policy(opts.replicate_policy);
    std::optional<mebal::WeightVector> w;
    std::string source;
    json fit = nullptr;
    if (!weights.empty()) {
      std::ifstream in(weights);
      if (!in) fail(ErrorCode::ParseError, "cannot open '" + weights + "'");
      w = mebal::read_weights(in, data);
      source = "file:" + weights;
    } else {
      const mebal::BalanceFit f = mebal::estimate(data, opts.spec(data));
      w = f.weights;
      source = f.method;
      fit = mebal::to_json(f);
    }
    const mebal::ImbalanceReport imb = mebal::imbalance(*w, data.covariates(policy), data,
                                                        mebal::ImbalanceBasis::observed_covariates, source);
    emit(json{{"schema", "mebal/balance/1"},
              {"command", "balance"},
              {"config", echo},
              {"data", data_summary(loaded)},
              {"fit", fit},
              {"imbalance", mebal::to_json(imb)}},
         output);
    return kExitOk;
  }
};

struct SimulateCmd {
  std::string design = "bivariate";
  std::size_t n = 2000;
  std::vector<double> n_grid;
  std::string error_family = "normal";
  double error_variance = 0.0;
  std::vector<double> variance_grid;
  int m = 1;
  int reps = 200;
  std::uint64_t seed = 20240901;
  std::vector<std::string> methods{"eb"};
  std::string replicate_policy = "first";
  double covariate_mean = mebal::kFourCovMean;
  int threads = 1;
  std::string out_prefix;
  SolverOpts solver;

  void add(CLI::App* app) {
    app->add_option("--design", design, "bivariate or four_covariate")->capture_default_str();
    app->add_option("--n", n, "Sample size")->capture_default_str();
    app->add_option("--n-grid", n_grid, "Sweep over sample sizes")->delimiter(',');
    app->add_option("--error-family", error_family, "none, normal, uniform, modified_beta or scaled_t")
        ->capture_default_str();
    app->add_option("--error-variance", error_variance, "Measurement error variance")->capture_default_str();
    app->add_option("--variance-grid", variance_grid, "Sweep over error variances")->delimiter(',');
    app->add_option("--m", m, "Replicates per subject")->capture_default_str();
    app->add_option("--reps", reps, "Monte Carlo repetitions")->capture_default_str();
    app->add_option("--seed", seed, "Base seed")->capture_default_str();
    app->add_option("--methods", methods, "Estimators; append _true to fit on error-free covariates")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--replicate-policy", replicate_policy, "first, second or mean")->capture_default_str();
    app->add_option("--covariate-mean", covariate_mean, "Common covariate mean (four_covariate design)")
        ->capture_default_str();
    app->add_option("--threads", threads, "Worker threads")->envname("THREADS")->capture_default_str();
    app->add_option("--out-prefix", out_prefix, "Writes PREFIX.table.csv, PREFIX.table.json, PREFIX.plot.csv")
        ->required();
    solver.add(app);
  }

  int run(const std::string& echo) const {
    mebal::ScenarioSpec spec;
    spec.design = mebal::parse_design(design);
    spec.n = n;
    spec.error_family = mebal::parse_error_dist(error_family);
    spec.error_variance = error_variance;
    spec.m = m;
    spec.reps = reps;
    spec.seed = seed;
    spec.methods.clear();
    for (const auto& label : methods) spec.methods.push_back(mebal::SimMethod::parse(label));
    spec.replicate_policy = mebal::parse_replicate_policy(replicate_policy);
    spec.covariate_mean = covariate_mean;
    spec.threads = threads;
    spec.solver = solver.config();
    if (!n_grid.empty() && !variance_grid.empty())
      fail(ErrorCode::ConfigError, "--n-grid and --variance-grid are mutually exclusive");
    spec.check();

    mebal::SweepResult sweep;
    if (!variance_grid.empty()) {
      sweep = mebal::run_sweep(spec, mebal::SweepAxis::error_variance, variance_grid);
    } else if (!n_grid.empty()) {
      sweep = mebal::run_sweep(spec, mebal::SweepAxis::n, n_grid);
    } else {
      sweep = mebal::run_sweep(spec, mebal::SweepAxis::error_variance, {spec.error_variance});
    }

    {
      auto out = open_out(out_prefix + ".table.csv");
      mebal::write_table_csv(out, sweep.tables);
    }
    {
      auto out = open_out(out_prefix + ".plot.csv");
      mebal::write_plot_csv(out, sweep.plot);
    }
    json tables = json::array();
    for (const auto& t : sweep.tables) tables.push_back(mebal::to_json(t));
    json j{{"schema", "mebal/simulate/1"},
           {"command", "simulate"},
           {"config", echo},
           {"sweep_axis", sweep.axis == mebal::SweepAxis::n ? "n" : "error_variance"},
           {"sweep_values", sweep.values},
           {"tables", tables}};
    auto out = open_out(out_prefix + ".table.json");
    out << j.dump(2) << '\n';
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Covariate balancing with measurement-error corrections"};
  app.set_config("--config", "", "TOML file with [estimate], [balance] or [simulate] sections");
  app.require_subcommand(1);

  EstimateCmd estimate;
  BalanceCmd balance;
  SimulateCmd simulate;
  CLI::App* est = app.add_subcommand("estimate", "Fit weights and estimate the ATT");
  CLI::App* bal = app.add_subcommand("balance", "Report ASMD / MD for fitted or supplied weights");
  CLI::App* sim = app.add_subcommand("simulate", "Run the Monte Carlo designs");
  estimate.add(est);
  balance.add(bal);
  simulate.add(sim);
  for (CLI::App* sub : {est, bal, sim}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  // The echo is itself a valid --config file for re-running the command.
  // Empty values are left out: CLI11 would read `grid=""` back as one element.
  auto echo = [](CLI::App* sub) {
    std::istringstream lines(sub->config_to_str(true, false));
    std::string out = "[" + sub->get_name() + "]\n", line;
    while (std::getline(lines, line))
      if (!line.ends_with("=\"\"")) out += line + '\n';
    return out;
  };
  try {
    if (est->parsed()) return estimate.run(echo(est));
    if (bal->parsed()) return balance.run(echo(bal));
    return simulate.run(echo(sim));
  } catch (const mebal::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return mebal::is_numerical(e.code()) ? kExitNumerical : kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}
