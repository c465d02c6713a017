#pragma once

// Measurement-error-corrected balancing estimators.
//
//   ceb             argmin L(theta; O1*) - log M(theta)
//   bceb            one-shot inversion of the naive bias formula
//   ceb_hl, ceb_hw  roots of replicate-based estimating functions
//   corrected_cbps  conditional score + corrected balancing moments, GMM
//
// All of them weight controls by a softmax of theta' Z* (replicate-averaged
// for ceb_hl / ceb_hw).

#include <Eigen/Dense>

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mebal/balancing.hpp"
#include "mebal/dataset.hpp"
#include "mebal/error.hpp"
#include "mebal/error_model.hpp"
#include "mebal/solver.hpp"

namespace mebal {

enum class Method { eb, cbps, ceb, bceb, ceb_hl, ceb_hw, corrected_cbps };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::eb: return "eb";
    case Method::cbps: return "cbps";
    case Method::ceb: return "ceb";
    case Method::bceb: return "bceb";
    case Method::ceb_hl: return "ceb_hl";
    case Method::ceb_hw: return "ceb_hw";
    case Method::corrected_cbps: return "corrected_cbps";
  }
  return "eb";
}

inline Method parse_method(std::string_view name) {
  for (Method m : {Method::eb, Method::cbps, Method::ceb, Method::bceb, Method::ceb_hl,
                   Method::ceb_hw, Method::corrected_cbps})
    if (to_string(m) == name) return m;
  fail(ErrorCode::ConfigError, "unknown method '" + std::string(name) + "'");
}

inline bool needs_error_model(Method m) {
  return m == Method::ceb || m == Method::bceb || m == Method::corrected_cbps;
}
inline bool needs_replicates(Method m) { return m == Method::ceb_hl || m == Method::ceb_hw; }

struct CorrectionSpec {
  Method method = Method::ceb;
  std::optional<ErrorModel> error_model;
  // Estimate sigma1 from the replicates of whatever dataset is being fitted
  // (re-estimated inside every bootstrap resample).
  bool estimate_sigma = false;
  ErrorFamily estimated_family = ErrorFamily::normal;
  ReplicatePolicy replicate_policy = ReplicatePolicy::first;
  CbpsVariant cbps_variant = CbpsVariant::over_identified;
  SolverConfig solver;
};

inline ErrorModel resolve_error_model(const Dataset& data, const CorrectionSpec& spec) {
  if (spec.error_model) {
    if (spec.error_model->p1() != data.p1())
      fail(ErrorCode::DimensionMismatch, "error model dimension " + std::to_string(spec.error_model->p1()) +
                                             " != number of x columns " + std::to_string(data.p1()));
    return *spec.error_model;
  }
  if (spec.estimate_sigma) {
    const Eigen::MatrixXd s = estimate_sigma(data).topLeftCorner(data.p1(), data.p1());
    return spec.estimated_family == ErrorFamily::uniform_symmetric ? ErrorModel::uniform(s)
                                                                   : ErrorModel::normal(s);
  }
  fail(ErrorCode::ConfigError, std::string("method ") + std::string(to_string(spec.method)) +
                                   " needs an error model (sigma1 or estimate_from_replicates)");
}

// ---------------------------------------------------------------------------
// CEB

// L(theta; O1*) - log M(theta) with gradient and Hessian.
inline Objective ceb_objective(const Eigen::VectorXd& theta, const BalanceProblem& prob,
                               const ErrorModel& model) {
  Objective o = eb_dual_objective(theta, prob);
  const MgfValue lm = log_mgf(model, theta);
  o.value -= lm.value;
  o.grad -= lm.grad;
  o.hess -= lm.hess;
  return o;
}

namespace detail {

// Deterministic start list: `anchors` first, then `count` Gaussian
// perturbations alternating between the anchors.
inline std::vector<Eigen::VectorXd> start_points(const std::vector<Eigen::VectorXd>& anchors,
                                                 const SolverConfig& cfg) {
  std::vector<Eigen::VectorXd> starts = anchors;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int k = 0; k < cfg.multi_start; ++k) {
    Eigen::VectorXd s = anchors[static_cast<std::size_t>(k) % anchors.size()];
    for (Eigen::Index j = 0; j < s.size(); ++j) s(j) += cfg.restart_scale * normal(rng);
    starts.push_back(std::move(s));
  }
  return starts;
}

}  // namespace detail

inline BalanceFit solve_ceb(const Eigen::MatrixXd& z, const Dataset& data, const ErrorModel& model,
                            const SolverConfig& cfg, std::string method = "ceb") {
  const BalanceProblem prob = make_problem(z, data);
  if (model.p1() > z.cols()) fail(ErrorCode::DimensionMismatch, "error model larger than covariates");
  // Naive fit first: with Sigma = 0 it is already the answer.
  std::vector<Eigen::VectorXd> anchors;
  try {
    anchors.push_back(solve_eb(prob, cfg).theta);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotConverged) throw;
  }
  anchors.push_back(Eigen::VectorXd::Zero(z.cols()));
  auto objective = [&](const Eigen::VectorXd& t) { return ceb_objective(t, prob, model); };
  std::optional<SolveResult> best;
  std::string last_message = "no start converged";
  for (auto& start : detail::start_points(anchors, cfg)) {
    SolveResult r = minimize_newton(objective, std::move(start), cfg);
    if (!r.converged) {
      last_message = r.message;
      continue;
    }
    // values within roundoff tie; the earlier start wins
    if (!best || r.value < best->value - 1e-12 * (1.0 + std::abs(best->value))) best = std::move(r);
  }
  if (!best)
    fail(ErrorCode::NotConverged, "CEB: no multi-start branch reached a stationary point (" +
                                      last_message + ")");
  BalanceFit fit = make_fit(prob, std::move(best->x), std::move(method));
  fit.converged = true;
  fit.grad_norm = best->grad_norm;
  fit.iterations = best->iterations;
  fit.objective = best->value;
  fit.warnings = hull_warnings(prob);
  return fit;
}

inline BalanceFit solve_ceb(const Dataset& data, const CorrectionSpec& spec) {
  const ErrorModel model = resolve_error_model(data, spec);
  return solve_ceb(data.covariates(spec.replicate_policy), data, model, spec.solver);
}

// ---------------------------------------------------------------------------
// BCEB

// theta_c = (H* - Sigma)^{-1} H* theta*, H* the naive dual Hessian at theta*.
inline Eigen::VectorXd bceb_correction(const Eigen::VectorXd& theta_star, const Eigen::MatrixXd& hess_star,
                                       const Eigen::MatrixXd& sigma) {
  const Eigen::MatrixXd a = hess_star - sigma;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double smin = svd.singularValues().minCoeff();
  if (!(smin >= kSingularTol))
    fail(ErrorCode::SingularCorrection,
         "corrected Hessian has smallest singular value " + std::to_string(smin));
  return svd.solve(hess_star * theta_star);
}

inline BalanceFit solve_bceb(const Eigen::MatrixXd& z, const Dataset& data, const ErrorModel& model,
                             const SolverConfig& cfg) {
  const BalanceProblem prob = make_problem(z, data);
  const BalanceFit naive = solve_eb(prob, cfg);
  const Objective at_star = eb_dual_objective(naive.theta, prob);
  Eigen::VectorXd theta = bceb_correction(naive.theta, at_star.hess, model.sigma_full(z.cols()));
  BalanceFit fit = make_fit(prob, std::move(theta), "bceb");
  fit.converged = naive.converged;
  fit.grad_norm = naive.grad_norm;
  fit.iterations = naive.iterations;
  fit.objective = eb_dual_objective(fit.theta, prob).value;
  fit.warnings = naive.warnings;
  return fit;
}

inline BalanceFit solve_bceb(const Dataset& data, const CorrectionSpec& spec) {
  const ErrorModel model = resolve_error_model(data, spec);
  return solve_bceb(data.covariates(spec.replicate_policy), data, model, spec.solver);
}

// ---------------------------------------------------------------------------
// Replicate-based estimating functions

namespace detail {

inline double max_replicate_score(const Dataset& data, const std::vector<std::size_t>& rows,
                                  const Eigen::VectorXd& theta) {
  double best = -std::numeric_limits<double>::infinity();
  const Eigen::VectorXd tx = theta.head(data.p1());
  const Eigen::VectorXd tu = theta.tail(data.p2());
  for (std::size_t i : rows) {
    const double su = data.u().row(static_cast<Eigen::Index>(i)).dot(tu);
    best = std::max(best, (data.replicates(i) * tx).maxCoeff() + su);
  }
  return best;
}

// exp(theta' Z*_ij - shift) for every replicate of subject i.
inline Eigen::VectorXd replicate_exp(const Dataset& data, std::size_t i, const Eigen::VectorXd& theta,
                                     double shift) {
  const double su = data.u().row(static_cast<Eigen::Index>(i)).dot(theta.tail(data.p2()));
  Eigen::VectorXd s = data.replicates(i) * theta.head(data.p1());
  return (s.array() + (su - shift)).exp();
}

}  // namespace detail

// Symmetric-error estimating function; exp(theta' Z*) averaged over each
// control's replicates, minus eta1/eta0, minus the replicate-pooled treated mean.
inline Eigen::VectorXd b_hl(const Eigen::VectorXd& theta, const Dataset& data) {
  if (theta.size() != data.p()) fail(ErrorCode::DimensionMismatch, "theta must have length p");
  const EtaHat eta = eta0_hat(theta, data);
  const Eigen::Index p1 = data.p1();
  const double shift = detail::max_replicate_score(data, data.control_rows(), theta);
  double r0 = 0.0;
  Eigen::VectorXd r1 = Eigen::VectorXd::Zero(data.p());
  for (std::size_t i : data.control_rows()) {
    const Eigen::VectorXd e = detail::replicate_exp(data, i, theta, shift);
    const double inv_m = 1.0 / static_cast<double>(e.size());
    r0 += inv_m * e.sum();
    r1.head(p1) += inv_m * data.replicates(i).transpose() * e;
    r1.tail(data.p2()) += inv_m * e.sum() * data.u().row(static_cast<Eigen::Index>(i)).transpose();
  }
  Eigen::VectorXd treated = Eigen::VectorXd::Zero(data.p());
  double count = 0.0;
  for (std::size_t i : data.treated_rows()) {
    const auto& reps = data.replicates(i);
    treated.head(p1) += reps.colwise().sum().transpose();
    treated.tail(data.p2()) += static_cast<double>(reps.rows()) * data.u().row(static_cast<Eigen::Index>(i)).transpose();
    count += static_cast<double>(reps.rows());
  }
  return r1 / r0 - eta.ratio - treated / count;
}

// Distribution-free estimating function built from cross-replicate products;
// only controls with m_i >= 2 enter the ratio.
inline Eigen::VectorXd b_hw(const Eigen::VectorXd& theta, const Dataset& data) {
  if (theta.size() != data.p()) fail(ErrorCode::DimensionMismatch, "theta must have length p");
  const Eigen::Index p1 = data.p1();
  std::vector<std::size_t> rows;
  for (std::size_t i : data.control_rows())
    if (data.m(i) >= 2) rows.push_back(i);
  if (rows.empty()) fail(ErrorCode::NoReplicates, "no control subject has m_i >= 2");
  const double shift = detail::max_replicate_score(data, rows, theta);
  double den = 0.0;
  Eigen::VectorXd num = Eigen::VectorXd::Zero(data.p());
  for (std::size_t i : rows) {
    const auto& reps = data.replicates(i);
    const Eigen::VectorXd e = detail::replicate_exp(data, i, theta, shift);
    const double m = static_cast<double>(e.size());
    const double esum = e.sum();
    // sum_{j != k} e_j Z_k = (sum_j e_j)(sum_k Z_k) - sum_j e_j Z_j
    const Eigen::VectorXd cross_x = esum * reps.colwise().sum().transpose() - reps.transpose() * e;
    num.head(p1) += cross_x / (m * (m - 1.0));
    num.tail(data.p2()) += (esum / m) * data.u().row(static_cast<Eigen::Index>(i)).transpose();
    den += esum / m;
  }
  Eigen::VectorXd treated = Eigen::VectorXd::Zero(data.p());
  for (std::size_t i : data.treated_rows()) {
    treated.head(p1) += data.replicates(i).colwise().mean().transpose();
    treated.tail(data.p2()) += data.u().row(static_cast<Eigen::Index>(i)).transpose();
  }
  return num / den - treated / static_cast<double>(data.n_treated());
}

// Control weights proportional to m_i^{-1} sum_j exp(theta' Z*_ij).
inline WeightVector replicate_weights(const Eigen::VectorXd& theta, const Dataset& data) {
  const double shift = detail::max_replicate_score(data, data.control_rows(), theta);
  Eigen::VectorXd w(static_cast<Eigen::Index>(data.n_control()));
  for (std::size_t k = 0; k < data.n_control(); ++k) {
    const Eigen::VectorXd e = detail::replicate_exp(data, data.control_rows()[k], theta, shift);
    w(static_cast<Eigen::Index>(k)) = e.mean();
  }
  return WeightVector(data.control_rows(), w / w.sum());
}

inline BalanceFit solve_replicated(const Dataset& data, Method method, const SolverConfig& cfg) {
  if (!needs_replicates(method))
    fail(ErrorCode::InvalidArgument, "solve_replicated handles ceb_hl and ceb_hw only");
  auto fn = [&](const Eigen::VectorXd& t) -> Eigen::VectorXd {
    return method == Method::ceb_hl ? b_hl(t, data) : b_hw(t, data);
  };
  // Surface NoReplicates before any solving.
  fn(Eigen::VectorXd::Zero(data.p()));

  std::vector<Eigen::VectorXd> anchors;
  try {
    anchors.push_back(solve_eb(data.covariates(ReplicatePolicy::mean), data, cfg).theta);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotConverged) throw;
  }
  anchors.push_back(Eigen::VectorXd::Zero(data.p()));
  SolveResult best;
  best.grad_norm = std::numeric_limits<double>::infinity();
  for (auto& start : detail::start_points(anchors, cfg)) {
    SolveResult r = find_root(fn, std::move(start), cfg);
    if (r.converged) {
      best = std::move(r);
      break;
    }
    if (r.grad_norm < best.grad_norm) best = std::move(r);
  }
  if (!best.converged)
    fail(ErrorCode::NotConverged, std::string(to_string(method)) + ": best residual |B|_inf = " +
                                      std::to_string(best.grad_norm) + " (" + best.message + ")");
  BalanceFit fit;
  fit.weights = replicate_weights(best.x, data);
  fit.theta = std::move(best.x);
  fit.method = std::string(to_string(method));
  fit.converged = true;
  fit.grad_norm = best.grad_norm;
  fit.iterations = best.iterations;
  fit.objective = best.value;
  return fit;
}

inline BalanceFit solve_replicated(const Dataset& data, const CorrectionSpec& spec) {
  return solve_replicated(data, spec.method, spec.solver);
}

// ---------------------------------------------------------------------------
// Corrected CBPS (normal errors)

// Conditional score and corrected balancing moments on intercept-augmented
// covariates.  Per observation, with d_i = z_i + T_i S theta the sufficient
// statistic for the true covariates:
//   score   (T_i - expit(theta' z_i + (T_i - 0.5) theta_x' S1 theta_x)) d_i
//   balance (n / n1) [(1 - T_i)(z_i - S theta) exp(theta' z_i - 0.5 theta_x' S1 theta_x) - T_i z_i]
// Multiplying the score by z_i instead of d_i leaves a bias of
// p_i (1 - p_i) S theta per subject, so the root would not be consistent.
class CorrectedCbpsMoments {
 public:
  CorrectedCbpsMoments(Eigen::MatrixXd z_aug, std::vector<int> treat, const ErrorModel& model)
      : z_(std::move(z_aug)), treat_(std::move(treat)), sigma_(model.sigma_full(z_.cols())) {
    for (int t : treat_) n1_ += t;
  }

  Eigen::Index dim() const { return z_.cols(); }

  MomentEval operator()(const Eigen::VectorXd& theta, bool with_obs = false) const {
    const Eigen::Index n = z_.rows(), q = z_.cols();
    const double scale = static_cast<double>(n) / static_cast<double>(n1_);
    const Eigen::VectorXd s_theta = sigma_ * theta;
    const double quad = theta.dot(s_theta);
    MomentEval ev;
    ev.mean = Eigen::VectorXd::Zero(2 * q);
    ev.jacobian = Eigen::MatrixXd::Zero(2 * q, q);
    if (with_obs) ev.per_obs.resize(n, 2 * q);
    const Eigen::VectorXd eta = z_ * theta;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto zi = z_.row(i).transpose();
      const double t = treat_[static_cast<std::size_t>(i)];
      const double a = eta(i) + (t - 0.5) * quad;
      const double pi = expit(a);
      Eigen::VectorXd gi(2 * q);
      const Eigen::VectorXd delta = zi + t * s_theta;
      gi.head(q) = (t - pi) * delta;
      const Eigen::VectorXd da = zi + (2.0 * (t - 0.5)) * s_theta;
      ev.jacobian.topRows(q).noalias() -= pi * (1.0 - pi) * delta * da.transpose();
      if (t == 1.0) ev.jacobian.topRows(q) += (1.0 - pi) * sigma_;
      if (t == 0.0) {
        const double ex = eta(i) - 0.5 * quad;
        if (std::abs(ex) > kMaxExponent)
          fail(ErrorCode::NonFiniteExp, "corrected balancing exponent out of range");
        const double e = std::exp(ex);
        const Eigen::VectorXd c = zi - s_theta;
        gi.tail(q) = scale * e * c;
        ev.jacobian.bottomRows(q).noalias() += scale * e * (c * c.transpose() - sigma_);
      } else {
        gi.tail(q) = -scale * zi;
      }
      ev.mean += gi;
      if (with_obs) ev.per_obs.row(i) = gi.transpose();
    }
    ev.mean /= static_cast<double>(n);
    ev.jacobian /= static_cast<double>(n);
    return ev;
  }

 private:
  Eigen::MatrixXd z_;
  std::vector<int> treat_;
  Eigen::MatrixXd sigma_;
  int n1_ = 0;
};

// sum_i [T_i - expit(theta' z_i + (T_i - 0.5) theta_x' S1 theta_x)] (z_i + T_i S theta)
inline Eigen::VectorXd conditional_score(const Eigen::VectorXd& theta, const Eigen::MatrixXd& z_aug,
                                         const Dataset& data, const ErrorModel& model) {
  const MomentEval ev = CorrectedCbpsMoments(z_aug, data.treat(), model)(theta);
  return ev.mean.head(z_aug.cols()) * static_cast<double>(data.n());
}

// d conditional_score / d theta.
inline Eigen::MatrixXd conditional_score_jacobian(const Eigen::VectorXd& theta, const Eigen::MatrixXd& z_aug,
                                                  const Dataset& data, const ErrorModel& model) {
  const MomentEval ev = CorrectedCbpsMoments(z_aug, data.treat(), model)(theta);
  return ev.jacobian.topRows(z_aug.cols()) * static_cast<double>(data.n());
}

// n1^{-1} sum_{T=0} (z_i - S theta) exp(theta' z_i - 0.5 theta_x' S1 theta_x) - zbar*_trt
inline Eigen::VectorXd c_hw_moments(const Eigen::VectorXd& theta, const Eigen::MatrixXd& z_aug,
                                    const Dataset& data, const ErrorModel& model) {
  const MomentEval ev = CorrectedCbpsMoments(z_aug, data.treat(), model)(theta);
  return ev.mean.tail(z_aug.cols());
}

inline BalanceFit solve_corrected_cbps(const Eigen::MatrixXd& z, const Dataset& data,
                                       const ErrorModel& model, const SolverConfig& cfg,
                                       CbpsVariant variant = CbpsVariant::over_identified) {
  if (model.family() != ErrorFamily::normal)
    fail(ErrorCode::ConfigError, "corrected CBPS assumes normal measurement error");
  const Eigen::MatrixXd z_aug = with_intercept(z, data);
  CorrectedCbpsMoments sys(z_aug, data.treat(), model);
  GmmResult gmm = solve_gmm(sys, Eigen::VectorXd::Zero(z_aug.cols()), cfg, variant);
  BalanceFit fit = make_fit(make_problem(z_aug, data), std::move(gmm.theta), "corrected_cbps");
  fit.converged = true;
  fit.grad_norm = gmm.grad_norm;
  fit.iterations = gmm.iterations;
  fit.objective = gmm.objective;
  fit.warnings = std::move(gmm.warnings);
  return fit;
}

inline BalanceFit solve_corrected_cbps(const Dataset& data, const CorrectionSpec& spec) {
  const ErrorModel model = resolve_error_model(data, spec);
  return solve_corrected_cbps(data.covariates(spec.replicate_policy), data, model, spec.solver,
                              spec.cbps_variant);
}

// ---------------------------------------------------------------------------

// Runs the estimator named by `spec.method` on `data`.
inline BalanceFit estimate(const Dataset& data, const CorrectionSpec& spec) {
  switch (spec.method) {
    case Method::eb:
      return solve_eb(data, spec.solver, spec.replicate_policy);
    case Method::cbps:
      return solve_cbps(data, spec.solver, spec.replicate_policy, spec.cbps_variant);
    case Method::ceb:
      return solve_ceb(data, spec);
    case Method::bceb:
      return solve_bceb(data, spec);
    case Method::ceb_hl:
    case Method::ceb_hw:
      return solve_replicated(data, spec);
    case Method::corrected_cbps:
      return solve_corrected_cbps(data, spec);
  }
  fail(ErrorCode::InvalidArgument, "unknown method");
}

}  // namespace mebal
