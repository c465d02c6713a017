#pragma once

// Entropy balancing (dual form) and the covariate balancing propensity score,
// both usable on true covariates or, naively, on mismeasured ones.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mebal/dataset.hpp"
#include "mebal/error.hpp"
#include "mebal/error_model.hpp"
#include "mebal/solver.hpp"

namespace mebal {

// Control-group covariates and the treated mean they are balanced against.
struct BalanceProblem {
  Eigen::MatrixXd control;  // n0 x p, rows in Dataset::control_rows() order
  Eigen::VectorXd treated_mean;
  std::vector<std::size_t> control_rows;
  std::size_t n1 = 0;
};

inline BalanceProblem make_problem(const Eigen::MatrixXd& z, const Dataset& data) {
  if (static_cast<std::size_t>(z.rows()) != data.n())
    fail(ErrorCode::DimensionMismatch, "covariate matrix has wrong number of rows");
  BalanceProblem prob;
  prob.control_rows = data.control_rows();
  prob.n1 = data.n_treated();
  prob.control.resize(static_cast<Eigen::Index>(prob.control_rows.size()), z.cols());
  for (std::size_t k = 0; k < prob.control_rows.size(); ++k)
    prob.control.row(static_cast<Eigen::Index>(k)) = z.row(static_cast<Eigen::Index>(prob.control_rows[k]));
  prob.treated_mean = Eigen::VectorXd::Zero(z.cols());
  for (std::size_t i : data.treated_rows()) prob.treated_mean += z.row(static_cast<Eigen::Index>(i)).transpose();
  prob.treated_mean /= static_cast<double>(prob.n1);
  return prob;
}

// Normalized exp(theta' z_i) over the rows of `control`, max-shifted.
inline Eigen::VectorXd softmax_weights(const Eigen::MatrixXd& control, const Eigen::VectorXd& theta) {
  Eigen::VectorXd s = control * theta;
  s.array() -= s.maxCoeff();
  Eigen::VectorXd w = s.array().exp();
  return w / w.sum();
}

// log sum_{T=0} exp(theta' Z_i) - theta' Zbar_trt, with gradient and Hessian.
inline Objective eb_dual_objective(const Eigen::VectorXd& theta, const BalanceProblem& prob) {
  Eigen::VectorXd s = prob.control * theta;
  const double shift = s.maxCoeff();
  s.array() -= shift;
  Eigen::VectorXd w = s.array().exp();
  const double total = w.sum();
  w /= total;
  Objective out;
  out.value = shift + std::log(total) - theta.dot(prob.treated_mean);
  const Eigen::VectorXd mean = prob.control.transpose() * w;
  out.grad = mean - prob.treated_mean;
  const Eigen::MatrixXd centered = prob.control.rowwise() - mean.transpose();
  out.hess = centered.transpose() * w.asDiagonal() * centered;
  return out;
}

inline Objective eb_dual_objective(const Eigen::VectorXd& theta, const Dataset& data,
                                   ReplicatePolicy policy = ReplicatePolicy::first) {
  return eb_dual_objective(theta, make_problem(data.covariates(policy), data));
}

// Coordinate-range check of the treated mean against the control sample.
inline std::vector<std::string> hull_warnings(const BalanceProblem& prob) {
  std::vector<std::string> out;
  for (Eigen::Index j = 0; j < prob.control.cols(); ++j) {
    const double lo = prob.control.col(j).minCoeff();
    const double hi = prob.control.col(j).maxCoeff();
    const double t = prob.treated_mean(j);
    if (t <= lo || t >= hi)
      out.push_back("InfeasibleHull: treated mean of covariate " + std::to_string(j) +
                    " lies outside the control range");
  }
  return out;
}

inline BalanceFit make_fit(const BalanceProblem& prob, Eigen::VectorXd theta, std::string method) {
  BalanceFit fit;
  fit.weights = WeightVector(prob.control_rows, softmax_weights(prob.control, theta));
  fit.theta = std::move(theta);
  fit.method = std::move(method);
  return fit;
}

inline BalanceFit solve_eb(const BalanceProblem& prob, const SolverConfig& cfg,
                           std::string method = "eb") {
  auto warnings = hull_warnings(prob);
  auto objective = [&prob](const Eigen::VectorXd& t) { return eb_dual_objective(t, prob); };
  SolveResult res = minimize_newton(objective, Eigen::VectorXd::Zero(prob.control.cols()), cfg);
  if (!res.converged) {
    std::string msg = "EB dual: " + res.message + ", |grad|_inf = " + std::to_string(res.grad_norm);
    for (const auto& w : warnings) msg += "; " + w;
    fail(ErrorCode::NotConverged, msg);
  }
  BalanceFit fit = make_fit(prob, std::move(res.x), std::move(method));
  fit.converged = true;
  fit.grad_norm = res.grad_norm;
  fit.iterations = res.iterations;
  fit.objective = res.value;
  fit.warnings = std::move(warnings);
  return fit;
}

inline BalanceFit solve_eb(const Eigen::MatrixXd& z, const Dataset& data, const SolverConfig& cfg,
                           std::string method = "eb") {
  return solve_eb(make_problem(z, data), cfg, std::move(method));
}

inline BalanceFit solve_eb(const Dataset& data, const SolverConfig& cfg,
                           ReplicatePolicy policy = ReplicatePolicy::first) {
  return solve_eb(data.covariates(policy), data, cfg);
}

// ---------------------------------------------------------------------------
// CBPS

inline double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Appends the constant column when the dataset asks for one.
inline Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& z, const Dataset& data) {
  if (!data.intercept()) return z;
  Eigen::MatrixXd out(z.rows(), z.cols() + 1);
  out.leftCols(z.cols()) = z;
  out.col(z.cols()).setOnes();
  return out;
}

// A set of stacked moment conditions: sample mean, its Jacobian and the
// per-observation contributions used for the second-step weight matrix.
struct MomentEval {
  Eigen::VectorXd mean;
  Eigen::MatrixXd jacobian;
  Eigen::MatrixXd per_obs;  // n x k, rows average to `mean`
};

// Logistic score and CBPS balancing conditions with w_i = exp(theta' z_i) / n1.
// Score block per observation is (T_i - pi_i) z_i; balancing block is
// (n / n1) [(1 - T_i) e_i z_i - T_i z_i].
class CbpsMoments {
 public:
  CbpsMoments(Eigen::MatrixXd z, std::vector<int> treat) : z_(std::move(z)), treat_(std::move(treat)) {
    for (int t : treat_) n1_ += t;
  }

  Eigen::Index dim() const { return z_.cols(); }
  Eigen::Index rows() const { return z_.rows(); }

  MomentEval operator()(const Eigen::VectorXd& theta, bool with_obs = false) const {
    const Eigen::Index n = z_.rows(), q = z_.cols();
    const double scale = static_cast<double>(n) / static_cast<double>(n1_);
    MomentEval ev;
    ev.mean = Eigen::VectorXd::Zero(2 * q);
    ev.jacobian = Eigen::MatrixXd::Zero(2 * q, q);
    if (with_obs) ev.per_obs.resize(n, 2 * q);
    const Eigen::VectorXd eta = z_ * theta;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto zi = z_.row(i).transpose();
      const double t = treat_[static_cast<std::size_t>(i)];
      const double pi = expit(eta(i));
      Eigen::VectorXd gi(2 * q);
      gi.head(q) = (t - pi) * zi;
      ev.jacobian.topRows(q).noalias() -= pi * (1.0 - pi) * zi * zi.transpose();
      if (t == 0.0) {
        if (std::abs(eta(i)) > kMaxExponent)
          fail(ErrorCode::NonFiniteExp, "CBPS weight exponent out of range");
        const double e = std::exp(eta(i));
        gi.tail(q) = scale * e * zi;
        ev.jacobian.bottomRows(q).noalias() += scale * e * zi * zi.transpose();
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
  int n1_ = 0;
};

// Unscaled stack: [sum_i (T_i - pi_i) z_i ; sum_{T=0} w_i z_i - zbar_trt].
inline Eigen::VectorXd cbps_moments(const Eigen::VectorXd& theta, const Eigen::MatrixXd& z_aug,
                                    const Dataset& data) {
  CbpsMoments sys(z_aug, data.treat());
  const MomentEval ev = sys(theta);
  const Eigen::Index q = z_aug.cols();
  Eigen::VectorXd out(2 * q);
  out.head(q) = ev.mean.head(q) * static_cast<double>(data.n());
  out.tail(q) = ev.mean.tail(q);
  return out;
}

inline Eigen::VectorXd cbps_moments(const Eigen::VectorXd& theta, const Dataset& data,
                                    ReplicatePolicy policy = ReplicatePolicy::first) {
  return cbps_moments(theta, with_intercept(data.covariates(policy), data), data);
}

// Over-identified (score + balance, two-step GMM) or just-identified
// (balance only) CBPS.
enum class CbpsVariant { over_identified, exact };

struct GmmResult {
  Eigen::VectorXd theta;
  double objective = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  Eigen::MatrixXd weight;  // weight matrix of the final step
  std::vector<std::string> warnings;
};

namespace detail {

inline Eigen::Index moment_rows(Eigen::Index q, CbpsVariant variant) {
  return variant == CbpsVariant::exact ? q : 2 * q;
}

// Restricts a moment evaluation to the balancing block when just-identified.
inline MomentEval select_block(MomentEval ev, Eigen::Index q, CbpsVariant variant) {
  if (variant == CbpsVariant::over_identified) return ev;
  MomentEval out;
  out.mean = ev.mean.tail(q);
  out.jacobian = ev.jacobian.bottomRows(q);
  if (ev.per_obs.size() > 0) out.per_obs = ev.per_obs.rightCols(q);
  return out;
}

}  // namespace detail

// Two-step GMM: identity weight, then the inverse of the per-observation
// moment outer product (ridge 1e-8 * trace / dim).
template <class System>
GmmResult solve_gmm(const System& sys, Eigen::VectorXd start, const SolverConfig& cfg,
                    CbpsVariant variant = CbpsVariant::over_identified) {
  const Eigen::Index q = sys.dim();
  const Eigen::Index k = detail::moment_rows(q, variant);
  GmmResult out;
  auto run = [&](const Eigen::MatrixXd& w, Eigen::VectorXd x0) {
    auto gradient = [&](const Eigen::VectorXd& t) -> Eigen::VectorXd {
      const MomentEval ev = detail::select_block(sys(t), q, variant);
      return 2.0 * ev.jacobian.transpose() * (w * ev.mean);
    };
    auto objective = [&](const Eigen::VectorXd& t) {
      const MomentEval ev = detail::select_block(sys(t), q, variant);
      const Eigen::VectorXd wg = w * ev.mean;
      Objective o;
      o.value = ev.mean.dot(wg);
      o.grad = 2.0 * ev.jacobian.transpose() * wg;
      o.hess = 2.0 * ev.jacobian.transpose() * w * ev.jacobian;
      if (variant == CbpsVariant::over_identified && o.grad.allFinite()) {
        // With nonzero residuals the Gauss-Newton term alone converges only
        // linearly; difference the analytic gradient instead when it is PD.
        Eigen::MatrixXd h;
        try {
          h = fd_jacobian(gradient, t, 1e-5);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::NonFiniteExp) throw;
        }
        if (h.size() > 0 && h.allFinite()) {
          h = 0.5 * (h + h.transpose());
          if (Eigen::LLT<Eigen::MatrixXd>(h).info() == Eigen::Success) o.hess = h;
        }
      }
      return o;
    };
    return minimize_newton(objective, std::move(x0), cfg);
  };
  SolveResult first = run(Eigen::MatrixXd::Identity(k, k), std::move(start));
  if (!first.converged)
    fail(ErrorCode::NotConverged, "GMM step 1: " + first.message +
                                      ", |grad|_inf = " + std::to_string(first.grad_norm));
  if (variant == CbpsVariant::exact) {
    out.theta = std::move(first.x);
    out.objective = first.value;
    out.grad_norm = first.grad_norm;
    out.iterations = first.iterations;
    out.weight = Eigen::MatrixXd::Identity(k, k);
    return out;
  }
  const MomentEval ev = sys(first.x, true);
  Eigen::MatrixXd s = ev.per_obs.transpose() * ev.per_obs / static_cast<double>(ev.per_obs.rows());
  s.diagonal().array() += 1e-8 * s.trace() / static_cast<double>(k);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
  Eigen::MatrixXd w;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
      ldlt.vectorD().minCoeff() > kSingularTol * std::max(1.0, s.trace())) {
    w = ldlt.solve(Eigen::MatrixXd::Identity(k, k));
    w = 0.5 * (w + w.transpose());
  } else {
    out.warnings.push_back("SingularGmmWeight: second-step weight matrix singular, using identity");
    w = Eigen::MatrixXd::Identity(k, k);
  }
  SolveResult second = run(w, first.x);
  if (!second.converged)
    fail(ErrorCode::NotConverged, "GMM step 2: " + second.message +
                                      ", |grad|_inf = " + std::to_string(second.grad_norm));
  out.theta = std::move(second.x);
  out.objective = second.value;
  out.grad_norm = second.grad_norm;
  out.iterations = first.iterations + second.iterations;
  out.weight = std::move(w);
  return out;
}

// CBPS on covariates `z` (intercept appended per the dataset flag).  Weights
// are exp(theta' z_i) normalized over the control group.
inline BalanceFit solve_cbps(const Eigen::MatrixXd& z, const Dataset& data, const SolverConfig& cfg,
                             CbpsVariant variant = CbpsVariant::over_identified) {
  const Eigen::MatrixXd z_aug = with_intercept(z, data);
  CbpsMoments sys(z_aug, data.treat());
  GmmResult gmm = solve_gmm(sys, Eigen::VectorXd::Zero(z_aug.cols()), cfg, variant);
  BalanceFit fit = make_fit(make_problem(z_aug, data), std::move(gmm.theta),
                            variant == CbpsVariant::exact ? "cbps_exact" : "cbps");
  fit.converged = true;
  fit.grad_norm = gmm.grad_norm;
  fit.iterations = gmm.iterations;
  fit.objective = gmm.objective;
  fit.warnings = std::move(gmm.warnings);
  return fit;
}

inline BalanceFit solve_cbps(const Dataset& data, const SolverConfig& cfg,
                             ReplicatePolicy policy = ReplicatePolicy::first,
                             CbpsVariant variant = CbpsVariant::over_identified) {
  return solve_cbps(data.covariates(policy), data, cfg, variant);
}

// Ybar_trt - sum_{T=0} w_i Y_i.
inline double att(const WeightVector& weights, const Dataset& data) {
  const Eigen::VectorXd& y = data.outcome();
  if (weights.rows() != data.control_rows())
    fail(ErrorCode::DimensionMismatch, "weights are not aligned with the control group");
  double treated = 0.0;
  for (std::size_t i : data.treated_rows()) treated += y(static_cast<Eigen::Index>(i));
  treated /= static_cast<double>(data.n_treated());
  double control = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k)
    control += weights.values()(static_cast<Eigen::Index>(k)) * y(static_cast<Eigen::Index>(weights.rows()[k]));
  return treated - control;
}

}  // namespace mebal
